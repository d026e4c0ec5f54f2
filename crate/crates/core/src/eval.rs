//! Evaluation protocol: interpolate held-out intermediate frames and report
//! PSNR / SSIM / Tera-FLOPs / runtime per variant.

use std::time::Instant;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::image::Image;
use crate::metrics::{psnr, ssim, EvalReport, TERA};
use crate::pipeline::{estimate_stage, interpolate_at, PipelineParams, Variant};
use crate::training::Sample;

/// Evaluates any interpolator closure against the samples' ground truths.
///
/// The closure receives `(sample index, sample, t)` and returns the predicted
/// frame plus its realized FLOPs. Used directly by tests with stub models.
pub fn evaluate_with<F>(samples: &[Sample], mut interpolate: F) -> Result<EvalReport>
where
    F: FnMut(usize, &Sample, f64) -> Result<(Image, f64)>,
{
    let start = Instant::now();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut flops_sum = 0.0;
    let mut count = 0usize;
    for (idx, sample) in samples.iter().enumerate() {
        for (t, gt) in &sample.gts {
            let (pred, flops) = interpolate(idx, sample, *t)?;
            psnr_sum += psnr(&pred, gt, 1.0)?;
            ssim_sum += ssim(&pred, gt)?;
            flops_sum += flops;
            count += 1;
        }
    }
    Ok(EvalReport {
        psnr_mean: psnr_sum / count as f64,
        ssim_mean: ssim_sum / count as f64,
        tera_flops: flops_sum / TERA,
        runtime_s: start.elapsed().as_secs_f64(),
        n_samples: count,
    })
}

/// Evaluates the trained pipeline on in-memory samples under one variant.
///
/// The flow stage runs once per sample and is reused across that sample's
/// ground-truth times.
pub fn evaluate_pipeline(
    cfg: &ModelConfig,
    params: &PipelineParams,
    samples: &[Sample],
    variant: Variant,
) -> Result<EvalReport> {
    let mut stages = Vec::with_capacity(samples.len());
    for s in samples {
        stages.push(estimate_stage(cfg, params, &s.i0, &s.i1, &s.events)?);
    }
    evaluate_with(samples, |idx, s, t| {
        let out = interpolate_at(cfg, params, &stages[idx], &s.i0, &s.i1, &s.events, t, variant)?;
        Ok((out.fused, out.flops))
    })
}
