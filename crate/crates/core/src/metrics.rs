//! Image quality metrics and analytic compute accounting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::Image;

pub use crate::nets::{conv2d_flops, window_attention_flops};

/// One trillion floating-point operations.
pub const TERA: f64 = 1e12;

/// Aggregate evaluation results for a dataset run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub tera_flops: f64,
    pub runtime_s: f64,
    pub n_samples: usize,
}

/// Peak signal-to-noise ratio in dB, capped at 100 for near-identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            format!("{:?}", a.data.dim()),
            format!("{:?}", b.data.dim()),
        ));
    }
    let mse = (&a.data - &b.data).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Array2<f64> {
    let mut k = Array2::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[[y, x]] = v;
            sum += v;
        }
    }
    k /= sum;
    k
}

/// Structural similarity with the standard 11x11 Gaussian window (sigma 1.5),
/// dynamic range 1.0, averaged over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            format!("{:?}", a.data.dim()),
            format!("{:?}", b.data.dim()),
        ));
    }
    let (h, w, channels) = a.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let kernel = gaussian_kernel();
    let mut channel_means = Vec::with_capacity(channels);
    for ch in 0..channels {
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut m1, mut m2, mut q1, mut q2, mut q12) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wgt = kernel[[ky, kx]];
                        let va = a.data[[y0 + ky, x0 + kx, ch]];
                        let vb = b.data[[y0 + ky, x0 + kx, ch]];
                        m1 += wgt * va;
                        m2 += wgt * vb;
                        q1 += wgt * va * va;
                        q2 += wgt * vb * vb;
                        q12 += wgt * va * vb;
                    }
                }
                let v1 = q1 - m1 * m1;
                let v2 = q2 - m2 * m2;
                let cov = q12 - m1 * m2;
                let s = ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
                    / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
                total += s;
                count += 1;
            }
        }
        channel_means.push(total / count as f64);
    }
    Ok(channel_means.iter().sum::<f64>() / channels as f64)
}

/// Analytic cost of one interpolation pass in raw FLOPs: flow estimation,
/// gating, refinement over the mask's dynamic regions (plus one blend pass if
/// any region is dynamic), and fusion.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize, dynamic_flags: &[bool]) -> f64 {
    let mut total = cfg.flow_net().flops(h, w) + cfg.gate_net().flops(h, w);
    let regions = cfg
        .region_scheme
        .regions(h, w)
        .expect("resolution fits region scheme");
    assert_eq!(dynamic_flags.len(), regions.len());
    let nets = cfg.residual_nets();
    let mut any_dynamic = false;
    for (region, &dynamic) in regions.iter().zip(dynamic_flags) {
        if dynamic {
            total += nets.refine_flops(region.h, region.w);
            any_dynamic = true;
        }
    }
    if any_dynamic {
        total += nets.attention_flops(h, w);
    }
    total + cfg.fusion_net().flops(h, w)
}

/// [`count_flops`] in Tera-FLOPs.
pub fn count_tera_flops(cfg: &ModelConfig, h: usize, w: usize, dynamic_flags: &[bool]) -> f64 {
    count_flops(cfg, h, w, dynamic_flags) / TERA
}
