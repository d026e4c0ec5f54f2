//! End-to-end inference: events to voxels, spline estimation, boundary
//! warping, gating, residual refinement, and fusion.
//!
//! The flow pass is factored out of the per-`t` work deliberately: splines are
//! estimated once per frame pair and then sampled per requested time, so
//! interpolating extra timestamps costs only warps and synthesis.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::events::{reverse_stream, split_stream, voxelize, EventStream, VoxelGrid};
use crate::flow_net::warp_boundaries;
use crate::gating::{gate_forward, BinaryMask, GateMap, GateMode, RegionScheme};
use crate::image::Image;
use crate::metrics::count_flops;
use crate::params::ParamSet;
use crate::residual::{
    blend_and_montage, pad_region_flows, refine_region, refine_warp, RefinedFlows, RegionBundle,
};
use crate::splines_warp::{FlowField, MotionSpline};

/// Checkpointed parameters for the four sub-modules.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub flow: ParamSet,
    pub gate: ParamSet,
    pub residual: ParamSet,
    pub fusion: ParamSet,
}

/// Which processing route to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Gate decides which regions get residual refinement.
    Gated,
    /// Refine every region, no gating decision.
    AllRegions,
    /// Skip residual refinement entirely; fusion sees the rough warps.
    NoRefinement,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Gated => "gated",
            Variant::AllRegions => "all",
            Variant::NoRefinement => "none",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "gated" => Ok(Variant::Gated),
            "all" => Ok(Variant::AllRegions),
            "none" => Ok(Variant::NoRefinement),
            other => Err(Error::invalid(format!("unknown variant {other}"))),
        }
    }
}

/// Per-pair state reusable across interpolation times.
pub struct FlowStage {
    pub spline01: MotionSpline,
    pub spline10: MotionSpline,
    pub voxel01: VoxelGrid,
}

/// Everything produced while interpolating one timestamp.
pub struct StageOutputs {
    pub f0t: FlowField,
    pub f1t: FlowField,
    pub i0_warp: Image,
    pub i1_warp: Image,
    pub gate: Option<GateMap>,
    pub dynamic_flags: Vec<bool>,
    pub refined: RefinedFlows,
    pub i0_refine: Image,
    pub i1_refine: Image,
    pub fused: Image,
    /// Realized cost of this variant in raw FLOPs.
    pub flops: f64,
}

/// Runs the flow estimator once for a frame pair.
pub fn estimate_stage(
    cfg: &ModelConfig,
    params: &PipelineParams,
    i0: &Image,
    i1: &Image,
    events: &EventStream,
) -> Result<FlowStage> {
    let (h, w) = (i0.height(), i0.width());
    let voxel01 = voxelize(events, cfg.voxel_bins, h, w)?;
    let net = cfg.flow_net();
    let (spline01, spline10) = net.estimate_splines(&params.flow, i0, i1, &voxel01)?;
    Ok(FlowStage {
        spline01,
        spline10,
        voxel01,
    })
}

/// Splits the event stream at `t` and builds both directed voxel grids.
pub fn directed_voxels(
    cfg: &ModelConfig,
    events: &EventStream,
    t: f64,
    h: usize,
    w: usize,
) -> Result<(VoxelGrid, VoxelGrid)> {
    let (e0t, et1) = split_stream(events, t)?;
    let v0t = voxelize(&e0t, cfg.voxel_bins, h, w)?;
    let v1t = voxelize(&reverse_stream(&et1), cfg.voxel_bins, h, w)?;
    Ok((v0t, v1t))
}

/// Interpolates one timestamp given an already-estimated flow stage.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_at(
    cfg: &ModelConfig,
    params: &PipelineParams,
    stage: &FlowStage,
    i0: &Image,
    i1: &Image,
    events: &EventStream,
    t: f64,
    variant: Variant,
) -> Result<StageOutputs> {
    let (h, w) = (i0.height(), i0.width());
    let (v0t, v1t) = directed_voxels(cfg, events, t, h, w)?;
    let (i0_warp, i1_warp, f0t, f1t) =
        warp_boundaries(i0, i1, &stage.spline01, &stage.spline10, t)?;

    let regions = cfg.region_scheme.regions(h, w)?;
    let (gate, dynamic_flags) = match variant {
        Variant::NoRefinement => (None, vec![false; regions.len()]),
        Variant::AllRegions => (None, vec![true; regions.len()]),
        Variant::Gated => {
            if cfg.region_scheme != RegionScheme::Overlapping9 {
                return Err(Error::invalid(
                    "gated inference requires the nine-window region scheme",
                ));
            }
            let (gate, mask) = gate_forward(
                &f0t,
                &f1t,
                &cfg.gate_net(),
                &params.gate,
                GateMode::Eval,
                cfg.gating.temperature,
            )?;
            let flags = mask.flags();
            (Some(gate), flags)
        }
    };

    let nets = cfg.residual_nets();
    let any_dynamic = dynamic_flags.iter().any(|&d| d);
    let (refined, i0_refine, i1_refine) = if !any_dynamic {
        // fusion consumes the rough warps unchanged
        (
            RefinedFlows::zeros(h, w),
            i0_warp.clone(),
            i1_warp.clone(),
        )
    } else {
        let mut padded: Vec<Option<(FlowField, FlowField)>> = Vec::with_capacity(regions.len());
        for (region, &dynamic) in regions.iter().zip(&dynamic_flags) {
            if !dynamic {
                padded.push(None);
                continue;
            }
            let bundle = RegionBundle::extract(
                *region, i0, i1, &v0t, &v1t, &i0_warp, &i1_warp, &f0t, &f1t,
            )?;
            let (r0, r1) = refine_region(&bundle, &nets, &params.residual)?;
            padded.push(Some(pad_region_flows(region, &r0, &r1, h, w)));
        }
        let refined = blend_and_montage(
            &padded,
            &dynamic_flags,
            &regions,
            &nets,
            &params.residual,
            h,
            w,
        )?;
        let (i0r, i1r) = refine_warp(&i0_warp, &i1_warp, &refined)?;
        (refined, i0r, i1r)
    };

    let fused = cfg.fusion_net().fuse(
        &params.fusion,
        i0,
        i1,
        &v0t,
        &v1t,
        &i0_refine,
        &i1_refine,
    )?;

    let flops = realized_flops(cfg, h, w, variant, &dynamic_flags);
    Ok(StageOutputs {
        f0t,
        f1t,
        i0_warp,
        i1_warp,
        gate,
        dynamic_flags,
        refined,
        i0_refine,
        i1_refine,
        fused,
        flops,
    })
}

/// Convenience wrapper: flow estimation plus one interpolation.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_full(
    cfg: &ModelConfig,
    params: &PipelineParams,
    i0: &Image,
    i1: &Image,
    events: &EventStream,
    t: f64,
    variant: Variant,
) -> Result<StageOutputs> {
    let stage = estimate_stage(cfg, params, i0, i1, events)?;
    interpolate_at(cfg, params, &stage, i0, i1, events, t, variant)
}

/// Realized cost of one pass under a given variant, in raw FLOPs.
pub fn realized_flops(
    cfg: &ModelConfig,
    h: usize,
    w: usize,
    variant: Variant,
    dynamic_flags: &[bool],
) -> f64 {
    match variant {
        // no gate pass, no refinement
        Variant::NoRefinement => {
            cfg.flow_net().flops(h, w) + cfg.fusion_net().flops(h, w)
        }
        // refinement everywhere without running the gate
        Variant::AllRegions => {
            count_flops(cfg, h, w, dynamic_flags) - cfg.gate_net().flops(h, w)
        }
        Variant::Gated => count_flops(cfg, h, w, dynamic_flags),
    }
}

/// Eval-mode gate decision as a [`BinaryMask`] helper for reporting.
pub fn gate_mask(cfg: &ModelConfig, params: &PipelineParams, f0t: &FlowField, f1t: &FlowField) -> Result<(GateMap, BinaryMask)> {
    gate_forward(
        f0t,
        f1t,
        &cfg.gate_net(),
        &params.gate,
        GateMode::Eval,
        cfg.gating.temperature,
    )
}

/// Initializes untrained parameters for every sub-module; used by tests and
/// as the starting point for staged training.
pub fn init_pipeline_params(cfg: &ModelConfig, seed: u64) -> PipelineParams {
    PipelineParams {
        flow: cfg.flow_net().init_params(seed ^ 0x666c_6f77),
        gate: cfg.gate_net().init_params(seed ^ 0x6761_7465),
        residual: cfg.residual_nets().init_params(seed ^ 0x7265_7369),
        fusion: cfg.fusion_net().init_params(seed ^ 0x6675_7365),
    }
}
