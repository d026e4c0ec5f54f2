//! Residual optical flow over dynamic regions: per-region refinement,
//! zero-padding to frame size, attention-weighted blending across overlapping
//! windows, and the final refinement warp.
//!
//! Static regions contribute nothing; the montaged residual flow is exactly
//! zero outside the union of dynamic footprints, so the refinement warp leaves
//! those pixels untouched.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::gating::Region;
use crate::image::Image;
use crate::nets::{conv2d_flops, head_forward, init_head, UNetTrunk};
use crate::params::{ParamSet, VarMap};
use crate::splines_warp::{
    backward_warp, flow_to_nchw, image_to_nchw, nchw_to_flow, FlowField,
};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ResidualConfig {
    pub base_channels: usize,
    pub attention_channels: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            base_channels: 16,
            attention_channels: 8,
        }
    }
}

/// Refinement and attention networks for a fixed region count.
#[derive(Debug, Clone)]
pub struct ResidualNets {
    pub cfg: ResidualConfig,
    pub image_channels: usize,
    pub voxel_bins: usize,
    pub region_count: usize,
}

impl ResidualNets {
    pub fn new(
        cfg: ResidualConfig,
        image_channels: usize,
        voxel_bins: usize,
        region_count: usize,
    ) -> Self {
        ResidualNets {
            cfg,
            image_channels,
            voxel_bins,
            region_count,
        }
    }

    /// Crop channels: I0, I1, V0t, V1t, I0_warp, I1_warp, F0t, F1t.
    pub fn refine_in_channels(&self) -> usize {
        4 * self.image_channels + 2 * self.voxel_bins + 4
    }

    fn refine_trunk(&self) -> UNetTrunk {
        UNetTrunk::new(
            "residual.refine",
            self.refine_in_channels(),
            self.cfg.base_channels,
            2,
        )
    }

    fn attn_trunk(&self) -> UNetTrunk {
        UNetTrunk::new(
            "residual.attn",
            4 * self.region_count,
            self.cfg.attention_channels,
            2,
        )
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.refine_trunk().init_into(&mut ps, &mut rng);
        init_head(&mut ps, "residual.refine.head", self.cfg.base_channels, 4);
        self.attn_trunk().init_into(&mut ps, &mut rng);
        init_head(
            &mut ps,
            "residual.attn.head",
            self.cfg.attention_channels,
            self.region_count,
        );
        ps
    }

    /// Refinement cost for one region crop.
    pub fn refine_flops(&self, rh: usize, rw: usize) -> f64 {
        self.refine_trunk().flops(rh, rw)
            + conv2d_flops(3, self.cfg.base_channels, 4, rh, rw)
    }

    /// Blending cost over the full frame (runs once when anything is dynamic).
    pub fn attention_flops(&self, h: usize, w: usize) -> f64 {
        self.attn_trunk().flops(h, w)
            + conv2d_flops(3, self.cfg.attention_channels, self.region_count, h, w)
    }
}

/// Everything the refinement net sees for one region.
#[derive(Debug, Clone)]
pub struct RegionBundle {
    pub region: Region,
    pub i0: Image,
    pub i1: Image,
    pub v0t: VoxelGrid,
    pub v1t: VoxelGrid,
    pub i0_warp: Image,
    pub i1_warp: Image,
    pub f0t: FlowField,
    pub f1t: FlowField,
}

fn crop_image(img: &Image, r: &Region) -> Image {
    Image::new(
        img.data
            .slice(ndarray::s![r.y0..r.y0 + r.h, r.x0..r.x0 + r.w, ..])
            .to_owned(),
    )
}

fn crop_vox(v: &VoxelGrid, r: &Region) -> VoxelGrid {
    VoxelGrid {
        data: v
            .data
            .slice(ndarray::s![.., r.y0..r.y0 + r.h, r.x0..r.x0 + r.w])
            .to_owned(),
    }
}

fn crop_flow(f: &FlowField, r: &Region) -> FlowField {
    FlowField {
        u: f.u
            .slice(ndarray::s![r.y0..r.y0 + r.h, r.x0..r.x0 + r.w])
            .to_owned(),
        v: f.v
            .slice(ndarray::s![r.y0..r.y0 + r.h, r.x0..r.x0 + r.w])
            .to_owned(),
    }
}

impl RegionBundle {
    /// Crops all pipeline tensors down to one region's footprint.
    #[allow(clippy::too_many_arguments)]
    pub fn extract(
        region: Region,
        i0: &Image,
        i1: &Image,
        v0t: &VoxelGrid,
        v1t: &VoxelGrid,
        i0_warp: &Image,
        i1_warp: &Image,
        f0t: &FlowField,
        f1t: &FlowField,
    ) -> Result<RegionBundle> {
        let (h, w, _) = i0.data.dim();
        if region.y0 + region.h > h || region.x0 + region.w > w {
            return Err(Error::invalid(format!(
                "region {:?} exceeds {h}x{w}",
                region
            )));
        }
        if !i0.same_shape(i1) || !i0.same_shape(i0_warp) || !i0.same_shape(i1_warp) {
            return Err(Error::invalid("bundle image shapes differ"));
        }
        if f0t.dim() != (h, w) || f1t.dim() != (h, w) {
            return Err(Error::invalid("bundle flow shapes differ"));
        }
        Ok(RegionBundle {
            region,
            i0: crop_image(i0, &region),
            i1: crop_image(i1, &region),
            v0t: crop_vox(v0t, &region),
            v1t: crop_vox(v1t, &region),
            i0_warp: crop_image(i0_warp, &region),
            i1_warp: crop_image(i1_warp, &region),
            f0t: crop_flow(f0t, &region),
            f1t: crop_flow(f1t, &region),
        })
    }

    /// Stacks the crops into the refinement net's input layout `[1, Cin, h, w]`.
    pub fn to_nchw(&self) -> ArrayD<f64> {
        let pieces = [
            image_to_nchw(&self.i0),
            image_to_nchw(&self.i1),
            self.v0t.data.clone().into_dyn().insert_axis(ndarray::Axis(0)),
            self.v1t.data.clone().into_dyn().insert_axis(ndarray::Axis(0)),
            image_to_nchw(&self.i0_warp),
            image_to_nchw(&self.i1_warp),
            flow_to_nchw(&self.f0t),
            flow_to_nchw(&self.f1t),
        ];
        let views: Vec<_> = pieces.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(1), &views).expect("bundle concat")
    }
}

/// Refinement net forward: `[N, Cin, h, w]` crops to `[N, 4, h, w]` residual
/// flows, channels `(u0, v0, u1, v1)`.
pub fn op_refine(tape: &mut Tape, vars: &VarMap, nets: &ResidualNets, x: Var) -> Var {
    let feat = nets.refine_trunk().forward(tape, vars, x);
    head_forward(tape, vars, "residual.refine.head", feat)
}

/// Runs the refinement net on one region bundle.
pub fn refine_region(
    bundle: &RegionBundle,
    nets: &ResidualNets,
    params: &ParamSet,
) -> Result<(FlowField, FlowField)> {
    let input = bundle.to_nchw();
    if input.shape()[1] != nets.refine_in_channels() {
        return Err(Error::shape(
            format!("{} input channels", nets.refine_in_channels()),
            format!("{}", input.shape()[1]),
        ));
    }
    if bundle.region.h % 2 != 0 || bundle.region.w % 2 != 0 {
        return Err(Error::invalid(format!(
            "region {}x{} not divisible by 2",
            bundle.region.h, bundle.region.w
        )));
    }
    let mut tape = Tape::new();
    let vars = VarMap::load(&mut tape, params);
    let xv = tape.constant(input);
    let out = op_refine(&mut tape, &vars, nets, xv);
    let val = tape.value(out);
    let f0 = nchw_to_flow(&val.slice_axis(ndarray::Axis(1), (0..2).into()).to_owned(), 0);
    let f1 = nchw_to_flow(&val.slice_axis(ndarray::Axis(1), (2..4).into()).to_owned(), 0);
    Ok((f0, f1))
}

/// Full-frame residual flows, zero outside dynamic footprints.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedFlows {
    pub f0t: FlowField,
    pub f1t: FlowField,
}

impl RefinedFlows {
    pub fn zeros(h: usize, w: usize) -> Self {
        RefinedFlows {
            f0t: FlowField::zeros(h, w),
            f1t: FlowField::zeros(h, w),
        }
    }
}

/// Attention-blended montage on the tape. `padded[i]` is the full-frame
/// `[1, 4, H, W]` residual flow of region `i` (zero outside its footprint),
/// present only for dynamic regions.
pub fn op_blend(
    tape: &mut Tape,
    vars: &VarMap,
    nets: &ResidualNets,
    padded: &[Option<Var>],
    regions: &[Region],
    h: usize,
    w: usize,
) -> (Var, Var) {
    assert_eq!(padded.len(), regions.len());
    let zero = tape.constant(ArrayD::zeros(IxDyn(&[1, 4, h, w])));
    let slots: Vec<Var> = padded.iter().map(|p| p.unwrap_or(zero)).collect();
    let stacked = tape.concat_ch(&slots);
    let feat = nets.attn_trunk().forward(tape, vars, stacked);
    let logits = head_forward(tape, vars, "residual.attn.head", feat);

    let mut mask = ArrayD::zeros(IxDyn(&[1, regions.len(), h, w]));
    for (i, r) in regions.iter().enumerate() {
        if padded[i].is_none() {
            continue;
        }
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                mask[[0, i, y, x]] = 1.0;
            }
        }
    }
    let weights = tape.masked_softmax_ch(logits, mask);

    let mut acc: Option<Var> = None;
    for (i, slot) in padded.iter().enumerate() {
        let Some(flow) = slot else { continue };
        let wi = tape.slice_ch(weights, i, i + 1);
        let contrib = tape.mul_broadcast_ch(wi, *flow);
        acc = Some(match acc {
            Some(a) => tape.add(a, contrib),
            None => contrib,
        });
    }
    let total = acc.unwrap_or(zero);
    (tape.slice_ch(total, 0, 2), tape.slice_ch(total, 2, 4))
}

/// Blends padded per-region flows into full-frame refined flows.
///
/// `padded[i]` must be `Some` exactly where `flags[i]` is true; each flow pair
/// is full-frame sized. Overlap pixels mix contributors with per-pixel
/// attention weights normalized over contributors only.
pub fn blend_and_montage(
    padded: &[Option<(FlowField, FlowField)>],
    flags: &[bool],
    regions: &[Region],
    nets: &ResidualNets,
    params: &ParamSet,
    h: usize,
    w: usize,
) -> Result<RefinedFlows> {
    if padded.len() != regions.len() || flags.len() != regions.len() {
        return Err(Error::invalid(format!(
            "expected {} region entries, got {} flows / {} flags",
            regions.len(),
            padded.len(),
            flags.len()
        )));
    }
    for (i, (p, &f)) in padded.iter().zip(flags).enumerate() {
        if p.is_some() != f {
            return Err(Error::invalid(format!(
                "region {i}: dynamic flag {f} but flow {}",
                if p.is_some() { "present" } else { "missing" }
            )));
        }
        if let Some((f0, f1)) = p {
            if f0.dim() != (h, w) || f1.dim() != (h, w) {
                return Err(Error::shape(
                    format!("padded flow {h}x{w}"),
                    format!("{:?}", f0.dim()),
                ));
            }
        }
    }
    if padded.iter().all(|p| p.is_none()) {
        return Ok(RefinedFlows::zeros(h, w));
    }
    let mut tape = Tape::new();
    let vars = VarMap::load(&mut tape, params);
    let slot_vars: Vec<Option<Var>> = padded
        .iter()
        .map(|p| {
            p.as_ref().map(|(f0, f1)| {
                let mut arr = ArrayD::zeros(IxDyn(&[1, 4, h, w]));
                for y in 0..h {
                    for x in 0..w {
                        arr[[0, 0, y, x]] = f0.u[[y, x]];
                        arr[[0, 1, y, x]] = f0.v[[y, x]];
                        arr[[0, 2, y, x]] = f1.u[[y, x]];
                        arr[[0, 3, y, x]] = f1.v[[y, x]];
                    }
                }
                tape.constant(arr)
            })
        })
        .collect();
    let (f0, f1) = op_blend(&mut tape, &vars, nets, &slot_vars, regions, h, w);
    Ok(RefinedFlows {
        f0t: nchw_to_flow(tape.value(f0), 0),
        f1t: nchw_to_flow(tape.value(f1), 0),
    })
}

/// Pads a region-sized flow pair out to frame size with exact zeros.
pub fn pad_region_flows(
    region: &Region,
    f0: &FlowField,
    f1: &FlowField,
    h: usize,
    w: usize,
) -> (FlowField, FlowField) {
    let mut p0 = FlowField::zeros(h, w);
    let mut p1 = FlowField::zeros(h, w);
    for y in 0..region.h {
        for x in 0..region.w {
            p0.u[[region.y0 + y, region.x0 + x]] = f0.u[[y, x]];
            p0.v[[region.y0 + y, region.x0 + x]] = f0.v[[y, x]];
            p1.u[[region.y0 + y, region.x0 + x]] = f1.u[[y, x]];
            p1.v[[region.y0 + y, region.x0 + x]] = f1.v[[y, x]];
        }
    }
    (p0, p1)
}

/// Backward-warps the rough frames by the refined residual flows. Pixels with
/// zero residual reproduce the input exactly.
pub fn refine_warp(
    i0_warp: &Image,
    i1_warp: &Image,
    refined: &RefinedFlows,
) -> Result<(Image, Image)> {
    Ok((
        backward_warp(i0_warp, &refined.f0t)?,
        backward_warp(i1_warp, &refined.f1t)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::RegionScheme;
    use crate::params::VarMap;
    use crate::splines_warp::op_backward_warp;
    use crate::tensor::gradcheck::max_rel_error;
    use crate::training::Adam;
    use ndarray::Array2;

    fn nets_for(region_count: usize) -> ResidualNets {
        ResidualNets::new(
            ResidualConfig {
                base_channels: 8,
                attention_channels: 4,
            },
            1,
            3,
            region_count,
        )
    }

    fn dummy_bundle(region: Region) -> RegionBundle {
        let full_h = region.y0 + region.h;
        let full_w = region.x0 + region.w;
        let img = Image::from_gray(Array2::from_shape_fn((full_h, full_w), |(y, x)| {
            ((y * 3 + x) as f64 * 0.13).sin() * 0.4 + 0.5
        }));
        let vox = VoxelGrid::zeros(3, full_h, full_w);
        let flow = FlowField::constant(full_h, full_w, 0.4, -0.2);
        RegionBundle::extract(region, &img, &img, &vox, &vox, &img, &img, &flow, &flow).unwrap()
    }

    #[test]
    fn refine_region_output_shape() {
        let nets = nets_for(9);
        let params = nets.init_params(1);
        let region = Region {
            index: 0,
            y0: 0,
            x0: 0,
            h: 8,
            w: 8,
        };
        let (f0, f1) = refine_region(&dummy_bundle(region), &nets, &params).unwrap();
        assert_eq!(f0.dim(), (8, 8));
        assert_eq!(f1.dim(), (8, 8));
        // zero-initialized head: residuals start at exactly zero
        assert!(f0.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_gradient_checks_out() {
        let nets = nets_for(9);
        let mut params = nets.init_params(2);
        {
            use rand::Rng;
            let mut rng = ChaCha20Rng::seed_from_u64(23);
            for (name, v) in params.iter_mut() {
                if name.starts_with("residual.refine") {
                    v.mapv_inplace(|x| x + rng.gen_range(-0.01..0.01));
                }
            }
            // keep the re-warp sampling off integer coordinates
            for (i, b) in params
                .get_mut("residual.refine.head.b")
                .unwrap()
                .iter_mut()
                .enumerate()
            {
                *b = 0.27 + 0.06 * i as f64;
            }
        }
        let names: Vec<String> = params
            .iter()
            .filter(|(n, _)| n.starts_with("residual.refine"))
            .map(|(n, _)| n.clone())
            .collect();
        let values: Vec<ArrayD<f64>> = names
            .iter()
            .map(|n| params.get(n).unwrap().clone())
            .collect();
        let bundle = dummy_bundle(Region {
            index: 0,
            y0: 0,
            x0: 0,
            h: 8,
            w: 8,
        });
        let input = bundle.to_nchw();
        let warped = image_to_nchw(&bundle.i0_warp);
        let gt = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |ix| {
            ((ix[2] * 8 + ix[3]) as f64 * 0.31).cos() * 0.3 + 0.5
        });
        let nets2 = nets.clone();
        let err = max_rel_error(
            |tape, vars| {
                let mut vm = std::collections::BTreeMap::new();
                for (name, var) in names.iter().zip(vars) {
                    vm.insert(name.clone(), *var);
                }
                let vars = VarMap::from_map(vm);
                let xv = tape.constant(input.clone());
                let out = op_refine(tape, &vars, &nets2, xv);
                let f0 = tape.slice_ch(out, 0, 2);
                let iw = tape.constant(warped.clone());
                let rewarped = op_backward_warp(tape, iw, f0);
                tape.l1_to(rewarped, &gt)
            },
            &values,
            1e-5,
            8,
            19,
        );
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn refine_overfits_a_one_pixel_residual() {
        // the rough warp is off by a 1 px translation; the refinement net must
        // cut the photometric error of the re-warped crop by at least half
        let nets = nets_for(9);
        let mut params = nets.init_params(3);
        let h = 16;
        let w = 16;
        let gt = Image::from_gray(Array2::from_shape_fn((h, w), |(y, x)| {
            0.5 + 0.3 * ((x as f64 * 0.8).sin() * (y as f64 * 0.6).cos())
        }));
        // warp error: content shifted right by one pixel
        let shifted = Image::from_gray(Array2::from_shape_fn((h, w), |(y, x)| {
            let sx = if x == 0 { 0 } else { x - 1 };
            gt.data[[y, sx, 0]]
        }));
        let region = Region {
            index: 0,
            y0: 0,
            x0: 0,
            h,
            w,
        };
        let vox = VoxelGrid::zeros(3, h, w);
        let flow = FlowField::zeros(h, w);
        let bundle = RegionBundle::extract(
            region, &gt, &gt, &vox, &vox, &shifted, &shifted, &flow, &flow,
        )
        .unwrap();
        let input = bundle.to_nchw();
        let warped = image_to_nchw(&shifted);
        let gt_t = image_to_nchw(&gt);

        let initial = (&shifted.data - &gt.data).mapv(f64::abs).mean().unwrap();
        let mut opt = Adam::new();
        let mut last = initial;
        for _ in 0..150 {
            let mut tape = Tape::new();
            let vars = VarMap::load(&mut tape, &params);
            let xv = tape.constant(input.clone());
            let out = op_refine(&mut tape, &vars, &nets, xv);
            let f0 = tape.slice_ch(out, 0, 2);
            let iw = tape.constant(warped.clone());
            let rewarped = op_backward_warp(&mut tape, iw, f0);
            let loss = tape.l1_to(rewarped, &gt_t);
            last = tape.value(loss)[[]];
            let grads = tape.backward(loss);
            let gmap = vars.gradients(&grads);
            opt.step(&mut params, &gmap, 3e-3);
        }
        assert!(
            last <= 0.5 * initial,
            "L1 went {initial:.4} -> {last:.4}, wanted at least a 50% cut"
        );
    }

    #[test]
    fn blend_single_contributor_is_exact() {
        let h = 16;
        let w = 16;
        let regions = RegionScheme::Overlapping9.regions(h, w).unwrap();
        let nets = nets_for(9);
        let params = nets.init_params(5);
        let rf = FlowField::constant(h, w, 0.0, 0.0);
        let mut some_flow = FlowField::zeros(h, w);
        let r = &regions[4];
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                some_flow.u[[y, x]] = 1.25;
                some_flow.v[[y, x]] = -0.5;
            }
        }
        let mut padded: Vec<Option<(FlowField, FlowField)>> = vec![None; 9];
        padded[4] = Some((some_flow.clone(), rf.clone()));
        let mut flags = vec![false; 9];
        flags[4] = true;
        let out =
            blend_and_montage(&padded, &flags, &regions, &nets, &params, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert!((out.f0t.u[[y, x]] - some_flow.u[[y, x]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blend_no_contributors_is_zero() {
        let h = 16;
        let w = 16;
        let regions = RegionScheme::Overlapping9.regions(h, w).unwrap();
        let nets = nets_for(9);
        let params = nets.init_params(5);
        let padded: Vec<Option<(FlowField, FlowField)>> = vec![None; 9];
        let out =
            blend_and_montage(&padded, &vec![false; 9], &regions, &nets, &params, h, w)
                .unwrap();
        assert!(out.f0t.u.iter().all(|&v| v == 0.0));
        assert!(out.f1t.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blend_equal_logits_averages_overlap() {
        // zero-initialized attention head -> identical logits -> the overlap
        // of two contributors is their arithmetic mean
        let h = 16;
        let w = 16;
        let regions = RegionScheme::Overlapping9.regions(h, w).unwrap();
        let nets = nets_for(9);
        let params = nets.init_params(6);
        let constant_pair = |u: f64| {
            let mut f = FlowField::zeros(h, w);
            f.u.fill(u);
            (f, FlowField::zeros(h, w))
        };
        // regions 0 and 1 overlap horizontally
        let mut padded: Vec<Option<(FlowField, FlowField)>> = vec![None; 9];
        let (mut a0, a1) = constant_pair(2.0);
        let (mut b0, b1) = constant_pair(4.0);
        // zero them outside their footprints, as padding guarantees
        zero_outside(&mut a0, &regions[0]);
        zero_outside(&mut b0, &regions[1]);
        padded[0] = Some((a0, a1));
        padded[1] = Some((b0, b1));
        let mut flags = vec![false; 9];
        flags[0] = true;
        flags[1] = true;
        let out =
            blend_and_montage(&padded, &flags, &regions, &nets, &params, h, w).unwrap();
        // a pixel covered by region 0 only
        assert!((out.f0t.u[[0, 0]] - 2.0).abs() < 1e-9);
        // a pixel in the overlap of regions 0 and 1
        let (oy, ox) = (0, regions[1].x0);
        assert!((out.f0t.u[[oy, ox]] - 3.0).abs() < 1e-9);
        // outside both
        assert!(out.f0t.u[[h - 1, w - 1]].abs() < 1e-12);
    }

    fn zero_outside(f: &mut FlowField, r: &Region) {
        let (h, w) = f.dim();
        for y in 0..h {
            for x in 0..w {
                let inside =
                    y >= r.y0 && y < r.y0 + r.h && x >= r.x0 && x < r.x0 + r.w;
                if !inside {
                    f.u[[y, x]] = 0.0;
                    f.v[[y, x]] = 0.0;
                }
            }
        }
    }

    #[test]
    fn blend_weights_are_convex_under_random_attention() {
        // with arbitrary attention parameters the overlap must stay a convex
        // combination: between the contributors, exact where only one covers
        let h = 16;
        let w = 16;
        let regions = RegionScheme::Overlapping9.regions(h, w).unwrap();
        let nets = nets_for(9);
        let mut params = nets.init_params(7);
        {
            use rand::Rng;
            let mut rng = ChaCha20Rng::seed_from_u64(77);
            for (name, v) in params.iter_mut() {
                if name.starts_with("residual.attn") {
                    v.mapv_inplace(|x| x + rng.gen_range(-0.3..0.3));
                }
            }
        }
        let mut padded: Vec<Option<(FlowField, FlowField)>> = vec![None; 9];
        let mut a = (FlowField::zeros(h, w), FlowField::zeros(h, w));
        let mut b = (FlowField::zeros(h, w), FlowField::zeros(h, w));
        for y in regions[0].y0..regions[0].y0 + regions[0].h {
            for x in regions[0].x0..regions[0].x0 + regions[0].w {
                a.0.u[[y, x]] = 2.0;
            }
        }
        for y in regions[1].y0..regions[1].y0 + regions[1].h {
            for x in regions[1].x0..regions[1].x0 + regions[1].w {
                b.0.u[[y, x]] = 4.0;
            }
        }
        padded[0] = Some(a);
        padded[1] = Some(b);
        let mut flags = vec![false; 9];
        flags[0] = true;
        flags[1] = true;
        let out =
            blend_and_montage(&padded, &flags, &regions, &nets, &params, h, w).unwrap();
        let (oy, ox) = (1, regions[1].x0 + 1);
        let v = out.f0t.u[[oy, ox]];
        assert!(v >= 2.0 - 1e-9 && v <= 4.0 + 1e-9, "overlap value {v}");
        assert!((out.f0t.u[[0, 0]] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn blend_rejects_inconsistent_mask() {
        let h = 16;
        let w = 16;
        let regions = RegionScheme::Overlapping9.regions(h, w).unwrap();
        let nets = nets_for(9);
        let params = nets.init_params(5);
        let padded: Vec<Option<(FlowField, FlowField)>> = vec![None; 9];
        let mut flags = vec![false; 9];
        flags[3] = true;
        assert!(matches!(
            blend_and_montage(&padded, &flags, &regions, &nets, &params, h, w),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn refine_warp_identity_on_zero_residual() {
        let img = Image::from_gray(Array2::from_shape_fn((12, 12), |(y, x)| {
            ((y * 12 + x) as f64 * 0.37).sin() * 0.5 + 0.5
        }));
        let refined = RefinedFlows::zeros(12, 12);
        let (a, b) = refine_warp(&img, &img, &refined).unwrap();
        assert_eq!(a.data, img.data);
        assert_eq!(b.data, img.data);
    }

    #[test]
    fn refine_warp_constant_residual_matches_shift_oracle() {
        let h = 12;
        let w = 12;
        let img = Image::from_gray(Array2::from_shape_fn((h, w), |(y, x)| {
            (y * w + x) as f64 / (h * w) as f64
        }));
        let region = Region {
            index: 0,
            y0: 4,
            x0: 4,
            h: 4,
            w: 4,
        };
        let mut refined = RefinedFlows::zeros(h, w);
        for y in region.y0..region.y0 + region.h {
            for x in region.x0..region.x0 + region.w {
                refined.f0t.u[[y, x]] = 1.0;
            }
        }
        let (a, _) = refine_warp(&img, &img, &refined).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = y >= region.y0
                    && y < region.y0 + region.h
                    && x >= region.x0
                    && x < region.x0 + region.w;
                let want = if inside {
                    img.data[[y, x + 1, 0]]
                } else {
                    img.data[[y, x, 0]]
                };
                assert!((a.data[[y, x, 0]] - want).abs() < 1e-12);
            }
        }
    }
}
