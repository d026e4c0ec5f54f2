//! Encoder-decoder network estimating bidirectional motion-spline control
//! points from two boundary frames and an event voxel grid.
//!
//! One shared trunk feeds two symmetric heads, one per flow direction. Each
//! head predicts `K - 1` control-point pairs; the `k = 0` control point is
//! hard-wired to zero when the spline is assembled, so displacement at the
//! source frame is zero by construction rather than by training.

use ndarray::{ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::image::Image;
use crate::nets::{conv2d_flops, head_forward, init_head, UNetTrunk};
use crate::params::{ParamSet, VarMap};
use crate::splines_warp::{
    flow_to_nchw, image_to_nchw, nchw_to_image, op_backward_warp,
    op_forward_warp_softmax, sample_flow, spline_basis, FlowField, MotionSpline,
};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FlowNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub control_points: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            base_channels: 16,
            depth: 3,
            control_points: 4,
        }
    }
}

impl FlowNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid("flow net depth must be at least 2"));
        }
        if self.control_points < 2 {
            return Err(Error::invalid("splines need at least 2 control points"));
        }
        Ok(())
    }
}

/// The flow estimator: configuration plus input channel bookkeeping.
#[derive(Debug, Clone)]
pub struct FlowNet {
    pub cfg: FlowNetConfig,
    pub image_channels: usize,
    pub voxel_bins: usize,
}

/// Tape handles for the two predicted control-point stacks, each
/// `[N, 2*(K-1), H, W]` ordered `(u_1, v_1, u_2, v_2, ...)`.
pub struct SplineHeads {
    pub fwd: Var,
    pub bwd: Var,
}

impl FlowNet {
    pub fn new(cfg: FlowNetConfig, image_channels: usize, voxel_bins: usize) -> Self {
        FlowNet {
            cfg,
            image_channels,
            voxel_bins,
        }
    }

    fn trunk(&self) -> UNetTrunk {
        UNetTrunk::new(
            "flow.trunk",
            2 * self.image_channels + self.voxel_bins,
            self.cfg.base_channels,
            self.cfg.depth,
        )
    }

    fn head_channels(&self) -> usize {
        2 * (self.cfg.control_points - 1)
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.trunk().init_into(&mut ps, &mut rng);
        init_head(
            &mut ps,
            "flow.head_fwd",
            self.cfg.base_channels,
            self.head_channels(),
        );
        init_head(
            &mut ps,
            "flow.head_bwd",
            self.cfg.base_channels,
            self.head_channels(),
        );
        ps
    }

    fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << self.cfg.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "resolution {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    /// Forward pass over packed inputs `i0, i1 [N,C,H,W]`, `vox [N,B,H,W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        i0: Var,
        i1: Var,
        vox: Var,
    ) -> SplineHeads {
        let x = tape.concat_ch(&[i0, i1, vox]);
        let feat = self.trunk().forward(tape, vars, x);
        SplineHeads {
            fwd: head_forward(tape, vars, "flow.head_fwd", feat),
            bwd: head_forward(tape, vars, "flow.head_bwd", feat),
        }
    }

    /// Estimates both motion splines for a single frame pair.
    pub fn estimate_splines(
        &self,
        params: &ParamSet,
        i0: &Image,
        i1: &Image,
        vox: &VoxelGrid,
    ) -> Result<(MotionSpline, MotionSpline)> {
        if !i0.same_shape(i1) {
            return Err(Error::shape(
                format!("{:?}", i0.data.dim()),
                format!("{:?}", i1.data.dim()),
            ));
        }
        let (h, w, c) = i0.data.dim();
        self.check_resolution(h, w)?;
        if c != self.image_channels {
            return Err(Error::invalid(format!(
                "expected {} image channels, got {c}",
                self.image_channels
            )));
        }
        if vox.bins() != self.voxel_bins || vox.data.dim().1 != h || vox.data.dim().2 != w {
            return Err(Error::invalid(format!(
                "voxel grid {:?} does not match {}x{}x{}",
                vox.data.dim(),
                self.voxel_bins,
                h,
                w
            )));
        }
        let mut tape = Tape::new();
        let vars = VarMap::load(&mut tape, params);
        let v0 = tape.constant(image_to_nchw(i0));
        let v1 = tape.constant(image_to_nchw(i1));
        let vx =
            tape.constant(vox.data.clone().into_dyn().insert_axis(Axis(0)));
        let heads = self.forward(&mut tape, &vars, v0, v1, vx);
        Ok((
            head_to_spline(tape.value(heads.fwd), self.cfg.control_points, 0),
            head_to_spline(tape.value(heads.bwd), self.cfg.control_points, 0),
        ))
    }

    /// Trunk + heads cost at an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.trunk().flops(h, w)
            + 2.0 * conv2d_flops(3, self.cfg.base_channels, self.head_channels(), h, w)
    }
}

/// Assembles a [`MotionSpline`] from a `[N, 2*(K-1), H, W]` head output,
/// prepending the pinned zero control point.
pub fn head_to_spline(head: &ArrayD<f64>, k: usize, batch: usize) -> MotionSpline {
    let shape = head.shape();
    let (h, w) = (shape[2], shape[3]);
    let mut spline = MotionSpline::zeros(k, h, w);
    for ki in 1..k {
        for y in 0..h {
            for x in 0..w {
                spline.cx[[ki, y, x]] = head[[batch, 2 * (ki - 1), y, x]];
                spline.cy[[ki, y, x]] = head[[batch, 2 * (ki - 1) + 1, y, x]];
            }
        }
    }
    spline
}

/// Samples a spline head on the tape at parameter `t`, returning `[N,2,H,W]`.
/// The pinned zero control point contributes nothing, so only predicted
/// channels participate.
pub fn op_sample_spline(tape: &mut Tape, head: Var, k: usize, t: f64) -> Var {
    let basis = spline_basis(t, k);
    let slices: Vec<Var> = (1..k)
        .map(|ki| tape.slice_ch(head, 2 * (ki - 1), 2 * ki))
        .collect();
    tape.weighted_sum(&slices, &basis[1..])
}

/// Splat importance: negative photometric error between `anchor` and the
/// other frame gathered along `flow`, averaged over channels.
pub fn op_splat_importance(tape: &mut Tape, anchor: Var, other: Var, flow: Var) -> Var {
    let gathered = op_backward_warp(tape, other, flow);
    let diff = tape.sub(anchor, gathered);
    let abs = tape.abs(diff);
    let c = tape.value(abs).shape()[1];
    let neg = tape.mul_scalar(abs, -1.0);
    if c == 1 {
        neg
    } else {
        let slices: Vec<Var> = (0..c).map(|ci| tape.slice_ch(neg, ci, ci + 1)).collect();
        let weights = vec![1.0 / c as f64; c];
        tape.weighted_sum(&slices, &weights)
    }
}

/// On-tape warp of both boundary frames to time `t`:
/// samples the forward head at `t` and the backward head at `1 - t`, then
/// softmax-splats each frame along its flow.
pub fn op_warp_boundaries(
    tape: &mut Tape,
    i0: Var,
    i1: Var,
    heads: &SplineHeads,
    k: usize,
    t: f64,
) -> (Var, Var, Var, Var) {
    let f0t = op_sample_spline(tape, heads.fwd, k, t);
    let f1t = op_sample_spline(tape, heads.bwd, k, 1.0 - t);
    let z0 = op_splat_importance(tape, i0, i1, f0t);
    let i0w = op_forward_warp_softmax(tape, i0, f0t, z0);
    let z1 = op_splat_importance(tape, i1, i0, f1t);
    let i1w = op_forward_warp_softmax(tape, i1, f1t, z1);
    (i0w, i1w, f0t, f1t)
}

/// Warps both boundary frames to time `t` with plain arrays.
///
/// Returns `(i0_warp, i1_warp, flow_0_to_t, flow_1_to_t)`.
pub fn warp_boundaries(
    i0: &Image,
    i1: &Image,
    spline01: &MotionSpline,
    spline10: &MotionSpline,
    t: f64,
) -> Result<(Image, Image, FlowField, FlowField)> {
    let f0t = sample_flow(spline01, t)?;
    let f1t = sample_flow(spline10, 1.0 - t)?;
    let mut tape = Tape::new();
    let v0 = tape.constant(image_to_nchw(i0));
    let v1 = tape.constant(image_to_nchw(i1));
    let vf0 = tape.constant(flow_to_nchw(&f0t));
    let vf1 = tape.constant(flow_to_nchw(&f1t));
    let z0 = op_splat_importance(&mut tape, v0, v1, vf0);
    let i0w = op_forward_warp_softmax(&mut tape, v0, vf0, z0);
    let z1 = op_splat_importance(&mut tape, v1, v0, vf1);
    let i1w = op_forward_warp_softmax(&mut tape, v1, vf1, z1);
    let i0w = nchw_to_image(tape.value(i0w), 0);
    let i1w = nchw_to_image(tape.value(i1w), 0);
    Ok((i0w, i1w, f0t, f1t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::VoxelGrid;
    use crate::tensor::gradcheck::max_rel_error;
    use ndarray::{Array2, IxDyn};

    fn tiny_net() -> FlowNet {
        FlowNet::new(
            FlowNetConfig {
                base_channels: 4,
                depth: 2,
                control_points: 4,
            },
            1,
            3,
        )
    }

    #[test]
    fn estimate_splines_shapes_and_zero_origin() {
        let net = FlowNet::new(FlowNetConfig::default(), 1, 5);
        let params = net.init_params(0);
        let i = Image::zeros(32, 32);
        let vox = VoxelGrid::zeros(5, 32, 32);
        let (s01, s10) = net.estimate_splines(&params, &i, &i, &vox).unwrap();
        assert_eq!(s01.cx.dim(), (4, 32, 32));
        assert_eq!(s10.cy.dim(), (4, 32, 32));
        assert!(s01.cx.index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
        assert!(s10.cy.index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimate_splines_rejects_indivisible_resolution() {
        let net = FlowNet::new(FlowNetConfig::default(), 1, 5);
        let params = net.init_params(0);
        let i = Image::zeros(30, 32);
        let vox = VoxelGrid::zeros(5, 30, 32);
        assert!(matches!(
            net.estimate_splines(&params, &i, &i, &vox),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_origin_holds_for_random_parameters() {
        // perturb every parameter; the k = 0 control point must stay exactly 0
        let net = tiny_net();
        let mut params = net.init_params(3);
        for (_, v) in params.iter_mut() {
            v.mapv_inplace(|x| x + 0.37);
        }
        let i = Image::zeros(8, 8);
        let vox = VoxelGrid::zeros(3, 8, 8);
        let (s01, _) = net.estimate_splines(&params, &i, &i, &vox).unwrap();
        assert!(s01.cx.index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
        let f = sample_flow(&s01, 0.0).unwrap();
        assert!(f.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_boundaries_endpoints_are_exact() {
        let mut i0 = Image::zeros(8, 8);
        let mut i1 = Image::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                i0.data[[y, x, 0]] = (y * 8 + x) as f64 / 64.0;
                i1.data[[y, x, 0]] = 1.0 - (y * 8 + x) as f64 / 64.0;
            }
        }
        let s01 = MotionSpline::linear(4, 8, 8, 1.0, 0.5);
        let s10 = MotionSpline::linear(4, 8, 8, -1.0, -0.5);
        let (i0w, _, f0t, _) = warp_boundaries(&i0, &i1, &s01, &s10, 0.0).unwrap();
        assert!(f0t.u.iter().all(|&v| v == 0.0));
        for (a, b) in i0w.data.iter().zip(i0.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let (_, i1w, _, f1t) = warp_boundaries(&i0, &i1, &s01, &s10, 1.0).unwrap();
        assert!(f1t.u.iter().all(|&v| v == 0.0));
        for (a, b) in i1w.data.iter().zip(i1.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_spline_on_translating_scene_hits_oracle() {
        // whole scene translates 4 px right between frames; at t = 0.5 the
        // ground truth is a 2 px shift. A spline holding the exact motion must
        // reproduce it away from the frame border.
        let h = 24;
        let w = 24;
        let scene = |shift: f64| {
            Image::from_gray(Array2::from_shape_fn((h, w), |(y, x)| {
                let fx = x as f64 - shift;
                0.5 + 0.35 * ((fx * 0.7).sin() * (y as f64 * 0.5).cos())
            }))
        };
        let i0 = scene(0.0);
        let i1 = scene(4.0);
        let gt = scene(2.0);
        let s01 = MotionSpline::linear(4, h, w, 4.0, 0.0);
        let s10 = MotionSpline::linear(4, h, w, -4.0, 0.0);
        let (i0w, _, _, _) = warp_boundaries(&i0, &i1, &s01, &s10, 0.5).unwrap();
        // interior: skip a border wide enough to clear dropped splats
        let mut se = 0.0;
        let mut count = 0.0;
        for y in 3..h - 3 {
            for x in 5..w - 5 {
                let d = i0w.data[[y, x, 0]] - gt.data[[y, x, 0]];
                se += d * d;
                count += 1.0;
            }
        }
        let psnr = 10.0 * (1.0 / (se / count)).log10();
        assert!(psnr > 35.0, "interior PSNR {psnr:.2} dB");
    }

    fn flow_gradcheck_err(noise_seed: u64, probe_seed: u64) -> f64 {
        // Heads are perturbed off their zero init so the check runs at
        // fractional flows, away from the splat kernel's integer kinks.
        let net = tiny_net();
        let mut params = net.init_params(1);
        {
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
            for (_, v) in params.iter_mut() {
                v.mapv_inplace(|x| x + rng.gen_range(-0.005..0.005));
            }
            // pin flows near 0.3 px
            for (i, b) in params
                .get_mut("flow.head_fwd.b")
                .unwrap()
                .iter_mut()
                .enumerate()
            {
                *b = 0.23 + 0.04 * i as f64;
            }
            for (i, b) in params
                .get_mut("flow.head_bwd.b")
                .unwrap()
                .iter_mut()
                .enumerate()
            {
                *b = -0.21 - 0.05 * i as f64;
            }
        }
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let values: Vec<ArrayD<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
        let i0 = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |ix| {
            0.5 + 0.3 * ((ix[2] * 8 + ix[3]) as f64 * 0.41).sin()
        });
        let i1 = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |ix| {
            0.5 + 0.3 * ((ix[2] * 8 + ix[3]) as f64 * 0.41 + 0.6).sin()
        });
        let vox = ArrayD::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |ix| {
            0.2 * ((ix[1] * 64 + ix[2] * 8 + ix[3]) as f64 * 0.17).cos()
        });
        let gt = i0.clone() * 0.5 + i1.clone() * 0.5;
        max_rel_error(
            |tape, vars| {
                let mut vm = std::collections::BTreeMap::new();
                for (name, var) in names.iter().zip(vars) {
                    vm.insert(name.clone(), *var);
                }
                let vars = VarMap::from_map(vm);
                let c0 = tape.constant(i0.clone());
                let c1 = tape.constant(i1.clone());
                let cv = tape.constant(vox.clone());
                let heads = net.forward(tape, &vars, c0, c1, cv);
                let (i0w, i1w, _, _) =
                    op_warp_boundaries(tape, c0, c1, &heads, net.cfg.control_points, 0.5);
                let l0 = tape.l1_to(i0w, &gt);
                let l1 = tape.l1_to(i1w, &gt);
                let sum = tape.add(l0, l1);
                tape.mul_scalar(sum, 0.5)
            },
            &values,
            1e-5,
            6,
            probe_seed,
        )
    }


    #[test]
    fn full_flow_loss_gradient_checks_out() {
        let err = flow_gradcheck_err(7, 13);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn trunk_is_translation_covariant_in_the_interior() {
        let net = FlowNet::new(
            FlowNetConfig {
                base_channels: 8,
                depth: 3,
                control_points: 4,
            },
            1,
            3,
        );
        let params = net.init_params(7);
        let h = 96;
        let w = 96;
        let shift = 8usize;
        let blob = |cy: f64, cx: f64| {
            Image::from_gray(Array2::from_shape_fn((h, w), |(y, x)| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                (-d2 / 60.0).exp()
            }))
        };
        let vox = VoxelGrid::zeros(3, h, w);
        let (sa, _) = net
            .estimate_splines(&params, &blob(40.0, 40.0), &blob(44.0, 40.0), &vox)
            .unwrap();
        let (sb, _) = net
            .estimate_splines(
                &params,
                &blob(40.0, 40.0 + shift as f64),
                &blob(44.0, 40.0 + shift as f64),
                &vox,
            )
            .unwrap();
        let fa = sample_flow(&sa, 0.5).unwrap();
        let fb = sample_flow(&sb, 0.5).unwrap();
        for y in 32..64 {
            for x in 32..64 {
                let d = fa.u[[y, x]] - fb.u[[y, x + shift]];
                assert!(d.abs() < 1e-4, "covariance broke at ({y},{x}): {d}");
            }
        }
    }
}
