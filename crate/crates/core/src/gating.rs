//! Sliding-window region division, the Gumbel gating network, and the
//! differentiable expected-compute cost.
//!
//! The frame is covered by nine half-frame windows sliding with quarter-frame
//! stride, so adjacent windows overlap. A lightweight conv net reads both
//! sampled flow fields and emits a two-class logit per window; the dynamic
//! class routes that window through residual refinement. Training samples the
//! decision with Gumbel noise, evaluation rounds the probabilities.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{conv2d_flops, LEAKY_SLOPE};
use crate::params::{ParamSet, VarMap};
use crate::splines_warp::FlowField;
use crate::tensor::nn::{conv_init, conv_out, conv_zero_init};
use crate::tensor::{Tape, Var};

/// One sliding-window sub-area of the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub index: usize,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// How the frame is carved into regions for residual refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionScheme {
    /// Nine half-frame windows, quarter-frame stride (cross-region overlap).
    Overlapping9,
    /// Four half-frame windows, half-frame stride (no overlap).
    NonOverlapping4,
}

impl RegionScheme {
    pub fn count(&self) -> usize {
        match self {
            RegionScheme::Overlapping9 => 9,
            RegionScheme::NonOverlapping4 => 4,
        }
    }

    pub fn regions(&self, h: usize, w: usize) -> Result<Vec<Region>> {
        match self {
            RegionScheme::Overlapping9 => divide_regions(h, w),
            RegionScheme::NonOverlapping4 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "frame {h}x{w} not divisible by 2"
                    )));
                }
                let (rh, rw) = (h / 2, w / 2);
                let mut regions = Vec::with_capacity(4);
                for iy in 0..2 {
                    for ix in 0..2 {
                        regions.push(Region {
                            index: iy * 2 + ix,
                            y0: iy * rh,
                            x0: ix * rw,
                            h: rh,
                            w: rw,
                        });
                    }
                }
                Ok(regions)
            }
        }
    }
}

/// The nine overlapping windows: size `H/2 x W/2`, offsets `{0, H/4, H/2}`.
pub fn divide_regions(h: usize, w: usize) -> Result<Vec<Region>> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "frame {h}x{w} not divisible by 4"
        )));
    }
    let (rh, rw) = (h / 2, w / 2);
    let mut regions = Vec::with_capacity(9);
    for iy in 0..3 {
        for ix in 0..3 {
            regions.push(Region {
                index: iy * 3 + ix,
                y0: iy * h / 4,
                x0: ix * w / 4,
                h: rh,
                w: rw,
            });
        }
    }
    Ok(regions)
}

/// How many regions cover each pixel.
pub fn coverage_count(regions: &[Region], h: usize, w: usize) -> Array2<usize> {
    let mut cov = Array2::zeros((h, w));
    for r in regions {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                cov[[y, x]] += 1;
            }
        }
    }
    cov
}

/// Per-region class probabilities; channel 0 static, channel 1 dynamic.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMap {
    pub probs: Array3<f64>,
}

impl GateMap {
    pub fn regions(&self) -> usize {
        self.probs.dim().1 * self.probs.dim().2
    }

    pub fn dynamic_prob(&self, index: usize) -> f64 {
        let cols = self.probs.dim().2;
        self.probs[[1, index / cols, index % cols]]
    }
}

/// Hard dynamic/static decisions for the nine windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub mask: Array2<bool>,
}

impl BinaryMask {
    pub fn all_dynamic() -> Self {
        BinaryMask {
            mask: Array2::from_elem((3, 3), true),
        }
    }

    pub fn all_static() -> Self {
        BinaryMask {
            mask: Array2::from_elem((3, 3), false),
        }
    }

    pub fn is_dynamic(&self, index: usize) -> bool {
        self.mask[[index / 3, index % 3]]
    }

    pub fn dynamic_count(&self) -> usize {
        self.mask.iter().filter(|&&d| d).count()
    }

    /// Row-major flags, one per region index.
    pub fn flags(&self) -> Vec<bool> {
        self.mask.iter().cloned().collect()
    }
}

/// Compute cost attributed to the gate's choices, in the caller's FLOP units.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CostModel {
    pub base_flops: f64,
    pub region_flops: Vec<f64>,
}

impl CostModel {
    pub fn uniform(base: f64, per_region: f64, regions: usize) -> Self {
        CostModel {
            base_flops: base,
            region_flops: vec![per_region; regions],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_flops < 0.0 || self.region_flops.iter().any(|&c| c < 0.0) {
            return Err(Error::invalid("cost model entries must be non-negative"));
        }
        Ok(())
    }
}

/// Temperature-relaxed categorical sample over two classes.
pub fn gumbel_softmax(logits: [f64; 2], tau: f64, noise: [f64; 2]) -> Result<[f64; 2]> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let a = (logits[0] + noise[0]) / tau;
    let b = (logits[1] + noise[1]) / tau;
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    Ok([ea / (ea + eb), eb / (ea + eb)])
}

/// Draws standard Gumbel noise of the given shape.
pub fn sample_gumbel(seed: u64, shape: &[usize]) -> ArrayD<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -(-u.ln()).ln()
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GatingConfig {
    pub base_channels: usize,
    pub temperature: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            base_channels: 8,
            temperature: 1.0,
        }
    }
}

/// The lightweight gating network: three stride-2 convs over the stacked flow
/// pair, adaptive 3x3 pooling, and a 1x1 two-class head.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub cfg: GatingConfig,
}

impl GateNet {
    pub fn new(cfg: GatingConfig) -> Self {
        GateNet { cfg }
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = self.cfg.base_channels;
        let (w, b) = conv_init(&mut rng, c, 4, 3);
        ps.insert("gate.conv1.w", w);
        ps.insert("gate.conv1.b", b);
        let (w, b) = conv_init(&mut rng, 2 * c, c, 3);
        ps.insert("gate.conv2.w", w);
        ps.insert("gate.conv2.b", b);
        let (w, b) = conv_init(&mut rng, 2 * c, 2 * c, 3);
        ps.insert("gate.conv3.w", w);
        ps.insert("gate.conv3.b", b);
        let (w, b) = conv_zero_init(2, 2 * c, 1);
        ps.insert("gate.head.w", w);
        ps.insert("gate.head.b", b);
        ps
    }

    /// Logits `[N, 2, 3, 3]` from stacked flows `[N, 4, H, W]`.
    pub fn forward(&self, tape: &mut Tape, vars: &VarMap, flows: Var) -> Var {
        let mut h = flows;
        for name in ["gate.conv1", "gate.conv2", "gate.conv3"] {
            let w = vars.var(&format!("{name}.w"));
            let b = vars.var(&format!("{name}.b"));
            h = tape.conv2d(h, w, b, 2, 1);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = tape.adaptive_avg_pool(h, 3, 3);
        let w = vars.var("gate.head.w");
        let b = vars.var("gate.head.b");
        tape.conv2d(pooled, w, b, 1, 0)
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let c = self.cfg.base_channels;
        let (h1, w1) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
        let (h2, w2) = (conv_out(h1, 3, 2, 1), conv_out(w1, 3, 2, 1));
        let (h3, w3) = (conv_out(h2, 3, 2, 1), conv_out(w2, 3, 2, 1));
        conv2d_flops(3, 4, c, h1, w1)
            + conv2d_flops(3, c, 2 * c, h2, w2)
            + conv2d_flops(3, 2 * c, 2 * c, h3, w3)
            + conv2d_flops(1, 2 * c, 2, 3, 3)
    }
}

/// Tape handles produced by [`op_gate_forward`].
pub struct GateVars {
    /// Raw two-class logits `[N, 2, 3, 3]`.
    pub logits: Var,
    /// Softmax class probabilities (no noise).
    pub probs: Var,
    /// Gumbel-softmax sample when noise was injected, otherwise the probs.
    pub soft: Var,
    /// Straight-through one-hot of `soft`: hard forward, identity gradient.
    pub hard_st: Var,
}

/// Differentiable gate pass. `noise` of shape `[N, 2, 3, 3]` switches on
/// Gumbel sampling; `None` is deterministic evaluation.
pub fn op_gate_forward(
    tape: &mut Tape,
    vars: &VarMap,
    net: &GateNet,
    flows: Var,
    tau: f64,
    noise: Option<&ArrayD<f64>>,
) -> Result<GateVars> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let logits = net.forward(tape, vars, flows);
    let probs = tape.softmax_axis(logits, 1);
    let soft = match noise {
        Some(n) => {
            let nvar = tape.constant(n.clone());
            let noisy = tape.add(logits, nvar);
            let scaled = tape.mul_scalar(noisy, 1.0 / tau);
            tape.softmax_axis(scaled, 1)
        }
        None => probs,
    };
    let hard_st = tape.hardmax_st(soft);
    Ok(GateVars {
        logits,
        probs,
        soft,
        hard_st,
    })
}

/// What the decision should be based on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Gumbel-sampled decisions, seeded and reproducible.
    Train { seed: u64 },
    /// Round the class probabilities; ties go static.
    Eval,
}

/// Classifies the nine regions from the two sampled flow fields.
pub fn gate_forward(
    f0t: &FlowField,
    f1t: &FlowField,
    net: &GateNet,
    params: &ParamSet,
    mode: GateMode,
    tau: f64,
) -> Result<(GateMap, BinaryMask)> {
    if f0t.dim() != f1t.dim() {
        return Err(Error::shape(
            format!("{:?}", f0t.dim()),
            format!("{:?}", f1t.dim()),
        ));
    }
    let (h, w) = f0t.dim();
    let mut flows = ArrayD::zeros(IxDyn(&[1, 4, h, w]));
    for y in 0..h {
        for x in 0..w {
            flows[[0, 0, y, x]] = f0t.u[[y, x]];
            flows[[0, 1, y, x]] = f0t.v[[y, x]];
            flows[[0, 2, y, x]] = f1t.u[[y, x]];
            flows[[0, 3, y, x]] = f1t.v[[y, x]];
        }
    }
    let mut tape = Tape::new();
    let vars = VarMap::load(&mut tape, params);
    let fv = tape.constant(flows);
    let noise = match mode {
        GateMode::Train { seed } => Some(sample_gumbel(seed, &[1, 2, 3, 3])),
        GateMode::Eval => None,
    };
    let gv = op_gate_forward(&mut tape, &vars, net, fv, tau, noise.as_ref())?;

    let probs_val = tape.value(gv.probs);
    let mut probs = Array3::zeros((2, 3, 3));
    for c in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                probs[[c, i, j]] = probs_val[[0, c, i, j]];
            }
        }
    }
    let hard = tape.value(gv.hard_st);
    let mut mask = Array2::from_elem((3, 3), false);
    for i in 0..3 {
        for j in 0..3 {
            mask[[i, j]] = match mode {
                // dynamic only when strictly more probable than static
                GateMode::Eval => probs[[1, i, j]] > 0.5,
                GateMode::Train { .. } => hard[[0, 1, i, j]] == 1.0,
            };
        }
    }
    Ok((GateMap { probs }, BinaryMask { mask }))
}

/// Differentiable expected cost: `base + sum_i p_dynamic(i) * region_cost(i)`,
/// averaged over the batch.
pub fn op_expected_flops(tape: &mut Tape, class_probs: Var, cost: &CostModel) -> Var {
    let shape = tape.value(class_probs).shape().to_vec();
    let n = shape[0];
    let mut cost_map = ArrayD::zeros(IxDyn(&shape));
    for b in 0..n {
        for (i, &c) in cost.region_flops.iter().enumerate() {
            cost_map[[b, 1, i / shape[3], i % shape[3]]] = c / n as f64;
        }
    }
    let weighted = tape.mul_const(class_probs, cost_map);
    let sum = tape.sum_all(weighted);
    tape.add_scalar(sum, cost.base_flops)
}

/// Expected cost of a gate decision distribution.
pub fn expected_flops(gate: &GateMap, cost: &CostModel) -> f64 {
    let mut total = cost.base_flops;
    for (i, &c) in cost.region_flops.iter().enumerate() {
        total += gate.dynamic_prob(i) * c;
    }
    total
}
