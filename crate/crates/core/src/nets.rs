//! Shared encoder-decoder trunk used by the flow, residual, and attention
//! networks.
//!
//! A trunk of depth `d` downsamples `d - 1` times with stride-2 convolutions
//! and comes back up with bilinear upsampling plus skip concatenation,
//! returning `base` feature channels at input resolution. Output heads are the
//! callers' business so the same trunk serves nets with one or several heads.

use rand::Rng;

use crate::params::{ParamSet, VarMap};
use crate::tensor::nn::{conv_init, conv_out, conv_zero_init};
use crate::tensor::{Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct UNetTrunk {
    pub prefix: String,
    pub in_ch: usize,
    pub base: usize,
    pub depth: usize,
}

impl UNetTrunk {
    pub fn new(prefix: impl Into<String>, in_ch: usize, base: usize, depth: usize) -> Self {
        assert!(depth >= 1);
        UNetTrunk {
            prefix: prefix.into(),
            in_ch,
            base,
            depth,
        }
    }

    fn ch(&self, level: usize) -> usize {
        self.base << level
    }

    pub fn init_into(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        let p = &self.prefix;
        let (w, b) = conv_init(rng, self.base, self.in_ch, 3);
        ps.insert(format!("{p}.enc0.conv1.w"), w);
        ps.insert(format!("{p}.enc0.conv1.b"), b);
        let (w, b) = conv_init(rng, self.base, self.base, 3);
        ps.insert(format!("{p}.enc0.conv2.w"), w);
        ps.insert(format!("{p}.enc0.conv2.b"), b);
        for l in 1..self.depth {
            let (w, b) = conv_init(rng, self.ch(l), self.ch(l - 1), 3);
            ps.insert(format!("{p}.enc{l}.down.w"), w);
            ps.insert(format!("{p}.enc{l}.down.b"), b);
            let (w, b) = conv_init(rng, self.ch(l), self.ch(l), 3);
            ps.insert(format!("{p}.enc{l}.conv.w"), w);
            ps.insert(format!("{p}.enc{l}.conv.b"), b);
        }
        for l in (0..self.depth.saturating_sub(1)).rev() {
            let (w, b) = conv_init(rng, self.ch(l), self.ch(l + 1) + self.ch(l), 3);
            ps.insert(format!("{p}.dec{l}.conv.w"), w);
            ps.insert(format!("{p}.dec{l}.conv.b"), b);
        }
    }

    /// Runs the trunk, returning `base`-channel features at input resolution.
    pub fn forward(&self, tape: &mut Tape, vars: &VarMap, x: Var) -> Var {
        let p = &self.prefix;
        let conv = |tape: &mut Tape, name: String, x: Var, stride: usize| {
            let w = vars.var(&format!("{name}.w"));
            let b = vars.var(&format!("{name}.b"));
            let y = tape.conv2d(x, w, b, stride, 1);
            tape.leaky_relu(y, LEAKY_SLOPE)
        };
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = conv(tape, format!("{p}.enc0.conv1"), x, 1);
        h = conv(tape, format!("{p}.enc0.conv2"), h, 1);
        skips.push(h);
        for l in 1..self.depth {
            h = conv(tape, format!("{p}.enc{l}.down"), h, 2);
            h = conv(tape, format!("{p}.enc{l}.conv"), h, 1);
            skips.push(h);
        }
        for l in (0..self.depth - 1).rev() {
            let up = tape.bilinear_up2(h);
            let cat = tape.concat_ch(&[up, skips[l]]);
            h = conv(tape, format!("{p}.dec{l}.conv"), cat, 1);
        }
        h
    }

    /// Multiply-add cost of the trunk on an `h x w` input, 2 ops per MAC.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let mut total = conv2d_flops(3, self.in_ch, self.base, h, w)
            + conv2d_flops(3, self.base, self.base, h, w);
        let (mut lh, mut lw) = (h, w);
        for l in 1..self.depth {
            lh = conv_out(lh, 3, 2, 1);
            lw = conv_out(lw, 3, 2, 1);
            total += conv2d_flops(3, self.ch(l - 1), self.ch(l), lh, lw)
                + conv2d_flops(3, self.ch(l), self.ch(l), lh, lw);
        }
        for l in (0..self.depth - 1).rev() {
            lh *= 2;
            lw *= 2;
            total += conv2d_flops(3, self.ch(l + 1) + self.ch(l), self.ch(l), lh, lw);
        }
        total
    }
}

/// Adds a 3x3 zero-initialized output head.
pub fn init_head(ps: &mut ParamSet, name: &str, in_ch: usize, out_ch: usize) {
    let (w, b) = conv_zero_init(out_ch, in_ch, 3);
    ps.insert(format!("{name}.w"), w);
    ps.insert(format!("{name}.b"), b);
}

pub fn head_forward(tape: &mut Tape, vars: &VarMap, name: &str, x: Var) -> Var {
    let w = vars.var(&format!("{name}.w"));
    let b = vars.var(&format!("{name}.b"));
    tape.conv2d(x, w, b, 1, 1)
}

/// `2 * k^2 * cin * cout * hout * wout` — one multiply and one add per MAC.
pub fn conv2d_flops(k: usize, cin: usize, cout: usize, hout: usize, wout: usize) -> f64 {
    2.0 * (k * k * cin) as f64 * cout as f64 * (hout * wout) as f64
}

/// Score and value matmuls of windowed attention over the whole feature map.
pub fn window_attention_flops(c: usize, h: usize, w: usize, win: usize) -> f64 {
    let windows = (h / win) * (w / win);
    let tokens = win * win;
    // per window: QK^T and AV, each tokens^2 * c MACs summed over heads
    4.0 * (tokens * tokens) as f64 * c as f64 * windows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    #[test]
    fn trunk_returns_base_channels_at_input_resolution() {
        let trunk = UNetTrunk::new("t", 5, 8, 3);
        let mut ps = ParamSet::new();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        trunk.init_into(&mut ps, &mut rng);
        let mut tape = Tape::new();
        let vars = VarMap::load(&mut tape, &ps);
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 5, 16, 16])));
        let y = trunk.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y).shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn conv_flops_matches_hand_count() {
        // 3x3 conv, 2 -> 4 channels, 8x8 padded stride-1 output
        assert_eq!(conv2d_flops(3, 2, 4, 8, 8), 9216.0);
    }
}
