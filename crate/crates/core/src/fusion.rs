//! Attention-based synthesis of the final intermediate frame.
//!
//! A single fusion block: conv encoder, one windowed multi-head attention
//! stage at half resolution with a residual connection, and a conv decoder
//! that predicts the frame directly. Inputs are the boundary frames, both
//! directed event voxel grids, and the two refined warped frames.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::image::Image;
use crate::nets::{conv2d_flops, window_attention_flops, LEAKY_SLOPE};
use crate::params::{ParamSet, VarMap};
use crate::splines_warp::{image_to_nchw, nchw_to_image};
use crate::tensor::nn::{conv_init, conv_out, conv_zero_init};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FusionConfig {
    pub base_channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            base_channels: 32,
            heads: 2,
            window: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if (2 * self.base_channels) % self.heads != 0 {
            return Err(Error::invalid(
                "attention channels must be divisible by head count",
            ));
        }
        if self.window == 0 {
            return Err(Error::invalid("window size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    pub cfg: FusionConfig,
    pub image_channels: usize,
    pub voxel_bins: usize,
}

impl FusionNet {
    pub fn new(cfg: FusionConfig, image_channels: usize, voxel_bins: usize) -> Self {
        FusionNet {
            cfg,
            image_channels,
            voxel_bins,
        }
    }

    pub fn in_channels(&self) -> usize {
        4 * self.image_channels + 2 * self.voxel_bins
    }

    /// Attention runs at half resolution, so frames must divide `2 * window`.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let div = 2 * self.cfg.window;
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "resolution {h}x{w} not divisible by {div} (2 x window)"
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = self.cfg.base_channels;
        let add_conv = |ps: &mut ParamSet, rng: &mut ChaCha20Rng, name: &str, co, ci, k| {
            let (w, b) = conv_init(rng, co, ci, k);
            ps.insert(format!("{name}.w"), w);
            ps.insert(format!("{name}.b"), b);
        };
        add_conv(&mut ps, &mut rng, "fusion.enc1", c, self.in_channels(), 3);
        add_conv(&mut ps, &mut rng, "fusion.enc2", c, c, 3);
        add_conv(&mut ps, &mut rng, "fusion.down", 2 * c, c, 3);
        add_conv(&mut ps, &mut rng, "fusion.q", 2 * c, 2 * c, 1);
        add_conv(&mut ps, &mut rng, "fusion.k", 2 * c, 2 * c, 1);
        add_conv(&mut ps, &mut rng, "fusion.v", 2 * c, 2 * c, 1);
        add_conv(&mut ps, &mut rng, "fusion.proj", 2 * c, 2 * c, 1);
        add_conv(&mut ps, &mut rng, "fusion.mix", 2 * c, 2 * c, 3);
        add_conv(&mut ps, &mut rng, "fusion.dec", c, 3 * c, 3);
        let (w, b) = conv_zero_init(self.image_channels, c, 3);
        ps.insert("fusion.head.w", w);
        ps.insert("fusion.head.b", b);
        ps
    }

    /// Unclamped frame prediction from the stacked inputs `[N, Cin, H, W]`.
    pub fn forward(&self, tape: &mut Tape, vars: &VarMap, x: Var) -> Var {
        let conv = |tape: &mut Tape, name: &str, x: Var, stride: usize, pad: usize| {
            let w = vars.var(&format!("{name}.w"));
            let b = vars.var(&format!("{name}.b"));
            tape.conv2d(x, w, b, stride, pad)
        };
        let lrelu = |tape: &mut Tape, x: Var| tape.leaky_relu(x, LEAKY_SLOPE);

        let e1 = conv(tape, "fusion.enc1", x, 1, 1);
        let e1 = lrelu(tape, e1);
        let skip = conv(tape, "fusion.enc2", e1, 1, 1);
        let skip = lrelu(tape, skip);
        let d = conv(tape, "fusion.down", skip, 2, 1);
        let d = lrelu(tape, d);

        let q = conv(tape, "fusion.q", d, 1, 0);
        let k = conv(tape, "fusion.k", d, 1, 0);
        let v = conv(tape, "fusion.v", d, 1, 0);
        let attn = tape.window_attention(q, k, v, self.cfg.heads, self.cfg.window);
        let attn = conv(tape, "fusion.proj", attn, 1, 0);
        let d = tape.add(d, attn);
        let d = conv(tape, "fusion.mix", d, 1, 1);
        let d = lrelu(tape, d);

        let up = tape.bilinear_up2(d);
        let cat = tape.concat_ch(&[up, skip]);
        let dec = conv(tape, "fusion.dec", cat, 1, 1);
        let dec = lrelu(tape, dec);
        conv(tape, "fusion.head", dec, 1, 1)
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let c = self.cfg.base_channels;
        let (h2, w2) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
        conv2d_flops(3, self.in_channels(), c, h, w)
            + conv2d_flops(3, c, c, h, w)
            + conv2d_flops(3, c, 2 * c, h2, w2)
            + 4.0 * conv2d_flops(1, 2 * c, 2 * c, h2, w2)
            + window_attention_flops(2 * c, h2, w2, self.cfg.window)
            + conv2d_flops(3, 2 * c, 2 * c, h2, w2)
            + conv2d_flops(3, 3 * c, c, h, w)
            + conv2d_flops(3, c, self.image_channels, h, w)
    }

    /// Stacks the six inputs into the network layout.
    pub fn pack_inputs(
        &self,
        i0: &Image,
        i1: &Image,
        v0t: &VoxelGrid,
        v1t: &VoxelGrid,
        i0_refine: &Image,
        i1_refine: &Image,
    ) -> Result<ArrayD<f64>> {
        let (h, w, c) = i0.data.dim();
        for img in [i1, i0_refine, i1_refine] {
            if img.data.dim() != (h, w, c) {
                return Err(Error::shape(
                    format!("{:?}", (h, w, c)),
                    format!("{:?}", img.data.dim()),
                ));
            }
        }
        for vox in [v0t, v1t] {
            if vox.data.dim() != (self.voxel_bins, h, w) {
                return Err(Error::shape(
                    format!("voxel {}x{h}x{w}", self.voxel_bins),
                    format!("{:?}", vox.data.dim()),
                ));
            }
        }
        if c != self.image_channels {
            return Err(Error::invalid(format!(
                "expected {} image channels, got {c}",
                self.image_channels
            )));
        }
        let pieces = [
            image_to_nchw(i0),
            image_to_nchw(i1),
            v0t.data.clone().into_dyn().insert_axis(Axis(0)),
            v1t.data.clone().into_dyn().insert_axis(Axis(0)),
            image_to_nchw(i0_refine),
            image_to_nchw(i1_refine),
        ];
        let views: Vec<_> = pieces.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("fusion input concat"))
    }

    /// Synthesizes the intermediate frame, clamped into `[0, 1]`.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse(
        &self,
        params: &ParamSet,
        i0: &Image,
        i1: &Image,
        v0t: &VoxelGrid,
        v1t: &VoxelGrid,
        i0_refine: &Image,
        i1_refine: &Image,
    ) -> Result<Image> {
        let input = self.pack_inputs(i0, i1, v0t, v1t, i0_refine, i1_refine)?;
        let (h, w) = (i0.height(), i0.width());
        self.check_resolution(h, w)?;
        let mut tape = Tape::new();
        let vars = VarMap::load(&mut tape, params);
        let xv = tape.constant(input);
        let out = self.forward(&mut tape, &vars, xv);
        Ok(nchw_to_image(tape.value(out), 0).clamped())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::VarMap;
    use crate::tensor::gradcheck::max_rel_error;
    use crate::training::Adam;
    use ndarray::Array2;

    fn tiny_fusion() -> FusionNet {
        FusionNet::new(
            FusionConfig {
                base_channels: 6,
                heads: 2,
                window: 4,
            },
            1,
            3,
        )
    }

    fn toy_inputs(h: usize, w: usize) -> (Image, Image, VoxelGrid, VoxelGrid, Image, Image) {
        let img = |phase: f64| {
            Image::from_gray(Array2::from_shape_fn((h, w), |(y, x)| {
                0.5 + 0.3 * ((y as f64 * 0.7 + x as f64 * 0.3 + phase).sin())
            }))
        };
        let mut v0 = VoxelGrid::zeros(3, h, w);
        v0.data[[1, h / 2, w / 2]] = 1.0;
        let v1 = VoxelGrid::zeros(3, h, w);
        (img(0.0), img(1.0), v0, v1, img(0.4), img(0.6))
    }

    #[test]
    fn fuse_contract_shape_and_range() {
        let net = tiny_fusion();
        let params = net.init_params(1);
        let (i0, i1, v0, v1, r0, r1) = toy_inputs(16, 16);
        let out = net.fuse(&params, &i0, &i1, &v0, &v1, &r0, &r1).unwrap();
        assert_eq!(out.data.dim(), (16, 16, 1));
        assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // deterministic given identical inputs and parameters
        let again = net.fuse(&params, &i0, &i1, &v0, &v1, &r0, &r1).unwrap();
        assert_eq!(out.data, again.data);
    }

    #[test]
    fn fuse_rejects_bad_shapes() {
        let net = tiny_fusion();
        let params = net.init_params(1);
        let (i0, i1, v0, v1, r0, _) = toy_inputs(16, 16);
        let bad = Image::zeros(16, 8);
        assert!(net.fuse(&params, &i0, &i1, &v0, &v1, &r0, &bad).is_err());
        // resolution not divisible by 2 * window
        let (i0, i1, v0, v1, r0, r1) = toy_inputs(12, 12);
        assert!(matches!(
            net.fuse(&params, &i0, &i1, &v0, &v1, &r0, &r1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fusion_gradient_checks_out() {
        let net = tiny_fusion();
        let mut params = net.init_params(2);
        {
            use rand::Rng;
            let mut rng = ChaCha20Rng::seed_from_u64(29);
            for (_, v) in params.iter_mut() {
                v.mapv_inplace(|x| x + rng.gen_range(-0.01..0.01));
            }
        }
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let values: Vec<ArrayD<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
        let (i0, i1, v0, v1, r0, r1) = toy_inputs(8, 8);
        let input = net.pack_inputs(&i0, &i1, &v0, &v1, &r0, &r1).unwrap();
        let gt = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |ix| {
            0.5 + 0.25 * ((ix[2] * 8 + ix[3]) as f64 * 0.53).sin()
        });
        let err = max_rel_error(
            |tape, vars| {
                let mut vm = std::collections::BTreeMap::new();
                for (name, var) in names.iter().zip(vars) {
                    vm.insert(name.clone(), *var);
                }
                let vars = VarMap::from_map(vm);
                let xv = tape.constant(input.clone());
                let out = net.forward(tape, &vars, xv);
                tape.l1_to(out, &gt)
            },
            &values,
            1e-5,
            6,
            41,
        );
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn fusion_overfits_one_target() {
        // the target is a blend of the refined inputs, as in the real pipeline
        // where the warped frames already resemble the ground truth
        let net = tiny_fusion();
        let mut params = net.init_params(3);
        let (i0, i1, v0, v1, r0, r1) = toy_inputs(8, 8);
        let gt = Image::new(&r0.data * 0.6 + &r1.data * 0.4);
        let input = net.pack_inputs(&i0, &i1, &v0, &v1, &r0, &r1).unwrap();
        let gt_t = image_to_nchw(&gt);
        let mut opt = Adam::new();
        for step in 0..250 {
            let lr = match step {
                0..=119 => 5e-3,
                120..=199 => 1e-3,
                _ => 2e-4,
            };
            let mut tape = Tape::new();
            let vars = VarMap::load(&mut tape, &params);
            let xv = tape.constant(input.clone());
            let out = net.forward(&mut tape, &vars, xv);
            let loss = tape.l1_to(out, &gt_t);
            let grads = tape.backward(loss);
            let gmap = vars.gradients(&grads);
            opt.step(&mut params, &gmap, lr);
        }
        let fused = net.fuse(&params, &i0, &i1, &v0, &v1, &r0, &r1).unwrap();
        let mse = (&fused.data - &gt.data)
            .mapv(|d| d * d)
            .mean()
            .unwrap();
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr > 40.0, "overfit PSNR {psnr:.2} dB");
    }
}
