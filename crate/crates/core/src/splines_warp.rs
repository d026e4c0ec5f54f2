//! Motion splines with O(1) flow sampling, softmax-splatting forward warping,
//! and bilinear backward warping.
//!
//! A [`MotionSpline`] stores `K` per-pixel displacement control points at
//! uniform knots `t_k = k/(K-1)`. Sampling evaluates a Catmull-Rom cubic
//! through the control points, so the cost of producing a flow field at any
//! `t` is independent of how much event data informed the spline.
//!
//! Both warps exist twice: a plain-array API and a [`Tape`] op for training.
//! They share the same forward kernels.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{dim4, Tape, Var};

/// Per-pixel cubic displacement curves, `K x H x W` control points per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpline {
    pub cx: Array3<f64>,
    pub cy: Array3<f64>,
}

impl MotionSpline {
    pub fn zeros(k: usize, h: usize, w: usize) -> Self {
        MotionSpline {
            cx: Array3::zeros((k, h, w)),
            cy: Array3::zeros((k, h, w)),
        }
    }

    pub fn control_points(&self) -> usize {
        self.cx.dim().0
    }

    /// Spline whose samples all equal a constant displacement scaled by `t`
    /// (control points on a line through the origin).
    pub fn linear(k: usize, h: usize, w: usize, u: f64, v: f64) -> Self {
        let mut s = MotionSpline::zeros(k, h, w);
        for ki in 1..k {
            let f = ki as f64 / (k - 1) as f64;
            s.cx.index_axis_mut(ndarray::Axis(0), ki).fill(u * f);
            s.cy.index_axis_mut(ndarray::Axis(0), ki).fill(v * f);
        }
        s
    }
}

/// Per-pixel displacement in pixels; `u` is horizontal (columns), `v` vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn constant(h: usize, w: usize, u: f64, v: f64) -> Self {
        FlowField {
            u: Array2::from_elem((h, w), u),
            v: Array2::from_elem((h, w), v),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        let mut m = Array2::zeros(self.u.dim());
        ndarray::Zip::from(&mut m)
            .and(&self.u)
            .and(&self.v)
            .for_each(|m, &u, &v| *m = (u * u + v * v).sqrt());
        m
    }
}

/// Catmull-Rom weights over the K control points at parameter `t`.
///
/// Uniform knots, central-difference tangents, one-sided at the endpoints.
/// The returned weights are a partition of unity; at a knot the vector is a
/// unit basis vector, which makes the spline interpolating.
pub fn spline_basis(t: f64, k: usize) -> Vec<f64> {
    assert!(k >= 2, "need at least two control points");
    let segs = k - 1;
    let scaled = t * segs as f64;
    let seg = (scaled.floor() as usize).min(segs - 1);
    let s = scaled - seg as f64;
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;

    let mut w = vec![0.0; k];
    w[seg] += h00;
    w[seg + 1] += h01;
    // tangent at the segment start
    if seg == 0 {
        w[1] += h10;
        w[0] -= h10;
    } else {
        w[seg + 1] += h10 / 2.0;
        w[seg - 1] -= h10 / 2.0;
    }
    // tangent at the segment end
    if seg + 1 == k - 1 {
        w[k - 1] += h11;
        w[k - 2] -= h11;
    } else {
        w[seg + 2] += h11 / 2.0;
        w[seg] -= h11 / 2.0;
    }
    w
}

/// Samples the spline at `t`, producing a dense flow field in O(K) per pixel.
pub fn sample_flow(spline: &MotionSpline, t: f64) -> Result<FlowField> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("sample time {t} outside [0, 1]")));
    }
    let (k, h, w) = spline.cx.dim();
    let basis = spline_basis(t, k);
    let mut u = Array2::zeros((h, w));
    let mut v = Array2::zeros((h, w));
    for (ki, &wk) in basis.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        u.scaled_add(wk, &spline.cx.index_axis(ndarray::Axis(0), ki));
        v.scaled_add(wk, &spline.cy.index_axis(ndarray::Axis(0), ki));
    }
    Ok(FlowField { u, v })
}

// --- layout adapters ---------------------------------------------------------

pub(crate) fn image_to_nchw(img: &Image) -> ArrayD<f64> {
    let (h, w, c) = img.data.dim();
    let mut out = ArrayD::zeros(IxDyn(&[1, c, h, w]));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[0, ch, y, x]] = img.data[[y, x, ch]];
            }
        }
    }
    out
}

pub(crate) fn nchw_to_image(t: &ArrayD<f64>, batch: usize) -> Image {
    let (_, c, h, w) = dim4(t);
    let mut data = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[[y, x, ch]] = t[[batch, ch, y, x]];
            }
        }
    }
    Image::new(data)
}

pub(crate) fn flow_to_nchw(flow: &FlowField) -> ArrayD<f64> {
    let (h, w) = flow.dim();
    let mut out = ArrayD::zeros(IxDyn(&[1, 2, h, w]));
    for y in 0..h {
        for x in 0..w {
            out[[0, 0, y, x]] = flow.u[[y, x]];
            out[[0, 1, y, x]] = flow.v[[y, x]];
        }
    }
    out
}

pub(crate) fn nchw_to_flow(t: &ArrayD<f64>, batch: usize) -> FlowField {
    let (_, c, h, w) = dim4(t);
    assert_eq!(c, 2, "flow tensor must have 2 channels");
    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            flow.u[[y, x]] = t[[batch, 0, y, x]];
            flow.v[[y, x]] = t[[batch, 1, y, x]];
        }
    }
    flow
}

// --- forward warping (softmax splatting) --------------------------------------

const DEN_FLOOR: f64 = 1e-12;

fn splat_forward(
    img: &ArrayD<f64>,
    flow: &ArrayD<f64>,
    z: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (n, c, h, w) = dim4(img);
    let mut num = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    let mut den = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
    for b in 0..n {
        // global shift keeps exp() tame; the output is shift-invariant anyway
        let zmax = z
            .index_axis(ndarray::Axis(0), b)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        for y in 0..h {
            for x in 0..w {
                let m = (z[[b, 0, y, x]] - zmax).exp();
                let tx = x as f64 + flow[[b, 0, y, x]];
                let ty = y as f64 + flow[[b, 1, y, x]];
                let x0 = tx.floor();
                let y0 = ty.floor();
                let fx = tx - x0;
                let fy = ty - y0;
                for (dy, dx, wgt) in [
                    (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                    (0.0, 1.0, fx * (1.0 - fy)),
                    (1.0, 0.0, (1.0 - fx) * fy),
                    (1.0, 1.0, fx * fy),
                ] {
                    let qx = x0 + dx;
                    let qy = y0 + dy;
                    if qx < 0.0 || qy < 0.0 || qx >= w as f64 || qy >= h as f64 || wgt == 0.0 {
                        continue;
                    }
                    let (qx, qy) = (qx as usize, qy as usize);
                    den[[b, 0, qy, qx]] += wgt * m;
                    for ch in 0..c {
                        num[[b, ch, qy, qx]] += wgt * m * img[[b, ch, y, x]];
                    }
                }
            }
        }
    }
    let mut out = num;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let d = den[[b, 0, y, x]];
                for ch in 0..c {
                    if d > DEN_FLOOR {
                        out[[b, ch, y, x]] /= d;
                    } else {
                        out[[b, ch, y, x]] = 0.0;
                    }
                }
            }
        }
    }
    (out, den)
}

#[allow(clippy::too_many_arguments)]
fn splat_backward(
    img: &ArrayD<f64>,
    flow: &ArrayD<f64>,
    z: &ArrayD<f64>,
    out: &ArrayD<f64>,
    den: &ArrayD<f64>,
    g: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (n, c, h, w) = dim4(img);
    let mut gimg = ArrayD::<f64>::zeros(img.raw_dim());
    let mut gflow = ArrayD::<f64>::zeros(flow.raw_dim());
    let mut gz = ArrayD::<f64>::zeros(z.raw_dim());
    for b in 0..n {
        let zmax = z
            .index_axis(ndarray::Axis(0), b)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        for y in 0..h {
            for x in 0..w {
                let m = (z[[b, 0, y, x]] - zmax).exp();
                let tx = x as f64 + flow[[b, 0, y, x]];
                let ty = y as f64 + flow[[b, 1, y, x]];
                let x0 = tx.floor();
                let y0 = ty.floor();
                let fx = tx - x0;
                let fy = ty - y0;
                // (weight, dw/dtx, dw/dty) per tap
                let taps = [
                    (0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
                    (0.0, 1.0, fx * (1.0 - fy), 1.0 - fy, -fx),
                    (1.0, 0.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
                    (1.0, 1.0, fx * fy, fy, fx),
                ];
                for (dy, dx, wgt, dwx, dwy) in taps {
                    let qx = x0 + dx;
                    let qy = y0 + dy;
                    if qx < 0.0 || qy < 0.0 || qx >= w as f64 || qy >= h as f64 {
                        continue;
                    }
                    let (qxi, qyi) = (qx as usize, qy as usize);
                    let d = den[[b, 0, qyi, qxi]];
                    if d <= DEN_FLOOR {
                        continue;
                    }
                    // residual = sum_c g * (I_src - out) / den at the tap
                    let mut resid = 0.0;
                    for ch in 0..c {
                        let gq = g[[b, ch, qyi, qxi]];
                        let diff = img[[b, ch, y, x]] - out[[b, ch, qyi, qxi]];
                        resid += gq * diff / d;
                        gimg[[b, ch, y, x]] += gq * wgt * m / d;
                    }
                    gz[[b, 0, y, x]] += resid * wgt * m;
                    gflow[[b, 0, y, x]] += resid * dwx * m;
                    gflow[[b, 1, y, x]] += resid * dwy * m;
                }
            }
        }
    }
    (gimg, gflow, gz)
}

/// Forward-warps `image` by `flow` using softmax splatting over `importance`.
///
/// Colliding source pixels blend with weights `softmax(importance)`; target
/// cells receiving no mass stay 0 (holes), out-of-frame splats are dropped.
pub fn forward_warp_softmax(
    image: &Image,
    flow: &FlowField,
    importance: &Array2<f64>,
) -> Result<Image> {
    check_warp_shapes(image, flow)?;
    if importance.dim() != flow.dim() {
        return Err(Error::shape(
            format!("{:?}", flow.dim()),
            format!("{:?}", importance.dim()),
        ));
    }
    let img = image_to_nchw(image);
    let fl = flow_to_nchw(flow);
    let (h, w) = flow.dim();
    let mut z = ArrayD::zeros(IxDyn(&[1, 1, h, w]));
    for y in 0..h {
        for x in 0..w {
            z[[0, 0, y, x]] = importance[[y, x]];
        }
    }
    let (out, _) = splat_forward(&img, &fl, &z);
    Ok(nchw_to_image(&out, 0))
}

// --- backward warping (bilinear gather) ---------------------------------------

fn bwarp_forward(img: &ArrayD<f64>, flow: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = dim4(img);
    let mut out = ArrayD::<f64>::zeros(img.raw_dim());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let sx = (x as f64 + flow[[b, 0, y, x]]).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + flow[[b, 1, y, x]]).clamp(0.0, (h - 1) as f64);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                for ch in 0..c {
                    out[[b, ch, y, x]] = img[[b, ch, y0, x0]] * (1.0 - fx) * (1.0 - fy)
                        + img[[b, ch, y0, x1]] * fx * (1.0 - fy)
                        + img[[b, ch, y1, x0]] * (1.0 - fx) * fy
                        + img[[b, ch, y1, x1]] * fx * fy;
                }
            }
        }
    }
    out
}

fn bwarp_backward(
    img: &ArrayD<f64>,
    flow: &ArrayD<f64>,
    g: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (n, c, h, w) = dim4(img);
    let mut gimg = ArrayD::<f64>::zeros(img.raw_dim());
    let mut gflow = ArrayD::<f64>::zeros(flow.raw_dim());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let rx = x as f64 + flow[[b, 0, y, x]];
                let ry = y as f64 + flow[[b, 1, y, x]];
                let sx = rx.clamp(0.0, (w - 1) as f64);
                let sy = ry.clamp(0.0, (h - 1) as f64);
                // clamped coordinates stop responding to the flow
                let active_x = rx > 0.0 && rx < (w - 1) as f64;
                let active_y = ry > 0.0 && ry < (h - 1) as f64;
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                for ch in 0..c {
                    let gv = g[[b, ch, y, x]];
                    gimg[[b, ch, y0, x0]] += gv * (1.0 - fx) * (1.0 - fy);
                    gimg[[b, ch, y0, x1]] += gv * fx * (1.0 - fy);
                    gimg[[b, ch, y1, x0]] += gv * (1.0 - fx) * fy;
                    gimg[[b, ch, y1, x1]] += gv * fx * fy;
                    if active_x {
                        let dx = (img[[b, ch, y0, x1]] - img[[b, ch, y0, x0]]) * (1.0 - fy)
                            + (img[[b, ch, y1, x1]] - img[[b, ch, y1, x0]]) * fy;
                        gflow[[b, 0, y, x]] += gv * dx;
                    }
                    if active_y {
                        let dy = (img[[b, ch, y1, x0]] - img[[b, ch, y0, x0]]) * (1.0 - fx)
                            + (img[[b, ch, y1, x1]] - img[[b, ch, y0, x1]]) * fx;
                        gflow[[b, 1, y, x]] += gv * dy;
                    }
                }
            }
        }
    }
    (gimg, gflow)
}

/// Backward-warps `image`: `out(x) = image(x + flow(x))` with bilinear
/// sampling and border clamping.
pub fn backward_warp(image: &Image, flow: &FlowField) -> Result<Image> {
    check_warp_shapes(image, flow)?;
    let img = image_to_nchw(image);
    let fl = flow_to_nchw(flow);
    Ok(nchw_to_image(&bwarp_forward(&img, &fl), 0))
}

fn check_warp_shapes(image: &Image, flow: &FlowField) -> Result<()> {
    let (h, w, _) = image.data.dim();
    if flow.dim() != (h, w) {
        return Err(Error::shape(
            format!("flow {:?}", (h, w)),
            format!("{:?}", flow.dim()),
        ));
    }
    Ok(())
}

// --- tape ops -----------------------------------------------------------------

/// Differentiable softmax splatting: `image [N,C,H,W]`, `flow [N,2,H,W]`,
/// `importance [N,1,H,W]`.
pub fn op_forward_warp_softmax(tape: &mut Tape, image: Var, flow: Var, importance: Var) -> Var {
    let (out, _) = splat_forward(tape.value(image), tape.value(flow), tape.value(importance));
    let (pi, pf, pz) = (image.0, flow.0, importance.0);
    tape.push(
        out,
        vec![pi, pf, pz],
        Some(Box::new(move |vals, idx, g| {
            let (out, den) = splat_forward(&vals[pi], &vals[pf], &vals[pz]);
            debug_assert_eq!(out.shape(), vals[idx].shape());
            let (gi, gf, gz) = splat_backward(&vals[pi], &vals[pf], &vals[pz], &out, &den, g);
            vec![gi, gf, gz]
        })),
    )
}

/// Differentiable bilinear gather: `image [N,C,H,W]`, `flow [N,2,H,W]`.
pub fn op_backward_warp(tape: &mut Tape, image: Var, flow: Var) -> Var {
    let out = bwarp_forward(tape.value(image), tape.value(flow));
    let (pi, pf) = (image.0, flow.0);
    tape.push(
        out,
        vec![pi, pf],
        Some(Box::new(move |vals, _, g| {
            let (gi, gf) = bwarp_backward(&vals[pi], &vals[pf], g);
            vec![gi, gf]
        })),
    )
}

// --- flow file format ----------------------------------------------------------

const FLOW_MAGIC: u32 = 0x4c46_5645; // "EVFL"
const FLOW_VERSION: u32 = 1;

/// Writes a flow field as `magic, version, H, W` then the `u` and `v` planes
/// as little-endian f32.
pub fn write_flow_file(path: &Path, flow: &FlowField) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (h, w) = flow.dim();
    f.write_u32::<LittleEndian>(FLOW_MAGIC)?;
    f.write_u32::<LittleEndian>(FLOW_VERSION)?;
    f.write_u32::<LittleEndian>(h as u32)?;
    f.write_u32::<LittleEndian>(w as u32)?;
    for plane in [&flow.u, &flow.v] {
        for v in plane.iter() {
            f.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    Ok(())
}

pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if f.read_u32::<LittleEndian>()? != FLOW_MAGIC {
        return Err(bad("not a flow file (magic mismatch)"));
    }
    if f.read_u32::<LittleEndian>()? != FLOW_VERSION {
        return Err(bad("unsupported flow file version"));
    }
    let h = f.read_u32::<LittleEndian>()? as usize;
    let w = f.read_u32::<LittleEndian>()? as usize;
    let mut flow = FlowField::zeros(h, w);
    for plane in [&mut flow.u, &mut flow.v] {
        for v in plane.iter_mut() {
            *v = f.read_f32::<LittleEndian>()? as f64;
        }
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes after flow planes"));
    }
    Ok(flow)
}
