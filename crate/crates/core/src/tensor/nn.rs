//! Network-layer operations: convolution, resampling, pooling, attention.
//!
//! Layout for all ops is `[N, C, H, W]`. Convolution lowers to im2col plus a
//! matrix product; the column matrix is rebuilt in the backward rule instead of
//! being cached, trading a little compute for memory.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use super::{dim4, Tape, Var};

/// Output side length of a padded strided convolution.
pub fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ArrayD<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, c, h, w) = dim4(x);
    let mut col = Array2::<f64>::zeros((c * k * k, n * ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for b in 0..n {
                    for i in 0..ho {
                        let yy = (i * stride + ki) as isize - pad as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for j in 0..wo {
                            let xx = (j * stride + kj) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            col[[row, (b * ho + i) * wo + j]] =
                                x[[b, ci, yy as usize, xx as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<f64> {
    let (n, c, h, w) = shape;
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for b in 0..n {
                    for i in 0..ho {
                        let yy = (i * stride + ki) as isize - pad as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for j in 0..wo {
                            let xx = (j * stride + kj) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            x[[b, ci, yy as usize, xx as usize]] +=
                                col[[row, (b * ho + i) * wo + j]];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 2-D convolution, square kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let (n, ci, h, w) = dim4(xv);
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, k, k]");
        let (co, wci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[2], ws[3], "conv2d kernels are square");
        assert_eq!(ci, wci, "conv2d channel mismatch");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(w, k, stride, pad);

        let col = im2col(xv, k, stride, pad, ho, wo);
        let wmat = wv
            .to_shape((co, ci * k * k))
            .expect("conv2d weight reshape")
            .to_owned();
        let out_mat = wmat.dot(&col); // [Co, N*Ho*Wo]

        let bv = self.value(bias);
        assert_eq!(bv.shape(), &[co]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, co, ho, wo]));
        for b in 0..n {
            for c in 0..co {
                let bias_c = bv[[c]];
                for i in 0..ho {
                    for j in 0..wo {
                        out[[b, c, i, j]] = out_mat[[c, (b * ho + i) * wo + j]] + bias_c;
                    }
                }
            }
        }

        let (px, pw, pb) = (x.0, weight.0, bias.0);
        self.push(
            out,
            vec![px, pw, pb],
            Some(Box::new(move |vals, _, g| {
                let xv = &vals[px];
                let wv = &vals[pw];
                let (n, ci, h, w) = dim4(xv);
                // flatten upstream grad to [Co, N*Ho*Wo]
                let mut gmat = Array2::<f64>::zeros((co, n * ho * wo));
                let mut gbias = ArrayD::<f64>::zeros(IxDyn(&[co]));
                for b in 0..n {
                    for c in 0..co {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = g[[b, c, i, j]];
                                gmat[[c, (b * ho + i) * wo + j]] = gv;
                                gbias[[c]] += gv;
                            }
                        }
                    }
                }
                let col = im2col(xv, k, stride, pad, ho, wo);
                let gw = gmat.dot(&col.t()); // [Co, Ci*k*k]
                // dot's outer-product path can return a non-standard layout
                let gw = gw
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((co, ci, k, k))
                    .expect("grad weight reshape")
                    .into_dyn();
                let wmat = wv
                    .to_shape((co, ci * k * k))
                    .expect("conv2d weight reshape")
                    .to_owned();
                let gcol = wmat.t().dot(&gmat); // [Ci*k*k, N*Ho*Wo]
                let gx = col2im(&gcol, (n, ci, h, w), k, stride, pad, ho, wo);
                vec![gx, gw, gbias]
            })),
        )
    }

    /// Bilinear 2x upsampling (half-pixel centers, edge clamped).
    pub fn bilinear_up2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dim4(xv);
        let (oh, ow) = (h * 2, w * 2);
        let taps_y = up2_taps(h);
        let taps_x = up2_taps(w);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, oh, ow]));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    let (y0, y1, fy) = taps_y[i];
                    for j in 0..ow {
                        let (x0, x1, fx) = taps_x[j];
                        let v00 = xv[[b, ch, y0, x0]];
                        let v01 = xv[[b, ch, y0, x1]];
                        let v10 = xv[[b, ch, y1, x0]];
                        let v11 = xv[[b, ch, y1, x1]];
                        out[[b, ch, i, j]] = v00 * (1.0 - fy) * (1.0 - fx)
                            + v01 * (1.0 - fy) * fx
                            + v10 * fy * (1.0 - fx)
                            + v11 * fy * fx;
                    }
                }
            }
        }
        let px = x.0;
        self.push(
            out,
            vec![px],
            Some(Box::new(move |vals, _, g| {
                let (n, c, h, w) = dim4(&vals[px]);
                let taps_y = up2_taps(h);
                let taps_x = up2_taps(w);
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..h * 2 {
                            let (y0, y1, fy) = taps_y[i];
                            for j in 0..w * 2 {
                                let (x0, x1, fx) = taps_x[j];
                                let gv = g[[b, ch, i, j]];
                                gx[[b, ch, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                                gx[[b, ch, y0, x1]] += gv * (1.0 - fy) * fx;
                                gx[[b, ch, y1, x0]] += gv * fy * (1.0 - fx);
                                gx[[b, ch, y1, x1]] += gv * fy * fx;
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Adaptive average pooling to `(oh, ow)`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dim4(xv);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, oh, ow]));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    let (ys, ye) = pool_span(i, h, oh);
                    for j in 0..ow {
                        let (xs, xe) = pool_span(j, w, ow);
                        let mut s = 0.0;
                        for yy in ys..ye {
                            for xx in xs..xe {
                                s += xv[[b, ch, yy, xx]];
                            }
                        }
                        out[[b, ch, i, j]] = s / ((ye - ys) * (xe - xs)) as f64;
                    }
                }
            }
        }
        let px = x.0;
        self.push(
            out,
            vec![px],
            Some(Box::new(move |vals, _, g| {
                let (n, c, h, w) = dim4(&vals[px]);
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..oh {
                            let (ys, ye) = pool_span(i, h, oh);
                            for j in 0..ow {
                                let (xs, xe) = pool_span(j, w, ow);
                                let share =
                                    g[[b, ch, i, j]] / ((ye - ys) * (xe - xs)) as f64;
                                for yy in ys..ye {
                                    for xx in xs..xe {
                                        gx[[b, ch, yy, xx]] += share;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Multi-head scaled dot-product attention within non-overlapping square
    /// windows. `q`, `k`, `v` all `[N, C, H, W]` with `C % heads == 0` and
    /// `H % win == 0`, `W % win == 0`.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, win: usize) -> Var {
        let (_, c, h, w) = dim4(self.value(q));
        assert_eq!(self.value(k).shape(), self.value(q).shape());
        assert_eq!(self.value(v).shape(), self.value(q).shape());
        assert_eq!(c % heads, 0, "attention channels must divide heads");
        assert!(
            h % win == 0 && w % win == 0,
            "attention input {}x{} not divisible by window {}",
            h,
            w,
            win
        );
        let (pq, pk, pv) = (q.0, k.0, v.0);
        let out = attention_forward(self.value(q), self.value(k), self.value(v), heads, win);
        self.push(
            out,
            vec![pq, pk, pv],
            Some(Box::new(move |vals, _, g| {
                attention_backward(&vals[pq], &vals[pk], &vals[pv], g, heads, win)
            })),
        );
        Var(self.len() - 1)
    }
}

fn up2_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..len * 2)
        .map(|i| {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let base = src.floor();
            let f = src - base;
            let i0 = (base.max(0.0) as usize).min(len - 1);
            let i1 = ((base + 1.0).max(0.0) as usize).min(len - 1);
            (i0, i1, f)
        })
        .collect()
}

fn pool_span(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

struct WindowIter {
    n: usize,
    heads: usize,
    wy: usize,
    wx: usize,
}

fn windows(n: usize, heads: usize, h: usize, w: usize, win: usize) -> Vec<WindowIter> {
    let mut out = Vec::new();
    for b in 0..n {
        for hd in 0..heads {
            for wy in (0..h).step_by(win) {
                for wx in (0..w).step_by(win) {
                    out.push(WindowIter {
                        n: b,
                        heads: hd,
                        wy,
                        wx,
                    });
                }
            }
        }
    }
    out
}

/// Attention weights for one window/head: rows are queries, softmaxed over keys.
fn window_scores(
    q: &ArrayD<f64>,
    k: &ArrayD<f64>,
    d: usize,
    win: usize,
    wd: &WindowIter,
) -> Array2<f64> {
    let t = win * win;
    let scale = 1.0 / (d as f64).sqrt();
    let c0 = wd.heads * d;
    let mut s = Array2::<f64>::zeros((t, t));
    for i in 0..t {
        let (iy, ix) = (wd.wy + i / win, wd.wx + i % win);
        for j in 0..t {
            let (jy, jx) = (wd.wy + j / win, wd.wx + j % win);
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[[wd.n, c0 + c, iy, ix]] * k[[wd.n, c0 + c, jy, jx]];
            }
            s[[i, j]] = dot * scale;
        }
    }
    // softmax over keys (axis 1)
    for mut row in s.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|e| (e - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    s
}

fn attention_forward(
    q: &ArrayD<f64>,
    k: &ArrayD<f64>,
    v: &ArrayD<f64>,
    heads: usize,
    win: usize,
) -> ArrayD<f64> {
    let (n, c, h, w) = dim4(q);
    let d = c / heads;
    let t = win * win;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    for wd in windows(n, heads, h, w, win) {
        let a = window_scores(q, k, d, win, &wd);
        let c0 = wd.heads * d;
        for i in 0..t {
            let (iy, ix) = (wd.wy + i / win, wd.wx + i % win);
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..t {
                    let (jy, jx) = (wd.wy + j / win, wd.wx + j % win);
                    acc += a[[i, j]] * v[[wd.n, c0 + c, jy, jx]];
                }
                out[[wd.n, c0 + c, iy, ix]] = acc;
            }
        }
    }
    out
}

fn attention_backward(
    q: &ArrayD<f64>,
    k: &ArrayD<f64>,
    v: &ArrayD<f64>,
    g: &ArrayD<f64>,
    heads: usize,
    win: usize,
) -> Vec<ArrayD<f64>> {
    let (n, c, h, w) = dim4(q);
    let d = c / heads;
    let t = win * win;
    let scale = 1.0 / (d as f64).sqrt();
    let mut gq = ArrayD::<f64>::zeros(q.raw_dim());
    let mut gk = ArrayD::<f64>::zeros(q.raw_dim());
    let mut gv = ArrayD::<f64>::zeros(q.raw_dim());
    for wd in windows(n, heads, h, w, win) {
        let a = window_scores(q, k, d, win, &wd);
        let c0 = wd.heads * d;
        let pos = |idx: usize| (wd.wy + idx / win, wd.wx + idx % win);
        // dV and dA
        let mut da = Array2::<f64>::zeros((t, t));
        for j in 0..t {
            let (jy, jx) = pos(j);
            for c in 0..d {
                let mut acc = 0.0;
                for i in 0..t {
                    let (iy, ix) = pos(i);
                    let gv_i = g[[wd.n, c0 + c, iy, ix]];
                    acc += a[[i, j]] * gv_i;
                    da[[i, j]] += gv_i * v[[wd.n, c0 + c, jy, jx]];
                }
                gv[[wd.n, c0 + c, jy, jx]] += acc;
            }
        }
        // softmax backward per query row, then into q/k
        for i in 0..t {
            let (iy, ix) = pos(i);
            let mut dot = 0.0;
            for j in 0..t {
                dot += da[[i, j]] * a[[i, j]];
            }
            for j in 0..t {
                let (jy, jx) = pos(j);
                let ds = a[[i, j]] * (da[[i, j]] - dot) * scale;
                for c in 0..d {
                    gq[[wd.n, c0 + c, iy, ix]] += ds * k[[wd.n, c0 + c, jy, jx]];
                    gk[[wd.n, c0 + c, jy, jx]] += ds * q[[wd.n, c0 + c, iy, ix]];
                }
            }
        }
    }
    vec![gq, gk, gv]
}

// --- initialization ---------------------------------------------------------

/// He-style uniform init for a conv kernel, bias zeroed.
pub fn conv_init<R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> (ArrayD<f64>, ArrayD<f64>) {
    let fan_in = (ci * k * k) as f64;
    let bound = (2.0 / fan_in).sqrt() * 3f64.sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| {
        rng.gen_range(-bound..bound)
    });
    (w, ArrayD::zeros(IxDyn(&[co])))
}

/// All-zero kernel and bias, used for output heads so freshly initialized
/// networks predict exactly zero.
pub fn conv_zero_init(co: usize, ci: usize, k: usize) -> (ArrayD<f64>, ArrayD<f64>) {
    (
        ArrayD::zeros(IxDyn(&[co, ci, k, k])),
        ArrayD::zeros(IxDyn(&[co])),
    )
}
