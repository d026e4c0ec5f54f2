//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records forward operations; [`Tape::backward`] replays them in
//! reverse, accumulating gradients. All values are `f64` so analytic gradients
//! can be validated against central finite differences at tight tolerances.
//! Nodes are appended in topological order, which makes the reverse sweep a
//! single indexed pass with no explicit sorting.

pub mod gradcheck;
pub mod nn;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Backward rule: `(all node values, own index, upstream grad) -> grads per parent`.
type BackFn = Box<dyn Fn(&[ArrayD<f64>], usize, &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    parents: Vec<Vec<usize>>,
    backwards: Vec<Option<BackFn>>,
}

/// Result of a backward pass; gradients indexed by the [`Var`]s of the tape.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        backward: Option<BackFn>,
    ) -> Var {
        self.values.push(value);
        self.parents.push(parents);
        self.backwards.push(backward);
        Var(self.values.len() - 1)
    }

    /// Leaf node. Gradients still accumulate into it, so leaves double as
    /// trainable parameters; ones the caller never queries cost nothing extra.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let Some(back) = &self.backwards[i] else {
                continue;
            };
            let parent_grads = back(&self.values, i, &g);
            debug_assert_eq!(parent_grads.len(), self.parents[i].len());
            for (&p, pg) in self.parents[i].iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), self.values[p].shape());
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // --- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), -g])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        let (pa, pb) = (a.0, b.0);
        self.push(
            v,
            vec![pa, pb],
            Some(Box::new(move |vals, _, g| {
                vec![g * &vals[pb], g * &vals[pa]]
            })),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = &self.values[a.0] * s;
        self.push(v, vec![a.0], Some(Box::new(move |_, _, g| vec![g * s])))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = &self.values[a.0] + s;
        self.push(v, vec![a.0], Some(Box::new(|_, _, g| vec![g.clone()])))
    }

    /// Elementwise product with a non-differentiated array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        assert_eq!(self.values[a.0].shape(), c.shape());
        let v = &self.values[a.0] * &c;
        self.push(v, vec![a.0], Some(Box::new(move |_, _, g| vec![g * &c])))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::abs);
        let pa = a.0;
        self.push(
            v,
            vec![pa],
            Some(Box::new(move |vals, _, g| {
                vec![g * &vals[pa].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.values[a.0].mapv(|x| if x > 0.0 { x } else { slope * x });
        let pa = a.0;
        self.push(
            v,
            vec![pa],
            Some(Box::new(move |vals, _, g| {
                vec![g * &vals[pa].mapv(|x| if x > 0.0 { 1.0 } else { slope })]
            })),
        )
    }

    // --- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum());
        let pa = a.0;
        self.push(
            v,
            vec![pa],
            Some(Box::new(move |vals, _, g| {
                let gs = g[[]];
                vec![ArrayD::from_elem(vals[pa].raw_dim(), gs)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean absolute difference against a fixed target.
    pub fn l1_to(&mut self, a: Var, target: &ArrayD<f64>) -> Var {
        let t = self.constant(target.clone());
        let d = self.sub(a, t);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// `sum_k weights[k] * vars[k]`, one node.
    pub fn weighted_sum(&mut self, vars: &[Var], weights: &[f64]) -> Var {
        assert_eq!(vars.len(), weights.len());
        assert!(!vars.is_empty());
        let mut v = &self.values[vars[0].0] * weights[0];
        for (var, &w) in vars.iter().zip(weights).skip(1) {
            v = v + &self.values[var.0] * w;
        }
        let ws = weights.to_vec();
        self.push(
            v,
            vars.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_, _, g| {
                ws.iter().map(|&w| g * w).collect()
            })),
        )
    }

    // --- shape ops (4-D, layout [N, C, H, W]) ------------------------------

    pub fn concat_ch(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let views: Vec<_> = vars.iter().map(|v| self.values[v.0].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_ch shapes");
        let widths: Vec<usize> = vars.iter().map(|v| self.values[v.0].shape()[1]).collect();
        self.push(
            v,
            vars.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_, _, g| {
                let mut out = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &w in &widths {
                    out.push(
                        g.slice_axis(Axis(1), Slice::from(start..start + w))
                            .to_owned(),
                    );
                    start += w;
                }
                out
            })),
        )
    }

    pub fn slice_ch(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.values[a.0]
            .slice_axis(Axis(1), Slice::from(start..end))
            .to_owned();
        let pa = a.0;
        self.push(
            v,
            vec![pa],
            Some(Box::new(move |vals, _, g| {
                let mut out = ArrayD::zeros(vals[pa].raw_dim());
                out.slice_axis_mut(Axis(1), Slice::from(start..end))
                    .assign(g);
                vec![out]
            })),
        )
    }

    pub fn crop_spatial(&mut self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let v = self.values[a.0]
            .slice_axis(Axis(2), Slice::from(y0..y0 + h))
            .slice_axis(Axis(3), Slice::from(x0..x0 + w))
            .to_owned();
        let pa = a.0;
        self.push(
            v,
            vec![pa],
            Some(Box::new(move |vals, _, g| {
                let mut out = ArrayD::zeros(vals[pa].raw_dim());
                out.slice_axis_mut(Axis(2), Slice::from(y0..y0 + h))
                    .slice_axis_mut(Axis(3), Slice::from(x0..x0 + w))
                    .assign(g);
                vec![out]
            })),
        )
    }

    /// Embed into an all-zero `[N, C, out_h, out_w]` canvas at `(y0, x0)`.
    pub fn pad_spatial(&mut self, a: Var, out_h: usize, out_w: usize, y0: usize, x0: usize) -> Var {
        let val = &self.values[a.0];
        let (n, c, h, w) = dim4(val);
        let mut v = ArrayD::zeros(IxDyn(&[n, c, out_h, out_w]));
        v.slice_axis_mut(Axis(2), Slice::from(y0..y0 + h))
            .slice_axis_mut(Axis(3), Slice::from(x0..x0 + w))
            .assign(val);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                vec![g
                    .slice_axis(Axis(2), Slice::from(y0..y0 + h))
                    .slice_axis(Axis(3), Slice::from(x0..x0 + w))
                    .to_owned()]
            })),
        )
    }

    // --- softmax family ----------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = &self.values[a.0];
        let mut v = x.clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|e| (e - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|e| e / s);
        }
        let idx = self.values.len();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |vals, _, g| {
                let y = &vals[idx];
                let mut out = g * y;
                // subtract y * (g . y) per lane
                let mut dots = out.clone();
                for (mut lane_d, lane_y) in dots
                    .lanes_mut(Axis(axis))
                    .into_iter()
                    .zip(vals[idx].lanes(Axis(axis)))
                {
                    let dot: f64 = lane_d.sum();
                    for (d, &yv) in lane_d.iter_mut().zip(lane_y.iter()) {
                        *d = dot * yv;
                    }
                }
                out -= &dots;
                vec![out]
            })),
        )
    }

    /// Softmax along axis 1 restricted to positions where `mask == 1`;
    /// masked-out entries produce exactly 0, and all-masked lanes stay 0.
    pub fn masked_softmax_ch(&mut self, a: Var, mask: ArrayD<f64>) -> Var {
        assert_eq!(self.values[a.0].shape(), mask.shape());
        let x = &self.values[a.0];
        let mut v = ArrayD::zeros(x.raw_dim());
        for ((mut lane_o, lane_x), lane_m) in v
            .lanes_mut(Axis(1))
            .into_iter()
            .zip(x.lanes(Axis(1)))
            .zip(mask.lanes(Axis(1)))
        {
            let mut m = f64::NEG_INFINITY;
            for (xv, mv) in lane_x.iter().zip(lane_m.iter()) {
                if *mv > 0.5 && *xv > m {
                    m = *xv;
                }
            }
            if !m.is_finite() {
                continue; // no contributor in this lane
            }
            let mut s = 0.0;
            for (o, (xv, mv)) in lane_o.iter_mut().zip(lane_x.iter().zip(lane_m.iter())) {
                if *mv > 0.5 {
                    *o = (xv - m).exp();
                    s += *o;
                }
            }
            for o in lane_o.iter_mut() {
                *o /= s;
            }
        }
        let idx = self.values.len();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |vals, _, g| {
                let y = &vals[idx];
                let mut out = ArrayD::zeros(y.raw_dim());
                for ((mut lane_d, lane_y), lane_g) in out
                    .lanes_mut(Axis(1))
                    .into_iter()
                    .zip(y.lanes(Axis(1)))
                    .zip(g.lanes(Axis(1)))
                {
                    let dot: f64 = lane_y.iter().zip(lane_g.iter()).map(|(y, g)| y * g).sum();
                    for (d, (&yv, &gv)) in
                        lane_d.iter_mut().zip(lane_y.iter().zip(lane_g.iter()))
                    {
                        *d = yv * (gv - dot);
                    }
                }
                vec![out]
            })),
        )
    }

    /// Straight-through one-hot along axis 1: hard argmax forward (ties to the
    /// lowest index), identity gradient backward.
    pub fn hardmax_st(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut v = ArrayD::zeros(x.raw_dim());
        for (mut lane_o, lane_x) in v.lanes_mut(Axis(1)).into_iter().zip(x.lanes(Axis(1))) {
            let mut best = 0;
            for (i, xv) in lane_x.iter().enumerate() {
                if *xv > lane_x[best] {
                    best = i;
                }
            }
            lane_o[best] = 1.0;
        }
        self.push(v, vec![a.0], Some(Box::new(|_, _, g| vec![g.clone()])))
    }

    /// Broadcast-multiply a `[N, 1, H, W]` weight over a `[N, C, H, W]` tensor.
    pub fn mul_broadcast_ch(&mut self, weight: Var, x: Var) -> Var {
        let wv = &self.values[weight.0];
        let xv = &self.values[x.0];
        let (n, c, h, w) = dim4(xv);
        assert_eq!(wv.shape(), &[n, 1, h, w]);
        let v = xv * &wv.broadcast(IxDyn(&[n, c, h, w])).unwrap();
        let (pw, px) = (weight.0, x.0);
        self.push(
            v,
            vec![pw, px],
            Some(Box::new(move |vals, _, g| {
                let xv = &vals[px];
                let wv = &vals[pw];
                let gw = (g * xv)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .into_dyn();
                let gx = g * &wv.broadcast(g.raw_dim()).unwrap();
                vec![gw, gx]
            })),
        )
    }
}

pub(crate) fn dim4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got shape {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    fn arrd(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn add_mul_backward() {
        let mut t = Tape::new();
        let a = t.constant(arrd(&[1.0, 2.0]));
        let b = t.constant(arrd(&[3.0, -4.0]));
        let p = t.mul(a, b);
        let s = t.sum_all(p);
        let g = t.backward(s);
        assert_eq!(g.wrt(a).unwrap(), &arrd(&[3.0, -4.0]));
        assert_eq!(g.wrt(b).unwrap(), &arrd(&[1.0, 2.0]));
    }

    #[test]
    fn grad_accumulates_when_var_reused() {
        let mut t = Tape::new();
        let a = t.constant(arrd(&[2.0]));
        let sq = t.mul(a, a);
        let s = t.sum_all(sq);
        let g = t.backward(s);
        assert_eq!(g.wrt(a).unwrap(), &arrd(&[4.0]));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_centered() {
        let mut t = Tape::new();
        let a = t.constant(arrd(&[0.3, -1.0, 2.0]));
        let y = t.softmax_axis(a, 0);
        let total: f64 = t.value(y).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // d(sum softmax)/dx = 0 since the output always sums to 1
        let s = t.sum_all(y);
        let g = t.backward(s);
        for v in g.wrt(a).unwrap() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn hardmax_breaks_ties_to_lowest_index() {
        let mut t = Tape::new();
        let a = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![0.5, 0.5]).unwrap());
        let h = t.hardmax_st(a);
        assert_eq!(t.value(h)[[0, 0, 0, 0]], 1.0);
        assert_eq!(t.value(h)[[0, 1, 0, 0]], 0.0);
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut t = Tape::new();
        let a = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 3, 1, 1]), vec![1.0, 2.0, 3.0]).unwrap(),
        );
        let mask =
            ArrayD::from_shape_vec(IxDyn(&[1, 3, 1, 1]), vec![1.0, 0.0, 1.0]).unwrap();
        let y = t.masked_softmax_ch(a, mask);
        let v = t.value(y);
        assert_eq!(v[[0, 1, 0, 0]], 0.0);
        assert!((v[[0, 0, 0, 0]] + v[[0, 2, 0, 0]] - 1.0).abs() < 1e-12);
        assert!(v[[0, 2, 0, 0]] > v[[0, 0, 0, 0]]);
    }

    #[test]
    fn crop_and_pad_are_adjoint() {
        let mut t = Tape::new();
        let a = t.constant(ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
            (ix[2] * 4 + ix[3]) as f64
        }));
        let c = t.crop_spatial(a, 1, 2, 2, 2);
        assert_eq!(t.value(c)[[0, 0, 0, 0]], 6.0);
        let p = t.pad_spatial(c, 4, 4, 1, 2);
        assert_eq!(t.value(p)[[0, 0, 1, 2]], 6.0);
        assert_eq!(t.value(p)[[0, 0, 0, 0]], 0.0);
        let s = t.sum_all(p);
        let g = t.backward(s);
        // every cropped cell got gradient 1, the rest 0
        let ga = g.wrt(a).unwrap();
        assert_eq!(ga[[0, 0, 1, 2]], 1.0);
        assert_eq!(ga[[0, 0, 0, 0]], 0.0);
    }
}
