//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. The op set is exactly what the message-passing model
//! and its losses need, with the graph-specific ones (weighted GIN aggregation,
//! duplicate averaging, per-graph pooling) fused for speed.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `(n, m) + (1, m)` broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    /// Clamp into `[lo, hi]`; gradient is zero where clamped.
    Clamp(Var, f64, f64),
    /// `log(p) - log(1 - p)` with `p` clamped into `[eps, 1 - eps]`.
    Logit(Var, f64),
    Gather(Var, Rc<[usize]>),
    /// `out[v] = (1 + eps) h[v] + sum_{e: dst_e = v} w_e h[src_e]`.
    GinAggregate {
        h: Var,
        w: Var,
        eps: Var,
        src: Rc<[usize]>,
        dst: Rc<[usize]>,
    },
    /// `out[e] = (x[e] + x[rev[e]]) / 2` for a column vector.
    PairAverage(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[usize]>, Rc<[f64]>),
    /// Per-row softmax cross-entropy; the node keeps the softmax for backward.
    CrossEntropy(Var, Rc<[usize]>, Array2<f64>),
    /// Elementwise Bernoulli KL to a fixed prior `r`, with `p` clamped.
    BernoulliKl(Var, f64, f64),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise Bernoulli KL `p ln(p/r) + (1-p) ln((1-p)/(1-r))` after
/// clamping `p` into `[eps, 1 - eps]`.
pub fn bernoulli_kl(p: f64, r: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    p * (p / r).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - r)).ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// The single entry of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn column(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.constant(Array2::from_shape_vec((n, 1), values).expect("column shape"))
    }

    pub fn param(&mut self, index: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn logit(&mut self, p: Var, eps: f64) -> Var {
        let v = self.value(p).mapv(|x| {
            let x = x.clamp(eps, 1.0 - eps);
            x.ln() - (1.0 - x).ln()
        });
        self.push(v, Op::Logit(p, eps))
    }

    pub fn gather(&mut self, a: Var, rows: Rc<[usize]>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::Gather(a, rows))
    }

    pub fn gin_aggregate(&mut self, h: Var, w: Var, eps: Var, src: Rc<[usize]>, dst: Rc<[usize]>) -> Var {
        let hv = self.value(h);
        let wv = self.value(w);
        let scale = 1.0 + self.scalar(eps);
        let width = hv.ncols();
        let mut out = hv * scale;
        {
            let hs = hv.as_slice().expect("contiguous node states");
            let os = out.as_slice_mut().expect("contiguous output");
            for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                let we = wv[[e, 0]];
                let from = &hs[s * width..(s + 1) * width];
                let to = &mut os[d * width..(d + 1) * width];
                for (t, f) in to.iter_mut().zip(from) {
                    *t += we * f;
                }
            }
        }
        self.push(out, Op::GinAggregate { h, w, eps, src, dst })
    }

    pub fn pair_average(&mut self, x: Var, reverse: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let v = Array2::from_shape_fn(xv.dim(), |(e, j)| 0.5 * (xv[[e, j]] + xv[[reverse[e], j]]));
        self.push(v, Op::PairAverage(x, reverse))
    }

    /// Row sums grouped by `segment[row]`; output has one row per segment.
    pub fn segment_sum(&mut self, x: Var, segment: Rc<[usize]>, num_segments: usize) -> Var {
        let v = segment_sum(self.value(x), &segment, num_segments);
        self.push(v, Op::SegmentSum(x, segment))
    }

    pub fn segment_mean(&mut self, x: Var, segment: Rc<[usize]>, num_segments: usize) -> Var {
        let mut counts = vec![0.0; num_segments];
        for &s in segment.iter() {
            counts[s] += 1.0;
        }
        let mut v = segment_sum(self.value(x), &segment, num_segments);
        for (mut row, &c) in v.rows_mut().into_iter().zip(&counts) {
            if c > 0.0 {
                row /= c;
            }
        }
        self.push(v, Op::SegmentMean(x, segment, counts.into()))
    }

    /// Per-row `-log softmax(logits)[label]` as a column.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Var {
        let lv = self.value(logits);
        let mut soft = lv.clone();
        let mut loss = Array2::zeros((lv.nrows(), 1));
        for (i, mut row) in soft.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            let label_term = lv[[i, labels[i]]] - max;
            loss[[i, 0]] = total.ln() - label_term;
            row /= total;
        }
        self.push(loss, Op::CrossEntropy(logits, labels, soft))
    }

    pub fn bernoulli_kl(&mut self, p: Var, r: f64, eps: f64) -> Var {
        let v = self.value(p).mapv(|x| bernoulli_kl(x, r, eps));
        self.push(v, Op::BernoulliKl(p, r, eps))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = if av.is_empty() { 0.0 } else { av.sum() / av.len() as f64 };
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    /// Gradient of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).dim()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Constant | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut accumulate = |v: Var, g: Array2<f64>| {
                if !matches!(self.nodes[v.0].op, Op::Constant) {
                    add_into(&mut grads, v, g);
                }
            };
            match &node.op {
                Op::Constant | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(*a, ga);
                    accumulate(*b, gb);
                }
                Op::AddRow(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(*bias, gb);
                    accumulate(*a, g);
                }
                Op::Add(a, b) => {
                    accumulate(*b, g.clone());
                    accumulate(*a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(*b, -&g);
                    accumulate(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(*a, ga);
                    accumulate(*b, gb);
                }
                Op::Scale(a, c) => accumulate(*a, g * *c),
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| if x <= 0.0 { *g = 0.0 });
                    accumulate(*a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &s| *g *= s * (1.0 - s));
                    accumulate(*a, g);
                }
                Op::Abs(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                        *g *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(*a, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| if x < *lo || x > *hi { *g = 0.0 });
                    accumulate(*a, g);
                }
                Op::Logit(p, eps) => {
                    let mut g = g;
                    Zip::from(&mut g).and(self.value(*p)).for_each(|g, &x| {
                        if x < *eps || x > 1.0 - *eps {
                            *g = 0.0;
                        } else {
                            *g /= x * (1.0 - x);
                        }
                    });
                    accumulate(*p, g);
                }
                Op::Gather(a, rows) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.dim());
                    for (r, grow) in rows.iter().zip(g.rows()) {
                        let mut target = ga.row_mut(*r);
                        target += &grow;
                    }
                    accumulate(*a, ga);
                }
                Op::GinAggregate { h, w, eps, src, dst } => {
                    let hv = self.value(*h);
                    let wv = self.value(*w);
                    let width = hv.ncols();
                    let scale = 1.0 + self.scalar(*eps);
                    let geps = Array2::from_elem((1, 1), (&g * hv).sum());
                    let mut gh = &g * scale;
                    let mut gw = Array2::zeros(wv.dim());
                    {
                        let hs = hv.as_slice().expect("contiguous node states");
                        let gs = g.as_slice().expect("contiguous gradient");
                        let ghs = gh.as_slice_mut().expect("contiguous gradient");
                        for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                            let we = wv[[e, 0]];
                            let gd = &gs[d * width..(d + 1) * width];
                            let hsrc = &hs[s * width..(s + 1) * width];
                            gw[[e, 0]] = gd.iter().zip(hsrc).map(|(a, b)| a * b).sum();
                            let target = &mut ghs[s * width..(s + 1) * width];
                            for (t, x) in target.iter_mut().zip(gd) {
                                *t += we * x;
                            }
                        }
                    }
                    accumulate(*eps, geps);
                    accumulate(*w, gw);
                    accumulate(*h, gh);
                }
                Op::PairAverage(x, reverse) => {
                    let gx = Array2::from_shape_fn(g.dim(), |(e, j)| 0.5 * (g[[e, j]] + g[[reverse[e], j]]));
                    accumulate(*x, gx);
                }
                Op::SegmentSum(x, segment) => {
                    let gx = g.select(Axis(0), segment);
                    accumulate(*x, gx);
                }
                Op::SegmentMean(x, segment, counts) => {
                    let mut gx = g.select(Axis(0), segment);
                    for (mut row, &s) in gx.rows_mut().into_iter().zip(segment.iter()) {
                        row /= counts[s];
                    }
                    accumulate(*x, gx);
                }
                Op::CrossEntropy(logits, labels, soft) => {
                    let mut gl = soft.clone();
                    for (i, mut row) in gl.rows_mut().into_iter().enumerate() {
                        row[labels[i]] -= 1.0;
                        row *= g[[i, 0]];
                    }
                    accumulate(*logits, gl);
                }
                Op::BernoulliKl(p, r, eps) => {
                    let mut g = g;
                    Zip::from(&mut g).and(self.value(*p)).for_each(|g, &x| {
                        if x < *eps || x > 1.0 - *eps {
                            *g = 0.0;
                        } else {
                            *g *= (x / r).ln() - ((1.0 - x) / (1.0 - r)).ln();
                        }
                    });
                    accumulate(*p, g);
                }
                Op::Mean(a) => {
                    let dim = self.value(*a).dim();
                    let n = (dim.0 * dim.1).max(1) as f64;
                    accumulate(*a, Array2::from_elem(dim, g[[0, 0]] / n));
                }
            }
        }
        Gradients {
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param(p) => Some((p, i)),
                    _ => None,
                })
                .collect(),
            grads,
        }
    }
}

fn add_into(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

fn segment_sum(x: &Array2<f64>, segment: &[usize], num_segments: usize) -> Array2<f64> {
    let mut out = Array2::zeros((num_segments, x.ncols()));
    for (row, &s) in x.rows().into_iter().zip(segment) {
        let mut target = out.row_mut(s);
        target += &row;
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: Vec<(usize, usize)>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for every parameter index in `0..count`, summed over all its uses.
    /// Unused parameters get zeros of the given shapes.
    pub fn param_grads(&self, shapes: &[(usize, usize)]) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
        for &(p, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                if g.dim() == out[p].dim() {
                    out[p] += g;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Builds a scalar from parameters on a fresh tape.
    type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

    fn check(params: &[Array2<f64>], build: &Build) {
        let eval = |ps: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| t.param(i, p)).collect();
            let out = build(&mut t, &vars);
            (t, out)
        };
        let (tape, out) = eval(params);
        let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.dim()).collect();
        let grads = tape.backward(out).param_grads(&shapes);
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for idx in ndarray::indices(p.dim()) {
                let mut up = params.to_vec();
                up[pi][idx] += h;
                let mut down = params.to_vec();
                down[pi][idx] -= h;
                let (tu, ou) = eval(&up);
                let (td, od) = eval(&down);
                let fd = (tu.scalar(ou) - td.scalar(od)) / (2.0 * h);
                let an = grads[pi][idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi} at {idx:?}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn dense_ops() {
        let a = array![[0.3, -1.2, 0.5], [0.7, 0.1, -0.4]];
        let b = array![[0.2, 0.9], [-0.6, 0.4], [1.1, -0.3]];
        let bias = array![[0.05, -0.2]];
        check(&[a, b, bias], &|t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let r = t.relu(m);
            let s = t.sigmoid(m);
            let x = t.mul(r, s);
            let y = t.sub(x, m);
            let y = t.abs(y);
            let y = t.add(y, s);
            let y = t.scale(y, 1.7);
            t.mean(y)
        });
    }

    #[test]
    fn probability_ops() {
        let p = array![[0.2], [0.55], [0.9], [0.35]];
        check(&[p], &|t, v| {
            let l = t.logit(v[0], 1e-6);
            let c = t.clamp(l, -1.0, 1.0);
            let kl = t.bernoulli_kl(v[0], 0.7, 1e-6);
            let s = t.add(c, kl);
            t.mean(s)
        });
    }

    #[test]
    fn graph_ops() {
        let h = array![[0.3, -0.2], [0.8, 0.1], [-0.5, 0.6], [0.2, 0.4]];
        let w = array![[0.9], [0.4], [0.7], [0.2], [0.5], [0.6]];
        let eps = array![[0.15]];
        let src: Rc<[usize]> = vec![0, 1, 1, 2, 2, 3].into();
        let dst: Rc<[usize]> = vec![1, 0, 2, 1, 3, 2].into();
        let rev: Rc<[usize]> = vec![1, 0, 3, 2, 5, 4].into();
        let seg: Rc<[usize]> = vec![0, 0, 1, 1].into();
        let labels: Rc<[usize]> = vec![1, 0].into();
        check(&[h, w, eps], &move |t, v| {
            let wa = t.pair_average(v[1], rev.clone());
            let agg = t.gin_aggregate(v[0], wa, v[2], src.clone(), dst.clone());
            let g = t.gather(agg, src.clone());
            let gs = t.segment_sum(g, vec![0, 0, 1, 1, 2, 2].into(), 3);
            let pooled = t.segment_mean(agg, seg.clone(), 2);
            let ce = t.cross_entropy(pooled, labels.clone());
            let a = t.mean(ce);
            let b = t.mean(gs);
            t.add(a, b)
        });
    }

    #[test]
    fn reused_parameter_accumulates() {
        let x = array![[0.4, -0.3]];
        check(&[x], &|t, v| {
            let y = t.mul(v[0], v[0]);
            let z = t.add(y, v[0]);
            t.mean(z)
        });
    }

    #[test]
    fn cross_entropy_value() {
        let mut t = Tape::new();
        let l = t.constant(array![[0.0, 0.0, 0.0], [2.0, 0.0, -1.0]]);
        let ce = t.cross_entropy(l, vec![0, 0].into());
        let v = t.value(ce);
        assert!((v[[0, 0]] - 3f64.ln()).abs() < 1e-12);
        let expect = -(2f64.exp() / (2f64.exp() + 1.0 + (-1f64).exp())).ln();
        assert!((v[[1, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn scalar_kl_matches_formula() {
        let v = bernoulli_kl(0.9, 0.7, 1e-6);
        let expect = 0.9 * (0.9f64 / 0.7).ln() + 0.1 * (0.1f64 / 0.3).ln();
        assert!((v - expect).abs() < 1e-15);
    }
}
