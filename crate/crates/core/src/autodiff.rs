//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar (1×1) node walks the record in reverse and
//! accumulates exact gradients for every node that depends on a parameter.
//! Graphs are per-invocation; there is no global tape.

use std::borrow::Cow;
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Arc<Vec<T>>),
    Scale(Var, T),
    Gelu(Var),
    Exp(Var),
    Clamp(Var, T, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(Var, Arc<Vec<Vec<usize>>>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanSquare(Var),
    KlStdNormal(Var, Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded forward computation. Parameter values may be borrowed.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[(0, 0)]
    }

    /// Largest finite-or-not magnitude over every recorded value.
    pub fn max_abs_value(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|n| n.value.as_slice().iter())
            .map(|x| x.as_f64().abs())
            .fold(0.0, |a, b| if b.is_nan() || b > a { b } else { a })
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Matrix<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the 1×n `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        let ng = self.needs(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies row `i` of `a` by the constant `k[i]`.
    pub fn scale_rows(&mut self, a: Var, k: Vec<T>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(k.len(), value.rows(), "scale_rows length");
        for (i, &ki) in k.iter().enumerate() {
            for x in value.row_mut(i) {
                *x *= ki;
            }
        }
        let ng = self.needs(&[a]);
        self.push(value, Op::ScaleRows(a, Arc::new(k)), ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        let ng = self.needs(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.needs(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1×n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::of_usize(cols);
        let eps = T::of(LAYER_NORM_EPS);
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut value = normalized.clone();
        for r in 0..rows {
            for ((o, &gi), &bi) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            ng,
        )
    }

    /// Softmax of each row restricted to `allowed[row]`; every other entry
    /// of the output is exactly zero. Rows with no allowed entry are zero.
    pub fn masked_softmax(&mut self, a: Var, allowed: Arc<Vec<Vec<usize>>>) -> Var {
        let av = self.value(a);
        assert_eq!(allowed.len(), av.rows(), "mask rows");
        let mut value = Matrix::zeros(av.rows(), av.cols());
        for (r, cols) in allowed.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            let row = av.row(r);
            let max = cols.iter().map(|&c| row[c]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            let out = value.row_mut(r);
            for &c in cols {
                let e = (row[c] - max).exp();
                out[c] = e;
                total += e;
            }
            for &c in cols {
                out[c] /= total;
            }
        }
        let ng = self.needs(&[a]);
        self.push(value, Op::MaskedSoftmax(a, allowed), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let ng = self.needs(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        let ng = self.needs(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pr = self.value(p).row(r);
                value.row_mut(r)[off..off + pr.len()].copy_from_slice(pr);
                off += pr.len();
            }
        }
        let ng = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats);
        let ng = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Mean of squared entries, as a 1×1 node.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av.sum_sq() / T::of_usize(av.len().max(1));
        let ng = self.needs(&[a]);
        self.push(Matrix::filled(1, 1, v), Op::MeanSquare(a), ng)
    }

    /// `½ Σ (exp(lv) + μ² − 1 − lv)` summed over columns, averaged over rows:
    /// KL divergence of `N(μ, exp(lv))` from the standard normal.
    pub fn kl_std_normal(&mut self, mean: Var, logvar: Var) -> Var {
        let (m, lv) = (self.value(mean), self.value(logvar));
        assert_eq!(m.shape(), lv.shape(), "kl shapes");
        let half = T::of(0.5);
        let total: T = m
            .as_slice()
            .iter()
            .zip(lv.as_slice())
            .map(|(&mu, &l)| half * (l.exp() + mu * mu - T::one() - l))
            .sum();
        let v = total / T::of_usize(m.rows().max(1));
        let ng = self.needs(&[mean, logvar]);
        self.push(Matrix::filled(1, 1, v), Op::KlStdNormal(mean, logvar), ng)
    }

    /// Reverse sweep from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut acc = |v: Var, d: Matrix<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul_nt(self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, self.value(*a).matmul_tn(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul(self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, g.matmul_tn(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-T::one()));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in rg.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*row, rg);
                    acc(*a, g);
                }
                Op::ScaleRows(a, k) => {
                    let mut d = g;
                    for (i, &ki) in k.iter().enumerate() {
                        for x in d.row_mut(i) {
                            *x *= ki;
                        }
                    }
                    acc(*a, d);
                }
                Op::Scale(a, k) => acc(*a, g.scale(*k)),
                Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| gi * gelu_grad(x))),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gi, y| gi * y)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(
                        *a,
                        g.zip_map(self.value(*a), |gi, x| {
                            if x < lo || x > hi {
                                T::zero()
                            } else {
                                gi
                            }
                        }),
                    );
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).as_slice();
                    let (rows, cols) = g.shape();
                    if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                        let mut gg = Matrix::zeros(1, cols);
                        let mut gb = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[(0, c)] += g[(r, c)] * normalized[(r, c)];
                                gb[(0, c)] += g[(r, c)];
                            }
                        }
                        acc(*gamma, gg);
                        acc(*beta, gb);
                    }
                    if self.nodes[x.0].needs_grad {
                        let n = T::of_usize(cols);
                        let mut dx = Matrix::zeros(rows, cols);
                        for (r, &istd) in inv_std.iter().enumerate() {
                            let xhat = normalized.row(r);
                            let dxhat: Vec<T> =
                                g.row(r).iter().zip(gam).map(|(&a, &b)| a * b).collect();
                            let mean_d = dxhat.iter().copied().sum::<T>() / n;
                            let mean_dx = dot(&dxhat, xhat) / n;
                            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                                *o = istd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::MaskedSoftmax(a, allowed) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(g.rows(), g.cols());
                    for (r, cols) in allowed.iter().enumerate() {
                        let s: T = cols.iter().map(|&c| y[(r, c)] * g[(r, c)]).sum();
                        for &c in cols {
                            d[(r, c)] = y[(r, c)] * (g[(r, c)] - s);
                        }
                    }
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.nodes[p.0].needs_grad {
                            acc(p, g.slice_cols(off, off + w));
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        if self.nodes[p.0].needs_grad {
                            acc(p, g.slice_rows(off, off + h));
                        }
                        off += h;
                    }
                }
                Op::MeanSquare(a) => {
                    let av = self.value(*a);
                    let k = g[(0, 0)] * T::of(2.0) / T::of_usize(av.len().max(1));
                    acc(*a, av.scale(k));
                }
                Op::KlStdNormal(mean, logvar) => {
                    let rows = T::of_usize(self.value(*mean).rows().max(1));
                    let k = g[(0, 0)] / rows;
                    let half = T::of(0.5);
                    acc(*mean, self.value(*mean).scale(k));
                    acc(
                        *logvar,
                        self.value(*logvar).map(|l| k * half * (l.exp() - T::one())),
                    );
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of d loss / d param for a closure building
    /// the loss from one parameter matrix.
    fn check_grad(param: &Matrix<f64>, build: &dyn for<'g> Fn(&mut Graph<'g, f64>, Var) -> Var) {
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(param);
        let loss = build(&mut g, p);
        let grads = g.backward(loss);
        let analytic = grads
            .get(p)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(param.rows(), param.cols()));
        let h = 1e-5;
        for i in 0..param.len() {
            let mut plus = param.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = param.clone();
            minus.as_mut_slice()[i] -= h;
            let eval = |m: &Matrix<f64>| {
                let mut g: Graph<f64> = Graph::new();
                let p = g.param(m);
                let l = build(&mut g, p);
                g.scalar(l)
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.as_slice()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0),
                "entry {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn half_squared_norm_of_linear_map() {
        // loss = ½‖W x‖², dloss/dW = (W x) xᵀ; with row vectors: x·W.
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]);
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]);
        let mut g: Graph<f64> = Graph::new();
        let wv = g.param(&w);
        let xv = g.constant(x.clone());
        let y = g.matmul(xv, wv);
        let ms = g.mean_square(y);
        let loss = g.scale(ms, 0.5 * 2.0); // mean over 2 entries -> sum / 2
        let grads = g.backward(loss);
        let y_val = x.matmul(&w);
        let want = x.matmul_tn(&y_val);
        let got = grads.get(wv).unwrap();
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_matrix(&mut rng, 3, 4);
        let other = rand_matrix(&mut rng, 3, 4);
        check_grad(&p, &|g, p| {
            let o = g.constant(other.clone());
            let a = g.mul(p, o);
            let b = g.gelu(a);
            let c = g.exp(p);
            let d = g.sub(b, c);
            let e = g.clamp(d, -0.8, 5.0);
            let f = g.scale(e, 1.7);
            g.mean_square(f)
        });
    }

    #[test]
    fn matmul_and_broadcast_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_matrix(&mut rng, 4, 3);
        let x = rand_matrix(&mut rng, 5, 4);
        let bias = rand_matrix(&mut rng, 1, 3);
        check_grad(&p, &|g, p| {
            let xv = g.constant(x.clone());
            let y = g.matmul(xv, p);
            let bv = g.constant(bias.clone());
            let y = g.add_row(y, bv);
            let z = g.matmul_nt(y, y);
            let z = g.scale_rows(z, vec![1.0, -2.0, 0.5, 3.0, 1.0]);
            g.mean_square(z)
        });
        // gradient w.r.t. the broadcast row itself
        check_grad(&bias, &|g, b| {
            let xv = g.constant(x.clone());
            let pv = g.constant(p.clone());
            let y = g.matmul(xv, pv);
            let y = g.add_row(y, b);
            g.mean_square(y)
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 3, 5);
        let gamma = rand_matrix(&mut rng, 1, 5);
        let beta = rand_matrix(&mut rng, 1, 5);
        let target = rand_matrix(&mut rng, 3, 5);
        let build = |xm: Matrix<f64>, gm: Matrix<f64>, bm: Matrix<f64>, which: usize| {
            let target = target.clone();
            move |g: &mut Graph<'_, f64>, p: Var| -> Var {
                let xv = if which == 0 {
                    p
                } else {
                    g.constant(xm.clone())
                };
                let gv = if which == 1 {
                    p
                } else {
                    g.constant(gm.clone())
                };
                let bv = if which == 2 {
                    p
                } else {
                    g.constant(bm.clone())
                };
                let y = g.layer_norm(xv, gv, bv);
                let t = g.constant(target.clone());
                let d = g.sub(y, t);
                g.mean_square(d)
            }
        };
        check_grad(&x, &build(x.clone(), gamma.clone(), beta.clone(), 0));
        check_grad(&gamma, &build(x.clone(), gamma.clone(), beta.clone(), 1));
        check_grad(&beta, &build(x.clone(), gamma.clone(), beta.clone(), 2));
    }

    #[test]
    fn masked_softmax_and_slicing_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_matrix(&mut rng, 3, 4);
        let w = rand_matrix(&mut rng, 4, 4);
        let allowed = Arc::new(vec![vec![0, 2], vec![1, 2, 3], vec![3]]);
        check_grad(&p, &|g, p| {
            let s = g.masked_softmax(p, allowed.clone());
            let wv = g.constant(w.clone());
            let y = g.matmul(s, wv);
            let a = g.slice_cols(y, 1, 3);
            let b = g.slice_rows(y, 0, 2);
            let b2 = g.slice_cols(b, 0, 2);
            let top = g.slice_rows(a, 0, 2);
            let c = g.concat_cols(&[top, b2]);
            let d = g.concat_rows(&[c, c]);
            g.mean_square(d)
        });
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_block_exactly() {
        let m = Matrix::from_rows(&[vec![1.0, 50.0, -3.0], vec![0.2, 0.1, 1e3]]);
        let allowed = Arc::new(vec![vec![0, 2], vec![0, 1, 2]]);
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant(m);
        let s = g.masked_softmax(v, allowed);
        let out = g.value(s);
        assert_eq!(out[(0, 1)], 0.0);
        for r in 0..2 {
            assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = rand_matrix(&mut rng, 2, 3);
        let lv = rand_matrix(&mut rng, 2, 3);
        let lv2 = lv.clone();
        check_grad(&mu, &move |g, p| {
            let l = g.constant(lv2.clone());
            g.kl_std_normal(p, l)
        });
        let mu2 = mu.clone();
        check_grad(&lv, &move |g, p| {
            let m = g.constant(mu2.clone());
            g.kl_std_normal(m, p)
        });
        // KL of the standard normal itself is zero.
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(Matrix::zeros(2, 3));
        let z2 = g.constant(Matrix::zeros(2, 3));
        let k = g.kl_std_normal(z, z2);
        assert_eq!(g.scalar(k), 0.0);
    }

    #[test]
    fn detached_paths_get_no_gradient() {
        let w = Matrix::from_rows(&[vec![2.0]]);
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(&w);
        let d = g.detach(p);
        let y = g.mul(d, d);
        let loss = g.mean_square(y);
        let grads = g.backward(loss);
        assert!(grads.get(p).is_none());
    }
}
