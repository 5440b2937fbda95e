//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] is a per-example computation tape: ops evaluate eagerly and
//! record enough to play the chain rule backwards. Leaves created through
//! [`Graph::param`] are bound to named [`ParamStore`] entries and surface in
//! the [`GradientMap`] returned by [`Graph::backward`].
//!
//! Reductions along tensor axes (softmax denominators, transposed-matmul sums)
//! run through [`canonical_sum`], so spatially permuted inputs produce
//! bit-identical permuted outputs.

use rand::Rng;

use super::store::{GradientMap, ParamStore};
use super::sum::canonical_sum;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

enum Op<T: Real> {
    Leaf {
        name: Option<String>,
    },
    /// y = xW + b with x `[n,k]` (or `[k]`), W `[k,m]`, b `[m]`.
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    /// out[c,d] = sum_l a[l,c] * b[l,d]
    MatmulTn {
        a: usize,
        b: usize,
    },
    Activation {
        x: usize,
        kind: Activation,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    L2Normalize {
        x: usize,
        axis: usize,
        eps: f64,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Select rows of a `[v,d]` table; duplicates allowed.
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    /// Tile a `[k]` vector into `[n,k]`.
    RepeatRows {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    /// -mean(logp[ids]); duplicate ids up-weight their class.
    NllMean {
        logp: usize,
        ids: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Walk the slices of `shape` that run along `axis`: yields `(base, stride)`
/// per slice; the slice elements are `base + k*stride` for `k < shape[axis]`.
fn axis_slices(shape: &[usize], axis: usize) -> (usize, usize, Vec<(usize, usize)>) {
    let extent = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let inner = stride;
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            out.push((o * extent * stride + i, stride));
        }
    }
    (extent, stride, out)
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_cache: std::collections::HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: std::collections::HashMap::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input leaf (no gradient tracked).
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            false,
            Op::Leaf { name: None },
        )
    }

    /// Leaf bound to a named store parameter. Repeat calls with the same name
    /// return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, store: &ParamStore<T>) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            true,
            Op::Leaf {
                name: Some(name.to_string()),
            },
        );
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, k) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "linear input rank {} > 2",
                    xs.len()
                )))
            }
        };
        if ws.len() != 2 || ws[0] != k || bs.len() != 1 || bs[0] != ws[1] {
            return Err(Error::InvalidShape(format!(
                "linear shapes do not conform: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let m = ws[1];
        let out_shape = if xs.len() == 1 { vec![m] } else { vec![n, m] };
        let mut out = vec![T::zero(); n * m];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..n {
                out[i * m..(i + 1) * m].copy_from_slice(bv);
                for p in 0..k {
                    let xi = xv[i * k + p];
                    let wrow = &wv[p * m..(p + 1) * m];
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] = orow[j] + xi * wrow[j];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            out_shape,
            out,
            needs,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    /// `a` is `[l,c]`, `b` is `[l,d]`; returns `[c,d]` with order-canonical
    /// sums over `l` (bitwise invariant under location permutation).
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::InvalidShape(format!(
                "matmul_tn shapes do not conform: {sa:?} vs {sb:?}"
            )));
        }
        let (l, c, d) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); c * d];
        let mut terms = Vec::with_capacity(l);
        for ci in 0..c {
            for di in 0..d {
                terms.clear();
                for li in 0..l {
                    terms.push(
                        self.nodes[a.0].value[li * c + ci] * self.nodes[b.0].value[li * d + di],
                    );
                }
                out[ci * d + di] = canonical_sum(&mut terms);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![c, d], out, needs, Op::MatmulTn { a: a.0, b: b.0 }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| match kind {
                Activation::Tanh => v.tanh(),
                Activation::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
                Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, value, needs, Op::Activation { x: x.0, kind })
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        let rank = self.nodes[v.0].shape.len();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let value = softmax_slices(&self.nodes[x.0].value, &shape, axis, false);
        let needs = self.needs(x);
        Ok(self.push(shape, value, needs, Op::Softmax { x: x.0, axis }))
    }

    /// Stable log-softmax along `axis` (log-sum-exp on shifted logits).
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let value = softmax_slices(&self.nodes[x.0].value, &shape, axis, true);
        let needs = self.needs(x);
        Ok(self.push(shape, value, needs, Op::LogSoftmax { x: x.0, axis }))
    }

    /// Divide each slice along `axis` by max(its l2 norm, eps).
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(
                "l2_normalize requires eps > 0".into(),
            ));
        }
        self.check_axis(x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let value = l2_normalize_slices(&self.nodes[x.0].value, &shape, axis, eps);
        let needs = self.needs(x);
        Ok(self.push(shape, value, needs, Op::L2Normalize { x: x.0, axis, eps }))
    }

    /// Inverted dropout: in training each element is kept with probability
    /// 1-rate and scaled by 1/(1-rate); otherwise this is the identity (the
    /// input var itself, bitwise).
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0,1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mut rng = crate::rng::seeded_rng(seed);
        let mask: Vec<T> = (0..self.nodes[x.0].value.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let value: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, value, needs, Op::Dropout { x: x.0, mask }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of empty list".into()));
        }
        self.check_axis(xs[0], axis)?;
        let first = self.nodes[xs[0].0].shape.clone();
        let mut total = 0usize;
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::InvalidShape(format!(
                    "concat shapes differ off-axis: {first:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = vec![T::zero(); shape.iter().product()];
        let mut offset = 0usize;
        for &v in xs {
            let ext = self.nodes[v.0].shape[axis];
            let src = &self.nodes[v.0].value;
            for o in 0..outer {
                let dst_base = o * total * inner + offset * inner;
                let src_base = o * ext * inner;
                value[dst_base..dst_base + ext * inner]
                    .copy_from_slice(&src[src_base..src_base + ext * inner]);
            }
            offset += ext;
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            shape,
            value,
            needs,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// Contiguous window `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        if start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidShape(format!(
                "narrow window {start}..{} exceeds extent {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut value = vec![T::zero(); outer * len * inner];
        let src = &self.nodes[x.0].value;
        for o in 0..outer {
            let src_base = o * ext * inner + start * inner;
            let dst_base = o * len * inner;
            value[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            out_shape,
            value,
            needs,
            Op::Narrow {
                x: x.0,
                axis,
                start,
                len,
            },
        ))
    }

    /// Rows of a `[v,d]` table selected by id; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(Error::InvalidShape(format!(
                "gather_rows table rank {} != 2",
                ts.len()
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "row id {bad} out of bounds for table with {v} rows"
            )));
        }
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&self.nodes[table.0].value[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            needs,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Tile a `[k]` vector into `[n,k]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "repeat_rows input rank {} != 1",
                s.len()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("repeat_rows needs n > 0".into()));
        }
        let k = s[0];
        let mut value = Vec::with_capacity(n * k);
        for _ in 0..n {
            value.extend_from_slice(&self.nodes[x.0].value);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, k], value, needs, Op::RepeatRows { x: x.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, true)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, false)
    }

    fn zip_op(&mut self, a: Var, b: Var, is_add: bool) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::InvalidShape(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| if is_add { x + y } else { x * y })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        let op = if is_add {
            Op::Add { a: a.0, b: b.0 }
        } else {
            Op::Mul { a: a.0, b: b.0 }
        };
        Ok(self.push(shape, value, needs, op))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, value, needs, Op::Scale { x: x.0, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].value {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(vec![1], vec![acc], needs, Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].value {
            acc = acc + v;
        }
        let value = vec![acc / T::from_f64(n as f64)];
        let needs = self.needs(x);
        self.push(vec![1], value, needs, Op::Mean { x: x.0 })
    }

    /// Averaged negative log-likelihood: -mean over `ids` of `logp[id]`.
    pub fn nll_mean(&mut self, logp: Var, ids: &[usize]) -> Result<Var> {
        let s = self.nodes[logp.0].shape.clone();
        if s.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "nll_mean expects a vector, got {s:?}"
            )));
        }
        if ids.is_empty() {
            return Err(Error::EmptyAnswers);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidArgument(format!(
                "answer id {bad} out of bounds for {} classes",
                s[0]
            )));
        }
        let mut acc = T::zero();
        for &i in ids {
            acc = acc + self.nodes[logp.0].value[i];
        }
        let value = vec![-(acc / T::from_f64(ids.len() as f64))];
        let needs = self.needs(logp);
        Ok(self.push(
            vec![1],
            value,
            needs,
            Op::NllMean {
                logp: logp.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::InvalidShape(format!(
                "reshape to {shape:?} changes numel {} -> {numel}",
                self.nodes[x.0].value.len()
            )));
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, value, needs, Op::Reshape { x: x.0 }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-sweep the tape from a scalar loss; returns gradients for every
    /// named parameter the loss actually reaches.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<GradientMap<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().expect("grad present");
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut map = GradientMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = grads[idx].take() {
                    let expected = store.get(name).ok_or_else(|| {
                        Error::InvalidArgument(format!("graph leaf {name:?} not in store"))
                    })?;
                    if expected.shape() != node.shape.as_slice() {
                        return Err(Error::InvalidShape(format!(
                            "leaf {name:?} shape {:?} does not match store {:?}",
                            node.shape,
                            expected.shape()
                        )));
                    }
                    map.insert(name.clone(), Tensor::from_vec(node.shape.clone(), g)?);
                }
            }
        }
        Ok(map)
    }

    fn add_grad(&self, grads: &mut [Option<Vec<T>>], target: usize, contribution: &[T]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![T::zero(); contribution.len()]);
        for (a, &b) in slot.iter_mut().zip(contribution) {
            *a = *a + b;
        }
    }

    fn accumulate_parents(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[*x].shape;
                let (n, k) = if xs.len() == 1 {
                    (1, xs[0])
                } else {
                    (xs[0], xs[1])
                };
                let m = self.nodes[*w].shape[1];
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![T::zero(); n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..m {
                                acc = acc + g[i * m + j] * wv[p * m + j];
                            }
                            dx[i * k + p] = acc;
                        }
                    }
                    self.add_grad(grads, *x, &dx);
                }
                if self.nodes[*w].needs_grad {
                    let mut dw = vec![T::zero(); k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let xi = xv[i * k + p];
                            let grow = &g[i * m..(i + 1) * m];
                            let wrow = &mut dw[p * m..(p + 1) * m];
                            for j in 0..m {
                                wrow[j] = wrow[j] + xi * grow[j];
                            }
                        }
                    }
                    self.add_grad(grads, *w, &dw);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![T::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] = db[j] + g[i * m + j];
                        }
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::MatmulTn { a, b } => {
                let l = self.nodes[*a].shape[0];
                let c = self.nodes[*a].shape[1];
                let d = self.nodes[*b].shape[1];
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.nodes[*a].needs_grad {
                    let mut da = vec![T::zero(); l * c];
                    for li in 0..l {
                        for ci in 0..c {
                            let mut acc = T::zero();
                            for di in 0..d {
                                acc = acc + g[ci * d + di] * bv[li * d + di];
                            }
                            da[li * c + ci] = acc;
                        }
                    }
                    self.add_grad(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![T::zero(); l * d];
                    for li in 0..l {
                        for di in 0..d {
                            let mut acc = T::zero();
                            for ci in 0..c {
                                acc = acc + av[li * c + ci] * g[ci * d + di];
                            }
                            db[li * d + di] = acc;
                        }
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Activation { x, kind } => {
                let y = &node.value;
                let xv = &self.nodes[*x].value;
                let dx: Vec<T> = match kind {
                    Activation::Tanh => y
                        .iter()
                        .zip(g)
                        .map(|(&yi, &gi)| gi * (T::one() - yi * yi))
                        .collect(),
                    Activation::Relu => xv
                        .iter()
                        .zip(g)
                        .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => y
                        .iter()
                        .zip(g)
                        .map(|(&yi, &gi)| gi * yi * (T::one() - yi))
                        .collect(),
                };
                self.add_grad(grads, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (extent, stride, slices) = axis_slices(&node.shape, *axis);
                let mut dx = vec![T::zero(); y.len()];
                let mut terms = Vec::with_capacity(extent);
                for &(base, _) in &slices {
                    terms.clear();
                    for kk in 0..extent {
                        let i = base + kk * stride;
                        terms.push(g[i] * y[i]);
                    }
                    let dot = canonical_sum(&mut terms);
                    for kk in 0..extent {
                        let i = base + kk * stride;
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (extent, stride, slices) = axis_slices(&node.shape, *axis);
                let mut dx = vec![T::zero(); y.len()];
                let mut terms = Vec::with_capacity(extent);
                for &(base, _) in &slices {
                    terms.clear();
                    for kk in 0..extent {
                        terms.push(g[base + kk * stride]);
                    }
                    let gsum = canonical_sum(&mut terms);
                    for kk in 0..extent {
                        let i = base + kk * stride;
                        dx[i] = g[i] - y[i].exp() * gsum;
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::L2Normalize { x, axis, eps } => {
                let y = &node.value;
                let xv = &self.nodes[*x].value;
                let (extent, stride, slices) = axis_slices(&node.shape, *axis);
                let mut dx = vec![T::zero(); y.len()];
                let eps_t = T::from_f64(*eps);
                for &(base, _) in &slices {
                    let mut sq = T::zero();
                    for kk in 0..extent {
                        let v = xv[base + kk * stride];
                        sq = sq + v * v;
                    }
                    let norm = sq.sqrt();
                    if norm > eps_t {
                        let mut dot = T::zero();
                        for kk in 0..extent {
                            let i = base + kk * stride;
                            dot = dot + g[i] * y[i];
                        }
                        for kk in 0..extent {
                            let i = base + kk * stride;
                            dx[i] = (g[i] - y[i] * dot) / norm;
                        }
                    } else {
                        for kk in 0..extent {
                            let i = base + kk * stride;
                            dx[i] = g[i] / eps_t;
                        }
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<T> = g.iter().zip(mask).map(|(&gi, &mi)| gi * mi).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Concat { xs, axis } => {
                let total = node.shape[*axis];
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let mut offset = 0usize;
                for &xi in xs {
                    let ext = self.nodes[xi].shape[*axis];
                    if self.nodes[xi].needs_grad {
                        let mut dx = vec![T::zero(); outer * ext * inner];
                        for o in 0..outer {
                            let src_base = o * total * inner + offset * inner;
                            let dst_base = o * ext * inner;
                            dx[dst_base..dst_base + ext * inner]
                                .copy_from_slice(&g[src_base..src_base + ext * inner]);
                        }
                        self.add_grad(grads, xi, &dx);
                    }
                    offset += ext;
                }
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                let xs = &self.nodes[*x].shape;
                let ext = xs[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for o in 0..outer {
                    let dst_base = o * ext * inner + start * inner;
                    let src_base = o * len * inner;
                    dx[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[*table].shape[1];
                let mut dt = vec![T::zero(); self.nodes[*table].value.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[row * d + j];
                    }
                }
                self.add_grad(grads, *table, &dt);
            }
            Op::RepeatRows { x } => {
                let k = self.nodes[*x].shape[0];
                let n = node.shape[0];
                let mut dx = vec![T::zero(); k];
                for i in 0..n {
                    for j in 0..k {
                        dx[j] = dx[j] + g[i * k + j];
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[*b].value)
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    self.add_grad(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[*a].value)
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<T> = g.iter().map(|&gi| gi * *c).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.nodes[*x].value.len()];
                self.add_grad(grads, *x, &dx);
            }
            Op::Mean { x } => {
                let n = self.nodes[*x].value.len();
                let dx = vec![g[0] / T::from_f64(n as f64); n];
                self.add_grad(grads, *x, &dx);
            }
            Op::NllMean { logp, ids } => {
                let mut dx = vec![T::zero(); self.nodes[*logp].value.len()];
                let scale = g[0] / T::from_f64(ids.len() as f64);
                for &i in ids {
                    dx[i] = dx[i] - scale;
                }
                self.add_grad(grads, *logp, &dx);
            }
            Op::Reshape { x } => {
                self.add_grad(grads, *x, g);
            }
        }
    }
}

/// Shared softmax kernel: max-subtraction, canonical-order denominator.
fn softmax_slices<T: Real>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (extent, stride, slices) = axis_slices(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut terms = Vec::with_capacity(extent);
    for &(base, _) in &slices {
        let mut mx = x[base];
        for kk in 1..extent {
            let v = x[base + kk * stride];
            if v > mx {
                mx = v;
            }
        }
        terms.clear();
        for kk in 0..extent {
            terms.push((x[base + kk * stride] - mx).exp());
        }
        let denom = canonical_sum(&mut terms);
        if log {
            let ld = denom.ln();
            for kk in 0..extent {
                out[base + kk * stride] = x[base + kk * stride] - mx - ld;
            }
        } else {
            for kk in 0..extent {
                out[base + kk * stride] = (x[base + kk * stride] - mx).exp() / denom;
            }
        }
    }
    out
}

/// Standalone l2 normalization used by both the graph op and feature ingest.
pub fn l2_normalize_slices<T: Real>(x: &[T], shape: &[usize], axis: usize, eps: f64) -> Vec<T> {
    let (extent, stride, slices) = axis_slices(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let eps_t = T::from_f64(eps);
    for &(base, _) in &slices {
        let mut sq = T::zero();
        for kk in 0..extent {
            let v = x[base + kk * stride];
            sq = sq + v * v;
        }
        let denom = sq.sqrt().max(eps_t);
        for kk in 0..extent {
            let i = base + kk * stride;
            out[i] = x[i] / denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn store_with(name: &str, shape: &[usize], data: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, t(shape, data)).unwrap();
        s
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = g.input(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let b = g.input(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn linear_hand_arithmetic() {
        // [1,2] * [[1,3],[2,4]] + [10,20] = [1*1+2*2+10, 1*3+2*4+20] = [15, 31]
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 2.0]));
        let w = g.input(&t(&[2, 2], &[1.0, 3.0, 2.0, 4.0]));
        let b = g.input(&t(&[2], &[10.0, 20.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[2]);
        assert_eq!(g.value(y), &[15.0, 31.0]);
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[3], &[1.0, 2.0, 3.0]));
        let w = g.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(&t(&[2], &[0.0, 0.0]));
        assert!(matches!(g.linear(x, w, b), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn softmax_known_values() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&t(&[2], &[0.0, 0.0]));
        let sa = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(sa), &[0.5, 0.5]);

        let b = g.input(&t(&[2], &[0.0, 3.0f64.ln()]));
        let sb = g.softmax(b, 0).unwrap();
        assert!((g.value(sb)[0] - 0.25).abs() < 1e-12);
        assert!((g.value(sb)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[2], &[1000.0, 1000.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
        assert!(g.value(s).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[4], &[0.3, -1.2, 2.5, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        let ls = g.log_softmax(x, 0).unwrap();
        for (a, b) in g.value(s).iter().zip(g.value(ls)) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x, 0, 1e-12).unwrap();
        assert_eq!(g.value(y), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_zero_vector_stays_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.l2_normalize(x, 0, 1e-12).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_per_row_axis1() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[2, 2], &[3.0, 4.0, 0.0, 2.0]));
        let y = g.l2_normalize(x, 1, 1e-12).unwrap();
        assert_eq!(g.value(y), &[0.6, 0.8, 0.0, 1.0]);
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity_vars() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.5, false, 7).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, true, 7).unwrap(), x);
    }

    #[test]
    fn dropout_training_masks_and_rescales() {
        let mut g: Graph<f64> = Graph::new();
        let n = 10_000;
        let x = g.input(&t(&[n], &vec![1.0; n]));
        let y = g.dropout(x, 0.5, true, 42).unwrap();
        let vals = g.value(y);
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64;
        assert!((kept / n as f64 - 0.5).abs() < 0.03);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(&[1], &[1.0]));
        assert!(g.dropout(x, 1.0, true, 0).is_err());
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(&t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 5]);
        assert_eq!(
            g.value(cat),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        let back = g.narrow(cat, 1, 2, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn matmul_tn_hand_check() {
        // a = [[1,2],[3,4]] (l=2,c=2), b = [[5],[6]] (l=2,d=1)
        // out[c,0] = sum_l a[l,c]*b[l,0] -> [1*5+3*6, 2*5+4*6] = [23, 34]
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(&t(&[2, 1], &[5.0, 6.0]));
        let y = g.matmul_tn(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1]);
        assert_eq!(g.value(y), &[23.0, 34.0]);
    }

    #[test]
    fn gather_rows_duplicates_and_bounds() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.input(&t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let rows = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        assert!(g.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn nll_mean_hand_check() {
        let mut g: Graph<f64> = Graph::new();
        let logp = g.input(&t(&[3], &[-1.0, -2.0, -3.0]));
        let loss = g.nll_mean(logp, &[0, 2, 2]).unwrap();
        // -( -1 + -3 + -3 ) / 3 = 7/3
        assert!((g.scalar_value(loss) - 7.0 / 3.0).abs() < 1e-12);
        assert!(matches!(g.nll_mean(logp, &[]), Err(Error::EmptyAnswers)));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let store = store_with("w", &[2, 2], &[1.0, -2.0, 3.0, 0.5]);
        let mut g = Graph::new();
        let w = g.param("w", &store).unwrap();
        let s = g.sum(w);
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_norm_is_the_tensor() {
        let store = store_with("w", &[3], &[1.5, -2.0, 0.25]);
        let mut g = Graph::new();
        let w = g.param("w", &store).unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn backward_scatter_adds_gathered_rows() {
        let store = store_with("table", &[3, 2], &[0.0; 6]);
        let mut g = Graph::new();
        let table = g.param("table", &store).unwrap();
        let rows = g.gather_rows(table, &[1, 1, 0]).unwrap();
        let s = g.sum(rows);
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(
            grads.get("table").unwrap().data(),
            &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let store = store_with("w", &[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param("w", &store).unwrap();
        let y = g.scale(w, 2.0);
        assert!(matches!(
            g.backward(y, &store),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unreachable_params_are_absent_from_gradients() {
        let mut store = store_with("used", &[2], &[1.0, 2.0]);
        store.insert("unused", t(&[2], &[3.0, 4.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param("used", &store).unwrap();
        let s = g.sum(w);
        let grads = g.backward(s, &store).unwrap();
        assert!(grads.get("used").is_some());
        assert!(grads.get("unused").is_none());
    }

    #[test]
    fn param_is_cached_so_gradients_accumulate_once() {
        let store = store_with("w", &[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let w1 = g.param("w", &store).unwrap();
        let w2 = g.param("w", &store).unwrap();
        assert_eq!(w1, w2);
        let y = g.add(w1, w2).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeat_rows_tiles_and_sums_gradient() {
        let store = store_with("v", &[3], &[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let v = g.param("v", &store).unwrap();
        let tiled = g.repeat_rows(v, 4).unwrap();
        assert_eq!(g.shape(tiled), &[4, 3]);
        assert_eq!(&g.value(tiled)[..3], &[1.0, 2.0, 3.0]);
        let s = g.sum(tiled);
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(grads.get("v").unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn constant_only_graph_yields_empty_gradients() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(grads.len(), 0);
    }
}
