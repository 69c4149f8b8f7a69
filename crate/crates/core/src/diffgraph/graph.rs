use std::collections::HashMap;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{cosine_parts, sigmoid, CosineParts, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);


enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, F),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Gather { table: Var, rows: Vec<usize> },
    SegmentMean { x: Var, offsets: Vec<usize> },
    MeanAxis { x: Var, outer: usize, n: usize, inner: usize },
    Concat { inputs: Vec<Var>, outer: usize, inner: usize },
    Reshape(Var),
    Broadcast(Var),
    CosineRows { a: Var, b: Var, saved: Vec<CosineParts<F>> },
    Bce { p: Var, labels: Vec<F> },
    Sum(Var),
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Param(_) => vec![],
            MatMul(a, b) | Bmm { a, b, .. } | AddBias(a, b) | Add(a, b) | MulScalar(a, b) => vec![*a, *b],
            CosineRows { a, b, .. } => vec![*a, *b],
            Transpose(x) | Scale(x, _) | Tanh(x) | Relu(x) | Sigmoid(x) | Softmax(x) | Reshape(x)
            | Broadcast(x) | Sum(x) => vec![*x],
            Gather { table, .. } => vec![*table],
            SegmentMean { x, .. } | MeanAxis { x, .. } => vec![*x],
            Bce { p, .. } => vec![*p],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape recording one forward pass over a borrowed parameter store.
pub struct Graph<'p, F> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    degenerate_cosines: usize,
}

// out[n×q] += a[n×p] · b[p×q]
fn mm_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (kk, &x) in arow.iter().enumerate() {
            let brow = &b[kk * q..(kk + 1) * q];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

// out[n×q] += a[n×p] · b[q×p]ᵀ
fn mm_bt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b[j * p..(j + 1) * p];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * q + j] += s;
        }
    }
}

// out[n×q] += a[p×n]ᵀ · b[p×q]
fn mm_at_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], p: usize, n: usize, q: usize) {
    for r in 0..p {
        let arow = &a[r * n..(r + 1) * n];
        let brow = &b[r * q..(r + 1) * q];
        for (i, &x) in arow.iter().enumerate() {
            let orow = &mut out[i * q..(i + 1) * q];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

fn check_finite<F: Scalar>(op: &str, v: &[F]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: HashMap::new(), degenerate_cosines: 0 }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    /// Number of cosine rows whose norm had to be clamped.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).tensor.data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Result<Var> {
        check_finite(name, &value)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input that receives no gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        let shape = t.shape().to_vec();
        let value = t.data().to_vec();
        self.push("input", shape, value, Op::Input)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        self.input(Tensor::new(shape, data)?)
    }

    pub fn param_id(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let shape = self.params.get(id).tensor.shape().to_vec();
        self.nodes.push(Node { shape, value: Vec::new(), op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param_id(id))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [b, r, c] => Ok((b, r, c)),
            ref s => Err(Error::shape(op, format!("expected rank 3, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.dims2("matmul", a)?;
        let (p2, q) = self.dims2("matmul", b)?;
        if p != p2 {
            return Err(Error::shape("matmul", format!("[{n}x{p}] · [{p2}x{q}]")));
        }
        let mut out = vec![F::zero(); n * q];
        mm_acc(self.value(a), self.value(b), &mut out, n, p, q);
        self.push("matmul", vec![n, q], out, Op::MatMul(a, b))
    }

    /// Batched product of `[B×p×q]` and `[B×q×r]`, or `[B×r×q]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, p, q) = self.dims3("bmm", a)?;
        let (bb, x, y) = self.dims3("bmm", b)?;
        let (q2, r) = if trans_b { (y, x) } else { (x, y) };
        if ba != bb || q != q2 {
            return Err(Error::shape(
                "bmm",
                format!("{:?} · {:?} (trans_b={trans_b})", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![F::zero(); ba * p * r];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..ba {
                let ai = &av[i * p * q..(i + 1) * p * q];
                let bi = &bv[i * q * r..(i + 1) * q * r];
                let oi = &mut out[i * p * r..(i + 1) * p * r];
                if trans_b {
                    mm_bt_acc(ai, bi, oi, p, q, r);
                } else {
                    mm_acc(ai, bi, oi, p, q, r);
                }
            }
        }
        self.push("bmm", vec![ba, p, r], out, Op::Bmm { a, b, trans_b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let v = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x))
    }

    /// Adds a `[q]` bias to every length-`q` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let q = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [q] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bv = self.value(b);
        let out: Vec<F> =
            self.value(x).chunks(q.max(1)).flat_map(|row| row.iter().zip(bv).map(|(&a, &c)| a + c)).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, Op::AddBias(x, b))
    }

    /// `x·W + b` over rows of a rank-2 input.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b))
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::shape("mul_scalar", format!("scale has shape {:?}", self.shape(s))));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", shape, out, Op::MulScalar(x, s))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c))
    }

    fn unary(&mut self, name: &str, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let w = *self.shape(x).last().unwrap_or(&0);
        let v = self.value(x);
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax input contains NaN".into()));
        }
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(w.max(1)) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let start = out.len();
            let mut z = F::zero();
            for &r in row {
                let e = (r - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    /// Row lookup into a `[V×d]` table. The backward pass scatter-adds into
    /// the looked-up rows only.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("gather", table)?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= vocab {
                return Err(Error::Data(format!("row {r} out of range for table of {vocab} rows")));
            }
            out.extend_from_slice(&tv[r * d..(r + 1) * d]);
        }
        self.push("gather", vec![rows.len(), d], out, Op::Gather { table, rows: rows.to_vec() })
    }

    /// Mean of consecutive row groups: segment `s` covers rows
    /// `offsets[s]..offsets[s+1]`. Every segment must be nonempty.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2("segment_mean", x)?;
        if offsets.first() != Some(&0) || offsets.last() != Some(&n) || offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::shape("segment_mean", format!("bad offsets for {n} rows")));
        }
        let xv = self.value(x);
        let nseg = offsets.len() - 1;
        let mut out = vec![F::zero(); nseg * d];
        for s in 0..nseg {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let inv = F::one() / F::lit((hi - lo) as f64);
            let o = &mut out[s * d..(s + 1) * d];
            for r in lo..hi {
                o.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        self.push("segment_mean", vec![nseg, d], out, Op::SegmentMean { x, offsets: offsets.to_vec() })
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let inv = F::one() / F::lit(n as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
            dst.iter_mut().for_each(|a| *a *= inv);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        self.push("mean_axis", oshape, out, Op::MeanAxis { x, outer, n, inner })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), outer, inner })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * n);
        for _ in 0..n {
            out.extend_from_slice(xv);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        self.push("broadcast", shape, out, Op::Broadcast(x))
    }

    /// Row-wise cosine similarity of two `[B×d]` (or `[d]`) tensors, giving `[B]`.
    /// Norms below [`super::COSINE_EPS`] are clamped and counted.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).is_empty() || self.shape(a).len() > 2 {
            return Err(Error::shape("cosine", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let d = *self.shape(a).last().unwrap();
        let rows = self.numel(a) / d.max(1);
        let mut out = Vec::with_capacity(rows);
        let mut saved = Vec::with_capacity(rows);
        {
            let (av, bv) = (self.value(a), self.value(b));
            for r in 0..rows {
                let parts = cosine_parts(&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                out.push(parts.cos);
                saved.push(parts);
            }
        }
        let clamped = saved.iter().filter(|p| p.clamped()).count();
        self.degenerate_cosines += clamped;
        self.push("cosine", vec![rows], out, Op::CosineRows { a, b, saved })
    }

    /// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, p: Var, labels: &[F]) -> Result<Var> {
        if labels.len() != self.numel(p) || labels.is_empty() {
            return Err(Error::shape("bce", format!("{} labels for {:?}", labels.len(), self.shape(p))));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != F::zero() && y != F::one()) {
            return Err(Error::Data(format!("label {bad} is not 0 or 1")));
        }
        let eps = F::lit(BCE_EPS);
        let mut total = F::zero();
        for (&pi, &y) in self.value(p).iter().zip(labels) {
            let pc = pi.max(eps).min(F::one() - eps);
            total += -(y * pc.ln() + (F::one() - y) * (F::one() - pc).ln());
        }
        let loss = total / F::lit(labels.len() as f64);
        self.push("bce", vec![1], vec![loss], Op::Bce { p, labels: labels.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.numel(loss) != 1 {
            return Err(Error::Usage(format!("backward on non-scalar of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Grads { slots: vec![None; self.params.len()] };

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &node.value, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.numel(v);
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        y: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        out: &mut Grads<F>,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut out.slots[*id] {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
                s @ None => *s = Some(g.to_vec()),
            },
            &Op::MatMul(a, b) => {
                let (n, p) = (self.shape(a)[0], self.shape(a)[1]);
                let q = self.shape(b)[1];
                if let Some(da) = self.slot(grads, a) {
                    mm_bt_acc(g, self.value(b), da, n, q, p);
                }
                if let Some(db) = self.slot(grads, b) {
                    mm_at_acc(self.value(a), g, db, n, p, q);
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let (bs, p, q) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let r = node.shape[2];
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..bs {
                        let gi = &g[i * p * r..(i + 1) * p * r];
                        let bi = &bv[i * q * r..(i + 1) * q * r];
                        let dai = &mut da[i * p * q..(i + 1) * p * q];
                        if trans_b {
                            mm_acc(gi, bi, dai, p, r, q);
                        } else {
                            mm_bt_acc(gi, bi, dai, p, r, q);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for i in 0..bs {
                        let gi = &g[i * p * r..(i + 1) * p * r];
                        let ai = &av[i * p * q..(i + 1) * p * q];
                        let dbi = &mut db[i * q * r..(i + 1) * q * r];
                        if trans_b {
                            mm_at_acc(gi, ai, dbi, p, r, q);
                        } else {
                            mm_at_acc(ai, gi, dbi, p, q, r);
                        }
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                if let Some(dx) = self.slot(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                let q = self.numel(b);
                if let Some(db) = self.slot(grads, b) {
                    for row in g.chunks(q.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            &Op::MulScalar(x, s) => {
                let c = self.value(s)[0];
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
                let xv = self.value(x);
                if let Some(ds) = self.slot(grads, s) {
                    ds[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<F>();
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            &Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (F::one() - yv * yv);
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (F::one() - yv);
                    }
                }
            }
            &Op::Softmax(x) => {
                let w = *node.shape.last().unwrap_or(&1);
                if let Some(dx) = self.slot(grads, x) {
                    for ((dr, gr), yr) in dx.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        dt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::SegmentMean { x, offsets } => {
                let d = node.shape[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (s, w) in offsets.windows(2).enumerate() {
                        let inv = F::one() / F::lit((w[1] - w[0]) as f64);
                        let gs = &g[s * d..(s + 1) * d];
                        for r in w[0]..w[1] {
                            dx[r * d..(r + 1) * d].iter_mut().zip(gs).for_each(|(a, &b)| *a += b * inv);
                        }
                    }
                }
            }
            &Op::MeanAxis { x, outer, n, inner } => {
                let inv = F::one() / F::lit(n as f64);
                if let Some(dx) = self.slot(grads, x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b * inv);
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = node.shape.iter().product::<usize>() / (outer * inner).max(1);
                let mut start = 0;
                for &v in inputs {
                    let n = self.numel(v) / (outer * inner).max(1);
                    if let Some(dv) = self.slot(grads, v) {
                        for o in 0..*outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + n) * inner];
                            dv[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    start += n;
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            &Op::Broadcast(x) => {
                let n = self.numel(x);
                if let Some(dx) = self.slot(grads, x) {
                    for chunk in g.chunks(n.max(1)) {
                        dx.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::CosineRows { a, b, saved } => {
                let d = *self.shape(*a).last().unwrap();
                let (av, bv) = (self.value(*a), self.value(*b));
                // d cos / d a = b/(na nb) - cos * a / na², norm terms drop out when clamped
                for (v, this, other, this_is_a) in [(*a, av, bv, true), (*b, bv, av, false)] {
                    if let Some(dv) = self.slot(grads, v) {
                        for (r, s) in saved.iter().enumerate() {
                            let (n_this, clamped) =
                                if this_is_a { (s.norm_a, s.a_clamped) } else { (s.norm_b, s.b_clamped) };
                            let inv = F::one() / (s.norm_a * s.norm_b);
                            let gr = g[r];
                            let xr = &this[r * d..(r + 1) * d];
                            let yr = &other[r * d..(r + 1) * d];
                            for ((dd, &x), &yo) in dv[r * d..(r + 1) * d].iter_mut().zip(xr).zip(yr) {
                                let mut t = yo * inv;
                                if !clamped {
                                    t -= s.cos * x / (n_this * n_this);
                                }
                                *dd += gr * t;
                            }
                        }
                    }
                }
            }
            Op::Bce { p, labels } => {
                let eps = F::lit(BCE_EPS);
                let n = F::lit(labels.len() as f64);
                let pv = self.value(*p);
                if let Some(dp) = self.slot(grads, *p) {
                    for ((d, &pi), &yi) in dp.iter_mut().zip(pv).zip(labels) {
                        if pi < eps || pi > F::one() - eps {
                            continue;
                        }
                        *d += g[0] * (pi - yi) / (pi * (F::one() - pi)) / n;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
        Ok(())
    }
}

/// Clamp applied to probabilities inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// `softmax(Q·Kᵀ/√d)·V`, returning the output and the attention weights.
///
/// Rank-2 inputs are `Q [q×d]`, `K [n×d]`, `V [n×v]`; rank-3 inputs carry a
/// leading batch axis on all three.
pub fn scaled_dot_attention<F: Scalar>(g: &mut Graph<'_, F>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (ks, vs) = (g.shape(k).to_vec(), g.shape(v).to_vec());
    let rank = ks.len();
    if vs.len() != rank || ks[rank - 2] != vs[rank - 2] || (rank == 3 && ks[0] != vs[0]) {
        return Err(Error::Config(format!("attention dimension mismatch: K {ks:?}, V {vs:?}")));
    }
    let weights = attention_weights(g, q, k)?;
    let out = if rank == 2 { g.matmul(weights, v)? } else { g.bmm(weights, v, false)? };
    Ok((out, weights))
}

/// The `softmax(Q·Kᵀ/√d)` half of [`scaled_dot_attention`].
pub fn attention_weights<F: Scalar>(g: &mut Graph<'_, F>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    let rank = qs.len();
    let ok = (rank == 2 || rank == 3)
        && ks.len() == rank
        && qs[rank - 1] == ks[rank - 1]
        && (rank == 2 || qs[0] == ks[0]);
    if !ok {
        return Err(Error::Config(format!("attention dimension mismatch: Q {qs:?}, K {ks:?}")));
    }
    let d = qs[rank - 1];
    let logits = if rank == 2 {
        let kt = g.transpose(k)?;
        g.matmul(q, kt)?
    } else {
        g.bmm(q, k, true)?
    };
    let logits = g.scale(logits, F::one() / F::lit(d as f64).sqrt())?;
    g.softmax(logits)
}
