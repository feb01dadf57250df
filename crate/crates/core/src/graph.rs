//! Reverse-mode autodiff over an op graph recorded per forward pass.
//!
//! The graph owns every node's value; ops push a node and return a [`NodeId`].
//! `backward` walks the recording in reverse, accumulates gradients, and can
//! run once per graph. Build a fresh graph per training step and drop it after
//! the optimizer update.

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Element, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(pub(crate) usize);

/// Backward rule for one op. `inputs` and `output` are the values recorded at
/// forward time; the result holds one gradient buffer per input, `None`
/// wherever `needs` is false.
pub trait OpImpl<E: Element>: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>>;
}

enum NodeKind<E: Element> {
    Leaf,
    Op {
        op: Box<dyn OpImpl<E>>,
        inputs: Vec<NodeId>,
    },
}

pub struct Graph<E: Element> {
    values: Vec<Tensor<E>>,
    kinds: Vec<NodeKind<E>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<E>>>,
    backward_done: bool,
    check_finite: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            kinds: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggles the debug-mode finiteness guard on op outputs.
    pub fn set_check_finite(&mut self, v: bool) {
        self.check_finite = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers an input tensor. Gradient participation follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<E>) -> NodeId {
        let req = t.requires_grad();
        self.push_node(NodeKind::Leaf, t, req)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<E>) -> NodeId {
        self.push_node(NodeKind::Leaf, t.with_requires_grad(false), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<E>> {
        self.grads[id.0].take()
    }

    pub(crate) fn push(
        &mut self,
        op: Box<dyn OpImpl<E>>,
        inputs: Vec<NodeId>,
        value: Tensor<E>,
    ) -> NodeId {
        if self.check_finite {
            assert!(
                value.all_finite(),
                "non-finite values in output of op {}",
                op.name()
            );
        }
        let req = inputs.iter().any(|i| self.requires[i.0]);
        self.push_node(NodeKind::Op { op, inputs }, value, req)
    }

    fn push_node(&mut self, kind: NodeKind<E>, value: Tensor<E>, req: bool) -> NodeId {
        self.values.push(value);
        self.kinds.push(kind);
        self.requires.push(req);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    /// Runs reverse-mode accumulation from a scalar loss node. After it
    /// returns, every leaf with `requires_grad` has a gradient (zeros if the
    /// leaf does not influence the loss), also mirrored onto the leaf tensor.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward already ran on this graph"));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.values[loss.0].shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        self.backward_done = true;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![E::one()]);

        for k in (0..=loss.0).rev() {
            if !self.requires[k] {
                continue;
            }
            let (op, inputs) = match &self.kinds[k] {
                NodeKind::Leaf => continue,
                NodeKind::Op { op, inputs } => (op, inputs),
            };
            let Some(gout) = self.grads[k].take() else {
                continue;
            };
            let in_vals: Vec<&Tensor<E>> = inputs.iter().map(|i| &self.values[i.0]).collect();
            let needs: Vec<bool> = inputs.iter().map(|i| self.requires[i.0]).collect();
            let contribs = op.backward(&in_vals, &self.values[k], &gout, &needs);
            debug_assert_eq!(contribs.len(), inputs.len(), "op {} backward arity", op.name());
            for (i, c) in inputs.iter().zip(contribs) {
                let Some(c) = c else { continue };
                debug_assert_eq!(c.len(), self.values[i.0].numel());
                match &mut self.grads[i.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }

        for k in 0..=loss.0 {
            if matches!(self.kinds[k], NodeKind::Leaf) && self.requires[k] {
                let n = self.values[k].numel();
                let g = self.grads[k].get_or_insert_with(|| vec![E::zero(); n]);
                let g = g.clone();
                self.values[k].set_grad(Some(g));
            }
        }
        Ok(())
    }

    // ---- built-in ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Box::new(AddOp), vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Box::new(MulOp), vec![a, b], out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![E::zero(); m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * *bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Box::new(MatMulOp), vec![a, b], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("relu preserves shape");
        self.push(Box::new(ReluOp), vec![x], out)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = E::from_f64(slope);
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { s * v })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("leaky_relu preserves shape");
        self.push(Box::new(LeakyReluOp { slope: s }), vec![x], out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        let out = softmax_forward(t, axis);
        Ok(self.push(Box::new(SoftmaxOp { axis }), vec![x], out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape).map_err(|_| Error::BadShape {
            op: "reshape",
            shape: shape.to_vec(),
            reason: format!("incompatible with input shape {:?}", self.value(x).shape()),
        })?;
        Ok(self.push(Box::new(ReshapeOp), vec![x], out))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let r = t.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || !perm.iter().all(|&p| p < r && !std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::BadShape {
                op: "permute",
                shape: t.shape().to_vec(),
                reason: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        let out = permute_data(t, perm);
        Ok(self.push(
            Box::new(PermuteOp {
                perm: perm.to_vec(),
            }),
            vec![x],
            out,
        ))
    }

    /// Concatenates two tensors along `axis`; all other dims must match.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let out = concat_forward(self.value(a), self.value(b), axis)?;
        Ok(self.push(Box::new(ConcatOp { axis }), vec![a, b], out))
    }

    /// Takes `len` indices starting at `start` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        let dim = t.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::BadShape {
                op: "slice",
                shape: t.shape().to_vec(),
                reason: format!("range {start}..{} exceeds axis {axis} of size {dim}", start + len),
            });
        }
        let (outer, _, inner) = axis_split(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Box::new(SliceOp { axis, start }), vec![x], out))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mut acc = E::zero();
        for v in t.data() {
            acc += *v;
        }
        self.push(Box::new(SumAllOp), vec![x], Tensor::scalar(acc))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cv = E::from_f64(c);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| cv * v).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("scale preserves shape");
        self.push(Box::new(ScaleOp { c: cv }), vec![x], out)
    }

    /// ln(max(x, clamp)); gradient is zero where the clamp engages.
    pub fn log_clamped(&mut self, x: NodeId, clamp: f64) -> NodeId {
        let cl = E::from_f64(clamp);
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > cl { v.ln() } else { cl.ln() })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("log preserves shape");
        self.push(Box::new(LogClampOp { clamp: cl }), vec![x], out)
    }
}

/// Splits a shape at `axis` into (outer, axis_dim, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::BadShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

pub(crate) fn concat_forward<E: Element>(
    ta: &Tensor<E>,
    tb: &Tensor<E>,
    axis: usize,
) -> Result<Tensor<E>> {
    let ok = ta.rank() == tb.rank()
        && axis < ta.rank()
        && ta
            .shape()
            .iter()
            .zip(tb.shape())
            .enumerate()
            .all(|(i, (x, y))| i == axis || x == y);
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "concat",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        });
    }
    let mut shape = ta.shape().to_vec();
    shape[axis] += tb.shape()[axis];
    let (outer, _, inner) = axis_split(ta.shape(), axis);
    let (ca, cb) = (ta.shape()[axis], tb.shape()[axis]);
    let mut data = Vec::with_capacity(ta.numel() + tb.numel());
    for o in 0..outer {
        data.extend_from_slice(&ta.data()[o * ca * inner..(o + 1) * ca * inner]);
        data.extend_from_slice(&tb.data()[o * cb * inner..(o + 1) * cb * inner]);
    }
    Tensor::new(shape, data)
}

pub(crate) fn softmax_forward<E: Element>(t: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, c, inner) = axis_split(t.shape(), axis);
    let x = t.data();
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * c + j) * inner + i;
            let mut mx = x[at(0)];
            for j in 1..c {
                if x[at(j)] > mx {
                    mx = x[at(j)];
                }
            }
            let mut sum = E::zero();
            for j in 0..c {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..c {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax preserves shape")
}

pub(crate) fn permute_data<E: Element>(t: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let shape = t.shape();
    let r = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = strides_of(&new_shape);
    let mut data = vec![E::zero(); t.numel()];
    let src = t.data();
    let mut idx = vec![0usize; r];
    for &v in src.iter() {
        let mut off = 0;
        for a in 0..r {
            // new axis a comes from old axis perm[a]
            off += idx[perm[a]] * out_strides[a];
        }
        data[off] = v;
        for a in (0..r).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(new_shape, data).expect("permute preserves element count")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---- op backward rules ----

#[derive(Debug)]
struct AddOp;

impl<E: Element> OpImpl<E> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| grad_out.to_vec()),
            needs[1].then(|| grad_out.to_vec()),
        ]
    }
}

#[derive(Debug)]
struct MulOp;

impl<E: Element> OpImpl<E> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let da = needs[0].then(|| {
            grad_out
                .iter()
                .zip(inputs[1].data())
                .map(|(g, b)| *g * *b)
                .collect()
        });
        let db = needs[1].then(|| {
            grad_out
                .iter()
                .zip(inputs[0].data())
                .map(|(g, a)| *g * *a)
                .collect()
        });
        vec![da, db]
    }
}

#[derive(Debug)]
struct MatMulOp;

impl<E: Element> OpImpl<E> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let da = needs[0].then(|| {
            // dA = dY . B^T
            let mut da = vec![E::zero(); m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = E::zero();
                    let grow = &grad_out[i * n..(i + 1) * n];
                    let brow = &b.data()[p * n..(p + 1) * n];
                    for (g, bv) in grow.iter().zip(brow) {
                        acc += *g * *bv;
                    }
                    da[i * k + p] = acc;
                }
            }
            da
        });
        let db = needs[1].then(|| {
            // dB = A^T . dY
            let mut db = vec![E::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    let grow = &grad_out[i * n..(i + 1) * n];
                    let brow = &mut db[p * n..(p + 1) * n];
                    for (o, g) in brow.iter_mut().zip(grow) {
                        *o += av * *g;
                    }
                }
            }
            db
        });
        vec![da, db]
    }
}

#[derive(Debug)]
struct ReluOp;

impl<E: Element> OpImpl<E> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(grad_out)
                .map(|(x, g)| if *x > E::zero() { *g } else { E::zero() })
                .collect()
        })]
    }
}

#[derive(Debug)]
struct LeakyReluOp<E> {
    slope: E,
}

impl<E: Element> OpImpl<E> for LeakyReluOp<E> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(grad_out)
                .map(|(x, g)| if *x > E::zero() { *g } else { self.slope * *g })
                .collect()
        })]
    }
}

#[derive(Debug)]
struct SoftmaxOp {
    axis: usize,
}

impl<E: Element> OpImpl<E> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let (outer, c, inner) = axis_split(output.shape(), self.axis);
            let p = output.data();
            let mut dx = vec![E::zero(); p.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * c + j) * inner + i;
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot += grad_out[at(j)] * p[at(j)];
                    }
                    for j in 0..c {
                        dx[at(j)] = p[at(j)] * (grad_out[at(j)] - dot);
                    }
                }
            }
            dx
        })]
    }
}

#[derive(Debug)]
struct ReshapeOp;

impl<E: Element> OpImpl<E> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| grad_out.to_vec())]
    }
}

#[derive(Debug)]
struct PermuteOp {
    perm: Vec<usize>,
}

impl<E: Element> OpImpl<E> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let g = Tensor::new(output.shape().to_vec(), grad_out.to_vec()).unwrap();
            permute_data(&g, &inverse_perm(&self.perm)).into_data()
        })]
    }
}

#[derive(Debug)]
struct ConcatOp {
    axis: usize,
}

impl<E: Element> OpImpl<E> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (outer, ca, inner) = axis_split(inputs[0].shape(), self.axis);
        let cb = inputs[1].shape()[self.axis];
        let mut da = needs[0].then(|| Vec::with_capacity(inputs[0].numel()));
        let mut db = needs[1].then(|| Vec::with_capacity(inputs[1].numel()));
        let block = (ca + cb) * inner;
        for o in 0..outer {
            let base = o * block;
            if let Some(da) = da.as_mut() {
                da.extend_from_slice(&grad_out[base..base + ca * inner]);
            }
            if let Some(db) = db.as_mut() {
                db.extend_from_slice(&grad_out[base + ca * inner..base + block]);
            }
        }
        vec![da, db]
    }
}

#[derive(Debug)]
struct SliceOp {
    axis: usize,
    start: usize,
}

impl<E: Element> OpImpl<E> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let (outer, dim, inner) = axis_split(inputs[0].shape(), self.axis);
            let len = output.shape()[self.axis];
            let mut dx = vec![E::zero(); inputs[0].numel()];
            for o in 0..outer {
                let dst = (o * dim + self.start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&grad_out[src..src + len * inner]);
            }
            dx
        })]
    }
}

#[derive(Debug)]
struct SumAllOp;

impl<E: Element> OpImpl<E> for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| vec![grad_out[0]; inputs[0].numel()])]
    }
}

#[derive(Debug)]
struct ScaleOp<E> {
    c: E,
}

impl<E: Element> OpImpl<E> for ScaleOp<E> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| grad_out.iter().map(|g| self.c * *g).collect())]
    }
}

#[derive(Debug)]
struct LogClampOp<E> {
    clamp: E,
}

impl<E: Element> OpImpl<E> for LogClampOp<E> {
    fn name(&self) -> &'static str {
        "log_clamped"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(grad_out)
                .map(|(x, g)| if *x > self.clamp { *g / *x } else { E::zero() })
                .collect()
        })]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, vals).unwrap().with_requires_grad(true)
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_backward_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[1], &[3.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum_all(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_runs_once() {
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[2], &[1.0, 2.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        let err = g.backward(s).unwrap_err();
        assert!(err.to_string().contains("already ran"));
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[2], &[1.0, 2.0]));
        let y = g.leaf(leaf_grad(&[2], &[5.0, 6.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.value(y).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn add_shape_mismatch_names_op_and_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_f64s(&[2], &[0.0, 0.0]).unwrap());
        let p = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_f64s(&[2, 3], &[1.0, -2.0, 0.3, 40.0, 39.0, 38.5]).unwrap());
        let p = g.softmax(x, 1).unwrap();
        let d = g.value(p).data();
        for row in 0..2 {
            let s: f64 = d[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(d[row * 3..(row + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn matmul_matches_hand_result() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::from_f64s(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64s(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::from_f64s(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64s(&[1, 1, 2], &[9.0, 8.0]).unwrap());
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s).shape(), &[1, 1, 2]);
        assert_eq!(g.value(s).data(), &[9.0, 8.0]);
    }

    #[test]
    fn permute_moves_axes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_f64s(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reused_input_accumulates_grads() {
        // f = sum(x + x) -> df/dx = 2
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn log_clamp_floors_and_zeroes_grad() {
        let mut g: Graph<f64> = Graph::new();
        let t = Tensor::from_f64s(&[2], &[0.0, 1.0]).unwrap().with_requires_grad(true);
        let x = g.leaf(t);
        let l = g.log_clamped(x, 1e-12);
        assert_eq!(g.value(l).data()[0], 1e-12f64.ln());
        assert_eq!(g.value(l).data()[1], 0.0);
        let s = g.sum_all(l);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }
}
