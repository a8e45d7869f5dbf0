//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar loss with respect to every parameter it read.
//!
//! Parameters are borrowed from a [`ParamSet`] for the lifetime of the tape and
//! copied into a leaf node on first use. Embedding lookups read rows straight
//! from the borrowed table so large tables are never copied.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::cells;
use crate::error::{Error, Result};
use crate::kernels::{self, add_into, dot, sigmoid};
use crate::params::{ParamGrads, ParamId, ParamSet};
use crate::tensor::Tensor;

type Id = usize;

enum Op {
    Leaf,
    Param(ParamId),
    Gather { table: ParamId, ids: Vec<usize> },
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    OneMinus(Id),
    Sigmoid(Id),
    Tanh(Id),
    ScaleBy { x: Id, s: Id },
    AddScalar { x: Id, s: Id },
    AddScaledConst { x: Id, c: Tensor, s: Id },
    MatMul(Id, Id),
    MatMulNT(Id, Id),
    AddRowBias(Id, Id),
    Concat(Vec<Id>),
    ConcatCols(Vec<Id>),
    StackRows(Vec<Id>),
    Row(Id, usize),
    Slice { x: Id, start: usize },
    Softmax(Id),
    Sum(Id),
    Nll { logits: Id, probs: Vec<f64>, target_probs: Vec<f64> },
    PairwiseMul(Id, Id),
    ContractLast(Id, Id),
    WeightedSum(Id, Id),
    GruCell { xp: Id, h: Id, w: Id, saved: Vec<f64> },
    LstmCell { xp: Id, state: Id, w: Id, saved: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::OneMinus(_) => "one_minus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddScalar { .. } => "add_scalar",
            Op::AddScaledConst { .. } => "add_scaled_const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Concat(_) => "concat",
            Op::ConcatCols(_) => "concat_cols",
            Op::StackRows(_) => "stack_rows",
            Op::Row(..) => "row",
            Op::Slice { .. } => "slice",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Nll { .. } => "nll",
            Op::PairwiseMul(..) => "pairwise_mul",
            Op::ContractLast(..) => "contract_last",
            Op::WeightedSum(..) => "weighted_sum",
            Op::GruCell { .. } => "gru_cell",
            Op::LstmCell { .. } => "lstm_cell",
        }
    }

    fn inputs(&self) -> Vec<Id> {
        match self {
            Op::Leaf | Op::Param(_) | Op::Gather { .. } => vec![],
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Row(a, _)
            | Op::Softmax(a)
            | Op::Sum(a) => vec![*a],
            Op::Slice { x, .. } => vec![*x],
            Op::Nll { logits, .. } => vec![*logits],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::AddRowBias(a, b)
            | Op::PairwiseMul(a, b)
            | Op::ContractLast(a, b)
            | Op::WeightedSum(a, b) => vec![*a, *b],
            Op::ScaleBy { x, s } | Op::AddScalar { x, s } | Op::AddScaledConst { x, s, .. } => {
                vec![*x, *s]
            }
            Op::Concat(ids) | Op::ConcatCols(ids) | Op::StackRows(ids) => ids.clone(),
            Op::GruCell { xp, h, w, .. } => vec![*xp, *h, *w],
            Op::LstmCell { xp, state, w, .. } => vec![*xp, *state, *w],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of one forward pass.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<Vec<Option<Id>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape<'t>,
    id: Id,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Tape::backward`]. Frozen parameters get no gradient.
pub struct Gradients {
    params: ParamGrads,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }

    /// Gradient with respect to a recorded value, or `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.nodes.get(var.id).and_then(|g| g.as_deref())
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: RefCell::new(Vec::with_capacity(256)),
            param_nodes: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push<'t>(&'t self, value: Tensor, op: Op) -> Var<'t> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a value that is not differentiated through (inputs, masks).
    pub fn constant<'t>(&'t self, value: Tensor) -> Var<'t> {
        self.push(value, Op::Leaf)
    }

    pub fn zeros<'t>(&'t self, shape: &[usize]) -> Result<Var<'t>> {
        Ok(self.constant(Tensor::zeros(shape)?))
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param<'t>(&'t self, id: ParamId) -> Var<'t> {
        if let Some(node) = self.param_nodes.borrow().get(id.0).copied().flatten() {
            return Var { tape: self, id: node };
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        let mut map = self.param_nodes.borrow_mut();
        if map.len() <= id.0 {
            map.resize(id.0 + 1, None);
        }
        map[id.0] = Some(v.id);
        v
    }

    /// Rows `ids` of the rank-2 parameter `table`, as an `[ids.len(), d]` matrix.
    pub fn gather<'t>(&'t self, table: ParamId, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.params.get(table);
        if t.rank() != 2 {
            return Err(Error::contract(format!(
                "gather needs a rank-2 table, got {:?}",
                t.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather"));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::contract(format!(
                    "gather index {i} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    fn value(&self, id: Id) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n_loss = nodes[loss.id].value.len();
        if n_loss != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut pgrads = ParamGrads::new(self.params.len());

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads, &mut pgrads, self.params);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }

    /// Names of the recorded operations, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    /// Whether every node's inputs were recorded before it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|&j| j < i))
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: Id, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backprop(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    pgrads: &mut ParamGrads,
    params: &ParamSet,
) {
    let val = |id: Id| &nodes[id].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Param(pid) => {
            if params.is_trainable(*pid) {
                add_into(pgrads.buffer(*pid, params.get(*pid).shape()), g);
            }
        }
        Op::Gather { table, ids } => {
            if !params.is_trainable(*table) {
                return;
            }
            let shape = params.get(*table).shape();
            let d = shape[1];
            let buf = pgrads.buffer(*table, shape);
            for (k, &row) in ids.iter().enumerate() {
                add_into(&mut buf[row * d..(row + 1) * d], &g[k * d..(k + 1) * d]);
            }
        }
        Op::Add(a, b) => {
            add_into(slot(grads, *a, g.len()), g);
            add_into(slot(grads, *b, g.len()), g);
        }
        Op::Sub(a, b) => {
            add_into(slot(grads, *a, g.len()), g);
            kernels::axpy(slot(grads, *b, g.len()), -1.0, g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * bv[i];
            }
            let gb = slot(grads, *b, g.len());
            for i in 0..g.len() {
                gb[i] += g[i] * av[i];
            }
        }
        Op::Scale(a, s) => kernels::axpy(slot(grads, *a, g.len()), *s, g),
        Op::OneMinus(a) => kernels::axpy(slot(grads, *a, g.len()), -1.0, g),
        Op::Sigmoid(a) => {
            let y = out.data();
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }
        Op::Tanh(a) => {
            let y = out.data();
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }
        Op::ScaleBy { x, s } => {
            let sv = val(*s).data()[0];
            let xv = val(*x).data();
            kernels::axpy(slot(grads, *x, g.len()), sv, g);
            slot(grads, *s, 1)[0] += dot(g, xv);
        }
        Op::AddScalar { x, s } => {
            add_into(slot(grads, *x, g.len()), g);
            slot(grads, *s, 1)[0] += g.iter().sum::<f64>();
        }
        Op::AddScaledConst { x, c, s } => {
            add_into(slot(grads, *x, g.len()), g);
            slot(grads, *s, 1)[0] += dot(g, c.data());
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = if bt.rank() == 1 { 1 } else { bt.shape()[1] };
            // dA = G · Bᵀ
            let da = kernels::matmul_nt(g, bt.data(), m, n, k);
            add_into(slot(grads, *a, m * k), &da);
            // dB = Aᵀ · G
            kernels::matmul_tn_acc(slot(grads, *b, k * n), at.data(), g, m, k, n);
        }
        Op::MatMulNT(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = bt.shape()[0];
            // C = A Bᵀ: dA = G B, dB = Gᵀ A
            let da = kernels::matmul(g, bt.data(), m, n, k);
            add_into(slot(grads, *a, m * k), &da);
            kernels::matmul_tn_acc(slot(grads, *b, n * k), g, at.data(), m, n, k);
        }
        Op::AddRowBias(a, b) => {
            add_into(slot(grads, *a, g.len()), g);
            let n = val(*b).len();
            let gb = slot(grads, *b, n);
            for row in g.chunks(n) {
                add_into(gb, row);
            }
        }
        Op::Concat(ids) => {
            let mut off = 0;
            for &i in ids {
                let n = val(i).len();
                add_into(slot(grads, i, n), &g[off..off + n]);
                off += n;
            }
        }
        Op::ConcatCols(ids) => {
            let rows = out.shape()[0];
            let width = out.shape()[1];
            let mut col = 0;
            for &i in ids {
                let w = val(i).shape()[1];
                let gi = slot(grads, i, rows * w);
                for r in 0..rows {
                    add_into(
                        &mut gi[r * w..(r + 1) * w],
                        &g[r * width + col..r * width + col + w],
                    );
                }
                col += w;
            }
        }
        Op::StackRows(ids) => {
            let d = out.shape()[1];
            for (r, &i) in ids.iter().enumerate() {
                add_into(slot(grads, i, d), &g[r * d..(r + 1) * d]);
            }
        }
        Op::Row(a, r) => {
            let at = val(*a);
            let w = at.row_len();
            let ga = slot(grads, *a, at.len());
            add_into(&mut ga[r * w..(r + 1) * w], g);
        }
        Op::Slice { x, start } => {
            let n = val(*x).len();
            let gx = slot(grads, *x, n);
            add_into(&mut gx[*start..*start + g.len()], g);
        }
        Op::Softmax(a) => {
            let w = *out.shape().last().unwrap();
            let ga = slot(grads, *a, g.len());
            for (r, (yr, gr)) in out.data().chunks(w).zip(g.chunks(w)).enumerate() {
                let s = dot(yr, gr);
                for k in 0..w {
                    ga[r * w + k] += yr[k] * (gr[k] - s);
                }
            }
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            for x in slot(grads, *a, n).iter_mut() {
                *x += g[0];
            }
        }
        Op::Nll {
            logits,
            probs,
            target_probs,
        } => {
            let gl = slot(grads, *logits, probs.len());
            for k in 0..probs.len() {
                gl[k] += g[0] * (probs[k] - target_probs[k]);
            }
        }
        Op::PairwiseMul(p, q) => {
            let (pt, qt) = (val(*p), val(*q));
            let (m, d) = (pt.shape()[0], pt.shape()[1]);
            let n = qt.shape()[0];
            let (pv, qv) = (pt.data(), qt.data());
            let mut gp = vec![0.0; m * d];
            let mut gq = vec![0.0; n * d];
            for i in 0..m {
                for j in 0..n {
                    let base = (i * n + j) * d;
                    for k in 0..d {
                        gp[i * d + k] += g[base + k] * qv[j * d + k];
                        gq[j * d + k] += g[base + k] * pv[i * d + k];
                    }
                }
            }
            add_into(slot(grads, *p, m * d), &gp);
            add_into(slot(grads, *q, n * d), &gq);
        }
        Op::ContractLast(x, u) => {
            let (xt, ut) = (val(*x), val(*u));
            let d = ut.len();
            let uv = ut.data().to_vec();
            let xv = xt.data();
            let mut gu = vec![0.0; d];
            {
                let gx = slot(grads, *x, xt.len());
                for (r, &gr) in g.iter().enumerate() {
                    kernels::axpy(&mut gx[r * d..(r + 1) * d], gr, &uv);
                }
            }
            for (r, &gr) in g.iter().enumerate() {
                kernels::axpy(&mut gu, gr, &xv[r * d..(r + 1) * d]);
            }
            add_into(slot(grads, *u, d), &gu);
        }
        Op::WeightedSum(a, x) => {
            let (at, xt) = (val(*a), val(*x));
            let (m, n) = (at.shape()[0], at.shape()[1]);
            let d = xt.shape()[2];
            let (av, xv) = (at.data(), xt.data());
            let mut ga = vec![0.0; m * n];
            {
                let gx = slot(grads, *x, m * n * d);
                for i in 0..m {
                    let gi = &g[i * d..(i + 1) * d];
                    for j in 0..n {
                        let base = (i * n + j) * d;
                        ga[i * n + j] = dot(gi, &xv[base..base + d]);
                        kernels::axpy(&mut gx[base..base + d], av[i * n + j], gi);
                    }
                }
            }
            add_into(slot(grads, *a, m * n), &ga);
        }
        Op::GruCell { xp, h, w, saved } => {
            let hv = val(*h).data();
            let wv = val(*w).data();
            let n = hv.len();
            let (dxp, dh) = cells::gru_backward(
                g,
                hv,
                wv,
                saved,
                n,
                Some(slot(grads, *w, 3 * n * n)),
            );
            add_into(slot(grads, *xp, 3 * n), &dxp);
            add_into(slot(grads, *h, n), &dh);
        }
        Op::LstmCell { xp, state, w, saved } => {
            let sv = val(*state).data();
            let wv = val(*w).data();
            let n = sv.len() / 2;
            let (dxp, ds) = cells::lstm_backward(
                g,
                sv,
                wv,
                saved,
                n,
                Some(slot(grads, *w, 4 * n * n)),
            );
            add_into(slot(grads, *xp, 4 * n), &dxp);
            add_into(slot(grads, *state, 2 * n), &ds);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape<'t> {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.value(self.id).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single element of a one-element value.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let x = self.tape.value(self.id);
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.tape.push(value, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            if a.shape() != b.shape() {
                return Err(Error::dim(name, a.shape(), b.shape()));
            }
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn one_minus(self) -> Var<'t> {
        self.unary(Op::OneMinus(self.id), |x| 1.0 - x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    fn check_scalar(s: &Var<'t>, name: &'static str) -> Result<f64> {
        s.with_value(|t| {
            if t.len() == 1 {
                Ok(t.data()[0])
            } else {
                Err(Error::dim(name, t.shape(), &[1]))
            }
        })
    }

    /// `s · self` for a one-element `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let sv = Self::check_scalar(&s, "scale_by")?;
        Ok(self.unary(Op::ScaleBy { x: self.id, s: s.id }, |x| x * sv))
    }

    /// `self + s` for a one-element `s`.
    pub fn add_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let sv = Self::check_scalar(&s, "add_scalar")?;
        Ok(self.unary(Op::AddScalar { x: self.id, s: s.id }, |x| x + sv))
    }

    /// `self + s · c` with constant `c` and one-element `s`.
    pub fn add_scaled_const(self, c: Tensor, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let sv = Self::check_scalar(&s, "add_scaled_const")?;
        let value = {
            let x = self.tape.value(self.id);
            if x.shape() != c.shape() {
                return Err(Error::dim("add_scaled_const", x.shape(), c.shape()));
            }
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().zip(c.data()).map(|(&a, &b)| a + b * sv).collect(),
            )
        };
        Ok(self.tape.push(
            value,
            Op::AddScaledConst {
                x: self.id,
                c,
                s: s.id,
            },
        ))
    }

    /// Matrix product `[m,k]·[k,n] → [m,n]`, or matrix-vector `[m,k]·[k] → [m]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            let ok = a.rank() == 2 && (b.rank() == 1 || b.rank() == 2) && a.shape()[1] == b.shape()[0];
            if !ok {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            if b.rank() == 1 {
                Tensor::from_parts(vec![m], kernels::matmul_nt(a.data(), b.data(), m, k, 1))
            } else {
                let n = b.shape()[1];
                Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
            }
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    /// `[m,k]·[n,k]ᵀ → [m,n]`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            Tensor::from_parts(vec![m, n], kernels::matmul_nt(a.data(), b.data(), m, k, n))
        };
        Ok(self.tape.push(value, Op::MatMulNT(self.id, other.id)))
    }

    /// Adds vector `bias[n]` to every row of `self[m,n]`.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(bias.id));
            if a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.len() {
                return Err(Error::dim("add_row_bias", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(b.len()) {
                add_into(row, b.data());
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.tape.push(value, Op::AddRowBias(self.id, bias.id)))
    }

    /// Row `i` of a rank-2 or rank-3 value.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.rank() < 2 || i >= a.shape()[0] {
                return Err(Error::dim("row", a.shape(), &[i]));
            }
            Tensor::from_parts(a.shape()[1..].to_vec(), a.row(i).to_vec())
        };
        Ok(self.tape.push(value, Op::Row(self.id, i)))
    }

    /// `self[start..start+len]` of a vector.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.rank() != 1 || len == 0 || start + len > a.len() {
                return Err(Error::dim("slice", a.shape(), &[start, len]));
            }
            Tensor::from_parts(vec![len], a.data()[start..start + len].to_vec())
        };
        Ok(self.tape.push(value, Op::Slice { x: self.id, start }))
    }

    /// Softmax along the last axis (each row of a matrix independently).
    pub fn softmax(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.rank() > 2 {
                return Err(Error::dim("softmax", a.shape(), &[]));
            }
            let w = *a.shape().last().unwrap();
            let mut data = vec![0.0; a.len()];
            for (src, dst) in a.data().chunks(w).zip(data.chunks_mut(w)) {
                kernels::softmax_into(src, dst);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.tape.push(value, Op::Softmax(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(Tensor::sum);
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Inner product of two equally shaped values.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.mul(other)?.sum())
    }

    /// Negative log of the total softmax probability that `self` (a logit
    /// vector) assigns to the positions in `targets`.
    pub fn nll(self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs, target_probs) = {
            let z = self.tape.value(self.id);
            if z.rank() != 1 {
                return Err(Error::dim("nll", z.shape(), &[]));
            }
            if targets.is_empty() {
                return Err(Error::EmptySequence("nll targets"));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= z.len()) {
                return Err(Error::dim("nll", z.shape(), &[t]));
            }
            let zv = z.data();
            let mut mask = vec![false; zv.len()];
            targets.iter().for_each(|&t| mask[t] = true);
            let lse_all = kernels::log_sum_exp(zv.iter().copied());
            let picked = zv.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v);
            let lse_t = kernels::log_sum_exp(picked);
            let probs: Vec<f64> = zv.iter().map(|&v| (v - lse_all).exp()).collect();
            let target_probs: Vec<f64> = zv
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { (v - lse_t).exp() } else { 0.0 })
                .collect();
            (lse_all - lse_t, probs, target_probs)
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Nll {
                logits: self.id,
                probs,
                target_probs,
            },
        ))
    }

    /// Concatenates vectors end to end.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptySequence("concat"))?;
        let tape = first.tape;
        let value = {
            let mut data = Vec::new();
            for p in parts {
                first.same_tape(p);
                let v = tape.value(p.id);
                if v.rank() != 1 {
                    return Err(Error::dim("concat", v.shape(), &[]));
                }
                data.extend_from_slice(v.data());
            }
            Tensor::from_parts(vec![data.len()], data)
        };
        Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
            let rows = vals[0].shape()[0];
            for v in &vals {
                if v.rank() != 2 || v.shape()[0] != rows {
                    return Err(Error::dim("concat_cols", vals[0].shape(), v.shape()));
                }
            }
            let width: usize = vals.iter().map(|v| v.shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::from_parts(vec![rows, width], data)
        };
        Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptySequence("stack_rows"))?;
        let tape = first.tape;
        let value = {
            let d = tape.value(first.id).len();
            let mut data = Vec::with_capacity(parts.len() * d);
            for p in parts {
                first.same_tape(p);
                let v = tape.value(p.id);
                if v.rank() != 1 || v.len() != d {
                    return Err(Error::dim("stack_rows", &[d], v.shape()));
                }
                data.extend_from_slice(v.data());
            }
            Tensor::from_parts(vec![parts.len(), d], data)
        };
        Ok(tape.push(value, Op::StackRows(parts.iter().map(|p| p.id).collect())))
    }

    /// `out[i,j,:] = self[i,:] ⊙ other[j,:]` for `self[M,d]`, `other[N,d]`.
    pub fn pairwise_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let (p, q) = (self.tape.value(self.id), self.tape.value(other.id));
            if p.rank() != 2 || q.rank() != 2 || p.shape()[1] != q.shape()[1] {
                return Err(Error::dim("pairwise_mul", p.shape(), q.shape()));
            }
            let (m, d, n) = (p.shape()[0], p.shape()[1], q.shape()[0]);
            let mut data = Vec::with_capacity(m * n * d);
            for i in 0..m {
                let pi = p.row(i);
                for j in 0..n {
                    data.extend(pi.iter().zip(q.row(j)).map(|(a, b)| a * b));
                }
            }
            Tensor::from_parts(vec![m, n, d], data)
        };
        Ok(self.tape.push(value, Op::PairwiseMul(self.id, other.id)))
    }

    /// Contracts the last axis of `self[..., d]` with the vector `u[d]`.
    pub fn contract_last(self, u: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&u);
        let value = {
            let (x, uv) = (self.tape.value(self.id), self.tape.value(u.id));
            let d = *x.shape().last().unwrap();
            if x.rank() < 2 || uv.rank() != 1 || uv.len() != d {
                return Err(Error::dim("contract_last", x.shape(), uv.shape()));
            }
            let data = x.data().chunks(d).map(|r| dot(r, uv.data())).collect();
            Tensor::from_parts(x.shape()[..x.rank() - 1].to_vec(), data)
        };
        Ok(self.tape.push(value, Op::ContractLast(self.id, u.id)))
    }

    /// `out[i,:] = Σ_j self[i,j] · x[i,j,:]` for weights `self[M,N]`, `x[M,N,d]`.
    pub fn weighted_sum(self, x: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&x);
        let value = {
            let (a, xv) = (self.tape.value(self.id), self.tape.value(x.id));
            if a.rank() != 2 || xv.rank() != 3 || a.shape() != &xv.shape()[..2] {
                return Err(Error::dim("weighted_sum", a.shape(), xv.shape()));
            }
            let (m, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let mut data = vec![0.0; m * d];
            for i in 0..m {
                let out = &mut data[i * d..(i + 1) * d];
                for j in 0..n {
                    let base = (i * n + j) * d;
                    kernels::axpy(out, a.data()[i * n + j], &xv.data()[base..base + d]);
                }
            }
            Tensor::from_parts(vec![m, d], data)
        };
        Ok(self.tape.push(value, Op::WeightedSum(self.id, x.id)))
    }

    /// Fused GRU update. `self` is the input projection `[3n]`, `h` the previous
    /// state `[n]`, `w` the recurrent weights `[3n, n]`.
    pub fn gru_cell(self, h: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&h);
        self.same_tape(&w);
        let (value, saved) = {
            let (xp, hv, wv) = (
                self.tape.value(self.id),
                self.tape.value(h.id),
                self.tape.value(w.id),
            );
            let n = hv.len();
            if hv.rank() != 1 || xp.shape() != [3 * n] || wv.shape() != [3 * n, n] {
                return Err(Error::dim("gru_cell", xp.shape(), wv.shape()));
            }
            let (out, saved) = cells::gru_forward(xp.data(), hv.data(), wv.data(), n);
            (Tensor::from_parts(vec![n], out), saved)
        };
        Ok(self.tape.push(
            value,
            Op::GruCell {
                xp: self.id,
                h: h.id,
                w: w.id,
                saved,
            },
        ))
    }

    /// Fused LSTM update over the packed state `[h; c]` of length `2n`. `self`
    /// is the input projection `[4n]`, `w` the recurrent weights `[4n, n]`.
    pub fn lstm_cell(self, state: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&state);
        self.same_tape(&w);
        let (value, saved) = {
            let (xp, sv, wv) = (
                self.tape.value(self.id),
                self.tape.value(state.id),
                self.tape.value(w.id),
            );
            let n = sv.len() / 2;
            if sv.rank() != 1 || sv.len() != 2 * n || xp.shape() != [4 * n] || wv.shape() != [4 * n, n] {
                return Err(Error::dim("lstm_cell", xp.shape(), wv.shape()));
            }
            let (out, saved) = cells::lstm_forward(xp.data(), sv.data(), wv.data(), n);
            (Tensor::from_parts(vec![2 * n], out), saved)
        };
        Ok(self.tape.push(
            value,
            Op::LstmCell {
                xp: self.id,
                state: state.id,
                w: w.id,
                saved,
            },
        ))
    }
}
