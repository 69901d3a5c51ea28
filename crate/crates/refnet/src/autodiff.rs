//! Dense tensors and reverse-mode automatic differentiation on a tape.
//!
//! A [`Graph`] records every operation of a forward pass into a linear tape of
//! nodes; [`Graph::backward`] replays the tape in reverse, accumulating
//! gradients by the chain rule. Nodes only ever reference earlier nodes, so a
//! single reverse sweep visits each operation exactly once, after all of its
//! consumers, and two sweeps over the same tape produce bit-identical
//! gradients.
//!
//! Learnable parameters live outside the tape in a [`ParamStore`]; a forward
//! pass references them read-only, which makes it safe to run many per-sample
//! graphs in parallel against one shared store. Backward collects parameter
//! gradients into a per-graph [`GradSink`] that the caller merges in a fixed
//! order.
//!
//! Broadcasting is deliberately limited to adding a bias vector to the rows of
//! a matrix; every other operation requires exact shapes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a graph's tape.
pub type TensorId = usize;
/// Handle to a parameter in a [`ParamStore`].
pub type ParamId = usize;

/// A named learnable tensor.
#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
}

/// Registry of all learnable tensors of a model, ordered by registration.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<F>) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::Shape {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id]
    }

    pub fn value(&self, id: ParamId) -> &[F] {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id].value
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-graph parameter gradients. Dense per parameter, except gradients that
/// arrived through embedding-row lookups, which stay sparse by row.
#[derive(Clone, Debug)]
pub struct GradSink<F> {
    pub dense: Vec<Option<Vec<F>>>,
    pub rows: Vec<BTreeMap<usize, Vec<F>>>,
}

impl<F: Scalar> GradSink<F> {
    pub fn new(n_params: usize) -> Self {
        GradSink {
            dense: vec![None; n_params],
            rows: vec![BTreeMap::new(); n_params],
        }
    }

    /// Accumulate `other` into `self` (order-stable elementwise adds).
    pub fn merge(&mut self, other: &GradSink<F>) {
        for (slot, o) in self.dense.iter_mut().zip(other.dense.iter()) {
            if let Some(og) = o {
                match slot {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(og.iter()) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(og.clone()),
                }
            }
        }
        for (mine, theirs) in self.rows.iter_mut().zip(other.rows.iter()) {
            for (row, og) in theirs {
                match mine.get_mut(row) {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(og.iter()) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        mine.insert(*row, og.clone());
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, k: F) {
        for slot in self.dense.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v = *v * k;
            }
        }
        for rows in self.rows.iter_mut() {
            for g in rows.values_mut() {
                for v in g.iter_mut() {
                    *v = *v * k;
                }
            }
        }
    }

    /// Flattened gradient for one parameter (dense + scattered rows), zeros
    /// where nothing accumulated.
    pub fn param_grad(&self, store: &ParamStore<F>, id: ParamId) -> Vec<F> {
        let entry = store.entry(id);
        let mut out = vec![F::zero(); entry.value.len()];
        if let Some(d) = &self.dense[id] {
            for (a, b) in out.iter_mut().zip(d.iter()) {
                *a = *a + *b;
            }
        }
        if !self.rows[id].is_empty() {
            let cols = entry.shape[entry.shape.len() - 1];
            for (row, g) in &self.rows[id] {
                let base = row * cols;
                for (j, v) in g.iter().enumerate() {
                    out[base + j] = out[base + j] + *v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    EmbedRow {
        table: ParamId,
        row: usize,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    /// y = m · v for a matrix and a vector.
    Matvec {
        m: TensorId,
        v: TensorId,
    },
    /// y = mᵀ · v; used for weighted sums of matrix rows.
    TMatvec {
        m: TensorId,
        v: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// y = scale·x + shift, elementwise with constants; backward only
    /// needs the scale.
    ScaleShift {
        x: TensorId,
        scale: F,
    },
    /// Adds a bias vector to every row of a matrix (the only broadcast).
    AddBiasRows {
        m: TensorId,
        b: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
    },
    StackRows {
        rows: Vec<TensorId>,
    },
    MaskedSoftmax {
        x: TensorId,
        mask: Vec<bool>,
    },
    /// log of the probability mass a softmax over `x` puts on `group`,
    /// computed in shifted log-sum-exp form (never `log(softmax(x))`).
    LogGroupProb {
        x: TensorId,
        mask: Vec<bool>,
        group: Vec<usize>,
        lse_group: F,
        lse_all: F,
    },
    GatherSum {
        x: TensorId,
        indices: Vec<usize>,
    },
    Sum {
        x: TensorId,
    },
    SumScalars {
        xs: Vec<TensorId>,
    },
    LogFloor {
        x: TensorId,
        floor: F,
    },
}

#[derive(Clone, Debug)]
struct Node<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<F>,
}

/// Tape of one forward computation. Parameters are read from a shared store;
/// construction and backward are single-threaded per graph.
pub struct Graph<'p, F: Scalar> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<TensorId>>,
    grads: Vec<Option<Vec<F>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar(&self, id: TensorId) -> F {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient of the last backward target w.r.t. node `id`, if it was
    /// reached and requires grad.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool, op: Op<F>) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> TensorId {
        self.push(data, shape.to_vec(), false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        let n = numel(shape);
        self.push(vec![F::zero(); n], shape.to_vec(), false, Op::Leaf)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> TensorId {
        self.push(data, shape.to_vec(), requires_grad, Op::Leaf)
    }

    /// Bring a parameter onto the tape (memoized per graph, so gradient
    /// contributions from every use accumulate on one node).
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.param_nodes[id] {
            return t;
        }
        let entry = self.store.entry(id);
        let t = self.push(
            entry.value.clone(),
            entry.shape.clone(),
            true,
            Op::Param(id),
        );
        self.param_nodes[id] = Some(t);
        t
    }

    /// One row of an embedding table, without copying the whole table.
    pub fn embed_row(&mut self, table: ParamId, row: usize) -> Result<TensorId> {
        let entry = self.store.entry(table);
        if entry.shape.len() != 2 || row >= entry.shape[0] {
            return Err(Error::Contract(format!(
                "embedding row {row} out of range for {} with shape {:?}",
                entry.name, entry.shape
            )));
        }
        let cols = entry.shape[1];
        let data = entry.value[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(data, vec![cols], true, Op::EmbedRow { table, row }))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.nodes[a].data, &self.nodes[b].data);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                    *o = *o + aip * *bv;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn matvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Shape {
                op: "matvec",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let (dm, dv) = (&self.nodes[m].data, &self.nodes[v].data);
        let mut out = vec![F::zero(); r];
        for i in 0..r {
            let row = &dm[i * c..(i + 1) * c];
            let mut acc = F::zero();
            for (a, b) in row.iter().zip(dv.iter()) {
                acc = acc + *a * *b;
            }
            out[i] = acc;
        }
        let rg = self.requires(m) || self.requires(v);
        Ok(self.push(out, vec![r], rg, Op::Matvec { m, v }))
    }

    /// mᵀ·v: weighted sum of the rows of `m` with weights `v`.
    pub fn tmatvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::Shape {
                op: "tmatvec",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let (dm, dv) = (&self.nodes[m].data, &self.nodes[v].data);
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            let w = dv[i];
            let row = &dm[i * c..(i + 1) * c];
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o = *o + w * *a;
            }
        }
        let rg = self.requires(m) || self.requires(v);
        Ok(self.push(out, vec![c], rg, Op::TMatvec { m, v }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale_shift(&mut self, x: TensorId, scale: F, shift: F) -> TensorId {
        let data = self.nodes[x]
            .data
            .iter()
            .map(|v| scale * *v + shift)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::ScaleShift { x, scale })
    }

    pub fn add_bias_rows(&mut self, m: TensorId, b: TensorId) -> Result<TensorId> {
        let (sm, sb) = (self.shape(m).to_vec(), self.shape(b).to_vec());
        if sm.len() != 2 || sb.len() != 1 || sm[1] != sb[0] {
            return Err(Error::Shape {
                op: "add_bias_rows",
                lhs: sm,
                rhs: sb,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let mut data = self.nodes[m].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + self.nodes[b].data[j];
            }
        }
        let rg = self.requires(m) || self.requires(b);
        Ok(self.push(data, vec![r, c], rg, Op::AddBiasRows { m, b }))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x].data.iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let one = F::one();
        let data = self.nodes[x]
            .data
            .iter()
            .map(|v| one / (one + (-*v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x]
            .data
            .iter()
            .map(|v| if *v > F::zero() { *v } else { F::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Relu { x })
    }

    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(&self.nodes[p].data);
        }
        let n = data.len();
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            data,
            vec![n],
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack of zero rows".into()));
        }
        let width = self.shape(rows[0]).to_vec();
        if width.len() != 1 {
            return Err(Error::Shape {
                op: "stack_rows",
                lhs: width,
                rhs: vec![],
            });
        }
        let c = width[0];
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.shape(r) != [c] {
                return Err(Error::Shape {
                    op: "stack_rows",
                    lhs: vec![c],
                    rhs: self.shape(r).to_vec(),
                });
            }
            data.extend_from_slice(&self.nodes[r].data);
        }
        let rg = rows.iter().any(|&r| self.requires(r));
        Ok(self.push(
            data,
            vec![rows.len(), c],
            rg,
            Op::StackRows {
                rows: rows.to_vec(),
            },
        ))
    }

    /// Softmax over unmasked positions with max-subtraction; masked positions
    /// come out exactly zero and receive no gradient.
    pub fn masked_softmax(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 || sx[0] != mask.len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: sx,
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let d = &self.nodes[x].data;
        let mut mx = F::neg_infinity();
        for (v, &keep) in d.iter().zip(mask.iter()) {
            if keep && *v > mx {
                mx = *v;
            }
        }
        let mut data = vec![F::zero(); d.len()];
        let mut total = F::zero();
        for (i, (v, &keep)) in d.iter().zip(mask.iter()).enumerate() {
            if keep {
                let e = (*v - mx).exp();
                data[i] = e;
                total = total + e;
            }
        }
        for v in data.iter_mut() {
            *v = *v / total;
        }
        let rg = self.requires(x);
        Ok(self.push(
            data,
            sx,
            rg,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let n = numel(self.shape(x));
        self.masked_softmax(x, &vec![true; n])
    }

    /// `log Σ_{i∈group} softmax(x)_i` over unmasked positions, in shifted
    /// log-sum-exp form.
    pub fn log_group_prob(
        &mut self,
        x: TensorId,
        mask: &[bool],
        group: &[usize],
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 || sx[0] != mask.len() {
            return Err(Error::Shape {
                op: "log_group_prob",
                lhs: sx,
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        if group.is_empty() || group.iter().any(|&i| i >= sx[0] || !mask[i]) {
            return Err(Error::Contract(format!(
                "log_group_prob group {group:?} invalid for length {} mask",
                sx[0]
            )));
        }
        let d = &self.nodes[x].data;
        let mut mx = F::neg_infinity();
        for (v, &keep) in d.iter().zip(mask.iter()) {
            if keep && *v > mx {
                mx = *v;
            }
        }
        let mut sum_all = F::zero();
        for (v, &keep) in d.iter().zip(mask.iter()) {
            if keep {
                sum_all = sum_all + (*v - mx).exp();
            }
        }
        let mut sum_g = F::zero();
        for &i in group {
            sum_g = sum_g + (d[i] - mx).exp();
        }
        let lse_all = mx + sum_all.ln();
        let lse_group = mx + sum_g.ln();
        let out = lse_group - lse_all;
        let rg = self.requires(x);
        Ok(self.push(
            vec![out],
            vec![1],
            rg,
            Op::LogGroupProb {
                x,
                mask: mask.to_vec(),
                group: group.to_vec(),
                lse_group,
                lse_all,
            },
        ))
    }

    /// Sum of the entries of `x` at `indices` (a plain gather when one index).
    pub fn gather_sum(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let n = numel(self.shape(x));
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather indices {indices:?} out of range for length {n}"
            )));
        }
        let d = &self.nodes[x].data;
        let mut acc = F::zero();
        for &i in indices {
            acc = acc + d[i];
        }
        let rg = self.requires(x);
        Ok(self.push(
            vec![acc],
            vec![1],
            rg,
            Op::GatherSum {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut acc = F::zero();
        for v in &self.nodes[x].data {
            acc = acc + *v;
        }
        let rg = self.requires(x);
        self.push(vec![acc], vec![1], rg, Op::Sum { x })
    }

    pub fn sum_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let mut acc = F::zero();
        for &x in xs {
            if numel(self.shape(x)) != 1 {
                return Err(Error::Shape {
                    op: "sum_scalars",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![1],
                });
            }
            acc = acc + self.nodes[x].data[0];
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(vec![acc], vec![1], rg, Op::SumScalars { xs: xs.to_vec() }))
    }

    /// ln(max(x, floor)) elementwise; gradient is zero below the floor.
    pub fn log_floor(&mut self, x: TensorId, floor: F) -> TensorId {
        let data = self.nodes[x]
            .data
            .iter()
            .map(|v| if *v > floor { v.ln() } else { floor.ln() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::LogFloor { x, floor })
    }

    /// Reverse sweep from a scalar loss. Fills node gradients (readable via
    /// [`Graph::grad`]) and returns accumulated parameter gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<GradSink<F>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![F::one()]);
        let mut sink = GradSink::new(self.store.len());

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads, &mut sink);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(sink)
    }

    fn propagate(
        &self,
        id: TensorId,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        sink: &mut GradSink<F>,
    ) {
        fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], t: TensorId, n: usize) -> &mut Vec<F> {
            grads[t].get_or_insert_with(|| vec![F::zero(); n])
        }
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                let slot = sink.dense[*pid].get_or_insert_with(|| vec![F::zero(); g.len()]);
                for (a, b) in slot.iter_mut().zip(g.iter()) {
                    *a = *a + *b;
                }
            }
            Op::EmbedRow { table, row } => {
                let slot = sink.rows[*table]
                    .entry(*row)
                    .or_insert_with(|| vec![F::zero(); g.len()]);
                for (a, b) in slot.iter_mut().zip(g.iter()) {
                    *a = *a + *b;
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.requires(*a) {
                    let db = &self.nodes[*b].data;
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                }
                if self.requires(*b) {
                    let da = &self.nodes[*a].data;
                    let gb = acc(grads, *b, k * n);
                    for p in 0..k {
                        for i in 0..m {
                            let aip = da[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Matvec { m, v } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                if self.requires(*m) {
                    let dv = &self.nodes[*v].data;
                    let gm = acc(grads, *m, r * c);
                    for i in 0..r {
                        let gi = g[i];
                        for p in 0..c {
                            gm[i * c + p] = gm[i * c + p] + gi * dv[p];
                        }
                    }
                }
                if self.requires(*v) {
                    let dm = &self.nodes[*m].data;
                    let gv = acc(grads, *v, c);
                    for i in 0..r {
                        let gi = g[i];
                        let row = &dm[i * c..(i + 1) * c];
                        for (gvp, a) in gv.iter_mut().zip(row.iter()) {
                            *gvp = *gvp + *a * gi;
                        }
                    }
                }
            }
            Op::TMatvec { m, v } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                if self.requires(*m) {
                    let dv = &self.nodes[*v].data;
                    let gm = acc(grads, *m, r * c);
                    for i in 0..r {
                        let wi = dv[i];
                        for p in 0..c {
                            gm[i * c + p] = gm[i * c + p] + wi * g[p];
                        }
                    }
                }
                if self.requires(*v) {
                    let dm = &self.nodes[*m].data;
                    let gv = acc(grads, *v, r);
                    for i in 0..r {
                        let row = &dm[i * c..(i + 1) * c];
                        let mut s = F::zero();
                        for (a, gp) in row.iter().zip(g.iter()) {
                            s = s + *a * *gp;
                        }
                        gv[i] = gv[i] + s;
                    }
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    if self.requires(t) {
                        let gt = acc(grads, t, g.len());
                        for (x, y) in gt.iter_mut().zip(g.iter()) {
                            *x = *x + *y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let db = self.nodes[*b].data.clone();
                    let ga = acc(grads, *a, g.len());
                    for ((x, y), z) in ga.iter_mut().zip(g.iter()).zip(db.iter()) {
                        *x = *x + *y * *z;
                    }
                }
                if self.requires(*b) {
                    let da = self.nodes[*a].data.clone();
                    let gb = acc(grads, *b, g.len());
                    for ((x, y), z) in gb.iter_mut().zip(g.iter()).zip(da.iter()) {
                        *x = *x + *y * *z;
                    }
                }
            }
            Op::ScaleShift { x, scale } => {
                if self.requires(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (a, b) in gx.iter_mut().zip(g.iter()) {
                        *a = *a + *scale * *b;
                    }
                }
            }
            Op::AddBiasRows { m, b } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                if self.requires(*m) {
                    let gm = acc(grads, *m, r * c);
                    for (x, y) in gm.iter_mut().zip(g.iter()) {
                        *x = *x + *y;
                    }
                }
                if self.requires(*b) {
                    let gb = acc(grads, *b, c);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + g[i * c + j];
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if self.requires(*x) {
                    let y = node.data.clone();
                    let gx = acc(grads, *x, g.len());
                    for ((a, b), yv) in gx.iter_mut().zip(g.iter()).zip(y.iter()) {
                        *a = *a + *b * (F::one() - *yv * *yv);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let y = node.data.clone();
                    let gx = acc(grads, *x, g.len());
                    for ((a, b), yv) in gx.iter_mut().zip(g.iter()).zip(y.iter()) {
                        *a = *a + *b * *yv * (F::one() - *yv);
                    }
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let inp = self.nodes[*x].data.clone();
                    let gx = acc(grads, *x, g.len());
                    for ((a, b), xv) in gx.iter_mut().zip(g.iter()).zip(inp.iter()) {
                        if *xv > F::zero() {
                            *a = *a + *b;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].data.len();
                    if self.requires(p) {
                        let gp = acc(grads, p, n);
                        for (a, b) in gp.iter_mut().zip(g[off..off + n].iter()) {
                            *a = *a + *b;
                        }
                    }
                    off += n;
                }
            }
            Op::StackRows { rows } => {
                let c = self.nodes[rows[0]].data.len();
                for (i, &rid) in rows.iter().enumerate() {
                    if self.requires(rid) {
                        let gr = acc(grads, rid, c);
                        for (a, b) in gr.iter_mut().zip(g[i * c..(i + 1) * c].iter()) {
                            *a = *a + *b;
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                if self.requires(*x) {
                    let y = node.data.clone();
                    let mut dot = F::zero();
                    for ((yv, gv), &keep) in y.iter().zip(g.iter()).zip(mask.iter()) {
                        if keep {
                            dot = dot + *yv * *gv;
                        }
                    }
                    let gx = acc(grads, *x, g.len());
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            gx[i] = gx[i] + y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LogGroupProb {
                x,
                mask,
                group,
                lse_group,
                lse_all,
            } => {
                if self.requires(*x) {
                    let go = g[0];
                    let d = self.nodes[*x].data.clone();
                    let in_group = {
                        let mut v = vec![false; d.len()];
                        for &i in group {
                            v[i] = true;
                        }
                        v
                    };
                    let gx = acc(grads, *x, d.len());
                    for i in 0..d.len() {
                        if !mask[i] {
                            continue;
                        }
                        let p_all = (d[i] - *lse_all).exp();
                        let p_in = if in_group[i] {
                            (d[i] - *lse_group).exp()
                        } else {
                            F::zero()
                        };
                        gx[i] = gx[i] + go * (p_in - p_all);
                    }
                }
            }
            Op::GatherSum { x, indices } => {
                if self.requires(*x) {
                    let n = self.nodes[*x].data.len();
                    let gx = acc(grads, *x, n);
                    for &i in indices {
                        gx[i] = gx[i] + g[0];
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let n = self.nodes[*x].data.len();
                    let gx = acc(grads, *x, n);
                    for a in gx.iter_mut() {
                        *a = *a + g[0];
                    }
                }
            }
            Op::SumScalars { xs } => {
                for &x in xs {
                    if self.requires(x) {
                        let gx = acc(grads, x, 1);
                        gx[0] = gx[0] + g[0];
                    }
                }
            }
            Op::LogFloor { x, floor } => {
                if self.requires(*x) {
                    let inp = self.nodes[*x].data.clone();
                    let gx = acc(grads, *x, g.len());
                    for ((a, b), xv) in gx.iter_mut().zip(g.iter()).zip(inp.iter()) {
                        if *xv > *floor {
                            *a = *a + *b / *xv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn matmul_identity() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let i2 = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let a = g.constant(&[1, 1], vec![2.0]);
        let b = g.constant(&[1, 1], vec![3.0]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent brute-force product, elementwise within 1e-12.
        let mut rng = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let store = empty_store();
        let mut g = Graph::new(&store);
        let ta = g.constant(&[m, k], a);
        let tb = g.constant(&[k, n], b);
        let y = g.matmul(ta, tb).unwrap();
        for (got, want) in g.value(y).iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let a = g.constant(&[2, 3], vec![0.0; 6]);
        let b = g.constant(&[2, 2], vec![0.0; 4]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_values() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(&[3], vec![0.0, -1.0, 0.0]);
        let t = g.tanh(x);
        let r = g.relu(x);
        let s = g.sigmoid(x);
        assert_eq!(g.value(t)[0], 0.0);
        assert_eq!(g.value(r)[1], 0.0);
        assert_eq!(g.value(s)[2], 0.5);
    }

    #[test]
    fn tanh_gradient_matches_central_difference() {
        let store = empty_store();
        let x0 = 0.3f64;
        let h = 1e-6;
        let mut g = Graph::new(&store);
        let x = g.leaf(&[1], vec![x0], true);
        let y = g.tanh(x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap()[0];
        let fd = ((x0 + h).tanh() - (x0 - h).tanh()) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-7, "rel err {rel}");
    }

    #[test]
    fn masked_softmax_uniform_and_single() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(&[3], vec![0.0, 0.0, 0.0]);
        let y = g.masked_softmax(x, &[true, true, true]).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x2 = g.constant(&[2], vec![5.0, 9.0]);
        let y2 = g.masked_softmax(x2, &[true, false]).unwrap();
        assert_eq!(g.value(y2), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_analytic_two_thirds() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(&[2], vec![0.0, 2.0f64.ln()]);
        let y = g.masked_softmax(x, &[true, true]).unwrap();
        assert!((g.value(y)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(&[2], vec![0.0, 1.0]);
        assert!(matches!(
            g.masked_softmax(x, &[false, false]),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn masked_softmax_extreme_logits_sum_to_one() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(&[4], vec![1e4, -1e4, 9.9e3, 0.0]);
        let y = g.masked_softmax(x, &[true, true, true, true]).unwrap();
        let total: f64 = g.value(y).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.leaf(&[2], vec![1.0, 2.0], true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.leaf(&[2], vec![1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", &[3, 3], (0..9).map(|i| 0.1 * i as f64 - 0.4).collect())
            .unwrap();
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let wt = g.param(w);
            let x = g.constant(&[3], vec![0.3, -0.2, 0.9]);
            let y = g.matvec(wt, x).unwrap();
            let t = g.tanh(y);
            let sm = g.masked_softmax(t, &[true, true, true]).unwrap();
            let loss = g.sum(sm);
            let sink = g.backward(loss).unwrap();
            sink.param_grad(store, w)
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(&store), run(&store));
    }

    #[test]
    fn log_group_prob_matches_direct_log() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(&[3], vec![0.5, -1.0, 2.0]);
        let lp = g.log_group_prob(x, &[true, true, true], &[1, 2]).unwrap();
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        let expect = (((-1.0f64).exp() + 2.0f64.exp()) / z).ln();
        assert!((g.scalar(lp) - expect).abs() < 1e-12);
    }

    #[test]
    fn param_used_twice_accumulates_once_per_use() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", &[1], vec![3.0]).unwrap();
        let mut g = Graph::new(&store);
        let wt = g.param(w);
        let sq = g.mul(wt, wt).unwrap(); // w^2, d/dw = 2w
        let loss = g.sum(sq);
        let sink = g.backward(loss).unwrap();
        assert_eq!(sink.param_grad(&store, w), vec![6.0]);
    }

    /// Central finite differences over a little composed graph, exercising
    /// most op gradients at once.
    fn composed_loss(store: &ParamStore<f64>) -> f64 {
        let mut g = Graph::new(store);
        let w = g.param(0);
        let b = g.param(1);
        let emb = g.embed_row(2, 1).unwrap();
        let x = g.constant(&[4], vec![0.2, -0.7, 0.4, 0.1]);
        let cat = g.concat(&[emb, x]).unwrap(); // [6]
        let h = g.matvec(w, cat).unwrap(); // [5]
        let hb = g.add(h, b).unwrap();
        let t = g.tanh(hb);
        let s = g.sigmoid(t);
        let r = g.relu(s);
        let m = g.stack_rows(&[t, s, r]).unwrap(); // [3,5]
        let mb = g.add_bias_rows(m, b).unwrap();
        let v = g.constant(&[5], vec![0.3, 0.1, -0.2, 0.4, 0.05]);
        let scores = g.matvec(mb, v).unwrap(); // [3]
        let att = g.masked_softmax(scores, &[true, true, false]).unwrap();
        let ctx = g.tmatvec(mb, att).unwrap(); // [5]
        let lgp = g
            .log_group_prob(scores, &[true, true, true], &[0])
            .unwrap();
        let gth = g.gather_sum(ctx, &[0, 2, 2]).unwrap();
        let sc = g.scale_shift(gth, 0.5, 0.1);
        let sig = g.sigmoid(sc);
        let lf = g.log_floor(sig, 1e-12);
        let parts = g.sum_scalars(&[lgp, lf]).unwrap();
        let total = g.sum(parts);
        g.scalar(total)
    }

    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut seed = 42u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 0.6 - 0.3
        };
        store
            .add("w", &[5, 6], (0..30).map(|_| next()).collect())
            .unwrap();
        store.add("b", &[5], (0..5).map(|_| next()).collect()).unwrap();
        store
            .add("emb", &[3, 2], (0..6).map(|_| next()).collect())
            .unwrap();

        // analytic
        let sink = {
            let mut g = Graph::new(&store);
            let w = g.param(0);
            let b = g.param(1);
            let emb = g.embed_row(2, 1).unwrap();
            let x = g.constant(&[4], vec![0.2, -0.7, 0.4, 0.1]);
            let cat = g.concat(&[emb, x]).unwrap();
            let h = g.matvec(w, cat).unwrap();
            let hb = g.add(h, b).unwrap();
            let t = g.tanh(hb);
            let s = g.sigmoid(t);
            let r = g.relu(s);
            let m = g.stack_rows(&[t, s, r]).unwrap();
            let mb = g.add_bias_rows(m, b).unwrap();
            let v = g.constant(&[5], vec![0.3, 0.1, -0.2, 0.4, 0.05]);
            let scores = g.matvec(mb, v).unwrap();
            let att = g.masked_softmax(scores, &[true, true, false]).unwrap();
            let ctx = g.tmatvec(mb, att).unwrap();
            let lgp = g
                .log_group_prob(scores, &[true, true, true], &[0])
                .unwrap();
            let gth = g.gather_sum(ctx, &[0, 2, 2]).unwrap();
            let sc = g.scale_shift(gth, 0.5, 0.1);
            let sig = g.sigmoid(sc);
            let lf = g.log_floor(sig, 1e-12);
            let parts = g.sum_scalars(&[lgp, lf]).unwrap();
            let total = g.sum(parts);
            g.backward(total).unwrap()
        };

        let h = 1e-5;
        for pid in 0..store.len() {
            let analytic = sink.param_grad(&store, pid);
            for i in 0..store.value(pid).len() {
                let orig = store.value(pid)[i];
                store.value_mut(pid)[i] = orig + h;
                let up = composed_loss(&store);
                store.value_mut(pid)[i] = orig - h;
                let down = composed_loss(&store);
                store.value_mut(pid)[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
                assert!(
                    rel < 1e-4,
                    "param {} elem {i}: analytic {} fd {} rel {rel}",
                    store.name(pid),
                    analytic[i],
                    fd
                );
            }
        }
    }
}
