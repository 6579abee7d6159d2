//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns an append-only arena of nodes; a [`DiffTensor`] is a cheap
//! handle into that arena. Recording order is the topological order, so the
//! backward pass is a single reverse sweep. Values are stored as 32-bit
//! floats; reductions to scalars accumulate in 64 bits. Tensors are never
//! mutated once recorded, and a tape is confined to one thread (independent
//! tapes may run in parallel).
//!
//! Gradients accumulate across repeated [`Tape::backward`] calls until
//! [`Tape::clear_grads`] is invoked.

pub mod kernels;

use crate::{Error, Result};
use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone)]
pub struct DiffTensor {
    tape_id: u64,
    id: usize,
    shape: Vec<usize>,
}

impl DiffTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Arena index on the owning tape.
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Neg(usize),
    Relu(usize),
    Exp(usize),
    /// a[m,k] · b[k,n]
    Matmul(usize, usize),
    /// a[m,k] · b[p,k]ᵀ
    MatmulNt(usize, usize),
    Transpose(usize),
    Softmax { input: usize, inv_temp: f32 },
    RmsnormRows { input: usize, eps: f32 },
    /// a[n,d] + row[1,d] broadcast over rows
    AddRow { a: usize, row: usize },
    /// out[i] = table[indices[i]] row lookup
    EmbedRows { table: usize, indices: Vec<usize> },
    SelectRow { input: usize, row: usize },
    MeanRows { input: usize, rows: Vec<usize> },
    /// out[i] = input[map[i]]
    Gather { input: usize, map: Vec<usize> },
    Reshape(usize),
    /// Σ wᵢ·aᵢ with constant weights, 64-bit accumulation
    WeightedSum { input: usize, weights: Vec<f32> },
    Sum(usize),
}

struct Node {
    values: Vec<f32>,
    shape: Vec<usize>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

/// Recording of primitive operations; owns all tensor storage.
pub struct Tape {
    tape_id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tape_id: NEXT_STAMP.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Differentiable input tensor.
    pub fn leaf(&self, values: Vec<f32>, shape: &[usize]) -> Result<DiffTensor> {
        self.push_leaf(values, shape, true)
    }

    /// Non-differentiable input: excluded from the backward sweep. Used for
    /// fixed parameters during inference.
    pub fn constant(&self, values: Vec<f32>, shape: &[usize]) -> Result<DiffTensor> {
        self.push_leaf(values, shape, false)
    }

    fn push_leaf(&self, values: Vec<f32>, shape: &[usize], needs_grad: bool) -> Result<DiffTensor> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::shape(
                "leaf",
                format!("got {} values for shape {:?}", values.len(), shape),
            ));
        }
        Ok(self.push(values, shape.to_vec(), needs_grad, Op::Leaf))
    }

    fn push(&self, values: Vec<f32>, shape: Vec<usize>, needs_grad: bool, op: Op) -> DiffTensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { values, shape: shape.clone(), grad: None, needs_grad, op });
        DiffTensor { tape_id: self.tape_id, id, shape }
    }

    fn check_owned(&self, t: &DiffTensor, op: &'static str) -> Result<()> {
        if t.tape_id != self.tape_id {
            return Err(Error::Usage(format!(
                "{op}: tensor belongs to tape {} but was used on tape {}",
                t.tape_id, self.tape_id
            )));
        }
        Ok(())
    }

    /// Copy of a tensor's values.
    pub fn values(&self, t: &DiffTensor) -> Vec<f32> {
        self.nodes.borrow()[t.id].values.clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, t: &DiffTensor) -> f32 {
        debug_assert!(t.is_scalar());
        self.nodes.borrow()[t.id].values[0]
    }

    /// Copy of a tensor's accumulated gradient, if any backward pass reached it.
    pub fn grad(&self, t: &DiffTensor) -> Option<Vec<f32>> {
        self.nodes.borrow()[t.id].grad.clone()
    }

    pub fn clear_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }


    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    /// Broadcast rule shared by add/sub/mul: shapes must match exactly, or one
    /// operand must be a single-element scalar.
    fn binary(
        &self,
        name: &'static str,
        a: &DiffTensor,
        b: &DiffTensor,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<DiffTensor> {
        self.check_owned(a, name)?;
        self.check_owned(b, name)?;
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.id].values, &nodes[b.id].values);
        let (values, shape) = if a.shape == b.shape {
            (av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(), a.shape.clone())
        } else if b.is_scalar() {
            let s = bv[0];
            (av.iter().map(|&x| f(x, s)).collect(), a.shape.clone())
        } else if a.is_scalar() {
            let s = av[0];
            (bv.iter().map(|&y| f(s, y)).collect(), b.shape.clone())
        } else {
            return Err(Error::shape(
                name,
                format!("incompatible shapes {:?} vs {:?}", a.shape, b.shape),
            ));
        };
        let needs = nodes[a.id].needs_grad || nodes[b.id].needs_grad;
        drop(nodes);
        Ok(self.push(values, shape, needs, op))
    }

    pub fn scale(&self, a: &DiffTensor, c: f32) -> Result<DiffTensor> {
        self.check_owned(a, "scale")?;
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[a.id].values.iter().map(|&x| x * c).collect(), nodes[a.id].needs_grad)
        };
        Ok(self.push(values, a.shape.clone(), needs, Op::Scale(a.id, c)))
    }

    pub fn neg(&self, a: &DiffTensor) -> Result<DiffTensor> {
        self.unary("neg", a, |x| -x, Op::Neg(a.id))
    }

    pub fn relu(&self, a: &DiffTensor) -> Result<DiffTensor> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn exp(&self, a: &DiffTensor) -> Result<DiffTensor> {
        self.unary("exp", a, f32::exp, Op::Exp(a.id))
    }

    fn unary(
        &self,
        name: &'static str,
        a: &DiffTensor,
        f: impl Fn(f32) -> f32,
        op: Op,
    ) -> Result<DiffTensor> {
        self.check_owned(a, name)?;
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[a.id].values.iter().map(|&x| f(x)).collect(), nodes[a.id].needs_grad)
        };
        Ok(self.push(values, a.shape.clone(), needs, op))
    }

    // ---- linear algebra --------------------------------------------------

    fn mat_dims(t: &DiffTensor, op: &'static str) -> Result<(usize, usize)> {
        match t.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected matrix, got shape {:?}", t.shape))),
        }
    }

    /// a[m,k] · b[k,n]
    pub fn matmul(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.check_owned(a, "matmul")?;
        self.check_owned(b, "matmul")?;
        let (m, k) = Self::mat_dims(a, "matmul")?;
        let (k2, n) = Self::mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let mut out = vec![0.0f32; m * n];
            kernels::matmul_nn(&nodes[a.id].values, &nodes[b.id].values, &mut out, m, k, n);
            (out, nodes[a.id].needs_grad || nodes[b.id].needs_grad)
        };
        Ok(self.push(values, vec![m, n], needs, Op::Matmul(a.id, b.id)))
    }

    /// a[m,k] · b[p,k]ᵀ — attention scores between row sets.
    pub fn matmul_nt(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.check_owned(a, "matmul_nt")?;
        self.check_owned(b, "matmul_nt")?;
        let (m, k) = Self::mat_dims(a, "matmul_nt")?;
        let (p, k2) = Self::mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner dimensions differ: {:?} vs {:?}ᵀ", a.shape, b.shape),
            ));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let mut out = vec![0.0f32; m * p];
            kernels::matmul_nt(&nodes[a.id].values, &nodes[b.id].values, &mut out, m, k, p);
            (out, nodes[a.id].needs_grad || nodes[b.id].needs_grad)
        };
        Ok(self.push(values, vec![m, p], needs, Op::MatmulNt(a.id, b.id)))
    }

    pub fn transpose(&self, a: &DiffTensor) -> Result<DiffTensor> {
        self.check_owned(a, "transpose")?;
        let (r, c) = Self::mat_dims(a, "transpose")?;
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].values;
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = av[i * c + j];
                }
            }
            (out, nodes[a.id].needs_grad)
        };
        Ok(self.push(values, vec![c, r], needs, Op::Transpose(a.id)))
    }

    // ---- structured ops ---------------------------------------------------

    /// Row-wise softmax with max-subtraction; rows sum to 1.
    pub fn softmax_rows(&self, a: &DiffTensor, temperature: f32) -> Result<DiffTensor> {
        self.check_owned(a, "softmax_rows")?;
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::Validation(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (r, c) = Self::mat_dims(a, "softmax_rows")?;
        let inv_temp = 1.0 / temperature;
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].values;
            if av.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("softmax_rows", "non-finite input"));
            }
            let mut out = av.clone();
            for row in out.chunks_mut(c) {
                kernels::softmax_row_inplace(row, inv_temp);
            }
            (out, nodes[a.id].needs_grad)
        };
        Ok(self.push(values, vec![r, c], needs, Op::Softmax { input: a.id, inv_temp }))
    }

    /// Row-wise RMS normalization (no learnable gain).
    pub fn rmsnorm_rows(&self, a: &DiffTensor) -> Result<DiffTensor> {
        const EPS: f32 = 1e-6;
        self.check_owned(a, "rmsnorm_rows")?;
        let (r, c) = Self::mat_dims(a, "rmsnorm_rows")?;
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].values;
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                let row = &av[i * c..(i + 1) * c];
                let ss: f64 = row.iter().map(|&x| x as f64 * x as f64).sum();
                let inv_rms = (1.0 / (ss / c as f64 + EPS as f64).sqrt()) as f32;
                for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = x * inv_rms;
                }
            }
            (out, nodes[a.id].needs_grad)
        };
        Ok(self.push(values, vec![r, c], needs, Op::RmsnormRows { input: a.id, eps: EPS }))
    }

    /// a[n,d] + row[1,d], broadcasting the row over all n rows.
    pub fn add_row(&self, a: &DiffTensor, row: &DiffTensor) -> Result<DiffTensor> {
        self.check_owned(a, "add_row")?;
        self.check_owned(row, "add_row")?;
        let (n, d) = Self::mat_dims(a, "add_row")?;
        if row.shape != [1, d] {
            return Err(Error::shape(
                "add_row",
                format!("row shape {:?} does not match [1, {d}]", row.shape),
            ));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].values;
            let rv = &nodes[row.id].values;
            let mut out = vec![0.0f32; n * d];
            for i in 0..n {
                for j in 0..d {
                    out[i * d + j] = av[i * d + j] + rv[j];
                }
            }
            (out, nodes[a.id].needs_grad || nodes[row.id].needs_grad)
        };
        Ok(self.push(values, vec![n, d], needs, Op::AddRow { a: a.id, row: row.id }))
    }

    /// Row lookup: out[i,:] = table[indices[i],:].
    pub fn embed_rows(&self, table: &DiffTensor, indices: &[usize]) -> Result<DiffTensor> {
        self.check_owned(table, "embed_rows")?;
        let (v, d) = Self::mat_dims(table, "embed_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Validation(format!(
                "embed_rows index {bad} out of range for table with {v} rows"
            )));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[table.id].values;
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                out.extend_from_slice(&tv[i * d..(i + 1) * d]);
            }
            (out, nodes[table.id].needs_grad)
        };
        Ok(self.push(
            values,
            vec![indices.len(), d],
            needs,
            Op::EmbedRows { table: table.id, indices: indices.to_vec() },
        ))
    }

    pub fn select_row(&self, a: &DiffTensor, row: usize) -> Result<DiffTensor> {
        self.check_owned(a, "select_row")?;
        let (r, c) = Self::mat_dims(a, "select_row")?;
        if row >= r {
            return Err(Error::Validation(format!(
                "select_row index {row} out of range for {r} rows"
            )));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[a.id].values[row * c..(row + 1) * c].to_vec(), nodes[a.id].needs_grad)
        };
        Ok(self.push(values, vec![1, c], needs, Op::SelectRow { input: a.id, row }))
    }

    /// Elementwise mean of the selected rows.
    pub fn mean_rows(&self, a: &DiffTensor, rows: &[usize]) -> Result<DiffTensor> {
        self.check_owned(a, "mean_rows")?;
        let (r, c) = Self::mat_dims(a, "mean_rows")?;
        if rows.is_empty() {
            return Err(Error::Validation("mean_rows: empty row selection".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Validation(format!(
                "mean_rows index {bad} out of range for {r} rows"
            )));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].values;
            let mut acc = vec![0.0f64; c];
            for &i in rows {
                for (s, &x) in acc.iter_mut().zip(&av[i * c..(i + 1) * c]) {
                    *s += x as f64;
                }
            }
            let k = rows.len() as f64;
            let out: Vec<f32> = acc.iter().map(|&s| (s / k) as f32).collect();
            (out, nodes[a.id].needs_grad)
        };
        Ok(self.push(values, vec![1, c], needs, Op::MeanRows { input: a.id, rows: rows.to_vec() }))
    }

    /// out[i] = a.flat[map[i]]. Backward scatter-adds, so repeated indices are
    /// fine; used for patchify/unpatchify permutations.
    pub fn gather(&self, a: &DiffTensor, map: &[usize], out_shape: &[usize]) -> Result<DiffTensor> {
        self.check_owned(a, "gather")?;
        let out_len: usize = out_shape.iter().product();
        if map.len() != out_len {
            return Err(Error::shape(
                "gather",
                format!("map length {} does not match output shape {:?}", map.len(), out_shape),
            ));
        }
        let in_len = a.len();
        if let Some(&bad) = map.iter().find(|&&i| i >= in_len) {
            return Err(Error::Validation(format!(
                "gather index {bad} out of range for {in_len} elements"
            )));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].values;
            let out: Vec<f32> = map.iter().map(|&i| av[i]).collect();
            (out, nodes[a.id].needs_grad)
        };
        Ok(self.push(values, out_shape.to_vec(), needs, Op::Gather { input: a.id, map: map.to_vec() }))
    }

    pub fn reshape(&self, a: &DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        self.check_owned(a, "reshape")?;
        let expected: usize = shape.iter().product();
        if expected != a.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", a.shape),
            ));
        }
        let (values, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[a.id].values.clone(), nodes[a.id].needs_grad)
        };
        Ok(self.push(values, shape.to_vec(), needs, Op::Reshape(a.id)))
    }

    // ---- reductions -------------------------------------------------------

    /// Scalar Σ wᵢ·aᵢ with constant weights, accumulated in 64 bits.
    pub fn weighted_sum(&self, a: &DiffTensor, weights: &[f32]) -> Result<DiffTensor> {
        self.check_owned(a, "weighted_sum")?;
        if weights.len() != a.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), a.len()),
            ));
        }
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].values;
            let s: f64 = av.iter().zip(weights).map(|(&x, &w)| x as f64 * w as f64).sum();
            (s as f32, nodes[a.id].needs_grad)
        };
        Ok(self.push(
            vec![value],
            vec![1],
            needs,
            Op::WeightedSum { input: a.id, weights: weights.to_vec() },
        ))
    }

    /// Scalar sum of all elements, accumulated in 64 bits.
    pub fn sum(&self, a: &DiffTensor) -> Result<DiffTensor> {
        self.check_owned(a, "sum")?;
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let s: f64 = nodes[a.id].values.iter().map(|&x| x as f64).sum();
            (s as f32, nodes[a.id].needs_grad)
        };
        Ok(self.push(vec![value], vec![1], needs, Op::Sum(a.id)))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root. Per-call adjoints are computed in a
    /// scratch buffer and then added onto the stored grads, so repeated calls
    /// accumulate.
    pub fn backward(&self, root: &DiffTensor) -> Result<()> {
        self.check_owned(root, "backward")?;
        if !root.is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        let mut adjoint: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        adjoint[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = adjoint[id].take() else { continue };
            propagate(&nodes, id, &g, &mut adjoint);
            match &mut nodes[id].grad {
                Some(stored) => {
                    for (s, gv) in stored.iter_mut().zip(&g) {
                        *s += gv;
                    }
                }
                None => nodes[id].grad = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(adjoint: &mut [Option<Vec<f32>>], nodes: &[Node], id: usize, delta: &[f32]) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut adjoint[id] {
        Some(buf) => {
            for (b, &d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => adjoint[id] = Some(delta.to_vec()),
    }
}

/// Accumulate for binary elementwise ops, folding broadcast scalars back down
/// with a 64-bit sum.
fn accumulate_bcast(adjoint: &mut [Option<Vec<f32>>], nodes: &[Node], id: usize, delta: &[f32]) {
    if !nodes[id].needs_grad {
        return;
    }
    if nodes[id].values.len() == 1 && delta.len() > 1 {
        let s: f64 = delta.iter().map(|&d| d as f64).sum();
        accumulate(adjoint, nodes, id, &[s as f32]);
    } else {
        accumulate(adjoint, nodes, id, delta);
    }
}

fn propagate(nodes: &[Node], out_id: usize, g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    match nodes[out_id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_bcast(adjoint, nodes, a, g);
            accumulate_bcast(adjoint, nodes, b, g);
        }
        Op::Sub(a, b) => {
            accumulate_bcast(adjoint, nodes, a, g);
            let neg: Vec<f32> = g.iter().map(|&x| -x).collect();
            accumulate_bcast(adjoint, nodes, b, &neg);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].values, &nodes[b].values);
            if nodes[a].needs_grad {
                let da: Vec<f32> = if bv.len() == 1 {
                    g.iter().map(|&gv| gv * bv[0]).collect()
                } else {
                    g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()
                };
                accumulate_bcast(adjoint, nodes, a, &da);
            }
            if nodes[b].needs_grad {
                let db: Vec<f32> = if av.len() == 1 {
                    g.iter().map(|&gv| gv * av[0]).collect()
                } else {
                    g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()
                };
                accumulate_bcast(adjoint, nodes, b, &db);
            }
        }
        Op::Scale(a, c) => {
            let da: Vec<f32> = g.iter().map(|&gv| gv * c).collect();
            accumulate(adjoint, nodes, a, &da);
        }
        Op::Neg(a) => {
            let da: Vec<f32> = g.iter().map(|&gv| -gv).collect();
            accumulate(adjoint, nodes, a, &da);
        }
        Op::Relu(a) => {
            let av = &nodes[a].values;
            let da: Vec<f32> =
                g.iter().zip(av).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect();
            accumulate(adjoint, nodes, a, &da);
        }
        Op::Exp(a) => {
            let out = &nodes[out_id].values;
            let da: Vec<f32> = g.iter().zip(out).map(|(&gv, &e)| gv * e).collect();
            accumulate(adjoint, nodes, a, &da);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if nodes[a].needs_grad {
                // dA = G · Bᵀ
                let mut da = vec![0.0f32; m * k];
                kernels::matmul_nt(g, &nodes[b].values, &mut da, m, n, k);
                accumulate(adjoint, nodes, a, &da);
            }
            if nodes[b].needs_grad {
                // dB = Aᵀ · G
                let mut db = vec![0.0f32; k * n];
                kernels::matmul_tn(&nodes[a].values, g, &mut db, m, k, n);
                accumulate(adjoint, nodes, b, &db);
            }
        }
        Op::MatmulNt(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let p = nodes[b].shape[0];
            if nodes[a].needs_grad {
                // out = A·Bᵀ, dA = G · B
                let mut da = vec![0.0f32; m * k];
                kernels::matmul_nn(g, &nodes[b].values, &mut da, m, p, k);
                accumulate(adjoint, nodes, a, &da);
            }
            if nodes[b].needs_grad {
                // dB = Gᵀ · A
                let mut db = vec![0.0f32; p * k];
                kernels::matmul_tn(g, &nodes[a].values, &mut db, m, p, k);
                accumulate(adjoint, nodes, b, &db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
            // g has shape [c, r]; transpose it back
            let mut da = vec![0.0f32; r * c];
            for i in 0..c {
                for j in 0..r {
                    da[j * c + i] = g[i * r + j];
                }
            }
            accumulate(adjoint, nodes, a, &da);
        }
        Op::Softmax { input, inv_temp } => {
            let c = nodes[input].shape[1];
            let s = &nodes[out_id].values; // softmax probabilities
            let mut da = vec![0.0f32; s.len()];
            for (row, (s_row, g_row)) in s.chunks(c).zip(g.chunks(c)).enumerate() {
                let dot: f64 =
                    s_row.iter().zip(g_row).map(|(&sv, &gv)| sv as f64 * gv as f64).sum();
                for (j, (&sv, &gv)) in s_row.iter().zip(g_row).enumerate() {
                    da[row * c + j] = sv * (gv - dot as f32) * inv_temp;
                }
            }
            accumulate(adjoint, nodes, input, &da);
        }
        Op::RmsnormRows { input, eps } => {
            let c = nodes[input].shape[1];
            let av = &nodes[input].values;
            let mut da = vec![0.0f32; av.len()];
            for (row, (x_row, g_row)) in av.chunks(c).zip(g.chunks(c)).enumerate() {
                let ss: f64 = x_row.iter().map(|&x| x as f64 * x as f64).sum();
                let inv_rms = 1.0 / (ss / c as f64 + eps as f64).sqrt();
                let dot: f64 = x_row
                    .iter()
                    .zip(g_row)
                    .map(|(&x, &gv)| x as f64 * inv_rms * gv as f64)
                    .sum();
                let mean_dot = dot / c as f64;
                for (j, (&x, &gv)) in x_row.iter().zip(g_row).enumerate() {
                    let y = x as f64 * inv_rms;
                    da[row * c + j] = ((gv as f64 - y * mean_dot) * inv_rms) as f32;
                }
            }
            accumulate(adjoint, nodes, input, &da);
        }
        Op::AddRow { a, row } => {
            accumulate(adjoint, nodes, a, g);
            if nodes[row].needs_grad {
                let d = nodes[row].values.len();
                let mut dr = vec![0.0f64; d];
                for chunk in g.chunks(d) {
                    for (s, &gv) in dr.iter_mut().zip(chunk) {
                        *s += gv as f64;
                    }
                }
                let dr32: Vec<f32> = dr.iter().map(|&x| x as f32).collect();
                accumulate(adjoint, nodes, row, &dr32);
            }
        }
        Op::EmbedRows { table, ref indices } => {
            if nodes[table].needs_grad {
                let d = nodes[table].shape[1];
                let mut dt = vec![0.0f32; nodes[table].values.len()];
                for (slot, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[slot * d + j];
                    }
                }
                accumulate(adjoint, nodes, table, &dt);
            }
        }
        Op::SelectRow { input, row } => {
            let c = nodes[input].shape[1];
            let mut da = vec![0.0f32; nodes[input].values.len()];
            da[row * c..(row + 1) * c].copy_from_slice(g);
            accumulate(adjoint, nodes, input, &da);
        }
        Op::MeanRows { input, ref rows } => {
            let c = nodes[input].shape[1];
            let mut da = vec![0.0f32; nodes[input].values.len()];
            let inv_k = 1.0 / rows.len() as f32;
            for &idx in rows {
                for (slot, &gv) in g.iter().enumerate() {
                    da[idx * c + slot] += gv * inv_k;
                }
            }
            accumulate(adjoint, nodes, input, &da);
        }
        Op::Gather { input, ref map } => {
            let mut da = vec![0.0f32; nodes[input].values.len()];
            for (slot, &idx) in map.iter().enumerate() {
                da[idx] += g[slot];
            }
            accumulate(adjoint, nodes, input, &da);
        }
        Op::Reshape(a) => {
            accumulate(adjoint, nodes, a, g);
        }
        Op::WeightedSum { input, ref weights } => {
            let g0 = g[0];
            let da: Vec<f32> = weights.iter().map(|&w| w * g0).collect();
            accumulate(adjoint, nodes, input, &da);
        }
        Op::Sum(a) => {
            let da = vec![g[0]; nodes[a].values.len()];
            accumulate(adjoint, nodes, a, &da);
        }
    }
}
