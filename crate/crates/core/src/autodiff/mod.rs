//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation in creation order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it once in reverse.
//! Leaf gradients are *added* into [`Tensor::grad`], which makes gradient
//! accumulation across micro-batches a plain sum. Call
//! [`Tensor::zero_grad`] (or [`Tape::zero_grads`]) to reset.
//!
//! Only scalar-vs-tensor and equal-shape elementwise arithmetic is supported;
//! row-bias addition is a dedicated op rather than general broadcasting.

pub mod kernels;

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Row count and width of a matrix; a vector counts as one row.
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Gelu,
    Exp,
    Log,
}

/// One causally-masked attention segment in a packed row layout.
///
/// Rows `start..start+len` attend to every row of the `prefix` segment (if
/// any) followed by their own segment up to and including themselves. This
/// lets many completions share one prompt prefix without recomputing it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub start: usize,
    pub len: usize,
    pub prefix: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionLayout {
    pub segments: Vec<AttnSegment>,
}

impl AttentionLayout {
    pub fn push(&mut self, start: usize, len: usize, prefix: Option<usize>) -> usize {
        self.segments.push(AttnSegment { start, len, prefix });
        self.segments.len() - 1
    }

    fn validate(&self, rows: usize) -> Result<()> {
        let mut seen = vec![false; rows];
        for seg in &self.segments {
            if seg.start + seg.len > rows {
                return Err(Error::contract("attention segment exceeds row count"));
            }
            if let Some(p) = seg.prefix {
                let ps = self
                    .segments
                    .get(p)
                    .ok_or_else(|| Error::contract("attention prefix index out of range"))?;
                if ps.prefix.is_some() {
                    return Err(Error::contract("attention prefixes cannot be nested"));
                }
            }
            for s in &mut seen[seg.start..seg.start + seg.len] {
                if *s {
                    return Err(Error::contract("attention segments overlap"));
                }
                *s = true;
            }
        }
        Ok(())
    }

    fn key_rows(&self, seg: &AttnSegment, t: usize) -> impl Iterator<Item = usize> + '_ {
        let pre = seg
            .prefix
            .map(|p| {
                let ps = &self.segments[p];
                ps.start..ps.start + ps.len
            })
            .unwrap_or(0..0);
        pre.chain(seg.start..seg.start + t + 1)
    }
}

type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    AddRow(Var, Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Assemble {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
        heads: usize,
        probs: Vec<f64>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient accumulated on a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.out(vec![m, n], data, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            let d = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Ok((ta.shape.clone(), d))
        } else if tb.is_scalar() {
            let y = tb.data[0];
            Ok((ta.shape.clone(), ta.data.iter().map(|&x| f(x, y)).collect()))
        } else if ta.is_scalar() {
            let x = ta.data[0];
            Ok((tb.shape.clone(), tb.data.iter().map(|&y| f(x, y)).collect()))
        } else {
            Err(Error::Shape {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.out(s, d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.out(s, d, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.out(s, d, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let d = t.data.iter().map(|x| x * c).collect();
        let s = t.shape.clone();
        self.out(s, d, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let d = t.data.iter().map(|x| x + c).collect();
        let s = t.shape.clone();
        self.out(s, d, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.data.iter().map(|&x| kernels::gelu(x)).collect();
        let s = t.shape.clone();
        self.out(s, d, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.data.iter().map(|x| x.exp()).collect();
        let s = t.shape.clone();
        self.out(s, d, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let d = t.data.iter().map(|x| x.ln()).collect();
        let s = t.shape.clone();
        Ok(self.out(s, d, Op::Log(a), &[a]))
    }

    /// Dispatches one of the named elementwise operations.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::contract(format!(
                "{op:?} expects {arity} arguments, got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Gelu => Ok(self.gelu(args[0])),
            Elementwise::Exp => Ok(self.exp(args[0])),
            Elementwise::Log => self.log(args[0]),
        }
    }

    /// `x[m×n] + bias[n]` applied to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2("add_row")?;
        let tb = self.value(bias);
        if tb.numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.value(x).shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let b = tb.data.clone();
        let tx = self.value(x);
        let mut d = tx.data.clone();
        for row in d.chunks_exact_mut(n) {
            row.iter_mut().zip(&b).for_each(|(r, b)| *r += b);
        }
        let s = tx.shape.clone();
        Ok(self.out(s, d, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if n == 0 || t.numel() == 0 {
            return Err(Error::Shape {
                op: "log_softmax",
                lhs: t.shape.clone(),
                rhs: vec![],
            });
        }
        let d = kernels::log_softmax_rows(&t.data, n);
        let s = t.shape.clone();
        Ok(self.out(s, d, Op::LogSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(gamma).shape.clone(),
            });
        }
        let (d, stats) = kernels::layer_norm_rows(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            n,
        );
        let s = self.value(x).shape.clone();
        Ok(self.out(
            s,
            d,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Selects rows of a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("row index {bad} out of range {v}")));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.out(
            vec![idx.len(), d],
            data,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn assemble_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let mut width = None;
        for &s in sources {
            let (_, n) = self.value(s).dims2("assemble_rows")?;
            if *width.get_or_insert(n) != n {
                return Err(Error::Shape {
                    op: "assemble_rows",
                    lhs: self.value(sources[0]).shape.clone(),
                    rhs: self.value(s).shape.clone(),
                });
            }
        }
        let d = width.unwrap_or(0);
        let mut data = Vec::with_capacity(picks.len() * d);
        for &(s, r) in picks {
            let t = self
                .nodes
                .get(sources.get(s).ok_or_else(|| Error::contract("source index"))?.0)
                .map(|n| &n.value)
                .unwrap();
            if r >= t.shape[0] {
                return Err(Error::contract(format!("row {r} out of range")));
            }
            data.extend_from_slice(&t.data[r * d..(r + 1) * d]);
        }
        Ok(self.out(
            vec![picks.len(), d],
            data,
            Op::Assemble {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
            sources,
        ))
    }

    /// Multi-head scaled dot-product attention over a packed layout.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.value(q).dims2("attention")?;
        for other in [k, v] {
            if self.value(other).shape != self.value(q).shape {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: self.value(q).shape.clone(),
                    rhs: self.value(other).shape.clone(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        layout.validate(rows)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::new();
        let mut keys: Vec<&[f64]> = Vec::new();
        let mut vals: Vec<&[f64]> = Vec::new();
        let mut scratch = Vec::new();
        for seg in &layout.segments {
            for t in 0..seg.len {
                let r = seg.start + t;
                keys.clear();
                vals.clear();
                for kr in layout.key_rows(seg, t) {
                    keys.push(&kd[kr * d..(kr + 1) * d]);
                    vals.push(&vd[kr * d..(kr + 1) * d]);
                }
                scratch.resize(keys.len(), 0.0);
                for h in 0..heads {
                    let off = h * dh;
                    kernels::attend_one(
                        &qd[r * d + off..r * d + off + dh],
                        &keys,
                        &vals,
                        off,
                        dh,
                        scale,
                        &mut out[r * d + off..r * d + off + dh],
                        &mut scratch,
                    );
                    probs.extend_from_slice(&scratch);
                }
            }
        }
        Ok(self.out(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Selects flat elements of `x` into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::contract(format!("pick index {bad} out of range")));
        }
        let d = idx.iter().map(|&i| t.data[i]).collect();
        Ok(self.out(
            vec![idx.len()],
            d,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.out(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ x_i w_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: t.shape.clone(),
                rhs: vec![weights.len()],
            });
        }
        let s = kernels::dot(&t.data, &weights);
        Ok(self.out(vec![], vec![s], Op::WeightedSum { x, weights }, &[x]))
    }

    /// Records an operation whose forward value was computed by the caller.
    ///
    /// `backward` receives the input values, the output value and the output
    /// adjoint and returns one optional adjoint per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var {
        self.out(
            value.shape.clone(),
            value.data,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
        )
    }

    /// Propagates `∂loss/∂·` to every leaf that requires a gradient, adding
    /// into any gradient already present.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        if !lt.all_finite() {
            return Err(Error::Domain {
                op: "backward",
                msg: "loss is not finite".into(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if node.value.requires_grad {
                        leaf_grads.push((id, g));
                    }
                }
                op => self.propagate(op, &node.value, &g, &mut adj),
            }
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_into(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if let Some(s) = self.slot(adj, v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    /// Adjoint of a possibly-scalar operand of a binary op.
    fn add_binary(&self, adj: &mut [Option<Vec<f64>>], v: Var, out_len: usize, g: Vec<f64>) {
        if self.value(v).numel() == out_len {
            self.add_into(adj, v, g.into_iter());
        } else {
            let s: f64 = g.iter().sum();
            self.add_into(adj, v, std::iter::once(s));
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let n = out.numel();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let nn = self.value(*b).shape[1];
                if let Some(s) = self.slot(adj, *a) {
                    kernels::matmul_grad_lhs(g, self.data(*b), s, m, k, nn);
                }
                if let Some(s) = self.slot(adj, *b) {
                    kernels::matmul_grad_rhs(self.data(*a), g, s, m, k, nn);
                }
            }
            Op::Add(a, b) => {
                self.add_binary(adj, *a, n, g.to_vec());
                self.add_binary(adj, *b, n, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.add_binary(adj, *a, n, g.to_vec());
                self.add_binary(adj, *b, n, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor, i: usize| if t.numel() == 1 { t.data[0] } else { t.data[i] };
                let ga = (0..n).map(|i| g[i] * at(tb, i)).collect();
                let gb = (0..n).map(|i| g[i] * at(ta, i)).collect();
                self.add_binary(adj, *a, n, ga);
                self.add_binary(adj, *b, n, gb);
            }
            Op::Scale(a, c) => self.add_into(adj, *a, g.iter().map(|x| x * c)),
            Op::AddScalar(a) => self.add_into(adj, *a, g.iter().copied()),
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.add_into(adj, *a, g.iter().zip(x).map(|(g, &x)| g * kernels::gelu_grad(x)));
            }
            Op::Exp(a) => self.add_into(adj, *a, g.iter().zip(&out.data).map(|(g, y)| g * y)),
            Op::Log(a) => {
                let x = self.data(*a);
                self.add_into(adj, *a, g.iter().zip(x).map(|(g, x)| g / x));
            }
            Op::AddRow(x, b) => {
                self.add_into(adj, *x, g.iter().copied());
                let w = self.value(*b).numel();
                if let Some(s) = self.slot(adj, *b) {
                    for row in g.chunks_exact(w) {
                        s.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let w = out.last_dim();
                if let Some(s) = self.slot(adj, *x) {
                    for ((grow, yrow), srow) in g
                        .chunks_exact(w)
                        .zip(out.data.chunks_exact(w))
                        .zip(s.chunks_exact_mut(w))
                    {
                        let total: f64 = grow.iter().sum();
                        for j in 0..w {
                            srow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let w = out.last_dim();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let mut dgamma = vec![0.0; w];
                let mut dbeta = vec![0.0; w];
                let mut dx = vec![0.0; xd.len()];
                let mut xhat = vec![0.0; w];
                let mut dxhat = vec![0.0; w];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xd[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    for j in 0..w {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gd[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / w as f64;
                    let m2 = kernels::dot(&dxhat, &xhat) / w as f64;
                    for j in 0..w {
                        dx[r * w + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.add_into(adj, *x, dx.into_iter());
                self.add_into(adj, *gamma, dgamma.into_iter());
                self.add_into(adj, *beta, dbeta.into_iter());
            }
            Op::GatherRows { table, idx } => {
                let w = out.last_dim();
                if let Some(s) = self.slot(adj, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..w {
                            s[i * w + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::Assemble { sources, picks } => {
                let w = out.last_dim();
                for (si, &src) in sources.iter().enumerate() {
                    if let Some(s) = self.slot(adj, src) {
                        for (r, &(ps, pr)) in picks.iter().enumerate() {
                            if ps == si {
                                for j in 0..w {
                                    s[pr * w + j] += g[r * w + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, *heads, probs, g, adj),
            Op::Pick { x, idx } => {
                if let Some(s) = self.slot(adj, *x) {
                    for (gi, &i) in g.iter().zip(idx) {
                        s[i] += gi;
                    }
                }
            }
            Op::Sum(x) => self.add_into(adj, *x, std::iter::repeat(g[0])),
            Op::WeightedSum { x, weights } => {
                self.add_into(adj, *x, weights.iter().map(|w| w * g[0]))
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = backward(&vals, out, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        self.add_into(adj, v, gv.into_iter());
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).shape[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut cursor = 0;
        let mut rows = Vec::new();
        let mut ds = Vec::new();
        for seg in &layout.segments {
            for t in 0..seg.len {
                let r = seg.start + t;
                rows.clear();
                rows.extend(layout.key_rows(seg, t));
                let nk = rows.len();
                for h in 0..heads {
                    let off = h * dh;
                    let p = &probs[cursor..cursor + nk];
                    cursor += nk;
                    let gr = &g[r * d + off..r * d + off + dh];
                    ds.clear();
                    let mut acc = 0.0;
                    for (j, &kr) in rows.iter().enumerate() {
                        let dp = kernels::dot(gr, &vd[kr * d + off..kr * d + off + dh]);
                        ds.push(dp);
                        acc += p[j] * dp;
                        let dvr = &mut dv[kr * d + off..kr * d + off + dh];
                        dvr.iter_mut().zip(gr).for_each(|(a, b)| *a += p[j] * b);
                    }
                    let qr = &qd[r * d + off..r * d + off + dh];
                    for (j, &kr) in rows.iter().enumerate() {
                        let s = p[j] * (ds[j] - acc) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[r * d + off + c] += s * kd[kr * d + off + c];
                            dk[kr * d + off + c] += s * qr[c];
                        }
                    }
                }
            }
        }
        self.add_into(adj, q, dq.into_iter());
        self.add_into(adj, k, dk.into_iter());
        self.add_into(adj, v, dv.into_iter());
    }

    /// Removes and returns the gradient of a leaf, leaving it reset.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }
}

#[cfg(test)]
mod tests;
