//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are appended to a [`Tape`] as they are evaluated, so node order
//! is always a topological order. [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into a [`Gradients`] table indexed by
//! [`Var`]. Contributions are added in a fixed order, which makes gradients
//! bit-identical across runs of the same tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, shape_err, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let (c, k) = gelu_consts::<T>();
                let half = T::from_f64(0.5);
                half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let (c, k) = gelu_consts::<T>();
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let th = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// tanh approximation of GELU
fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64(0.044_715),
    )
}

/// The primitive operations a tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `a[m×k] · b[k×n]`
    MatMul,
    /// `a[m×k] · b[n×k]ᵀ`
    MatMulNt,
    /// Elementwise sum of equal shapes.
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    /// `x[m×n] + b[n]`, the bias broadcast over the leading axis.
    BiasAdd,
    /// Multiply by a constant.
    Scale(f64),
    Activation(Activation),
    /// Sum of all elements, producing a scalar.
    Sum,
    /// Rows of a `[V×d]` table selected by index.
    Gather(Vec<usize>),
    /// Mean over consecutive row segments of the given lengths: `[Σlen×d] → [segments×d]`.
    SegmentMean(Vec<usize>),
    /// Mean softmax cross-entropy of `[B×C]` logits against labels; scalar result.
    SoftmaxCrossEntropy(Vec<usize>),
}

impl OpKind {
    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::MatMulNt | OpKind::Add | OpKind::Mul | OpKind::BiasAdd => 2,
            _ => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::BiasAdd => "bias_add",
            OpKind::Scale(_) => "scale",
            OpKind::Activation(_) => "activation",
            OpKind::Sum => "sum",
            OpKind::Gather(_) => "gather",
            OpKind::SegmentMean(_) => "segment_mean",
            OpKind::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
        }
    }
}

struct Node<T> {
    op: Option<OpKind>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    // Cached softmax-CE gradient; avoids recomputing the softmax on backward.
    aux: Option<Tensor<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar {
                id: v.0,
                len: self.nodes.len(),
            })
    }

    /// Evaluates `op` on `inputs` and records it.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        for &v in inputs {
            self.value(v)?;
        }
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|v| &self.nodes[v.0].value);
        let mut aux = None;
        let value = match (&op, b) {
            (OpKind::MatMul, Some(b)) => tensor::matmul(a, b)?,
            (OpKind::MatMulNt, Some(b)) => tensor::matmul_nt(a, b)?,
            (OpKind::Add, Some(b)) => zip_same(a, b, "add", |x, y| x + y)?,
            (OpKind::Mul, Some(b)) => zip_same(a, b, "mul", |x, y| x * y)?,
            (OpKind::BiasAdd, Some(b)) => bias_add(a, b)?,
            (OpKind::Scale(c), None) => {
                let c = T::from_f64(*c);
                a.map(|x| x * c)
            }
            (OpKind::Activation(act), None) => a.map(|x| act.apply(x)),
            (OpKind::Sum, None) => {
                Tensor::scalar(a.data().iter().fold(T::zero(), |acc, &x| acc + x))
            }
            (OpKind::Gather(ids), None) => gather(a, ids)?,
            (OpKind::SegmentMean(lens), None) => segment_mean(a, lens)?,
            (OpKind::SoftmaxCrossEntropy(labels), None) => {
                let (loss, grad) = tensor::softmax_cross_entropy(a, labels)?;
                aux = Some(grad);
                Tensor::scalar(loss)
            }
            _ => unreachable!("arity checked above"),
        };
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMulNt, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::BiasAdd, &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        self.apply(OpKind::Activation(act), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Gather(ids), &[table])
    }

    pub fn segment_mean(&mut self, x: Var, lens: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::SegmentMean(lens), &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::SoftmaxCrossEntropy(labels), &[logits])
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.value(loss)?;
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(root.shape().to_vec(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let contributions = self.local_grads(node, op, &g)?;
                for (input, contrib) in node.inputs.iter().zip(contributions) {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&contrib)?,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, node: &Node<T>, op: &OpKind, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        Ok(match op {
            OpKind::MatMul => vec![
                tensor::matmul_nt(g, input(1))?,
                tensor::matmul_tn(input(0), g)?,
            ],
            OpKind::MatMulNt => vec![
                tensor::matmul(g, input(1))?,
                tensor::matmul_tn(g, input(0))?,
            ],
            OpKind::Add => vec![g.clone(), g.clone()],
            OpKind::Mul => vec![
                zip_same(g, input(1), "mul", |a, b| a * b)?,
                zip_same(g, input(0), "mul", |a, b| a * b)?,
            ],
            OpKind::BiasAdd => {
                let (m, n) = g.dims2()?;
                let mut db = vec![T::zero(); n];
                for i in 0..m {
                    for (d, &x) in db.iter_mut().zip(g.row(i)) {
                        *d = *d + x;
                    }
                }
                vec![g.clone(), Tensor::new(input(1).shape().to_vec(), db)?]
            }
            OpKind::Scale(c) => {
                let c = T::from_f64(*c);
                vec![g.map(|x| x * c)]
            }
            OpKind::Activation(act) => {
                vec![zip_same(g, input(0), "activation", |gv, x| gv * act.derivative(x))?]
            }
            OpKind::Sum => {
                let gv = g.data()[0];
                let x = input(0);
                vec![Tensor::new(x.shape().to_vec(), vec![gv; x.numel()])?]
            }
            OpKind::Gather(ids) => {
                let table = input(0);
                let mut dt = Tensor::zeros(table.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row(r);
                    for (d, &x) in dt.row_mut(id).iter_mut().zip(src) {
                        *d = *d + x;
                    }
                }
                vec![dt]
            }
            OpKind::SegmentMean(lens) => {
                let x = input(0);
                let mut dx = Tensor::zeros(x.shape());
                let mut row = 0;
                for (s, &len) in lens.iter().enumerate() {
                    let inv = T::one() / T::from_f64(len as f64);
                    for _ in 0..len {
                        for (d, &gv) in dx.row_mut(row).iter_mut().zip(g.row(s)) {
                            *d = gv * inv;
                        }
                        row += 1;
                    }
                }
                vec![dx]
            }
            OpKind::SoftmaxCrossEntropy(_) => {
                let gv = g.data()[0];
                let local = node.aux.as_ref().expect("cached on forward");
                vec![local.map(|x| x * gv)]
            }
        })
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; nodes the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        match self.grads.get(v.0) {
            Some(Some(g)) => Ok(g.clone()),
            Some(None) => Ok(Tensor::zeros(&self.shapes[v.0])),
            None => Err(Error::UnknownVar {
                id: v.0,
                len: self.grads.len(),
            }),
        }
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor<T>> {
        match self.grads.get_mut(v.0) {
            Some(slot) => Ok(slot
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))),
            None => Err(Error::UnknownVar {
                id: v.0,
                len: self.grads.len(),
            }),
        }
    }
}

fn zip_same<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn bias_add<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    if b.shape() != [n] {
        return Err(shape_err("bias_add", x.shape(), b.shape()));
    }
    let mut out = x.clone();
    for i in 0..m {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
    }
    Ok(out)
}

fn gather<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = table.dims2()?;
    if ids.is_empty() {
        return Err(Error::Empty("gather with no indices".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::InvalidArgument(format!(
                "gather index {id} out of range for {v} rows"
            )));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

fn segment_mean<T: Scalar>(x: &Tensor<T>, lens: &[usize]) -> Result<Tensor<T>> {
    let (rows, d) = x.dims2()?;
    if lens.is_empty() || lens.contains(&0) || lens.iter().sum::<usize>() != rows {
        return Err(shape_err("segment_mean", x.shape(), lens));
    }
    let mut out = Vec::with_capacity(lens.len() * d);
    let mut row = 0;
    for &len in lens {
        let mut acc = vec![T::zero(); d];
        for _ in 0..len {
            for (a, &v) in acc.iter_mut().zip(x.row(row)) {
                *a = *a + v;
            }
            row += 1;
        }
        let n = T::from_f64(len as f64);
        out.extend(acc.into_iter().map(|a| a / n));
    }
    Tensor::new(vec![lens.len(), d], out)
}
