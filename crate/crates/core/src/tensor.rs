//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! Forward operations push nodes onto a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse topological order exactly once each and accumulates
//! gradients additively into a [`GradStore`]. Shapes are validated eagerly and
//! broadcasting is limited to scalar-with-tensor ops; anything else is a
//! [`TensorError::ShapeMismatch`] at the op that caused it.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Tensor ───────────────────────────────────────────────────────────

/// Row-major dense array of f64 values. Rank 0 (empty shape) is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![v],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.values[0])
        } else {
            Err(TensorError::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f64> = self.values.iter().take(8).copied().collect();
        let ellipsis = if self.values.len() > 8 { ", ..." } else { "" };
        write!(f, "Tensor{:?}{:?}{}", self.shape, preview, ellipsis)
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) usize);

/// A recorded operation: how to push gradient from its output to its inputs.
///
/// Implementations read input values from the tape arena; the arena retains
/// every forward activation, so nothing needs to be recomputed.
pub trait TapeOp {
    fn name(&self) -> &'static str;
    fn backward(&self, values: &[Tensor], out: &Tensor, grad_out: &Tensor, grads: &mut GradStore);
}

struct Node {
    out: TensorId,
    op: Box<dyn TapeOp>,
}

/// Gradient accumulator indexed by [`TensorId`]. Accumulation is additive;
/// a tensor used k times receives the sum of its k contributions.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: TensorId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, b) in acc.values.iter_mut().zip(g.values.iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

/// Records a forward pass as a topologically ordered list of nodes.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers an input or parameter tensor (no backward rule).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.values.len());
        self.values.push(t);
        id
    }

    /// Pushes an op output together with its backward rule. Used by this
    /// module's primitives and by the layer zoo.
    pub fn push(&mut self, t: Tensor, op: Box<dyn TapeOp>) -> TensorId {
        let id = TensorId(self.values.len());
        self.values.push(t);
        self.nodes.push(Node { out: id, op });
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reverse pass from a scalar loss. Visits each recorded node exactly
    /// once, in reverse order; returns the per-tensor gradient map.
    /// Gradients of intermediate (non-leaf) tensors are consumed as the walk
    /// passes them; leaf gradients remain available in the store.
    pub fn backward(&self, loss: TensorId) -> Result<GradStore> {
        let lt = &self.values[loss.0];
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads = GradStore::new(self.values.len());
        grads.accumulate(loss, Tensor::full(lt.shape(), 1.0));
        for node in self.nodes.iter().rev() {
            if let Some(g) = grads.take(node.out) {
                node.op
                    .backward(&self.values, &self.values[node.out.0], &g, &mut grads);
            }
        }
        Ok(grads)
    }
}

// ── Elementwise and reduction primitives ─────────────────────────────

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

struct AddOp {
    a: TensorId,
    b: TensorId,
}

impl TapeOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        grads.accumulate(self.a, g.clone());
        grads.accumulate(self.b, g.clone());
    }
}

struct SubOp {
    a: TensorId,
    b: TensorId,
}

impl TapeOp for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        grads.accumulate(self.a, g.clone());
        let neg = Tensor {
            shape: g.shape.clone(),
            values: g.values.iter().map(|x| -x).collect(),
        };
        grads.accumulate(self.b, neg);
    }
}

struct MulOp {
    a: TensorId,
    b: TensorId,
}

impl TapeOp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let (av, bv) = (&v[self.a.0], &v[self.b.0]);
        let da = Tensor {
            shape: g.shape.clone(),
            values: g
                .values
                .iter()
                .zip(bv.values.iter())
                .map(|(g, b)| g * b)
                .collect(),
        };
        let db = Tensor {
            shape: g.shape.clone(),
            values: g
                .values
                .iter()
                .zip(av.values.iter())
                .map(|(g, a)| g * a)
                .collect(),
        };
        grads.accumulate(self.a, da);
        grads.accumulate(self.b, db);
    }
}

struct ScaleOp {
    a: TensorId,
    c: f64,
}

impl TapeOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let da = Tensor {
            shape: g.shape.clone(),
            values: g.values.iter().map(|x| x * self.c).collect(),
        };
        grads.accumulate(self.a, da);
    }
}

struct AddScalarOp {
    a: TensorId,
}

impl TapeOp for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        grads.accumulate(self.a, g.clone());
    }
}

struct ReluOp {
    a: TensorId,
}

impl TapeOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.a.0];
        let da = Tensor {
            shape: g.shape.clone(),
            values: g
                .values
                .iter()
                .zip(x.values.iter())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        };
        grads.accumulate(self.a, da);
    }
}

struct SigmoidOp {
    a: TensorId,
}

impl TapeOp for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _v: &[Tensor], out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let da = Tensor {
            shape: g.shape.clone(),
            values: g
                .values
                .iter()
                .zip(out.values.iter())
                .map(|(g, &s)| g * s * (1.0 - s))
                .collect(),
        };
        grads.accumulate(self.a, da);
    }
}

struct Log1pOp {
    a: TensorId,
}

impl TapeOp for Log1pOp {
    fn name(&self) -> &'static str {
        "log1p"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.a.0];
        let da = Tensor {
            shape: g.shape.clone(),
            values: g
                .values
                .iter()
                .zip(x.values.iter())
                .map(|(g, &x)| g / (1.0 + x))
                .collect(),
        };
        grads.accumulate(self.a, da);
    }
}

struct SquareOp {
    a: TensorId,
}

impl TapeOp for SquareOp {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.a.0];
        let da = Tensor {
            shape: g.shape.clone(),
            values: g
                .values
                .iter()
                .zip(x.values.iter())
                .map(|(g, &x)| 2.0 * x * g)
                .collect(),
        };
        grads.accumulate(self.a, da);
    }
}

struct SumOp {
    a: TensorId,
}

impl TapeOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.a.0];
        grads.accumulate(self.a, Tensor::full(x.shape(), g.values[0]));
    }
}

struct MeanOp {
    a: TensorId,
}

impl TapeOp for MeanOp {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.a.0];
        let n = x.len() as f64;
        grads.accumulate(self.a, Tensor::full(x.shape(), g.values[0] / n));
    }
}

struct ReshapeOp {
    a: TensorId,
}

impl TapeOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.a.0];
        let da = Tensor {
            shape: x.shape.clone(),
            values: g.values.clone(),
        };
        grads.accumulate(self.a, da);
    }
}

struct ConcatOp {
    parts: Vec<TensorId>,
    axis: usize,
}

impl TapeOp for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, v: &[Tensor], out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let out_shape = out.shape();
        let outer: usize = out_shape[..self.axis].iter().product();
        let inner: usize = out_shape[self.axis + 1..].iter().product();
        let widths: Vec<usize> = self
            .parts
            .iter()
            .map(|id| v[id.0].shape()[self.axis] * inner)
            .collect();
        let total_width: usize = widths.iter().sum();
        for (k, &id) in self.parts.iter().enumerate() {
            let offset: usize = widths[..k].iter().sum();
            let w = widths[k];
            let mut dv = vec![0.0; outer * w];
            for o in 0..outer {
                let src = o * total_width + offset;
                dv[o * w..(o + 1) * w].copy_from_slice(&g.values[src..src + w]);
            }
            grads.accumulate(
                id,
                Tensor {
                    shape: v[id.0].shape.clone(),
                    values: dv,
                },
            );
        }
    }
}

impl Tape {
    fn binary<F>(&mut self, op: Box<dyn TapeOp>, a: TensorId, b: TensorId, f: F) -> TensorId
    where
        F: Fn(f64, f64) -> f64,
    {
        let values = self.values[a.0]
            .values
            .iter()
            .zip(self.values[b.0].values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor {
            shape: self.values[a.0].shape.clone(),
            values,
        };
        self.push(t, op)
    }

    fn unary<F>(&mut self, op: Box<dyn TapeOp>, a: TensorId, f: F) -> TensorId
    where
        F: Fn(f64) -> f64,
    {
        let t = Tensor {
            shape: self.values[a.0].shape.clone(),
            values: self.values[a.0].values.iter().map(|&x| f(x)).collect(),
        };
        self.push(t, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        require_same_shape("add", &self.values[a.0], &self.values[b.0])?;
        Ok(self.binary(Box::new(AddOp { a, b }), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        require_same_shape("sub", &self.values[a.0], &self.values[b.0])?;
        Ok(self.binary(Box::new(SubOp { a, b }), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        require_same_shape("mul", &self.values[a.0], &self.values[b.0])?;
        Ok(self.binary(Box::new(MulOp { a, b }), a, b, |x, y| x * y))
    }

    /// Scalar-with-tensor product (the only broadcasting form supported).
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(Box::new(ScaleOp { a, c }), a, |x| x * c)
    }

    /// Scalar-with-tensor addition.
    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(Box::new(AddScalarOp { a }), a, |x| x + c)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(Box::new(ReluOp { a }), a, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(Box::new(SigmoidOp { a }), a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// ln(1 + x); inputs must stay above -1 so the forward value is finite.
    pub fn log1p(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(bad) = self.values[a.0].values.iter().find(|&&x| x <= -1.0) {
            return Err(TensorError::Domain {
                op: "log1p",
                detail: format!("input value {bad} <= -1"),
            });
        }
        Ok(self.unary(Box::new(Log1pOp { a }), a, f64::ln_1p))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary(Box::new(SquareOp { a }), a, |x| x * x)
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.values[a.0].values.iter().sum();
        self.push(Tensor::scalar(s), Box::new(SumOp { a }))
    }

    /// Full mean reduction to a rank-0 scalar.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let x = &self.values[a.0];
        if x.is_empty() {
            return Err(TensorError::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = x.values.iter().sum::<f64>() / x.len() as f64;
        Ok(self.push(Tensor::scalar(m), Box::new(MeanOp { a })))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let x = &self.values[a.0];
        let numel: usize = shape.iter().product();
        if numel != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", x.shape(), shape),
            });
        }
        let t = Tensor {
            shape,
            values: x.values.clone(),
        };
        Ok(self.push(t, Box::new(ReshapeOp { a })))
    }

    /// Concatenates tensors of equal rank along `axis`; all other extents
    /// must match.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = self.values[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.values[p.0].shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{first:?} vs {s:?} along axis {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_width = axis_total * inner;
        let mut values = vec![0.0; outer * total_width];
        let mut offset = 0usize;
        for &p in parts {
            let src = &self.values[p.0];
            let w = src.shape()[axis] * inner;
            for o in 0..outer {
                values[o * total_width + offset..o * total_width + offset + w]
                    .copy_from_slice(&src.values[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor {
            shape: out_shape,
            values,
        };
        Ok(self.push(
            t,
            Box::new(ConcatOp {
                parts: parts.to_vec(),
                axis,
            }),
        ))
    }
}

// ── Finite-difference gradient checking ──────────────────────────────

/// Step for central differences; with f64 arithmetic this balances
/// truncation (h^2) against rounding (eps/h).
pub const FD_STEP: f64 = 1e-5;
/// Relative-error acceptance threshold for analytic vs numeric gradients.
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub case: String,
    pub param: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.entries.extend(other.entries);
    }

    pub fn lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{} {}/{}: max rel err {:.3e}",
                    if e.pass { "pass" } else { "FAIL" },
                    e.case,
                    e.param,
                    e.max_rel_err
                )
            })
            .collect()
    }
}

/// Checks analytic gradients of `build` against central finite differences.
///
/// `build` receives a fresh tape plus leaf ids for every entry of `params`
/// (in order) and must return a scalar loss id. Relative error uses a small
/// denominator floor so near-zero gradient pairs compare absolutely at the
/// finite-difference noise scale.
pub fn check_gradients<F>(case: &str, params: &[(&str, Tensor)], build: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = base.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let mut grads = tape.backward(loss)?;

    let mut report = CheckReport::default();
    for (pi, (pname, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .take(ids[pi])
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let mut max_rel = 0.0f64;
        for ei in 0..tensor.len() {
            let mut plus = base.clone();
            plus[pi].values[ei] += FD_STEP;
            let mut minus = base.clone();
            minus[pi].values[ei] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic.values[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        report.entries.push(CheckEntry {
            case: case.to_string(),
            param: pname.to_string(),
            max_rel_err: max_rel,
            pass: max_rel < FD_TOL,
        });
    }
    Ok(report)
}
