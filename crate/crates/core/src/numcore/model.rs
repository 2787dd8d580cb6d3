use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully-connected rectifier classifier. Every layer carries a bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    /// The desk default: `784 -> 64 -> classes`.
    pub fn mnist(num_classes: usize) -> Self {
        Architecture {
            input_dim: 784,
            hidden_dims: vec![64],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::invalid("architecture needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    /// Parameter names and shapes in canonical order. Weights are `[out, in]`.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_dims()
            .into_iter()
            .enumerate()
            .flat_map(|(i, (fan_in, fan_out))| {
                [
                    (format!("fc{i}.weight"), vec![fan_out, fan_in]),
                    (format!("fc{i}.bias"), vec![fan_out]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.schema().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut entries = Vec::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
            let w = draw(fan_out * fan_in);
            let b = draw(fan_out);
            entries.push((format!("fc{i}.weight"), Tensor::matrix(fan_out, fan_in, w)));
            entries.push((
                format!("fc{i}.bias"),
                Tensor::new(vec![fan_out], b).expect("nonzero width"),
            ));
        }
        ParamVector { entries }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            entries: self.schema().into_iter().map(|(n, s)| (n, Tensor::zeros(s))).collect(),
        }
    }
}

/// Ordered named tensors holding one network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamVector { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn same_schema(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn matches(&self, arch: &Architecture) -> bool {
        let schema = arch.schema();
        schema.len() == self.entries.len()
            && schema
                .iter()
                .zip(&self.entries)
                .all(|((n1, s1), (n2, t2))| n1 == n2 && s1.as_slice() == t2.shape())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// New vector with this schema holding `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "flat vector has {} entries, schema needs {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let chunk = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                (n.clone(), Tensor::new(t.shape().to_vec(), chunk).expect("schema shape"))
            })
            .collect();
        Ok(ParamVector { entries })
    }

    pub fn zeros_like(&self) -> ParamVector {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(&f))).collect(),
        }
    }

    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> ParamVector {
        debug_assert!(self.same_schema(other));
        ParamVector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|((n, a), (_, b))| (n.clone(), a.zip_map(b, &f)))
                .collect(),
        }
    }

    /// `self + alpha * direction`
    pub fn axpy(&self, alpha: f64, direction: &ParamVector) -> Result<ParamVector> {
        if !self.same_schema(direction) {
            return Err(Error::invalid("schema mismatch in axpy"));
        }
        Ok(self.zip_map(direction, |p, d| p + alpha * d))
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.tensors().zip(other.tensors()).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Records every tensor on `tape` as a leaf, in schema order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Reads tape nodes back into this schema.
    pub fn read_from(&self, tape: &Tape, vars: &[Var]) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|((n, t), v)| {
                    let data = tape.value(*v).data().to_vec();
                    (n.clone(), Tensor::new(t.shape().to_vec(), data).expect("schema shape"))
                })
                .collect(),
        }
    }
}

/// A derivative with respect to a [`ParamVector`]; same schema.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(ParamVector);

impl GradientVector {
    pub fn from_params(p: ParamVector) -> Self {
        GradientVector(p)
    }

    pub fn into_params(self) -> ParamVector {
        self.0
    }

    pub fn as_params(&self) -> &ParamVector {
        &self.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GradientVector {
        GradientVector(self.0.map(f))
    }

    pub fn scaled(&self, c: f64) -> GradientVector {
        self.map(|v| v * c)
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &GradientVector) -> Result<GradientVector> {
        self.0.axpy(alpha, &other.0).map(GradientVector)
    }
}

impl Deref for GradientVector {
    type Target = ParamVector;

    fn deref(&self) -> &ParamVector {
        &self.0
    }
}

/// Inputs `[n, input_dim]` paired with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    /// Stacks flat rows of equal width.
    pub fn from_rows(rows: &[&[f64]], labels: Vec<usize>) -> Result<Self> {
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("rows must be nonempty and of equal width"));
        }
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LabeledBatch::new(Tensor::new(vec![rows.len(), width], data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if self.inputs.cols() != arch.input_dim {
            return Err(Error::invalid(format!(
                "input width {} does not match architecture input_dim {}",
                self.inputs.cols(),
                arch.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= arch.num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {})", arch.num_classes)));
        }
        Ok(())
    }
}

/// One-hot `[n, classes]` label matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Logits node for `inputs` through the layers in `params` (schema order).
pub fn forward_on_tape(tape: &mut Tape, params: &[Var], inputs: Var) -> Var {
    let layers = params.len() / 2;
    let mut h = inputs;
    for l in 0..layers {
        let z = tape.matmul(h, false, params[2 * l], true);
        let z = tape.add_row(z, params[2 * l + 1]);
        h = if l + 1 < layers { tape.relu(z) } else { z };
    }
    h
}

/// Mean cross-entropy node of `logits` against integer labels.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let classes = tape.value(logits).cols();
    let targets = tape.leaf(one_hot(labels, classes));
    let logp = tape.log_softmax(logits);
    let picked = tape.inner(targets, logp);
    tape.scale(picked, -1.0 / labels.len() as f64)
}

/// A loss that can be rebuilt on a tape from bound parameter nodes.
pub trait TapeLoss {
    fn build(&self, tape: &mut Tape, params: &[Var]) -> Var;
}

/// Cross-entropy of the classifier on a fixed batch.
pub struct CrossEntropy<'a> {
    pub batch: &'a LabeledBatch,
}

impl TapeLoss for CrossEntropy<'_> {
    fn build(&self, tape: &mut Tape, params: &[Var]) -> Var {
        let x = tape.leaf(self.batch.inputs.clone());
        let logits = forward_on_tape(tape, params, x);
        cross_entropy_on_tape(tape, logits, &self.batch.labels)
    }
}

fn check_params(arch: &Architecture, params: &ParamVector) -> Result<()> {
    arch.validate()?;
    if !params.matches(arch) {
        return Err(Error::invalid("parameter schema does not match architecture"));
    }
    Ok(())
}

/// Logits `[n, classes]`.
pub fn forward(arch: &Architecture, params: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
    check_params(arch, params)?;
    if inputs.cols() != arch.input_dim {
        return Err(Error::invalid(format!(
            "input width {} does not match architecture input_dim {}",
            inputs.cols(),
            arch.input_dim
        )));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.leaf(inputs.clone());
    let logits = forward_on_tape(&mut tape, &p, x);
    Ok(tape.value(logits).clone())
}

pub fn ce_loss(arch: &Architecture, params: &ParamVector, batch: &LabeledBatch) -> Result<f64> {
    check_params(arch, params)?;
    batch.check(arch)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let loss = CrossEntropy { batch }.build(&mut tape, &p);
    Ok(tape.scalar_value(loss))
}

/// Gradient of any [`TapeLoss`] at `params`.
pub fn grad_of(loss: &dyn TapeLoss, params: &ParamVector) -> GradientVector {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let l = loss.build(&mut tape, &p);
    let g = tape.grad(l, &p);
    GradientVector(params.read_from(&tape, &g))
}

/// Hessian of `loss` at `params` applied to `v`, by differentiating `<grad, v>`.
pub fn hvp_of(loss: &dyn TapeLoss, params: &ParamVector, v: &ParamVector) -> Result<GradientVector> {
    if !params.same_schema(v) {
        return Err(Error::invalid("hvp direction schema does not match parameters"));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let l = loss.build(&mut tape, &p);
    let g = tape.grad(l, &p);
    let dirs = v.bind(&mut tape);
    let terms: Vec<Var> = g.iter().zip(&dirs).map(|(&gi, &vi)| tape.inner(gi, vi)).collect();
    let directional = tape.add_all(&terms);
    let hv = tape.grad(directional, &p);
    Ok(GradientVector(params.read_from(&tape, &hv)))
}

pub fn grad(arch: &Architecture, params: &ParamVector, batch: &LabeledBatch) -> Result<GradientVector> {
    check_params(arch, params)?;
    batch.check(arch)?;
    Ok(grad_of(&CrossEntropy { batch }, params))
}

pub fn hvp(arch: &Architecture, params: &ParamVector, batch: &LabeledBatch, v: &ParamVector) -> Result<GradientVector> {
    check_params(arch, params)?;
    batch.check(arch)?;
    hvp_of(&CrossEntropy { batch }, params, v)
}

/// Global cosine between two flattened gradients.
pub fn cosine_similarity(g1: &ParamVector, g2: &ParamVector) -> Result<f64> {
    if !g1.same_schema(g2) {
        return Err(Error::invalid("cosine of gradients with different schemas"));
    }
    let (n1, n2) = (g1.norm(), g2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm gradient"));
    }
    Ok((g1.dot(g2) / (n1 * n2)).clamp(-1.0, 1.0))
}
