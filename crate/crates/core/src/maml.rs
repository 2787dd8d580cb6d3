//! Task-learner and meta-learner sides of federated MAML.
//!
//! A task learner adapts the meta parameters on its support set with plain
//! gradient descent, `theta = omega - alpha * grad L(omega, support)`, and
//! shares the derivative of its query loss at `theta` taken with respect to
//! `omega`. With one inner step that derivative is
//! `(I - alpha * H_support(omega)) * grad L(theta, query)`; dropping the
//! Hessian factor gives the first-order variant.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_task, Dataset, FewShotSpec, TaskBatch};
use crate::error::{Error, Result};
use crate::numcore::{
    grad, grad_of, hvp, hvp_of, Architecture, GradientVector, LabeledBatch, ParamVector, TapeLoss, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub omega: ParamVector,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedParams {
    pub theta: ParamVector,
    pub derived_from: usize,
    pub inner_step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MamlGradient {
    pub g: GradientVector,
    pub order: Order,
    pub source_task: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha_inner: f64,
    pub beta_meta: f64,
    pub inner_steps: usize,
    pub tasks_per_step: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub order: Order,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha_inner: 0.4,
            beta_meta: 0.1,
            inner_steps: 1,
            tasks_per_step: 4,
            epochs: 10,
            steps_per_epoch: 25,
            order: Order::Second,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_inner >= 0.0 && self.alpha_inner.is_finite()) {
            return Err(Error::invalid("alpha_inner must be a finite nonnegative real"));
        }
        if !(self.beta_meta > 0.0 && self.beta_meta.is_finite()) {
            return Err(Error::invalid("beta_meta must be a finite positive real"));
        }
        if self.inner_steps < 1 {
            return Err(Error::invalid("inner_steps must be >= 1"));
        }
        if self.order == Order::Second && self.inner_steps != 1 {
            return Err(Error::invalid("second-order gradients need exactly one inner step"));
        }
        if self.tasks_per_step < 1 {
            return Err(Error::invalid("tasks_per_step must be >= 1"));
        }
        Ok(())
    }
}

/// Interception points inside one task learner's computation. Every method
/// defaults to leaving its value untouched.
pub trait TaskHooks {
    fn support_data(&mut self, _batch: &mut LabeledBatch) {}
    fn adaptation_gradient(&mut self, _g: &mut GradientVector) {}
    fn query_data(&mut self, _batch: &mut LabeledBatch) {}
    fn validation_gradient(&mut self, _g: &mut GradientVector) {}
}

/// The undefended pipeline.
pub struct NoHooks;

impl TaskHooks for NoHooks {}

pub fn adapt(
    arch: &Architecture,
    omega: &ParamVector,
    support: &LabeledBatch,
    alpha_inner: f64,
    inner_steps: usize,
) -> Result<AdaptedParams> {
    adapt_with(arch, omega, support, alpha_inner, inner_steps, &mut |_| {})
}

/// `inner_steps` of gradient descent; `on_grad` sees each step's gradient first.
pub fn adapt_with(
    arch: &Architecture,
    omega: &ParamVector,
    support: &LabeledBatch,
    alpha_inner: f64,
    inner_steps: usize,
    on_grad: &mut dyn FnMut(&mut GradientVector),
) -> Result<AdaptedParams> {
    let mut theta = omega.clone();
    for _ in 0..inner_steps {
        let mut g = grad(arch, &theta, support)?;
        on_grad(&mut g);
        theta = theta.axpy(-alpha_inner, &g)?;
    }
    Ok(AdaptedParams {
        theta,
        derived_from: 0,
        inner_step_size: alpha_inner,
    })
}

/// Plain query gradient at the adapted parameters.
pub fn validation_grad_first(arch: &Architecture, theta: &AdaptedParams, query: &LabeledBatch) -> Result<MamlGradient> {
    Ok(MamlGradient {
        g: grad(arch, &theta.theta, query)?,
        order: Order::First,
        source_task: 0,
    })
}

/// `g_q - alpha * H_support(omega) * g_q` with `g_q` the query gradient at one-step-adapted parameters.
pub fn validation_grad_second(
    arch: &Architecture,
    omega: &ParamVector,
    support: &LabeledBatch,
    query: &LabeledBatch,
    alpha_inner: f64,
) -> Result<MamlGradient> {
    let theta = adapt(arch, omega, support, alpha_inner, 1)?;
    second_order_at(arch, omega, &theta, support, query)
}

/// Second-order gradient for an already computed `theta`.
pub fn second_order_at(
    arch: &Architecture,
    omega: &ParamVector,
    theta: &AdaptedParams,
    support: &LabeledBatch,
    query: &LabeledBatch,
) -> Result<MamlGradient> {
    let gq = grad(arch, &theta.theta, query)?;
    let alpha = theta.inner_step_size;
    let g = if alpha == 0.0 {
        gq
    } else {
        let hg = hvp(arch, omega, support, &gq)?;
        gq.axpy(-alpha, &hg)?
    };
    Ok(MamlGradient {
        g,
        order: Order::Second,
        source_task: 0,
    })
}

/// The second-order formula for arbitrary losses; exposed for closed-form checks.
pub fn second_order_with_losses(
    omega: &ParamVector,
    support: &dyn TapeLoss,
    query: &dyn TapeLoss,
    alpha_inner: f64,
) -> Result<GradientVector> {
    let gs = grad_of(support, omega);
    let theta = omega.axpy(-alpha_inner, &gs)?;
    let gq = grad_of(query, &theta);
    let hg = hvp_of(support, omega, &gq)?;
    gq.axpy(-alpha_inner, &hg)
}

/// Averaged-gradient descent on the meta parameters.
pub fn meta_update(omega: &ParamVector, gradients: &[MamlGradient], beta_meta: f64) -> Result<ParamVector> {
    if gradients.is_empty() {
        return Err(Error::invalid("meta update needs at least one task gradient"));
    }
    let mut sum = omega.zeros_like();
    for mg in gradients {
        if !omega.same_schema(&mg.g) {
            return Err(Error::invalid("task gradient schema does not match omega"));
        }
        sum = sum.axpy(1.0, &mg.g)?;
    }
    omega.axpy(-beta_meta / gradients.len() as f64, &sum)
}

/// Values produced along one task learner's pipeline.
#[derive(Debug, Clone)]
pub struct TaskTrace {
    pub support: LabeledBatch,
    pub adapted: AdaptedParams,
    pub query: LabeledBatch,
    pub gradient: MamlGradient,
}

/// Runs adaptation and validation for one task, passing every intermediate through `hooks`.
pub fn run_task(
    arch: &Architecture,
    omega: &ParamVector,
    task: &TaskBatch,
    cfg: &TrainConfig,
    hooks: &mut dyn TaskHooks,
) -> Result<TaskTrace> {
    let mut support = task.support_batch();
    hooks.support_data(&mut support);
    let adapted = adapt_with(arch, omega, &support, cfg.alpha_inner, cfg.inner_steps, &mut |g| {
        hooks.adaptation_gradient(g)
    })?;
    let mut query = task.query_batch();
    hooks.query_data(&mut query);
    let mut gradient = match cfg.order {
        Order::First => validation_grad_first(arch, &adapted, &query)?,
        Order::Second => second_order_at(arch, omega, &adapted, &support, &query)?,
    };
    hooks.validation_gradient(&mut gradient.g);
    if !gradient.g.is_finite() {
        return Err(Error::invalid("task gradient is not finite"));
    }
    Ok(TaskTrace {
        support,
        adapted,
        query,
        gradient,
    })
}

/// Fraction of query items classified correctly after adapting on each task's support set.
pub fn meta_test_accuracy(
    arch: &Architecture,
    omega: &ParamVector,
    tasks: &[TaskBatch],
    alpha_inner: f64,
    inner_steps: usize,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("meta-test accuracy needs at least one task"));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for task in tasks {
        let adapted = adapt(arch, omega, &task.support_batch(), alpha_inner, inner_steps)?;
        let query = task.query_batch();
        let logits = crate::numcore::forward(arch, &adapted.theta, &query.inputs)?;
        for (i, &label) in query.labels.iter().enumerate() {
            if argmax(logits.row(i)) == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Meta state at the end of each epoch; entry 0 is the initialization.
    pub checkpoints: Vec<MetaState>,
    /// Meta-test accuracy at each checkpoint.
    pub meta_test_accuracy: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &MetaState {
        self.checkpoints.last().expect("trajectory holds the initial state")
    }
}

/// Meta-trains from `init`: each step samples `tasks_per_step` tasks, runs
/// their pipelines through `hooks`, and applies the averaged update.
#[allow(clippy::too_many_arguments)]
pub fn train_run<R: Rng + ?Sized>(
    arch: &Architecture,
    cfg: &TrainConfig,
    few_shot: FewShotSpec,
    init: ParamVector,
    train_set: &Dataset,
    eval_tasks: &[TaskBatch],
    rng: &mut R,
    hooks: &mut dyn TaskHooks,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut state = MetaState {
        omega: init,
        iteration: 0,
    };
    let score = |omega: &ParamVector| -> Result<f64> {
        if eval_tasks.is_empty() {
            Ok(f64::NAN)
        } else {
            meta_test_accuracy(arch, omega, eval_tasks, cfg.alpha_inner, cfg.inner_steps)
        }
    };
    let mut checkpoints = vec![state.clone()];
    let mut accuracy = vec![score(&state.omega)?];
    for _ in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let mut grads = Vec::with_capacity(cfg.tasks_per_step);
            for k in 0..cfg.tasks_per_step {
                let task = sample_task(train_set, few_shot, rng)?;
                let mut trace = run_task(arch, &state.omega, &task, cfg, hooks)?;
                trace.gradient.source_task = k;
                grads.push(trace.gradient);
            }
            state.omega = meta_update(&state.omega, &grads, cfg.beta_meta)?;
            state.iteration += 1;
        }
        checkpoints.push(state.clone());
        accuracy.push(score(&state.omega)?);
    }
    Ok(Trajectory {
        checkpoints,
        meta_test_accuracy: accuracy,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MAMLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, iteration, then per tensor its name,
/// shape and little-endian `f64` payload.
pub fn save_checkpoint(state: &MetaState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.iteration as u64).to_le_bytes());
    out.extend_from_slice(&(state.omega.entries().len() as u32).to_le_bytes());
    for (name, t) in state.omega.entries() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MetaState> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(cur.fail("magic", "not a checkpoint file".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.fail("version", format!("unsupported version {version}")));
    }
    let iteration = cur.u64("iteration")? as usize;
    let n = cur.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.u32("name length")? as usize;
        let name =
            String::from_utf8(cur.take(len, "name")?.to_vec()).map_err(|_| cur.fail("name", "not utf-8".into()))?;
        let ndim = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64("dimension")? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(cur.take(8, "payload")?.try_into().expect("8 bytes")));
        }
        let t = Tensor::new(shape, data).map_err(|e| cur.fail("shape", e.to_string()))?;
        entries.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail("payload", "trailing bytes".into()));
    }
    Ok(MetaState {
        omega: ParamVector::new(entries),
        iteration,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, field: &'static str, reason: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            field,
            reason,
        }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(self.fail(field, "file truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Architecture {
        Architecture {
            input_dim: 6,
            hidden_dims: vec![5],
            num_classes: 3,
        }
    }

    fn batch(seed: u64, n: usize) -> LabeledBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 6).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        LabeledBatch::new(Tensor::new(vec![n, 6], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn zero_step_keeps_omega() {
        let arch = tiny();
        let omega = arch.init(&mut ChaCha8Rng::seed_from_u64(0));
        let a = adapt(&arch, &omega, &batch(1, 3), 0.0, 1).unwrap();
        assert_eq!(a.theta, omega);
    }

    #[test]
    fn one_step_is_descent() {
        let arch = tiny();
        let omega = arch.init(&mut ChaCha8Rng::seed_from_u64(0));
        let s = batch(1, 3);
        let g = grad(&arch, &omega, &s).unwrap();
        let a = adapt(&arch, &omega, &s, 0.3, 1).unwrap();
        let want = omega.zip_map(&g, |w, d| w - 0.3 * d);
        assert_eq!(a.theta, want);
    }

    #[test]
    fn two_steps_compose() {
        let arch = tiny();
        let omega = arch.init(&mut ChaCha8Rng::seed_from_u64(0));
        let s = batch(1, 3);
        let twice = adapt(&arch, &omega, &s, 0.2, 2).unwrap();
        let once = adapt(&arch, &omega, &s, 0.2, 1).unwrap();
        let again = adapt(&arch, &once.theta, &s, 0.2, 1).unwrap();
        assert_eq!(twice.theta, again.theta);
    }

    #[test]
    fn meta_update_cases() {
        let arch = tiny();
        let omega = arch.init(&mut ChaCha8Rng::seed_from_u64(0));
        let zero = MamlGradient {
            g: GradientVector::from_params(omega.zeros_like()),
            order: Order::Second,
            source_task: 0,
        };
        assert_eq!(meta_update(&omega, &[zero.clone(), zero], 0.1).unwrap(), omega);
        assert!(meta_update(&omega, &[], 0.1).is_err());

        let g1 = GradientVector::from_params(omega.map(|_| 1.0));
        let g2 = GradientVector::from_params(omega.map(|_| 3.0));
        let mk = |g: &GradientVector| MamlGradient {
            g: g.clone(),
            order: Order::Second,
            source_task: 0,
        };
        let single = meta_update(&omega, &[mk(&g1)], 0.5).unwrap();
        assert_eq!(single, omega.map(|w| w - 0.5));
        let pair = meta_update(&omega, &[mk(&g1), mk(&g2)], 0.5).unwrap();
        let want = omega.map(|w| w - 0.5 * 2.0);
        for (a, b) in pair.flatten().iter().zip(want.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.inner_steps = 2;
        assert!(cfg.validate().is_err());
        cfg.order = Order::First;
        assert!(cfg.validate().is_ok());
        cfg.tasks_per_step = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = tiny();
        let state = MetaState {
            omega: arch.init(&mut ChaCha8Rng::seed_from_u64(8)),
            iteration: 17,
        };
        let dir = std::env::temp_dir().join(format!("ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.ckpt");
        save_checkpoint(&state, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), state);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}
