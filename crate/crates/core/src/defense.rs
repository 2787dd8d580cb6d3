//! Gaussian noise injected at one of four points of the task-learner pipeline.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TaskBatch;
use crate::error::{Error, Result};
use crate::maml::{run_task, MamlGradient, TaskHooks, TaskTrace, TrainConfig};
use crate::numcore::{Architecture, GradientVector, LabeledBatch, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSite {
    SupportData,
    AdaptationGradient,
    QueryData,
    ValidationGradient,
}

impl NoiseSite {
    pub const ALL: [NoiseSite; 4] = [
        NoiseSite::SupportData,
        NoiseSite::AdaptationGradient,
        NoiseSite::QueryData,
        NoiseSite::ValidationGradient,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseSite::SupportData => "support_data",
            NoiseSite::AdaptationGradient => "adaptation_gradient",
            NoiseSite::QueryData => "query_data",
            NoiseSite::ValidationGradient => "validation_gradient",
        }
    }

    pub fn is_data(self) -> bool {
        matches!(self, NoiseSite::SupportData | NoiseSite::QueryData)
    }
}

impl fmt::Display for NoiseSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseSite::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown noise site `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub site: NoiseSite,
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(site: NoiseSite, mu: f64, sigma: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { site, mu, sigma, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {}", self.sigma)));
        }
        if !self.mu.is_finite() {
            return Err(Error::invalid("noise mean must be finite"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.sigma == 0.0 && self.mu == 0.0
    }
}

fn add_noise(values: &mut [f64], spec: &NoiseSpec, rng: &mut ChaCha8Rng, clamp: bool) -> Result<()> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(());
    }
    let normal = Normal::new(spec.mu, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    for v in values.iter_mut() {
        *v += normal.sample(rng);
        if clamp {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(())
}

/// Adds `Gaussian(mu, sigma)` to every pixel and clamps back to `[0, 1]`.
pub fn perturb_data(value: &Tensor, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut out = value.clone();
    add_noise(out.data_mut(), spec, rng, true)?;
    Ok(out)
}

/// Adds `Gaussian(mu, sigma)` to every gradient entry, unclamped.
pub fn perturb_gradient(value: &GradientVector, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Result<GradientVector> {
    let mut flat = value.flatten();
    add_noise(&mut flat, spec, rng, false)?;
    Ok(GradientVector::from_params(value.unflatten(&flat)?))
}

/// [`TaskHooks`] that perturb exactly the configured site.
pub struct NoiseInjector {
    spec: NoiseSpec,
    rng: ChaCha8Rng,
}

impl NoiseInjector {
    pub fn new(spec: NoiseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(NoiseInjector {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    /// Uses a caller-owned stream instead of one derived from the spec's seed.
    pub fn with_rng(spec: NoiseSpec, rng: ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        Ok(NoiseInjector { spec, rng })
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    fn data(&mut self, batch: &mut LabeledBatch) {
        add_noise(batch.inputs.data_mut(), &self.spec, &mut self.rng, true).expect("validated spec");
    }

    fn gradient(&mut self, g: &mut GradientVector) {
        *g = perturb_gradient(g, &self.spec, &mut self.rng).expect("validated spec");
    }
}

impl TaskHooks for NoiseInjector {
    fn support_data(&mut self, batch: &mut LabeledBatch) {
        if self.spec.site == NoiseSite::SupportData {
            self.data(batch);
        }
    }

    fn adaptation_gradient(&mut self, g: &mut GradientVector) {
        if self.spec.site == NoiseSite::AdaptationGradient {
            self.gradient(g);
        }
    }

    fn query_data(&mut self, batch: &mut LabeledBatch) {
        if self.spec.site == NoiseSite::QueryData {
            self.data(batch);
        }
    }

    fn validation_gradient(&mut self, g: &mut GradientVector) {
        if self.spec.site == NoiseSite::ValidationGradient {
            self.gradient(g);
        }
    }
}

/// One defended task-learner run; returns every intermediate value.
pub fn wrap_task_pipeline_traced(
    arch: &Architecture,
    task: &TaskBatch,
    omega: &ParamVector,
    spec: &NoiseSpec,
    cfg: &TrainConfig,
) -> Result<TaskTrace> {
    let mut injector = NoiseInjector::new(*spec)?;
    run_task(arch, omega, task, cfg, &mut injector)
}

/// The gradient a defended task learner shares.
pub fn wrap_task_pipeline(
    arch: &Architecture,
    task: &TaskBatch,
    omega: &ParamVector,
    spec: &NoiseSpec,
    cfg: &TrainConfig,
) -> Result<MamlGradient> {
    wrap_task_pipeline_traced(arch, task, omega, spec, cfg).map(|t| t.gradient)
}
