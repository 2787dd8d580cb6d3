//! Gradient-matching reconstruction with the target image as a prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ssim::ssim_flat;
use super::tv::{tv_flat, tv_subgradient};
use crate::data::SIDE;
use crate::error::{Error, Result};
use crate::maml::{MamlGradient, Order};
use crate::numcore::{
    cross_entropy_on_tape, forward_on_tape, Architecture, LabeledBatch, ParamVector, Tape, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub tv_weight: f64,
    pub threshold: f64,
    pub batch_slots: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 100,
            step_size: 0.1,
            tv_weight: 1e-5,
            threshold: 0.5,
            batch_slots: 1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("attack step_size must be positive"));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::invalid("attack tv_weight must be nonnegative"));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("attack threshold must lie in [-1, 1]"));
        }
        if self.batch_slots < 1 {
            return Err(Error::invalid("attack batch_slots must be >= 1"));
        }
        Ok(())
    }
}

/// The image whose membership is tested, with the labels of every slot of the
/// candidate batch. `labels[0]` belongs to the prior itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    /// Final candidate batch, `[slots, 28, 28]`.
    pub x_star: Tensor,
    pub final_objective: f64,
    pub ssim_to_prior: f64,
    pub iterations_run: usize,
    /// Objective before each update, then at the returned batch.
    pub objective_trace: Vec<f64>,
}

impl ReconResult {
    pub fn slot0(&self) -> Tensor {
        let px = SIDE * SIDE;
        Tensor::new(vec![SIDE, SIDE], self.x_star.data()[..px].to_vec()).expect("slot shape")
    }
}

/// What the adversary emulates in order to compare against the shared gradient.
#[derive(Debug, Clone, Copy)]
pub enum Emulation<'a> {
    /// Plain gradient at `omega` of the candidate batch.
    Query,
    /// Adaptation on the candidate batch followed by the known query loss,
    /// differentiated with respect to `omega`.
    Support {
        query: &'a LabeledBatch,
        alpha_inner: f64,
        inner_steps: usize,
        order: Order,
    },
}

/// Evaluates `1 - cos(emulated gradient, g)` and its derivative in the candidate pixels.
pub struct Matcher<'a> {
    omega: &'a ParamVector,
    target: &'a ParamVector,
    target_norm: f64,
    labels: &'a [usize],
    emulation: Emulation<'a>,
}

impl<'a> Matcher<'a> {
    pub fn new(
        arch: &'a Architecture,
        omega: &'a ParamVector,
        g: &'a MamlGradient,
        labels: &'a [usize],
        emulation: Emulation<'a>,
    ) -> Result<Self> {
        arch.validate()?;
        if !omega.matches(arch) || !g.g.same_schema(omega) {
            return Err(Error::invalid("attack parameters do not match the architecture"));
        }
        let target_norm = g.g.norm();
        if target_norm == 0.0 || !target_norm.is_finite() {
            return Err(Error::invalid(
                "shared gradient is zero or not finite; nothing to match",
            ));
        }
        if labels.is_empty() || labels.iter().any(|&l| l >= arch.num_classes) {
            return Err(Error::invalid("attack batch labels out of range"));
        }
        if let Emulation::Support { query, inner_steps, .. } = emulation {
            if inner_steps < 1 || query.is_empty() || query.inputs.cols() != arch.input_dim {
                return Err(Error::invalid(
                    "support emulation needs a valid query set and >= 1 inner step",
                ));
            }
        }
        Ok(Matcher {
            omega,
            target: g.g.as_params(),
            target_norm,
            labels,
            emulation,
        })
    }

    /// `(1 - cos, d(1 - cos)/dx)` for a candidate batch `[slots, input_dim]`.
    pub fn eval(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let p = self.omega.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let emulated = match self.emulation {
            Emulation::Query => {
                let logits = forward_on_tape(&mut tape, &p, xv);
                let loss = cross_entropy_on_tape(&mut tape, logits, self.labels);
                tape.grad(loss, &p)
            }
            Emulation::Support {
                query,
                alpha_inner,
                inner_steps,
                order,
            } => {
                let mut theta = p.clone();
                for _ in 0..inner_steps {
                    let logits = forward_on_tape(&mut tape, &theta, xv);
                    let loss = cross_entropy_on_tape(&mut tape, logits, self.labels);
                    let gs = tape.grad(loss, &theta);
                    theta = theta
                        .iter()
                        .zip(&gs)
                        .map(|(&t, &g)| {
                            let step = tape.scale(g, -alpha_inner);
                            tape.add(t, step)
                        })
                        .collect();
                }
                let xq = tape.leaf(query.inputs.clone());
                let logits = forward_on_tape(&mut tape, &theta, xq);
                let loss = cross_entropy_on_tape(&mut tape, logits, &query.labels);
                match order {
                    Order::Second => tape.grad(loss, &p),
                    Order::First => tape.grad(loss, &theta),
                }
            }
        };
        let target = self.target.bind(&mut tape);
        let cos = cosine_on_tape(&mut tape, &emulated, &target, self.target_norm);
        let c = tape.scalar_value(cos);
        if !c.is_finite() {
            return Err(Error::invalid("emulated gradient vanished during reconstruction"));
        }
        let dx = tape.grad(cos, &[xv]);
        let grad = tape.value(dx[0]).map(|v| -v);
        Ok((1.0 - c, grad))
    }
}

fn cosine_on_tape(tape: &mut Tape, a: &[Var], b: &[Var], b_norm: f64) -> Var {
    let dots: Vec<Var> = a.iter().zip(b).map(|(&x, &y)| tape.inner(x, y)).collect();
    let squares: Vec<Var> = a.iter().map(|&x| tape.inner(x, x)).collect();
    let dot = tape.add_all(&dots);
    let sq = tape.add_all(&squares);
    let norm = tape.sqrt(sq);
    let inv = tape.recip(norm);
    let c = tape.mul(dot, inv);
    tape.scale(c, 1.0 / b_norm)
}

/// Full attack objective at a given candidate batch.
pub fn attack_objective(matcher: &Matcher<'_>, x: &Tensor, tv_weight: f64) -> Result<f64> {
    let (c, _) = matcher.eval(x)?;
    let n = x.rows();
    Ok(c + tv_weight * tv_flat(x.data(), n, SIDE, SIDE))
}

/// Adam on the candidate pixels from `init`, clamping to `[0, 1]` after every step.
pub fn optimize(matcher: &Matcher<'_>, init: Tensor, prior: &[f64], cfg: &AttackConfig) -> Result<ReconResult> {
    cfg.validate()?;
    let px = SIDE * SIDE;
    let slots = init.rows();
    if init.cols() != px || prior.len() != px {
        return Err(Error::invalid("reconstruction works on 28x28 images"));
    }
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let mut x = init;
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for t in 1..=cfg.iterations {
        let (c, gc) = matcher.eval(&x)?;
        trace.push(c + cfg.tv_weight * tv_flat(x.data(), slots, SIDE, SIDE));
        let gtv = tv_subgradient(x.data(), slots, SIDE, SIDE);
        let (b1t, b2t) = (1.0 - B1.powi(t as i32), 1.0 - B2.powi(t as i32));
        for (i, xi) in x.data_mut().iter_mut().enumerate() {
            let g = gc.data()[i] + cfg.tv_weight * gtv[i];
            m[i] = B1 * m[i] + (1.0 - B1) * g;
            v[i] = B2 * v[i] + (1.0 - B2) * g * g;
            *xi -= cfg.step_size * (m[i] / b1t) / ((v[i] / b2t).sqrt() + EPS);
            *xi = xi.clamp(0.0, 1.0);
        }
    }
    let final_objective = attack_objective(matcher, &x, cfg.tv_weight)?;
    trace.push(final_objective);
    let ssim_to_prior = ssim_flat(prior, &x.data()[..px], SIDE, SIDE)?;
    Ok(ReconResult {
        x_star: x.reshape(vec![slots, SIDE, SIDE])?,
        final_objective,
        ssim_to_prior,
        iterations_run: cfg.iterations,
        objective_trace: trace,
    })
}

/// Slot 0 holds the prior; the rest are seeded uniform noise.
pub fn initial_batch(prior: &[f64], slots: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = prior.to_vec();
    data.extend((0..(slots - 1) * prior.len()).map(|_| rng.random::<f64>()));
    Tensor::new(vec![slots, prior.len()], data).expect("nonempty batch")
}

fn check_prior(prior: &Prior, cfg: &AttackConfig) -> Result<()> {
    if prior.pixels.len() != SIDE * SIDE {
        return Err(Error::invalid("prior must be a 28x28 image"));
    }
    if prior.labels.len() != cfg.batch_slots {
        return Err(Error::invalid(format!(
            "{} slot labels given for {} batch slots",
            prior.labels.len(),
            cfg.batch_slots
        )));
    }
    Ok(())
}

/// Reconstructs a query batch against `g`, evaluating the attacker's gradient at `omega`.
pub fn reconstruct_query(
    arch: &Architecture,
    g: &MamlGradient,
    omega: &ParamVector,
    prior: &Prior,
    cfg: &AttackConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    check_prior(prior, cfg)?;
    let matcher = Matcher::new(arch, omega, g, &prior.labels, Emulation::Query)?;
    optimize(
        &matcher,
        initial_batch(&prior.pixels, cfg.batch_slots, cfg.seed),
        &prior.pixels,
        cfg,
    )
}

/// Reconstructs a support batch, emulating the task learner's adaptation
/// and validation on the known query set.
pub fn reconstruct_support(
    arch: &Architecture,
    g: &MamlGradient,
    omega: &ParamVector,
    query: &LabeledBatch,
    prior: &Prior,
    cfg: &AttackConfig,
    alpha_inner: f64,
) -> Result<ReconResult> {
    cfg.validate()?;
    check_prior(prior, cfg)?;
    let emulation = Emulation::Support {
        query,
        alpha_inner,
        inner_steps: 1,
        order: g.order,
    };
    let matcher = Matcher::new(arch, omega, g, &prior.labels, emulation)?;
    optimize(
        &matcher,
        initial_batch(&prior.pixels, cfg.batch_slots, cfg.seed),
        &prior.pixels,
        cfg,
    )
}

/// Member iff `ssim(x0, x_star) >= d`.
pub fn decide_membership(x0: &Tensor, x_star: &Tensor, d: f64) -> Result<bool> {
    Ok(super::ssim::ssim(x0, x_star)? >= d)
}
