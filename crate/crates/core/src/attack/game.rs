//! The membership-inference game between a challenger running federated
//! task learners and a passive adversary watching their shared gradients.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::recon::{reconstruct_query, reconstruct_support, AttackConfig, Prior};
use crate::data::{sample_task, Dataset, FewShotSpec, ImageExample, TaskBatch};
use crate::defense::{NoiseInjector, NoiseSpec};
use crate::error::{Error, Result};
use crate::maml::{run_task, NoHooks, TaskTrace, TrainConfig};
use crate::numcore::{Architecture, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    Query,
    Support,
}

impl AttackTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackTarget::Query => "query",
            AttackTarget::Support => "support",
        }
    }
}

impl std::str::FromStr for AttackTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(AttackTarget::Query),
            "support" => Ok(AttackTarget::Support),
            _ => Err(Error::invalid(format!("unknown attack target `{s}`"))),
        }
    }
}

/// `Local`: the adversary knows which task learner to watch.
/// `Global`: it sees every task of a meta-step and must also name the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Debug, Clone)]
pub struct GameSetup<'a> {
    pub arch: &'a Architecture,
    pub omega: &'a ParamVector,
    /// Tasks and non-member candidates are both drawn from here.
    pub pool: &'a Dataset,
    pub few_shot: FewShotSpec,
    pub train: TrainConfig,
    pub noise: Option<NoiseSpec>,
    pub target: AttackTarget,
    pub scope: Scope,
    pub n: usize,
    /// Trials used only to pick the decision threshold.
    pub calibration_trials: usize,
    /// Skips calibration when set.
    pub fixed_threshold: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truth {
    pub member: bool,
    pub task: usize,
}

/// Everything one trial exposes. `truth` exists for test adversaries only.
pub struct TrialView<'a> {
    pub index: usize,
    pub arch: &'a Architecture,
    pub omega: &'a ParamVector,
    pub target: AttackTarget,
    pub x0: &'a ImageExample,
    pub tasks: &'a [TaskBatch],
    pub traces: &'a [TaskTrace],
    pub alpha_inner: f64,
    pub truth: Truth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guess {
    /// Higher means "more likely a member".
    pub score: f64,
    pub task: usize,
}

pub trait Adversary {
    fn guess(&mut self, view: &TrialView<'_>) -> Result<Guess>;
}

/// The reconstruction attack scored by SSIM between the target and slot 0.
pub struct GradientMatching {
    pub cfg: AttackConfig,
}

impl Adversary for GradientMatching {
    fn guess(&mut self, view: &TrialView<'_>) -> Result<Guess> {
        let mut best: Option<Guess> = None;
        for (k, (task, trace)) in view.tasks.iter().zip(view.traces).enumerate() {
            let Some(label) = task.local_label(view.x0.label) else {
                continue;
            };
            let designated = match view.target {
                AttackTarget::Query => task.query_batch(),
                AttackTarget::Support => task.support_batch(),
            };
            let mut labels = designated.labels.clone();
            let at = labels.iter().position(|&l| l == label).expect("class present in task");
            labels.remove(at);
            labels.insert(0, label);
            let prior = Prior {
                pixels: view.x0.flat().to_vec(),
                labels,
            };
            let cfg = AttackConfig {
                batch_slots: prior.labels.len(),
                seed: self.cfg.seed ^ ((view.index as u64) << 8 | k as u64),
                ..self.cfg
            };
            let result = match view.target {
                AttackTarget::Query => reconstruct_query(view.arch, &trace.gradient, view.omega, &prior, &cfg)?,
                AttackTarget::Support => reconstruct_support(
                    view.arch,
                    &trace.gradient,
                    view.omega,
                    &task.query_batch(),
                    &prior,
                    &cfg,
                    view.alpha_inner,
                )?,
            };
            if best.is_none_or(|b| result.ssim_to_prior > b.score) {
                best = Some(Guess {
                    score: result.ssim_to_prior,
                    task: k,
                });
            }
        }
        best.ok_or_else(|| Error::invalid("target class appears in none of the observed tasks"))
    }
}

/// Knows the answer.
pub struct OracleAdversary;

impl Adversary for OracleAdversary {
    fn guess(&mut self, view: &TrialView<'_>) -> Result<Guess> {
        Ok(Guess {
            score: if view.truth.member { 1.0 } else { 0.0 },
            task: view.truth.task,
        })
    }
}

/// Ignores everything and guesses at random.
pub struct CoinFlipAdversary {
    pub rng: ChaCha8Rng,
}

impl CoinFlipAdversary {
    pub fn new(seed: u64) -> Self {
        CoinFlipAdversary {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Adversary for CoinFlipAdversary {
    fn guess(&mut self, view: &TrialView<'_>) -> Result<Guess> {
        Ok(Guess {
            score: if self.rng.random::<bool>() { 1.0 } else { 0.0 },
            task: self.rng.random_range(0..view.tasks.len()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub trial: usize,
    pub b: u8,
    pub a: usize,
    pub target: AttackTarget,
    pub ssim: f64,
    pub guessed_task: usize,
    pub decision: u8,
    pub correct: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameResult {
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub n: usize,
    pub threshold: f64,
    pub transcript: Vec<TranscriptRow>,
}

impl GameResult {
    /// Builds the metrics from confusion counts.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize, threshold: f64) -> Self {
        let n = tp + fp + tn + fn_;
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        GameResult {
            accuracy: if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 },
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            tp,
            fp,
            tn,
            fn_,
            n,
            threshold,
            transcript: Vec::new(),
        }
    }
}

/// Threshold maximizing balanced accuracy of `score >= d` on validation
/// scores. Candidates are midpoints between consecutive distinct scores;
/// ties go to the widest gap. Without any separating threshold the midpoint
/// of the score range is returned.
pub fn calibrate_threshold(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<f64> {
    if member_scores.is_empty() || nonmember_scores.is_empty() {
        return Err(Error::invalid("calibration needs member and non-member scores"));
    }
    if member_scores.iter().chain(nonmember_scores).any(|s| !s.is_finite()) {
        return Err(Error::invalid("calibration scores must be finite"));
    }
    let mut all: Vec<f64> = member_scores.iter().chain(nonmember_scores).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let balanced = |d: f64| {
        let tpr = member_scores.iter().filter(|&&s| s >= d).count() as f64 / member_scores.len() as f64;
        let tnr = nonmember_scores.iter().filter(|&&s| s < d).count() as f64 / nonmember_scores.len() as f64;
        0.5 * (tpr + tnr)
    };
    let mut best: Option<(f64, f64, f64)> = None;
    for pair in all.windows(2) {
        let d = 0.5 * (pair[0] + pair[1]);
        let gap = pair[1] - pair[0];
        let acc = balanced(d);
        let better = match best {
            None => true,
            Some((ba, bg, _)) => acc > ba || (acc == ba && gap > bg),
        };
        if better {
            best = Some((acc, gap, d));
        }
    }
    match best {
        Some((acc, _, d)) if acc > 0.5 => Ok(d),
        _ => Ok(0.5 * (all[0] + all[all.len() - 1])),
    }
}

const CALIBRATION_STREAM: u64 = 1 << 40;
const ORDER_STREAM: u64 = u64::MAX;

struct Trial {
    tasks: Vec<TaskBatch>,
    traces: Vec<TaskTrace>,
    x0: ImageExample,
    truth: Truth,
}

fn balanced_labels(n: usize, seed: u64, stream: u64) -> Vec<bool> {
    let mut b: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    b.shuffle(&mut rng);
    b
}

fn draw_trial(setup: &GameSetup<'_>, member: bool, stream: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(stream);
    let count = match setup.scope {
        Scope::Local => 1,
        Scope::Global => setup.train.tasks_per_step,
    };
    let tasks = (0..count)
        .map(|_| sample_task(setup.pool, setup.few_shot, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let a = rng.random_range(0..count);
    let designated = match setup.target {
        AttackTarget::Query => &tasks[a].query,
        AttackTarget::Support => &tasks[a].support,
    };
    let chosen = designated.choose(&mut rng).expect("nonempty set").clone();
    let x0 = if member {
        chosen
    } else {
        let used: BTreeSet<usize> = tasks
            .iter()
            .flat_map(|t| t.support_indices.iter().chain(&t.query_indices).copied())
            .collect();
        let outside: Vec<usize> = setup
            .pool
            .class_indices(chosen.label)
            .iter()
            .copied()
            .filter(|i| !used.contains(i))
            .collect();
        let &i = outside
            .choose(&mut rng)
            .ok_or_else(|| Error::invalid("no same-class non-member left in the pool"))?;
        setup.pool.get(i).clone()
    };
    let traces = tasks
        .iter()
        .enumerate()
        .map(|(k, task)| match setup.noise {
            Some(spec) => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(stream.wrapping_mul(64).wrapping_add(k as u64));
                let mut hooks = NoiseInjector::with_rng(spec, rng)?;
                run_task(setup.arch, setup.omega, task, &setup.train, &mut hooks)
            }
            None => run_task(setup.arch, setup.omega, task, &setup.train, &mut NoHooks),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trial {
        tasks,
        traces,
        x0,
        truth: Truth { member, task: a },
    })
}

fn play(setup: &GameSetup<'_>, adversary: &mut dyn Adversary, index: usize, trial: &Trial) -> Result<Guess> {
    adversary.guess(&TrialView {
        index,
        arch: setup.arch,
        omega: setup.omega,
        target: setup.target,
        x0: &trial.x0,
        tasks: &trial.tasks,
        traces: &trial.traces,
        alpha_inner: setup.train.alpha_inner,
        truth: trial.truth,
    })
}

/// Runs `n` balanced trials after calibrating the threshold on separate ones.
pub fn run_mi_game(setup: &GameSetup<'_>, adversary: &mut dyn Adversary) -> Result<GameResult> {
    if setup.n == 0 || !setup.n.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "trial count must be even and positive for a balanced game, got {}",
            setup.n
        )));
    }
    setup.few_shot.validate()?;
    setup.train.validate()?;
    if let Some(spec) = setup.noise {
        spec.validate()?;
    }

    let threshold = match setup.fixed_threshold {
        Some(d) => d,
        None => {
            if setup.calibration_trials < 2 {
                return Err(Error::invalid("calibration needs at least two trials"));
            }
            let labels = balanced_labels(setup.calibration_trials, setup.seed, ORDER_STREAM - 1);
            let (mut members, mut others) = (Vec::new(), Vec::new());
            for (i, &b) in labels.iter().enumerate() {
                let stream = CALIBRATION_STREAM + i as u64;
                let trial = draw_trial(setup, b, stream)?;
                let guess = play(setup, adversary, stream as usize, &trial)?;
                if b {
                    members.push(guess.score);
                } else {
                    others.push(guess.score);
                }
            }
            calibrate_threshold(&members, &others)?
        }
    };

    let labels = balanced_labels(setup.n, setup.seed, ORDER_STREAM);
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    let mut transcript = Vec::with_capacity(setup.n);
    for (i, &b) in labels.iter().enumerate() {
        let trial = draw_trial(setup, b, i as u64)?;
        let guess = play(setup, adversary, i, &trial)?;
        let decision = guess.score >= threshold;
        let task_ok = setup.scope == Scope::Local || guess.task == trial.truth.task;
        let correct = match (b, decision) {
            (true, true) if task_ok => {
                tp += 1;
                true
            }
            (true, _) => {
                fn_ += 1;
                false
            }
            (false, true) => {
                fp += 1;
                false
            }
            (false, false) => {
                tn += 1;
                true
            }
        };
        transcript.push(TranscriptRow {
            trial: i,
            b: b as u8,
            a: trial.truth.task,
            target: setup.target,
            ssim: guess.score,
            guessed_task: guess.task,
            decision: decision as u8,
            correct: correct as u8,
        });
    }
    let mut result = GameResult::from_counts(tp, fp, tn, fn_, threshold);
    result.transcript = transcript;
    Ok(result)
}
