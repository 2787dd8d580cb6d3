//! Experiment driver: every run is a pure function of an [`ExperimentSpec`]
//! and the data files it names.

pub mod cli;
mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use output::{emit_csv, emit_plot, format_real, read_csv, render_svg, Plot, ResultRow, Series, HEADER};

use crate::attack::{
    reconstruct_query, reconstruct_support, run_mi_game, AttackConfig, AttackTarget, GameResult, GameSetup,
    GradientMatching, Prior, Scope,
};
use crate::data::{load_idx, sample_task, synth_dataset, Dataset, FewShotSpec, TaskBatch};
use crate::defense::{NoiseInjector, NoiseSite, NoiseSpec};
use crate::error::{Error, Result};
use crate::maml::{run_task, save_checkpoint, train_run, NoHooks, TaskHooks, TrainConfig, Trajectory};
use crate::numcore::Architecture;
use crate::theory::{sample_instance, Prop1Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    AttackEval,
    SweepWays,
    SweepShots,
    SweepEpochs,
    Bench,
    NoiseSweep,
    VerifyTheory,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::AttackEval => "attack-eval",
            Command::SweepWays => "sweep-ways",
            Command::SweepShots => "sweep-shots",
            Command::SweepEpochs => "sweep-epochs",
            Command::Bench => "bench",
            Command::NoiseSweep => "noise-sweep",
            Command::VerifyTheory => "verify-theory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Idx {
        name: String,
        images: PathBuf,
        labels: PathBuf,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
    },
}

impl DatasetSource {
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Idx { name, .. } => name.clone(),
            DatasetSource::Synthetic { classes, per_class } => format!("synthetic-{classes}x{per_class}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseGrid {
    pub sites: Vec<NoiseSite>,
    pub sigmas: Vec<f64>,
    pub mu: f64,
}

impl Default for NoiseGrid {
    fn default() -> Self {
        NoiseGrid {
            sites: NoiseSite::ALL.to_vec(),
            sigmas: vec![0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
            mu: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchGrid {
    pub iterations: Vec<usize>,
    pub sizes: Vec<usize>,
    pub repetitions: usize,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            iterations: vec![50, 100, 200],
            sizes: vec![3, 5, 10, 15, 20],
            repetitions: 5,
        }
    }
}

/// Thresholds for the confident noise area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidentArea {
    pub atk_max: f64,
    pub learn_drop: f64,
}

impl Default for ConfidentArea {
    fn default() -> Self {
        ConfidentArea {
            atk_max: 0.6,
            learn_drop: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub command: Command,
    pub dataset: DatasetSource,
    /// Images per class reserved for meta-test tasks.
    pub held_out_per_class: usize,
    pub meta_test_tasks: usize,
    pub ways: Vec<usize>,
    pub shots: Vec<usize>,
    pub targets: Vec<AttackTarget>,
    pub scope: Scope,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    /// Epoch of the meta-training run whose parameters are attacked.
    pub attack_epoch: usize,
    /// Epoch checkpoints attacked by `sweep-epochs`; empty means `{0, mid, final}`.
    pub epochs_grid: Vec<usize>,
    pub noise: NoiseGrid,
    pub confident: ConfidentArea,
    pub bench: BenchGrid,
    pub n: usize,
    pub calibration_trials: usize,
    pub replicates: usize,
    pub theory_instances: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            command: Command::AttackEval,
            dataset: DatasetSource::Idx {
                name: "mnist".into(),
                images: "data/mnist-5k/images-idx3-ubyte.gz".into(),
                labels: "data/mnist-5k/labels-idx1-ubyte.gz".into(),
            },
            held_out_per_class: 50,
            meta_test_tasks: 50,
            ways: vec![3, 5],
            shots: vec![1, 2, 3],
            targets: vec![AttackTarget::Query, AttackTarget::Support],
            scope: Scope::Local,
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            attack_epoch: 0,
            epochs_grid: Vec::new(),
            noise: NoiseGrid::default(),
            confident: ConfidentArea::default(),
            bench: BenchGrid::default(),
            n: 40,
            calibration_trials: 40,
            replicates: 1,
            theory_instances: 20,
            seed: 0,
            output_dir: "results".into(),
        }
    }
}

impl ExperimentSpec {
    pub fn for_command(command: Command) -> Self {
        ExperimentSpec {
            command,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.ways.is_empty() || self.shots.is_empty() {
            return bad("ways and shots grids must be nonempty".into());
        }
        for &w in &self.ways {
            for &s in &self.shots {
                FewShotSpec::new(w, s).map_err(|e| Error::Spec(e.to_string()))?;
            }
        }
        if !self.n.is_multiple_of(2) {
            return bad(format!("n = {} is odd; games need balanced trials", self.n));
        }
        if self.targets.is_empty() {
            return bad("targets must be nonempty".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        if self.attack_epoch > self.train.epochs {
            return bad(format!(
                "attack_epoch {} exceeds train.epochs {}",
                self.attack_epoch, self.train.epochs
            ));
        }
        if let Some(&e) = self.epochs_grid.iter().find(|&&e| e > self.train.epochs) {
            return bad(format!(
                "epochs_grid entry {e} exceeds train.epochs {}",
                self.train.epochs
            ));
        }
        if self.noise.sigmas.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("noise sigmas must be finite and >= 0".into());
        }
        if self.command == Command::NoiseSweep && (self.noise.sites.is_empty() || self.noise.sigmas.is_empty()) {
            return bad("noise-sweep needs at least one site and one sigma".into());
        }
        if self.command == Command::Bench && (self.bench.repetitions == 0 || self.bench.sizes.contains(&0)) {
            return bad("bench needs repetitions >= 1 and positive sizes".into());
        }
        self.train.validate().map_err(|e| Error::Spec(e.to_string()))?;
        self.attack.validate().map_err(|e| Error::Spec(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub rows: Vec<ResultRow>,
    /// Files written, starting with the spec echo.
    pub artifacts: Vec<PathBuf>,
    pub report: Option<String>,
}

struct Data {
    name: String,
    train: Dataset,
    test: Dataset,
}

fn prepare_data(spec: &ExperimentSpec) -> Result<Data> {
    let examples = match &spec.dataset {
        DatasetSource::Idx { images, labels, .. } => load_idx(images, labels)?,
        DatasetSource::Synthetic { classes, per_class } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED);
            synth_dataset(*classes, *per_class, &mut rng)?
        }
    };
    let (train, test) = Dataset::new(examples).split_per_class(spec.held_out_per_class)?;
    Ok(Data {
        name: spec.dataset.name(),
        train,
        test,
    })
}

/// Runs the spec's command, writing `spec.toml`, `results.csv` and any plots into `output_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Outcome> {
    spec.validate()?;
    let dir = &spec.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, spec.to_toml()?).map_err(|e| Error::io(&spec_path, e))?;
    let mut outcome = Outcome {
        artifacts: vec![spec_path],
        ..Default::default()
    };

    if spec.command == Command::VerifyTheory {
        let report = verify_theory(spec)?;
        let path = dir.join("theory_report.txt");
        std::fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
        outcome.artifacts.push(path);
        outcome.report = Some(report);
        return Ok(outcome);
    }

    let data = prepare_data(spec)?;
    if spec.n == 0 && !matches!(spec.command, Command::Train | Command::Bench) {
        // no trials: nothing beyond the spec echo
        return Ok(outcome);
    }
    outcome.rows = match spec.command {
        Command::Train => train_cmd(spec, &data, &mut outcome.artifacts)?,
        Command::AttackEval => attack_grid(spec, &data, &spec.ways, &spec.shots)?,
        Command::SweepWays => attack_grid(spec, &data, &spec.ways, &spec.shots[..1])?,
        Command::SweepShots => attack_grid(spec, &data, &spec.ways[..1], &spec.shots)?,
        Command::SweepEpochs => sweep_epochs(spec, &data)?,
        Command::Bench => bench(spec, &data)?,
        Command::NoiseSweep => noise_sweep(spec, &data, &mut outcome.artifacts)?,
        Command::VerifyTheory => unreachable!(),
    };
    let csv_path = dir.join("results.csv");
    emit_csv(&outcome.rows, &csv_path)?;
    outcome.artifacts.push(csv_path);
    if matches!(
        spec.command,
        Command::SweepWays | Command::SweepShots | Command::SweepEpochs
    ) {
        let path = dir.join(format!("{}.svg", spec.command.as_str()));
        emit_plot(&sweep_plot(spec, &outcome.rows), &path)?;
        outcome.artifacts.push(path);
    }
    Ok(outcome)
}

fn meta_test_set(spec: &ExperimentSpec, data: &Data, few_shot: FewShotSpec, seed: u64) -> Result<Vec<TaskBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E57);
    (0..spec.meta_test_tasks)
        .map(|_| sample_task(&data.test, few_shot, &mut rng))
        .collect()
}

/// Meta-trains one (w, s) cell for `epochs` epochs.
fn train_cell(
    spec: &ExperimentSpec,
    data: &Data,
    few_shot: FewShotSpec,
    epochs: usize,
    seed: u64,
    hooks: &mut dyn TaskHooks,
) -> Result<Trajectory> {
    let arch = Architecture::mnist(few_shot.ways);
    let init = arch.init(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval = meta_test_set(spec, data, few_shot, seed)?;
    let cfg = TrainConfig { epochs, ..spec.train };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7AA1);
    train_run(&arch, &cfg, few_shot, init, &data.train, &eval, &mut rng, hooks)
}

fn cell_seeds(spec: &ExperimentSpec) -> impl Iterator<Item = u64> + '_ {
    (0..spec.replicates as u64).map(|k| spec.seed.wrapping_add(k))
}

struct Cell<'a> {
    id: String,
    few_shot: FewShotSpec,
    epoch: usize,
    target: AttackTarget,
    noise: Option<NoiseSpec>,
    seed: u64,
    meta_test_accuracy: f64,
    data: &'a Data,
}

fn play_cell(spec: &ExperimentSpec, cell: &Cell<'_>, omega: &crate::numcore::ParamVector) -> Result<ResultRow> {
    let arch = Architecture::mnist(cell.few_shot.ways);
    let setup = GameSetup {
        arch: &arch,
        omega,
        pool: &cell.data.train,
        few_shot: cell.few_shot,
        train: spec.train,
        noise: cell.noise,
        target: cell.target,
        scope: spec.scope,
        n: spec.n,
        calibration_trials: spec.calibration_trials,
        fixed_threshold: (spec.calibration_trials == 0).then_some(spec.attack.threshold),
        seed: cell.seed,
    };
    let mut adversary = GradientMatching {
        cfg: AttackConfig {
            seed: spec.attack.seed ^ cell.seed,
            ..spec.attack
        },
    };
    let result = run_mi_game(&setup, &mut adversary)?;
    Ok(row_from(spec, cell, &result))
}

fn row_from(spec: &ExperimentSpec, cell: &Cell<'_>, r: &GameResult) -> ResultRow {
    let (site, mu, sigma) = match cell.noise {
        Some(n) => (n.site.as_str().to_string(), n.mu, n.sigma),
        None => ("none".to_string(), 0.0, 0.0),
    };
    ResultRow {
        experiment_id: cell.id.clone(),
        dataset: cell.data.name.clone(),
        w: cell.few_shot.ways,
        s: cell.few_shot.shots,
        epoch: cell.epoch,
        target: cell.target.as_str().into(),
        site,
        mu,
        sigma,
        n: spec.n,
        accuracy: r.accuracy,
        recall: r.recall.unwrap_or(f64::NAN),
        precision: r.precision.unwrap_or(f64::NAN),
        meta_test_accuracy: cell.meta_test_accuracy,
        wall_seconds: f64::NAN,
        seed: cell.seed,
    }
}

fn train_cmd(spec: &ExperimentSpec, data: &Data, artifacts: &mut Vec<PathBuf>) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &w in &spec.ways {
        for &s in &spec.shots {
            let few_shot = FewShotSpec::new(w, s)?;
            for seed in cell_seeds(spec) {
                let traj = train_cell(spec, data, few_shot, spec.train.epochs, seed, &mut NoHooks)?;
                for (epoch, &acc) in traj.meta_test_accuracy.iter().enumerate() {
                    rows.push(ResultRow {
                        experiment_id: format!("train/w{w}s{s}"),
                        dataset: data.name.clone(),
                        w,
                        s,
                        epoch,
                        target: "none".into(),
                        site: "none".into(),
                        mu: 0.0,
                        sigma: 0.0,
                        n: 0,
                        accuracy: f64::NAN,
                        recall: f64::NAN,
                        precision: f64::NAN,
                        meta_test_accuracy: acc,
                        wall_seconds: f64::NAN,
                        seed,
                    });
                }
                let path = spec.output_dir.join(format!("omega-w{w}-s{s}-seed{seed}.ckpt"));
                save_checkpoint(traj.final_state(), &path)?;
                artifacts.push(path);
            }
        }
    }
    Ok(rows)
}

fn attack_grid(spec: &ExperimentSpec, data: &Data, ways: &[usize], shots: &[usize]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &w in ways {
        for &s in shots {
            let few_shot = FewShotSpec::new(w, s)?;
            for seed in cell_seeds(spec) {
                let traj = train_cell(spec, data, few_shot, spec.attack_epoch, seed, &mut NoHooks)?;
                let omega = &traj.final_state().omega;
                let mt = *traj.meta_test_accuracy.last().expect("initial score");
                for &target in &spec.targets {
                    let cell = Cell {
                        id: format!("{}/w{w}s{s}/{}", spec.command.as_str(), target.as_str()),
                        few_shot,
                        epoch: spec.attack_epoch,
                        target,
                        noise: None,
                        seed,
                        meta_test_accuracy: mt,
                        data,
                    };
                    rows.push(play_cell(spec, &cell, omega)?);
                }
            }
        }
    }
    Ok(rows)
}

/// `epochs_grid`, or `{0, mid, final}` when it is empty.
pub fn epoch_points(spec: &ExperimentSpec) -> Vec<usize> {
    if spec.epochs_grid.is_empty() {
        let e = spec.train.epochs;
        let mut v = vec![0, e / 2, e];
        v.dedup();
        v
    } else {
        spec.epochs_grid.clone()
    }
}

fn sweep_epochs(spec: &ExperimentSpec, data: &Data) -> Result<Vec<ResultRow>> {
    let points = epoch_points(spec);
    let last = *points.iter().max().expect("nonempty");
    let mut rows = Vec::new();
    for &w in &spec.ways[..1] {
        for &s in &spec.shots[..1] {
            let few_shot = FewShotSpec::new(w, s)?;
            for seed in cell_seeds(spec) {
                let traj = train_cell(spec, data, few_shot, last, seed, &mut NoHooks)?;
                for &epoch in &points {
                    for &target in &spec.targets {
                        let cell = Cell {
                            id: format!("sweep-epochs/w{w}s{s}/{}", target.as_str()),
                            few_shot,
                            epoch,
                            target,
                            noise: None,
                            seed,
                            meta_test_accuracy: traj.meta_test_accuracy[epoch],
                            data,
                        };
                        rows.push(play_cell(spec, &cell, &traj.checkpoints[epoch].omega)?);
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// A task whose support and query sets each hold `size` images, labels cycling over `ways` classes.
fn sized_task(data: &Dataset, ways: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
    let per_class = size.div_ceil(ways);
    let mut base = sample_task(data, FewShotSpec::new(ways, per_class)?, rng)?;
    let pick = |items: &[crate::data::ImageExample], idx: &[usize]| {
        let mut order: Vec<usize> = (0..size).map(|k| (k % ways) * per_class + k / ways).collect();
        order.sort_unstable();
        (
            order.iter().map(|&i| items[i].clone()).collect::<Vec<_>>(),
            order.iter().map(|&i| idx[i]).collect::<Vec<_>>(),
        )
    };
    let (support, support_indices) = pick(&base.support, &base.support_indices);
    let (query, query_indices) = pick(&base.query, &base.query_indices);
    base.support = support;
    base.support_indices = support_indices;
    base.query = query;
    base.query_indices = query_indices;
    Ok(base)
}

/// Median wall time of one reconstruction per (target, iterations, size).
fn bench(spec: &ExperimentSpec, data: &Data) -> Result<Vec<ResultRow>> {
    let ways = spec.ways[0];
    let arch = Architecture::mnist(ways);
    let omega = arch.init(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let iters = &spec.bench.iterations;
    let mut rows = Vec::new();
    for &target in &spec.targets {
        // medians[i][j]: iterations[i], sizes[j]
        let mut medians = vec![vec![0.0; spec.bench.sizes.len()]; iters.len()];
        for (j, &size) in spec.bench.sizes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ size as u64);
            let task = sized_task(&data.train, ways, size, &mut rng)?;
            let trace = run_task(&arch, &omega, &task, &spec.train, &mut NoHooks)?;
            let (designated, x0) = match target {
                AttackTarget::Query => (task.query_batch(), &task.query[0]),
                AttackTarget::Support => (task.support_batch(), &task.support[0]),
            };
            let prior = Prior {
                pixels: x0.flat().to_vec(),
                labels: designated.labels.clone(),
            };
            let query = task.query_batch();
            let run = |iterations: usize| -> Result<f64> {
                let cfg = AttackConfig {
                    iterations,
                    batch_slots: size,
                    ..spec.attack
                };
                let start = Instant::now();
                match target {
                    AttackTarget::Query => {
                        reconstruct_query(&arch, &trace.gradient, &omega, &prior, &cfg)?;
                    }
                    AttackTarget::Support => {
                        reconstruct_support(
                            &arch,
                            &trace.gradient,
                            &omega,
                            &query,
                            &prior,
                            &cfg,
                            spec.train.alpha_inner,
                        )?;
                    }
                }
                Ok(start.elapsed().as_secs_f64())
            };
            // repetitions interleave the iteration counts so slow drift in
            // machine speed hits every count alike; pass 0 is an untimed warm-up
            let mut times = vec![Vec::with_capacity(spec.bench.repetitions); iters.len()];
            for rep in 0..=spec.bench.repetitions {
                for (i, &iterations) in iters.iter().enumerate() {
                    let t = run(iterations)?;
                    if rep > 0 {
                        times[i].push(t);
                    }
                }
            }
            for (i, mut t) in times.into_iter().enumerate() {
                t.sort_by(f64::total_cmp);
                medians[i][j] = t[t.len() / 2];
            }
        }
        for (i, &iterations) in iters.iter().enumerate() {
            for (j, &size) in spec.bench.sizes.iter().enumerate() {
                rows.push(ResultRow {
                    experiment_id: format!("bench/{}/iters{iterations}/size{size}", target.as_str()),
                    dataset: data.name.clone(),
                    w: ways,
                    s: size,
                    epoch: iterations,
                    target: target.as_str().into(),
                    site: "none".into(),
                    mu: 0.0,
                    sigma: 0.0,
                    n: spec.bench.repetitions,
                    accuracy: f64::NAN,
                    recall: f64::NAN,
                    precision: f64::NAN,
                    meta_test_accuracy: f64::NAN,
                    wall_seconds: medians[i][j],
                    seed: spec.seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Sigma values inside the confident noise area for one (site, target) sweep:
/// attack accuracy at most `atk_max` and meta-test accuracy within
/// `learn_drop` of the noiseless baseline. Rows with other sites or targets
/// are ignored; the baseline is the row with `sigma == 0`.
pub fn confident_sigmas(rows: &[ResultRow], site: &str, target: &str, area: ConfidentArea) -> Vec<f64> {
    let cells: Vec<&ResultRow> = rows.iter().filter(|r| r.site == site && r.target == target).collect();
    let Some(base) = cells.iter().find(|r| r.sigma == 0.0).map(|r| r.meta_test_accuracy) else {
        return Vec::new();
    };
    let mut out: Vec<f64> = cells
        .iter()
        .filter(|r| r.accuracy <= area.atk_max && r.meta_test_accuracy >= base - area.learn_drop)
        .map(|r| r.sigma)
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Contiguous runs of confident sigmas along the swept grid, as closed intervals.
pub fn confident_bands(grid: &[f64], confident: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut bands = Vec::new();
    let mut start: Option<f64> = None;
    let mut prev = 0.0;
    for &s in &sorted {
        if confident.contains(&s) {
            start.get_or_insert(s);
            prev = s;
        } else if let Some(a) = start.take() {
            bands.push((a, prev));
        }
    }
    if let Some(a) = start {
        bands.push((a, prev));
    }
    bands
}

fn noise_sweep(spec: &ExperimentSpec, data: &Data, artifacts: &mut Vec<PathBuf>) -> Result<Vec<ResultRow>> {
    let mut sigmas = spec.noise.sigmas.clone();
    if !sigmas.contains(&0.0) {
        sigmas.insert(0, 0.0);
    }
    let w = spec.ways[0];
    let s = spec.shots[0];
    let few_shot = FewShotSpec::new(w, s)?;
    let mut rows = Vec::new();
    for &site in &spec.noise.sites {
        for &sigma in &sigmas {
            for seed in cell_seeds(spec) {
                let noise = NoiseSpec::new(site, spec.noise.mu, sigma, seed ^ 0xD1CE)?;
                let mut hooks = NoiseInjector::new(noise)?;
                let traj = train_cell(spec, data, few_shot, spec.train.epochs, seed, &mut hooks)?;
                let mt = *traj.meta_test_accuracy.last().expect("scores");
                let omega = &traj.checkpoints[spec.attack_epoch].omega;
                for &target in &spec.targets {
                    let cell = Cell {
                        id: format!("noise-sweep/{}/{}", site.as_str(), target.as_str()),
                        few_shot,
                        epoch: spec.attack_epoch,
                        target,
                        noise: Some(noise),
                        seed,
                        meta_test_accuracy: mt,
                        data,
                    };
                    rows.push(play_cell(spec, &cell, omega)?);
                }
            }
        }
    }
    let averaged = average_replicates(&rows);
    for &site in &spec.noise.sites {
        for &target in &spec.targets {
            let conf = confident_sigmas(&averaged, site.as_str(), target.as_str(), spec.confident);
            let cells: Vec<&ResultRow> = averaged
                .iter()
                .filter(|r| r.site == site.as_str() && r.target == target.as_str())
                .collect();
            let floor = sigmas.iter().copied().filter(|&v| v > 0.0).fold(f64::MAX, f64::min);
            let offset = if floor == f64::MAX { 1.0 } else { floor / 2.0 };
            let plot = Plot {
                title: format!("{} noise vs {} attack", site.as_str(), target.as_str()),
                x_label: "sigma".into(),
                y_label: "accuracy".into(),
                series: vec![
                    Series {
                        name: "attack accuracy".into(),
                        points: cells.iter().map(|r| (r.sigma, r.accuracy)).collect(),
                    },
                    Series {
                        name: "meta-test accuracy".into(),
                        points: cells.iter().map(|r| (r.sigma, r.meta_test_accuracy)).collect(),
                    },
                ],
                bands: confident_bands(&sigmas, &conf),
                log_x_offset: Some(offset),
            };
            let path = spec
                .output_dir
                .join(format!("noise-{}-{}.svg", site.as_str(), target.as_str()));
            emit_plot(&plot, &path)?;
            artifacts.push(path);
        }
    }
    Ok(rows)
}

/// Mean accuracy and meta-test accuracy per (experiment, w, s, epoch, target, site, sigma).
pub fn average_replicates(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut out: Vec<(ResultRow, usize)> = Vec::new();
    for r in rows {
        let same = |o: &ResultRow| {
            o.experiment_id == r.experiment_id
                && o.w == r.w
                && o.s == r.s
                && o.epoch == r.epoch
                && o.target == r.target
                && o.site == r.site
                && o.sigma.to_bits() == r.sigma.to_bits()
        };
        match out.iter_mut().find(|(o, _)| same(o)) {
            Some((o, k)) => {
                o.accuracy += r.accuracy;
                o.recall += r.recall;
                o.precision += r.precision;
                o.meta_test_accuracy += r.meta_test_accuracy;
                *k += 1;
            }
            None => out.push((r.clone(), 1)),
        }
    }
    out.into_iter()
        .map(|(mut o, k)| {
            let k = k as f64;
            o.accuracy /= k;
            o.recall /= k;
            o.precision /= k;
            o.meta_test_accuracy /= k;
            o
        })
        .collect()
}

fn sweep_plot(spec: &ExperimentSpec, rows: &[ResultRow]) -> Plot {
    let averaged = average_replicates(rows);
    let (x_label, x_of): (&str, fn(&ResultRow) -> f64) = match spec.command {
        Command::SweepWays => ("ways", |r| r.w as f64),
        Command::SweepShots => ("shots", |r| r.s as f64),
        _ => ("epoch", |r| r.epoch as f64),
    };
    let series = spec
        .targets
        .iter()
        .map(|t| Series {
            name: format!("{} attack", t.as_str()),
            points: averaged
                .iter()
                .filter(|r| r.target == t.as_str())
                .map(|r| (x_of(r), r.accuracy))
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    Plot {
        title: format!("attack accuracy by {x_label}"),
        x_label: x_label.into(),
        y_label: "attack accuracy".into(),
        series,
        bands: Vec::new(),
        log_x_offset: None,
    }
}

fn verify_theory(spec: &ExperimentSpec) -> Result<String> {
    use std::fmt::Write as _;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = String::new();
    let (mut collisions, mut unsatisfied, mut skipped) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    for k in 0..spec.theory_instances {
        let inst = sample_instance(&mut rng);
        let _ = writeln!(
            out,
            "instance {k}: a={:.6} b={:.6} D^s=({:.6}, {:.6}) D^q=({:.6}, {:.6}) M^s=({:.6}, {:.6}) alpha={:.6}",
            inst.model.a,
            inst.model.b,
            inst.support.x,
            inst.support.y,
            inst.query.x,
            inst.query.y,
            inst.candidate.x,
            inst.candidate.y,
            inst.alpha
        );
        match inst.verify() {
            Ok(report) => {
                if let Prop1Report::Collision(c) = &report {
                    collisions += 1;
                    worst = worst.max(c.reproduction_error);
                } else {
                    unsatisfied += 1;
                }
                out.push_str(&report.render());
            }
            Err(e) => {
                skipped += 1;
                let _ = writeln!(out, "rejected: {e}");
            }
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "summary: {collisions} collisions, {unsatisfied} unsatisfied, {skipped} rejected; max reproduction error {worst:.3e}"
    );
    let probe = crate::theory::compare_printed_hessian(
        &crate::theory::NeuronModel { a: 1.0, b: 0.0 },
        crate::theory::NeuronSample { x: 2.0, y: 0.5 },
    )?;
    let _ = writeln!(
        out,
        "printed Hessian check at a=1 b=0 x=2 y=0.5: exact {:?}, printed {:?}, max |diff| {:.3e} ({})",
        probe.exact,
        probe.printed,
        probe.max_abs_difference,
        if probe.agrees(1e-12) { "agrees" } else { "mismatch" }
    );
    Ok(out)
}
