//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Long-running (tens of minutes on one core); everything runs in
//! a single test so the wall-clock measurements are not disturbed by other
//! tests of this binary.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use maml_privacy::attack::AttackTarget;
use maml_privacy::defense::NoiseSite;
use maml_privacy::harness::{
    average_replicates, confident_sigmas, run_experiment, Command, DatasetSource, ExperimentSpec, ResultRow,
};
use maml_privacy::maml::{adapt, validation_grad_first, validation_grad_second};
use maml_privacy::numcore::{ce_loss, grad, hvp, CrossEntropy, ParamVector, Tape, TapeLoss, Var};
use maml_privacy::theory::{sample_instance, Prop1Report};

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn mnist_spec(command: Command, dir: &Path, tag: &str) -> ExperimentSpec {
    let (images, labels) = mnist_paths();
    let mut spec = ExperimentSpec::for_command(command);
    spec.dataset = DatasetSource::Idx {
        name: "mnist-5k".into(),
        images,
        labels,
    };
    spec.ways = vec![3];
    spec.shots = vec![1];
    spec.targets = vec![AttackTarget::Query, AttackTarget::Support];
    spec.n = 40;
    spec.calibration_trials = 40;
    spec.output_dir = dir.join(tag);
    spec
}

fn mean_where(rows: &[ResultRow], keep: impl Fn(&ResultRow) -> bool) -> f64 {
    let picked: Vec<f64> = rows.iter().filter(|r| keep(r)).map(|r| r.accuracy).collect();
    assert!(!picked.is_empty(), "no rows matched");
    picked.iter().sum::<f64>() / picked.len() as f64
}

fn differentiation() -> (bool, String) {
    let start = Instant::now();
    let (mut worst_grad, mut worst_hvp, mut worst_sym) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let arch = tiny_arch(seed);
        let mut r = rng(seed);
        let p = arch.init(&mut r);
        let batch = random_batch(&arch, 4, &mut r);
        let g = grad(&arch, &p, &batch).unwrap().flatten();
        let fd = fd_gradient(&p, 1e-5, |q| ce_loss(&arch, q, &batch).unwrap());
        worst_grad = worst_grad.max(rel_err(&g, &fd));

        let n = p.num_params();
        let flat = p.flatten();
        let mut hess = vec![vec![0.0; n]; n];
        for j in 0..n {
            let (mut up, mut dn) = (flat.clone(), flat.clone());
            up[j] += 1e-5;
            dn[j] -= 1e-5;
            let gu = grad(&arch, &p.unflatten(&up).unwrap(), &batch).unwrap().flatten();
            let gd = grad(&arch, &p.unflatten(&dn).unwrap(), &batch).unwrap().flatten();
            for i in 0..n {
                hess[i][j] = (gu[i] - gd[i]) / 2e-5;
            }
        }
        let v = random_direction(&p, &mut r);
        let vf = v.flatten();
        let expect: Vec<f64> = hess
            .iter()
            .map(|row| row.iter().zip(&vf).map(|(a, b)| a * b).sum())
            .collect();
        worst_hvp = worst_hvp.max(rel_err(&hvp(&arch, &p, &batch, &v).unwrap().flatten(), &expect));
        let u = random_direction(&p, &mut r);
        let uhv = hvp(&arch, &p, &batch, &v).unwrap().dot(&u);
        let vhu = hvp(&arch, &p, &batch, &u).unwrap().dot(&v);
        worst_sym = worst_sym.max((uhv - vhu).abs() / (1.0 + uhv.abs()));
    }
    let t = start.elapsed();
    let pass = worst_grad < 1e-4 && worst_hvp < 1e-3 && worst_sym <= 1e-8 && t < Duration::from_secs(60);
    (
        pass,
        format!("grad {worst_grad:.1e}, hvp {worst_hvp:.1e}, symmetry {worst_sym:.1e}, {t:.1?}"),
    )
}

fn unrolled(
    omega: &ParamVector,
    s: &maml_privacy::numcore::LabeledBatch,
    q: &maml_privacy::numcore::LabeledBatch,
    alpha: f64,
) -> Vec<f64> {
    let mut t = Tape::new();
    let p = omega.bind(&mut t);
    let ls = CrossEntropy { batch: s }.build(&mut t, &p);
    let gs = t.grad(ls, &p);
    let theta: Vec<Var> = p
        .iter()
        .zip(&gs)
        .map(|(&w, &g)| {
            let step = t.scale(g, -alpha);
            t.add(w, step)
        })
        .collect();
    let lq = CrossEntropy { batch: q }.build(&mut t, &theta);
    let g = t.grad(lq, &p);
    omega.read_from(&t, &g).flatten()
}

fn second_order() -> (bool, String) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut exact = true;
    for seed in 0..10 {
        let arch = tiny_arch(seed);
        let mut r = rng(seed + 7);
        let omega = arch.init(&mut r);
        let s = random_batch(&arch, 3, &mut r);
        let q = random_batch(&arch, 3, &mut r);
        let g = validation_grad_second(&arch, &omega, &s, &q, 0.3).unwrap();
        worst = worst.max(rel_err(&g.g.flatten(), &unrolled(&omega, &s, &q, 0.3)));
        let at_zero = validation_grad_second(&arch, &omega, &s, &q, 0.0).unwrap();
        let theta = adapt(&arch, &omega, &s, 0.0, 1).unwrap();
        exact &= at_zero.g == validation_grad_first(&arch, &theta, &q).unwrap().g;
    }
    let t = start.elapsed();
    (
        worst < 1e-6 && exact && t < Duration::from_secs(60),
        format!("unrolled {worst:.1e}, alpha=0 exact {exact}, {t:.1?}"),
    )
}

fn attack(dir: &Path, target: AttackTarget, bar: f64, budget: Duration) -> (bool, String) {
    let mut spec = mnist_spec(Command::AttackEval, dir, target.as_str());
    spec.targets = vec![target];
    let start = Instant::now();
    let rows = run_experiment(&spec).unwrap().rows;
    let t = start.elapsed();
    let r = &rows[0];
    (
        r.accuracy >= bar && t < budget,
        format!(
            "accuracy {:.3} recall {:.3} precision {:.3}, {t:.1?}",
            r.accuracy, r.recall, r.precision
        ),
    )
}

fn shots_trend(dir: &Path) -> (bool, String) {
    let mut spec = mnist_spec(Command::SweepShots, dir, "shots");
    spec.shots = vec![1, 3];
    spec.replicates = 3;
    let rows = run_experiment(&spec).unwrap().rows;
    let mut pass = true;
    let mut detail = Vec::new();
    for target in ["query", "support"] {
        let one = mean_where(&rows, |r| r.target == target && r.s == 1);
        let three = mean_where(&rows, |r| r.target == target && r.s == 3);
        pass &= one > three;
        detail.push(format!("{target} s=1 {one:.3} vs s=3 {three:.3}"));
    }
    (pass, detail.join("; "))
}

fn ways_stability(dir: &Path) -> (bool, String) {
    let mut spec = mnist_spec(Command::SweepWays, dir, "ways");
    spec.ways = vec![3, 5, 7];
    spec.replicates = 3;
    let rows = run_experiment(&spec).unwrap().rows;
    let mut pass = true;
    let mut detail = Vec::new();
    for target in ["query", "support"] {
        let accs: Vec<f64> = [3, 5, 7]
            .iter()
            .map(|&w| mean_where(&rows, |r| r.target == target && r.w == w))
            .collect();
        let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
        pass &= spread <= 0.15;
        detail.push(format!("{target} {accs:.3?} spread {spread:.3}"));
    }
    (pass, detail.join("; "))
}

fn epoch_trends(dir: &Path) -> (bool, String) {
    let mut spec = mnist_spec(Command::SweepEpochs, dir, "epochs");
    spec.train.epochs = 40;
    spec.replicates = 3;
    let rows = run_experiment(&spec).unwrap().rows;
    let at = |target: &str, e: usize| mean_where(&rows, |r| r.target == target && r.epoch == e);
    let (q0, q_end) = (at("query", 0), at("query", 40));
    let s = [at("support", 0), at("support", 20), at("support", 40)];
    let max = s.iter().cloned().fold(f64::MIN, f64::max);
    let support_ok = (s[1] >= s[0] && s[1] >= s[2]) || s[1] >= max - 0.05;
    (
        q0 >= q_end && support_ok,
        format!(
            "query e0 {q0:.3} e40 {q_end:.3}; support e0/e20/e40 {:.3}/{:.3}/{:.3}",
            s[0], s[1], s[2]
        ),
    )
}

fn defense(dir: &Path) -> (bool, String) {
    let mut pass = true;
    let mut detail = Vec::new();
    for (site, target) in [
        (NoiseSite::ValidationGradient, AttackTarget::Query),
        (NoiseSite::AdaptationGradient, AttackTarget::Support),
    ] {
        let mut spec = mnist_spec(Command::NoiseSweep, dir, site.as_str());
        spec.targets = vec![target];
        spec.noise.sites = vec![site];
        spec.replicates = 3;
        // attack the parameters the noisy training run ends with
        spec.attack_epoch = spec.train.epochs;
        let out = run_experiment(&spec).unwrap();
        let averaged = average_replicates(&out.rows);
        let area = confident_sigmas(&averaged, site.as_str(), target.as_str(), spec.confident);
        let plot = spec
            .output_dir
            .join(format!("noise-{}-{}.svg", site.as_str(), target.as_str()));
        let flagged = std::fs::read_to_string(&plot).unwrap().contains("class=\"band\"");
        pass &= !area.is_empty() && flagged;
        let curve: Vec<String> = averaged
            .iter()
            .map(|r| format!("{}:{:.3}/{:.3}", r.sigma, r.accuracy, r.meta_test_accuracy))
            .collect();
        detail.push(format!(
            "{site} x {}: confident sigmas {area:?} (sigma:attack/meta-test {})",
            target.as_str(),
            curve.join(" ")
        ));
    }
    (pass, detail.join("; "))
}

fn runtime_scaling(dir: &Path) -> (bool, String) {
    let mut spec = mnist_spec(Command::Bench, dir, "bench");
    spec.bench.iterations = vec![50, 100, 200];
    let rows = run_experiment(&spec).unwrap().rows;
    let time = |target: &str, it: usize, size: usize| {
        rows.iter()
            .find(|r| r.target == target && r.epoch == it && r.s == size)
            .unwrap()
            .wall_seconds
    };
    let mut pass = true;
    let mut ratios = Vec::new();
    for target in ["query", "support"] {
        for &size in &spec.bench.sizes {
            let ratio = time(target, 200, size) / time(target, 50, size);
            pass &= (3.0..=5.0).contains(&ratio);
            ratios.push(format!("{target}/{size} {ratio:.2}"));
        }
    }
    let mut slower = 0;
    for &it in &spec.bench.iterations {
        for &size in &spec.bench.sizes {
            if time("query", it, size) >= time("support", it, size) {
                slower += 1;
            }
        }
    }
    pass &= slower == 0;
    (
        pass,
        format!(
            "200/50 ratios [{}]; cells where query is not faster: {slower}",
            ratios.join(", ")
        ),
    )
}

fn collisions() -> (bool, String) {
    let start = Instant::now();
    let mut r = rng(2024);
    let (mut admissible, mut reported) = (0, 0);
    let mut worst = 0.0f64;
    while admissible < 10 {
        match sample_instance(&mut r).verify() {
            Ok(Prop1Report::Collision(c)) => {
                admissible += 1;
                worst = worst.max(c.reproduction_error);
            }
            Ok(report @ Prop1Report::Unsatisfied { .. }) => {
                assert!(report.render().contains("conditions unsatisfied"));
                reported += 1;
            }
            Err(_) => {}
        }
    }
    let t = start.elapsed();
    (
        worst < 1e-6 && t < Duration::from_secs(10),
        format!("{admissible} collisions, worst error {worst:.1e}; {reported} structured refusals; {t:.1?}"),
    )
}

fn determinism(dir: &Path) -> (bool, String) {
    let mut bytes = Vec::new();
    for k in 0..2 {
        let mut spec = mnist_spec(Command::AttackEval, dir, &format!("repeat{k}"));
        spec.n = 10;
        spec.calibration_trials = 10;
        run_experiment(&spec).unwrap();
        bytes.push(std::fs::read(spec.output_dir.join("results.csv")).unwrap());
    }
    (bytes[0] == bytes[1], format!("{} CSV bytes per run", bytes[0].len()))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut verdicts = Vec::new();
    let mut record = |id, name, (pass, detail): (bool, String)| {
        println!("[{}] {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        verdicts.push(Verdict { id, name, pass, detail });
    };
    record(1, "differentiation correctness", differentiation());
    record(2, "second-order MAML gradient", second_order());
    record(
        3,
        "query membership inference",
        attack(d, AttackTarget::Query, 0.75, Duration::from_secs(600)),
    );
    record(
        4,
        "support membership inference",
        attack(d, AttackTarget::Support, 0.65, Duration::from_secs(1200)),
    );
    record(5, "shots trend", shots_trend(d));
    record(6, "ways stability", ways_stability(d));
    record(7, "epoch trends", epoch_trends(d));
    record(8, "confident noise area", defense(d));
    record(9, "runtime scaling", runtime_scaling(d));
    record(10, "gradient collision verifier", collisions());
    record(11, "pipeline determinism", determinism(d));

    println!();
    for v in &verdicts {
        println!("{} {:>2} {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name);
    }
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("{} ({})", v.id, v.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join("; "));
}
