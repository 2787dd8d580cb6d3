mod common;

use common::*;
use maml_privacy::data::{synth_dataset, Dataset, FewShotSpec};
use maml_privacy::maml::*;
use maml_privacy::numcore::*;

/// Differentiates `L(omega - alpha * grad L(omega, s), q)` straight through the tape.
fn unrolled(omega: &ParamVector, s: &LabeledBatch, q: &LabeledBatch, alpha: f64) -> Vec<f64> {
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

fn meta_loss(arch: &Architecture, omega: &ParamVector, s: &LabeledBatch, q: &LabeledBatch, alpha: f64) -> f64 {
    let theta = adapt(arch, omega, s, alpha, 1).unwrap().theta;
    ce_loss(arch, &theta, q).unwrap()
}

#[test]
fn second_order_matches_unrolled_and_finite_differences() {
    for seed in 0..10 {
        let arch = tiny_arch(seed);
        let mut r = rng(seed + 7);
        let omega = arch.init(&mut r);
        let s = random_batch(&arch, 3, &mut r);
        let q = random_batch(&arch, 3, &mut r);
        let alpha = 0.3;
        let g = validation_grad_second(&arch, &omega, &s, &q, alpha).unwrap();
        assert_eq!(g.order, Order::Second);
        let oracle = unrolled(&omega, &s, &q, alpha);
        let err = rel_err(&g.g.flatten(), &oracle);
        assert!(err < 1e-6, "seed {seed}: {err}");
        let fd = fd_gradient(&omega, 1e-5, |w| meta_loss(&arch, w, &s, &q, alpha));
        assert!(rel_err(&g.g.flatten(), &fd) < 1e-4, "seed {seed}: fd mismatch");
    }
}

#[test]
fn zero_inner_step_reduces_to_first_order_exactly() {
    for seed in 0..5 {
        let arch = tiny_arch(seed);
        let mut r = rng(seed);
        let omega = arch.init(&mut r);
        let s = random_batch(&arch, 2, &mut r);
        let q = random_batch(&arch, 2, &mut r);
        let second = validation_grad_second(&arch, &omega, &s, &q, 0.0).unwrap();
        let theta = adapt(&arch, &omega, &s, 0.0, 1).unwrap();
        let first = validation_grad_first(&arch, &theta, &q).unwrap();
        assert_eq!(second.g, first.g);
    }
}

/// `L_s = 0.5 * sum(c_s * w^2)` and `L_q = sum(c_q * w)`: `H_s = diag(c_s)`,
/// so the task gradient is `(1 - alpha * c_s) * c_q` per coordinate.
struct Quadratic(Vec<f64>);
struct Linear(Vec<f64>);

impl TapeLoss for Quadratic {
    fn build(&self, t: &mut Tape, params: &[Var]) -> Var {
        let c = t.leaf(Tensor::new(vec![1, self.0.len()], self.0.clone()).unwrap());
        let sq = t.mul(params[0], params[0]);
        let weighted = t.inner(sq, c);
        t.scale(weighted, 0.5)
    }
}

impl TapeLoss for Linear {
    fn build(&self, t: &mut Tape, params: &[Var]) -> Var {
        let c = t.leaf(Tensor::new(vec![1, self.0.len()], self.0.clone()).unwrap());
        t.inner(params[0], c)
    }
}

#[test]
fn quadratic_closed_form() {
    let cs = vec![0.5, 2.0, -1.0];
    let cq = vec![1.0, -3.0, 0.25];
    let omega = ParamVector::new(vec![(
        "w".into(),
        Tensor::new(vec![1, 3], vec![0.2, -0.1, 0.7]).unwrap(),
    )]);
    let alpha = 0.1;
    let g = second_order_with_losses(&omega, &Quadratic(cs.clone()), &Linear(cq.clone()), alpha).unwrap();
    for i in 0..3 {
        let expect = (1.0 - alpha * cs[i]) * cq[i];
        assert!((g.flatten()[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn meta_update_averages_task_gradients() {
    let arch = tiny_arch(3);
    let omega = arch.init(&mut rng(1));
    let g1 = GradientVector::from_params(omega.map(|_| 1.0));
    let g2 = GradientVector::from_params(omega.map(|_| 3.0));
    let mk = |g: GradientVector| MamlGradient {
        g,
        order: Order::First,
        source_task: 0,
    };
    let updated = meta_update(&omega, &[mk(g1), mk(g2)], 0.5).unwrap();
    let expect = omega.map(|w| w - 1.0);
    assert!(rel_err(&updated.flatten(), &expect.flatten()) < 1e-15);
    assert!(meta_update(&omega, &[], 0.5).is_err());
}

#[test]
fn training_is_deterministic_and_checkpoints_every_epoch() {
    let data = Dataset::new(synth_dataset(5, 20, &mut rng(3)).unwrap());
    let (train, test) = data.split_per_class(6).unwrap();
    let fs = FewShotSpec::new(3, 1).unwrap();
    let arch = Architecture {
        input_dim: 784,
        hidden_dims: vec![16],
        num_classes: 3,
    };
    let cfg = TrainConfig {
        epochs: 3,
        steps_per_epoch: 4,
        ..TrainConfig::default()
    };
    let eval: Vec<_> = (0..5)
        .map(|_| maml_privacy::data::sample_task(&test, fs, &mut rng(9)).unwrap())
        .collect();
    let run = || {
        let init = arch.init(&mut rng(4));
        train_run(&arch, &cfg, fs, init, &train, &eval, &mut rng(5), &mut NoHooks).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.checkpoints.len(), 4);
    assert_eq!(a.final_state().iteration, 12);
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.meta_test_accuracy, b.meta_test_accuracy);
    assert!(a.meta_test_accuracy.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn first_order_config_skips_hessian_factor() {
    let data = Dataset::new(synth_dataset(4, 6, &mut rng(2)).unwrap());
    let task = maml_privacy::data::sample_task(&data, FewShotSpec::new(2, 1).unwrap(), &mut rng(2)).unwrap();
    let arch = Architecture {
        input_dim: 784,
        hidden_dims: vec![8],
        num_classes: 2,
    };
    let omega = arch.init(&mut rng(8));
    let cfg = TrainConfig {
        order: Order::First,
        ..TrainConfig::default()
    };
    let trace = run_task(&arch, &omega, &task, &cfg, &mut NoHooks).unwrap();
    let expect = grad(&arch, &trace.adapted.theta, &task.query_batch()).unwrap();
    assert_eq!(trace.gradient.g, expect);
}
