mod common;

use common::rng;
use maml_privacy::theory::*;
use proptest::prelude::*;

fn loss(a: f64, b: f64, x: f64, y: f64) -> f64 {
    ((a * x + b).max(0.0) - y).powi(2)
}

fn fd_grad(m: &NeuronModel, s: NeuronSample) -> [f64; 2] {
    let h = 1e-6;
    [
        (loss(m.a + h, m.b, s.x, s.y) - loss(m.a - h, m.b, s.x, s.y)) / (2.0 * h),
        (loss(m.a, m.b + h, s.x, s.y) - loss(m.a, m.b - h, s.x, s.y)) / (2.0 * h),
    ]
}

fn fd_hessian(m: &NeuronModel, s: NeuronSample) -> [[f64; 2]; 2] {
    let h = 1e-4;
    let f = |da: f64, db: f64| loss(m.a + da, m.b + db, s.x, s.y);
    let haa = (f(h, 0.0) - 2.0 * f(0.0, 0.0) + f(-h, 0.0)) / (h * h);
    let hbb = (f(0.0, h) - 2.0 * f(0.0, 0.0) + f(0.0, -h)) / (h * h);
    let hab = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
    [[haa, hab], [hab, hbb]]
}

/// Shared gradient as the derivative of `L(omega - alpha * grad L_s(omega), q)`,
/// taken by finite differences of the composed map.
fn fd_shared(m: &NeuronModel, s: NeuronSample, q: NeuronSample, alpha: f64) -> [f64; 2] {
    let composed = |a: f64, b: f64| {
        let r = 2.0 * ((a * s.x + b).max(0.0) - s.y) * if a * s.x + b >= 0.0 { 1.0 } else { 0.0 };
        loss(a - alpha * r * s.x, b - alpha * r, q.x, q.y)
    };
    let h = 1e-6;
    [
        (composed(m.a + h, m.b) - composed(m.a - h, m.b)) / (2.0 * h),
        (composed(m.a, m.b + h) - composed(m.a, m.b - h)) / (2.0 * h),
    ]
}

#[test]
fn gradient_examples() {
    let closed = NeuronModel { a: 1.0, b: -5.0 };
    assert_eq!(neuron_gradient(&closed, NeuronSample { x: 1.0, y: 2.0 }), [0.0, 0.0]);
    let m = NeuronModel { a: 1.0, b: 0.0 };
    let s = NeuronSample { x: 1.0, y: 0.0 };
    assert_eq!(m.predict(1.0), 1.0);
    assert_eq!(neuron_gradient(&m, s), [2.0, 2.0]);
}

#[test]
fn hessian_at_unit_example_matches_finite_differences() {
    // z = 1 + 1e-3 keeps the stencil off the kink
    let m = NeuronModel { a: 1.0, b: 1e-3 };
    let s = NeuronSample { x: 1.0, y: 0.0 };
    let h = neuron_hessian(&m, s).unwrap();
    let fd = fd_hessian(&m, s);
    for i in 0..2 {
        for j in 0..2 {
            assert!((h[i][j] - fd[i][j]).abs() < 1e-5, "{h:?} vs {fd:?}");
        }
    }
    assert_eq!(
        neuron_hessian(&NeuronModel { a: -1.0, b: -1.0 }, s).unwrap(),
        [[0.0; 2]; 2]
    );
    assert!(neuron_hessian(&NeuronModel { a: 1.0, b: -1.0 }, s).is_err());
}

#[test]
fn printed_hessian_disagrees_away_from_special_points() {
    let m = NeuronModel { a: 1.0, b: 0.0 };
    let cmp = compare_printed_hessian(&m, NeuronSample { x: 2.0, y: 0.5 }).unwrap();
    assert_eq!(cmp.exact, [[8.0, 4.0], [4.0, 2.0]]);
    assert_eq!(cmp.printed, [[6.0, 2.0], [3.0, 1.0]]);
    assert!(!cmp.agrees(1e-6));
    assert_eq!(cmp.max_abs_difference, 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn derivatives_match_finite_differences(a in -2.0f64..2.0, b in -2.0f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let m = NeuronModel { a, b };
        let s = NeuronSample { x, y };
        prop_assume!(m.z(x).abs() > 1e-2);
        let g = neuron_gradient(&m, s);
        let fd = fd_grad(&m, s);
        prop_assert!((g[0] - fd[0]).abs() < 1e-6 && (g[1] - fd[1]).abs() < 1e-6, "{:?} vs {:?}", g, fd);
        let h = neuron_hessian(&m, s).unwrap();
        let fh = fd_hessian(&m, s);
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((h[i][j] - fh[i][j]).abs() < 1e-5);
            }
        }
        prop_assert!((h[0][1] - h[1][0]).abs() <= 1e-10);
    }

    #[test]
    fn shared_gradient_is_derivative_of_adapted_query_loss(
        a in -2.0f64..2.0, b in -2.0f64..2.0, sx in -2.0f64..2.0, sy in -2.0f64..2.0,
        qx in -2.0f64..2.0, qy in -2.0f64..2.0, alpha in 0.01f64..0.5,
    ) {
        let m = NeuronModel { a, b };
        let s = NeuronSample { x: sx, y: sy };
        let q = NeuronSample { x: qx, y: qy };
        prop_assume!(m.z(sx).abs() > 1e-2);
        let g = neuron_gradient(&m, s);
        let adapted = NeuronModel { a: a - alpha * g[0], b: b - alpha * g[1] };
        prop_assume!(adapted.z(qx).abs() > 1e-2);
        let ours = shared_gradient(&m, s, q, alpha).unwrap();
        let fd = fd_shared(&m, s, q, alpha);
        prop_assert!((ours[0] - fd[0]).abs() < 1e-5 * (1.0 + fd[0].abs()), "{:?} vs {:?}", ours, fd);
        prop_assert!((ours[1] - fd[1]).abs() < 1e-5 * (1.0 + fd[1].abs()));
    }
}

#[test]
fn singular_adaptation_is_reported_not_raised() {
    let m = NeuronModel { a: 1.0, b: 0.5 };
    let r = verify_prop1(
        &m,
        NeuronSample { x: 0.3, y: 0.1 },
        NeuronSample { x: 0.7, y: -0.2 },
        NeuronSample { x: 1.0, y: 0.4 },
        0.25,
    )
    .unwrap();
    match r {
        Prop1Report::Unsatisfied {
            det,
            reason: Unsatisfied::NotInvertible { .. },
            ..
        } => assert!(det.abs() < 1e-12),
        other => panic!("expected a singular report, got {other:?}"),
    }
    assert!(r.render().contains("conditions unsatisfied: invertibility"));
}

#[test]
fn closed_gate_candidate_solves_directly() {
    let m = NeuronModel { a: 1.0, b: 0.5 };
    let support = NeuronSample { x: 0.3, y: 0.1 };
    let query = NeuronSample { x: 0.7, y: -0.2 };
    let candidate = NeuronSample { x: -2.0, y: 0.9 };
    let r = verify_prop1(&m, support, query, candidate, 0.3).unwrap();
    let c = r.collision().expect("collision");
    assert_eq!(c.a_matrix, [[1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(c.g_prime, c.g);
    assert_eq!(c.theta_prime, m);
    assert!(c.reproduction_error < 1e-10);
    // independent re-execution of the pipeline on (M^s, M^q)
    let fd = fd_shared(&m, candidate, c.m_query, 0.3);
    assert!((fd[0] - c.g[0]).abs() < 1e-6 && (fd[1] - c.g[1]).abs() < 1e-6);
    let text = r.render();
    for field in ["det A", "g':", "M^q:", "reproduction error"] {
        assert!(text.contains(field), "missing {field} in\n{text}");
    }
}

#[test]
fn seeded_active_instances_reproduce_the_gradient() {
    let mut r = rng(31);
    let mut active = 0;
    let mut tried = 0;
    while active < 20 {
        tried += 1;
        assert!(tried < 2000, "too few admissible instances");
        let inst = sample_instance(&mut r);
        let Ok(report) = inst.verify() else { continue };
        let Some(c) = report.collision() else { continue };
        if inst.model.z(inst.candidate.x) <= 0.0 {
            continue;
        }
        active += 1;
        assert!(c.reproduction_error < 1e-6, "{inst:?}: {}", c.reproduction_error);
        let fd = fd_shared(&inst.model, inst.candidate, c.m_query, inst.alpha);
        let scale = 1.0 + c.g[0].abs().max(c.g[1].abs());
        assert!(
            (fd[0] - c.g[0]).abs() < 1e-5 * scale && (fd[1] - c.g[1]).abs() < 1e-5 * scale,
            "{fd:?} vs {:?}",
            c.g
        );
    }
}

#[test]
fn identical_candidate_is_rejected() {
    let m = NeuronModel { a: 1.0, b: 0.5 };
    let s = NeuronSample { x: 0.3, y: 0.1 };
    assert!(verify_prop1(&m, s, NeuronSample { x: 0.7, y: -0.2 }, s, 0.1).is_err());
}
