mod common;

use common::*;
use maml_privacy::numcore::{ce_loss, cosine_similarity, grad, hvp, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn gradient_matches_central_differences_on_twenty_nets() {
    for seed in 0..20 {
        let arch = tiny_arch(seed);
        let mut r = rng(seed);
        let p = arch.init(&mut r);
        let batch = random_batch(&arch, 4, &mut r);
        let g = grad(&arch, &p, &batch).unwrap();
        let fd = fd_gradient(&p, 1e-5, |q| ce_loss(&arch, q, &batch).unwrap());
        let err = rel_err(&g.flatten(), &fd);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn hvp_matches_dense_fd_hessian_and_is_symmetric() {
    for seed in 0..20 {
        let arch = tiny_arch(seed);
        let mut r = rng(seed + 100);
        let p = arch.init(&mut r);
        let batch = random_batch(&arch, 3, &mut r);
        let n = p.num_params();
        // dense Hessian by differencing the analytic gradient column by column
        let h = 1e-5;
        let flat = p.flatten();
        let mut hess = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[j] += h;
            dn[j] -= h;
            let gu = grad(&arch, &p.unflatten(&up).unwrap(), &batch).unwrap().flatten();
            let gd = grad(&arch, &p.unflatten(&dn).unwrap(), &batch).unwrap().flatten();
            for i in 0..n {
                hess[i][j] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        let v = random_direction(&p, &mut r);
        let vf = v.flatten();
        let expect: Vec<f64> = hess
            .iter()
            .map(|row| row.iter().zip(&vf).map(|(a, b)| a * b).sum())
            .collect();
        let got = hvp(&arch, &p, &batch, &v).unwrap().flatten();
        let err = rel_err(&got, &expect);
        assert!(err < 1e-3, "seed {seed}: hvp relative error {err}");

        // u' H v == v' H u with both sides from the tape
        let u = random_direction(&p, &mut r);
        let huv: f64 = hvp(&arch, &p, &batch, &v).unwrap().dot(&u);
        let hvu: f64 = hvp(&arch, &p, &batch, &u).unwrap().dot(&v);
        assert!(
            (huv - hvu).abs() <= 1e-8 * (1.0 + huv.abs()),
            "seed {seed}: {huv} vs {hvu}"
        );
    }
}

#[test]
fn nested_derivatives_of_a_polynomial() {
    // f(x) = x^3 * y, df/dx = 3x^2 y, d2f/dx2 = 6xy, d3f/dx2dy = 6x
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(1.5));
    let y = t.leaf(Tensor::scalar(-2.0));
    let x2 = t.mul(x, x);
    let x3 = t.mul(x2, x);
    let f = t.mul(x3, y);
    let dx = t.grad(f, &[x])[0];
    let dxx = t.grad(dx, &[x])[0];
    let dxxy = t.grad(dxx, &[y])[0];
    assert!((t.scalar_value(dx) - 3.0 * 2.25 * -2.0).abs() < 1e-12);
    assert!((t.scalar_value(dxx) - 6.0 * 1.5 * -2.0).abs() < 1e-12);
    assert!((t.scalar_value(dxxy) - 9.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hvp_is_linear_in_direction(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let arch = tiny_arch(seed);
        let mut r = rng(seed);
        let p = arch.init(&mut r);
        let batch = random_batch(&arch, 3, &mut r);
        let u = random_direction(&p, &mut r);
        let v = random_direction(&p, &mut r);
        let combo = u.zip_map(&v, |x, y| a * x + b * y);
        let lhs = hvp(&arch, &p, &batch, &combo).unwrap().flatten();
        let hu = hvp(&arch, &p, &batch, &u).unwrap();
        let hv = hvp(&arch, &p, &batch, &v).unwrap();
        let rhs: Vec<f64> = hu.flatten().iter().zip(hv.flatten()).map(|(x, y)| a * x + b * y).collect();
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-9 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(seed in 0u64..1000) {
        let arch = tiny_arch(seed);
        let mut r = rng(seed);
        let p = arch.init(&mut r);
        let u = random_direction(&p, &mut r);
        let v = random_direction(&p, &mut r);
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine_similarity(&v, &u).unwrap());
        prop_assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trips(seed in 0u64..1000) {
        let arch = tiny_arch(seed);
        let p = arch.init(&mut rng(seed));
        prop_assert_eq!(p.unflatten(&p.flatten()).unwrap(), p);
    }
}
