//! Gradient collisions for a single ReLU neuron trained with one MAML step.
//!
//! The network is `y_hat = relu(a * x + b)` with loss `J = (y_hat - y)^2`.
//! Given the gradient a task learner shares for `(D^s, D^q)`, any alternative
//! support sample `M^s` for which `A = I - alpha * H(M^s)` is invertible
//! admits a query sample `M^q` solving `G(theta'; M^q) = A^-1 g`, so the pair
//! `(M^s, M^q)` yields exactly the same shared gradient.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KINK_TOLERANCE: f64 = 1e-9;
pub const SINGULAR_TOLERANCE: f64 = 1e-12;
pub const ZERO_ENTRY_TOLERANCE: f64 = 1e-12;

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronModel {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronSample {
    pub x: f64,
    pub y: f64,
}

impl NeuronModel {
    pub fn z(&self, x: f64) -> f64 {
        self.a * x + self.b
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.z(x).max(0.0)
    }

    pub fn loss(&self, s: NeuronSample) -> f64 {
        (self.predict(s.x) - s.y).powi(2)
    }

    fn step(&self, alpha: f64, g: Vec2) -> NeuronModel {
        NeuronModel {
            a: self.a - alpha * g[0],
            b: self.b - alpha * g[1],
        }
    }
}

fn gate(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `dJ/d(a, b)`, with the rectifier's derivative taken as 1 at `z = 0`.
pub fn neuron_gradient(model: &NeuronModel, s: NeuronSample) -> Vec2 {
    let z = model.z(s.x);
    let r = 2.0 * (model.predict(s.x) - s.y) * gate(z);
    [s.x * r, r]
}

/// `d^2 J / d(a, b)^2`; undefined on the kink `z = 0`.
pub fn neuron_hessian(model: &NeuronModel, s: NeuronSample) -> Result<Mat2> {
    let z = model.z(s.x);
    if !z.is_finite() {
        return Err(Error::invalid("neuron pre-activation is not finite"));
    }
    if z.abs() < KINK_TOLERANCE {
        return Err(Error::invalid(format!(
            "pre-activation {z:e} is on the rectifier kink; the Hessian is undefined"
        )));
    }
    if z < 0.0 {
        return Ok([[0.0; 2]; 2]);
    }
    let x = s.x;
    Ok([[2.0 * x * x, 2.0 * x], [2.0 * x, 2.0]])
}

/// The entries `[[2x(x-y), 2x(1-y)], [2(x-y), 2(1-y)]]` gated by the rectifier,
/// kept only to be compared with [`neuron_hessian`].
pub fn printed_hessian(model: &NeuronModel, s: NeuronSample) -> Mat2 {
    let f = gate(model.z(s.x));
    let (x, y) = (s.x, s.y);
    [
        [2.0 * x * (x - y) * f, 2.0 * x * (1.0 - y) * f],
        [2.0 * (x - y) * f, 2.0 * (1.0 - y) * f],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianComparison {
    pub exact: Mat2,
    pub printed: Mat2,
    pub max_abs_difference: f64,
}

impl HessianComparison {
    pub fn agrees(&self, tol: f64) -> bool {
        self.max_abs_difference <= tol
    }
}

pub fn compare_printed_hessian(model: &NeuronModel, s: NeuronSample) -> Result<HessianComparison> {
    let exact = neuron_hessian(model, s)?;
    let printed = printed_hessian(model, s);
    let max_abs_difference = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (exact[i][j] - printed[i][j]).abs())
        .fold(0.0, f64::max);
    Ok(HessianComparison {
        exact,
        printed,
        max_abs_difference,
    })
}

fn mat_vec(m: &Mat2, v: Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// `I - alpha * H`.
fn adaptation_jacobian(h: &Mat2, alpha: f64) -> Mat2 {
    [
        [1.0 - alpha * h[0][0], -alpha * h[0][1]],
        [-alpha * h[1][0], 1.0 - alpha * h[1][1]],
    ]
}

/// The gradient a task learner shares after one adaptation step on `support`
/// and validation on `query`.
pub fn shared_gradient(model: &NeuronModel, support: NeuronSample, query: NeuronSample, alpha: f64) -> Result<Vec2> {
    let theta = model.step(alpha, neuron_gradient(model, support));
    let h = neuron_hessian(model, support)?;
    Ok(mat_vec(&adaptation_jacobian(&h, alpha), neuron_gradient(&theta, query)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unsatisfied {
    /// `I - alpha * H(M^s)` is singular.
    NotInvertible { det: f64 },
    /// `g' = A^-1 g` has a zero bias entry, so no active query sample yields it.
    ZeroEntry { g_prime: Vec2 },
    /// The only candidate query input lands where the rectifier is off.
    GateClosed { x: f64, z: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub g: Vec2,
    pub a_matrix: Mat2,
    pub det: f64,
    pub g_prime: Vec2,
    pub theta_prime: NeuronModel,
    pub m_query: NeuronSample,
    pub reproduced: Vec2,
    pub reproduction_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prop1Report {
    Collision(Collision),
    Unsatisfied {
        g: Vec2,
        a_matrix: Mat2,
        det: f64,
        reason: Unsatisfied,
    },
}

impl Prop1Report {
    pub fn collision(&self) -> Option<&Collision> {
        match self {
            Prop1Report::Collision(c) => Some(c),
            Prop1Report::Unsatisfied { .. } => None,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let (g, a, d) = match self {
            Prop1Report::Collision(c) => (c.g, c.a_matrix, c.det),
            Prop1Report::Unsatisfied { g, a_matrix, det, .. } => (*g, *a_matrix, *det),
        };
        let _ = writeln!(out, "shared gradient g: [{:.12e}, {:.12e}]", g[0], g[1]);
        let _ = writeln!(
            out,
            "A = I - alpha*H(M^s): [[{:.12e}, {:.12e}], [{:.12e}, {:.12e}]]",
            a[0][0], a[0][1], a[1][0], a[1][1]
        );
        let _ = writeln!(out, "det A: {d:.12e}");
        match self {
            Prop1Report::Collision(c) => {
                let _ = writeln!(out, "condition (i) invertible: yes");
                let _ = writeln!(out, "condition (ii) nonzero entries: yes");
                let _ = writeln!(out, "g': [{:.12e}, {:.12e}]", c.g_prime[0], c.g_prime[1]);
                let _ = writeln!(out, "theta': a={:.12e} b={:.12e}", c.theta_prime.a, c.theta_prime.b);
                let _ = writeln!(out, "M^q: x={:.12e} y={:.12e}", c.m_query.x, c.m_query.y);
                let _ = writeln!(
                    out,
                    "reproduced g: [{:.12e}, {:.12e}]",
                    c.reproduced[0], c.reproduced[1]
                );
                let _ = writeln!(out, "reproduction error: {:.3e}", c.reproduction_error);
            }
            Prop1Report::Unsatisfied { reason, .. } => {
                let _ = match reason {
                    Unsatisfied::NotInvertible { det } => {
                        writeln!(
                            out,
                            "conditions unsatisfied: invertibility (|det A| = {:.3e})",
                            det.abs()
                        )
                    }
                    Unsatisfied::ZeroEntry { g_prime } => writeln!(
                        out,
                        "conditions unsatisfied: nonzero entries (g' = [{:.3e}, {:.3e}])",
                        g_prime[0], g_prime[1]
                    ),
                    Unsatisfied::GateClosed { x, z } => writeln!(
                        out,
                        "conditions unsatisfied: query gate closed (x' = {x:.6e}, z' = {z:.6e})"
                    ),
                };
            }
        }
        out
    }
}

/// Builds `M^q` so that `(candidate_ms, M^q)` shares the same gradient as
/// `(true_support, true_query)`, then re-runs the pipeline to confirm it.
pub fn verify_prop1(
    model: &NeuronModel,
    true_support: NeuronSample,
    true_query: NeuronSample,
    candidate_ms: NeuronSample,
    alpha: f64,
) -> Result<Prop1Report> {
    if candidate_ms == true_support {
        return Err(Error::invalid(
            "the alternative support sample must differ from the true one",
        ));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid("alpha must be a finite nonnegative real"));
    }
    let g = shared_gradient(model, true_support, true_query, alpha)?;
    let h = neuron_hessian(model, candidate_ms)?;
    let a_matrix = adaptation_jacobian(&h, alpha);
    let d = det(&a_matrix);
    let unsatisfied = |reason| {
        Ok(Prop1Report::Unsatisfied {
            g,
            a_matrix,
            det: d,
            reason,
        })
    };
    if d.abs() <= SINGULAR_TOLERANCE {
        return unsatisfied(Unsatisfied::NotInvertible { det: d });
    }
    let inv = [
        [a_matrix[1][1] / d, -a_matrix[0][1] / d],
        [-a_matrix[1][0] / d, a_matrix[0][0] / d],
    ];
    let g_prime = mat_vec(&inv, g);
    if g_prime[1].abs() <= ZERO_ENTRY_TOLERANCE {
        return unsatisfied(Unsatisfied::ZeroEntry { g_prime });
    }
    let theta_prime = model.step(alpha, neuron_gradient(model, candidate_ms));
    // active gate: G = [2x r, 2r] with r = y_hat - y
    let x = g_prime[0] / g_prime[1];
    let z = theta_prime.z(x);
    if z < 0.0 {
        return unsatisfied(Unsatisfied::GateClosed { x, z });
    }
    let m_query = NeuronSample {
        x,
        y: z - 0.5 * g_prime[1],
    };
    let reproduced = shared_gradient(model, candidate_ms, m_query, alpha)?;
    let reproduction_error = (reproduced[0] - g[0]).hypot(reproduced[1] - g[1]);
    Ok(Prop1Report::Collision(Collision {
        g,
        a_matrix,
        det: d,
        g_prime,
        theta_prime,
        m_query,
        reproduced,
        reproduction_error,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Instance {
    pub model: NeuronModel,
    pub support: NeuronSample,
    pub query: NeuronSample,
    pub candidate: NeuronSample,
    pub alpha: f64,
}

impl Prop1Instance {
    pub fn verify(&self) -> Result<Prop1Report> {
        verify_prop1(&self.model, self.support, self.query, self.candidate, self.alpha)
    }
}

/// A random instance with every quantity drawn from `[-2, 2]` and `alpha` from `[0.01, 0.5]`.
pub fn sample_instance<R: Rng + ?Sized>(rng: &mut R) -> Prop1Instance {
    let mut u = || rng.random_range(-2.0..2.0);
    let model = NeuronModel { a: u(), b: u() };
    let support = NeuronSample { x: u(), y: u() };
    let query = NeuronSample { x: u(), y: u() };
    let candidate = NeuronSample { x: u(), y: u() };
    Prop1Instance {
        model,
        support,
        query,
        candidate,
        alpha: rng.random_range(0.01..0.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_examples() {
        let m = NeuronModel { a: 1.0, b: -5.0 };
        assert_eq!(neuron_gradient(&m, NeuronSample { x: 1.0, y: 0.3 }), [0.0, 0.0]);
        let m = NeuronModel { a: 1.0, b: 0.0 };
        assert_eq!(neuron_gradient(&m, NeuronSample { x: 1.0, y: 0.0 }), [2.0, 2.0]);
    }

    #[test]
    fn hessian_kink_and_closed_gate() {
        let m = NeuronModel { a: 1.0, b: -1.0 };
        assert!(neuron_hessian(&m, NeuronSample { x: 1.0, y: 0.0 }).is_err());
        assert_eq!(
            neuron_hessian(&m, NeuronSample { x: 0.5, y: 0.0 }).unwrap(),
            [[0.0; 2]; 2]
        );
    }

    #[test]
    fn singular_candidate_reported() {
        // det(I - alpha H) = 1 - 2 alpha (1 + x^2) vanishes at alpha = 1/4, x = 1
        let m = NeuronModel { a: 1.0, b: 0.5 };
        let r = verify_prop1(
            &m,
            NeuronSample { x: 0.3, y: 0.1 },
            NeuronSample { x: 0.7, y: -0.2 },
            NeuronSample { x: 1.0, y: 0.4 },
            0.25,
        )
        .unwrap();
        assert!(matches!(
            r,
            Prop1Report::Unsatisfied {
                reason: Unsatisfied::NotInvertible { .. },
                ..
            }
        ));
        assert!(r.render().contains("invertibility"));
    }

    #[test]
    fn identical_candidate_rejected() {
        let m = NeuronModel { a: 1.0, b: 0.5 };
        let s = NeuronSample { x: 0.3, y: 0.1 };
        assert!(verify_prop1(&m, s, s, s, 0.1).is_err());
    }
}
