//! Analytic quadratic testbed: two parameters, two auxiliary losses,
//! every loss a convex quadratic. The inner K-step SGD trajectory is
//! simulated directly, so a grid search over the weight box yields the
//! ground-truth best weights, and the adaptation loop must find them.

use auxweight_core::awa::surrogate_grad_flat;
use auxweight_core::optim::{adam_step_flat, AdamState};
use auxweight_core::ops::sigmoid;
use auxweight_core::rng::SplitMix64;

/// theta in R^2; main loss ||theta-a||^2, auxiliary losses ||theta-b||^2
/// and ||theta-c||^2, guidance ||theta^K - t||^2 after K SGD steps.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub theta0: [f64; 2],
    pub anchor_main: [f64; 2],
    pub anchor_b: [f64; 2],
    pub anchor_c: [f64; 2],
    pub target: [f64; 2],
    pub lambda_main: f64,
    pub alpha: f64,
    pub k: usize,
    pub lambda_box: [f64; 2],
    /// theta is re-sampled uniformly in theta0 +- radius each adaptation
    /// cycle, so the weights (not theta) carry the learning.
    pub resample_radius: f64,
}

impl QuadraticProblem {
    /// K SGD steps from `theta` with fixed weights:
    /// theta <- theta - alpha * (2*lm*(theta-a) + 2*w1*(theta-b) + 2*w2*(theta-c)).
    pub fn simulate(&self, mut theta: [f64; 2], w: [f64; 2]) -> [f64; 2] {
        for _ in 0..self.k {
            let g = self.combined_grad(theta, w);
            theta[0] -= self.alpha * g[0];
            theta[1] -= self.alpha * g[1];
        }
        theta
    }

    fn combined_grad(&self, th: [f64; 2], w: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for i in 0..2 {
            g[i] = 2.0 * self.lambda_main * (th[i] - self.anchor_main[i])
                + 2.0 * w[0] * (th[i] - self.anchor_b[i])
                + 2.0 * w[1] * (th[i] - self.anchor_c[i]);
        }
        g
    }

    pub fn guidance(&self, theta: [f64; 2]) -> f64 {
        (theta[0] - self.target[0]).powi(2) + (theta[1] - self.target[1]).powi(2)
    }
}

/// Result of the weight-box grid search.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub omega_star: [f64; 2],
    pub loss_at_star: f64,
    /// Fractions of the box scanned per axis (shared by both axes).
    pub fractions: Vec<f64>,
    /// Guidance surface, row-major over (fraction_1, fraction_2).
    pub surface: Vec<f64>,
}

/// Exhaustive search over the open weight box at resolution 0.01 of each
/// ceiling. Ties resolve to the lexicographically smallest weight pair
/// (the scan order guarantees it).
pub fn quadratic_oracle(p: &QuadraticProblem) -> GridResult {
    let fractions: Vec<f64> = (1..100).map(|i| i as f64 * 0.01).collect();
    let mut surface = Vec::with_capacity(fractions.len() * fractions.len());
    let mut best = ([f64::NAN, f64::NAN], f64::INFINITY);
    for &f1 in &fractions {
        for &f2 in &fractions {
            let w = [f1 * p.lambda_box[0], f2 * p.lambda_box[1]];
            let loss = p.guidance(p.simulate(p.theta0, w));
            surface.push(loss);
            if loss < best.1 {
                best = (w, loss);
            }
        }
    }
    GridResult {
        omega_star: best.0,
        loss_at_star: best.1,
        fractions,
        surface,
    }
}

/// One adaptation trace on the quadratic problem.
#[derive(Debug, Clone)]
pub struct QuadBenchReport {
    pub name: String,
    pub omega_star: [f64; 2],
    pub omega_final: [f64; 2],
    pub tolerance: [f64; 2],
    pub cycles_run: u64,
    pub converged_at: Option<u64>,
    /// (cycle, omega) samples every 500 cycles, for failure diagnostics.
    pub trajectory: Vec<(u64, [f64; 2])>,
}

impl QuadBenchReport {
    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }
}

/// Run the adaptation loop (SGD inner, AdamW(0.5, 0.999) at rate
/// `aux_lr` outer) against the grid oracle. Convergence is checked every
/// 100 cycles: |omega - omega*| < 0.05 * lambda per component.
pub fn run_quadratic_bench(
    name: &str,
    p: &QuadraticProblem,
    max_cycles: u64,
    aux_lr: f64,
    seed: u64,
) -> QuadBenchReport {
    let oracle = quadratic_oracle(p);
    let tolerance = [0.05 * p.lambda_box[0], 0.05 * p.lambda_box[1]];
    let mut rng = SplitMix64::new(seed);
    let mut phi = [0.0f64; 2];
    let mut adam = AdamState::new(2, 0.5, 0.999, 1e-8, 0.0);
    let mut trajectory = Vec::new();
    let mut converged_at = None;
    let mut cycles_run = 0;

    let omega = |phi: &[f64; 2], p: &QuadraticProblem| {
        [
            p.lambda_box[0] * sigmoid(phi[0]),
            p.lambda_box[1] * sigmoid(phi[1]),
        ]
    };

    for cycle in 0..max_cycles {
        cycles_run = cycle + 1;
        let w = omega(&phi, p);

        // resample theta, then run the lookahead saving per-step rows
        let theta_start = [
            p.theta0[0] + rng.next_range(-p.resample_radius, p.resample_radius),
            p.theta0[1] + rng.next_range(-p.resample_radius, p.resample_radius),
        ];
        let mut theta = theta_start;
        let mut rows_b = Vec::with_capacity(p.k);
        let mut rows_c = Vec::with_capacity(p.k);
        for _ in 0..p.k {
            rows_b.push([
                2.0 * (theta[0] - p.anchor_b[0]),
                2.0 * (theta[1] - p.anchor_b[1]),
            ]);
            rows_c.push([
                2.0 * (theta[0] - p.anchor_c[0]),
                2.0 * (theta[1] - p.anchor_c[1]),
            ]);
            let g = p.combined_grad(theta, w);
            theta[0] -= p.alpha * g[0];
            theta[1] -= p.alpha * g[1];
        }
        let g_s = [
            2.0 * (theta[0] - p.target[0]),
            2.0 * (theta[1] - p.target[1]),
        ];
        let dots = [
            rows_b.iter().map(|r| r[0] * g_s[0] + r[1] * g_s[1]).sum::<f64>(),
            rows_c.iter().map(|r| r[0] * g_s[0] + r[1] * g_s[1]).sum::<f64>(),
        ];
        let grad = surrogate_grad_flat(&p.lambda_box, &phi, &dots);
        let (next, state) = adam_step_flat(&phi, &grad, &adam, aux_lr).expect("dims fixed");
        phi = [next[0], next[1]];
        adam = state;

        if cycle % 500 == 0 {
            trajectory.push((cycle, omega(&phi, p)));
        }
        if cycle % 100 == 99 {
            let w_now = omega(&phi, p);
            let ok = (0..2).all(|i| (w_now[i] - oracle.omega_star[i]).abs() < tolerance[i]);
            if ok {
                converged_at = Some(cycle + 1);
                break;
            }
        }
    }

    let omega_final = omega(&phi, p);
    trajectory.push((cycles_run, omega_final));
    QuadBenchReport {
        name: name.to_string(),
        omega_star: oracle.omega_star,
        omega_final,
        tolerance,
        cycles_run,
        converged_at,
        trajectory,
    }
}

/// The three pinned instances the acceptance gate runs.
pub fn pinned_instances() -> Vec<(String, QuadraticProblem)> {
    // interior optimum, single step: the target is the exact endpoint
    // reached with weights (1.2, 0.8), which sit on the search grid
    let interior_k1 = QuadraticProblem {
        theta0: [1.0, 1.0],
        anchor_main: [0.0, 0.0],
        anchor_b: [2.0, 0.0],
        anchor_c: [0.0, 3.0],
        target: [0.88, 0.88],
        lambda_main: 1.0,
        alpha: 0.1,
        k: 1,
        lambda_box: [2.0, 2.0],
        resample_radius: 0.02,
    };

    // boundary optimum: the pull toward the target is only reachable by
    // saturating the first weight at its ceiling
    let boundary_k1 = QuadraticProblem {
        theta0: [1.0, 1.0],
        anchor_main: [0.0, 0.0],
        anchor_b: [2.0, 0.0],
        anchor_c: [0.0, 3.0],
        target: [1.3, 0.4],
        lambda_main: 1.0,
        alpha: 0.1,
        k: 1,
        lambda_box: [2.0, 2.0],
        resample_radius: 0.02,
    };

    // interior optimum through a five-step lookahead: the target is the
    // simulated endpoint at weights (1.0, 1.4), again on the grid
    let mut interior_k5 = QuadraticProblem {
        theta0: [0.5, -0.5],
        anchor_main: [0.0, 0.0],
        anchor_b: [1.5, 0.5],
        anchor_c: [-0.5, -1.5],
        target: [0.0, 0.0],
        lambda_main: 1.0,
        alpha: 0.05,
        k: 5,
        lambda_box: [2.0, 2.0],
        resample_radius: 0.02,
    };
    interior_k5.target = interior_k5.simulate(interior_k5.theta0, [1.0, 1.4]);

    vec![
        ("interior-k1".to_string(), interior_k1),
        ("boundary-k1".to_string(), boundary_k1),
        ("interior-k5".to_string(), interior_k5),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_problem_ties_resolve_lexicographically() {
        // all anchors and the target coincide with theta0: every weight
        // pair scores zero, so the scan returns the smallest grid point
        let p = QuadraticProblem {
            theta0: [0.5, 0.5],
            anchor_main: [0.5, 0.5],
            anchor_b: [0.5, 0.5],
            anchor_c: [0.5, 0.5],
            target: [0.5, 0.5],
            lambda_main: 1.0,
            alpha: 0.1,
            k: 1,
            lambda_box: [2.0, 2.0],
            resample_radius: 0.0,
        };
        let r = quadratic_oracle(&p);
        assert_eq!(r.omega_star, [0.02, 0.02]);
        assert_eq!(r.loss_at_star, 0.0);
    }

    #[test]
    fn interior_instance_recovers_designed_optimum() {
        let (_, p) = pinned_instances().swap_remove(0);
        let r = quadratic_oracle(&p);
        assert!((r.omega_star[0] - 1.2).abs() < 1e-12);
        assert!((r.omega_star[1] - 0.8).abs() < 1e-12);
        assert!(r.loss_at_star < 1e-20);
    }

    #[test]
    fn k5_instance_recovers_designed_optimum() {
        let (_, p) = pinned_instances().swap_remove(2);
        let r = quadratic_oracle(&p);
        assert!((r.omega_star[0] - 1.0).abs() < 1e-12, "{:?}", r.omega_star);
        assert!((r.omega_star[1] - 1.4).abs() < 1e-12, "{:?}", r.omega_star);
    }

    #[test]
    fn oracle_beats_random_weights() {
        let (_, p) = pinned_instances().swap_remove(1);
        let r = quadratic_oracle(&p);
        let mut rng = SplitMix64::new(12);
        for _ in 0..100 {
            let w = [
                rng.next_range(0.0, p.lambda_box[0]),
                rng.next_range(0.0, p.lambda_box[1]),
            ];
            let loss = p.guidance(p.simulate(p.theta0, w));
            assert!(r.loss_at_star <= loss + 1e-15);
        }
    }

    #[test]
    fn zero_aux_lr_freezes_weights() {
        let (_, p) = pinned_instances().swap_remove(0);
        let r = run_quadratic_bench("frozen", &p, 2000, 0.0, 7);
        assert!(!r.converged());
        assert!((r.omega_final[0] - 1.0).abs() < 1e-12);
        assert!((r.omega_final[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bench_converges_on_interior_instance() {
        let (name, p) = pinned_instances().swap_remove(0);
        let r = run_quadratic_bench(&name, &p, 20_000, 1e-3, 11);
        assert!(
            r.converged(),
            "no convergence: final {:?} vs {:?}",
            r.omega_final,
            r.omega_star
        );
    }
}
