//! Tunable perceptual and style losses: per-term weights produced from
//! unconstrained parameters through a scaled sigmoid, so each weight
//! lives strictly inside (0, lambda).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, MainWeights};
use crate::nets::FeatureExtractor;
use crate::ops::sigmoid;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};

/// Weight ceilings and term count for the tunable losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuxConfig {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub terms: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            lambda_p: 2.0,
            lambda_s: 750.0,
            terms: 3,
        }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_p <= 0.0 || self.lambda_s <= 0.0 {
            return Err(Error::rejected("weight ceilings must be positive"));
        }
        if self.terms == 0 {
            return Err(Error::rejected("term count must be positive"));
        }
        Ok(())
    }

    /// Ceilings for the flat (perceptual ++ style) term ordering.
    pub fn flat_lambdas(&self) -> Vec<f64> {
        let mut v = vec![self.lambda_p; self.terms];
        v.extend(std::iter::repeat(self.lambda_s).take(self.terms));
        v
    }
}

/// Unconstrained per-term parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxParams {
    pub phi_p: Vec<f64>,
    pub phi_s: Vec<f64>,
}

impl AuxParams {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.phi_p.clone();
        v.extend_from_slice(&self.phi_s);
        v
    }

    pub fn from_flat(flat: &[f64], terms: usize) -> AuxParams {
        AuxParams {
            phi_p: flat[..terms].to_vec(),
            phi_s: flat[terms..].to_vec(),
        }
    }
}

/// Sigmoid-mapped weights, each strictly inside (0, lambda).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxWeights {
    pub omega_p: Vec<f64>,
    pub omega_s: Vec<f64>,
}

impl AuxWeights {
    pub fn uniform(p: f64, s: f64, terms: usize) -> AuxWeights {
        AuxWeights {
            omega_p: vec![p; terms],
            omega_s: vec![s; terms],
        }
    }

    pub fn in_bounds(&self, cfg: &AuxConfig) -> bool {
        self.omega_p.iter().all(|&w| w > 0.0 && w < cfg.lambda_p)
            && self.omega_s.iter().all(|&w| w > 0.0 && w < cfg.lambda_s)
    }
}

/// omega = lambda * sigmoid(phi), element-wise.
pub fn weights_from_params(cfg: &AuxConfig, params: &AuxParams) -> AuxWeights {
    AuxWeights {
        omega_p: params
            .phi_p
            .iter()
            .map(|&p| cfg.lambda_p * sigmoid(p))
            .collect(),
        omega_s: params
            .phi_s
            .iter()
            .map(|&p| cfg.lambda_s * sigmoid(p))
            .collect(),
    }
}

/// All parameters zero, so every weight starts at lambda/2. With the
/// default lambda_p = 2 the perceptual weights start at exactly 1 and the
/// tunable losses reduce to the standard ones.
pub fn init_equal(cfg: &AuxConfig) -> AuxParams {
    AuxParams {
        phi_p: vec![0.0; cfg.terms],
        phi_s: vec![0.0; cfg.terms],
    }
}

/// Random parameters in U(-2, 2) from the splitmix64 stream.
pub fn init_random(cfg: &AuxConfig, seed: u64) -> AuxParams {
    let mut rng = SplitMix64::new(seed);
    let mut draw = |n: usize| (0..n).map(|_| rng.next_range(-2.0, 2.0)).collect();
    AuxParams {
        phi_p: draw(cfg.terms),
        phi_s: draw(cfg.terms),
    }
}

/// Left-fold weighted sum: w1*t1 + w2*t2 + ... Weight 1.0 multiplies
/// exactly, so unit weights reproduce the unweighted fold bit for bit.
pub fn weighted_sum(tape: &mut Tape, terms: &[NodeId], weights: &[f64]) -> Result<NodeId> {
    if terms.len() != weights.len() {
        return Err(Error::DimMismatch {
            expected: terms.len(),
            got: weights.len(),
        });
    }
    let mut acc = tape.scale(terms[0], weights[0]);
    for (t, w) in terms[1..].iter().zip(&weights[1..]) {
        let wt = tape.scale(*t, *w);
        acc = tape.add(acc, wt)?;
    }
    Ok(acc)
}

/// Tunable perceptual loss: the weighted sum of the three perceptual terms.
pub fn tpl(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt: NodeId,
    omega_p: &[f64],
) -> Result<NodeId> {
    let terms: Vec<NodeId> = (1..=omega_p.len())
        .map(|n| losses::perceptual_term(tape, fe, pred, gt, n))
        .collect::<Result<_>>()?;
    weighted_sum(tape, &terms, omega_p)
}

/// Tunable style loss: the weighted sum of the three style terms.
pub fn tsl(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt: NodeId,
    omega_s: &[f64],
) -> Result<NodeId> {
    let terms: Vec<NodeId> = (1..=omega_s.len())
        .map(|n| losses::style_term(tape, fe, pred, gt, n))
        .collect::<Result<_>>()?;
    weighted_sum(tape, &terms, omega_s)
}

/// The full training loss: weighted main + tunable perceptual + tunable
/// style. This is the only loss the generator ever trains on.
pub fn total_loss(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt: NodeId,
    lambda: &MainWeights,
    weights: &AuxWeights,
) -> Result<NodeId> {
    let (main, _, _) = losses::main_loss(tape, pred, gt, lambda)?;
    let p = tpl(tape, fe, pred, gt, &weights.omega_p)?;
    let s = tsl(tape, fe, pred, gt, &weights.omega_s)?;
    let mp = tape.add(main, p)?;
    tape.add(mp, s)
}

/// d(tpl)/d(phi_n) for fixed images: the sigmoid chain
/// omega_n * (1 - omega_n / lambda) * term_n.
pub fn tpl_phi_gradient(cfg: &AuxConfig, params: &AuxParams, term_values: &[f64]) -> Vec<f64> {
    params
        .phi_p
        .iter()
        .zip(term_values)
        .map(|(&phi, &t)| {
            let w = cfg.lambda_p * sigmoid(phi);
            w * (1.0 - w / cfg.lambda_p) * t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    fn rand_img(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| rng.next_f64())
    }

    #[test]
    fn weights_map_through_sigmoid() {
        let cfg = AuxConfig::default();
        let p = init_equal(&cfg);
        let w = weights_from_params(&cfg, &p);
        assert_eq!(w.omega_p, vec![1.0; 3]);
        assert_eq!(w.omega_s, vec![375.0; 3]);

        // saturation: weight approaches but never reaches the ceiling
        let sat = AuxParams {
            phi_p: vec![22.0; 3],
            phi_s: vec![22.0; 3],
        };
        let w = weights_from_params(&cfg, &sat);
        for v in &w.omega_s {
            assert!((v - 750.0).abs() < 1e-6 && *v < 750.0);
        }

        // sigma(ln 3) = 0.75, so lambda 2 gives 1.5
        let ln3 = AuxParams {
            phi_p: vec![3.0f64.ln(); 3],
            phi_s: vec![0.0; 3],
        };
        let w = weights_from_params(&cfg, &ln3);
        for v in &w.omega_p {
            assert!((v - 1.5).abs() < 1e-12);
        }
        assert!(w.in_bounds(&cfg));
    }

    #[test]
    fn init_equal_is_reproducible_and_random_differs() {
        let cfg = AuxConfig::default();
        assert_eq!(init_equal(&cfg), init_equal(&cfg));
        let r1 = init_random(&cfg, 5);
        let r2 = init_random(&cfg, 5);
        assert_eq!(r1, r2);
        assert_ne!(r1, init_random(&cfg, 6));
        for v in r1.phi_p.iter().chain(&r1.phi_s) {
            assert!(v.is_finite() && *v >= -2.0 && *v < 2.0);
        }
    }

    #[test]
    fn tpl_reduces_to_standard_at_unit_weights() {
        let fe = FeatureExtractor::init(50);
        let a = rand_img(&[1, 3, 32, 32], 21);
        let b = rand_img(&[1, 3, 32, 32], 22);

        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let weighted = tpl(&mut tape, &fe, x, y, &[1.0, 1.0, 1.0]).unwrap();
        let standard = losses::standard_perceptual(&mut tape, &fe, x, y).unwrap();
        // bit-for-bit: same summation order, exact multiplication by 1.0
        assert_eq!(
            tape.value(weighted).item().to_bits(),
            tape.value(standard).item().to_bits()
        );

        let ws = tsl(&mut tape, &fe, x, y, &[1.0, 1.0, 1.0]).unwrap();
        let ss = losses::standard_style(&mut tape, &fe, x, y).unwrap();
        assert_eq!(tape.value(ws).item().to_bits(), tape.value(ss).item().to_bits());
    }

    #[test]
    fn tpl_matches_dot_product_oracle() {
        let fe = FeatureExtractor::init(51);
        let a = rand_img(&[1, 3, 32, 32], 23);
        let b = rand_img(&[1, 3, 32, 32], 24);
        let w = [0.3, 1.7, 0.9];

        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let got = tpl(&mut tape, &fe, x, y, &w).unwrap();
        let mut dot = 0.0;
        for n in 1..=3 {
            let t = losses::perceptual_term(&mut tape, &fe, x, y, n).unwrap();
            dot += w[n - 1] * tape.value(t).item();
        }
        assert!((tape.value(got).item() - dot).abs() < 1e-12);
    }

    #[test]
    fn tsl_zero_at_equal_images() {
        let fe = FeatureExtractor::init(52);
        let a = rand_img(&[1, 3, 32, 32], 25);
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(a.clone());
        let v = tsl(&mut tape, &fe, x, y, &[100.0, 5.0, 0.1]).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);
    }

    #[test]
    fn total_loss_is_sum_of_parts() {
        let fe = FeatureExtractor::init(53);
        let a = rand_img(&[1, 3, 32, 32], 26);
        let b = rand_img(&[1, 3, 32, 32], 27);
        let lambda = MainWeights::default();
        let cfg = AuxConfig::default();
        let params = init_random(&cfg, 99);
        let w = weights_from_params(&cfg, &params);

        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let total = total_loss(&mut tape, &fe, x, y, &lambda, &w).unwrap();
        let (main, _, _) = losses::main_loss(&mut tape, x, y, &lambda).unwrap();
        let p = tpl(&mut tape, &fe, x, y, &w.omega_p).unwrap();
        let s = tsl(&mut tape, &fe, x, y, &w.omega_s).unwrap();
        let want = tape.value(main).item() + tape.value(p).item() + tape.value(s).item();
        assert!((tape.value(total).item() - want).abs() < 1e-12);
    }

    #[test]
    fn tpl_tsl_linear_in_weights() {
        let fe = FeatureExtractor::init(54);
        let img_a = rand_img(&[1, 3, 32, 32], 28);
        let img_b = rand_img(&[1, 3, 32, 32], 29);
        let w1 = [0.4, 0.9, 1.3];
        let w2 = [1.1, 0.2, 0.7];
        let (a, b) = (0.3, 1.9);
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();

        let mut tape = Tape::new();
        let x = tape.constant(img_a.clone());
        let y = tape.constant(img_b.clone());
        let v1 = tpl(&mut tape, &fe, x, y, &w1).unwrap();
        let v2 = tpl(&mut tape, &fe, x, y, &w2).unwrap();
        let vm = tpl(&mut tape, &fe, x, y, &mix).unwrap();
        let want = a * tape.value(v1).item() + b * tape.value(v2).item();
        assert!((tape.value(vm).item() - want).abs() < 1e-12);
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let fe = FeatureExtractor::init(55);
        let a = rand_img(&[1, 3, 32, 32], 30);
        let b = rand_img(&[1, 3, 32, 32], 31);
        let cfg = AuxConfig::default();
        let params = init_random(&cfg, 123);

        // term values are fixed w.r.t. phi
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let term_vals: Vec<f64> = (1..=3)
            .map(|n| {
                let t = losses::perceptual_term(&mut tape, &fe, x, y, n).unwrap();
                tape.value(t).item()
            })
            .collect();

        let analytic = tpl_phi_gradient(&cfg, &params, &term_vals);
        let h = 1e-6;
        for i in 0..3 {
            let eval = |phi_i: f64| -> f64 {
                let mut p = params.clone();
                p.phi_p[i] = phi_i;
                let w = weights_from_params(&cfg, &p);
                w.omega_p
                    .iter()
                    .zip(&term_vals)
                    .map(|(wv, tv)| wv * tv)
                    .sum()
            };
            let fd = (eval(params.phi_p[i] + h) - eval(params.phi_p[i] - h)) / (2.0 * h);
            assert!(
                crate::gradcheck::rel_err(analytic[i], fd) < 1e-6,
                "phi {}: {} vs {}",
                i,
                analytic[i],
                fd
            );
        }
    }
}
