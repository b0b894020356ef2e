//! Competing reweighting rules behind one interface: fixed weights,
//! AdaLoss (inverse running-mean of each loss), GradNorm (balance
//! gradient norms) and GradSim (gate terms whose gradient opposes the
//! main loss). All of them reweight the same six tunable-loss terms the
//! adaptation algorithm sees, in the flat order (perceptual 1..3,
//! style 1..3).

use serde::{Deserialize, Serialize};

use crate::awa::{build_loss_graph, guidance_value, EvalPool, GuidanceKind};
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::losses::MainWeights;
use crate::nets::{FeatureExtractor, Generator};
use crate::optim::ModelOptimizer;
use crate::tunable::AuxWeights;

/// Which reweighting rule a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReweighterKind {
    Fixed,
    AdaLoss,
    GradNorm,
    GradSim,
    Awa,
}

impl std::fmt::Display for ReweighterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ReweighterKind::Fixed => "fixed",
            ReweighterKind::AdaLoss => "adaloss",
            ReweighterKind::GradNorm => "gradnorm",
            ReweighterKind::GradSim => "gradsim",
            ReweighterKind::Awa => "awa",
        };
        write!(f, "{}", s)
    }
}

/// Declared constants of the baseline recipes, exposed in run configs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaselineConstants {
    pub adaloss_decay: f64,
    pub gradnorm_gamma: f64,
    pub gradnorm_lr: f64,
}

impl Default for BaselineConstants {
    fn default() -> Self {
        BaselineConstants {
            adaloss_decay: 0.99,
            gradnorm_gamma: 1.5,
            gradnorm_lr: 0.025,
        }
    }
}

fn flat_to_weights(flat: &[f64]) -> AuxWeights {
    let n = flat.len() / 2;
    AuxWeights {
        omega_p: flat[..n].to_vec(),
        omega_s: flat[n..].to_vec(),
    }
}

fn weights_to_flat(w: &AuxWeights) -> Vec<f64> {
    let mut v = w.omega_p.clone();
    v.extend_from_slice(&w.omega_s);
    v
}

// ---------------------------------------------------------------------------
// the individual rules
// ---------------------------------------------------------------------------

/// AdaLoss state: exponential moving averages of the term losses and the
/// normalization constant frozen at first emission so the weights start
/// summing to 2N.
#[derive(Debug, Clone)]
pub struct AdaLossState {
    pub decay: f64,
    pub ema: Option<Vec<f64>>,
    pub scale: Option<f64>,
}

impl AdaLossState {
    pub fn new(decay: f64) -> AdaLossState {
        AdaLossState {
            decay,
            ema: None,
            scale: None,
        }
    }
}

/// weight_n = c / (ema_n + 1e-8), ema seeded with the first observation.
pub fn adaloss_weights(state: &mut AdaLossState, losses: &[f64]) -> Vec<f64> {
    match state.ema.as_mut() {
        None => state.ema = Some(losses.to_vec()),
        Some(ema) => {
            for (e, &l) in ema.iter_mut().zip(losses) {
                *e = state.decay * *e + (1.0 - state.decay) * l;
            }
        }
    }
    let ema = state.ema.as_ref().unwrap();
    let inv: Vec<f64> = ema.iter().map(|e| 1.0 / (e + 1e-8)).collect();
    let c = *state
        .scale
        .get_or_insert_with(|| losses.len() as f64 / inv.iter().sum::<f64>());
    inv.iter().map(|i| c * i).collect()
}

/// GradSim gate: keep the base weight when the term gradient points
/// within 90 degrees of the main-loss gradient (cosine >= 0), zero it
/// otherwise.
pub fn gradsim_weights(main_grad: &[f64], term_grads: &[Vec<f64>], base: &[f64]) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nm = norm(main_grad);
    term_grads
        .iter()
        .zip(base)
        .map(|(g, &b)| {
            let dot: f64 = g.iter().zip(main_grad).map(|(a, b)| a * b).sum();
            let cos = dot / (nm * norm(g)).max(1e-12);
            if cos >= 0.0 {
                b
            } else {
                0.0
            }
        })
        .collect()
}

/// GradNorm state: trainable weights, the loss snapshot from iteration 0,
/// and the declared constants.
#[derive(Debug, Clone)]
pub struct GradNormState {
    pub gamma: f64,
    pub lr: f64,
    pub weights: Vec<f64>,
    pub initial_losses: Option<Vec<f64>>,
}

impl GradNormState {
    pub fn new(n_terms: usize, gamma: f64, lr: f64) -> GradNormState {
        GradNormState {
            gamma,
            lr,
            weights: vec![1.0; n_terms],
            initial_losses: None,
        }
    }
}

/// One gradient step on sum_n |w_n G_n - Gbar r_n^gamma| (targets
/// detached, as in the original recipe), then renormalize to
/// sum w = number of terms.
pub fn gradnorm_update(state: &mut GradNormState, grad_norms: &[f64], losses: &[f64]) -> Vec<f64> {
    let n = state.weights.len();
    let initial = state
        .initial_losses
        .get_or_insert_with(|| losses.iter().map(|l| l.max(1e-8)).collect())
        .clone();
    let ratios: Vec<f64> = losses
        .iter()
        .zip(&initial)
        .map(|(l, l0)| l / l0.max(1e-8))
        .collect();
    let mean_ratio = ratios.iter().sum::<f64>() / n as f64;
    let rel: Vec<f64> = ratios
        .iter()
        .map(|r| (r / mean_ratio.max(1e-8)).powf(state.gamma))
        .collect();
    let gbar = state
        .weights
        .iter()
        .zip(grad_norms)
        .map(|(w, g)| w * g)
        .sum::<f64>()
        / n as f64;
    for ((w, &g), r) in state.weights.iter_mut().zip(grad_norms).zip(&rel) {
        let resid = *w * g - gbar * r;
        let sign = if resid > 0.0 {
            1.0
        } else if resid < 0.0 {
            -1.0
        } else {
            0.0
        };
        *w -= state.lr * sign * g;
        *w = w.max(1e-4);
    }
    let sum: f64 = state.weights.iter().sum();
    for w in &mut state.weights {
        *w *= n as f64 / sum;
    }
    state.weights.clone()
}

// ---------------------------------------------------------------------------
// the shared interface
// ---------------------------------------------------------------------------

/// What a reweighter may observe each cycle.
pub struct Observations<'a> {
    /// Term loss values, flat order.
    pub term_losses: Vec<f64>,
    /// Per-term gradient rows, flat order (only when requested).
    pub term_rows: Option<&'a [Vec<f64>]>,
    /// Gradient of the weighted main loss (only when requested).
    pub main_grad: Option<&'a [f64]>,
}

/// A baseline reweighting rule with its state.
#[derive(Debug, Clone)]
pub enum Reweighter {
    Fixed { base: AuxWeights },
    AdaLoss { state: AdaLossState },
    GradNorm { state: GradNormState },
    GradSim { base: AuxWeights },
}

impl Reweighter {
    pub fn new(kind: ReweighterKind, base: AuxWeights, consts: &BaselineConstants) -> Reweighter {
        match kind {
            ReweighterKind::Fixed => Reweighter::Fixed { base },
            ReweighterKind::AdaLoss => Reweighter::AdaLoss {
                state: AdaLossState::new(consts.adaloss_decay),
            },
            ReweighterKind::GradNorm => Reweighter::GradNorm {
                state: GradNormState::new(
                    2 * base.omega_p.len(),
                    consts.gradnorm_gamma,
                    consts.gradnorm_lr,
                ),
            },
            ReweighterKind::GradSim => Reweighter::GradSim { base },
            ReweighterKind::Awa => panic!("the adaptation algorithm is not a baseline reweighter"),
        }
    }

    /// Whether this rule needs per-term gradient rows (and main gradient).
    pub fn needs_rows(&self) -> bool {
        matches!(self, Reweighter::GradNorm { .. } | Reweighter::GradSim { .. })
    }

    pub fn update(&mut self, obs: &Observations) -> Result<AuxWeights> {
        let flat = match self {
            Reweighter::Fixed { base } => weights_to_flat(base),
            Reweighter::AdaLoss { state } => adaloss_weights(state, &obs.term_losses),
            Reweighter::GradNorm { state } => {
                let rows = obs
                    .term_rows
                    .ok_or_else(|| Error::rejected("gradnorm needs term gradient rows"))?;
                let norms: Vec<f64> = rows
                    .iter()
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                gradnorm_update(state, &norms, &obs.term_losses)
            }
            Reweighter::GradSim { base } => {
                let rows = obs
                    .term_rows
                    .ok_or_else(|| Error::rejected("gradsim needs term gradient rows"))?;
                let main = obs
                    .main_grad
                    .ok_or_else(|| Error::rejected("gradsim needs the main gradient"))?;
                gradsim_weights(main, rows, &weights_to_flat(base))
            }
        };
        Ok(flat_to_weights(&flat))
    }
}

/// State of one baseline training run.
#[derive(Clone)]
pub struct BaselineState {
    pub gen: Generator,
    pub model_opt: ModelOptimizer,
    pub reweighter: Reweighter,
    pub lambda: MainWeights,
    pub iter: u64,
}

/// Outcome of a baseline cycle, mirroring the adaptation cycle's record
/// fields (without auxiliary parameters).
pub use crate::awa::CycleOutcome;

/// One baseline training cycle: observe, reweight, step, score.
pub fn baseline_cycle(
    state: &mut BaselineState,
    fe: &FeatureExtractor,
    stream: &dyn BatchStream,
    pool: &EvalPool,
    guidance: GuidanceKind,
) -> Result<CycleOutcome> {
    let batch = stream.batch(state.iter)?;
    let mut graph = build_loss_graph(&state.gen, fe, &batch, &state.lambda)?;
    graph.check_finite(state.iter)?;

    let terms = graph.term_values();
    let term_losses: Vec<f64> = terms
        .perceptual
        .iter()
        .chain(terms.style.iter())
        .copied()
        .collect();
    let (rows_flat, main_grad);
    if state.reweighter.needs_rows() {
        let (p, s) = graph.aux_rows()?;
        let mut all = p;
        all.extend(s);
        rows_flat = Some(all);
        main_grad = Some(graph.grad(graph.main)?);
    } else {
        rows_flat = None;
        main_grad = None;
    }
    let obs = Observations {
        term_losses,
        term_rows: rows_flat.as_deref(),
        main_grad: main_grad.as_deref(),
    };
    let weights = state.reweighter.update(&obs)?;

    let total = graph.total_with(&weights)?;
    let g_model = graph.grad(total)?;
    if g_model.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "baseline model gradient".into(),
            iter: state.iter,
        });
    }
    state.model_opt.step(state.gen.params_mut(), &g_model)?;
    state.iter += 1;

    let guidance_val = guidance_value(&state.gen, fe, pool, guidance)?;
    if !guidance_val.is_finite() {
        return Err(Error::NonFinite {
            context: "guidance metric".into(),
            iter: state.iter - 1,
        });
    }

    Ok(CycleOutcome {
        main: graph.main_values(),
        terms,
        weights,
        params: None,
        guidance: guidance_val,
        surrogate: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NUM_TAPS;
    use crate::rng::SplitMix64;

    #[test]
    fn fixed_is_constant() {
        let base = AuxWeights::uniform(1.0, 375.0, NUM_TAPS);
        let mut rw = Reweighter::Fixed { base: base.clone() };
        for i in 0..5 {
            let obs = Observations {
                term_losses: vec![i as f64; 6],
                term_rows: None,
                main_grad: None,
            };
            assert_eq!(rw.update(&obs).unwrap(), base);
        }
    }

    #[test]
    fn adaloss_symmetry_and_ratio() {
        // equal constant losses -> equal weights
        let mut st = AdaLossState::new(0.99);
        for _ in 0..10 {
            let w = adaloss_weights(&mut st, &[0.5; 6]);
            assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-9));
        }

        // one loss 10x another: weights converge to inverse ratio
        let mut st = AdaLossState::new(0.99);
        let mut w = Vec::new();
        for _ in 0..2000 {
            w = adaloss_weights(&mut st, &[1.0, 0.1]);
        }
        assert!((w[0] / w[1] - 0.1).abs() < 1e-3, "{:?}", w);
    }

    #[test]
    fn adaloss_matches_replayed_ema_oracle() {
        let mut rng = SplitMix64::new(3);
        let traces: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.next_range(0.01, 2.0)).collect())
            .collect();
        let mut st = AdaLossState::new(0.99);
        let produced: Vec<Vec<f64>> = traces
            .iter()
            .map(|l| adaloss_weights(&mut st, l))
            .collect();
        // independent replay
        let mut ema = traces[0].clone();
        let mut c = None;
        for (t, l) in traces.iter().enumerate() {
            if t > 0 {
                for (e, &v) in ema.iter_mut().zip(l) {
                    *e = 0.99 * *e + 0.01 * v;
                }
            }
            let inv: Vec<f64> = ema.iter().map(|e| 1.0 / (e + 1e-8)).collect();
            let cc = *c.get_or_insert(4.0 / inv.iter().sum::<f64>());
            for (got, want) in produced[t].iter().zip(inv.iter().map(|i| cc * i)) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaloss_first_emission_sums_to_term_count() {
        let mut st = AdaLossState::new(0.99);
        let w = adaloss_weights(&mut st, &[0.3, 0.9, 0.05, 1.4, 0.2, 0.7]);
        assert!((w.iter().sum::<f64>() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn gradsim_gating() {
        let main = vec![1.0, 0.0, 0.5];
        let kept = gradsim_weights(&main, &[main.clone()], &[2.0]);
        assert_eq!(kept, vec![2.0]);
        let flipped: Vec<f64> = main.iter().map(|v| -v).collect();
        let zeroed = gradsim_weights(&main, &[flipped], &[2.0]);
        assert_eq!(zeroed, vec![0.0]);
        // orthogonal kept by the >= boundary rule
        let ortho = vec![0.0, 1.0, 0.0];
        let kept = gradsim_weights(&main, &[ortho], &[2.0]);
        assert_eq!(kept, vec![2.0]);
    }

    #[test]
    fn gradnorm_fixed_point_and_renormalization() {
        // equal norms and equal ratios: weights stay equal
        let mut st = GradNormState::new(4, 1.5, 0.025);
        let w = gradnorm_update(&mut st, &[2.0; 4], &[0.5; 4]);
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // renormalization invariant
        let mut st = GradNormState::new(4, 1.5, 0.025);
        let mut rng = SplitMix64::new(9);
        for _ in 0..20 {
            let norms: Vec<f64> = (0..4).map(|_| rng.next_range(0.1, 3.0)).collect();
            let losses: Vec<f64> = (0..4).map(|_| rng.next_range(0.1, 2.0)).collect();
            let w = gradnorm_update(&mut st, &norms, &losses);
            assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-9);
            assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn gradnorm_large_norm_term_shrinks() {
        // two terms with norms (1, 3) and equal loss ratios: the heavy
        // term's weight strictly decreases while approaching its
        // equilibrium (w = 0.5 here; small lr keeps the approach monotone)
        let mut st = GradNormState::new(2, 1.5, 0.01);
        let mut last = 1.0;
        for _ in 0..10 {
            let w = gradnorm_update(&mut st, &[1.0, 3.0], &[1.0, 1.0]);
            assert!(w[1] < last, "weight did not shrink: {:?}", w);
            assert!(w[1] > 0.5);
            last = w[1];
        }
    }

    #[test]
    fn reweighters_replay_exactly() {
        // pure functions of (state, observations): same stream, same output
        let mut rng = SplitMix64::new(77);
        let stream: Vec<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> = (0..30)
            .map(|_| {
                let losses: Vec<f64> = (0..6).map(|_| rng.next_range(0.01, 1.0)).collect();
                let rows: Vec<Vec<f64>> = (0..6)
                    .map(|_| (0..8).map(|_| rng.next_range(-1.0, 1.0)).collect())
                    .collect();
                let main: Vec<f64> = (0..8).map(|_| rng.next_range(-1.0, 1.0)).collect();
                (losses, rows, main)
            })
            .collect();
        let consts = BaselineConstants::default();
        for kind in [
            ReweighterKind::Fixed,
            ReweighterKind::AdaLoss,
            ReweighterKind::GradNorm,
            ReweighterKind::GradSim,
        ] {
            let run = || -> Vec<AuxWeights> {
                let mut rw =
                    Reweighter::new(kind, AuxWeights::uniform(1.0, 375.0, 3), &consts);
                stream
                    .iter()
                    .map(|(losses, rows, main)| {
                        rw.update(&Observations {
                            term_losses: losses.clone(),
                            term_rows: Some(rows),
                            main_grad: Some(main),
                        })
                        .unwrap()
                    })
                    .collect()
            };
            assert_eq!(run(), run(), "{} replay differs", kind);
        }
    }

    #[test]
    fn gradsim_outputs_zero_or_base() {
        let mut rng = SplitMix64::new(5);
        let base = [0.7, 1.3, 0.4];
        for _ in 0..200 {
            let main: Vec<f64> = (0..6).map(|_| rng.next_range(-1.0, 1.0)).collect();
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..6).map(|_| rng.next_range(-1.0, 1.0)).collect())
                .collect();
            let w = gradsim_weights(&main, &rows, &base);
            for (v, b) in w.iter().zip(&base) {
                assert!(*v == 0.0 || v == b);
            }
        }
    }
}
