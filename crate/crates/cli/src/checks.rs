//! Verification commands: the gradient-check sweep over every op and
//! loss, and the hypergradient oracle checks.

use auxweight_core::awa::{
    guidance_eval, guidance_value, lookahead, oracle_hypergradient_frozen,
    oracle_hypergradient_unrolled, surrogate_grad, GuidanceKind,
};
use auxweight_core::error::Result;
use auxweight_core::fixtures::{tiny_batch, tiny_generator, tiny_pool, TinyStream};
use auxweight_core::gradcheck::{check_against, grad_check, rel_err};
use auxweight_core::losses::{self, MainWeights};
use auxweight_core::nets::{composite, inpaint, FeatureExtractor, Generator};
use auxweight_core::optim::ModelOptimizer;
use auxweight_core::rng::SplitMix64;
use auxweight_core::tape::Tape;
use auxweight_core::tensor::Tensor;
use auxweight_core::tunable::{self, init_random, weights_from_params, AuxConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub struct CheckReport {
    pub entries: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, e)| *e < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<40} {:>14}  (tolerance {:.0e})\n",
            "check", "max rel err", self.tolerance
        ));
        for (name, err) in &self.entries {
            let mark = if *err < self.tolerance { "pass" } else { "FAIL" };
            out.push_str(&format!("{:<40} {:>14.3e}  {}\n", name, err, mark));
        }
        out
    }
}

fn margin_tensor(shape: &[usize], seed: u64, margin: f64) -> Tensor {
    // random values kept away from zero so abs/relu kinks never sit
    // inside the finite-difference window
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| {
        let v = rng.next_range(margin, 1.0);
        if rng.next_f64() < 0.5 {
            -v
        } else {
            v
        }
    })
}

fn maxpool_point(shape: &[usize], seed: u64) -> Tensor {
    // distinct values inside every pooling window (strict maxima)
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |i| i as f64 * 0.01 + rng.next_f64() * 0.004)
}

/// Max error over `points` random points of the op recorded by `build`.
fn op_check<F>(points: usize, seed: u64, shape: &[usize], margin: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, auxweight_core::tape::NodeId) -> Result<auxweight_core::tape::NodeId>,
{
    let mut worst = 0.0f64;
    for i in 0..points {
        let point = margin_tensor(shape, seed.wrapping_add(i as u64), margin);
        worst = worst.max(grad_check(&build, &point, 1e-6)?);
    }
    Ok(worst)
}

/// The full gradient-check sweep. Every differentiable op at 100 random
/// points, then every loss (and both guidance metrics) through the small
/// generator fixture.
pub fn run_gradcheck() -> Result<CheckReport> {
    let mut entries: Vec<(String, f64)> = Vec::new();
    fn push_into(entries: &mut Vec<(String, f64)>, name: &str, err: f64) {
        entries.push((name.to_string(), err));
    }
    let points = 100;

    // --- ops ---
    let kernel = margin_tensor(&[3, 2, 3, 3], 901, 0.05);
    push_into(
        &mut entries,
        "conv2d w.r.t. input",
        op_check(points, 1000, &[1, 2, 6, 6], 0.05, |t, x| {
            let k = t.constant(kernel.clone());
            let b = t.constant(Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());
            let c = t.conv2d(x, k, Some(b), 1, 1)?;
            Ok(t.mean(c))
        })?,
    );
    let input = margin_tensor(&[1, 2, 6, 6], 902, 0.05);
    push_into(
        &mut entries,
        "conv2d w.r.t. kernel",
        op_check(points, 1100, &[3, 2, 3, 3], 0.05, |t, k| {
            let x = t.constant(input.clone());
            let c = t.conv2d(x, k, None, 2, 1)?;
            Ok(t.mean(c))
        })?,
    );
    // maxpool needs strict in-window maxima instead of a sign margin
    let mut worst = 0.0f64;
    for i in 0..points {
        let point = maxpool_point(&[1, 2, 4, 4], 1200 + i as u64);
        worst = worst.max(grad_check(
            |t, x| {
                let p = t.maxpool2d(x)?;
                Ok(t.mean(p))
            },
            &point,
            1e-6,
        )?);
    }
    push_into(&mut entries, "maxpool2d", worst);

    push_into(
        &mut entries,
        "relu",
        op_check(points, 1300, &[2, 3, 4, 4], 1e-3, |t, x| {
            let r = t.relu(x);
            Ok(t.mean(r))
        })?,
    );
    push_into(
        &mut entries,
        "sigmoid",
        op_check(points, 1400, &[2, 3, 4, 4], 0.0, |t, x| {
            let s = t.sigmoid(x);
            Ok(t.mean(s))
        })?,
    );
    push_into(
        &mut entries,
        "abs",
        op_check(points, 1500, &[2, 3, 4, 4], 1e-3, |t, x| {
            let a = t.abs(x);
            Ok(t.mean(a))
        })?,
    );
    push_into(
        &mut entries,
        "square",
        op_check(points, 1600, &[2, 3, 4, 4], 0.0, |t, x| {
            let s = t.square(x);
            Ok(t.mean(s))
        })?,
    );
    let other = margin_tensor(&[2, 3, 4, 4], 903, 0.05);
    for (name, kind) in [
        ("add", auxweight_core::ops::BinaryKind::Add),
        ("sub", auxweight_core::ops::BinaryKind::Sub),
        ("mul", auxweight_core::ops::BinaryKind::Mul),
    ] {
        push_into(
        &mut entries,
            name,
            op_check(points, 1700, &[2, 3, 4, 4], 0.0, |t, x| {
                let o = t.constant(other.clone());
                let y = t.binary(x, o, kind)?;
                let sq = t.square(y);
                Ok(t.mean(sq))
            })?,
        );
    }
    push_into(
        &mut entries,
        "reduce sum",
        op_check(points, 1800, &[2, 3, 4, 4], 0.0, |t, x| Ok(t.sum(x)))?,
    );
    push_into(
        &mut entries,
        "reduce mean",
        op_check(points, 1900, &[2, 3, 4, 4], 0.0, |t, x| {
            let s = t.square(x);
            Ok(t.mean(s))
        })?,
    );
    push_into(
        &mut entries,
        "gram",
        op_check(points, 2000, &[1, 3, 4, 4], 0.0, |t, x| {
            let g = t.gram(x)?;
            let s = t.square(g);
            Ok(t.mean(s))
        })?,
    );
    push_into(
        &mut entries,
        "upsample_nearest",
        op_check(points, 2100, &[1, 2, 4, 4], 0.0, |t, x| {
            let u = t.upsample_nearest(x);
            let s = t.square(u);
            Ok(t.mean(s))
        })?,
    );
    push_into(
        &mut entries,
        "concat_channels",
        op_check(points, 2200, &[1, 2, 4, 4], 0.0, |t, x| {
            let o = t.constant(Tensor::full(&[1, 1, 4, 4], 0.3));
            let c = t.concat_channels(x, o)?;
            let s = t.square(c);
            Ok(t.mean(s))
        })?,
    );

    // --- losses w.r.t. prediction pixels ---
    let fe = FeatureExtractor::init(77);
    let gt = {
        let mut rng = SplitMix64::new(904);
        Tensor::from_fn(&[1, 3, 16, 16], |_| 0.55 + 0.4 * rng.next_f64())
    };
    let pred_point = {
        let mut rng = SplitMix64::new(905);
        Tensor::from_fn(&[1, 3, 16, 16], |_| 0.05 + 0.3 * rng.next_f64())
    };
    push_into(
        &mut entries,
        "l1_loss w.r.t. pred",
        grad_check(
            |t, x| {
                let g = t.constant(gt.clone());
                losses::l1_loss(t, x, g)
            },
            &pred_point,
            1e-6,
        )?,
    );
    push_into(
        &mut entries,
        "tv_loss w.r.t. pred",
        grad_check(|t, x| losses::tv_loss(t, x), &pred_point, 1e-6)?,
    );
    for n in 1..=3 {
        push_into(
        &mut entries,
            &format!("perceptual_term {} w.r.t. pred", n),
            grad_check(
                |t, x| {
                    let g = t.constant(gt.clone());
                    losses::perceptual_term(t, &fe, x, g, n)
                },
                &pred_point,
                1e-6,
            )?,
        );
        push_into(
        &mut entries,
            &format!("style_term {} w.r.t. pred", n),
            grad_check(
                |t, x| {
                    let g = t.constant(gt.clone());
                    losses::style_term(t, &fe, x, g, n)
                },
                &pred_point,
                1e-6,
            )?,
        );
    }
    let cfg = AuxConfig::default();
    let w = weights_from_params(&cfg, &init_random(&cfg, 42));
    push_into(
        &mut entries,
        "tpl w.r.t. pred",
        grad_check(
            |t, x| {
                let g = t.constant(gt.clone());
                tunable::tpl(t, &fe, x, g, &w.omega_p)
            },
            &pred_point,
            1e-6,
        )?,
    );
    push_into(
        &mut entries,
        "tsl w.r.t. pred",
        grad_check(
            |t, x| {
                let g = t.constant(gt.clone());
                tunable::tsl(t, &fe, x, g, &w.omega_s)
            },
            &pred_point,
            1e-6,
        )?,
    );
    push_into(
        &mut entries,
        "total_loss w.r.t. pred",
        grad_check(
            |t, x| {
                let g = t.constant(gt.clone());
                tunable::total_loss(t, &fe, x, g, &MainWeights::default(), &w)
            },
            &pred_point,
            1e-6,
        )?,
    );

    // --- losses w.r.t. generator parameters (195-parameter fixture) ---
    let gen = tiny_generator(500);
    let batch = tiny_batch(501, 2);
    let through_net = |name: &str,
                       entries: &mut Vec<(String, f64)>,
                       build: &dyn Fn(
        &mut Tape,
        auxweight_core::tape::NodeId,
        auxweight_core::tape::NodeId,
    ) -> Result<auxweight_core::tape::NodeId>|
     -> Result<()> {
        let flat = gen.params().flatten();
        let run = |theta: &Tensor| -> f64 {
            let mut g2 = gen.clone();
            g2.params_mut().unflatten(theta.data()).unwrap();
            let mut tape = Tape::new();
            let (pred, _) = inpaint(&g2, &mut tape, &batch.gt, &batch.mask).unwrap();
            let comp = composite(&mut tape, pred, &batch.gt, &batch.mask).unwrap();
            let gt_node = tape.constant(batch.gt.clone());
            let out = build(&mut tape, comp, gt_node).unwrap();
            tape.value(out).item()
        };
        let analytic = {
            let mut tape = Tape::new();
            let (pred, leaves) = inpaint(&gen, &mut tape, &batch.gt, &batch.mask)?;
            let comp = composite(&mut tape, pred, &batch.gt, &batch.mask)?;
            let gt_node = tape.constant(batch.gt.clone());
            let out = build(&mut tape, comp, gt_node)?;
            let grads = tape.backward(out)?;
            grads.flatten(&tape, &leaves)
        };
        let point = Tensor::new(&[flat.len()], flat)?;
        entries.push((name.to_string(), check_against(run, &analytic, &point, 1e-5)));
        Ok(())
    };
    through_net("l1_loss w.r.t. theta", &mut entries, &|t, c, g| {
        losses::l1_loss(t, c, g)
    })?;
    through_net("tv_loss w.r.t. theta", &mut entries, &|t, c, _| {
        losses::tv_loss(t, c)
    })?;
    for n in 1..=3 {
        let fe2 = fe.clone();
        through_net(
            &format!("perceptual_term {} w.r.t. theta", n),
            &mut entries,
            &move |t, c, g| losses::perceptual_term(t, &fe2, c, g, n),
        )?;
        let fe2 = fe.clone();
        through_net(
            &format!("style_term {} w.r.t. theta", n),
            &mut entries,
            &move |t, c, g| losses::style_term(t, &fe2, c, g, n),
        )?;
    }
    {
        let (fe2, w2) = (fe.clone(), w.clone());
        through_net("tpl w.r.t. theta", &mut entries, &move |t, c, g| {
            tunable::tpl(t, &fe2, c, g, &w2.omega_p)
        })?;
        let (fe2, w2) = (fe.clone(), w.clone());
        through_net("tsl w.r.t. theta", &mut entries, &move |t, c, g| {
            tunable::tsl(t, &fe2, c, g, &w2.omega_s)
        })?;
        let (fe2, w2) = (fe.clone(), w.clone());
        through_net("total_loss w.r.t. theta", &mut entries, &move |t, c, g| {
            tunable::total_loss(t, &fe2, c, g, &MainWeights::default(), &w2)
        })?;
    }

    // --- guidance metrics w.r.t. generator parameters ---
    let pool = tiny_pool(502, &fe, 2);
    for (name, kind) in [
        ("guidance mae w.r.t. theta", GuidanceKind::Mae),
        (
            "guidance perceptual-distance w.r.t. theta",
            GuidanceKind::PerceptualDistance,
        ),
    ] {
        let (_, analytic) = guidance_eval(&gen, &fe, &pool, kind)?;
        let flat = gen.params().flatten();
        let run = |theta: &Tensor| -> f64 {
            let mut g2 = gen.clone();
            g2.params_mut().unflatten(theta.data()).unwrap();
            guidance_value(&g2, &fe, &pool, kind).unwrap()
        };
        let point = Tensor::new(&[flat.len()], flat)?;
        push_into(&mut entries, name, check_against(run, &analytic, &point, 1e-6));
    }

    Ok(CheckReport {
        entries,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

// ---------------------------------------------------------------------------
// oracle check
// ---------------------------------------------------------------------------

pub struct OracleReport {
    /// worst relative error of the frozen identity over the state grid
    pub frozen_worst: f64,
    /// cosine(surrogate, unrolled) at alpha = 1e-4, K = 1, per seed
    pub cosines: Vec<f64>,
    /// (alpha, |unrolled - alpha*surrogate|) at K = 2
    pub alpha_errors: Vec<(f64, f64)>,
    /// consecutive error ratios (must each be < 0.6)
    pub ratios: Vec<f64>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.frozen_worst < 1e-10
            && self.cosines.iter().all(|&c| c > 0.99)
            && self.ratios.iter().all(|&r| r < 0.6)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "frozen identity worst rel err: {:.3e} (tolerance 1e-10)\n",
            self.frozen_worst
        ));
        for (i, c) in self.cosines.iter().enumerate() {
            out.push_str(&format!(
                "cosine(surrogate, unrolled) seed {}: {:.6} (> 0.99)\n",
                i, c
            ));
        }
        out.push_str("alpha        error(alpha)   ratio\n");
        for (i, (a, e)) in self.alpha_errors.iter().enumerate() {
            let ratio = if i == 0 {
                String::from("-")
            } else {
                format!("{:.3}", self.alpha_errors[i].1 / self.alpha_errors[i - 1].1)
            };
            out.push_str(&format!("{:<12.1e} {:<14.3e} {}\n", a, e, ratio));
        }
        out
    }
}

struct OracleFixture {
    fe: FeatureExtractor,
    gen: Generator,
    stream: TinyStream,
    pool: auxweight_core::awa::EvalPool,
}

fn oracle_fixture(seed: u64) -> OracleFixture {
    let fe = FeatureExtractor::init(7000 + seed);
    OracleFixture {
        gen: tiny_generator(7100 + seed),
        stream: TinyStream {
            seed: 7200 + seed,
            batch_size: 2,
        },
        pool: tiny_pool(7300 + seed, &fe, 4),
        fe,
    }
}

/// Frozen identity over 20 random states x K in {1,2} x 2 stream seeds,
/// cosine at alpha = 1e-4, and the error-vs-alpha table at K = 2.
pub fn run_oracle_check() -> Result<OracleReport> {
    let lambda = MainWeights::default();
    let cfg = AuxConfig::default();

    let mut frozen_worst = 0.0f64;
    for state in 0..20u64 {
        for seed in 0..2u64 {
            let fx = oracle_fixture(state * 2 + seed);
            let params = init_random(&cfg, 7400 + state);
            let w = weights_from_params(&cfg, &params);
            for k in [1usize, 2] {
                let alpha = 0.02;
                let opt = ModelOptimizer::sgd(alpha);
                let (ahead, bundle, _) =
                    lookahead(&fx.gen, &opt, &fx.fe, &fx.stream, 0, k, &lambda, &w)?;
                let (_, g_s) =
                    guidance_eval(&ahead, &fx.fe, &fx.pool, GuidanceKind::PerceptualDistance)?;
                let (dp, ds) = bundle.dots(&g_s)?;
                let (sp, ss) = surrogate_grad(&cfg, &params, &dp, &ds);
                let (fp, fs) = oracle_hypergradient_frozen(&cfg, &params, &bundle, &g_s, alpha);
                for (f, s) in fp.iter().zip(&sp).chain(fs.iter().zip(&ss)) {
                    frozen_worst = frozen_worst.max(rel_err(*f, alpha * s));
                }
            }
        }
    }

    let surrogate_and_unrolled = |alpha: f64, k: usize, seed: u64| -> Result<(Vec<f64>, Vec<f64>)> {
        let fx = oracle_fixture(50 + seed);
        let params = init_random(&cfg, 7500 + seed);
        let w = weights_from_params(&cfg, &params);
        let kind = GuidanceKind::Mae;
        let opt = ModelOptimizer::sgd(alpha);
        let (ahead, bundle, _) = lookahead(&fx.gen, &opt, &fx.fe, &fx.stream, 0, k, &lambda, &w)?;
        let (_, g_s) = guidance_eval(&ahead, &fx.fe, &fx.pool, kind)?;
        let (dp, ds) = bundle.dots(&g_s)?;
        let (sp, ss) = surrogate_grad(&cfg, &params, &dp, &ds);
        let scaled: Vec<f64> = sp.iter().chain(&ss).map(|v| alpha * v).collect();
        let (up, us) = oracle_hypergradient_unrolled(
            &fx.gen, &fx.fe, &fx.stream, 0, k, &lambda, &cfg, &params, alpha, &fx.pool, kind, 1e-5,
        )?;
        let unrolled: Vec<f64> = up.into_iter().chain(us).collect();
        Ok((scaled, unrolled))
    };

    let mut cosines = Vec::new();
    for seed in 0..2u64 {
        let (scaled, unrolled) = surrogate_and_unrolled(1e-4, 1, seed)?;
        let dot: f64 = scaled.iter().zip(&unrolled).map(|(a, b)| a * b).sum();
        let na: f64 = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = unrolled.iter().map(|v| v * v).sum::<f64>().sqrt();
        cosines.push(dot / (na * nb).max(1e-300));
    }

    let mut alpha_errors = Vec::new();
    for &alpha in &[1e-2, 5e-3, 2.5e-3] {
        let (scaled, unrolled) = surrogate_and_unrolled(alpha, 2, 0)?;
        let err: f64 = scaled
            .iter()
            .zip(&unrolled)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        alpha_errors.push((alpha, err));
    }
    let ratios: Vec<f64> = alpha_errors
        .windows(2)
        .map(|w| w[1].1 / w[0].1)
        .collect();

    Ok(OracleReport {
        frozen_worst,
        cosines,
        alpha_errors,
        ratios,
    })
}
