//! Orchestrates one training run: builds the run state from a config,
//! drives the adaptation or baseline cycles, evaluates the metric panel
//! on the held-out pool each iteration, and writes the run log.

use std::time::Instant;

use auxweight_core::awa::{
    awa_cycle, guidance_value, CycleOutcome, EvalPool, TrainState,
};
use auxweight_core::baselines::{baseline_cycle, BaselineState, Reweighter, ReweighterKind};
use auxweight_core::data::{eval_batch, ProceduralStream};
use auxweight_core::error::Error as CoreError;
use auxweight_core::metrics;
use auxweight_core::nets::{composite, inpaint, FeatureExtractor, Generator};
use auxweight_core::optim::ModelOptimizer;
use auxweight_core::rng::mix;
use auxweight_core::tape::Tape;
use auxweight_core::tensor::Tensor;
use auxweight_core::tunable::{init_equal, init_random, weights_from_params, AuxWeights};

use crate::config::{AuxInit, OptKind, RunConfig};
use crate::runlog::{AbortRecord, CycleRecord, LogWriter, RunHeader, RunSummary};

const FE_SALT: u64 = 0x4645_5854_5241_4354;
const GEN_SALT: u64 = 0x4745_4E45_5241_544F;
const PHI_SALT: u64 = 0x5048_495F_494E_4954;

#[derive(Debug)]
pub enum TrainError {
    Io(std::io::Error),
    Core(CoreError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Io(e) => write!(f, "io error: {}", e),
            TrainError::Core(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

impl From<CoreError> for TrainError {
    fn from(e: CoreError) -> Self {
        TrainError::Core(e)
    }
}

enum Runner {
    Adaptive(Box<TrainState>),
    Baseline(Box<BaselineState>),
}

/// Everything a finished (or aborted) run produced.
pub struct RunArtifacts {
    pub header: RunHeader,
    pub records: Vec<CycleRecord>,
    pub summary: Option<RunSummary>,
    pub abort: Option<AbortRecord>,
}

impl RunArtifacts {
    pub fn aborted(&self) -> bool {
        self.abort.is_some()
    }
}

fn model_optimizer(cfg: &RunConfig, dim: usize) -> ModelOptimizer {
    match cfg.model_opt.kind {
        OptKind::Sgd => ModelOptimizer::sgd(cfg.model_opt.lr),
        OptKind::AdamW => ModelOptimizer::adamw(
            dim,
            cfg.model_opt.lr,
            cfg.model_opt.beta1,
            cfg.model_opt.beta2,
            cfg.model_opt.eps,
            cfg.model_opt.weight_decay,
        ),
    }
}

fn initial_aux_params(cfg: &RunConfig) -> auxweight_core::tunable::AuxParams {
    match cfg.aux_init {
        AuxInit::Equal => init_equal(&cfg.aux),
        AuxInit::Random => init_random(&cfg.aux, mix(cfg.seed ^ PHI_SALT)),
    }
}

/// The constant weights a fixed/gradsim run uses: the configured override
/// or the equal-initialization weights.
fn base_weights(cfg: &RunConfig) -> AuxWeights {
    match &cfg.fixed_weights {
        Some(fw) => AuxWeights {
            omega_p: fw.omega_p.clone(),
            omega_s: fw.omega_s.clone(),
        },
        None => weights_from_params(&cfg.aux, &init_equal(&cfg.aux)),
    }
}

/// Evaluate the metric panel (psnr, ssim, mae, perceptual distance) of
/// the current generator on the held-out pool.
pub fn eval_metrics(
    gen: &Generator,
    fe: &FeatureExtractor,
    pool: &EvalPool,
) -> Result<(f64, f64, f64, f64), CoreError> {
    let total = pool.len() as f64;
    let (mut psnr_sum, mut ssim_sum, mut mae_sum, mut pdist) = (0.0, 0.0, 0.0, 0.0);
    for (chunk, gt_taps) in pool.chunks() {
        let comp = {
            let mut tape = Tape::new();
            let (pred, _) = inpaint(gen, &mut tape, &chunk.gt, &chunk.mask)?;
            let comp = composite(&mut tape, pred, &chunk.gt, &chunk.mask)?;
            tape.value(comp).clone()
        };
        let (_, c, h, w) = comp.shape().nchw();
        let img_len = c * h * w;
        for i in 0..chunk.len() {
            let img = Tensor::new(&[c, h, w], comp.data()[i * img_len..(i + 1) * img_len].to_vec())?;
            let gt = chunk.gt_image(i);
            psnr_sum += metrics::psnr(&img, &gt)?;
            ssim_sum += metrics::ssim(&img, &gt)?;
            mae_sum += metrics::mae_metric(&img, &gt)?;
        }
        // perceptual distance against the cached ground-truth taps
        let comp_taps = fe.extract_eager(&comp)?;
        let mut chunk_pd = 0.0;
        for (ct, gt) in comp_taps.iter().zip(gt_taps) {
            chunk_pd += ct
                .data()
                .iter()
                .zip(gt.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / ct.numel() as f64;
        }
        pdist += (chunk_pd / comp_taps.len() as f64) * chunk.len() as f64 / total;
    }
    Ok((psnr_sum / total, ssim_sum / total, mae_sum / total, pdist))
}

fn record_from(
    iter: u64,
    outcome: &CycleOutcome,
    panel: (f64, f64, f64, f64),
    wallclock_ms: Option<u64>,
) -> CycleRecord {
    let arr3 = |v: &[f64]| -> [f64; 3] { [v[0], v[1], v[2]] };
    CycleRecord {
        iter,
        l1: outcome.main.l1,
        tv: outcome.main.tv,
        perc_terms: outcome.terms.perceptual,
        styl_terms: outcome.terms.style,
        omega_p: arr3(&outcome.weights.omega_p),
        omega_s: arr3(&outcome.weights.omega_s),
        phi_p: outcome.params.as_ref().map(|p| arr3(&p.phi_p)),
        phi_s: outcome.params.as_ref().map(|p| arr3(&p.phi_s)),
        guidance: outcome.guidance,
        psnr: panel.0,
        ssim: panel.1,
        mae: panel.2,
        pdist: panel.3,
        wallclock_ms,
    }
}

/// Means of the metric panel over the last (up to) `window` records.
pub fn summarize(records: &[CycleRecord], window: usize) -> Option<(usize, f64, f64, f64, f64)> {
    if records.is_empty() {
        return None;
    }
    let tail = &records[records.len().saturating_sub(window)..];
    let n = tail.len() as f64;
    Some((
        tail.len(),
        tail.iter().map(|r| r.psnr).sum::<f64>() / n,
        tail.iter().map(|r| r.ssim).sum::<f64>() / n,
        tail.iter().map(|r| r.mae).sum::<f64>() / n,
        tail.iter().map(|r| r.pdist).sum::<f64>() / n,
    ))
}

pub const SUMMARY_WINDOW: usize = 100;

/// Execute a full run and write its log. A non-finite abort is reported
/// in the artifacts (and the log) rather than as an error.
pub fn run_train(cfg: &RunConfig) -> Result<RunArtifacts, TrainError> {
    let fe = FeatureExtractor::init(mix(cfg.seed ^ FE_SALT));
    let gen = Generator::init(mix(cfg.seed ^ GEN_SALT));
    let stream = ProceduralStream::training(cfg.seed, cfg.mask_group, cfg.batch_size);
    let pool = EvalPool::new(
        eval_batch(cfg.seed, cfg.mask_group, cfg.eval_pool).map_err(TrainError::Core)?,
        &fe,
    )
    .map_err(TrainError::Core)?;

    let header = RunHeader {
        config: cfg.clone(),
        param_count: gen.param_count(),
        extractor_checksum: format!("{:016x}", fe.checksum()),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut writer = LogWriter::create(&cfg.out)?;
    writer.header(&header)?;

    let param_count = gen.param_count();
    let mut runner = match cfg.reweighter {
        ReweighterKind::Awa => Runner::Adaptive(Box::new(TrainState::new(
            gen,
            model_optimizer(cfg, param_count),
            cfg.aux,
            initial_aux_params(cfg),
            &cfg.awa,
            cfg.main_loss,
        ))),
        kind => Runner::Baseline(Box::new(BaselineState {
            model_opt: model_optimizer(cfg, gen.param_count()),
            gen,
            reweighter: Reweighter::new(kind, base_weights(cfg), &cfg.baseline),
            lambda: cfg.main_loss,
            iter: 0,
        })),
    };

    let started = Instant::now();
    let mut records: Vec<CycleRecord> = Vec::with_capacity(cfg.iters as usize);
    let mut abort = None;

    for it in 0..cfg.iters {
        let outcome = match &mut runner {
            Runner::Adaptive(state) => awa_cycle(state, &fe, &stream, &pool, &cfg.awa),
            Runner::Baseline(state) => {
                baseline_cycle(state, &fe, &stream, &pool, cfg.awa.guidance)
            }
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(CoreError::NonFinite { context, iter }) => {
                let state_file = write_abort_state(cfg, &runner, iter)?;
                let rec = AbortRecord {
                    iter,
                    context,
                    state_file,
                };
                writer.abort(&rec)?;
                abort = Some(rec);
                break;
            }
            Err(e) => return Err(TrainError::Core(e)),
        };
        let gen_ref = match &runner {
            Runner::Adaptive(s) => &s.gen,
            Runner::Baseline(s) => &s.gen,
        };
        let panel = eval_metrics(gen_ref, &fe, &pool).map_err(TrainError::Core)?;
        let wall = cfg
            .log_wallclock
            .then(|| started.elapsed().as_millis() as u64);
        let record = record_from(it, &outcome, panel, wall);
        writer.record(&record)?;
        records.push(record);
    }

    let summary = if abort.is_none() {
        let s = if records.is_empty() {
            // untrained model: evaluate the panel once
            let gen_ref = match &runner {
                Runner::Adaptive(s) => &s.gen,
                Runner::Baseline(s) => &s.gen,
            };
            let panel = eval_metrics(gen_ref, &fe, &pool).map_err(TrainError::Core)?;
            let g = guidance_value(gen_ref, &fe, &pool, cfg.awa.guidance)
                .map_err(TrainError::Core)?;
            RunSummary {
                iters: 0,
                window: 0,
                psnr: panel.0,
                ssim: panel.1,
                mae: panel.2,
                pdist: panel.3,
                initial_guidance: Some(g),
                final_guidance: Some(g),
                wallclock_ms: cfg
                    .log_wallclock
                    .then(|| started.elapsed().as_millis() as u64),
            }
        } else {
            let (window, psnr, ssim, mae, pdist) =
                summarize(&records, SUMMARY_WINDOW).expect("records non-empty");
            RunSummary {
                iters: records.len() as u64,
                window,
                psnr,
                ssim,
                mae,
                pdist,
                initial_guidance: records.first().map(|r| r.guidance),
                final_guidance: records.last().map(|r| r.guidance),
                wallclock_ms: cfg
                    .log_wallclock
                    .then(|| started.elapsed().as_millis() as u64),
            }
        };
        writer.summary(&s)?;
        Some(s)
    } else {
        None
    };

    writer.finish()?;
    Ok(RunArtifacts {
        header,
        records,
        summary,
        abort,
    })
}

fn write_abort_state(
    cfg: &RunConfig,
    runner: &Runner,
    iter: u64,
) -> Result<Option<String>, TrainError> {
    #[derive(serde::Serialize)]
    struct AbortState<'a> {
        iter: u64,
        theta: Vec<f64>,
        phi_p: Option<&'a [f64]>,
        phi_s: Option<&'a [f64]>,
    }
    let state = match runner {
        Runner::Adaptive(s) => AbortState {
            iter,
            theta: s.gen.params().flatten(),
            phi_p: Some(&s.aux_params.phi_p),
            phi_s: Some(&s.aux_params.phi_s),
        },
        Runner::Baseline(s) => AbortState {
            iter,
            theta: s.gen.params().flatten(),
            phi_p: None,
            phi_s: None,
        },
    };
    let mut path = cfg.out.clone();
    path.set_extension("abort-state.json");
    std::fs::write(&path, serde_json::to_vec(&state).unwrap())?;
    Ok(Some(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn quick_config(dir: &std::path::Path, name: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.iters = 3;
        cfg.batch_size = 2;
        cfg.eval_pool = 4;
        cfg.out = dir.join(name);
        cfg
    }

    #[test]
    fn zero_iteration_run_writes_header_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path(), "zero.jsonl");
        cfg.iters = 0;
        let art = run_train(&cfg).unwrap();
        assert!(art.records.is_empty());
        let summary = art.summary.unwrap();
        assert_eq!(summary.iters, 0);
        assert!(summary.psnr > 0.0);
        let parsed = crate::runlog::read_log(&cfg.out).unwrap();
        assert!(parsed.records.is_empty());
        assert!(parsed.summary.is_some());
        assert_eq!(parsed.header.param_count, 5163);
    }

    #[test]
    fn short_runs_for_every_reweighter() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [
            ReweighterKind::Awa,
            ReweighterKind::Fixed,
            ReweighterKind::AdaLoss,
            ReweighterKind::GradNorm,
            ReweighterKind::GradSim,
        ] {
            let mut cfg = quick_config(dir.path(), &format!("{}.jsonl", kind));
            cfg.reweighter = kind;
            let art = run_train(&cfg).unwrap();
            assert!(!art.aborted(), "{} aborted", kind);
            assert_eq!(art.records.len(), 3);
            for r in &art.records {
                assert!(r.guidance.is_finite());
                assert!(r.omega_p.iter().all(|&w| w >= 0.0));
                if kind == ReweighterKind::Awa {
                    assert!(r.phi_p.is_some());
                    assert!(r.omega_p.iter().all(|&w| w > 0.0 && w < 2.0));
                    assert!(r.omega_s.iter().all(|&w| w > 0.0 && w < 750.0));
                } else {
                    assert!(r.phi_p.is_none());
                }
            }
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path(), "a.jsonl");
        cfg.iters = 2;
        run_train(&cfg).unwrap();
        let a = std::fs::read(&cfg.out).unwrap();
        cfg.out = dir.path().join("b.jsonl");
        run_train(&cfg).unwrap();
        let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
        // identical apart from the embedded output path in the header
        let a_rest: Vec<&[u8]> = a.split(|&c| c == b'\n').skip(1).collect();
        let b_rest: Vec<&[u8]> = b.split(|&c| c == b'\n').skip(1).collect();
        assert_eq!(a_rest, b_rest);
    }
}
