//! Side-by-side runs of multiple configs with a CSV result matrix.
//! Independent runs execute in parallel worker slots (capped by the
//! AUXWEIGHT_THREADS environment variable); each run is internally
//! sequential and writes only its own log.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use auxweight_core::baselines::ReweighterKind;

use crate::config::{FixedWeightsConfig, RunConfig};
use crate::runlog::read_log;
use crate::trainer::{run_train, summarize, RunArtifacts, TrainError, SUMMARY_WINDOW};

pub const CSV_COLUMNS: usize = 7; // reweighter, mask group, 4 metrics, rank

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub reweighter: String,
    pub mask_group: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub pdist: f64,
    pub rank: usize,
}

pub fn worker_slots() -> usize {
    if let Ok(v) = std::env::var("AUXWEIGHT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Run all configs, `slots` at a time. Results keep the config order.
pub fn run_many(configs: &[RunConfig], slots: usize) -> Result<Vec<RunArtifacts>, TrainError> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunArtifacts, TrainError>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..slots.max(1).min(configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let out = run_train(&configs[i]);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

/// Build the comparison matrix; rows are ranked within each mask group by
/// perceptual distance (1 = best). Aborted runs rank behind finished ones
/// and report NaN metrics.
pub fn compare_rows(configs: &[RunConfig], artifacts: &[RunArtifacts]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = configs
        .iter()
        .zip(artifacts)
        .map(|(cfg, art)| {
            let (psnr, ssim, mae, pdist) = match &art.summary {
                Some(s) => (s.psnr, s.ssim, s.mae, s.pdist),
                None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
            };
            CompareRow {
                reweighter: cfg.reweighter.to_string(),
                mask_group: cfg.mask_group.to_string(),
                psnr,
                ssim,
                mae,
                pdist,
                rank: 0,
            }
        })
        .collect();
    // rank within each mask group
    let groups: Vec<String> = rows.iter().map(|r| r.mask_group.clone()).collect();
    for group in groups.iter().collect::<std::collections::BTreeSet<_>>() {
        let mut members: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].mask_group == **group)
            .collect();
        members.sort_by(|&a, &b| {
            let (x, y) = (rows[a].pdist, rows[b].pdist);
            x.partial_cmp(&y).unwrap_or_else(|| {
                // NaN (aborted) sorts last
                if x.is_nan() && y.is_nan() {
                    std::cmp::Ordering::Equal
                } else if x.is_nan() {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Less
                }
            })
        });
        for (rank, idx) in members.into_iter().enumerate() {
            rows[idx].rank = rank + 1;
        }
    }
    rows
}

/// Re-derive each run's summary means from its written JSONL records and
/// compare against the summary line, to 1e-9.
pub fn crosscheck_log(path: &Path) -> Result<(), String> {
    let parsed = read_log(path).map_err(|e| e.to_string())?;
    let Some(summary) = &parsed.summary else {
        return Ok(()); // aborted runs carry no summary
    };
    if parsed.records.is_empty() {
        return Ok(());
    }
    let (window, psnr, ssim, mae, pdist) =
        summarize(&parsed.records, SUMMARY_WINDOW).expect("records present");
    if window != summary.window {
        return Err(format!(
            "{}: summary window {} vs recomputed {}",
            path.display(),
            summary.window,
            window
        ));
    }
    for (name, a, b) in [
        ("psnr", psnr, summary.psnr),
        ("ssim", ssim, summary.ssim),
        ("mae", mae, summary.mae),
        ("pdist", pdist, summary.pdist),
    ] {
        if (a - b).abs() > 1e-9 {
            return Err(format!(
                "{}: summary {} {} vs recomputed {}",
                path.display(),
                name,
                b,
                a
            ));
        }
    }
    Ok(())
}

/// Execute the comparison: run everything, cross-check each log, rank.
pub fn run_compare(
    configs: &[RunConfig],
    slots: usize,
) -> Result<(Vec<CompareRow>, Vec<RunArtifacts>), TrainError> {
    let mut outs = std::collections::BTreeSet::new();
    for cfg in configs {
        if !outs.insert(cfg.out.clone()) {
            return Err(TrainError::Io(std::io::Error::other(format!(
                "two configs write to {}",
                cfg.out.display()
            ))));
        }
    }
    let artifacts = run_many(configs, slots)?;
    for (cfg, art) in configs.iter().zip(&artifacts) {
        if !art.aborted() {
            crosscheck_log(&cfg.out).map_err(std::io::Error::other)?;
        }
    }
    Ok((compare_rows(configs, &artifacts), artifacts))
}

/// The coarse fixed-weight grid: {0.25, 0.5, 0.75} of each family ceiling,
/// terms tied within a family (9 runs).
pub fn grid_configs(base: &RunConfig) -> Vec<RunConfig> {
    let fractions = [0.25, 0.5, 0.75];
    let mut out = Vec::new();
    for (i, &fp) in fractions.iter().enumerate() {
        for (j, &fs) in fractions.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.reweighter = ReweighterKind::Fixed;
            cfg.fixed_weights = Some(FixedWeightsConfig {
                omega_p: vec![fp * base.aux.lambda_p; base.aux.terms],
                omega_s: vec![fs * base.aux.lambda_s; base.aux.terms],
            });
            let name = format!("grid_p{}_s{}.jsonl", i, j);
            cfg.out = base.out.with_file_name(name);
            out.push(cfg);
        }
    }
    out
}

pub fn write_csv(rows: &[CompareRow], out: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "reweighter,mask_group,psnr,ssim,mae,pdist,rank")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.reweighter, r.mask_group, r.psnr, r.ssim, r.mae, r.pdist, r.rank
        )?;
    }
    f.flush()
}
