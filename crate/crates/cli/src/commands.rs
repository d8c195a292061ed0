use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use daefusion_core::architecture::checkpoint::{checkpoint_paths, encode};
use daefusion_core::training::train::{write_eval_report, write_train_log};
use daefusion_core::training::{train, LogRow, MetricReport, TrainConfig, TrainOutcome};
use daefusion_core::verify::{gradient_suite, CheckResult, Scope, SuiteOptions};
use daefusion_core::{DaeFormer, DualStrategy, ModelConfig, Scalar};
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::CliError;

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output { path: path.display().to_string(), message: e.to_string() }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| output_error(dir, e))
}

pub fn write_rows<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<(), CliError> {
    let fail = |e: csv::Error| output_error(path, e);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

pub fn gradcheck(scopes: &[Scope], seed: u64, corrupt: bool) -> Result<Vec<CheckResult>, CliError> {
    let mut all = Vec::new();
    for &scope in scopes {
        // the deliberately broken op lives in the op suite
        let corrupt = corrupt && scope == Scope::Op;
        all.extend(gradient_suite(scope, &SuiteOptions { seed, corrupt })?);
    }
    Ok(all)
}

pub fn gradcheck_table(results: &[CheckResult]) -> String {
    let mut out = format!("{:<6} {:<28} {:>12} {:>10}  result\n", "scope", "check", "rel_error", "tolerance");
    for r in results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<6} {:<28} {:>12.3e} {:>10.0e}  {verdict}",
            r.scope.to_string(),
            r.name,
            r.report.max_rel_error,
            r.scope.tolerance()
        );
    }
    out
}

/// Precision-independent result of one training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<LogRow>,
    pub report: MetricReport,
    pub param_count: usize,
    pub manifest: String,
    pub blob: Vec<u8>,
}

impl TrainSummary {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.loss_total)
    }
}

fn summarize<T: Scalar>(o: TrainOutcome<T>) -> TrainSummary {
    let (manifest, blob) = encode(&o.store);
    TrainSummary { param_count: o.store.scalar_count(), log: o.log, report: o.report, manifest, blob }
}

pub fn train_summary(model: &ModelConfig, train_cfg: &TrainConfig, precision: Precision) -> Result<TrainSummary, CliError> {
    Ok(match precision {
        Precision::F32 => summarize(train::<f32>(model, train_cfg)?),
        Precision::F64 => summarize(train::<f64>(model, train_cfg)?),
    })
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Trains on the synthetic task and writes the checkpoint, the training
/// log, the evaluation report and the resolved configuration to `out`.
pub fn train_toy(cfg: &RunConfig, out: &Path) -> Result<TrainSummary, CliError> {
    ensure_dir(out)?;
    let summary = train_summary(&cfg.model, &cfg.train, cfg.options.precision)?;
    let (manifest_path, blob_path) = checkpoint_paths(out);
    fs::write(&manifest_path, &summary.manifest).map_err(|e| output_error(&manifest_path, e))?;
    fs::write(&blob_path, &summary.blob).map_err(|e| output_error(&blob_path, e))?;
    let log_path = out.join(TRAIN_LOG_FILE);
    write_train_log(&log_path, &summary.log).map_err(|e| output_error(&log_path, e))?;
    let eval_path = out.join(EVAL_FILE);
    write_eval_report(&eval_path, &summary.report).map_err(|e| output_error(&eval_path, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_json()).map_err(|e| output_error(&config_path, e))?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationKind {
    DualStrategy,
    SkipCount,
    ImageSize,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::DualStrategy => "dual_strategy",
            AblationKind::SkipCount => "skip_count",
            AblationKind::ImageSize => "image_size",
        }
    }

    /// The configurations compared along this axis, labelled.
    pub fn variants(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        match self {
            AblationKind::DualStrategy => DualStrategy::ALL
                .iter()
                .map(|&strategy| (strategy.name().to_string(), ModelConfig { strategy, ..base.clone() }))
                .collect(),
            AblationKind::SkipCount => (0..=2)
                .map(|skip_connections| (format!("skip_{skip_connections}"), ModelConfig { skip_connections, ..base.clone() }))
                .collect(),
            AblationKind::ImageSize => [16, 32, 48]
                .iter()
                .map(|&image_size| (format!("size_{image_size}"), ModelConfig { image_size, ..base.clone() }))
                .collect(),
        }
    }
}

pub const ABLATION_HEADER: [&str; 4] = ["variant", "param_count", "final_loss", "dsc"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub param_count: usize,
    pub final_loss: f64,
    pub dsc: f64,
}

/// Trains every variant of `kind` with the shared seed of `cfg`, spreading
/// the variants over up to `threads` worker threads.
pub fn run_ablation(kind: AblationKind, cfg: &RunConfig, threads: usize) -> Result<Vec<AblationRow>, CliError> {
    let variants = kind.variants(&cfg.model);
    let threads = threads.clamp(1, variants.len());
    let cell = |(label, model): &(String, ModelConfig)| -> Result<AblationRow, CliError> {
        let s = train_summary(model, &cfg.train, cfg.options.precision)?;
        Ok(AblationRow { variant: label.clone(), param_count: s.param_count, final_loss: s.final_loss(), dsc: s.report.dsc() })
    };
    let mut rows: Vec<(usize, Result<AblationRow, CliError>)> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                let variants = &variants;
                let cell = &cell;
                scope.spawn(move || {
                    (t..variants.len()).step_by(threads).map(|i| (i, cell(&variants[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        workers.into_iter().flat_map(|w| w.join().expect("ablation worker panicked")).collect()
    });
    rows.sort_by_key(|(i, _)| *i);
    rows.into_iter().map(|(_, r)| r).collect()
}

/// Total on the first line, then one `module count` line per module.
pub fn param_count_report(model: &ModelConfig) -> Result<(usize, String), CliError> {
    let (_, store) = DaeFormer::build::<f64>(model)?;
    let total = store.scalar_count();
    let mut out = format!("{total}\n");
    for (module, count) in DaeFormer::param_breakdown(&store) {
        let _ = writeln!(out, "{module:<24} {count:>10}");
    }
    Ok((total, out))
}
