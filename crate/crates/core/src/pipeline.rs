//! The end-to-end commands behind the `pointjem` binary. Every artifact
//! carries the resolved configuration and run seed.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::diagnostics::{diagnose, DiagnosticReport};
use crate::eval::{extract_embeddings, run_probe, ProbeMode, ProbeResult};
use crate::jemloss::segment_softmax;
use crate::model::{encode, load_checkpoint, project, save_checkpoint, ParameterStore};
use crate::pointcloud::{generate_benchmark, load_dataset, write_dataset, BenchmarkSpec, Dataset, PointCloud};
use crate::train::{pretrain_with, LogRow, TrainLog};

const DIAG_CHUNK: usize = 64;

/// Parameters of `gen`.
#[derive(Clone, Debug)]
pub struct GenArgs {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn comment_block(config: &RunConfig) -> String {
    config.echo_lines().iter().map(|l| format!("# {l}\n")).collect()
}

/// Loads the dataset at `data` with the configured resampling.
pub fn load_data(data: &Path, config: &RunConfig) -> Result<Dataset> {
    if !data.exists() {
        bail!("dataset not found: {}", data.display());
    }
    load_dataset(data, config.data_points, config.data_seed).with_context(|| format!("cannot load dataset {}", data.display()))
}

pub fn load_ckpt(path: &Path) -> Result<ParameterStore> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Writes a synthetic benchmark and returns the manifest path.
pub fn cmd_gen(out: &Path, args: &GenArgs) -> Result<std::path::PathBuf> {
    let spec = BenchmarkSpec {
        classes: args.classes,
        per_class: args.per_class,
        points: args.points,
        seed: args.seed,
        ..BenchmarkSpec::default()
    };
    let ds = generate_benchmark(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(write_dataset(out, &ds, Some(&spec))?)
}

/// Pretrains on the training split, then writes the checkpoint and the
/// per-epoch CSV log.
pub fn cmd_pretrain(
    data: &Path,
    config: &RunConfig,
    ckpt: &Path,
    log: &Path,
    on_epoch: impl FnMut(&LogRow),
) -> Result<(ParameterStore, TrainLog)> {
    let ds = load_data(data, config)?;
    let (store, train_log) = pretrain_with(&ds.train, &config.train, on_epoch)?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    save_checkpoint(&store, ckpt).with_context(|| format!("cannot write {}", ckpt.display()))?;
    write_text(log, &train_log.to_csv(&config.echo_lines()))?;
    Ok((store, train_log))
}

/// Probe of frozen representations: train split to fit, test split to score.
pub fn probe_dataset(store: &ParameterStore, ds: &Dataset, config: &RunConfig) -> Result<ProbeResult> {
    let c = ds.num_classes();
    let train = extract_embeddings(store, &ds.train, c)?;
    let test = extract_embeddings(store, &ds.test, c)?;
    Ok(run_probe(&train, &test, &config.probe)?)
}

pub fn probe_json(config: &RunConfig, result: &ProbeResult) -> String {
    let doc = json!({
        "config": config.to_json(),
        "seed": config.probe.seed,
        "result": result,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("probe serializes");
    s.push('\n');
    s
}

pub fn cmd_probe(data: &Path, ckpt: &Path, config: &RunConfig, out: &Path) -> Result<ProbeResult> {
    let ds = load_data(data, config)?;
    let store = load_ckpt(ckpt)?;
    let result = probe_dataset(&store, &ds, config)?;
    write_text(out, &probe_json(config, &result))?;
    Ok(result)
}

/// Diagnostics of the clean (unaugmented) projector scores of `clouds`,
/// used as both branches.
pub fn diagnose_clouds(store: &ParameterStore, clouds: &[PointCloud], threshold: f64) -> Result<DiagnosticReport> {
    if clouds.is_empty() {
        bail!("no clouds to diagnose");
    }
    let layout = store.layout();
    let mut rows = Vec::new();
    for chunk in clouds.chunks(DIAG_CHUNK) {
        let h = encode(store, chunk)?;
        rows.extend_from_slice(project(store, &h, layout)?.data());
    }
    let z = crate::diffcore::NumericArray::new(vec![clouds.len(), layout.dim()], rows)?;
    let q = segment_softmax(&z, layout)?;
    Ok(diagnose(&q, &q, threshold)?)
}

pub fn cmd_diagnose(data: &Path, ckpt: &Path, config: &RunConfig, out: &Path) -> Result<DiagnosticReport> {
    let ds = load_data(data, config)?;
    let store = load_ckpt(ckpt)?;
    let clouds: Vec<PointCloud> = ds.all().cloned().collect();
    let report = diagnose_clouds(&store, &clouds, config.train.collapse_threshold)?;
    let doc = json!({
        "config": config.to_json(),
        "seed": config.train.seed,
        "samples": clouds.len(),
        "report": report,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    write_text(out, &s)?;
    Ok(report)
}

/// Writes representations of every cloud (train split, then test split).
pub fn cmd_embed(data: &Path, ckpt: &Path, config: &RunConfig, out: &Path) -> Result<usize> {
    let ds = load_data(data, config)?;
    let store = load_ckpt(ckpt)?;
    let clouds: Vec<PointCloud> = ds.all().cloned().collect();
    let emb = extract_embeddings(&store, &clouds, ds.num_classes())?;
    write_text(out, &format!("{}{}", comment_block(config), emb.to_csv()))?;
    Ok(emb.len())
}

/// Applies `--mode` and `--label-fraction` on top of a resolved config.
pub fn with_probe_flags(mut config: RunConfig, mode: Option<ProbeMode>, label_fraction: Option<f64>) -> Result<RunConfig> {
    if let Some(m) = mode {
        config.probe.mode = m;
    }
    if let Some(f) = label_fraction {
        config.probe.label_fraction = f;
    }
    config.validate()?;
    Ok(config)
}
