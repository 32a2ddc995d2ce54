//! The five commands. Each writes only under the output directory and ends
//! by writing `manifest.json` there.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medmix::corruption::{aggregate, sweep_test, sweep_train, CorruptionSpec, Phase, SweepCell, SweepRow};
use medmix::embedstore::{read_dataset, write_dataset, EmbeddingDataset, Split};
use medmix::eval;
use medmix::fusion::{load_checkpoint, save_checkpoint, Checkpoint, FusionMode, FusionParams, VariantSpec};
use medmix::optim::{train, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Overrides};
use crate::jobs;
use crate::output::{create_dir, write_csv, write_json, write_manifest};
use crate::variants::{ablation_grid, variant_by_name};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub num_samples: usize,
    pub num_classes: usize,
    pub modalities: Vec<String>,
    /// Experts grouped by modality.
    pub experts: Vec<Vec<ExpertInfo>>,
    pub teacher_dims: Vec<usize>,
    pub split_sizes: [usize; 3],
    pub null_dataset: bool,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpertInfo {
    pub name: String,
    pub dim: usize,
}

/// Generates the configured synthetic dataset into `<out>/dataset`.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<SynthSummary> {
    let spec = cfg.synthetic.as_ref().context("synth needs a `[synthetic]` section")?;
    spec.validate()?;
    let out = cfg.out_dir()?;
    let ds = medmix::embedstore::generate_synthetic(spec)?;
    write_dataset(&ds, &out.join("dataset"))?;
    let summary = SynthSummary {
        num_samples: ds.num_samples(),
        num_classes: ds.num_classes,
        modalities: ds.modality_names.clone(),
        experts: (0..ds.num_modalities())
            .map(|m| {
                ds.experts
                    .iter()
                    .filter(|e| e.modality_id == m)
                    .map(|e| ExpertInfo { name: e.name.clone(), dim: e.dim })
                    .collect()
            })
            .collect(),
        teacher_dims: ds.teacher_dims.clone(),
        split_sizes: [Split::Train, Split::Val, Split::Test].map(|s| ds.indices(s).len()),
        null_dataset: spec.is_null(),
        content_hash: ds.content_hash(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_manifest(out)?;
    Ok(summary)
}

/// The variant selected by `--variant`, or the configured one.
fn base_variant(cfg: &ExperimentConfig, o: &Overrides, ds: &EmbeddingDataset) -> Result<VariantSpec> {
    let best = (!cfg.ablation.best_experts.is_empty()).then_some(cfg.ablation.best_experts.as_slice());
    match &o.variant {
        Some(name) => variant_by_name(name, ds, &cfg.train.variant, best),
        None => Ok(cfg.train.variant.resolved(&ds.schema())?),
    }
}

/// Baseline fusion rules train without the distillation terms.
pub fn method_variant(base: &VariantSpec, method: FusionMode) -> VariantSpec {
    VariantSpec {
        fusion_mode: method,
        distillation_enabled: base.distillation_enabled && method == FusionMode::Medmix,
        ..base.clone()
    }
}

fn train_config(cfg: &ExperimentConfig, variant: &VariantSpec, seed: u64) -> TrainConfig {
    TrainConfig { seed, variant: variant.clone(), ..cfg.train.clone() }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> MeanStd {
    let (mean, std) = medmix::corruption::mean_std(values);
    MeanStd { mean, std }
}

fn write_run(dir: &Path, outcome: &TrainOutcome, config: &TrainConfig) -> Result<serde_json::Value> {
    create_dir(dir)?;
    let ck = Checkpoint::new(outcome.params.clone(), outcome.log.best_epoch, config.seed);
    save_checkpoint(&ck, &dir.join("model.ckpt"))?;
    let log_path = dir.join("train_log.csv");
    outcome.log.write_csv(File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?)?;
    let mut summary = outcome.log.summary(config);
    summary["deployed_parameters"] = outcome.params.count_deployed_parameters().into();
    summary["total_parameters"] = outcome.params.count_parameters().into();
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub seeds: Vec<u64>,
    pub best_epochs: Vec<usize>,
    pub val_loss: MeanStd,
    pub val_auroc: MeanStd,
    pub val_auprc: MeanStd,
    pub val_mf1: MeanStd,
    pub val_acc: MeanStd,
    pub variant: VariantSpec,
}

/// Trains one model per seed into `<out>/seed_<s>/`.
pub fn cmd_train(cfg: &ExperimentConfig, o: &Overrides, threads: usize) -> Result<TrainReport> {
    let out = cfg.out_dir()?;
    let ds = cfg.load_dataset()?;
    let variant = base_variant(cfg, o, &ds)?;
    create_dir(out)?;
    let runs = jobs::run(cfg.seeds.clone(), threads, |seed| {
        let tc = train_config(cfg, &variant, seed);
        let outcome = train(&ds, &tc).with_context(|| format!("training seed {seed}"))?;
        write_run(&seed_dir(out, seed), &outcome, &tc)?;
        Ok(outcome.log)
    })?;
    let pick = |f: fn(&medmix::optim::EpochRecord) -> f64| {
        summarize(&runs.iter().map(|log| f(log.best())).collect::<Vec<_>>())
    };
    let report = TrainReport {
        seeds: cfg.seeds.clone(),
        best_epochs: runs.iter().map(|l| l.best_epoch).collect(),
        val_loss: pick(|r| r.val_loss),
        val_auroc: pick(|r| r.val_auroc),
        val_auprc: pick(|r| r.val_auprc),
        val_mf1: pick(|r| r.val_mf1),
        val_acc: pick(|r| r.val_acc),
        variant,
    };
    write_json(&out.join("aggregate.json"), &report)?;
    write_manifest(out)?;
    Ok(report)
}

/// One line of the plot-ready long table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub cohort: String,
    pub method: String,
    pub protocol: String,
    pub phase: String,
    pub modality: String,
    pub rate: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

fn plot_rows(cohort: &str, method: &str, cells: &[SweepCell]) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    for cell in cells {
        let metrics = [
            ("auroc", cell.mean.auroc, cell.std.auroc),
            ("auprc", cell.mean.auprc, cell.std.auprc),
            ("mf1", cell.mean.mf1, cell.std.mf1),
            ("acc", cell.mean.acc, cell.std.acc),
        ];
        for (metric, mean, std) in metrics {
            rows.push(PlotRow {
                cohort: cohort.into(),
                method: method.into(),
                protocol: cell.protocol.clone(),
                phase: cell.phase.clone(),
                modality: cell.modality.clone(),
                rate: cell.rate,
                metric: metric.into(),
                mean,
                std,
                n_seeds: cell.seeds.len(),
            });
        }
    }
    rows
}

/// Checkpoint files under `path`: the file itself, `seed_*/model.ckpt`
/// directories from `train`, or `*.ckpt` files, in seed order.
pub fn find_checkpoints(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) {
            if p.join("model.ckpt").is_file() {
                found.push((seed, p.join("model.ckpt")));
            }
        } else if p.extension().is_some_and(|e| e == "ckpt") {
            found.push((u64::MAX, p));
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no checkpoints under {}", path.display());
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub cohort: String,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

/// Evaluates trained checkpoints on the test split under each test-phase
/// grid cell (a clean row when the grid is empty).
pub fn cmd_eval(cfg: &ExperimentConfig, o: &Overrides, checkpoint: &Path, external: bool) -> Result<EvalReport> {
    let out = cfg.out_dir()?;
    let (ds, cohort) = if external {
        let dir = cfg.external_dataset.as_ref().context("--external needs `external_dataset` in the config")?;
        (read_dataset(dir).with_context(|| format!("loading {}", dir.display()))?, "external")
    } else {
        (cfg.load_dataset()?, "internal")
    };
    let grid = cfg.grid(o, &ds)?;
    if grid.iter().any(|s| s.phase != Phase::Test) {
        bail!("eval applies test-phase corruption only; train-phase cells belong to `sweep`");
    }
    let mut models = Vec::new();
    for path in find_checkpoints(checkpoint)? {
        let ck = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        ck.check_schema(&ds.schema()).with_context(|| format!("checkpoint {}", path.display()))?;
        models.push(ck);
    }
    let method = models[0].header.variant.fusion_mode;
    if models.iter().any(|m| m.header.variant.fusion_mode != method) {
        bail!("checkpoints mix fusion rules; evaluate them separately");
    }
    let refs: Vec<(u64, &FusionParams<f32>)> = models.iter().map(|m| (m.header.seed, &m.params)).collect();
    let rows = sweep_test(&ds, &refs, &grid)?;
    let cells = aggregate(&rows);
    create_dir(out)?;
    write_csv(&out.join("eval.csv"), &rows)?;
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({ "cohort": cohort, "method": method.name(), "cells": cells }),
    )?;
    write_csv(&out.join("plot.csv"), &plot_rows(cohort, method.name(), &cells))?;
    write_manifest(out)?;
    Ok(EvalReport { cohort: cohort.into(), rows, cells })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub methods: Vec<(String, Vec<SweepRow>)>,
}

/// Trains every method per seed and evaluates it under the grid. Test-phase
/// cells reuse one clean model per seed; train-phase cells train one model
/// per (cell, seed).
pub fn cmd_sweep(cfg: &ExperimentConfig, o: &Overrides, threads: usize) -> Result<SweepReport> {
    let out = cfg.out_dir()?;
    let ds = cfg.load_dataset()?;
    let base = base_variant(cfg, o, &ds)?;
    let grid = cfg.grid(o, &ds)?;
    let (test_specs, train_specs): (Vec<CorruptionSpec>, Vec<CorruptionSpec>) =
        grid.into_iter().partition(|s| s.phase == Phase::Test);
    let methods = if cfg.methods.is_empty() { vec![base.fusion_mode] } else { cfg.methods.clone() };
    create_dir(out)?;
    let mut report = SweepReport { methods: Vec::new() };
    let mut plot = Vec::new();
    let mut summary = serde_json::Map::new();
    for method in methods {
        let variant = method_variant(&base, method);
        let mut rows = Vec::new();
        if !test_specs.is_empty() || train_specs.is_empty() {
            let models = jobs::run(cfg.seeds.clone(), threads, |seed| {
                Ok((seed, train(&ds, &train_config(cfg, &variant, seed))?.params))
            })?;
            let refs: Vec<(u64, &FusionParams<f32>)> = models.iter().map(|(s, p)| (*s, p)).collect();
            rows.extend(sweep_test(&ds, &refs, &test_specs)?);
        }
        let cells: Vec<(CorruptionSpec, u64)> =
            train_specs.iter().flat_map(|s| cfg.seeds.iter().map(move |&seed| (s.clone(), seed))).collect();
        let base_tc = train_config(cfg, &variant, 0);
        for part in jobs::run(cells, threads, |(spec, seed)| Ok(sweep_train(&ds, &base_tc, &[spec], &[seed])?))? {
            rows.extend(part);
        }
        write_csv(&out.join(format!("sweep_{}.csv", method.name())), &rows)?;
        let cells = aggregate(&rows);
        plot.extend(plot_rows("internal", method.name(), &cells));
        summary.insert(method.name().into(), serde_json::to_value(&cells)?);
        report.methods.push((method.name().into(), rows));
    }
    write_json(&out.join("sweep.json"), &summary)?;
    write_csv(&out.join("plot.csv"), &plot)?;
    write_manifest(out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub modalities_enabled: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub mf1: f64,
    pub acc: f64,
    pub deployed_parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub variant: String,
    pub n_seeds: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub mf1_mean: f64,
    pub mf1_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
}

/// Expert with the highest mean validation gate, per modality.
fn best_experts_by_gate(params: &FusionParams<f32>, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
    let pred = eval::predict(params, ds, &ds.indices(Split::Val), None)?;
    Ok(pred
        .mean_gates()
        .into_iter()
        .map(|g| g.map_or(0, |g| (0..g.len()).fold(0, |best, k| if g[k] > g[best] { k } else { best })))
        .collect())
}

fn test_row(name: &str, seed: u64, params: &FusionParams<f32>, ds: &EmbeddingDataset) -> Result<AblationRow> {
    let thresholds = eval::tune_on(params, ds, &ds.indices(Split::Val))?;
    let r = eval::evaluate(params, ds, &ds.indices(Split::Test), None, thresholds.as_deref())?;
    Ok(AblationRow {
        variant: name.into(),
        seed,
        modalities_enabled: params.variant.num_enabled_modalities(),
        auroc: r.auroc,
        auprc: r.auprc,
        mf1: r.mf1,
        acc: r.acc,
        deployed_parameters: params.count_deployed_parameters(),
    })
}

/// Trains and scores every variant of the grid for every seed.
pub fn cmd_ablate(cfg: &ExperimentConfig, o: &Overrides, threads: usize) -> Result<Vec<AblationRow>> {
    let out = cfg.out_dir()?;
    let ds = cfg.load_dataset()?;
    let base = base_variant(cfg, o, &ds)?;
    let names = if cfg.ablation.variants.is_empty() { ablation_grid(&ds) } else { cfg.ablation.variants.clone() };
    let fixed_best = (!cfg.ablation.best_experts.is_empty()).then(|| cfg.ablation.best_experts.clone());
    let per_seed = jobs::run(cfg.seeds.clone(), threads, |seed| {
        let mut full: Option<FusionParams<f32>> = None;
        let mut rows = Vec::with_capacity(names.len());
        for name in &names {
            let best = match (&fixed_best, name.as_str()) {
                (Some(b), _) => Some(b.clone()),
                (None, "best-expert-only") => {
                    if full.is_none() {
                        full = Some(train(&ds, &train_config(cfg, &base, seed))?.params);
                    }
                    Some(best_experts_by_gate(full.as_ref().unwrap(), &ds)?)
                }
                (None, _) => None,
            };
            let variant = variant_by_name(name, &ds, &base, best.as_deref())?;
            let params = train(&ds, &train_config(cfg, &variant, seed))
                .with_context(|| format!("variant {name}, seed {seed}"))?
                .params;
            rows.push(test_row(name, seed, &params, &ds)?);
            if name == "full" {
                full = Some(params);
            }
        }
        Ok(rows)
    })?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for name in &names {
        rows.extend(per_seed.iter().flatten().filter(|r| &r.variant == name).cloned());
    }
    let summary: Vec<AblationSummaryRow> = names
        .iter()
        .map(|name| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| &r.variant == name).collect();
            let col = |f: fn(&AblationRow) -> f64| summarize(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (auroc, auprc, mf1, acc) = (col(|r| r.auroc), col(|r| r.auprc), col(|r| r.mf1), col(|r| r.acc));
            AblationSummaryRow {
                variant: name.clone(),
                n_seeds: sel.len(),
                auroc_mean: auroc.mean,
                auroc_std: auroc.std,
                auprc_mean: auprc.mean,
                auprc_std: auprc.std,
                mf1_mean: mf1.mean,
                mf1_std: mf1.std,
                acc_mean: acc.mean,
                acc_std: acc.std,
            }
        })
        .collect();
    create_dir(out)?;
    write_csv(&out.join("ablation.csv"), &rows)?;
    write_csv(&out.join("ablation_summary.csv"), &summary)?;
    write_manifest(out)?;
    Ok(rows)
}
