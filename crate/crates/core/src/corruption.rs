//! Missing-modality protocols: drop one designated modality, or drop every
//! modality independently, at train or test time.
//!
//! Corruption never touches the stored dataset. It rewrites the masks of a
//! gathered batch, with one keyed draw per (sample, modality) so the outcome
//! does not depend on batch composition or order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffcore::Real;
use crate::embedstore::{DatasetSchema, EmbeddingDataset, Split};
use crate::error::{MedmixError, Result};
use crate::eval;
use crate::fusion::{Batch, FusionParams};
use crate::optim::{train, TrainConfig};
use crate::rng::{self, CORRUPT_TEST, CORRUPT_TRAIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OneModality,
    MultiRandom,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::OneModality => "one_modality",
            Protocol::MultiRandom => "multi_random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "one_modality" => Some(Protocol::OneModality),
            "multi_random" => Some(Protocol::MultiRandom),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Phase::Train),
            "test" => Some(Phase::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub protocol: Protocol,
    /// Target modality; required for `one_modality`, absent otherwise.
    #[serde(default)]
    pub modality: Option<usize>,
    pub phase: Phase,
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn multi_random(phase: Phase, rate: f64, seed: u64) -> Self {
        Self { protocol: Protocol::MultiRandom, modality: None, phase, rate, seed }
    }

    pub fn one_modality(modality: usize, phase: Phase, rate: f64, seed: u64) -> Self {
        Self { protocol: Protocol::OneModality, modality: Some(modality), phase, rate, seed }
    }

    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(MedmixError::validation("rate", format!("{} is outside [0, 1]", self.rate)));
        }
        match (self.protocol, self.modality) {
            (Protocol::OneModality, Some(m)) if m < num_modalities => Ok(()),
            (Protocol::OneModality, Some(m)) => {
                Err(MedmixError::validation("modality", format!("{m} >= {num_modalities} modalities")))
            }
            (Protocol::OneModality, None) => Err(MedmixError::validation("modality", "one_modality needs a target")),
            (Protocol::MultiRandom, Some(_)) => {
                Err(MedmixError::validation("modality", "multi_random drops every modality; omit the target"))
            }
            (Protocol::MultiRandom, None) => Ok(()),
        }
    }

    /// Whether modality `m` of dataset sample `sample` is dropped.
    pub fn drops(&self, sample: usize, m: usize, epoch: usize) -> bool {
        if self.protocol == Protocol::OneModality && self.modality != Some(m) {
            return false;
        }
        let u = match self.phase {
            Phase::Test => rng::unit(self.seed, &[CORRUPT_TEST, sample as u64, m as u64]),
            Phase::Train => rng::unit(self.seed, &[CORRUPT_TRAIN, epoch as u64, sample as u64, m as u64]),
        };
        u < self.rate
    }
}

/// Applies `spec` to `batch` in place. `epoch` only matters for train phase.
pub fn corrupt_batch<T: Real>(batch: &mut Batch<T>, schema: &DatasetSchema, spec: &CorruptionSpec, epoch: usize) {
    let mut first = 0;
    for (m, modality) in schema.modalities.iter().enumerate() {
        let count = modality.expert_dims.len();
        for i in 0..batch.len() {
            if spec.drops(batch.indices[i], m, epoch) {
                batch.drop_modality(i, m, first, count);
            }
        }
        first += count;
    }
}

/// A corrupted copy of `batch`.
pub fn apply_corruption<T: Real>(
    batch: &Batch<T>,
    schema: &DatasetSchema,
    spec: &CorruptionSpec,
    epoch: usize,
) -> Result<Batch<T>> {
    spec.validate(schema.num_modalities())?;
    let mut out = batch.clone();
    corrupt_batch(&mut out, schema, spec, epoch);
    Ok(out)
}

/// One (cell, seed) result of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub protocol: String,
    pub phase: String,
    /// Target modality name, or `all` for multi-random and `none` for clean.
    pub modality: String,
    pub rate: f64,
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
    pub mf1: f64,
    pub acc: f64,
}

impl SweepRow {
    fn new(spec: Option<&CorruptionSpec>, names: &[String], seed: u64, r: &crate::metrics::MetricsReport) -> Self {
        let (protocol, phase, modality, rate) = match spec {
            None => ("clean".to_string(), "test".to_string(), "none".to_string(), 0.0),
            Some(s) => (
                s.protocol.name().to_string(),
                s.phase.name().to_string(),
                s.modality.map_or_else(|| "all".to_string(), |m| names[m].clone()),
                s.rate,
            ),
        };
        Self { protocol, phase, modality, rate, seed, auroc: r.auroc, auprc: r.auprc, mf1: r.mf1, acc: r.acc }
    }

    pub fn metrics(&self) -> [f64; 4] {
        [self.auroc, self.auprc, self.mf1, self.acc]
    }
}

/// Mean and sample standard deviation of one cell over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub protocol: String,
    pub phase: String,
    pub modality: String,
    pub rate: f64,
    pub seeds: Vec<u64>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auroc: f64,
    pub auprc: f64,
    pub mf1: f64,
    pub acc: f64,
}

impl MetricSummary {
    fn from_array(a: [f64; 4]) -> Self {
        Self { auroc: a[0], auprc: a[1], mf1: a[2], acc: a[3] }
    }
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by cell in order of first appearance.
pub fn aggregate(rows: &[SweepRow]) -> Vec<SweepCell> {
    let mut cells: Vec<(SweepCell, Vec<[f64; 4]>)> = Vec::new();
    for row in rows {
        let same = |c: &SweepCell| {
            c.protocol == row.protocol && c.phase == row.phase && c.modality == row.modality && c.rate == row.rate
        };
        let pos = match cells.iter().position(|(c, _)| same(c)) {
            Some(p) => p,
            None => {
                let zero = MetricSummary::from_array([0.0; 4]);
                cells.push((
                    SweepCell {
                        protocol: row.protocol.clone(),
                        phase: row.phase.clone(),
                        modality: row.modality.clone(),
                        rate: row.rate,
                        seeds: Vec::new(),
                        mean: zero,
                        std: zero,
                    },
                    Vec::new(),
                ));
                cells.len() - 1
            }
        };
        cells[pos].0.seeds.push(row.seed);
        cells[pos].1.push(row.metrics());
    }
    cells
        .into_iter()
        .map(|(mut cell, values)| {
            let mut mean = [0.0; 4];
            let mut std = [0.0; 4];
            for j in 0..4 {
                let col: Vec<f64> = values.iter().map(|v| v[j]).collect();
                (mean[j], std[j]) = mean_std(&col);
            }
            cell.mean = MetricSummary::from_array(mean);
            cell.std = MetricSummary::from_array(std);
            cell
        })
        .collect()
}

/// Test-phase sweep: evaluates each trained model on the test split under
/// every spec, re-keyed by the model's seed. An empty grid yields one clean
/// row per model. Multi-label thresholds are tuned once per model on the
/// clean validation split.
pub fn sweep_test(
    dataset: &EmbeddingDataset,
    models: &[(u64, &FusionParams<f32>)],
    grid: &[CorruptionSpec],
) -> Result<Vec<SweepRow>> {
    let test = dataset.indices(Split::Test);
    let names = &dataset.modality_names;
    let mut rows = Vec::new();
    for &(seed, params) in models {
        let thresholds = eval::tune_on(params, dataset, &dataset.indices(Split::Val))?;
        if grid.is_empty() {
            let report = eval::evaluate(params, dataset, &test, None, thresholds.as_deref())?;
            rows.push(SweepRow::new(None, names, seed, &report));
        }
        for spec in grid {
            if spec.phase != Phase::Test {
                return Err(MedmixError::validation("phase", "sweep_test takes test-phase specs only"));
            }
            let keyed = CorruptionSpec { seed, ..spec.clone() };
            keyed.validate(dataset.num_modalities())?;
            let report = eval::evaluate(params, dataset, &test, Some(&keyed), thresholds.as_deref())?;
            rows.push(SweepRow::new(Some(spec), names, seed, &report));
        }
    }
    Ok(rows)
}

/// Train-phase sweep: one model per (spec, seed) trained under the spec and
/// evaluated clean on the test split.
pub fn sweep_train(
    dataset: &EmbeddingDataset,
    base: &TrainConfig,
    grid: &[CorruptionSpec],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(MedmixError::validation("grid", "train-phase sweep needs at least one spec"));
    }
    let test = dataset.indices(Split::Test);
    let mut rows = Vec::new();
    for spec in grid {
        if spec.phase != Phase::Train {
            return Err(MedmixError::validation("phase", "sweep_train takes train-phase specs only"));
        }
        for &seed in seeds {
            let config =
                TrainConfig { seed, train_corruption: Some(CorruptionSpec { seed, ..spec.clone() }), ..base.clone() };
            let outcome = train(dataset, &config)?;
            let thresholds = eval::tune_on(&outcome.params, dataset, &dataset.indices(Split::Val))?;
            let report = eval::evaluate(&outcome.params, dataset, &test, None, thresholds.as_deref())?;
            rows.push(SweepRow::new(Some(spec), &dataset.modality_names, seed, &report));
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| MedmixError::io("<csv>", e))
}

pub fn read_sweep_csv<R: Read>(reader: R) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(reader).deserialize().collect::<std::result::Result<_, _>>().map_err(csv_error)
}

fn csv_error(e: csv::Error) -> MedmixError {
    MedmixError::validation("csv", e.to_string())
}
