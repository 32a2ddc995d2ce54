//! Experiment configuration: one TOML file, overridable from the command line.
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! out = "runs/demo"
//! methods = ["medmix", "concat"]
//!
//! [synthetic]            # or: dataset = "path/to/cache"
//! num_samples = 2000
//! ...
//!
//! [train]                # optimizer, schedule, model, variant
//! base_lr = 1e-3
//! [train.variant]
//! fusion_mode = "medmix"
//!
//! [[corruption]]
//! protocol = "multi_random"
//! phase = "test"
//! rate = 0.3
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medmix::corruption::{CorruptionSpec, Phase, Protocol};
use medmix::embedstore::{generate_synthetic, read_dataset, EmbeddingDataset, SyntheticSpec};
use medmix::fusion::FusionMode;
use medmix::optim::TrainConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Variant names to run; empty means the full grid for the dataset.
    #[serde(default)]
    pub variants: Vec<String>,
    /// Expert kept per modality by `best-expert-only`; empty means the
    /// expert with the highest mean validation gate in the full model.
    #[serde(default)]
    pub best_experts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Second cohort evaluated with `eval --external`.
    #[serde(default)]
    pub external_dataset: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub corruption: Vec<CorruptionSpec>,
    /// Fusion rules compared by `sweep`; empty means the trained variant's.
    #[serde(default)]
    pub methods: Vec<FusionMode>,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            external_dataset: None,
            train: TrainConfig::default(),
            seeds: default_seeds(),
            corruption: Vec::new(),
            methods: Vec::new(),
            ablation: AblationConfig::default(),
            out: None,
        }
    }
}

/// Command-line values that replace file values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
    pub fusion: Option<FusionMode>,
    pub rates: Option<Vec<f64>>,
    pub protocol: Option<Protocol>,
    pub phase: Option<Phase>,
    /// Target of `one_modality`, by name or index.
    pub modality: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.external_dataset, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seeds) = &o.seeds {
            self.seeds = seeds.clone();
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(mode) = o.fusion {
            self.train.variant.fusion_mode = mode;
            self.methods = vec![mode];
        }
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => bail!("set either `dataset` or `[synthetic]`, not both"),
            (None, None) => bail!("no data: set `dataset` or `[synthetic]`"),
            (None, Some(spec)) => spec.validate()?,
            (Some(_), None) => {}
        }
        if self.seeds.is_empty() {
            bail!("`seeds` is empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("`seeds` has duplicates");
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("no output directory: pass --out or set `out`")
    }

    pub fn load_dataset(&self) -> Result<EmbeddingDataset> {
        match (&self.dataset, &self.synthetic) {
            (Some(dir), _) => read_dataset(dir).with_context(|| format!("loading {}", dir.display())),
            (None, Some(spec)) => Ok(generate_synthetic(spec)?),
            (None, None) => bail!("no data: set `dataset` or `[synthetic]`"),
        }
    }

    /// The corruption grid after command-line overrides, checked against
    /// `dataset`. Any of `--rate/--protocol/--phase/--modality` replaces the
    /// file grid with one spec per rate.
    pub fn grid(&self, o: &Overrides, dataset: &EmbeddingDataset) -> Result<Vec<CorruptionSpec>> {
        let touched = o.rates.is_some() || o.protocol.is_some() || o.phase.is_some() || o.modality.is_some();
        let grid = if touched {
            let protocol =
                o.protocol.unwrap_or(if o.modality.is_some() { Protocol::OneModality } else { Protocol::MultiRandom });
            let modality = match (&o.modality, protocol) {
                (Some(name), Protocol::OneModality) => Some(modality_index(dataset, name)?),
                (None, Protocol::OneModality) => bail!("--protocol one_modality needs --modality"),
                (Some(_), Protocol::MultiRandom) => bail!("--modality only applies to one_modality"),
                (None, Protocol::MultiRandom) => None,
            };
            let phase = o.phase.unwrap_or(Phase::Test);
            let rates = o.rates.clone().context("--rate is required when overriding the corruption grid")?;
            rates.into_iter().map(|rate| CorruptionSpec { protocol, modality, phase, rate, seed: 0 }).collect()
        } else {
            self.corruption.clone()
        };
        for spec in &grid {
            spec.validate(dataset.num_modalities())?;
        }
        Ok(grid)
    }
}

pub fn modality_index(dataset: &EmbeddingDataset, name: &str) -> Result<usize> {
    if let Some(m) = dataset.modality_names.iter().position(|n| n == name) {
        return Ok(m);
    }
    match name.parse::<usize>() {
        Ok(m) if m < dataset.num_modalities() => Ok(m),
        _ => bail!("unknown modality {name:?}; known: {:?}", dataset.modality_names),
    }
}
