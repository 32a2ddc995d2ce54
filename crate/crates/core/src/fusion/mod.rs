//! The fusion model.
//!
//! Two levels: inside a modality, each expert embedding goes through a
//! residual bottleneck adapter and a projection block into the shared latent
//! space, and a router mixes the experts with a masked softmax. Across
//! modalities, each modality has its own classifier head and the head logits
//! are combined with sample-specific weights from a scorer, re-normalized over
//! the modalities that are actually present. Baseline fusers (mean, max,
//! concat, attention) replace the second level.
//!
//! Masked experts and unavailable modalities are never read: the forward pass
//! gathers only present rows, so their stored content cannot affect outputs,
//! losses, or gradients.

use serde::{Deserialize, Serialize};

use crate::diffcore::{LayerNorm, Linear, ParamGroup, ParamTensor, Real};
use crate::embedstore::{DatasetSchema, EmbeddingDataset, TaskKind};
use crate::error::{MedmixError, Result};
use crate::rng::{self, INIT};

mod batch;
mod checkpoint;
mod forward;
#[cfg(test)]
pub(crate) mod forward_tests;

pub use batch::Batch;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CKPT_MAGIC};
pub use forward::{DropoutKey, ForwardTrace, IntraTrace, TeacherProjection};

/// How experts inside a modality are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraMode {
    #[default]
    LearnedRouter,
    UniformMean,
    BestExpertOnly,
}

/// How modalities are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Medmix,
    MeanAvg,
    Concat,
    Max,
    Attention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] =
        [FusionMode::Medmix, FusionMode::MeanAvg, FusionMode::Concat, FusionMode::Max, FusionMode::Attention];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Medmix => "medmix",
            FusionMode::MeanAvg => "mean_avg",
            FusionMode::Concat => "concat",
            FusionMode::Max => "max",
            FusionMode::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Modes with one classifier head per modality.
    fn per_modality_heads(self) -> bool {
        matches!(self, FusionMode::Medmix | FusionMode::MeanAvg | FusionMode::Max)
    }
}

fn yes() -> bool {
    true
}

/// Structural variant of the model. Empty enable-lists mean "everything".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    #[serde(default)]
    pub intra_mode: IntraMode,
    /// One expert index per modality, used by `best_expert_only`.
    #[serde(default)]
    pub best_experts: Vec<usize>,
    #[serde(default)]
    pub expert_families_enabled: Vec<Vec<bool>>,
    #[serde(default)]
    pub modalities_enabled: Vec<bool>,
    #[serde(default = "yes")]
    pub distillation_enabled: bool,
    #[serde(default)]
    pub fusion_mode: FusionMode,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self {
            intra_mode: IntraMode::LearnedRouter,
            best_experts: Vec::new(),
            expert_families_enabled: Vec::new(),
            modalities_enabled: Vec::new(),
            distillation_enabled: true,
            fusion_mode: FusionMode::Medmix,
        }
    }
}

impl VariantSpec {
    /// Fills the enable-lists for `schema`, folds `best_experts` into them,
    /// and checks that something remains enabled.
    pub fn resolved(&self, schema: &DatasetSchema) -> Result<VariantSpec> {
        let bad = |detail: String| Err(MedmixError::validation("variant", detail));
        let m_count = schema.num_modalities();
        let mut out = self.clone();
        if out.modalities_enabled.is_empty() {
            out.modalities_enabled = vec![true; m_count];
        }
        if out.expert_families_enabled.is_empty() {
            out.expert_families_enabled = schema.modalities.iter().map(|m| vec![true; m.expert_dims.len()]).collect();
        }
        if out.modalities_enabled.len() != m_count {
            return bad(format!(
                "modalities_enabled has {} entries for {m_count} modalities",
                out.modalities_enabled.len()
            ));
        }
        if out.expert_families_enabled.len() != m_count
            || out.expert_families_enabled.iter().zip(&schema.modalities).any(|(e, m)| e.len() != m.expert_dims.len())
        {
            return bad("expert_families_enabled does not match the expert layout".into());
        }
        if out.intra_mode == IntraMode::BestExpertOnly {
            if out.best_experts.len() != m_count {
                return bad(format!("best_expert_only needs one expert per modality, got {}", out.best_experts.len()));
            }
            for (m, &k) in out.best_experts.iter().enumerate() {
                let fam = &mut out.expert_families_enabled[m];
                if k >= fam.len() || !fam[k] {
                    return bad(format!("best expert {k} of modality {m} is not an enabled expert"));
                }
                fam.iter_mut().enumerate().for_each(|(j, b)| *b = j == k);
            }
        }
        if !out.modalities_enabled.iter().any(|&b| b) {
            return bad("no modality enabled".into());
        }
        for m in 0..m_count {
            if out.modalities_enabled[m] && !out.expert_families_enabled[m].iter().any(|&b| b) {
                return bad(format!("modality {m} is enabled but has no enabled expert"));
            }
        }
        Ok(out)
    }

    pub fn num_enabled_modalities(&self) -> usize {
        self.modalities_enabled.iter().filter(|&&b| b).count()
    }
}

/// Architecture hyperparameters that are not part of the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared latent width.
    #[serde(default = "ModelConfig::default_latent")]
    pub latent_dim: usize,
    #[serde(default = "ModelConfig::default_dropout")]
    pub dropout: f64,
    /// Put the inter-modality scorer in the reduced-lr router group.
    #[serde(default = "yes")]
    pub scorer_in_router_group: bool,
}

impl ModelConfig {
    fn default_latent() -> usize {
        256
    }

    fn default_dropout() -> f64 {
        0.1
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { latent_dim: Self::default_latent(), dropout: Self::default_dropout(), scorer_in_router_group: true }
    }
}

/// Adapter bottleneck width for an expert of width `dim`.
pub fn adapter_rank(dim: usize) -> usize {
    (dim / 16).clamp(32, 128)
}

/// Adapter and projection block for one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBranch<T> {
    pub down: Linear<T>,
    pub up: Linear<T>,
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Real> ExpertBranch<T> {
    fn cast<U: Real>(&self) -> ExpertBranch<U> {
        ExpertBranch { down: self.down.cast(), up: self.up.cast(), proj: self.proj.cast(), norm: self.norm.cast() }
    }
}

/// Everything owned by one modality. Absent pieces are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBlock<T> {
    pub experts: Vec<Option<ExpertBranch<T>>>,
    pub router: Option<Linear<T>>,
    pub head: Option<Linear<T>>,
    pub scorer: Option<Linear<T>>,
    pub teacher_proj: Option<Linear<T>>,
}

impl<T: Real> ModalityBlock<T> {
    fn cast<U: Real>(&self) -> ModalityBlock<U> {
        ModalityBlock {
            experts: self.experts.iter().map(|e| e.as_ref().map(ExpertBranch::cast)).collect(),
            router: self.router.as_ref().map(Linear::cast),
            head: self.head.as_ref().map(Linear::cast),
            scorer: self.scorer.as_ref().map(Linear::cast),
            teacher_proj: self.teacher_proj.as_ref().map(Linear::cast),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.experts.iter().any(Option::is_some)
    }
}

/// All trainable tensors plus the structure they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub schema: DatasetSchema,
    pub config: ModelConfig,
    pub variant: VariantSpec,
    pub modalities: Vec<ModalityBlock<T>>,
    pub concat_head: Option<Linear<T>>,
    pub attn_query: Option<ParamTensor<T>>,
    pub attn_head: Option<Linear<T>>,
    /// Logits predicted for samples with no modality at all.
    pub prior_logits: Vec<f64>,
}

impl<T: Real> FusionParams<T> {
    /// Seeded fan-in uniform initialization for `schema` and `variant`.
    pub fn init(schema: &DatasetSchema, config: &ModelConfig, variant: &VariantSpec, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 {
            return Err(MedmixError::validation("latent_dim", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(MedmixError::validation("dropout", format!("{} outside [0, 1)", config.dropout)));
        }
        let variant = variant.resolved(schema)?;
        let d = config.latent_dim;
        let c = schema.num_classes;
        let scorer_group = if config.scorer_in_router_group { ParamGroup::Router } else { ParamGroup::Other };
        let mode = variant.fusion_mode;
        let mut modalities = Vec::with_capacity(schema.num_modalities());
        for (m, ms) in schema.modalities.iter().enumerate() {
            let key = |part: u64, k: u64| rng::stream(seed, &[INIT, m as u64, k, part]);
            let enabled = variant.modalities_enabled[m];
            if enabled && variant.distillation_enabled && ms.teacher_dim == 0 {
                return Err(MedmixError::Config(format!(
                    "distillation is enabled but modality {m} ({}) has no teacher embeddings",
                    ms.name
                )));
            }
            let experts = ms
                .expert_dims
                .iter()
                .enumerate()
                .map(|(k, &dk)| {
                    (enabled && variant.expert_families_enabled[m][k]).then(|| {
                        let r = adapter_rank(dk);
                        let mut g = key(0, k as u64);
                        ExpertBranch {
                            down: Linear::init_uniform(dk, r, ParamGroup::Other, &mut g),
                            up: Linear::init_uniform(r, dk, ParamGroup::Other, &mut g),
                            proj: Linear::init_uniform(dk, d, ParamGroup::Other, &mut g),
                            norm: LayerNorm::new(d, ParamGroup::Other),
                        }
                    })
                })
                .collect();
            let router = (enabled && variant.intra_mode == IntraMode::LearnedRouter)
                .then(|| Linear::init_uniform(d, 1, ParamGroup::Router, &mut key(1, 0)));
            let head = (enabled && mode.per_modality_heads())
                .then(|| Linear::init_uniform(d, c, ParamGroup::Other, &mut key(2, 0)));
            let scorer = (enabled && mode == FusionMode::Medmix)
                .then(|| Linear::init_uniform(d, 1, scorer_group, &mut key(3, 0)));
            let teacher_proj = (enabled && variant.distillation_enabled)
                .then(|| Linear::init_uniform(ms.teacher_dim, d, ParamGroup::Other, &mut key(4, 0)));
            modalities.push(ModalityBlock { experts, router, head, scorer, teacher_proj });
        }
        let n_enabled = variant.num_enabled_modalities();
        let concat_head = (mode == FusionMode::Concat).then(|| {
            Linear::init_uniform(n_enabled * d, c, ParamGroup::Other, &mut rng::stream(seed, &[INIT, 1 << 32]))
        });
        let (attn_query, attn_head) = if mode == FusionMode::Attention {
            let mut g = rng::stream(seed, &[INIT, 1 << 33]);
            let q = Linear::<T>::init_uniform(d, 1, ParamGroup::Router, &mut g).weight;
            let q = ParamTensor::new(q.value.transpose(), ParamGroup::Router);
            (Some(q), Some(Linear::init_uniform(d, c, ParamGroup::Other, &mut g)))
        } else {
            (None, None)
        };
        Ok(Self {
            schema: schema.clone(),
            config: config.clone(),
            variant,
            modalities,
            concat_head,
            attn_query,
            attn_head,
            prior_logits: vec![0.0; c],
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes
    }

    pub fn task_kind(&self) -> TaskKind {
        self.schema.task_kind
    }

    pub fn cast<U: Real>(&self) -> FusionParams<U> {
        FusionParams {
            schema: self.schema.clone(),
            config: self.config.clone(),
            variant: self.variant.clone(),
            modalities: self.modalities.iter().map(ModalityBlock::cast).collect(),
            concat_head: self.concat_head.as_ref().map(Linear::cast),
            attn_query: self.attn_query.as_ref().map(ParamTensor::cast),
            attn_head: self.attn_head.as_ref().map(Linear::cast),
            prior_logits: self.prior_logits.clone(),
        }
    }

    /// Sets the fallback logits from label frequencies of `indices`
    /// (add-one smoothed): log-priors for multi-class, prior log-odds for
    /// multi-label.
    pub fn set_prior(&mut self, dataset: &EmbeddingDataset, indices: &[usize]) {
        let c = dataset.num_classes;
        let mut counts = vec![0.0f64; c];
        for &i in indices {
            for (acc, &y) in counts.iter_mut().zip(dataset.labels.row(i)) {
                *acc += y as f64;
            }
        }
        let n = indices.len() as f64;
        self.prior_logits = match dataset.task_kind {
            TaskKind::MultiClass => counts.iter().map(|&k| ((k + 1.0) / (n + c as f64)).ln()).collect(),
            TaskKind::MultiLabel => counts
                .iter()
                .map(|&k| {
                    let p = (k + 1.0) / (n + 2.0);
                    (p / (1.0 - p)).ln()
                })
                .collect(),
        };
    }

    /// Every parameter tensor with a stable dotted name, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &ParamTensor<T>)> {
        let mut out = Vec::new();
        fn lin<'a, T>(out: &mut Vec<(String, &'a ParamTensor<T>)>, name: String, l: &'a Linear<T>) {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        for (m, blk) in self.modalities.iter().enumerate() {
            for (k, br) in blk.experts.iter().enumerate() {
                if let Some(br) = br {
                    lin(&mut out, format!("m{m}.k{k}.adapter_down"), &br.down);
                    lin(&mut out, format!("m{m}.k{k}.adapter_up"), &br.up);
                    lin(&mut out, format!("m{m}.k{k}.proj"), &br.proj);
                    out.push((format!("m{m}.k{k}.norm.gain"), &br.norm.gain));
                    out.push((format!("m{m}.k{k}.norm.bias"), &br.norm.bias));
                }
            }
            for (part, l) in [
                ("router", &blk.router),
                ("head", &blk.head),
                ("scorer", &blk.scorer),
                ("teacher_proj", &blk.teacher_proj),
            ] {
                if let Some(l) = l {
                    lin(&mut out, format!("m{m}.{part}"), l);
                }
            }
        }
        if let Some(l) = &self.concat_head {
            lin(&mut out, "concat_head".into(), l);
        }
        if let Some(q) = &self.attn_query {
            out.push(("attn.query".into(), q));
        }
        if let Some(l) = &self.attn_head {
            lin(&mut out, "attn_head".into(), l);
        }
        out
    }

    /// Mutable view in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = Vec::new();
        fn lin<'a, T>(out: &mut Vec<&'a mut ParamTensor<T>>, l: &'a mut Linear<T>) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for blk in self.modalities.iter_mut() {
            for br in blk.experts.iter_mut().flatten() {
                lin(&mut out, &mut br.down);
                lin(&mut out, &mut br.up);
                lin(&mut out, &mut br.proj);
                out.push(&mut br.norm.gain);
                out.push(&mut br.norm.bias);
            }
            for l in [&mut blk.router, &mut blk.head, &mut blk.scorer, &mut blk.teacher_proj].into_iter().flatten() {
                lin(&mut out, l);
            }
        }
        if let Some(l) = &mut self.concat_head {
            lin(&mut out, l);
        }
        if let Some(q) = &mut self.attn_query {
            out.push(q);
        }
        if let Some(l) = &mut self.attn_head {
            lin(&mut out, l);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    /// All parameter values concatenated in checkpoint order.
    pub fn flat_values(&self) -> Vec<T> {
        self.named_params().iter().flat_map(|(_, p)| p.value.data().iter().copied()).collect()
    }

    /// All accumulated gradients, aligned with [`flat_values`](Self::flat_values).
    pub fn flat_grads(&self) -> Vec<T> {
        self.named_params().iter().flat_map(|(_, p)| p.grad.data().iter().copied()).collect()
    }

    /// Overwrites every parameter from a vector laid out like `flat_values`.
    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        let total: usize = self.named_params().iter().map(|(_, p)| p.numel()).sum();
        if values.len() != total {
            return Err(MedmixError::Shape {
                op: "set_flat",
                detail: format!("{} values for {total} parameters", values.len()),
            });
        }
        let mut at = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.value.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Trainable scalars including training-only teacher heads.
    pub fn count_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Scalars needed at inference (teacher heads excluded).
    pub fn count_deployed_parameters(&self) -> usize {
        self.named_params().iter().filter(|(n, _)| !n.contains(".teacher_proj.")).map(|(_, p)| p.numel()).sum()
    }
}
