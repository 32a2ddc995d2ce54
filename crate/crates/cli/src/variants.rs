//! Named model variants for `--variant` and the ablation grid.
//!
//! | name                    | change from the base variant                    |
//! |-------------------------|-------------------------------------------------|
//! | `full`                  | none                                            |
//! | `no-distill`            | distillation off                                |
//! | `uniform-mean`          | experts averaged instead of routed              |
//! | `best-expert-only`      | one expert per modality                         |
//! | `drop-family:<expert>`  | every expert with that name disabled            |
//! | `single-modality:<m>`   | only modality `m` enabled                       |

use anyhow::{bail, Result};
use medmix::embedstore::EmbeddingDataset;
use medmix::fusion::{IntraMode, VariantSpec};

/// Expert names grouped by modality.
fn expert_names(dataset: &EmbeddingDataset) -> Vec<Vec<String>> {
    (0..dataset.num_modalities())
        .map(|m| {
            let mut experts: Vec<_> = dataset.experts.iter().filter(|e| e.modality_id == m).collect();
            experts.sort_by_key(|e| e.expert_id);
            experts.into_iter().map(|e| e.name.clone()).collect()
        })
        .collect()
}

/// Distinct expert names in first-seen order.
pub fn families(dataset: &EmbeddingDataset) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for name in expert_names(dataset).into_iter().flatten() {
        if !out.contains(&name) {
            out.push(name);
        }
    }
    out
}

/// The ablation grid for `dataset`. Family drops that would disable every
/// expert and single-modality rows of a one-modality dataset are left out.
pub fn ablation_grid(dataset: &EmbeddingDataset) -> Vec<String> {
    let mut grid: Vec<String> = ["full", "no-distill", "uniform-mean", "best-expert-only"].map(String::from).to_vec();
    let fams = families(dataset);
    if fams.len() > 1 {
        grid.extend(fams.iter().map(|f| format!("drop-family:{f}")));
    }
    if dataset.num_modalities() > 1 {
        grid.extend(dataset.modality_names.iter().map(|m| format!("single-modality:{m}")));
    }
    grid
}

/// Builds the variant called `name` on top of `base`. `best_experts` is
/// required for `best-expert-only`.
pub fn variant_by_name(
    name: &str,
    dataset: &EmbeddingDataset,
    base: &VariantSpec,
    best_experts: Option<&[usize]>,
) -> Result<VariantSpec> {
    let schema = dataset.schema();
    let mut v = base.resolved(&schema)?;
    match name.split_once(':') {
        None => match name {
            "full" => {}
            "no-distill" => v.distillation_enabled = false,
            "uniform-mean" => v.intra_mode = IntraMode::UniformMean,
            "best-expert-only" => {
                let Some(best) = best_experts else {
                    bail!("best-expert-only needs `ablation.best_experts` or a trained full model");
                };
                v.intra_mode = IntraMode::BestExpertOnly;
                v.best_experts = best.to_vec();
            }
            _ => bail!("unknown variant {name:?}"),
        },
        Some(("drop-family", family)) => {
            let names = expert_names(dataset);
            if !names.iter().flatten().any(|n| n == family) {
                bail!("no expert family named {family:?}; known: {:?}", families(dataset));
            }
            for (m, experts) in names.iter().enumerate() {
                for (k, n) in experts.iter().enumerate() {
                    if n == family {
                        v.expert_families_enabled[m][k] = false;
                    }
                }
                if !v.expert_families_enabled[m].iter().any(|&e| e) {
                    v.modalities_enabled[m] = false;
                }
            }
        }
        Some(("single-modality", modality)) => {
            let m = crate::config::modality_index(dataset, modality)?;
            v.modalities_enabled = (0..schema.num_modalities()).map(|j| j == m).collect();
        }
        _ => bail!("unknown variant {name:?}"),
    }
    Ok(v.resolved(&schema)?)
}
