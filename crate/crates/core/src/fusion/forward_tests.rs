use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tests::schema;
use super::*;
use crate::diffcore::gradcheck::{grad_check, REL_ERR_TOL};
use crate::diffcore::{BitMatrix, Tensor2};
use crate::losses::LossConfig;

/// Random batch for `schema`: roughly a quarter of modalities missing, a
/// third of the remaining experts masked, masked cells filled with garbage.
pub(crate) fn random_batch(schema: &DatasetSchema, b: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_count = schema.num_modalities();
    let total: usize = schema.num_experts();
    let mut available = BitMatrix::new(b, m_count, false);
    let mut mask = BitMatrix::new(b, total, false);
    for i in 0..b {
        let mut j = 0;
        for (m, ms) in schema.modalities.iter().enumerate() {
            let k_count = ms.expert_dims.len();
            if rng.random_bool(0.75) {
                available.set(i, m, true);
                let keep = rng.random_range(0..k_count);
                for k in 0..k_count {
                    mask.set(i, j + k, k == keep || rng.random_bool(0.67));
                }
            }
            j += k_count;
        }
    }
    let mut rand_t = |rows: usize, cols: usize| {
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    };
    let embeddings =
        schema.modalities.iter().flat_map(|m| m.expert_dims.iter().copied()).map(|d| rand_t(b, d)).collect();
    let teachers = schema.modalities.iter().map(|m| (m.teacher_dim > 0).then(|| rand_t(b, m.teacher_dim))).collect();
    let c = schema.num_classes;
    let mut labels = Tensor2::zeros(b, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for i in 0..b {
        match schema.task_kind {
            TaskKind::MultiLabel => (0..c).for_each(|j| labels.set(i, j, rng.random_range(0..2) as f64)),
            TaskKind::MultiClass => labels.set(i, rng.random_range(0..c), 1.0),
        }
    }
    Batch { indices: (0..b).collect(), embeddings, expert_mask: mask, available, teachers, labels }
}

/// Overwrites every cell the model must not read.
pub(crate) fn scramble_hidden(batch: &Batch<f64>, schema: &DatasetSchema, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    let mut j = 0;
    for (m, ms) in schema.modalities.iter().enumerate() {
        for k in 0..ms.expert_dims.len() {
            for i in 0..batch.len() {
                if !batch.expert_mask.get(i, j + k) || !batch.available.get(i, m) {
                    out.embeddings[j + k].row_mut(i).iter_mut().for_each(|v| *v = rng.random_range(-1e3..1e3));
                }
            }
        }
        if let Some(t) = out.teachers[m].as_mut() {
            for i in 0..batch.len() {
                if !batch.available.get(i, m) {
                    t.row_mut(i).iter_mut().for_each(|v| *v = rng.random_range(-1e3..1e3));
                }
            }
        }
        j += ms.expert_dims.len();
    }
    out
}

fn small_schema(kind: TaskKind) -> DatasetSchema {
    let mut s = schema(&[&[3, 2], &[4], &[2, 3, 2]], &[3, 2, 4], 3);
    s.task_kind = kind;
    s
}

fn model(s: &DatasetSchema, variant: &VariantSpec, seed: u64) -> FusionParams<f64> {
    let cfg = ModelConfig { latent_dim: 4, dropout: 0.1, scorer_in_router_group: true };
    let mut p = FusionParams::init(s, &cfg, variant, seed).unwrap();
    p.prior_logits = vec![0.1, -0.2, 0.3];
    p
}

fn key() -> Option<DropoutKey> {
    Some(DropoutKey { seed: 5, epoch: 3, batch: 1 })
}

#[test]
fn single_expert_gets_full_gate() {
    let s = schema(&[&[3]], &[2], 2);
    let p = model(&s, &VariantSpec::default(), 0);
    let mut batch = random_batch(&s, 6, 1);
    batch.available = BitMatrix::new(6, 1, true);
    batch.expert_mask = BitMatrix::new(6, 1, true);
    let t = p.forward(&batch, None).unwrap();
    let g = t.intra.gates[0].as_ref().unwrap();
    assert!((0..6).all(|i| g.get(i, 0) == 1.0));
    // one modality: the fused logits are that modality's head output
    assert_eq!(t.fused_logits, *t.modality_logits[0].as_ref().unwrap());
}

#[test]
fn masked_modality_is_zero_and_flagged() {
    let s = small_schema(TaskKind::MultiLabel);
    let p = model(&s, &VariantSpec::default(), 0);
    let mut batch = random_batch(&s, 5, 2);
    batch.drop_modality(2, 0, 0, 2);
    let t = p.forward(&batch, None).unwrap();
    assert!(t.intra.gate_empty[0][2]);
    assert!(t.intra.z[0].as_ref().unwrap().row(2).iter().all(|&v| v == 0.0));
    assert!(t.intra.gates[0].as_ref().unwrap().row(2).iter().all(|&v| v == 0.0));
}

#[test]
fn identical_experts_are_a_fixed_point() {
    let s = schema(&[&[3, 3]], &[2], 2);
    let mut p = model(&s, &VariantSpec::default(), 0);
    let first = p.modalities[0].experts[0].clone();
    p.modalities[0].experts[1] = first;
    let mut batch = random_batch(&s, 4, 3);
    batch.embeddings[1] = batch.embeddings[0].clone();
    batch.available = BitMatrix::new(4, 1, true);
    batch.expert_mask = BitMatrix::new(4, 2, true);
    let t = p.forward(&batch, None).unwrap();
    let z = t.intra.z[0].as_ref().unwrap();
    let single = {
        let mut b = batch.clone();
        b.expert_mask = BitMatrix::from_rows(&vec![vec![true, false]; 4]).unwrap();
        p.forward(&b, None).unwrap().intra.z[0].clone().unwrap()
    };
    for (a, b) in z.data().iter().zip(single.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_available_modality_passes_through() {
    let s = small_schema(TaskKind::MultiClass);
    let p = model(&s, &VariantSpec::default(), 1);
    let mut batch = random_batch(&s, 4, 4);
    for i in 0..4 {
        batch.available.set(i, 0, true);
        batch.expert_mask.set(i, 0, true);
        batch.drop_modality(i, 1, 2, 1);
        batch.drop_modality(i, 2, 3, 3);
    }
    let t = p.forward(&batch, None).unwrap();
    let w = t.fusion_weights.as_ref().unwrap();
    for i in 0..4 {
        assert_eq!(w.row(i), &[1.0, 0.0, 0.0]);
        assert_eq!(t.fused_logits.row(i), t.modality_logits[0].as_ref().unwrap().row(i));
    }
}

#[test]
fn equal_modality_logits_survive_fusion() {
    let s = schema(&[&[3], &[3]], &[2, 2], 2);
    let mut p = model(&s, &VariantSpec::default(), 2);
    p.modalities[1].experts[0] = p.modalities[0].experts[0].clone();
    p.modalities[1].head = p.modalities[0].head.clone();
    let mut batch = random_batch(&s, 4, 5);
    batch.embeddings[1] = batch.embeddings[0].clone();
    batch.available = BitMatrix::new(4, 2, true);
    batch.expert_mask = BitMatrix::new(4, 2, true);
    let t = p.forward(&batch, None).unwrap();
    let l0 = t.modality_logits[0].as_ref().unwrap();
    for (a, b) in t.fused_logits.data().iter().zip(l0.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn all_missing_predicts_the_prior() {
    let s = small_schema(TaskKind::MultiClass);
    for mode in FusionMode::ALL {
        let v = VariantSpec { fusion_mode: mode, ..Default::default() };
        let p = model(&s, &v, 3);
        let mut batch = random_batch(&s, 3, 6);
        batch.drop_modality(1, 0, 0, 2);
        batch.drop_modality(1, 1, 2, 1);
        batch.drop_modality(1, 2, 3, 3);
        let t = p.forward(&batch, None).unwrap();
        assert!(t.empty[1]);
        assert_eq!(t.fused_logits.row(1), &[0.1, -0.2, 0.3], "{mode:?}");
    }
}

#[test]
fn gates_and_weights_are_valid() {
    let s = small_schema(TaskKind::MultiLabel);
    let p = model(&s, &VariantSpec::default(), 4);
    for seed in 0..20 {
        let batch = random_batch(&s, 8, seed);
        let t = p.forward(&batch, None).unwrap();
        for m in 0..3 {
            let g = t.intra.gates[m].as_ref().unwrap();
            let mask = &t.intra.expert_mask[m];
            for i in 0..8 {
                let sum: f64 = g.row(i).iter().sum();
                if mask.row(i).iter().any(|&x| x) {
                    assert!((sum - 1.0).abs() < 1e-6);
                }
                for k in 0..mask.cols() {
                    if !mask.get(i, k) {
                        assert_eq!(g.get(i, k), 0.0);
                    }
                }
            }
        }
        let w = t.fusion_weights.as_ref().unwrap();
        for i in 0..8 {
            if !t.empty[i] {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                // fused logits lie in the hull of the available head outputs
                for c in 0..3 {
                    let vals: Vec<f64> = (0..3)
                        .filter(|&m| t.available.get(i, m))
                        .map(|m| t.modality_logits[m].as_ref().unwrap().get(i, c))
                        .collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let v = t.fused_logits.get(i, c);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
            for m in 0..3 {
                if !t.available.get(i, m) {
                    assert_eq!(w.get(i, m), 0.0);
                }
            }
        }
    }
}

#[test]
fn uniform_mean_is_the_arithmetic_mean() {
    let s = schema(&[&[3, 2, 4]], &[2], 2);
    let v = VariantSpec { intra_mode: IntraMode::UniformMean, ..Default::default() };
    let p = model(&s, &v, 5);
    let mut batch = random_batch(&s, 4, 7);
    batch.available = BitMatrix::new(4, 1, true);
    batch.expert_mask = BitMatrix::new(4, 3, true);
    let t = p.forward(&batch, None).unwrap();
    let z = t.intra.z[0].as_ref().unwrap();
    let singles: Vec<Tensor2<f64>> = (0..3)
        .map(|k| {
            let mut b = batch.clone();
            b.expert_mask = BitMatrix::from_rows(&vec![(0..3).map(|j| j == k).collect(); 4]).unwrap();
            p.forward(&b, None).unwrap().intra.z[0].clone().unwrap()
        })
        .collect();
    for i in 0..4 {
        for j in 0..4 {
            let mean = singles.iter().map(|z| z.get(i, j)).sum::<f64>() / 3.0;
            assert!((z.get(i, j) - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn teacher_projection_skips_unavailable_rows() {
    let s = schema(&[&[3], &[2]], &[4, 4], 2);
    let mut p = FusionParams::<f64>::init(
        &s,
        &ModelConfig { latent_dim: 4, dropout: 0.0, scorer_in_router_group: true },
        &VariantSpec::default(),
        0,
    )
    .unwrap();
    p.modalities[0].teacher_proj.as_mut().unwrap().weight.value = Tensor2::identity(4);
    let mut batch = random_batch(&s, 5, 8);
    batch.available = BitMatrix::new(5, 2, true);
    batch.expert_mask = BitMatrix::new(5, 2, true);
    batch.drop_modality(3, 0, 0, 1);
    let avail = p.forward(&batch, None).unwrap().available;
    let tp = p.project_teacher(&batch, &avail).unwrap();
    let t0 = tp[0].as_ref().unwrap();
    assert_eq!(t0.rows, vec![0, 1, 2, 4]);
    assert_eq!(t0.projected, batch.teachers[0].as_ref().unwrap().gather_rows(&[0, 1, 2, 4]));
}

fn run(
    p: &FusionParams<f64>,
    batch: &Batch<f64>,
    epoch: usize,
) -> (FusionParams<f64>, crate::losses::LossBreakdown, Tensor2<f64>) {
    let mut q = p.clone();
    q.zero_grad();
    let (loss, trace) = q.forward_backward(batch, &LossConfig::default(), epoch, key()).unwrap();
    (q, loss, trace.fused_logits)
}

#[test]
fn hidden_content_never_matters() {
    let variants = [
        VariantSpec::default(),
        VariantSpec { intra_mode: IntraMode::UniformMean, ..Default::default() },
        VariantSpec { fusion_mode: FusionMode::Concat, ..Default::default() },
        VariantSpec { fusion_mode: FusionMode::Attention, ..Default::default() },
        VariantSpec { fusion_mode: FusionMode::Max, ..Default::default() },
        VariantSpec { fusion_mode: FusionMode::MeanAvg, ..Default::default() },
    ];
    let s = small_schema(TaskKind::MultiLabel);
    for (vi, v) in variants.iter().enumerate() {
        let p = model(&s, v, vi as u64);
        for seed in 0..10 {
            let batch = random_batch(&s, 6, seed);
            let other = scramble_hidden(&batch, &s, seed + 100);
            assert_ne!(batch, other);
            let (qa, la, fa) = run(&p, &batch, 40);
            let (qb, lb, fb) = run(&p, &other, 40);
            assert_eq!(
                fa.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                fb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(la, lb);
            let ga: Vec<u64> = qa.flat_grads().iter().map(|v| v.to_bits()).collect();
            let gb: Vec<u64> = qb.flat_grads().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ga, gb, "variant {vi} seed {seed}");
        }
    }
}

fn check_gradients(p: &FusionParams<f64>, batch: &Batch<f64>, epoch: usize) -> f64 {
    let (q, _, _) = run(p, batch, epoch);
    let analytic = q.flat_grads();
    let point = p.flat_values();
    let mut probe = p.clone();
    grad_check(
        |x| {
            probe.set_flat(x).unwrap();
            probe.zero_grad();
            probe.forward_backward(batch, &LossConfig::default(), epoch, key()).unwrap().0.total
        },
        &point,
        &analytic,
        1e-5,
    )
    .unwrap()
}

#[test]
fn end_to_end_gradients_every_mode() {
    for kind in [TaskKind::MultiLabel, TaskKind::MultiClass] {
        let s = small_schema(kind);
        for (i, mode) in FusionMode::ALL.into_iter().enumerate() {
            let v = VariantSpec { fusion_mode: mode, ..Default::default() };
            let p = model(&s, &v, 10 + i as u64);
            let batch = random_batch(&s, 4, 20 + i as u64);
            let err = check_gradients(&p, &batch, 40);
            assert!(err <= REL_ERR_TOL, "{kind:?} {mode:?}: {err}");
        }
    }
}

#[test]
fn end_to_end_gradients_intra_variants() {
    let s = small_schema(TaskKind::MultiLabel);
    let variants = [
        VariantSpec { intra_mode: IntraMode::UniformMean, ..Default::default() },
        VariantSpec { intra_mode: IntraMode::BestExpertOnly, best_experts: vec![1, 0, 2], ..Default::default() },
        VariantSpec { distillation_enabled: false, ..Default::default() },
    ];
    for (i, v) in variants.iter().enumerate() {
        let p = model(&s, v, 30 + i as u64);
        let batch = random_batch(&s, 4, 40 + i as u64);
        let err = check_gradients(&p, &batch, 40);
        assert!(err <= REL_ERR_TOL, "variant {i}: {err}");
    }
}
