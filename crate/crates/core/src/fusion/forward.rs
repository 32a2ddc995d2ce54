use crate::diffcore::tensor::{axpy, dot};
use crate::diffcore::{
    dropout, dropout_backward, gelu, gelu_backward, masked_softmax, softmax_backward, BitMatrix, LayerNormCache, Real,
    Tensor2,
};
use crate::error::{MedmixError, Result};
use crate::losses::{total_loss, DistillInputs, LossBreakdown, LossConfig};
use crate::rng::{self, DROPOUT};

use super::{Batch, ExpertBranch, FusionMode, FusionParams, IntraMode};

/// Identifies the dropout draws of one training step. `None` in the APIs
/// below means evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

#[derive(Clone, Debug)]
struct BranchCache<T> {
    rows: Vec<usize>,
    x: Tensor2<T>,
    h1: Tensor2<T>,
    a1: Tensor2<T>,
    refined: Tensor2<T>,
    ln: LayerNormCache<T>,
    normed: Tensor2<T>,
    drop: Option<Vec<T>>,
    /// `rows × d` expert representation after dropout.
    z: Tensor2<T>,
}

/// Intermediate values of the intra-modality level.
#[derive(Clone, Debug)]
pub struct IntraTrace<T> {
    branches: Vec<Vec<Option<BranchCache<T>>>>,
    /// Effective expert mask per modality (`B × K_m`).
    pub expert_mask: Vec<BitMatrix>,
    /// Expert gates per modality (`B × K_m`); `None` for disabled modalities.
    pub gates: Vec<Option<Tensor2<T>>>,
    pub gate_empty: Vec<Vec<bool>>,
    /// Aggregated representation per modality (`B × d`), zero rows where absent.
    pub z: Vec<Option<Tensor2<T>>>,
}

/// Everything the backward pass needs, plus the documented outputs.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub intra: IntraTrace<T>,
    /// Effective availability (`B × M`): present, enabled, and with a live expert.
    pub available: BitMatrix,
    /// Samples with no available modality; they get the prior logits.
    pub empty: Vec<bool>,
    pub modality_logits: Vec<Option<Tensor2<T>>>,
    /// Scorer outputs (medmix) or attention scores (`B × M`).
    pub fusion_scores: Option<Tensor2<T>>,
    /// Modality weights (medmix) or attention weights (`B × M`).
    pub fusion_weights: Option<Tensor2<T>>,
    pub fused_logits: Tensor2<T>,
    argmax: Vec<usize>,
    fused_input: Option<Tensor2<T>>,
}

/// Projected teacher rows for one modality.
#[derive(Clone, Debug)]
pub struct TeacherProjection<T> {
    /// Batch rows that were projected (available samples only).
    pub rows: Vec<usize>,
    input: Tensor2<T>,
    /// `rows.len() × d`.
    pub projected: Tensor2<T>,
}

fn branch_forward<T: Real>(
    br: &ExpertBranch<T>,
    x: Tensor2<T>,
    rows: Vec<usize>,
    rate: f64,
    drop_key: Option<(DropoutKey, usize, usize)>,
) -> Result<BranchCache<T>> {
    let h1 = br.down.forward(&x)?;
    let a1 = gelu(&h1);
    let mut refined = br.up.forward(&a1)?;
    refined.add_assign(&x)?;
    let p = br.proj.forward(&refined)?;
    let (normed, ln) = br.norm.forward(&p)?;
    let act = gelu(&normed);
    let (z, drop) = match drop_key {
        Some((key, m, k)) => {
            let mut g = rng::stream(key.seed, &[DROPOUT, key.epoch, key.batch, m as u64, k as u64]);
            dropout(&act, rate, true, &mut g)?
        }
        None => (act, None),
    };
    Ok(BranchCache { rows, x, h1, a1, refined, ln, normed, drop, z })
}

fn branch_backward<T: Real>(br: &mut ExpertBranch<T>, cache: &BranchCache<T>, dz: &Tensor2<T>) -> Result<()> {
    let dact = dropout_backward(cache.drop.as_deref(), dz);
    let dnormed = gelu_backward(&cache.normed, &dact);
    let dp = br.norm.backward(&cache.ln, &dnormed)?;
    let drefined = br.proj.backward(&cache.refined, &dp)?;
    let da1 = br.up.backward(&cache.a1, &drefined)?;
    let dh1 = gelu_backward(&cache.h1, &da1);
    br.down.backward_params(&cache.x, &dh1)
}

fn column<T: Real>(t: &Tensor2<T>, j: usize) -> Tensor2<T> {
    Tensor2::from_vec(t.rows(), 1, (0..t.rows()).map(|i| t.get(i, j)).collect()).unwrap()
}

fn scatter_teachers<T: Real>(teacher: &[Option<TeacherProjection<T>>], b: usize) -> Vec<Option<Tensor2<T>>> {
    teacher.iter().map(|tp| tp.as_ref().map(|tp| Tensor2::scatter_rows(&tp.projected, &tp.rows, b))).collect()
}

fn distill_inputs<'a, T: Real>(
    student_z: &'a [Option<Tensor2<T>>],
    teacher_full: &'a [Option<Tensor2<T>>],
    available: &'a BitMatrix,
) -> DistillInputs<'a, T> {
    DistillInputs {
        student: student_z.iter().zip(teacher_full).map(|(z, t)| if t.is_some() { z.as_ref() } else { None }).collect(),
        teacher: teacher_full.iter().map(Option::as_ref).collect(),
        available,
    }
}

impl<T: Real> FusionParams<T> {
    fn expert_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.schema.num_modalities());
        let mut acc = 0;
        for m in &self.schema.modalities {
            offsets.push(acc);
            acc += m.expert_dims.len();
        }
        offsets
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let b = batch.len();
        let dims: Vec<usize> = self.schema.modalities.iter().flat_map(|m| m.expert_dims.iter().copied()).collect();
        let ok = batch.embeddings.len() == dims.len()
            && batch.embeddings.iter().zip(&dims).all(|(e, &d)| e.shape() == (b, d))
            && batch.expert_mask.rows() == b
            && batch.expert_mask.cols() == dims.len()
            && batch.available.rows() == b
            && batch.available.cols() == self.schema.num_modalities()
            && batch.labels.shape() == (b, self.schema.num_classes);
        if ok {
            Ok(())
        } else {
            Err(MedmixError::SchemaMismatch {
                checkpoint: self.schema.hash(),
                dataset: "batch layout does not match the model schema".into(),
            })
        }
    }

    /// Intra-modality level: adapters, projections, expert routing.
    pub fn intra_forward(&self, batch: &Batch<T>, drop_key: Option<DropoutKey>) -> Result<IntraTrace<T>> {
        self.check_batch(batch)?;
        let b = batch.len();
        let d = self.latent_dim();
        let offsets = self.expert_offsets();
        let mut trace = IntraTrace {
            branches: Vec::new(),
            expert_mask: Vec::new(),
            gates: Vec::new(),
            gate_empty: Vec::new(),
            z: Vec::new(),
        };
        for (m, blk) in self.modalities.iter().enumerate() {
            let kc = blk.experts.len();
            let mut mask = BitMatrix::new(b, kc, false);
            let mut caches = Vec::with_capacity(kc);
            for (k, br) in blk.experts.iter().enumerate() {
                let Some(br) = br else {
                    caches.push(None);
                    continue;
                };
                let j = offsets[m] + k;
                let rows: Vec<usize> =
                    (0..b).filter(|&i| batch.expert_mask.get(i, j) && batch.available.get(i, m)).collect();
                for &i in &rows {
                    mask.set(i, k, true);
                }
                if rows.is_empty() {
                    caches.push(None);
                    continue;
                }
                let x = batch.embeddings[j].gather_rows(&rows);
                let key = drop_key.map(|key| (key, m, k));
                caches.push(Some(branch_forward(br, x, rows, self.config.dropout, key)?));
            }
            if !blk.is_enabled() {
                trace.branches.push(caches);
                trace.expert_mask.push(mask);
                trace.gates.push(None);
                trace.gate_empty.push(vec![true; b]);
                trace.z.push(None);
                continue;
            }
            let (gates, empty) = match (&blk.router, self.variant.intra_mode) {
                (Some(router), IntraMode::LearnedRouter) => {
                    let mut scores = Tensor2::zeros(b, kc);
                    for (k, c) in caches.iter().enumerate() {
                        if let Some(c) = c {
                            let s = router.forward(&c.z)?;
                            for (r, &i) in c.rows.iter().enumerate() {
                                scores.set(i, k, s.get(r, 0));
                            }
                        }
                    }
                    let ms = masked_softmax(&scores, &mask)?;
                    (ms.weights, ms.empty)
                }
                _ => {
                    let mut g = Tensor2::zeros(b, kc);
                    let mut empty = vec![false; b];
                    for i in 0..b {
                        let n = mask.row(i).iter().filter(|&&x| x).count();
                        if n == 0 {
                            empty[i] = true;
                            continue;
                        }
                        let w = T::one() / T::lit(n as f64);
                        for k in 0..kc {
                            if mask.get(i, k) {
                                g.set(i, k, w);
                            }
                        }
                    }
                    (g, empty)
                }
            };
            let mut z = Tensor2::zeros(b, d);
            for (k, c) in caches.iter().enumerate() {
                if let Some(c) = c {
                    for (r, &i) in c.rows.iter().enumerate() {
                        axpy(z.row_mut(i), gates.get(i, k), c.z.row(r));
                    }
                }
            }
            trace.branches.push(caches);
            trace.expert_mask.push(mask);
            trace.gates.push(Some(gates));
            trace.gate_empty.push(empty);
            trace.z.push(Some(z));
        }
        Ok(trace)
    }

    /// Accumulates parameter gradients given `d loss / d z^(m)` per modality.
    pub fn intra_backward(&mut self, trace: &IntraTrace<T>, dz: &[Option<Tensor2<T>>]) -> Result<()> {
        let learned = self.variant.intra_mode == IntraMode::LearnedRouter;
        for (m, blk) in self.modalities.iter_mut().enumerate() {
            let (Some(dz_m), Some(gates)) = (dz.get(m).and_then(Option::as_ref), trace.gates[m].as_ref()) else {
                continue;
            };
            let caches = &trace.branches[m];
            let kc = caches.len();
            let mut dz_k: Vec<Option<Tensor2<T>>> = caches
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    c.as_ref().map(|c| {
                        let mut out = Tensor2::zeros(c.rows.len(), c.z.cols());
                        for (r, &i) in c.rows.iter().enumerate() {
                            axpy(out.row_mut(r), gates.get(i, k), dz_m.row(i));
                        }
                        out
                    })
                })
                .collect();
            if let (true, Some(router)) = (learned, blk.router.as_mut()) {
                let mut dgates = Tensor2::zeros(gates.rows(), kc);
                for (k, c) in caches.iter().enumerate() {
                    if let Some(c) = c {
                        for (r, &i) in c.rows.iter().enumerate() {
                            dgates.set(i, k, dot(dz_m.row(i), c.z.row(r)));
                        }
                    }
                }
                let dscores = softmax_backward(gates, &dgates);
                for (k, c) in caches.iter().enumerate() {
                    if let Some(c) = c {
                        let ds =
                            Tensor2::from_vec(c.rows.len(), 1, c.rows.iter().map(|&i| dscores.get(i, k)).collect())?;
                        let extra = router.backward(&c.z, &ds)?;
                        dz_k[k].as_mut().unwrap().add_assign(&extra)?;
                    }
                }
            }
            for (k, c) in caches.iter().enumerate() {
                if let (Some(c), Some(g)) = (c, &dz_k[k]) {
                    let br = blk.experts[k].as_mut().expect("cached branch exists");
                    branch_backward(br, c, g)?;
                }
            }
        }
        Ok(())
    }

    /// Full forward pass: intra-modality routing, then modality fusion.
    pub fn forward(&self, batch: &Batch<T>, drop_key: Option<DropoutKey>) -> Result<ForwardTrace<T>> {
        let intra = self.intra_forward(batch, drop_key)?;
        self.inter_forward(intra)
    }

    fn inter_forward(&self, intra: IntraTrace<T>) -> Result<ForwardTrace<T>> {
        let m_count = self.modalities.len();
        let b = intra.expert_mask.first().map_or(0, BitMatrix::rows);
        let c = self.num_classes();
        let d = self.latent_dim();
        let mut available = BitMatrix::new(b, m_count, false);
        for m in 0..m_count {
            if intra.z[m].is_some() {
                for i in 0..b {
                    available.set(i, m, intra.expert_mask[m].row(i).iter().any(|&x| x));
                }
            }
        }
        let empty: Vec<bool> = (0..b).map(|i| !available.row(i).iter().any(|&x| x)).collect();
        let mut modality_logits = vec![None; m_count];
        for (m, blk) in self.modalities.iter().enumerate() {
            if let (Some(head), Some(z)) = (&blk.head, &intra.z[m]) {
                modality_logits[m] = Some(head.forward(z)?);
            }
        }
        let mut fused = Tensor2::zeros(b, c);
        let mut fusion_scores = None;
        let mut fusion_weights = None;
        let mut argmax = Vec::new();
        let mut fused_input = None;
        match self.variant.fusion_mode {
            FusionMode::Medmix => {
                let mut scores = Tensor2::zeros(b, m_count);
                for (m, blk) in self.modalities.iter().enumerate() {
                    if let (Some(scorer), Some(z)) = (&blk.scorer, &intra.z[m]) {
                        let s = scorer.forward(z)?;
                        for i in 0..b {
                            scores.set(i, m, s.get(i, 0));
                        }
                    }
                }
                let w = masked_softmax(&scores, &available)?.weights;
                for i in 0..b {
                    for (m, l) in modality_logits.iter().enumerate() {
                        if let (true, Some(l)) = (available.get(i, m), l) {
                            axpy(fused.row_mut(i), w.get(i, m), l.row(i));
                        }
                    }
                }
                fusion_scores = Some(scores);
                fusion_weights = Some(w);
            }
            FusionMode::MeanAvg => {
                for i in 0..b {
                    let n = available.row(i).iter().filter(|&&x| x).count();
                    if n == 0 {
                        continue;
                    }
                    let w = T::one() / T::lit(n as f64);
                    for (m, l) in modality_logits.iter().enumerate() {
                        if let (true, Some(l)) = (available.get(i, m), l) {
                            axpy(fused.row_mut(i), w, l.row(i));
                        }
                    }
                }
            }
            FusionMode::Max => {
                argmax = vec![usize::MAX; b * c];
                for i in 0..b {
                    for j in 0..c {
                        let mut best = T::neg_infinity();
                        for (m, l) in modality_logits.iter().enumerate() {
                            if let (true, Some(l)) = (available.get(i, m), l) {
                                if l.get(i, j) > best {
                                    best = l.get(i, j);
                                    argmax[i * c + j] = m;
                                }
                            }
                        }
                        if best > T::neg_infinity() {
                            fused.set(i, j, best);
                        }
                    }
                }
            }
            FusionMode::Concat => {
                let zs: Vec<&Tensor2<T>> = intra.z.iter().flatten().collect();
                let mut zc = Tensor2::zeros(b, zs.len() * d);
                for i in 0..b {
                    let row = zc.row_mut(i);
                    for (s, z) in zs.iter().enumerate() {
                        row[s * d..(s + 1) * d].copy_from_slice(z.row(i));
                    }
                }
                fused = self.concat_head.as_ref().expect("concat head").forward(&zc)?;
                fused_input = Some(zc);
            }
            FusionMode::Attention => {
                let q = self.attn_query.as_ref().expect("attention query");
                let scale = T::one() / T::lit(d as f64).sqrt();
                let mut scores = Tensor2::zeros(b, m_count);
                for (m, z) in intra.z.iter().enumerate() {
                    if let Some(z) = z {
                        for i in (0..b).filter(|&i| available.get(i, m)) {
                            scores.set(i, m, dot(q.value.row(0), z.row(i)) * scale);
                        }
                    }
                }
                let alpha = masked_softmax(&scores, &available)?.weights;
                let mut ctx = Tensor2::zeros(b, d);
                for i in 0..b {
                    for (m, z) in intra.z.iter().enumerate() {
                        if let (true, Some(z)) = (available.get(i, m), z) {
                            axpy(ctx.row_mut(i), alpha.get(i, m), z.row(i));
                        }
                    }
                }
                fused = self.attn_head.as_ref().expect("attention head").forward(&ctx)?;
                fusion_scores = Some(scores);
                fusion_weights = Some(alpha);
                fused_input = Some(ctx);
            }
        }
        for (i, &e) in empty.iter().enumerate() {
            if e {
                for (v, &p) in fused.row_mut(i).iter_mut().zip(&self.prior_logits) {
                    *v = T::lit(p);
                }
            }
        }
        fused.ensure_finite("fused logits")?;
        Ok(ForwardTrace {
            intra,
            available,
            empty,
            modality_logits,
            fusion_scores,
            fusion_weights,
            fused_logits: fused,
            argmax,
            fused_input,
        })
    }

    /// Backward through both levels. `extra_dz` adds gradient on `z^(m)` of
    /// this same trace (distillation without a separate evaluation pass).
    pub fn backward(
        &mut self,
        trace: &ForwardTrace<T>,
        d_fused: &Tensor2<T>,
        extra_dz: Option<&[Option<Tensor2<T>>]>,
    ) -> Result<()> {
        let m_count = self.modalities.len();
        let b = d_fused.rows();
        let c = self.num_classes();
        let d = self.latent_dim();
        let avail = &trace.available;
        let mut dfused = d_fused.clone();
        for (i, &e) in trace.empty.iter().enumerate() {
            if e {
                dfused.row_mut(i).fill(T::zero());
            }
        }
        let z = &trace.intra.z;
        let mut dz: Vec<Option<Tensor2<T>>> =
            z.iter().map(|z| z.as_ref().map(|z| Tensor2::zeros(z.rows(), d))).collect();
        let mut dlogits: Vec<Option<Tensor2<T>>> =
            trace.modality_logits.iter().map(|l| l.as_ref().map(|_| Tensor2::zeros(b, c))).collect();
        match self.variant.fusion_mode {
            FusionMode::Medmix => {
                let w = trace.fusion_weights.as_ref().expect("medmix weights");
                let mut dw = Tensor2::zeros(b, m_count);
                for i in 0..b {
                    for m in 0..m_count {
                        if let (true, Some(l), Some(dl)) = (avail.get(i, m), &trace.modality_logits[m], &mut dlogits[m])
                        {
                            dw.set(i, m, dot(dfused.row(i), l.row(i)));
                            axpy(dl.row_mut(i), w.get(i, m), dfused.row(i));
                        }
                    }
                }
                let ds = softmax_backward(w, &dw);
                for (m, blk) in self.modalities.iter_mut().enumerate() {
                    if let (Some(scorer), Some(zm), Some(dzm)) = (blk.scorer.as_mut(), &z[m], &mut dz[m]) {
                        dzm.add_assign(&scorer.backward(zm, &column(&ds, m))?)?;
                    }
                }
            }
            FusionMode::MeanAvg => {
                for i in 0..b {
                    let n = avail.row(i).iter().filter(|&&x| x).count();
                    if n == 0 {
                        continue;
                    }
                    let w = T::one() / T::lit(n as f64);
                    for m in 0..m_count {
                        if let (true, Some(dl)) = (avail.get(i, m), &mut dlogits[m]) {
                            axpy(dl.row_mut(i), w, dfused.row(i));
                        }
                    }
                }
            }
            FusionMode::Max => {
                for i in 0..b {
                    for j in 0..c {
                        let m = trace.argmax[i * c + j];
                        if let Some(Some(dl)) = dlogits.get_mut(m) {
                            dl.set(i, j, dfused.get(i, j));
                        }
                    }
                }
            }
            FusionMode::Concat => {
                let zc = trace.fused_input.as_ref().expect("concat input");
                let dzc = self.concat_head.as_mut().expect("concat head").backward(zc, &dfused)?;
                for (slot, dzm) in dz.iter_mut().flatten().enumerate() {
                    for i in 0..b {
                        axpy(dzm.row_mut(i), T::one(), &dzc.row(i)[slot * d..(slot + 1) * d]);
                    }
                }
            }
            FusionMode::Attention => {
                let ctx = trace.fused_input.as_ref().expect("attention context");
                let alpha = trace.fusion_weights.as_ref().expect("attention weights");
                let dctx = self.attn_head.as_mut().expect("attention head").backward(ctx, &dfused)?;
                let scale = T::one() / T::lit(d as f64).sqrt();
                let mut dalpha = Tensor2::zeros(b, m_count);
                for i in 0..b {
                    for m in 0..m_count {
                        if let (true, Some(zm), Some(dzm)) = (avail.get(i, m), &z[m], &mut dz[m]) {
                            dalpha.set(i, m, dot(dctx.row(i), zm.row(i)));
                            axpy(dzm.row_mut(i), alpha.get(i, m), dctx.row(i));
                        }
                    }
                }
                let dscores = softmax_backward(alpha, &dalpha);
                let q = self.attn_query.as_mut().expect("attention query");
                for i in 0..b {
                    for m in 0..m_count {
                        let g = dscores.get(i, m) * scale;
                        if g == T::zero() {
                            continue;
                        }
                        if let (Some(zm), Some(dzm)) = (&z[m], &mut dz[m]) {
                            axpy(q.grad.row_mut(0), g, zm.row(i));
                            axpy(dzm.row_mut(i), g, q.value.row(0));
                        }
                    }
                }
            }
        }
        for (m, blk) in self.modalities.iter_mut().enumerate() {
            if let (Some(head), Some(zm), Some(dl), Some(dzm)) = (blk.head.as_mut(), &z[m], &dlogits[m], &mut dz[m]) {
                dzm.add_assign(&head.backward(zm, dl)?)?;
            }
        }
        if let Some(extra) = extra_dz {
            for (dzm, e) in dz.iter_mut().zip(extra) {
                if let (Some(dzm), Some(e)) = (dzm.as_mut(), e) {
                    dzm.add_assign(e)?;
                }
            }
        }
        self.intra_backward(&trace.intra, &dz)
    }

    /// Projects teacher embeddings of available rows (`available` is the
    /// effective `B × M` availability from a forward trace).
    pub fn project_teacher(
        &self,
        batch: &Batch<T>,
        available: &BitMatrix,
    ) -> Result<Vec<Option<TeacherProjection<T>>>> {
        let mut out = Vec::with_capacity(self.modalities.len());
        for (m, blk) in self.modalities.iter().enumerate() {
            let Some(proj) = &blk.teacher_proj else {
                out.push(None);
                continue;
            };
            let Some(t) = batch.teachers.get(m).and_then(Option::as_ref) else {
                return Err(MedmixError::Config(format!("distillation needs teacher embeddings for modality {m}")));
            };
            let rows: Vec<usize> = (0..batch.len()).filter(|&i| available.get(i, m)).collect();
            let input = t.gather_rows(&rows);
            let projected = proj.forward(&input)?;
            out.push(Some(TeacherProjection { rows, input, projected }));
        }
        Ok(out)
    }

    /// Forward, loss, and backward for one batch; parameter gradients are
    /// accumulated (call `zero_grad` first).
    pub fn forward_backward(
        &mut self,
        batch: &Batch<T>,
        loss: &LossConfig,
        epoch: usize,
        drop_key: Option<DropoutKey>,
    ) -> Result<(LossBreakdown, ForwardTrace<T>)> {
        let trace = self.forward(batch, drop_key)?;
        let include: Vec<bool> = trace.empty.iter().map(|&e| !e).collect();
        if !self.variant.distillation_enabled {
            let (breakdown, grads) =
                total_loss(&trace.fused_logits, &batch.labels, self.task_kind(), &include, None, loss, epoch)?;
            self.backward(&trace, &grads.logits, None)?;
            return Ok((breakdown, trace));
        }
        // distillation aligns the evaluation-mode representation
        let separate = drop_key.is_some() && self.config.dropout > 0.0;
        let eval_intra = if separate { Some(self.intra_forward(batch, None)?) } else { None };
        let student_z = &eval_intra.as_ref().unwrap_or(&trace.intra).z;
        let teacher = self.project_teacher(batch, &trace.available)?;
        let teacher_full = scatter_teachers(&teacher, batch.len());
        let inputs = distill_inputs(student_z, &teacher_full, &trace.available);
        let (breakdown, grads) =
            total_loss(&trace.fused_logits, &batch.labels, self.task_kind(), &include, Some(&inputs), loss, epoch)?;
        if let Some(eval_intra) = &eval_intra {
            self.backward(&trace, &grads.logits, None)?;
            self.intra_backward(eval_intra, &grads.student)?;
        } else {
            self.backward(&trace, &grads.logits, Some(&grads.student))?;
        }
        for (m, (tp, dt)) in teacher.iter().zip(&grads.teacher).enumerate() {
            if let (Some(tp), Some(dt)) = (tp, dt) {
                let rows = dt.gather_rows(&tp.rows);
                let proj = self.modalities[m].teacher_proj.as_mut().expect("teacher head");
                proj.backward_params(&tp.input, &rows)?;
            }
        }
        Ok((breakdown, trace))
    }

    /// Evaluation-mode loss of one batch; gradients are left untouched.
    /// Distillation terms count only when `with_distill` is set.
    pub fn eval_loss(
        &self,
        batch: &Batch<T>,
        loss: &LossConfig,
        epoch: usize,
        with_distill: bool,
    ) -> Result<(LossBreakdown, ForwardTrace<T>)> {
        let trace = self.forward(batch, None)?;
        let include: Vec<bool> = trace.empty.iter().map(|&e| !e).collect();
        let kind = self.task_kind();
        if !(with_distill && self.variant.distillation_enabled) {
            let (breakdown, _) = total_loss(&trace.fused_logits, &batch.labels, kind, &include, None, loss, epoch)?;
            return Ok((breakdown, trace));
        }
        let teacher = self.project_teacher(batch, &trace.available)?;
        let teacher_full = scatter_teachers(&teacher, batch.len());
        let inputs = distill_inputs(&trace.intra.z, &teacher_full, &trace.available);
        let (breakdown, _) =
            total_loss(&trace.fused_logits, &batch.labels, kind, &include, Some(&inputs), loss, epoch)?;
        Ok((breakdown, trace))
    }

    /// Class probabilities from fused logits: sigmoid or row softmax.
    pub fn probabilities(&self, logits: &Tensor2<T>) -> Tensor2<T> {
        match self.task_kind() {
            crate::embedstore::TaskKind::MultiLabel => logits.map(|v| T::one() / (T::one() + (-v).exp())),
            crate::embedstore::TaskKind::MultiClass => crate::diffcore::softmax_rows(logits),
        }
    }
}
