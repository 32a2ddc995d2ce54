//! Task loss, distillation terms, and their combination.
//!
//! Every function returns the loss together with its gradient with respect to
//! the inputs; nothing here owns parameters.

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    cosine_rows, cosine_rows_backward, pairwise_distances, pairwise_distances_backward, BitMatrix, Real, Tensor2,
};
use crate::embedstore::TaskKind;
use crate::error::{MedmixError, Result};

/// Huber threshold for the relational term.
pub const HUBER_DELTA: f64 = 1.0;
/// Lower clamp for the mean pairwise distance.
pub const DISTANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_max: f64,
    /// Epochs over which the distillation weight ramps up from 0.
    pub ramp_epochs: usize,
    pub lambda_rkd: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_max: 0.3, ramp_epochs: 30, lambda_rkd: 0.05 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub cos_loss: Vec<f64>,
    pub rkd_loss: Vec<f64>,
    pub distill_loss: f64,
    pub lambda_d: f64,
    pub total: f64,
    /// Samples that entered the task loss.
    pub n_effective: usize,
}

/// A loss value with gradients for a student and a teacher tensor.
#[derive(Clone, Debug)]
pub struct DistillTerm<T> {
    pub loss: T,
    pub d_student: Tensor2<T>,
    pub d_teacher: Tensor2<T>,
}

/// Linear ramp `lambda_max · min(1, epoch / ramp)`; constant when `ramp == 0`.
pub fn lambda_schedule(epoch: usize, ramp_epochs: usize, lambda_max: f64) -> f64 {
    if ramp_epochs == 0 {
        return lambda_max;
    }
    lambda_max * (epoch as f64 / ramp_epochs as f64).min(1.0)
}

/// Mean cross-entropy over the rows with `include[i]`; the gradient is zero
/// on excluded rows.
pub fn task_loss<T: Real>(
    logits: &Tensor2<T>,
    labels: &Tensor2<T>,
    kind: TaskKind,
    include: &[bool],
) -> Result<(T, Tensor2<T>)> {
    if logits.shape() != labels.shape() || include.len() != logits.rows() {
        return Err(MedmixError::Shape {
            op: "task_loss",
            detail: format!("logits {:?}, labels {:?}, include {}", logits.shape(), labels.shape(), include.len()),
        });
    }
    let n_eff = include.iter().filter(|&&b| b).count();
    if n_eff == 0 {
        return Err(MedmixError::EmptyBatch);
    }
    let c = logits.cols();
    let mut grad = Tensor2::zeros(logits.rows(), c);
    let mut total = T::zero();
    match kind {
        TaskKind::MultiLabel => {
            let scale = T::one() / T::lit((n_eff * c) as f64);
            for i in (0..logits.rows()).filter(|&i| include[i]) {
                let (x, y) = (logits.row(i), labels.row(i));
                let g = grad.row_mut(i);
                for j in 0..c {
                    let xv = x[j];
                    // max(x, 0) - x y + log(1 + exp(-|x|))
                    total += xv.max(T::zero()) - xv * y[j] + (-xv.abs()).exp().ln_1p();
                    let sig = T::one() / (T::one() + (-xv).exp());
                    g[j] = (sig - y[j]) * scale;
                }
            }
            Ok((total * scale, grad))
        }
        TaskKind::MultiClass => {
            let scale = T::one() / T::lit(n_eff as f64);
            for i in (0..logits.rows()).filter(|&i| include[i]) {
                let (x, y) = (logits.row(i), labels.row(i));
                let max = x.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                let g = grad.row_mut(i);
                for j in 0..c {
                    total += y[j] * (lse - x[j]);
                    g[j] = ((x[j] - lse).exp() - y[j]) * scale;
                }
            }
            Ok((total * scale, grad))
        }
    }
}

fn subset(available: &[bool]) -> Vec<usize> {
    available.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

/// Mean of `1 − cos(student_i, teacher_i)` over available rows.
pub fn cos_distill<T: Real>(student: &Tensor2<T>, teacher: &Tensor2<T>, available: &[bool]) -> Result<DistillTerm<T>> {
    let rows = subset(available);
    let mut term = DistillTerm {
        loss: T::zero(),
        d_student: Tensor2::zeros(student.rows(), student.cols()),
        d_teacher: Tensor2::zeros(teacher.rows(), teacher.cols()),
    };
    if rows.is_empty() {
        return Ok(term);
    }
    let (s, t) = (student.gather_rows(&rows), teacher.gather_rows(&rows));
    let cos = cosine_rows(&s, &t)?;
    let n = T::lit(rows.len() as f64);
    term.loss = cos.iter().map(|&c| T::one() - c).sum::<T>() / n;
    let dcos = vec![-T::one() / n; rows.len()];
    let (ds, dt) = cosine_rows_backward(&s, &t, &dcos);
    term.d_student = Tensor2::scatter_rows(&ds, &rows, student.rows());
    term.d_teacher = Tensor2::scatter_rows(&dt, &rows, teacher.rows());
    Ok(term)
}

fn huber<T: Real>(x: T) -> (T, T) {
    let delta = T::lit(HUBER_DELTA);
    let half = T::lit(0.5);
    if x.abs() <= delta {
        (half * x * x, x)
    } else {
        (delta * (x.abs() - half * delta), delta * x.signum())
    }
}

/// Mean nonzero upper-triangle distance and the nonzero count.
fn mean_distance<T: Real>(dist: &Tensor2<T>) -> (T, usize) {
    let n = dist.rows();
    let mut sum = T::zero();
    let mut count = 0;
    for a in 0..n {
        for b in a + 1..n {
            let d = dist.get(a, b);
            if d > T::zero() {
                sum += d;
                count += 1;
            }
        }
    }
    let mean = if count == 0 { T::zero() } else { sum / T::lit(count as f64) };
    (mean.max(T::lit(DISTANCE_FLOOR)), count)
}

/// Upstream gradient for a distance matrix given `d loss / d psi` on the
/// upper triangle, where `psi = dist / mu`.
fn distance_grad<T: Real>(dist: &Tensor2<T>, dpsi: &Tensor2<T>, mu: T, count: usize) -> Tensor2<T> {
    let n = dist.rows();
    let mu_clamped = count == 0 || mu <= T::lit(DISTANCE_FLOOR);
    // d mu / d dist_ab = 1/count for nonzero pairs
    let mut through_mu = T::zero();
    if !mu_clamped {
        for a in 0..n {
            for b in a + 1..n {
                through_mu += dpsi.get(a, b) * dist.get(a, b);
            }
        }
        through_mu /= mu * mu * T::lit(count as f64);
    }
    let mut ddist = Tensor2::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let mut g = dpsi.get(a, b) / mu;
            if !mu_clamped && dist.get(a, b) > T::zero() {
                g -= through_mu;
            }
            ddist.set(a, b, g);
        }
    }
    ddist
}

/// Distance-wise relational distillation over available rows: Huber loss
/// between mean-normalized pairwise distances, averaged over pairs.
pub fn rkd_distill<T: Real>(student: &Tensor2<T>, teacher: &Tensor2<T>, available: &[bool]) -> Result<DistillTerm<T>> {
    let rows = subset(available);
    let mut term = DistillTerm {
        loss: T::zero(),
        d_student: Tensor2::zeros(student.rows(), student.cols()),
        d_teacher: Tensor2::zeros(teacher.rows(), teacher.cols()),
    };
    let n = rows.len();
    if n < 2 {
        return Ok(term);
    }
    let ds = pairwise_distances(student, &rows);
    let dt = pairwise_distances(teacher, &rows);
    let (mu_s, cnt_s) = mean_distance(&ds);
    let (mu_t, cnt_t) = mean_distance(&dt);
    let pairs = T::lit((n * (n - 1) / 2) as f64);
    let mut dpsi = Tensor2::zeros(n, n);
    let mut total = T::zero();
    for a in 0..n {
        for b in a + 1..n {
            let (h, dh) = huber(ds.get(a, b) / mu_s - dt.get(a, b) / mu_t);
            total += h;
            dpsi.set(a, b, dh / pairs);
        }
    }
    term.loss = total / pairs;
    let dd_s = distance_grad(&ds, &dpsi, mu_s, cnt_s);
    let dpsi_t = dpsi.map(|v| -v);
    let dd_t = distance_grad(&dt, &dpsi_t, mu_t, cnt_t);
    term.d_student = pairwise_distances_backward(student, &rows, &ds, &dd_s);
    term.d_teacher = pairwise_distances_backward(teacher, &rows, &dt, &dd_t);
    Ok(term)
}

/// Gradients of [`total_loss`] with respect to its tensor inputs.
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub logits: Tensor2<T>,
    /// Per modality; `None` when no distillation gradient flows.
    pub student: Vec<Option<Tensor2<T>>>,
    pub teacher: Vec<Option<Tensor2<T>>>,
}

/// Per-modality inputs to the distillation terms.
pub struct DistillInputs<'a, T> {
    /// `B × d` student representation per modality (`None` = not distilled).
    pub student: Vec<Option<&'a Tensor2<T>>>,
    /// `B × d` projected teacher per modality, zero rows where unavailable.
    pub teacher: Vec<Option<&'a Tensor2<T>>>,
    pub available: &'a BitMatrix,
}

/// `task + λ(epoch) · Σ_m (cos_m + λ_rkd · rkd_m)`.
///
/// Distillation gradients are only produced when the current weight is
/// nonzero; the component values are always reported when inputs are given.
pub fn total_loss<T: Real>(
    logits: &Tensor2<T>,
    labels: &Tensor2<T>,
    kind: TaskKind,
    include: &[bool],
    distill: Option<&DistillInputs<'_, T>>,
    config: &LossConfig,
    epoch: usize,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    let (task, d_logits) = task_loss(logits, labels, kind, include)?;
    let mut breakdown = LossBreakdown {
        task_loss: task.as_f64(),
        n_effective: include.iter().filter(|&&b| b).count(),
        ..Default::default()
    };
    let mut grads = LossGrads { logits: d_logits, student: Vec::new(), teacher: Vec::new() };
    let Some(inputs) = distill else {
        breakdown.total = breakdown.task_loss;
        return Ok((breakdown, grads));
    };
    let lambda = lambda_schedule(epoch, config.ramp_epochs, config.lambda_max);
    breakdown.lambda_d = lambda;
    let m_count = inputs.student.len();
    let mut distill_sum = 0.0;
    for m in 0..m_count {
        let (Some(s), Some(t)) = (inputs.student[m], inputs.teacher[m]) else {
            breakdown.cos_loss.push(0.0);
            breakdown.rkd_loss.push(0.0);
            grads.student.push(None);
            grads.teacher.push(None);
            continue;
        };
        let avail = inputs.available.column(m);
        let cos = cos_distill(s, t, &avail)?;
        let rkd = rkd_distill(s, t, &avail)?;
        breakdown.cos_loss.push(cos.loss.as_f64());
        breakdown.rkd_loss.push(rkd.loss.as_f64());
        distill_sum += cos.loss.as_f64() + config.lambda_rkd * rkd.loss.as_f64();
        if lambda > 0.0 {
            let (l, lr) = (T::lit(lambda), T::lit(lambda * config.lambda_rkd));
            let combine = |a: &Tensor2<T>, b: &Tensor2<T>| {
                let mut out = a.map(|v| v * l);
                for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
                    *o += v * lr;
                }
                out
            };
            grads.student.push(Some(combine(&cos.d_student, &rkd.d_student)));
            grads.teacher.push(Some(combine(&cos.d_teacher, &rkd.d_teacher)));
        } else {
            grads.student.push(None);
            grads.teacher.push(None);
        }
    }
    breakdown.distill_loss = distill_sum;
    breakdown.total = breakdown.task_loss + lambda * distill_sum;
    if !breakdown.total.is_finite() {
        return Err(MedmixError::NonFinite(format!("loss {breakdown:?}")));
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{grad_check, REL_ERR_TOL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2<f64> {
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lambda_schedule(0, 30, 0.3), 0.0);
        assert!((lambda_schedule(15, 30, 0.3) - 0.15).abs() < 1e-15);
        assert_eq!(lambda_schedule(30, 30, 0.3), 0.3);
        assert_eq!(lambda_schedule(200, 30, 0.3), 0.3);
        assert_eq!(lambda_schedule(0, 0, 0.3), 0.3);
    }

    #[test]
    fn task_loss_examples() {
        let l = Tensor2::from_rows(&[vec![0.0f64]]).unwrap();
        let y = Tensor2::from_rows(&[vec![1.0f64]]).unwrap();
        let (loss, _) = task_loss(&l, &y, TaskKind::MultiLabel, &[true]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let l = Tensor2::from_rows(&[vec![20.0f64, -20.0]]).unwrap();
        let y = Tensor2::from_rows(&[vec![1.0f64, 0.0]]).unwrap();
        let (loss, _) = task_loss(&l, &y, TaskKind::MultiClass, &[true]).unwrap();
        assert!(loss < 1e-8);

        assert!(matches!(task_loss(&l, &y, TaskKind::MultiClass, &[false]), Err(MedmixError::EmptyBatch)));
    }

    #[test]
    fn task_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_tensor(4, 3, &mut rng).map(|v| 3.0 * v);
        let ml =
            Tensor2::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]])
                .unwrap();
        let mc =
            Tensor2::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]])
                .unwrap();
        let include = [true, false, true, true];
        for (kind, y) in [(TaskKind::MultiLabel, &ml), (TaskKind::MultiClass, &mc)] {
            let (_, g) = task_loss(&logits, y, kind, &include).unwrap();
            assert!(g.row(1).iter().all(|&v| v == 0.0));
            let err = grad_check(
                |p| task_loss(&Tensor2::from_vec(4, 3, p.to_vec()).unwrap(), y, kind, &include).unwrap().0,
                logits.data(),
                g.data(),
                1e-5,
            )
            .unwrap();
            assert!(err <= REL_ERR_TOL, "{kind:?}: {err}");
        }
    }

    #[test]
    fn cosine_examples() {
        let z = Tensor2::from_rows(&[vec![1.0f64, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert!(cos_distill(&z, &z, &[true, true]).unwrap().loss.abs() < 1e-12);
        let neg = z.map(|v| -v);
        assert!((cos_distill(&z, &neg, &[true, true]).unwrap().loss - 2.0).abs() < 1e-12);
        assert_eq!(cos_distill(&z, &neg, &[false, false]).unwrap().loss, 0.0);
    }

    #[test]
    fn unavailable_rows_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = rand_tensor(5, 3, &mut rng);
        let t = rand_tensor(5, 3, &mut rng);
        let avail = [true, false, true, true, false];
        let mut s2 = s.clone();
        let mut t2 = t.clone();
        for i in [1, 4] {
            s2.row_mut(i).iter_mut().for_each(|v| *v = rng.random_range(-50.0..50.0));
            t2.row_mut(i).iter_mut().for_each(|v| *v = rng.random_range(-50.0..50.0));
        }
        for f in [cos_distill::<f64>, rkd_distill::<f64>] {
            let a = f(&s, &t, &avail).unwrap();
            let b = f(&s2, &t2, &avail).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.d_student, b.d_student);
            assert_eq!(a.d_teacher, b.d_teacher);
            assert!(a.d_student.row(1).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rkd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_tensor(6, 4, &mut rng);
        let all = [true; 6];
        assert_eq!(rkd_distill(&z, &z, &all).unwrap().loss, 0.0);
        let one = [true, false, false, false, false, false];
        assert_eq!(rkd_distill(&z, &z, &one).unwrap().loss, 0.0);
        for _ in 0..20 {
            let c = rng.random_range(0.01..100.0);
            let scaled = z.map(|v| v * c);
            assert!(rkd_distill(&scaled, &z, &all).unwrap().loss <= 1e-6);
        }
    }

    #[test]
    fn distill_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let avail = [true, true, false, true, true];
        for trial in 0..10 {
            let s = rand_tensor(5, 3, &mut rng);
            // larger teacher spread pushes some pairs into the linear Huber arm
            let t = rand_tensor(5, 3, &mut rng).map(|v| v * (1.0 + trial as f64));
            for f in [cos_distill::<f64>, rkd_distill::<f64>] {
                let term = f(&s, &t, &avail).unwrap();
                let mut point = s.data().to_vec();
                point.extend_from_slice(t.data());
                let mut analytic = term.d_student.data().to_vec();
                analytic.extend_from_slice(term.d_teacher.data());
                let err = grad_check(
                    |p| {
                        let a = Tensor2::from_vec(5, 3, p[..15].to_vec()).unwrap();
                        let b = Tensor2::from_vec(5, 3, p[15..].to_vec()).unwrap();
                        f(&a, &b, &avail).unwrap().loss
                    },
                    &point,
                    &analytic,
                    1e-5,
                )
                .unwrap();
                assert!(err <= REL_ERR_TOL, "trial {trial}: {err}");
            }
        }
    }

    fn distill_setup() -> (Tensor2<f64>, Tensor2<f64>, Tensor2<f64>, Tensor2<f64>, BitMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = rand_tensor(4, 2, &mut rng);
        let labels = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = rand_tensor(4, 3, &mut rng);
        let t = rand_tensor(4, 3, &mut rng);
        let avail = BitMatrix::from_rows(&[vec![true], vec![true], vec![false], vec![true]]).unwrap();
        (logits, labels, s, t, avail)
    }

    #[test]
    fn total_recombines_components() {
        let (logits, labels, s, t, avail) = distill_setup();
        let cfg = LossConfig::default();
        let include = [true; 4];
        let inputs = DistillInputs { student: vec![Some(&s)], teacher: vec![Some(&t)], available: &avail };
        let (b0, g0) = total_loss(&logits, &labels, TaskKind::MultiClass, &include, Some(&inputs), &cfg, 0).unwrap();
        assert_eq!(b0.total, b0.task_loss);
        assert!(g0.student[0].is_none());
        assert!(b0.distill_loss > 0.0);

        let (b, _) = total_loss(&logits, &labels, TaskKind::MultiClass, &include, Some(&inputs), &cfg, 40).unwrap();
        let col = avail.column(0);
        let distill = cos_distill(&s, &t, &col).unwrap().loss + 0.05 * rkd_distill(&s, &t, &col).unwrap().loss;
        let task = task_loss(&logits, &labels, TaskKind::MultiClass, &include).unwrap().0;
        assert!((b.total - (task + 0.3 * distill)).abs() < 1e-6);
        assert!((b.total - (b.task_loss + b.lambda_d * b.distill_loss)).abs() < 1e-12);

        let (plain, _) = total_loss(&logits, &labels, TaskKind::MultiClass, &include, None, &cfg, 40).unwrap();
        assert_eq!(plain.total, plain.task_loss);
        assert_eq!(plain.distill_loss, 0.0);
    }

    #[test]
    fn total_gradient_matches_fd() {
        let (logits, labels, s, t, avail) = distill_setup();
        let cfg = LossConfig::default();
        let include = [true, true, false, true];
        let eval = |l: &Tensor2<f64>, a: &Tensor2<f64>, b: &Tensor2<f64>| {
            let inputs = DistillInputs { student: vec![Some(a)], teacher: vec![Some(b)], available: &avail };
            total_loss(l, &labels, TaskKind::MultiClass, &include, Some(&inputs), &cfg, 10).unwrap()
        };
        let (_, g) = eval(&logits, &s, &t);
        let mut point = logits.data().to_vec();
        point.extend_from_slice(s.data());
        point.extend_from_slice(t.data());
        let mut analytic = g.logits.data().to_vec();
        analytic.extend_from_slice(g.student[0].as_ref().unwrap().data());
        analytic.extend_from_slice(g.teacher[0].as_ref().unwrap().data());
        let err = grad_check(
            |p| {
                let l = Tensor2::from_vec(4, 2, p[..8].to_vec()).unwrap();
                let a = Tensor2::from_vec(4, 3, p[8..20].to_vec()).unwrap();
                let b = Tensor2::from_vec(4, 3, p[20..].to_vec()).unwrap();
                eval(&l, &a, &b).0.total
            },
            &point,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err <= REL_ERR_TOL, "{err}");
    }

    proptest! {
        #[test]
        fn bounds_hold(seed in 0u64..1000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rand_tensor(n, 3, &mut rng);
            let t = rand_tensor(n, 3, &mut rng);
            let avail: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let cos = cos_distill(&s, &t, &avail).unwrap().loss;
            prop_assert!((0.0..=2.0 + 1e-12).contains(&cos));
            prop_assert!(rkd_distill(&s, &t, &avail).unwrap().loss >= 0.0);
            let labels = Tensor2::from_vec(n, 3, (0..3 * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
            let (task, _) = task_loss(&s, &labels, TaskKind::MultiLabel, &vec![true; n]).unwrap();
            prop_assert!(task >= 0.0);
        }

        #[test]
        fn schedule_is_monotone_and_clamped(t in 0usize..500, ramp in 0usize..100, max in 0.0f64..2.0) {
            let a = lambda_schedule(t, ramp, max);
            let b = lambda_schedule(t + 1, ramp, max);
            prop_assert!(b >= a);
            prop_assert!(a <= max);
        }
    }
}
