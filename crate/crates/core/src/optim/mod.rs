//! AdamW with two learning-rate groups, global-norm clipping, per-epoch
//! linear warmup, early stopping, and the training loop.

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionSpec, Phase};
use crate::diffcore::{ParamGroup, ParamTensor, Real, Tensor2};
use crate::error::{MedmixError, Result};
use crate::fusion::{ModelConfig, VariantSpec};
use crate::losses::LossConfig;

mod train;

pub use train::{train, EpochRecord, StopReason, TrainLog, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub router_lr_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    /// Epochs over which the distillation weight ramps up.
    #[serde(alias = "t_d")]
    pub distill_ramp_epochs: usize,
    pub lambda_max: f64,
    pub lambda_rkd: f64,
    pub seed: u64,
    pub variant: VariantSpec,
    pub model: ModelConfig,
    pub train_corruption: Option<CorruptionSpec>,
    /// Early stopping watches task loss alone unless this is set.
    pub monitor_distill_in_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            router_lr_factor: 0.3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            warmup_epochs: 50,
            max_epochs: 200,
            early_stop_patience: 20,
            batch_size: 256,
            distill_ramp_epochs: 30,
            lambda_max: 0.3,
            lambda_rkd: 0.05,
            seed: 0,
            variant: VariantSpec::default(),
            model: ModelConfig::default(),
            train_corruption: None,
            monitor_distill_in_val: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(MedmixError::validation(field, detail));
        let rates = [
            ("base_lr", self.base_lr),
            ("router_lr_factor", self.router_lr_factor),
            ("weight_decay", self.weight_decay),
            ("lambda_max", self.lambda_max),
            ("lambda_rkd", self.lambda_rkd),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("{v} must be finite and >= 0"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, format!("{v} is outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.warmup_epochs == 0 {
            return bad("warmup_epochs", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout", format!("{} is outside [0, 1)", self.model.dropout));
        }
        if let Some(spec) = &self.train_corruption {
            if spec.phase != Phase::Train {
                return bad("train_corruption", "phase must be train".into());
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda_max: self.lambda_max, ramp_epochs: self.distill_ramp_epochs, lambda_rkd: self.lambda_rkd }
    }
}

/// Learning rate of `group` in `epoch` (0-based): linear warmup to the base
/// rate, scaled down for the router group.
pub fn lr_at(epoch: usize, config: &TrainConfig, group: ParamGroup) -> f64 {
    let warm = ((epoch + 1) as f64 / config.warmup_epochs as f64).min(1.0);
    let factor = match group {
        ParamGroup::Router => config.router_lr_factor,
        ParamGroup::Other => 1.0,
    };
    warm * config.base_lr * factor
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLr {
    pub other: f64,
    pub router: f64,
}

impl GroupLr {
    pub fn at(epoch: usize, config: &TrainConfig) -> Self {
        Self { other: lr_at(epoch, config, ParamGroup::Other), router: lr_at(epoch, config, ParamGroup::Router) }
    }

    fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Router => self.router,
            ParamGroup::Other => self.other,
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(params: &mut [&mut ParamTensor<T>], max_norm: f64) -> f64 {
    let norm = params.iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = T::lit(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay. Moment buffers are created on the
/// first step and bound to the parameter order seen then.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor2<T>>,
    second: Vec<Tensor2<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut ParamTensor<T>], lr: GroupLr) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor2::zeros(p.shape().0, p.shape().1)).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(MedmixError::Shape {
                op: "adamw_step",
                detail: "optimizer state does not match params".into(),
            });
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(MedmixError::NonFinite(format!("gradient of a {:?} tensor {:?}", p.group(), p.shape())));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let lr = lr.of(p.group());
            let decay = 1.0 - lr * self.weight_decay;
            let ParamTensor { value, grad, .. } = &mut **p;
            for (((w, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let g = g.as_f64();
                let m_new = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * g * g;
                *mi = T::lit(m_new);
                *vi = T::lit(v_new);
                let update = (m_new / bc1) / ((v_new / bc2).sqrt() + self.eps);
                *w = T::lit(w.as_f64() * decay - lr * update);
            }
        }
        Ok(())
    }
}

/// Tracks the best validation loss; only a strict improvement moves it.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    /// Records `loss` for `epoch`; true when it is a new minimum.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, best)) if !(loss < best) => false,
            _ => {
                self.best = Some((epoch, loss));
                true
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// True once `patience` epochs have passed without a new minimum.
    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(b, _)| epoch - b >= self.patience)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param(values: &[f64], grads: &[f64], group: ParamGroup) -> ParamTensor<f64> {
        let mut p = ParamTensor::new(Tensor2::from_vec(1, values.len(), values.to_vec()).unwrap(), group);
        p.grad = Tensor2::from_vec(1, grads.len(), grads.to_vec()).unwrap();
        p
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.base_lr, c.router_lr_factor, c.weight_decay), (1e-5, 0.3, 1e-2));
        assert_eq!((c.beta1, c.beta2, c.adam_eps, c.clip_norm), (0.9, 0.999, 1e-8, 1.0));
        assert_eq!((c.warmup_epochs, c.max_epochs, c.early_stop_patience, c.batch_size), (50, 200, 20, 256));
        assert_eq!((c.distill_ramp_epochs, c.lambda_max, c.lambda_rkd), (30, 0.3, 0.05));
        c.validate().unwrap();
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { weight_decay: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { train_corruption: Some(CorruptionSpec::multi_random(Phase::Test, 0.1, 0)), ..c }
            .validate()
            .is_err());
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig::default();
        assert!((lr_at(0, &c, ParamGroup::Other) - 0.02 * c.base_lr).abs() < 1e-20);
        assert_eq!(lr_at(49, &c, ParamGroup::Other), c.base_lr);
        assert_eq!(lr_at(120, &c, ParamGroup::Other), c.base_lr);
        assert!((lr_at(60, &c, ParamGroup::Router) - 0.3 * c.base_lr).abs() < 1e-20);
        let lrs: Vec<f64> = (0..80).map(|e| lr_at(e, &c, ParamGroup::Other)).collect();
        assert!(lrs.windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[49..].iter().all(|&v| v == c.base_lr));
    }

    #[test]
    fn clipping() {
        let mut p = param(&[0.0, 0.0], &[3.0, 4.0], ParamGroup::Other);
        assert_eq!(clip_global_norm(&mut [&mut p], 1.0), 5.0);
        assert!((p.grad.get(0, 0) - 0.6).abs() < 1e-12 && (p.grad.get(0, 1) - 0.8).abs() < 1e-12);

        let mut q = param(&[0.0], &[0.3], ParamGroup::Other);
        let mut r = param(&[0.0], &[0.4], ParamGroup::Router);
        clip_global_norm(&mut [&mut q, &mut r], 1.0);
        assert_eq!((q.grad.get(0, 0), r.grad.get(0, 0)), (0.3, 0.4));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let g: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut a = param(&[0.0; 3], &g[..3], ParamGroup::Other);
            let mut b = param(&[0.0; 4], &g[3..], ParamGroup::Router);
            let max = rng.random_range(0.1..3.0);
            let pre = clip_global_norm(&mut [&mut a, &mut b], max);
            let post = (a.grad.sum_sq() + b.grad.sum_sq()).sqrt();
            assert!((post - pre.min(max)).abs() < 1e-6);
        }
    }

    /// Scalar AdamW written out longhand.
    struct Reference {
        m: f64,
        v: f64,
        t: i32,
    }

    impl Reference {
        fn step(&mut self, theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let m_hat = self.m / (1.0 - 0.9f64.powi(self.t));
            let v_hat = self.v / (1.0 - 0.999f64.powi(self.t));
            theta - lr * wd * theta - lr * m_hat / (v_hat.sqrt() + 1e-8)
        }
    }

    #[test]
    fn adamw_matches_reference() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::<f64>::new(&cfg);
        let mut p = param(&[1.0], &[1.0], ParamGroup::Other);
        let lr = GroupLr { other: 0.1, router: 0.03 };
        opt.step(&mut [&mut p], lr).unwrap();
        let expected = Reference { m: 0.0, v: 0.0, t: 0 }.step(1.0, 1.0, 0.1, 0.0);
        assert!((p.value.get(0, 0) - expected).abs() < 1e-10);
        assert!((expected - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);

        // several steps on θ²/2 with decay, in both groups
        let cfg = TrainConfig::default();
        let mut opt = AdamW::<f64>::new(&cfg);
        let mut a = param(&[1.0, -2.0], &[0.0, 0.0], ParamGroup::Other);
        let mut b = param(&[0.5], &[0.0], ParamGroup::Router);
        let mut refs: Vec<(Reference, f64, f64)> = vec![
            (Reference { m: 0.0, v: 0.0, t: 0 }, 1.0, 0.1),
            (Reference { m: 0.0, v: 0.0, t: 0 }, -2.0, 0.1),
            (Reference { m: 0.0, v: 0.0, t: 0 }, 0.5, 0.03),
        ];
        for _ in 0..25 {
            a.grad = a.value.clone();
            b.grad = b.value.clone();
            opt.step(&mut [&mut a, &mut b], lr).unwrap();
            for (r, theta, lr) in refs.iter_mut() {
                *theta = r.step(*theta, *theta, *lr, 1e-2);
            }
        }
        let got = [a.value.get(0, 0), a.value.get(0, 1), b.value.get(0, 0)];
        for (g, (_, want, _)) in got.iter().zip(&refs) {
            assert!((g - want).abs() < 1e-10, "{g} vs {want}");
        }
    }

    #[test]
    fn adamw_trivial_cases() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = param(&[0.7, -1.5], &[0.0, 0.0], ParamGroup::Other);
        AdamW::new(&cfg).step(&mut [&mut p], GroupLr { other: 0.1, router: 0.1 }).unwrap();
        assert_eq!(p.value.data(), &[0.7, -1.5]);

        let cfg = TrainConfig::default();
        let mut p = param(&[2.0], &[0.0], ParamGroup::Other);
        AdamW::new(&cfg).step(&mut [&mut p], GroupLr { other: 1e-5, router: 3e-6 }).unwrap();
        assert!((p.value.get(0, 0) - 2.0 * (1.0 - 1e-7)).abs() < 1e-15);

        let mut bad = param(&[1.0], &[f64::NAN], ParamGroup::Other);
        assert!(matches!(
            AdamW::new(&cfg).step(&mut [&mut bad], GroupLr { other: 0.1, router: 0.1 }),
            Err(MedmixError::NonFinite(_))
        ));
    }

    #[test]
    fn early_stopping_rules() {
        let mut s = EarlyStopper::new(20);
        let mut last = 0;
        for e in 0..200 {
            assert!(s.observe(e, 10.0 - e as f64 * 0.01));
            last = e;
            if s.should_stop(e) {
                break;
            }
        }
        assert_eq!((last, s.best().unwrap().0), (199, 199));

        let mut s = EarlyStopper::new(20);
        let losses = [5.0, 4.0, 3.0, 1.0];
        let mut stopped = None;
        for e in 0..200 {
            s.observe(e, if e < 4 { losses[e] } else { 2.0 });
            if s.should_stop(e) {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(stopped, Some(23));
        assert_eq!(s.best().unwrap().0, 3);

        // ties keep the earlier epoch
        let mut s = EarlyStopper::new(3);
        s.observe(0, 1.0);
        assert!(!s.observe(1, 1.0));
        assert_eq!(s.best().unwrap().0, 0);
    }

    /// Full-batch logistic regression on separable data.
    #[test]
    fn convex_toy_loss_decreases() {
        let mut decreasing = 0;
        let mut total = 0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 5;
            let w_true: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xs: Vec<Vec<f64>> = (0..200).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<f64> =
                xs.iter().map(|x| f64::from(x.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>() > 0.0)).collect();
            let cfg = TrainConfig { base_lr: 0.05, warmup_epochs: 5, weight_decay: 0.0, ..Default::default() };
            let mut opt = AdamW::<f64>::new(&cfg);
            let mut w = ParamTensor::zeros(1, dim, ParamGroup::Other);
            let mut losses = Vec::new();
            for epoch in 0..100 {
                let mut loss = 0.0;
                w.zero_grad();
                for (x, &y) in xs.iter().zip(&ys) {
                    let z: f64 = x.iter().zip(w.value.data()).map(|(a, b)| a * b).sum();
                    let p = 1.0 / (1.0 + (-z).exp());
                    loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) / xs.len() as f64;
                    for (g, xi) in w.grad.data_mut().iter_mut().zip(x) {
                        *g += (p - y) * xi / xs.len() as f64;
                    }
                }
                losses.push(loss);
                clip_global_norm(&mut [&mut w], cfg.clip_norm);
                opt.step(&mut [&mut w], GroupLr::at(epoch, &cfg)).unwrap();
            }
            for pair in losses[cfg.warmup_epochs..].windows(2) {
                total += 1;
                decreasing += usize::from(pair[1] < pair[0]);
            }
        }
        assert!(decreasing as f64 >= 0.95 * total as f64, "{decreasing}/{total}");
    }
}
