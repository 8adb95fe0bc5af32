//! Training objectives and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    /// Weight of the disparity sequence loss.
    pub lambda1: f64,
    /// Weight of the occlusion loss.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.95,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean of `|gt - pred|` over pixels where `valid` is 1.
pub fn masked_l1<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, valid: &Tensor<T>) -> Result<Tensor<T>> {
    let count: f64 = valid.data().iter().map(|v| v.as_f64()).sum();
    if count <= 0.0 {
        return Err(Error::EmptyRegion("valid ground truth"));
    }
    Ok(pred.sub(gt)?.abs().mul(valid)?.sum().scale(1.0 / count))
}

/// `sum_{t=0}^{T} gamma^(T-t) L1(d_seq[t]) + L1(d_final)` with
/// `T = d_seq.len() - 1`.
pub fn sequence_loss<T: Element>(
    d_seq: &[Tensor<T>],
    d_final: &Tensor<T>,
    gt: &Tensor<T>,
    valid: &Tensor<T>,
    gamma: f64,
) -> Result<Tensor<T>> {
    let n = d_seq.len();
    if n == 0 {
        return Err(Error::Config("sequence loss needs at least one intermediate estimate".into()));
    }
    let mut loss = masked_l1(d_final, gt, valid)?;
    for (t, d) in d_seq.iter().enumerate() {
        let w = gamma.powi((n - 1 - t) as i32);
        loss = loss.add(&masked_l1(d, gt, valid)?.scale(w))?;
    }
    Ok(loss)
}

/// Mean binary cross-entropy of each probability map against `gt`, averaged
/// over the maps. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn occlusion_bce<T: Element>(preds: &[Tensor<T>], gt: &Tensor<T>) -> Result<Tensor<T>> {
    if preds.is_empty() {
        return Err(Error::Config("occlusion loss needs at least one prediction".into()));
    }
    let mut total: Option<Tensor<T>> = None;
    for p in preds {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let ll = gt.mul(&p.ln())?.add(&gt.one_minus().mul(&p.one_minus().ln())?)?;
        let term = ll.mean().neg();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / preds.len() as f64))
}

pub fn total_loss<T: Element>(l_disp: &Tensor<T>, l_occ: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    l_disp.scale(cfg.lambda1).add(&l_occ.scale(cfg.lambda2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap.
    pub clip_norm: Option<f64>,
    /// Multiply the learning rate by `decay_factor` every `decay_every` steps.
    pub decay_every: Option<usize>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            decay_every: None,
            decay_factor: 1.0,
        }
    }
}

/// Adam with bias correction over every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        let c = &self.config;
        match c.decay_every {
            Some(n) if n > 0 => c.lr * c.decay_factor.powi((self.step / n) as i32),
            _ => c.lr,
        }
    }

    /// Applies one update; `grads` follow the store's parameter order.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step (parameter count)",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((_, e), g) in store.iter().zip(grads) {
            if e.data.len() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: e.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        let norm = grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.learning_rate();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, e)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in e.data.iter_mut().enumerate() {
                let g = grads[i][j] as f64 * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full(v: f64) -> Tensor<f64> {
        Tensor::full(&[2, 3], v)
    }

    #[test]
    fn sequence_loss_arithmetic() {
        let gt = full(0.0);
        let ones = full(1.0);
        let seq = vec![ones.clone(), ones.clone(), ones.clone()];
        let l = sequence_loss(&seq, &ones, &gt, &full(1.0), 0.95).unwrap();
        assert!((l.item() - 3.8525).abs() < 1e-12);
        let perfect = sequence_loss(std::slice::from_ref(&gt), &gt, &gt, &full(1.0), 0.95).unwrap();
        assert_eq!(perfect.item(), 0.0);
        assert!(sequence_loss(&seq, &ones, &gt, &full(0.0), 0.95).is_err());
    }

    #[test]
    fn sequence_loss_is_homogeneous_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = Tensor::<f64>::uniform(&[4, 4], 0.0, 5.0, &mut rng);
        let seq: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[4, 4], 0.0, 5.0, &mut rng)).collect();
        let fin = Tensor::uniform(&[4, 4], 0.0, 5.0, &mut rng);
        let valid = Tensor::from_fn(&[4, 4], |i| (i % 3 != 0) as u8 as f64);
        let l = sequence_loss(&seq, &fin, &gt, &valid, 0.9).unwrap().item();
        let double = |t: &Tensor<f64>| gt.add(&t.sub(&gt).unwrap().scale(2.0)).unwrap();
        let seq2: Vec<_> = seq.iter().map(double).collect();
        let l2 = sequence_loss(&seq2, &double(&fin), &gt, &valid, 0.9).unwrap().item();
        assert!((l2 - 2.0 * l).abs() < 1e-12);
        // invalid pixels do not matter
        let noisy = fin.add(&valid.one_minus().scale(100.0)).unwrap();
        let l3 = sequence_loss(&seq, &noisy, &gt, &valid, 0.9).unwrap().item();
        assert!((l3 - l).abs() < 1e-12);
    }

    #[test]
    fn bce_values_and_gradient_sign() {
        let gt = Tensor::<f64>::from_vec(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let half = Tensor::<f64>::full(&[4], 0.5);
        let l = occlusion_bce(&[half.clone(), half.clone()], &gt).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(occlusion_bce(std::slice::from_ref(&gt), &gt).unwrap().item() <= 1e-6);
        let p = Tensor::<f64>::full(&[4], 0.3);
        let ones = Tensor::<f64>::ones(&[4]);
        let f = |p: &Tensor<f64>| occlusion_bce(std::slice::from_ref(p), &ones).unwrap().item();
        let bumped = p.add_scalar(0.01);
        assert!(f(&bumped) < f(&p));
        let err = grad_check(|p| occlusion_bce(std::slice::from_ref(p), &gt), &p, 1e-6).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn total_loss_weights() {
        let (a, b) = (Tensor::<f64>::scalar(2.0), Tensor::<f64>::scalar(0.5));
        assert_eq!(total_loss(&a, &b, &LossConfig::default()).unwrap().item(), 2.5);
        let cfg = LossConfig {
            lambda2: 0.0,
            lambda1: 3.0,
            ..LossConfig::default()
        };
        assert_eq!(total_loss(&a, &b, &cfg).unwrap().item(), 6.0);
    }

    fn one_param(w: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", vec![1], vec![w]);
        s
    }

    #[test]
    fn adam_matches_hand_computation() {
        let mut store = one_param(0.5);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[vec![0.2]]).unwrap();
        let g = 0.2f32 as f64;
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let expect = 0.5 - 4e-4 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
        assert!((store.get("w").unwrap().data[0] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_and_monotone_descent() {
        let mut store = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[vec![0.0]]).unwrap();
        assert_eq!(store.get("w").unwrap().data[0], 1.0);
        let mut prev = 1.0;
        for _ in 0..50 {
            adam.step(&mut store, &[vec![0.3]]).unwrap();
            let w = store.get("w").unwrap().data[0];
            assert!(w < prev);
            prev = w;
        }
        assert!(adam.step(&mut store, &[vec![0.0, 1.0]]).is_err());
        assert!(adam.step(&mut store, &[vec![f32::NAN]]).is_err());
    }

    #[test]
    fn clipping_and_decay() {
        let mut store = one_param(0.0);
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            decay_every: Some(2),
            decay_factor: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        let norm = adam.step(&mut store, &[vec![10.0]]).unwrap();
        assert_eq!(norm, 10.0);
        assert_eq!(adam.learning_rate(), 4e-4);
        adam.step(&mut store, &[vec![1.0]]).unwrap();
        assert_eq!(adam.learning_rate(), 2e-4);
    }
}
