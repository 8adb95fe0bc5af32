//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentKind, StereoSample};
use crate::error::{Error, Result};
use crate::model::GoatModel;
use crate::occlusion_gt::{lr_consistency, DEFAULT_THRESHOLD};
use crate::supervision::{occlusion_bce, sequence_loss, total_loss, Adam, AdamConfig, LossConfig};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Sampling and augmentation seed.
    #[serde(skip)]
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Each listed augmentation is applied to a drawn sample with
    /// probability one half.
    pub augment: Vec<AugmentKind>,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 100,
            augment: Vec::new(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub disp_loss: f64,
    pub occ_loss: f64,
    pub grad_norm: f64,
}

/// Terms of the training objective for one sample.
pub struct Objective<T: Element> {
    pub total: Tensor<T>,
    pub disp: f64,
    pub occ: f64,
}

/// Total loss of `model` on one sample; occlusion ground truth is derived by
/// the left-right check when the sample lacks it.
pub fn objective<T: Element>(
    model: &GoatModel,
    params: &crate::nn::Params<T>,
    sample: &StereoSample,
    cfg: &LossConfig,
) -> Result<Objective<T>> {
    let gt = sample
        .disp_left
        .as_ref()
        .ok_or(Error::MissingGroundTruth("left disparity"))?;
    let occ_gt = match (&sample.occlusion, &sample.disp_right) {
        (Some(m), _) => m.clone(),
        (None, Some(dr)) => lr_consistency(gt, dr, DEFAULT_THRESHOLD)?,
        (None, None) => return Err(Error::MissingGroundTruth("occlusion")),
    };
    let out = model.forward(params, &sample.left.to_tensor(), &sample.right.to_tensor())?;
    let l_disp = sequence_loss(&out.d_seq, &out.d_final, &gt.to_tensor(), &sample.valid.to_tensor(), cfg.gamma)?;
    let l_occ = occlusion_bce(&[out.occlusion], &occ_gt.to_tensor())?;
    let total = total_loss(&l_disp, &l_occ, cfg)?;
    if !total.all_finite() {
        return Err(Error::NonFinite(format!(
            "loss (disparity {}, occlusion {})",
            l_disp.item().as_f64(),
            l_occ.item().as_f64()
        )));
    }
    Ok(Objective {
        disp: l_disp.item().as_f64(),
        occ: l_occ.item().as_f64(),
        total,
    })
}

/// Loss terms and parameter gradients for one sample.
pub fn sample_gradients(model: &GoatModel, sample: &StereoSample, cfg: &LossConfig) -> Result<(Objective<f32>, Vec<Vec<f32>>)> {
    let tape = Tape::new();
    let params = model.params.bind(Some(&tape));
    let obj = objective(model, &params, sample, cfg)?;
    let grads = tape.backward(&obj.total)?;
    let flat = params.collect_grads(&grads);
    Ok((obj, flat))
}

pub struct Trainer {
    pub model: GoatModel,
    pub config: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: GoatModel, config: TrainConfig) -> Result<Self> {
        config.loss.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let optimizer = Adam::new(config.optimizer.clone(), &model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            optimizer,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.optimizer.steps_taken()
    }

    /// Next sample index; the data is reshuffled every epoch.
    fn next_index(&mut self, n: usize) -> usize {
        if self.cursor >= self.order.len() || self.order.len() != n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn step(&mut self, data: &[StereoSample]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let i = self.next_index(data.len());
            let mut s = data[i].clone();
            for &kind in &self.config.augment {
                if self.rng.gen_bool(0.5) {
                    s = augment(&s, kind, self.rng.gen())?;
                }
            }
            batch.push(s);
        }
        let model = &self.model;
        let loss_cfg = &self.config.loss;
        let results: Vec<(f64, f64, f64, Vec<Vec<f32>>)> = batch
            .par_iter()
            .map(|s| {
                let (obj, g) = sample_gradients(model, s, loss_cfg)?;
                Ok((obj.total.item() as f64, obj.disp, obj.occ, g))
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f32;
        let mut grads = results[0].3.clone();
        for r in &results[1..] {
            for (acc, g) in grads.iter_mut().zip(&r.3) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        for g in grads.iter_mut().flatten() {
            *g /= n;
        }
        let grad_norm = self.optimizer.step(&mut self.model.params, &grads)?;
        let mean = |f: fn(&(f64, f64, f64, Vec<Vec<f32>>)) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
        Ok(StepStats {
            step: self.optimizer.steps_taken(),
            loss: mean(|r| r.0),
            disp_loss: mean(|r| r.1),
            occ_loss: mean(|r| r.2),
            grad_norm,
        })
    }
}
