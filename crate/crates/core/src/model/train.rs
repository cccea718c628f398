//! Teacher-forced training with Adam and a stepped learning-rate decay.
//!
//! Each optimization step draws `batch_size` (sequence, segment start)
//! pairs uniformly, runs the teacher-forced forward/backward pass on
//! each, and averages gradients in draw order. All randomness (draws,
//! dropout masks) comes from counters seeded by the hyperparameter
//! seed, so a run is a pure function of (dataset, config, hyper).

use super::checkpoint;
use super::{backward_teacher_forced, forward_teacher_forced, ModelConfig, ModelParams};
use crate::error::Error;
use crate::Result;
use crate::features::FeatureMatrix;
use crate::noterep::{FrameGrid, StateRoll};
use crate::scalar::{fr, Scalar};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// multiplicative decay: lr x (1 - lr_decay) every `lr_decay_every`
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// frames per training segment; 0 trains on whole sequences
    pub segment_frames: usize,
    /// divide the loss by frames x pitches instead of summing
    pub mean_reduction: bool,
    pub seed: u64,
    /// write a checkpoint every N steps (0 = never)
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            steps: 1000,
            batch_size: 8,
            lr: 6e-4,
            lr_decay: 0.02,
            lr_decay_every: 10_000,
            segment_frames: 0,
            mean_reduction: true,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::config("lr_decay must lie in [0, 1)"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every must be >= 1"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::config("checkpoint_every set without a directory"));
        }
        Ok(())
    }

    /// Learning rate in effect at a given (0-based) step.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * (1.0 - self.lr_decay).powi((step / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    pub params: ModelParams<T>,
    /// batch-mean loss per step
    pub losses: Vec<f64>,
}

/// Loss curve serialized as a two-column CSV.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

fn accumulate<T: Scalar>(dst: &mut ModelParams<T>, src: &ModelParams<T>) {
    for ((_, d), (_, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        for (dv, sv) in d.iter_mut().zip(s.iter()) {
            *dv += *sv;
        }
    }
}

struct Adam<T: Scalar> {
    m: ModelParams<T>,
    v: ModelParams<T>,
}

impl<T: Scalar> Adam<T> {
    fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Adam {
            m: ModelParams::zeros(config)?,
            v: ModelParams::zeros(config)?,
        })
    }

    /// One update; `t` is the 1-based step index for bias correction.
    fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64, t: usize) {
        let b1: f64 = 0.9;
        let b2: f64 = 0.999;
        let eps = fr::<T>(1e-8);
        let c1 = fr::<T>(1.0 / (1.0 - b1.powi(t as i32)));
        let c2 = fr::<T>(1.0 / (1.0 - b2.powi(t as i32)));
        let b1t = fr::<T>(b1);
        let b2t = fr::<T>(b2);
        let one_m_b1 = fr::<T>(1.0 - b1);
        let one_m_b2 = fr::<T>(1.0 - b2);
        let lr_t = fr::<T>(lr);
        let mut ps = params.tensors_mut();
        let gs = grads.tensors();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for i in 0..ps.len() {
            debug_assert_eq!(ps[i].0, gs[i].0);
            let p = &mut ps[i].1;
            let g = &gs[i].1;
            let m = &mut ms[i].1;
            let v = &mut vs[i].1;
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1t * m[k] + one_m_b1 * gk;
                v[k] = b2t * v[k] + one_m_b2 * gk * gk;
                let m_hat = m[k] * c1;
                let v_hat = v[k] * c2;
                p[k] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Train from a fresh seeded initialization.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    dataset: &[(FeatureMatrix<T>, StateRoll)],
    hyper: &TrainHyper,
) -> Result<TrainReport<T>> {
    let params = ModelParams::init(config, hyper.seed)?;
    train_from(params, dataset, hyper)
}

/// Train from explicit starting parameters (fine-tuning, tests).
pub fn train_from<T: Scalar>(
    mut params: ModelParams<T>,
    dataset: &[(FeatureMatrix<T>, StateRoll)],
    hyper: &TrainHyper,
) -> Result<TrainReport<T>> {
    let config = params.config.clone();
    config.validate()?;
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    for (i, (feats, roll)) in dataset.iter().enumerate() {
        if feats.values.ncols() != config.n_mels {
            return Err(Error::shape(format!(
                "sample {i}: {} mel bins, config wants {}",
                feats.values.ncols(),
                config.n_mels
            )));
        }
        if roll.rep != config.rep {
            return Err(Error::RepMismatch {
                expected: config.rep.name().into(),
                got: roll.rep.name().into(),
            });
        }
        if roll.grid != feats.grid || roll.states.ncols() != config.n_pitches {
            return Err(Error::shape(format!("sample {i}: roll does not match features")));
        }
        if feats.grid.n_frames == 0 {
            return Err(Error::input(format!("sample {i} is empty")));
        }
    }

    let mut adam = Adam::new(&config)?;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(2));
    let mut losses = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let mut grads = ModelParams::<T>::zeros(&config)?;
        let mut batch_loss = 0.0;
        for _ in 0..hyper.batch_size {
            let idx = draw_rng.gen_range(0..dataset.len());
            let (feats, roll) = &dataset[idx];
            let t_total = feats.grid.n_frames;
            let (start, len) = if hyper.segment_frames > 0 && t_total > hyper.segment_frames
            {
                (
                    draw_rng.gen_range(0..=t_total - hyper.segment_frames),
                    hyper.segment_frames,
                )
            } else {
                (0, t_total)
            };
            let seg_feats = feats.values.slice(s![start..start + len, ..]);
            let seg_roll = StateRoll::new(
                FrameGrid {
                    sample_rate: feats.grid.sample_rate,
                    hop: feats.grid.hop,
                    n_frames: len,
                },
                roll.rep,
                roll.states.slice(s![start..start + len, ..]).to_owned(),
            )?;
            let dropout = if config.dropout > 0.0 {
                Some((&mut dropout_rng, config.dropout))
            } else {
                None
            };
            let fwd = forward_teacher_forced(&params, seg_feats, &seg_roll, dropout)?;
            let (l, g) = backward_teacher_forced(&params, &fwd, &seg_roll, hyper.mean_reduction);
            if !l.is_finite() {
                return Err(Error::Diverged {
                    step,
                    message: format!("non-finite loss {l} on sample {idx} (start {start})"),
                });
            }
            batch_loss += l;
            accumulate(&mut grads, &g);
        }
        batch_loss /= hyper.batch_size as f64;
        let inv_b = fr::<T>(1.0 / hyper.batch_size as f64);
        for (_, g) in grads.tensors_mut() {
            for v in g.iter_mut() {
                *v *= inv_b;
            }
        }
        adam.step(&mut params, &grads, hyper.lr_at(step), step + 1);
        losses.push(batch_loss);
        if hyper.checkpoint_every > 0 && (step + 1) % hyper.checkpoint_every == 0 {
            let dir = hyper.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::format(dir.display().to_string(), e.to_string()))?;
            checkpoint::save(&dir.join(format!("step-{:06}.ckpt", step + 1)), &params)?;
        }
    }
    Ok(TrainReport { params, losses })
}
