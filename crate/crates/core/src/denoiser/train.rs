//! Noise-prediction training loop.
//!
//! Plain DDPM objective: draw a timestep and a noise sample per example,
//! noise the clean image, and regress the denoiser output onto the noise
//! with mean-squared error. Per-example timestep and noise streams are
//! derived from `(seed, epoch·len + index)`, so results do not depend on
//! batch composition or on how the batch is parallelized; gradients within a
//! batch are averaged in index order.

use super::model::{forward, DenoiserParams};
use super::schedule::{q_sample_seeded, NoiseSchedule};
use crate::gridmath::Tape;
use crate::rng;
use crate::scenes::DatasetItem;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, lr: 2e-3, batch_size: 16, seed: 0 }
    }
}

/// Adam with fixed (0.9, 0.999) betas.
struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u32,
    lr: f32,
}

impl Adam {
    fn new(n: usize, lr: f32) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32]) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.step += 1;
        let bias1 = 1.0 - B1.powi(self.step as i32);
        let bias2 = 1.0 - B2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            let mhat = self.m[i] / bias1;
            let vhat = self.v[i] / bias2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// One example's contribution: loss value and gradient of the mean-squared
/// noise-prediction error with respect to every parameter.
fn example_grad(
    item: &DatasetItem,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    seed: u64,
    draw_index: u64,
) -> Result<(Vec<f32>, f64)> {
    let t = rng::derive(seed, "t-draw", draw_index).gen_range(1..=schedule.t_max);
    let (noisy, noise) = q_sample_seeded(&item.image.pixels, t, schedule, seed, draw_index)?;

    let size = params.config.image_size;
    let tape = Tape::new();
    let bound = params.bind(&tape, true)?;
    let z = tape.constant(noisy, &[size, size])?;
    let (eps, _) = forward(&tape, &z, t, &item.tokens, params, &bound)?;
    let target = tape.constant(noise, &[size, size])?;
    let diff = tape.sub(&eps, &target)?;
    let sq = tape.mul(&diff, &diff)?;
    let loss = tape.scale(&tape.sum(&sq)?, 1.0 / (size * size) as f32)?;
    tape.backward(&loss)?;
    Ok((params.collect_grads(&tape, &bound), tape.scalar(&loss) as f64))
}

/// Train in place for `cfg.epochs` epochs, invoking `on_epoch` with the
/// 1-based absolute epoch number and mean loss after each epoch.
/// `start_epoch` offsets the shuffle and noise streams so a resumed run
/// continues the same schedule it would have followed uninterrupted.
pub fn train_with(
    dataset: &[DatasetItem],
    params: &mut DenoiserParams,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(usize, &DenoiserParams, f64),
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    for item in dataset {
        if item.image.size != params.config.image_size {
            return Err(Error::Validation(format!(
                "dataset image size {} does not match model size {}",
                item.image.size, params.config.image_size
            )));
        }
    }
    let schedule = NoiseSchedule::default_linear(params.config.t_max)?;
    let mut adam = Adam::new(params.num_params(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::derive(cfg.seed, "shuffle", epoch as u64));

        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(Vec<f32>, f64)>> = batch
                .par_iter()
                .map(|&idx| {
                    let draw = (epoch * dataset.len() + idx) as u64;
                    example_grad(&dataset[idx], params, &schedule, cfg.seed, draw)
                })
                .collect();

            let mut mean_grad = vec![0.0f32; params.num_params()];
            let inv = 1.0 / batch.len() as f32;
            for result in results {
                let (grad, loss) = result?;
                for (acc, g) in mean_grad.iter_mut().zip(&grad) {
                    *acc += g * inv;
                }
                epoch_loss += loss;
            }
            adam.update(params.data_mut(), &mean_grad);
        }
        epoch_loss /= dataset.len() as f64;
        if !epoch_loss.is_finite() || !params.all_finite() {
            return Err(Error::Training {
                epoch: epoch + 1,
                detail: format!("loss {epoch_loss}"),
            });
        }
        curve.push(epoch_loss);
        on_epoch(epoch + 1, params, epoch_loss);
    }
    Ok(curve)
}

/// Train from scratch and return the updated parameters with the per-epoch
/// loss curve.
pub fn train(
    dataset: &[DatasetItem],
    mut params: DenoiserParams,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, Vec<f64>)> {
    let curve = train_with(dataset, &mut params, cfg, 0, |_, _, _| {})?;
    Ok((params, curve))
}
