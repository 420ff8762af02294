use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Dropout, ModelInput, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore};
use crate::tensor::Tensor;

/// One supervised example: model input plus the target token per level.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: ModelInput,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

/// AdamW with decoupled weight decay on parameters flagged for decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
            .collect();
        AdamW { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Applies one update. Missing gradients count as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if self.m.len() != store.len() || grads.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer holds {} slots, store has {} tensors, {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        let c = self.config;
        let norm_sq: f64 = grads.iter().flatten().map(Tensor::sum_sq).sum();
        let norm = libm::sqrt(norm_sq);
        if !norm.is_finite() {
            let bad: Vec<String> = store
                .entries()
                .iter()
                .zip(grads)
                .filter(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
                .map(|(e, _)| e.name.clone())
                .collect();
            return Err(Error::Divergence(format!(
                "non-finite gradient at step {}; tensors: {}",
                self.step + 1,
                bad.join(", ")
            )));
        }
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = if entry.decay { c.weight_decay } else { 0.0 };
            for (((p, &gr), m), v) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gr = gr * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gr;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gr * gr;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.lr * (mh / (libm::sqrt(vh) + c.eps) + decay * *p);
            }
        }
        Ok(())
    }
}

/// Seed for the dropout stream of example `i` at optimizer step `step`.
fn dropout_seed(seed: u64, step: u64, i: usize) -> u64 {
    let mut x = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl ModelParams {
    /// Mean summed-CE over `batch` and its gradients, without updating.
    pub fn batch_gradients(&self, batch: &[TrainExample], seed: u64, step: u64, train: bool) -> Result<(f64, Vec<Option<Tensor>>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        let mut loss = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let mut drop = if train {
                Dropout::train(self.config.dropout, dropout_seed(seed, step, i))
            } else {
                Dropout::off()
            };
            let mut g = Graph::new(&self.store);
            let l = self.example_loss(&mut g, ex, &mut drop)?;
            let lv = g.value(l).data()[0];
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("loss {lv} on example {i} at step {}", step + 1)));
            }
            loss += lv * scale;
            for (slot, grad) in total.iter_mut().zip(g.backward(l).into_params()) {
                if let Some(mut grad) = grad {
                    grad.scale_assign(scale);
                    match slot {
                        Some(acc) => acc.add_assign(&grad),
                        None => *slot = Some(grad),
                    }
                }
            }
        }
        Ok((loss, total))
    }

    /// One optimizer step on `batch`; returns the mean training loss.
    pub fn train_step(&mut self, opt: &mut AdamW, batch: &[TrainExample], seed: u64) -> Result<f64> {
        let (loss, grads) = self.batch_gradients(batch, seed, opt.step, true)?;
        opt.update(&mut self.store, &grads)?;
        Ok(loss)
    }

    /// Mean summed-CE with dropout off.
    pub fn eval_loss(&self, examples: &[TrainExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Input("no examples".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let mut g = Graph::new(&self.store);
            let l = self.example_loss(&mut g, ex, &mut Dropout::off())?;
            total += g.value(l).data()[0];
        }
        Ok(total / examples.len() as f64)
    }
}
