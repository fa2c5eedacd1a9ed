//! Stochastic gradient descent over the joint objective, and autoencoder pretraining.

use crate::autodiff::Tape;
use crate::data::{make_batch, Dataset, SplitSpec};
use crate::error::{FraError, Result};
use crate::linalg::mix64;
use crate::model::{assemble_batch, BatchTensors, FraModel};
use crate::objective::LossBreakdown;
use crate::params::ParamStore;
use crate::pose::{stack_images, AutoencoderWeights};
use crate::raster::BinaryLandmarkImage;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Rescales the global gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: u64,
    pub val_batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.001,
            momentum: 0.0,
            steps: 200,
            batch_size: 32,
            clip_norm: None,
            eval_every: 20,
            val_batch: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FraError::config(format!("optim.lr must be a positive number, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FraError::config(format!("optim.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(FraError::config("optim.batch_size must be ≥ 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(FraError::config(format!("optim.clip_norm must be positive, got {c}")));
            }
        }
        if self.eval_every > 0 && self.val_batch == 0 {
            return Err(FraError::config("optim.val_batch must be ≥ 1 when validation is enabled"));
        }
        Ok(())
    }
}

/// Everything besides the weights needed to continue a run exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub velocity: ParamStore,
    pub history: Vec<LossBreakdown>,
    /// `(step, validation loss)` pairs.
    pub val_history: Vec<(u64, LossBreakdown)>,
}

impl TrainState {
    pub fn new(model: &FraModel) -> Self {
        let mut velocity = ParamStore::new();
        for (n, t) in model.params().iter() {
            velocity.insert(n, Tensor::zeros(t.shape()));
        }
        TrainState {
            step: 0,
            velocity,
            history: Vec::new(),
            val_history: Vec::new(),
        }
    }

    pub fn best_validation(&self) -> Option<(u64, LossBreakdown)> {
        self.val_history
            .iter()
            .copied()
            .min_by(|a, b| a.1.total.total_cmp(&b.1.total).then(a.0.cmp(&b.0)))
    }
}

/// Inputs that stay fixed over a training run.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a SplitSpec,
    pub optim: &'a OptimConfig,
    pub margin: f64,
    pub stamp_radius: usize,
    pub seed: u64,
}

/// Parameters with the lowest validation loss seen during a call to [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub step: u64,
    pub loss: LossBreakdown,
    pub params: ParamStore,
}

fn step_seed(seed: u64, stream: u64, step: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(step.wrapping_mul(0x9e37_79b9_7f4a_7c15))))
}

fn validation_batch(ctx: &TrainContext, image_size: usize) -> Result<Option<BatchTensors>> {
    if ctx.optim.eval_every == 0 || ctx.split.val.is_empty() {
        return Ok(None);
    }
    let val = ctx.dataset.subset(&ctx.split.val)?;
    let b = make_batch(&val, &ctx.split.val, ctx.optim.val_batch, step_seed(ctx.seed, 3, 0))?;
    if b.items.is_empty() {
        return Ok(None);
    }
    Ok(Some(assemble_batch(&val, &b.items, image_size, ctx.stamp_radius)?))
}

fn apply_update(params: &mut ParamStore, grads: &ParamStore, velocity: &mut ParamStore, optim: &OptimConfig) -> Result<()> {
    let scale = match optim.clip_norm {
        Some(c) => {
            let norm = grads
                .iter()
                .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| FraError::load(format!("optimizer state lacks `{name}`")))?;
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = optim.momentum * *vv + scale * gv;
            *pv -= optim.lr * *vv;
        }
    }
    Ok(())
}

/// Advances `model` and `state` until `state.step == until_step`.
///
/// `on_step` sees every training loss; the best validation snapshot of this
/// call is returned when validation ran.
pub fn train(
    model: &mut FraModel,
    state: &mut TrainState,
    ctx: &TrainContext,
    until_step: u64,
    mut on_step: impl FnMut(u64, &LossBreakdown),
) -> Result<Option<BestSnapshot>> {
    ctx.optim.validate()?;
    if ctx.dataset.dim() != model.combiner.config.face_dim {
        return Err(FraError::config(format!(
            "dataset embeddings have length {}, model expects {}",
            ctx.dataset.dim(),
            model.combiner.config.face_dim
        )));
    }
    let image_size = model.autoencoder.config.image_size;
    let val = validation_batch(ctx, image_size)?;
    // Negatives are drawn from training identities only.
    let train_set = ctx.dataset.subset(&ctx.split.train)?;
    let mut best: Option<BestSnapshot> = None;
    let mut params = model.params();
    while state.step < until_step {
        let step = state.step;
        let batch = make_batch(&train_set, &ctx.split.train, ctx.optim.batch_size, step_seed(ctx.seed, 1, step))?;
        if batch.items.is_empty() {
            return Err(FraError::config("training split yields no feasible items"));
        }
        let tensors = assemble_batch(&train_set, &batch.items, image_size, ctx.stamp_radius)?;
        let (loss, grads) = model.loss_and_grads(&tensors, ctx.margin, true, step_seed(ctx.seed, 2, step))?;
        let grads_finite = grads.iter().all(|(_, g)| g.all_finite());
        if !loss.is_finite() || !grads_finite {
            return Err(FraError::NonFinite {
                step,
                breakdown: loss.to_string(),
            });
        }
        apply_update(&mut params, &grads, &mut state.velocity, ctx.optim)?;
        model.set_params(&params)?;
        state.history.push(loss);
        state.step += 1;
        on_step(step, &loss);
        if let Some(v) = &val {
            if state.step % ctx.optim.eval_every == 0 || state.step == until_step {
                let vl = model.evaluate(v, ctx.margin, false, 0)?;
                state.val_history.push((state.step, vl));
                if best.as_ref().is_none_or(|b| vl.total < b.loss.total) {
                    best = Some(BestSnapshot {
                        step: state.step,
                        loss: vl,
                        params: params.clone(),
                    });
                }
            }
        }
    }
    Ok(best)
}

/// Mean of `values[i..i+window]` for every full window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Trains the autoencoder alone on reconstruction BCE, sampling `batch_size`
/// images per step. Returns the per-step BCE.
pub fn pretrain_autoencoder(
    ae: &mut AutoencoderWeights,
    images: &[BinaryLandmarkImage],
    optim: &OptimConfig,
    steps: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    optim.validate()?;
    if images.is_empty() {
        return Err(FraError::config("pretraining needs at least one image"));
    }
    let mut velocity = ParamStore::new();
    for (n, t) in ae.params.iter() {
        velocity.insert(n, Tensor::zeros(t.shape()));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mut picked = Vec::with_capacity(optim.batch_size);
        while picked.len() < optim.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let target = stack_images(&picked)?;
        let mut tape = Tape::new();
        let p = ae.params.bind(&mut tape, true);
        let x = tape.constant(target.clone());
        let z = ae.encode_on_tape(&mut tape, &p, x)?;
        let recon = ae.decode_on_tape(&mut tape, &p, z)?;
        let loss = tape.bce_mean(recon, &target)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(FraError::NonFinite {
                step,
                breakdown: format!("bce={value}"),
            });
        }
        let mut grads = ParamStore::new();
        for (name, v) in p.iter() {
            grads.insert(name, tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))));
        }
        apply_update(&mut ae.params, &grads, &mut velocity, optim)?;
        history.push(value);
    }
    Ok(history)
}
