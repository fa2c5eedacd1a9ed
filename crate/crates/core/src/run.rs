//! Whole-run orchestration from a [`RunConfig`].

use crate::config::RunConfig;
use crate::data::{Dataset, SplitSpec};
use crate::error::{FraError, Result, StageExt};
use crate::model::FraModel;
use crate::objective::LossBreakdown;
use crate::train::{pretrain_autoencoder, train, BestSnapshot, OptimConfig, TrainContext, TrainState};

pub struct TrainOutcome {
    pub model: FraModel,
    pub state: TrainState,
    /// Lowest-validation parameters seen by this run.
    pub best: Option<BestSnapshot>,
    /// Per-step BCE of the autoencoder warm-up, empty when it was skipped.
    pub pretrain_history: Vec<f64>,
}

/// Steps per pass over the training identities' samples at the configured batch size.
pub fn steps_per_epoch(dataset: &Dataset, split: &SplitSpec, batch_size: usize) -> u64 {
    let n: usize = split.train.iter().map(|i| dataset.keys_of_identity(i).len()).sum();
    n.div_ceil(batch_size.max(1)).max(1) as u64
}

/// Optional autoencoder warm-up on the training identities' landmark images.
pub fn pretrain(cfg: &RunConfig, dataset: &Dataset, split: &SplitSpec, model: &mut FraModel) -> Result<Vec<f64>> {
    let p = &cfg.pretrain;
    if p.steps == 0 {
        return Ok(Vec::new());
    }
    let size = cfg.model.autoencoder.image_size;
    let images = split
        .train
        .iter()
        .flat_map(|i| dataset.keys_of_identity(i).iter())
        .map(|k| dataset.image(k, size, cfg.model.stamp_radius))
        .collect::<Result<Vec<_>>>()?;
    let optim = OptimConfig {
        lr: p.lr,
        momentum: p.momentum,
        steps: p.steps,
        batch_size: p.batch_size,
        ..OptimConfig::default()
    };
    pretrain_autoencoder(&mut model.autoencoder, &images, &optim, p.steps, cfg.seed ^ 0xae).stage("pretrain")
}

/// Initializes (or resumes) and trains until `cfg.optim.steps`.
pub fn train_from_config(
    cfg: &RunConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    resume: Option<(FraModel, TrainState)>,
    on_step: impl FnMut(u64, &LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.dim() != cfg.model.combiner.face_dim {
        return Err(FraError::config(format!(
            "model.combiner.face_dim: {} does not match dataset embedding length {}",
            cfg.model.combiner.face_dim,
            dataset.dim()
        )));
    }
    let (mut model, mut state, pretrain_history) = match resume {
        Some((m, s)) => (m, s, Vec::new()),
        None => {
            let mut m = FraModel::init(&cfg.model, cfg.seed)?;
            let h = pretrain(cfg, dataset, split, &mut m)?;
            let s = TrainState::new(&m);
            (m, s, h)
        }
    };
    let ctx = TrainContext {
        dataset,
        split,
        optim: &cfg.optim,
        margin: cfg.margin,
        stamp_radius: cfg.model.stamp_radius,
        seed: cfg.seed,
    };
    let best = train(&mut model, &mut state, &ctx, cfg.optim.steps, on_step).stage("train")?;
    Ok(TrainOutcome {
        model,
        state,
        best,
        pretrain_history,
    })
}
