//! The joint model: pose autoencoder plus combiner, trained on one objective.

use crate::autodiff::{Tape, Var};
use crate::combiner::{CombinerConfig, CombinerWeights};
use crate::data::{BatchItem, Dataset, SampleKey};
use crate::error::{FraError, Result};
use crate::gradcheck::{finite_diff_check, CheckOptions, CheckReport, Evaluation};
use crate::objective::{triplet_on_tape, LossBreakdown};
use crate::params::{Bound, ParamStore};
use crate::pose::{stack_images, AutoencoderConfig, AutoencoderWeights, PoseLatent};
use crate::raster::DEFAULT_STAMP_RADIUS;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub autoencoder: AutoencoderConfig,
    pub combiner: CombinerConfig,
    pub stamp_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            autoencoder: AutoencoderConfig::default(),
            combiner: CombinerConfig::default(),
            stamp_radius: DEFAULT_STAMP_RADIUS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.combiner.validate()?;
        if self.autoencoder.latent_dim != self.combiner.pose_dim {
            return Err(FraError::config(format!(
                "model.autoencoder.latent_dim ({}) must equal model.combiner.pose_dim ({})",
                self.autoencoder.latent_dim, self.combiner.pose_dim
            )));
        }
        Ok(())
    }
}

/// Dense inputs for one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensors {
    /// `[B, D_f]` embeddings of the base samples.
    pub base: Tensor,
    /// `[B, 1, H, W]` landmark images of the target poses.
    pub images: Tensor,
    pub positive: Tensor,
    pub neg_pose: Tensor,
    pub neg_identity: Tensor,
    pub neg_emotion: Tensor,
}

fn stack_embeddings(dataset: &Dataset, keys: impl Iterator<Item = SampleKey>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for k in keys {
        data.extend_from_slice(dataset.embedding(&k)?);
        rows += 1;
    }
    Tensor::new(vec![rows, dataset.dim()], data)
}

/// Looks up embeddings and rasterizes target images for `items`.
pub fn assemble_batch(dataset: &Dataset, items: &[BatchItem], image_size: usize, radius: usize) -> Result<BatchTensors> {
    if items.is_empty() {
        return Err(FraError::contract("cannot assemble an empty batch"));
    }
    let images = items
        .iter()
        .map(|it| dataset.image(&it.target, image_size, radius))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchTensors {
        base: stack_embeddings(dataset, items.iter().map(|it| it.base.clone()))?,
        images: stack_images(&images)?,
        positive: stack_embeddings(dataset, items.iter().map(|it| it.target.clone()))?,
        neg_pose: stack_embeddings(dataset, items.iter().map(|it| it.negatives.pose.clone()))?,
        neg_identity: stack_embeddings(dataset, items.iter().map(|it| it.negatives.identity.clone()))?,
        neg_emotion: stack_embeddings(dataset, items.iter().map(|it| it.negatives.emotion.clone()))?,
    })
}

/// Scalar handles of the four loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bce: Var,
    pub triplet_pose: Var,
    pub triplet_identity: Var,
    pub triplet_emotion: Var,
    pub total: Var,
}

impl LossVars {
    pub fn read(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            bce: v(self.bce),
            triplet_pose: v(self.triplet_pose),
            triplet_identity: v(self.triplet_identity),
            triplet_emotion: v(self.triplet_emotion),
            total: v(self.total),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FraModel {
    pub autoencoder: AutoencoderWeights,
    pub combiner: CombinerWeights,
}

/// Parameter handles of both sub-networks on one tape.
pub struct BoundModel {
    pub autoencoder: Bound,
    pub combiner: Bound,
}

impl BoundModel {
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.autoencoder.iter().chain(self.combiner.iter())
    }
}

impl FraModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(FraModel {
            autoencoder: AutoencoderWeights::init(config.autoencoder.clone(), seed)?,
            combiner: CombinerWeights::init(config.combiner.clone(), seed ^ 0x9e37_79b9_7f4a_7c15)?,
        })
    }

    /// Rebuilds a model from a flat tensor table, checking every name and shape.
    pub fn from_params(config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = FraModel::init(config, 0)?;
        let mut own = model.params();
        own.check_layout(params)?;
        for (name, t) in own.iter_mut() {
            *t = params.get(name)?.clone();
        }
        model.set_params(&own)?;
        Ok(model)
    }

    /// All parameters, autoencoder first.
    pub fn params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, t) in self.autoencoder.params.iter().chain(self.combiner.params.iter()) {
            p.insert(n, t.clone());
        }
        p
    }

    pub fn set_params(&mut self, params: &ParamStore) -> Result<()> {
        for (name, t) in self.autoencoder.params.iter_mut().chain(self.combiner.params.iter_mut()) {
            let src = params.get(name)?;
            if src.shape() != t.shape() {
                return Err(FraError::load(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            autoencoder: self.autoencoder.params.bind(tape, trainable),
            combiner: self.combiner.params.bind(tape, trainable),
        }
    }

    /// Builds the full objective on `tape`.
    pub fn loss_on_tape(&self, tape: &mut Tape, p: &BoundModel, batch: &BatchTensors, margin: f64, train: bool) -> Result<LossVars> {
        let images = tape.constant(batch.images.clone());
        let z = self.autoencoder.encode_on_tape(tape, &p.autoencoder, images)?;
        let recon = self.autoencoder.decode_on_tape(tape, &p.autoencoder, z)?;
        let bce = tape.bce_mean(recon, &batch.images)?;
        let base = tape.constant(batch.base.clone());
        let trace = self.combiner.forward_on_tape(tape, &p.combiner, base, z, train)?;
        let positive = tape.constant(batch.positive.clone());
        let mut term = |neg: &Tensor| -> Result<Var> {
            let n = tape.constant(neg.clone());
            triplet_on_tape(tape, trace.output, positive, n, margin)
        };
        let triplet_pose = term(&batch.neg_pose)?;
        let triplet_identity = term(&batch.neg_identity)?;
        let triplet_emotion = term(&batch.neg_emotion)?;
        let mut total = tape.add(bce, triplet_pose)?;
        total = tape.add(total, triplet_identity)?;
        total = tape.add(total, triplet_emotion)?;
        Ok(LossVars {
            bce,
            triplet_pose,
            triplet_identity,
            triplet_emotion,
            total,
        })
    }

    /// Loss without gradients.
    pub fn evaluate(&self, batch: &BatchTensors, margin: f64, train: bool, dropout_seed: u64) -> Result<LossBreakdown> {
        let mut tape = Tape::with_dropout_seed(dropout_seed);
        let p = self.bind(&mut tape, false);
        Ok(self.loss_on_tape(&mut tape, &p, batch, margin, train)?.read(&tape))
    }

    /// Loss and gradient of every parameter, in [`FraModel::params`] order.
    pub fn loss_and_grads(&self, batch: &BatchTensors, margin: f64, train: bool, dropout_seed: u64) -> Result<(LossBreakdown, ParamStore)> {
        let mut tape = Tape::with_dropout_seed(dropout_seed);
        let p = self.bind(&mut tape, true);
        let vars = self.loss_on_tape(&mut tape, &p, batch, margin, train)?;
        tape.backward(vars.total)?;
        let mut grads = ParamStore::new();
        for (name, v) in p.iter() {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            grads.insert(name, g);
        }
        Ok((vars.read(&tape), grads))
    }

    /// Adds `U(−scale, scale)` noise to every bias vector.
    ///
    /// Zero biases put background-pixel ReLU inputs exactly on the kink, where
    /// central differences disagree with any one-sided derivative.
    pub fn jitter_biases(&mut self, scale: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.params();
        for (name, t) in params.iter_mut() {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    *v += rng.random_range(-scale..scale);
                }
            }
        }
        self.set_params(&params)
    }

    /// Central-difference check of the full objective on one batch, in training mode.
    ///
    /// Returns the report and the parameter names its `param` indices refer to.
    pub fn gradcheck(&self, batch: &BatchTensors, margin: f64, opts: &CheckOptions) -> Result<(CheckReport, Vec<String>)> {
        if self.combiner.config.dropout > 0.0 {
            return Err(FraError::config(format!(
                "gradcheck needs a deterministic objective; model.combiner.dropout is {} (must be 0)",
                self.combiner.config.dropout
            )));
        }
        let start = self.params();
        let names: Vec<String> = start.names().map(str::to_string).collect();
        let tensors: Vec<Tensor> = start.iter().map(|(_, t)| t.clone()).collect();
        let mut work = self.clone();
        let f = |ps: &[Tensor], with_grad: bool| -> Result<Evaluation> {
            let mut store = ParamStore::new();
            for (n, t) in names.iter().zip(ps) {
                store.insert(n.as_str(), t.clone());
            }
            work.set_params(&store)?;
            let mut tape = Tape::new();
            let p = work.bind(&mut tape, with_grad);
            let vars = work.loss_on_tape(&mut tape, &p, batch, margin, true)?;
            let value = tape.value(vars.total).item();
            let branch = tape.branch_signature();
            if !with_grad {
                return Ok(Evaluation { value, grads: None, branch });
            }
            tape.backward(vars.total)?;
            let grads = p
                .iter()
                .map(|(_, v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                .collect();
            Ok(Evaluation {
                value,
                grads: Some(grads),
                branch,
            })
        };
        let report = finite_diff_check(f, &tensors, opts)?;
        Ok((report, names))
    }

    pub fn encode_poses(&self, dataset: &Dataset, keys: &[SampleKey], radius: usize) -> Result<Vec<PoseLatent>> {
        let size = self.autoencoder.config.image_size;
        let images = keys
            .iter()
            .map(|k| dataset.image(k, size, radius))
            .collect::<Result<Vec<_>>>()?;
        self.autoencoder.encode_batch(&images)
    }

    /// Eval-mode augmentation of `base` embeddings toward the landmark images of `targets`.
    pub fn augment(&self, dataset: &Dataset, pairs: &[(SampleKey, SampleKey)], radius: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(64) {
            let targets: Vec<SampleKey> = chunk.iter().map(|(_, t)| t.clone()).collect();
            let latents = self.encode_poses(dataset, &targets, radius)?;
            let inputs: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .zip(&latents)
                .map(|((b, _), z)| Ok((dataset.embedding(b)?, z.0.as_slice())))
                .collect::<Result<_>>()?;
            out.extend(self.combiner.forward_batch(&inputs, false, 0)?.into_iter().map(|a| a.0));
        }
        Ok(out)
    }
}
