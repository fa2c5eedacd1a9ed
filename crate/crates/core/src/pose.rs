//! Convolutional autoencoder over binary landmark images.
//!
//! The encoder halves the image three times (conv, kernel 4, stride 2, pad 1,
//! ReLU) and maps the flattened feature map to the pose latent with an affine
//! layer. The decoder mirrors it with transposed convolutions and ends in a
//! sigmoid so reconstructions are probabilities for the BCE term.

use crate::autodiff::{bce_value, Tape, Var};
use crate::error::{FraError, Result};
use crate::params::{glorot_uniform, he_uniform, Bound, ParamStore};
use crate::raster::BinaryLandmarkImage;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    pub channels: [usize; 3],
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            image_size: 64,
            latent_dim: 512,
            channels: [8, 16, 32],
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(FraError::config(format!(
                "image_size must be a multiple of 8 and at least 8, got {}",
                self.image_size
            )));
        }
        if self.latent_dim == 0 || self.channels.contains(&0) {
            return Err(FraError::config("latent_dim and channel counts must be positive"));
        }
        Ok(())
    }

    /// Side of the bottleneck feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn bottleneck_len(&self) -> usize {
        self.channels[2] * self.bottleneck_side().pow(2)
    }
}

/// Encoder latent for one landmark image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLatent(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderWeights {
    pub config: AutoencoderConfig,
    pub params: ParamStore,
}

fn layer_shapes(cfg: &AutoencoderConfig) -> Vec<(String, Vec<usize>, usize, usize)> {
    let [c1, c2, c3] = cfg.channels;
    let k = KERNEL;
    let b = cfg.bottleneck_len();
    let d = cfg.latent_dim;
    // (name, shape, fan_in, fan_out)
    vec![
        ("ae.enc.conv1.w".into(), vec![c1, 1, k, k], k * k, c1 * k * k),
        ("ae.enc.conv1.b".into(), vec![c1], 0, 0),
        ("ae.enc.conv2.w".into(), vec![c2, c1, k, k], c1 * k * k, c2 * k * k),
        ("ae.enc.conv2.b".into(), vec![c2], 0, 0),
        ("ae.enc.conv3.w".into(), vec![c3, c2, k, k], c2 * k * k, c3 * k * k),
        ("ae.enc.conv3.b".into(), vec![c3], 0, 0),
        ("ae.enc.fc.w".into(), vec![b, d], b, d),
        ("ae.enc.fc.b".into(), vec![d], 0, 0),
        ("ae.dec.fc.w".into(), vec![d, b], d, b),
        ("ae.dec.fc.b".into(), vec![b], 0, 0),
        ("ae.dec.deconv1.w".into(), vec![c3, c2, k, k], c3 * k * k, c2 * k * k),
        ("ae.dec.deconv1.b".into(), vec![c2], 0, 0),
        ("ae.dec.deconv2.w".into(), vec![c2, c1, k, k], c2 * k * k, c1 * k * k),
        ("ae.dec.deconv2.b".into(), vec![c1], 0, 0),
        ("ae.dec.deconv3.w".into(), vec![c1, 1, k, k], c1 * k * k, k * k),
        ("ae.dec.deconv3.b".into(), vec![1], 0, 0),
    ]
}

impl AutoencoderWeights {
    pub fn init(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in, fan_out) in layer_shapes(&config) {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else if name.contains(".fc.") || name.ends_with("deconv3.w") {
                glorot_uniform(&mut rng, &shape, fan_in, fan_out, 1.0)
            } else {
                he_uniform(&mut rng, &shape, fan_in)
            };
            params.insert(name, t);
        }
        Ok(AutoencoderWeights { config, params })
    }

    pub fn zeros(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, _, _) in layer_shapes(&config) {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(AutoencoderWeights { config, params })
    }

    /// Builds the encoder on `tape` for a batch `images: [N,1,H,W]`; returns `[N, D_p]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var> {
        let s = self.config.image_size;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [1, s, s] {
            return Err(FraError::config(format!(
                "encoder expects [N, 1, {s}, {s}] images, got {shape:?}"
            )));
        }
        let n = shape[0];
        let mut h = images;
        for l in 1..=3 {
            let w = p.var(&format!("ae.enc.conv{l}.w"));
            let b = p.var(&format!("ae.enc.conv{l}.b"));
            h = tape.conv2d(h, w, Some(b), STRIDE, PAD)?;
            h = tape.relu(h);
        }
        let flat = tape.reshape(h, &[n, self.config.bottleneck_len()])?;
        let z = tape.matmul(flat, p.var("ae.enc.fc.w"))?;
        tape.affine(z, None, Some(p.var("ae.enc.fc.b")))
    }

    /// Builds the decoder for latents `[N, D_p]`; returns probabilities `[N,1,H,W]`.
    pub fn decode_on_tape(&self, tape: &mut Tape, p: &Bound, latents: Var) -> Result<Var> {
        let shape = tape.shape(latents).to_vec();
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(FraError::config(format!(
                "decoder expects [N, {}] latents, got {shape:?}",
                self.config.latent_dim
            )));
        }
        let n = shape[0];
        let side = self.config.bottleneck_side();
        let h = tape.matmul(latents, p.var("ae.dec.fc.w"))?;
        let h = tape.affine(h, None, Some(p.var("ae.dec.fc.b")))?;
        let h = tape.relu(h);
        let mut h = tape.reshape(h, &[n, self.config.channels[2], side, side])?;
        for l in 1..=3 {
            let w = p.var(&format!("ae.dec.deconv{l}.w"));
            let b = p.var(&format!("ae.dec.deconv{l}.b"));
            h = tape.conv_transpose2d(h, w, Some(b), STRIDE, PAD, 0)?;
            if l < 3 {
                h = tape.relu(h);
            }
        }
        Ok(tape.sigmoid(h))
    }

    fn check_image(&self, image: &BinaryLandmarkImage) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(FraError::config(format!(
                "image is {}×{}, autoencoder configured for {s}×{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, image: &BinaryLandmarkImage) -> Result<PoseLatent> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[BinaryLandmarkImage]) -> Result<Vec<PoseLatent>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for img in images {
            self.check_image(img)?;
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(stack_images(images)?);
        let z = self.encode_on_tape(&mut tape, &p, x)?;
        Ok(tape
            .value(z)
            .data()
            .chunks(self.config.latent_dim)
            .map(|c| PoseLatent(c.to_vec()))
            .collect())
    }

    /// Reconstruction `[H, W]` with every value in (0, 1).
    pub fn decode(&self, latent: &PoseLatent) -> Result<Tensor> {
        if latent.0.len() != self.config.latent_dim {
            return Err(FraError::config(format!(
                "latent has length {}, expected {}",
                latent.0.len(),
                self.config.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(Tensor::new(vec![1, latent.0.len()], latent.0.clone())?);
        let out = self.decode_on_tape(&mut tape, &p, z)?;
        let s = self.config.image_size;
        tape.value(out).clone().reshaped(&[s, s])
    }

    pub fn reconstruct(&self, image: &BinaryLandmarkImage) -> Result<Tensor> {
        self.decode(&self.encode(image)?)
    }
}

/// Stacks images into `[N, 1, H, W]`.
pub fn stack_images(images: &[BinaryLandmarkImage]) -> Result<Tensor> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(FraError::config("images in a batch must share extents"));
        }
        data.extend(img.cells().iter().map(|&c| f64::from(c)));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Pixel-mean binary cross-entropy with clamping at `1e-7`.
pub fn bce_loss(reconstruction: &Tensor, target: &BinaryLandmarkImage) -> Result<f64> {
    let t = target.to_tensor();
    if reconstruction.numel() != t.numel()
        || reconstruction.shape()[reconstruction.rank() - 2..] != t.shape()[1..]
    {
        return Err(FraError::contract(format!(
            "bce shapes differ: {:?} vs {:?}",
            reconstruction.shape(),
            t.shape()
        )));
    }
    Ok(bce_value(reconstruction.data(), t.data()))
}
