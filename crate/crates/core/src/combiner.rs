//! Transformer combiner: fuses a face embedding with a pose latent.
//!
//! `[face ‖ pose]` is laid out row-major as an `R×C` matrix, cut into
//! `patch×patch` tokens, projected to the model width and passed through a
//! stack of multi-head self-attention and feed-forward blocks (both with
//! residual connections). The tokens are pooled, mapped to the face-embedding
//! width by a fully connected head, optionally added to the input face
//! embedding, rescaled by a learnable per-feature scale/shift and
//! L2-normalized.

use crate::autodiff::{softmax_rows_data, Tape, Var};
use crate::error::{FraError, Result, StageExt};
use crate::params::{glorot_uniform, uniform, Bound, ParamStore};
use crate::pose::PoseLatent;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A face-identity embedding and the representation learner that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceEmbedding {
    pub vector: Vec<f64>,
    pub source: String,
}

/// Unit-norm output of the combiner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEmbedding(pub Vec<f64>);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Average over tokens.
    #[default]
    Mean,
    /// Concatenate all tokens (keeps per-token information).
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombinerConfig {
    pub face_dim: usize,
    pub pose_dim: usize,
    /// Rows of the fused matrix; `None` picks the most square valid layout.
    pub matrix_rows: Option<usize>,
    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub positional: bool,
    pub pooling: Pooling,
    /// Adds the input face embedding to the head output before normalization,
    /// so directions never seen in training pass through unchanged.
    pub face_skip: bool,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig {
            face_dim: 512,
            pose_dim: 512,
            matrix_rows: None,
            patch: 8,
            model_dim: 256,
            heads: 4,
            layers: 4,
            ff_dim: 256,
            dropout: 0.4,
            positional: true,
            pooling: Pooling::Mean,
            face_skip: true,
        }
    }
}

/// Every `(R, C)` with `R·C = len` and both divisible by `patch`, most square first.
pub fn matrix_options(len: usize, patch: usize) -> Vec<(usize, usize)> {
    if patch == 0 {
        return Vec::new();
    }
    let mut opts: Vec<(usize, usize)> = (1..=len)
        .filter(|r| len % r == 0)
        .map(|r| (r, len / r))
        .filter(|&(r, c)| r % patch == 0 && c % patch == 0)
        .collect();
    opts.sort_by_key(|&(r, c)| (r.abs_diff(c), std::cmp::Reverse(c)));
    opts
}

impl CombinerConfig {
    pub fn fused_len(&self) -> usize {
        self.face_dim + self.pose_dim
    }

    /// Resolved `(R, C)` of the fused matrix.
    pub fn geometry(&self) -> Result<(usize, usize)> {
        let len = self.fused_len();
        let opts = matrix_options(len, self.patch);
        let fmt = |o: &[(usize, usize)]| {
            o.iter().map(|(r, c)| format!("{r}×{c}")).collect::<Vec<_>>().join(", ")
        };
        match self.matrix_rows {
            Some(r) => {
                if r > 0 && len % r == 0 && opts.contains(&(r, len / r)) {
                    Ok((r, len / r))
                } else {
                    Err(FraError::config(format!(
                        "{len} values cannot form a {r}-row matrix of {p}×{p} patches; valid layouts: [{}]",
                        fmt(&opts),
                        p = self.patch
                    )))
                }
            }
            None => opts.first().copied().ok_or_else(|| {
                FraError::config(format!(
                    "face_dim + pose_dim = {len} has no factorization into sides divisible by patch {}; valid layouts: []",
                    self.patch
                ))
            }),
        }
    }

    pub fn tokens(&self) -> Result<usize> {
        let (r, c) = self.geometry()?;
        Ok((r / self.patch) * (c / self.patch))
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.face_dim == 0 || self.pose_dim == 0 {
            return Err(FraError::config("face_dim and pose_dim must be positive"));
        }
        self.geometry()?;
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(FraError::config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ff_dim == 0 || self.layers == 0 {
            return Err(FraError::config("ff_dim and layers must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FraError::config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    fn pooled_dim(&self) -> Result<usize> {
        Ok(match self.pooling {
            Pooling::Mean => self.model_dim,
            Pooling::Flatten => self.model_dim * self.tokens()?,
        })
    }
}

/// Lays `[face ‖ pose]` out row-major as a `rows×cols` matrix.
pub fn fuse(face: &[f64], pose: &[f64], rows: usize, cols: usize) -> Result<Tensor> {
    let len = face.len() + pose.len();
    if rows * cols != len {
        return Err(FraError::config(format!(
            "cannot reshape {len} values into {rows}×{cols}"
        )));
    }
    Tensor::new(vec![rows, cols], [face, pose].concat())
}

/// Non-overlapping `patch×patch` blocks in row-major block order, each flattened row-major.
pub fn patchify(m: &Tensor, patch: usize) -> Result<Tensor> {
    let s = m.shape();
    if s.len() != 2 || patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(FraError::config(format!(
            "patch {patch} does not divide matrix {:?}",
            s
        )));
    }
    let (rows, cols) = (s[0], s[1]);
    let (br, bc) = (rows / patch, cols / patch);
    let mut out = Vec::with_capacity(m.numel());
    for bi in 0..br {
        for bj in 0..bc {
            for r in 0..patch {
                let start = (bi * patch + r) * cols + bj * patch;
                out.extend_from_slice(&m.data()[start..start + patch]);
            }
        }
    }
    Tensor::new(vec![br * bc, patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, rows: usize, cols: usize, patch: usize) -> Result<Tensor> {
    let bc = cols / patch;
    if tokens.shape() != [(rows / patch) * bc, patch * patch] {
        return Err(FraError::config(format!(
            "tokens {:?} do not tile a {rows}×{cols} matrix with patch {patch}",
            tokens.shape()
        )));
    }
    let mut out = vec![0.0; rows * cols];
    for (t, tok) in tokens.data().chunks(patch * patch).enumerate() {
        let (bi, bj) = (t / bc, t % bc);
        for r in 0..patch {
            let start = (bi * patch + r) * cols + bj * patch;
            out[start..start + patch].copy_from_slice(&tok[r * patch..(r + 1) * patch]);
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Scaled dot-product attention on a tape; `q,k: [n,T,d_k]`, `v: [n,S,d_v]`.
/// Returns `(output, weights)`.
pub fn attention_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = *tape.shape(q).last().unwrap();
    if tape.shape(k).last() != Some(&dk) || tape.shape(k).get(1) != tape.shape(v).get(1) {
        return Err(FraError::Dimension {
            op: "attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let out = tape.bmm(weights, v, false)?;
    Ok((out, weights))
}

/// `softmax(Q·Kᵀ/√d_k)·V` for rank-2 inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let ok = q.rank() == 2
        && k.rank() == 2
        && v.rank() == 2
        && q.shape()[1] == k.shape()[1]
        && k.shape()[0] == v.shape()[0];
    if !ok {
        return Err(FraError::Dimension {
            op: "attention",
            lhs: [q.shape(), k.shape()].concat(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let lift = |tape: &mut Tape, t: &Tensor| {
        let s = t.shape();
        tape.constant(t.clone().reshaped(&[1, s[0], s[1]]).expect("rank 2"))
    };
    let (qv, kv, vv) = (lift(&mut tape, q), lift(&mut tape, k), lift(&mut tape, v));
    let (out, _) = attention_on_tape(&mut tape, qv, kv, vv)?;
    tape.value(out).clone().reshaped(&[q.shape()[0], v.shape()[1]])
}

/// Multi-head self-attention of `x: [B·T, d]` with packed projections `W: [d, d]`.
/// Head `i` uses columns `i·d_k..(i+1)·d_k` of each projection.
/// Returns `(Concat(head_1..head_h)·W^O, attention weights [B·h, T, T])`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_on_tape(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<(Var, Var)> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(FraError::config(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let split = |tape: &mut Tape, w: Var| -> Result<Var> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(p, &[batch, tokens, heads, dk])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[batch * heads, tokens, dk])
    };
    let q = split(tape, wq)?;
    let k = split(tape, wk)?;
    let v = split(tape, wv)?;
    let (o, weights) = attention_on_tape(tape, q, k, v)?;
    let o = tape.reshape(o, &[batch, heads, tokens, dk])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[batch * tokens, d])?;
    Ok((tape.matmul(o, wo)?, weights))
}

/// Multi-head self-attention for one token matrix `x: [T, d]`.
pub fn multi_head(x: &Tensor, heads: usize, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(FraError::Dimension {
            op: "multi_head",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ws: Vec<Var> = [wq, wk, wv, wo].iter().map(|w| tape.constant((*w).clone())).collect();
    let (out, _) = multi_head_on_tape(&mut tape, xv, 1, x.shape()[0], heads, ws[0], ws[1], ws[2], ws[3])?;
    Ok(tape.value(out).clone())
}

/// Plain (tape-free) softmax over the last axis of a rank-2 tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    Tensor::new(x.shape().to_vec(), softmax_rows_data(x.data(), n)).expect("shape preserved")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinerWeights {
    pub config: CombinerConfig,
    pub params: ParamStore,
}

/// Handles produced by one combiner forward pass.
#[derive(Clone, Debug)]
pub struct CombinerTrace {
    pub output: Var,
    pub pooled: Var,
    /// Per layer, `[B·h, T, T]` attention weights.
    pub attention: Vec<Var>,
}

fn layer_name(l: usize, part: &str) -> String {
    format!("comb.l{l}.{part}")
}

impl CombinerWeights {
    pub fn init(config: CombinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let pp = config.patch * config.patch;
        let t = config.tokens()?;
        // Residual branch outputs are shrunk so the un-normalized stream stays O(1).
        let branch_gain = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("comb.patch.w", glorot_uniform(&mut rng, &[pp, d], pp, d, 1.0));
        p.insert("comb.patch.b", Tensor::zeros(&[d]));
        p.insert("comb.pos", uniform(&mut rng, &[t, d], 0.02));
        for l in 0..config.layers {
            for part in ["wq", "wk", "wv"] {
                p.insert(layer_name(l, part), glorot_uniform(&mut rng, &[d, d], d, d, 1.0));
            }
            p.insert(layer_name(l, "wo"), glorot_uniform(&mut rng, &[d, d], d, d, branch_gain));
            p.insert(layer_name(l, "ff1.w"), glorot_uniform(&mut rng, &[d, config.ff_dim], d, config.ff_dim, 2f64.sqrt()));
            p.insert(layer_name(l, "ff1.b"), Tensor::zeros(&[config.ff_dim]));
            p.insert(layer_name(l, "ff2.w"), glorot_uniform(&mut rng, &[config.ff_dim, d], config.ff_dim, d, branch_gain));
            p.insert(layer_name(l, "ff2.b"), Tensor::zeros(&[d]));
        }
        let pooled = config.pooled_dim()?;
        let head_gain = if config.face_skip { 0.01 } else { 1.0 };
        p.insert("comb.head.w", glorot_uniform(&mut rng, &[pooled, config.face_dim], pooled, config.face_dim, head_gain));
        p.insert("comb.head.b", Tensor::zeros(&[config.face_dim]));
        p.insert("comb.norm.scale", Tensor::full(&[config.face_dim], 1.0));
        p.insert("comb.norm.shift", Tensor::zeros(&[config.face_dim]));
        Ok(CombinerWeights { config, params: p })
    }

    /// Patch tokens `[B·T, p²]` for `face: [B, D_f]`, `pose: [B, D_p]`.
    pub fn tokens_on_tape(&self, tape: &mut Tape, face: Var, pose: Var) -> Result<Var> {
        let cfg = &self.config;
        let (fs, ps) = (tape.shape(face).to_vec(), tape.shape(pose).to_vec());
        if fs.len() != 2 || ps.len() != 2 || fs[0] != ps[0] || fs[1] != cfg.face_dim || ps[1] != cfg.pose_dim {
            return Err(FraError::Dimension {
                op: "fuse",
                lhs: fs,
                rhs: ps,
            });
        }
        let b = fs[0];
        let (r, c) = cfg.geometry()?;
        let p = cfg.patch;
        let fused = tape.concat(&[face, pose], 1)?;
        let blocks = tape.reshape(fused, &[b, r / p, p, c / p, p])?;
        let blocks = tape.permute(blocks, &[0, 1, 3, 2, 4])?;
        tape.reshape(blocks, &[b * cfg.tokens()?, p * p])
    }

    /// Runs the attention/feed-forward stack over `x: [B·T, d]`.
    pub fn encoder_on_tape(&self, tape: &mut Tape, p: &Bound, mut x: Var, batch: usize, train: bool) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let tokens = tape.shape(x)[0] / batch;
        let mut maps = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (a, w) = multi_head_on_tape(
                tape,
                x,
                batch,
                tokens,
                cfg.heads,
                p.var(&layer_name(l, "wq")),
                p.var(&layer_name(l, "wk")),
                p.var(&layer_name(l, "wv")),
                p.var(&layer_name(l, "wo")),
            )?;
            maps.push(w);
            let a = tape.dropout(a, cfg.dropout, train)?;
            x = tape.add(x, a)?;

            let h = tape.matmul(x, p.var(&layer_name(l, "ff1.w")))?;
            let h = tape.affine(h, None, Some(p.var(&layer_name(l, "ff1.b"))))?;
            let h = tape.relu(h);
            let h = tape.matmul(h, p.var(&layer_name(l, "ff2.w")))?;
            let h = tape.affine(h, None, Some(p.var(&layer_name(l, "ff2.b"))))?;
            let h = tape.dropout(h, cfg.dropout, train)?;
            x = tape.add(x, h)?;
        }
        Ok((x, maps))
    }

    /// Full forward pass for a batch; output rows are unit-norm `[B, D_f]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &Bound, face: Var, pose: Var, train: bool) -> Result<CombinerTrace> {
        let cfg = &self.config;
        let batch = tape.shape(face)[0];
        let tokens = cfg.tokens()?;
        let patches = self.tokens_on_tape(tape, face, pose).stage("fuse")?;
        let x = tape.matmul(patches, p.var("comb.patch.w")).stage("patch projection")?;
        let mut x = tape.affine(x, None, Some(p.var("comb.patch.b"))).stage("patch projection")?;
        if cfg.positional {
            let pos = p.var("comb.pos");
            let tiled = tape.concat(&vec![pos; batch], 0).stage("positional embedding")?;
            x = tape.add(x, tiled).stage("positional embedding")?;
        }
        let (x, attention) = self.encoder_on_tape(tape, p, x, batch, train).stage("attention stack")?;
        let pooled = match cfg.pooling {
            Pooling::Mean => {
                let x = tape.reshape(x, &[batch, tokens, cfg.model_dim]).stage("pooling")?;
                tape.mean_axis(x, 1).stage("pooling")?
            }
            Pooling::Flatten => tape.reshape(x, &[batch, tokens * cfg.model_dim]).stage("pooling")?,
        };
        let h = tape.matmul(pooled, p.var("comb.head.w")).stage("head")?;
        let mut h = tape.affine(h, None, Some(p.var("comb.head.b"))).stage("head")?;
        if cfg.face_skip {
            h = tape.add(h, face).stage("head")?;
        }
        let h = tape
            .affine(h, Some(p.var("comb.norm.scale")), Some(p.var("comb.norm.shift")))
            .stage("normalization")?;
        let output = tape.l2_normalize_rows(h);
        Ok(CombinerTrace {
            output,
            pooled,
            attention,
        })
    }

    pub fn forward(&self, face: &FaceEmbedding, pose: &PoseLatent, train: bool) -> Result<AugmentedEmbedding> {
        let mut out = self.forward_batch(&[(face.vector.as_slice(), pose.0.as_slice())], train, 0)?;
        Ok(out.remove(0))
    }

    /// Batched inference; `dropout_seed` only matters when `train`.
    pub fn forward_batch(&self, pairs: &[(&[f64], &[f64])], train: bool, dropout_seed: u64) -> Result<Vec<AugmentedEmbedding>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let (face, pose) = self.stack_inputs(pairs)?;
        let mut tape = Tape::with_dropout_seed(dropout_seed);
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(face);
        let q = tape.constant(pose);
        let trace = self.forward_on_tape(&mut tape, &p, f, q, train)?;
        Ok(tape
            .value(trace.output)
            .data()
            .chunks(self.config.face_dim)
            .map(|c| AugmentedEmbedding(c.to_vec()))
            .collect())
    }

    /// Eval-mode attention weights, one `[B·h, T, T]` tensor per layer.
    pub fn attention_maps(&self, pairs: &[(&[f64], &[f64])]) -> Result<Vec<Tensor>> {
        let (face, pose) = self.stack_inputs(pairs)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(face);
        let q = tape.constant(pose);
        let trace = self.forward_on_tape(&mut tape, &p, f, q, false)?;
        Ok(trace.attention.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Eval-mode attention stack followed by mean pooling over the given tokens `[T, d]`.
    pub fn encode_and_mean_pool(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(tokens.clone());
        let (x, _) = self.encoder_on_tape(&mut tape, &p, x, 1, false)?;
        let m = tape.mean_axis(x, 0)?;
        Ok(tape.value(m).clone())
    }

    fn stack_inputs(&self, pairs: &[(&[f64], &[f64])]) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let mut face = Vec::with_capacity(pairs.len() * cfg.face_dim);
        let mut pose = Vec::with_capacity(pairs.len() * cfg.pose_dim);
        for (f, p) in pairs {
            if f.len() != cfg.face_dim || p.len() != cfg.pose_dim {
                return Err(FraError::config(format!(
                    "combiner expects face {} / pose {}, got {} / {}",
                    cfg.face_dim,
                    cfg.pose_dim,
                    f.len(),
                    p.len()
                )));
            }
            face.extend_from_slice(f);
            pose.extend_from_slice(p);
        }
        Ok((
            Tensor::new(vec![pairs.len(), cfg.face_dim], face)?,
            Tensor::new(vec![pairs.len(), cfg.pose_dim], pose)?,
        ))
    }
}
