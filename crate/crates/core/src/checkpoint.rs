//! Checkpoint persistence.
//!
//! Layout: a UTF-8 manifest followed by raw tensor payloads.
//!
//! ```text
//! FRACKPT 1
//! step 400
//! config {"data":{...},...}
//! tensor ae.enc.conv1.w 8x1x4x4
//! ...
//! end
//! <little-endian f64 payloads, in manifest order>
//! ```
//!
//! Model weights keep their parameter names. Optimizer velocity is stored as
//! `opt.<name>`, the per-step loss history as `train.history` `[n, 5]` and the
//! validation history as `train.val_history` `[m, 6]` with the step first.

use crate::config::RunConfig;
use crate::error::{FraError, Result};
use crate::model::FraModel;
use crate::objective::LossBreakdown;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainState;
use std::path::Path;

pub const FORMAT_TAG: &str = "FRACKPT";
pub const FORMAT_VERSION: u32 = 1;

const OPT_PREFIX: &str = "opt.";
const HISTORY: &str = "train.history";
const VAL_HISTORY: &str = "train.val_history";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub tensors: ParamStore,
}

fn loss_row(l: &LossBreakdown) -> [f64; 5] {
    [l.bce, l.triplet_pose, l.triplet_identity, l.triplet_emotion, l.total]
}

fn loss_from(r: &[f64]) -> LossBreakdown {
    LossBreakdown {
        bce: r[0],
        triplet_pose: r[1],
        triplet_identity: r[2],
        triplet_emotion: r[3],
        total: r[4],
    }
}

fn is_model_tensor(name: &str) -> bool {
    !name.starts_with(OPT_PREFIX) && !name.starts_with("train.")
}

impl Checkpoint {
    /// The snapshot drops the output directory, so identical runs written to
    /// different places serialize to identical bytes.
    pub fn capture(config: &RunConfig, model: &FraModel, state: &TrainState) -> Result<Self> {
        let mut config = config.clone();
        config.out = RunConfig::default().out;
        let mut tensors = model.params();
        for (n, v) in state.velocity.iter() {
            tensors.insert(format!("{OPT_PREFIX}{n}"), v.clone());
        }
        if !state.history.is_empty() {
            let data: Vec<f64> = state.history.iter().flat_map(loss_row).collect();
            tensors.insert(HISTORY, Tensor::new(vec![state.history.len(), 5], data)?);
        }
        if !state.val_history.is_empty() {
            let data: Vec<f64> = state
                .val_history
                .iter()
                .flat_map(|(s, l)| std::iter::once(*s as f64).chain(loss_row(l)))
                .collect();
            tensors.insert(VAL_HISTORY, Tensor::new(vec![state.val_history.len(), 6], data)?);
        }
        Ok(Checkpoint {
            step: state.step,
            config,
            tensors,
        })
    }

    /// Weights only, without optimizer state or history.
    pub fn model_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| is_model_tensor(n)) {
            p.insert(n, t.clone());
        }
        p
    }

    pub fn model(&self) -> Result<FraModel> {
        FraModel::from_params(&self.config.model, &self.model_params())
    }

    pub fn train_state(&self) -> Result<TrainState> {
        let params = self.model_params();
        let mut velocity = ParamStore::new();
        for (n, t) in params.iter() {
            let v = self
                .tensors
                .get(&format!("{OPT_PREFIX}{n}"))
                .map_err(|_| FraError::load(format!("checkpoint lacks optimizer state `{OPT_PREFIX}{n}`")))?;
            if v.shape() != t.shape() {
                return Err(FraError::load(format!(
                    "optimizer state `{OPT_PREFIX}{n}` has shape {:?}, weights have {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            velocity.insert(n, v.clone());
        }
        let rows = |name: &str, width: usize| -> Result<Vec<Vec<f64>>> {
            match self.tensors.get(name) {
                Err(_) => Ok(Vec::new()),
                Ok(t) if t.shape().len() == 2 && t.shape()[1] == width => {
                    Ok(t.data().chunks(width).map(<[f64]>::to_vec).collect())
                }
                Ok(t) => Err(FraError::load(format!("`{name}` has shape {:?}, expected [n, {width}]", t.shape()))),
            }
        };
        let history = rows(HISTORY, 5)?.iter().map(|r| loss_from(r)).collect();
        let val_history = rows(VAL_HISTORY, 6)?
            .iter()
            .map(|r| (r[0] as u64, loss_from(&r[1..])))
            .collect();
        Ok(TrainState {
            step: self.step,
            velocity,
            history,
            val_history,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!(
            "{FORMAT_TAG} {FORMAT_VERSION}\nstep {}\nconfig {}\n",
            self.step,
            serde_json::to_string(&self.config)?
        );
        for (n, t) in self.tensors.iter() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(FraError::contract(format!("tensor name `{n}` is empty or contains whitespace")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("tensor {n} {}\n", dims.join("x")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| FraError::load(format!("checkpoint: {m}"));
        let mut pos = 0usize;
        let mut next_line = |what: &str| -> Result<String> {
            let rest = &bytes[pos.min(bytes.len())..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad(format!("truncated manifest while reading {what}")))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad(format!("{what} is not UTF-8")))?;
            pos += nl + 1;
            Ok(line.to_string())
        };
        let tag = next_line("format tag")?;
        match tag.split_once(' ') {
            Some((FORMAT_TAG, v)) if v == FORMAT_VERSION.to_string() => {}
            Some((FORMAT_TAG, v)) => {
                return Err(bad(format!(
                    "format version {v} is not supported (this build reads version {FORMAT_VERSION})"
                )))
            }
            _ => return Err(bad(format!("missing `{FORMAT_TAG}` tag"))),
        }
        let step = next_line("step")?
            .strip_prefix("step ")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| bad("malformed step line".into()))?;
        let config_line = next_line("config")?;
        let config: RunConfig = serde_json::from_str(
            config_line
                .strip_prefix("config ")
                .ok_or_else(|| bad("malformed config line".into()))?,
        )
        .map_err(|e| bad(format!("config snapshot: {e}")))?;
        let mut manifest = Vec::new();
        loop {
            let line = next_line("tensor table")?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let [_, name, dims] = parts[..] else {
                return Err(bad(format!("malformed tensor line `{line}`")));
            };
            if parts[0] != "tensor" {
                return Err(bad(format!("malformed tensor line `{line}`")));
            }
            let shape = dims
                .split('x')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape in `{line}`")))?;
            manifest.push((name.to_string(), shape));
        }
        let mut tensors = ParamStore::new();
        let mut offset = pos;
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(bad(format!("payload truncated in tensor `{name}`")));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes after the last tensor", bytes.len() - offset)));
        }
        Ok(Checkpoint { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(content_id(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| FraError::load(format!("{}: {e}", path.display())))?;
        Ok((Self::from_bytes(&bytes)?, content_id(&bytes)))
    }
}

/// 64-bit FNV-1a digest of the serialized bytes, as 16 hex digits.
pub fn content_id(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pose::AutoencoderConfig;
    use crate::combiner::CombinerConfig;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.synthetic.dim = 32;
        c.model = ModelConfig {
            autoencoder: AutoencoderConfig {
                image_size: 16,
                latent_dim: 32,
                channels: [2, 2, 2],
            },
            combiner: CombinerConfig {
                face_dim: 32,
                pose_dim: 32,
                patch: 4,
                model_dim: 8,
                heads: 2,
                layers: 1,
                ff_dim: 8,
                ..CombinerConfig::default()
            },
            ..ModelConfig::default()
        };
        c
    }

    fn sample() -> Checkpoint {
        let cfg = small();
        let model = FraModel::init(&cfg.model, 5).unwrap();
        let mut state = TrainState::new(&model);
        state.step = 7;
        state.history.push(LossBreakdown::from_parts(0.1, 0.2, 0.3, 1.0 / 3.0));
        state.val_history.push((5, LossBreakdown::from_parts(0.4, 0.5, 0.6, 0.7)));
        for (_, v) in state.velocity.iter_mut() {
            v.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin() * 1e-3);
        }
        Checkpoint::capture(&cfg, &model, &state).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((n1, a), (n2, b)) in c.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(n1, n2);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.config, c.config);
        let state = back.train_state().unwrap();
        assert_eq!(state.step, 7);
        assert_eq!(state.history[0].triplet_emotion.to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(state.val_history[0].0, 5);
        assert_eq!(back.model().unwrap().params(), c.model_params());
    }

    #[test]
    fn version_mismatch_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..12]).to_string();
        assert!(text.starts_with("FRACKPT 1\n"));
        let mut other = b"FRACKPT 2".to_vec();
        other.extend_from_slice(&bytes[9..]);
        let msg = Checkpoint::from_bytes(&other).unwrap_err().to_string();
        assert!(msg.contains("version 2"), "{msg}");
        assert!(Checkpoint::from_bytes(b"NOTCKPT 1\n").is_err());
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn id_tracks_content() {
        let a = sample().to_bytes().unwrap();
        let mut b = a.clone();
        *b.last_mut().unwrap() ^= 1;
        assert_eq!(content_id(&a), content_id(&a.clone()));
        assert_ne!(content_id(&a), content_id(&b));
    }
}
