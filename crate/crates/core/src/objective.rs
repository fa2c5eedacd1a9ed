//! Multi-task objective: landmark-reconstruction BCE plus three triplet terms.
//!
//! The distance is the squared Euclidean norm of the difference of unit
//! vectors, so it lies in `[0, 4]`. Each triplet term is the batch mean of
//! `max(d(a,p) − d(a,n) + margin, 0)`.

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, SampleKey};
use crate::error::{FraError, Result};
use crate::pose::bce_loss;
use crate::raster::BinaryLandmarkImage;
use crate::tensor::{l2_norm, Tensor};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MARGIN: f64 = 10.0;
const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub triplet_pose: f64,
    pub triplet_identity: f64,
    pub triplet_emotion: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(bce: f64, triplet_pose: f64, triplet_identity: f64, triplet_emotion: f64) -> Self {
        LossBreakdown {
            bce,
            triplet_pose,
            triplet_identity,
            triplet_emotion,
            total: bce + triplet_pose + triplet_identity + triplet_emotion,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.bce, self.triplet_pose, self.triplet_identity, self.triplet_emotion, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "bce={} pose={} identity={} emotion={} total={}",
            self.bce, self.triplet_pose, self.triplet_identity, self.triplet_emotion, self.total
        )
    }
}

/// One anchor with its positive and the three category negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletItem {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub neg_pose: Vec<f64>,
    pub neg_identity: Vec<f64>,
    pub neg_emotion: Vec<f64>,
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = l2_norm(v);
    if (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(FraError::contract(format!(
            "{what} has norm {n}, expected a unit vector (missing normalization upstream?)"
        )));
    }
    Ok(())
}

/// `‖x − y‖²` for unit vectors.
pub fn squared_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(FraError::Dimension {
            op: "squared_distance",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    check_unit(x, "x")?;
    check_unit(y, "y")?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Batch mean of `max(d(a,p) − d(a,n) + margin, 0)`.
pub fn triplet_term(anchors: &[Vec<f64>], positives: &[Vec<f64>], negatives: &[Vec<f64>], margin: f64) -> Result<f64> {
    if !(margin >= 0.0) {
        return Err(FraError::config(format!("triplet margin must be ≥ 0, got {margin}")));
    }
    if anchors.is_empty() || anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(FraError::contract("triplet batch must be nonempty with matching lengths"));
    }
    let mut sum = 0.0;
    for ((a, p), n) in anchors.iter().zip(positives).zip(negatives) {
        sum += (squared_distance(a, p)? - squared_distance(a, n)? + margin).max(0.0);
    }
    Ok(sum / anchors.len() as f64)
}

/// Reference (tape-free) evaluation of the full objective.
pub fn total_loss(
    batch: &[TripletItem],
    reconstructions: &[(Tensor, BinaryLandmarkImage)],
    margin: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(FraError::contract("total_loss needs a nonempty batch"));
    }
    let bce = if reconstructions.is_empty() {
        0.0
    } else {
        let mut s = 0.0;
        for (recon, target) in reconstructions {
            s += bce_loss(recon, target)?;
        }
        s / reconstructions.len() as f64
    };
    let col = |f: fn(&TripletItem) -> &Vec<f64>| batch.iter().map(|t| f(t).clone()).collect::<Vec<_>>();
    let anchors = col(|t| &t.anchor);
    let positives = col(|t| &t.positive);
    let pose = triplet_term(&anchors, &positives, &col(|t| &t.neg_pose), margin)?;
    let identity = triplet_term(&anchors, &positives, &col(|t| &t.neg_identity), margin)?;
    let emotion = triplet_term(&anchors, &positives, &col(|t| &t.neg_emotion), margin)?;
    Ok(LossBreakdown::from_parts(bce, pose, identity, emotion))
}

/// Row-wise `‖a − b‖²` on a tape; `a, b: [B, D]` → `[B]`.
pub fn squared_distance_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.shape(a)[1] as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let mean = tape.mean_axis(sq, 1)?;
    Ok(tape.scale(mean, d))
}

/// Triplet term on a tape for `[B, D]` anchors, positives and negatives.
pub fn triplet_on_tape(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    if !(margin >= 0.0) {
        return Err(FraError::config(format!("triplet margin must be ≥ 0, got {margin}")));
    }
    let dp = squared_distance_on_tape(tape, anchor, positive)?;
    let dn = squared_distance_on_tape(tape, anchor, negative)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    Ok(tape.mean_all(hinge))
}

/// Keys of the three negatives for one anchor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeKeys {
    pub pose: SampleKey,
    pub identity: SampleKey,
    pub emotion: SampleKey,
}

/// Draws the pose, identity and emotion negatives for an anchor of identity
/// `i`, emotion `e` whose target pose is `target_pose`.
///
/// * pose: `(i, e, p')` with `p' ≠ target_pose`
/// * emotion: `(i, e', target_pose)` with `e' ≠ e`
/// * identity: any sample whose identity differs from `i`
pub fn sample_negatives(dataset: &Dataset, anchor: &SampleKey, target_pose: &str, seed: u64) -> Result<NegativeKeys> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = &anchor.identity;
    let poses: Vec<&str> = dataset
        .poses_for(id, &anchor.emotion)
        .into_iter()
        .filter(|p| *p != target_pose)
        .collect();
    let emotions: Vec<&str> = dataset
        .emotions_for(id, target_pose)
        .into_iter()
        .filter(|e| *e != anchor.emotion)
        .collect();
    let fail = |category| FraError::Sampling {
        category,
        key: format!("{anchor} → pose {target_pose}"),
    };
    let pose = poses.choose(&mut rng).ok_or_else(|| fail("pose"))?;
    let emotion = emotions.choose(&mut rng).ok_or_else(|| fail("emotion"))?;
    let identity = dataset
        .sample_other_identity(id, &mut rng)
        .ok_or_else(|| fail("identity"))?;
    Ok(NegativeKeys {
        pose: SampleKey::new(id, &anchor.emotion, pose),
        identity,
        emotion: SampleKey::new(id, emotion, target_pose),
    })
}
