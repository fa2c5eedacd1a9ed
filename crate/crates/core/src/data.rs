//! Datasets of `(identity, emotion, pose)` records: synthetic generation, CSV
//! persistence, identity-disjoint splits and training-batch assembly.

use crate::error::{FraError, Result};
use crate::objective::{sample_negatives, NegativeKeys};
use crate::raster::{rasterize, BinaryLandmarkImage, LandmarkSet, NUM_LANDMARKS};
use crate::tensor::{l2_norm, normalized};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub identity: String,
    pub emotion: String,
    pub pose: String,
}

impl SampleKey {
    pub fn new(identity: &str, emotion: &str, pose: &str) -> Self {
        SampleKey {
            identity: identity.to_owned(),
            emotion: emotion.to_owned(),
            pose: pose.to_owned(),
        }
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.identity, self.emotion, self.pose)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub embedding: Vec<f64>,
    pub landmarks: LandmarkSet,
}

/// Ground-truth factors of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorTruth {
    pub alpha: f64,
    pub beta: f64,
    pub identity: BTreeMap<String, Vec<f64>>,
    pub emotion: BTreeMap<String, Vec<f64>>,
    pub pose: BTreeMap<String, Vec<f64>>,
}

impl FactorTruth {
    /// Noise-free embedding `normalize(u_i + α·v_e + β·w_p)` for any key, including
    /// keys absent from the dataset.
    pub fn oracle_target(&self, key: &SampleKey) -> Result<Vec<f64>> {
        fn get<'a>(m: &'a BTreeMap<String, Vec<f64>>, k: &str, what: &str) -> Result<&'a Vec<f64>> {
            m.get(k)
                .ok_or_else(|| FraError::input(format!("no {what} factor for `{k}`")))
        }
        let u = get(&self.identity, &key.identity, "identity")?;
        let v = get(&self.emotion, &key.emotion, "emotion")?;
        let w = get(&self.pose, &key.pose, "pose")?;
        let raw: Vec<f64> = (0..u.len())
            .map(|j| u[j] + self.alpha * v[j] + self.beta * w[j])
            .collect();
        Ok(normalized(&raw))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: BTreeMap<SampleKey, Record>,
    dim: usize,
    source: String,
    factor_truth: Option<FactorTruth>,
    identities: Vec<String>,
    emotions: Vec<String>,
    poses: Vec<String>,
    /// Contiguous ranges of `keys` per identity (keys sort identity-first).
    keys: Vec<SampleKey>,
    identity_ranges: BTreeMap<String, (usize, usize)>,
}

impl Dataset {
    /// Builds a dataset, L2-normalizing every embedding.
    pub fn new(
        records: BTreeMap<SampleKey, Record>,
        source: impl Into<String>,
        factor_truth: Option<FactorTruth>,
    ) -> Result<Self> {
        let dim = records
            .values()
            .next()
            .map(|r| r.embedding.len())
            .ok_or_else(|| FraError::input("dataset has no records"))?;
        let mut records = records;
        for (k, r) in records.iter_mut() {
            if r.embedding.len() != dim {
                return Err(FraError::input(format!(
                    "embedding for {k} has length {}, expected {dim}",
                    r.embedding.len()
                )));
            }
            if r.embedding.iter().any(|v| !v.is_finite()) || l2_norm(&r.embedding) == 0.0 {
                return Err(FraError::input(format!("embedding for {k} is zero or non-finite")));
            }
            r.embedding = normalized(&r.embedding);
        }
        let uniq = |f: fn(&SampleKey) -> &String| -> Vec<String> {
            records.keys().map(|k| f(k).clone()).collect::<BTreeSet<_>>().into_iter().collect()
        };
        let identities = uniq(|k| &k.identity);
        let emotions = uniq(|k| &k.emotion);
        let poses = uniq(|k| &k.pose);
        let keys: Vec<SampleKey> = records.keys().cloned().collect();
        let mut identity_ranges = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            identity_ranges
                .entry(k.identity.clone())
                .and_modify(|r: &mut (usize, usize)| r.1 = i + 1)
                .or_insert((i, i + 1));
        }
        Ok(Dataset {
            records,
            dim,
            source: source.into(),
            factor_truth,
            identities,
            emotions,
            poses,
            keys,
            identity_ranges,
        })
    }

    /// Attaches a factor-truth sidecar after checking it covers every label.
    pub fn with_factor_truth(mut self, truth: FactorTruth) -> Result<Self> {
        for k in &self.keys {
            let t = truth.oracle_target(k)?;
            if t.len() != self.dim {
                return Err(FraError::input(format!(
                    "factor truth has length {}, embeddings have {}",
                    t.len(),
                    self.dim
                )));
            }
        }
        self.factor_truth = Some(truth);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn factor_truth(&self) -> Option<&FactorTruth> {
        self.factor_truth.as_ref()
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn emotions(&self) -> &[String] {
        &self.emotions
    }

    pub fn poses(&self) -> &[String] {
        &self.poses
    }

    pub fn keys(&self) -> &[SampleKey] {
        &self.keys
    }

    pub fn records(&self) -> impl Iterator<Item = (&SampleKey, &Record)> {
        self.records.iter()
    }

    pub fn get(&self, key: &SampleKey) -> Option<&Record> {
        self.records.get(key)
    }

    pub fn record(&self, key: &SampleKey) -> Result<&Record> {
        self.get(key)
            .ok_or_else(|| FraError::input(format!("no record for {key}")))
    }

    pub fn embedding(&self, key: &SampleKey) -> Result<&[f64]> {
        Ok(&self.record(key)?.embedding)
    }

    pub fn image(&self, key: &SampleKey, size: usize, radius: usize) -> Result<BinaryLandmarkImage> {
        rasterize(&self.record(key)?.landmarks, size, size, radius)
    }

    pub fn keys_of_identity(&self, identity: &str) -> &[SampleKey] {
        match self.identity_ranges.get(identity) {
            Some(&(a, b)) => &self.keys[a..b],
            None => &[],
        }
    }

    /// Poses present for `(identity, emotion)`, sorted.
    pub fn poses_for(&self, identity: &str, emotion: &str) -> Vec<&str> {
        self.keys_of_identity(identity)
            .iter()
            .filter(|k| k.emotion == emotion)
            .map(|k| k.pose.as_str())
            .collect()
    }

    /// Emotions present for `(identity, pose)`, sorted.
    pub fn emotions_for(&self, identity: &str, pose: &str) -> Vec<&str> {
        self.keys_of_identity(identity)
            .iter()
            .filter(|k| k.pose == pose)
            .map(|k| k.emotion.as_str())
            .collect()
    }

    /// Uniform draw over every sample whose identity differs from `identity`.
    pub fn sample_other_identity(&self, identity: &str, rng: &mut impl Rng) -> Option<SampleKey> {
        let (a, b) = self.identity_ranges.get(identity).copied().unwrap_or((0, 0));
        let others = self.keys.len() - (b - a);
        if others == 0 {
            return None;
        }
        let mut i = rng.random_range(0..others);
        if i >= a {
            i += b - a;
        }
        Some(self.keys[i].clone())
    }

    /// Grid cells `(identity × emotion × pose)` with no record.
    pub fn missing_keys(&self) -> Vec<SampleKey> {
        let mut out = Vec::new();
        for i in &self.identities {
            for e in &self.emotions {
                for p in &self.poses {
                    let k = SampleKey::new(i, e, p);
                    if !self.records.contains_key(&k) {
                        out.push(k);
                    }
                }
            }
        }
        out
    }

    /// Restricts to the given identities.
    pub fn subset(&self, identities: &[String]) -> Result<Dataset> {
        let keep: BTreeSet<&String> = identities.iter().collect();
        let records = self
            .records
            .iter()
            .filter(|(k, _)| keep.contains(&k.identity))
            .map(|(k, r)| (k.clone(), r.clone()))
            .collect();
        Dataset::new(records, self.source.clone(), self.factor_truth.clone())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub emotions: usize,
    pub poses: usize,
    pub dim: usize,
    /// Expected L2 norm of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            identities: 20,
            emotions: 4,
            poses: 4,
            dim: 512,
            noise_sigma: 0.1,
            alpha: 0.5,
            beta: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.emotions < 2 || self.poses < 2 {
            return Err(FraError::config(format!(
                "synthetic counts must all be ≥ 2, got identities={} emotions={} poses={}",
                self.identities, self.emotions, self.poses
            )));
        }
        if self.dim == 0 {
            return Err(FraError::config("synthetic dim must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(FraError::config(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if l2_norm(&v) > 0.0 {
            return normalized(&v);
        }
    }
}

/// Canonical frontal 68-point layout (jaw, brows, nose, eyes, outer and inner lips)
/// as `(x, y, depth)`.
fn face_template() -> Vec<(f64, f64, f64)> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let t = PI - PI * i as f64 / 16.0;
        pts.push((0.5 + 0.36 * t.cos(), 0.38 + 0.46 * t.sin(), 0.25 * t.sin()));
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let s = i as f64 / 4.0;
            let x = if side < 0.0 { 0.22 + 0.2 * s } else { 0.58 + 0.2 * s };
            let arch = 0.03 * (PI * s).sin();
            pts.push((x, 0.30 - arch, 0.3));
        }
    }
    for i in 0..4 {
        pts.push((0.5, 0.38 + 0.06 * i as f64, 0.35 + 0.05 * i as f64));
    }
    for i in 0..5 {
        let s = i as f64 / 4.0 - 0.5;
        pts.push((0.5 + 0.14 * s, 0.62 - 0.015 * (1.0 - 4.0 * s * s), 0.38));
    }
    for cx in [0.34, 0.66] {
        for i in 0..6 {
            let t = PI - 2.0 * PI * i as f64 / 6.0;
            pts.push((cx + 0.07 * t.cos(), 0.39 - 0.025 * t.sin(), 0.28));
        }
    }
    for (n, rx, ry) in [(12, 0.15, 0.055), (8, 0.09, 0.022)] {
        for i in 0..n {
            let t = PI - 2.0 * PI * i as f64 / n as f64;
            pts.push((0.5 + rx * t.cos(), 0.74 - ry * t.sin(), 0.32));
        }
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts
}

/// Deterministic landmarks: yaw rotation per pose, mouth/brow displacement per
/// emotion, small width/offset jitter per identity.
fn synth_landmarks(pose: usize, n_poses: usize, emotion: usize, n_emotions: usize, jitter: (f64, f64)) -> Result<LandmarkSet> {
    let yaw = (-60.0 + 120.0 * pose as f64 / (n_poses - 1) as f64).to_radians();
    let mood = emotion as f64 / (n_emotions - 1) as f64;
    let (width, dy) = jitter;
    let pts = face_template()
        .into_iter()
        .enumerate()
        .map(|(i, (x, y, z))| {
            let (mut x, mut y) = (x, y);
            if (48..68).contains(&i) {
                // open mouth and lift corners with the emotion index
                let off = y - 0.74;
                y = 0.74 + off * (1.0 + 1.5 * mood) - 0.03 * mood * ((x - 0.5).abs() / 0.15);
            } else if (17..27).contains(&i) {
                y -= 0.04 * mood;
            }
            x = 0.5 + (x - 0.5) * width;
            let xr = 0.5 + (x - 0.5) * yaw.cos() + z * yaw.sin();
            ((xr).clamp(0.02, 0.98), (y + dy).clamp(0.02, 0.98))
        })
        .collect();
    LandmarkSet::new(pts)
}

/// Factor-structured stand-in for a posed-emotion face corpus.
///
/// Embedding of `(i, e, p)` is `normalize(u_i + α·v_e + β·w_p + ε)` with unit
/// factors drawn uniformly on the sphere and `ε ~ N(0, σ²/D · I)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let id_names: Vec<String> = (0..spec.identities).map(|i| format!("id{i:03}")).collect();
    let emo_names: Vec<String> = (0..spec.emotions).map(|i| format!("emo{i}")).collect();
    let pose_names: Vec<String> = (0..spec.poses).map(|i| format!("pose{i}")).collect();
    let draw = |rng: &mut ChaCha8Rng, names: &[String]| -> BTreeMap<String, Vec<f64>> {
        names.iter().map(|n| (n.clone(), unit_gaussian(rng, spec.dim))).collect()
    };
    let truth = FactorTruth {
        alpha: spec.alpha,
        beta: spec.beta,
        identity: draw(&mut rng, &id_names),
        emotion: draw(&mut rng, &emo_names),
        pose: draw(&mut rng, &pose_names),
    };
    let jitter: Vec<(f64, f64)> = id_names
        .iter()
        .map(|_| (rng.random_range(0.92..1.08), rng.random_range(-0.02..0.02)))
        .collect();
    let noise_std = spec.noise_sigma / (spec.dim as f64).sqrt();
    let mut records = BTreeMap::new();
    for (ii, id) in id_names.iter().enumerate() {
        for (ei, emo) in emo_names.iter().enumerate() {
            for (pi, pose) in pose_names.iter().enumerate() {
                let (u, v, w) = (&truth.identity[id], &truth.emotion[emo], &truth.pose[pose]);
                let embedding: Vec<f64> = (0..spec.dim)
                    .map(|j| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        u[j] + spec.alpha * v[j] + spec.beta * w[j] + noise_std * eps
                    })
                    .collect();
                let landmarks = synth_landmarks(pi, spec.poses, ei, spec.emotions, jitter[ii])?;
                records.insert(SampleKey::new(id, emo, pose), Record { embedding, landmarks });
            }
        }
    }
    Dataset::new(records, "synthetic", Some(truth))
}

// ---------------------------------------------------------------------------
// CSV persistence

fn key_header() -> [&'static str; 3] {
    ["identity", "emotion", "pose"]
}

/// Writes `identity,emotion,pose,e0..` and `identity,emotion,pose,x0,y0..` CSVs.
pub fn write_csv(dataset: &Dataset, embedding_path: &Path, landmark_path: &Path) -> Result<()> {
    let mut emb = csv::Writer::from_path(embedding_path)?;
    let mut header: Vec<String> = key_header().iter().map(|s| s.to_string()).collect();
    header.extend((0..dataset.dim()).map(|j| format!("e{j}")));
    emb.write_record(&header)?;
    let mut lm = csv::Writer::from_path(landmark_path)?;
    let mut header: Vec<String> = key_header().iter().map(|s| s.to_string()).collect();
    for j in 0..NUM_LANDMARKS {
        header.push(format!("x{j}"));
        header.push(format!("y{j}"));
    }
    lm.write_record(&header)?;
    for (k, r) in dataset.records() {
        let mut row = vec![k.identity.clone(), k.emotion.clone(), k.pose.clone()];
        row.extend(r.embedding.iter().map(|v| v.to_string()));
        emb.write_record(&row)?;
        let mut row = vec![k.identity.clone(), k.emotion.clone(), k.pose.clone()];
        for &(x, y) in r.landmarks.points() {
            row.push(x.to_string());
            row.push(y.to_string());
        }
        lm.write_record(&row)?;
    }
    emb.flush()?;
    lm.flush()?;
    Ok(())
}

pub fn write_factor_truth(truth: &FactorTruth, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(truth)? + "\n")?;
    Ok(())
}

pub fn read_factor_truth(path: &Path) -> Result<FactorTruth> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

struct KeyedRows {
    width: usize,
    rows: BTreeMap<SampleKey, (u64, Vec<f64>)>,
}

fn read_keyed_csv(path: &Path, what: &str, prefix: &[&str]) -> Result<KeyedRows> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_path(path)
        .map_err(|e| FraError::load(format!("{what} file {}: {e}", path.display())))?;
    let mut records = rdr.records();
    let header = match records.next() {
        None => {
            return Ok(KeyedRows {
                width: 0,
                rows: BTreeMap::new(),
            })
        }
        Some(h) => h?,
    };
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != key_header() {
        return Err(FraError::load(format!(
            "{what} file {}: header must start with identity,emotion,pose",
            path.display()
        )));
    }
    let width = cols.len() - 3;
    for (j, c) in cols[3..].iter().enumerate() {
        let want = if prefix.len() == 1 {
            format!("{}{j}", prefix[0])
        } else {
            format!("{}{}", prefix[j % prefix.len()], j / prefix.len())
        };
        if *c != want {
            return Err(FraError::load(format!(
                "{what} file {}: column {} is `{c}`, expected `{want}`",
                path.display(),
                j + 4
            )));
        }
    }
    let mut rows = BTreeMap::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width + 3 {
            return Err(FraError::load(format!(
                "{what} file {} line {line}: ragged row with {} values, header declares {width}",
                path.display(),
                rec.len().saturating_sub(3)
            )));
        }
        let key = SampleKey::new(&rec[0], &rec[1], &rec[2]);
        let values = rec
            .iter()
            .skip(3)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| FraError::load(format!("{what} file {} line {line}: {e}", path.display())))?;
        if let Some((first, _)) = rows.get(&key) {
            return Err(FraError::load(format!(
                "{what} file {} line {line}: duplicate key {key} (first seen on line {first})",
                path.display()
            )));
        }
        rows.insert(key, (line, values));
    }
    Ok(KeyedRows { width, rows })
}

/// Loads embeddings and landmarks, joining on `(identity, emotion, pose)`.
pub fn load_embeddings(embedding_path: &Path, landmark_path: &Path) -> Result<Dataset> {
    let emb = read_keyed_csv(embedding_path, "embedding", &["e"])?;
    let lm = read_keyed_csv(landmark_path, "landmark", &["x", "y"])?;
    if emb.rows.is_empty() {
        return Err(FraError::load(format!("embedding file {} has no rows", embedding_path.display())));
    }
    if !lm.rows.is_empty() && lm.width != 2 * NUM_LANDMARKS {
        return Err(FraError::load(format!(
            "landmark file {} declares {} coordinates, expected {}",
            landmark_path.display(),
            lm.width,
            2 * NUM_LANDMARKS
        )));
    }
    let unjoined: Vec<String> = emb
        .rows
        .keys()
        .filter(|k| !lm.rows.contains_key(*k))
        .map(|k| format!("{k} (embedding line {})", emb.rows[k].0))
        .chain(
            lm.rows
                .keys()
                .filter(|k| !emb.rows.contains_key(*k))
                .map(|k| format!("{k} (landmark line {})", lm.rows[k].0)),
        )
        .collect();
    if !unjoined.is_empty() {
        return Err(FraError::load(format!("unjoined keys: {}", unjoined.join(", "))));
    }
    let mut records = BTreeMap::new();
    for (key, (_, values)) in emb.rows {
        let (line, coords) = &lm.rows[&key];
        let pts = coords.chunks(2).map(|c| (c[0], c[1])).collect();
        let landmarks = LandmarkSet::new(pts)
            .map_err(|e| FraError::load(format!("landmark line {line}: {e}")))?;
        records.insert(key, Record { embedding: values, landmarks });
    }
    Dataset::new(records, "file", None).map_err(|e| FraError::load(e.to_string()))
}

// ---------------------------------------------------------------------------
// Splits and batches

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn partition_of(&self, identity: &str) -> Option<Partition> {
        let has = |v: &[String]| v.iter().any(|x| x == identity);
        if has(&self.train) {
            Some(Partition::Train)
        } else if has(&self.val) {
            Some(Partition::Val)
        } else if has(&self.test) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    /// Pairwise disjoint and exactly covering `identities`.
    pub fn is_partition_of(&self, identities: &[String]) -> bool {
        let all: Vec<&String> = self.train.iter().chain(&self.val).chain(&self.test).collect();
        let set: BTreeSet<&String> = all.iter().copied().collect();
        set.len() == all.len() && set.len() == identities.len() && identities.iter().all(|i| set.contains(i))
    }
}

/// `(train, val, test)` counts in the 99/11/30 proportions of a 140-identity corpus.
pub fn proportional_counts(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 99.0 / 140.0).round() as usize;
    let val = ((n as f64) * 11.0 / 140.0).round() as usize;
    let train = train.min(n);
    let val = val.min(n - train);
    (train, val, n - train - val)
}

/// Seeded uniform partition of identities.
pub fn split_by_identity(dataset: &Dataset, counts: (usize, usize, usize), seed: u64) -> Result<SplitSpec> {
    let n = dataset.identities().len();
    let (tr, va, te) = counts;
    if tr + va + te != n {
        return Err(FraError::config(format!(
            "split counts {tr}+{va}+{te} do not sum to {n} identities"
        )));
    }
    let mut ids = dataset.identities().to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = |k: usize| {
        let mut part: Vec<String> = ids.drain(..k).collect();
        part.sort();
        part
    };
    Ok(SplitSpec {
        train: take(tr),
        val: take(va),
        test: take(te),
    })
}

/// One training example: feed `base` and the landmark image of `target.pose`,
/// compare against the real embedding at `target`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub base: SampleKey,
    pub target: SampleKey,
    pub negatives: NegativeKeys,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// Draws that could not form an item (single pose, or no eligible negative).
    pub skipped: usize,
}

/// Draws `batch_size` items from `identities`, deterministically from `seed`.
pub fn make_batch(dataset: &Dataset, identities: &[String], batch_size: usize, seed: u64) -> Result<Batch> {
    if batch_size == 0 {
        return Err(FraError::config("batch_size must be ≥ 1"));
    }
    let pool: Vec<&String> = identities
        .iter()
        .filter(|i| !dataset.keys_of_identity(i).is_empty())
        .collect();
    if pool.is_empty() {
        return Err(FraError::config("split has no identities present in the dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(batch_size);
    let mut skipped = 0;
    let max_draws = 20 * batch_size + 100;
    for _ in 0..max_draws {
        if items.len() == batch_size {
            break;
        }
        let id = *pool.choose(&mut rng).expect("nonempty pool");
        let base = dataset
            .keys_of_identity(id)
            .choose(&mut rng)
            .expect("identity has keys")
            .clone();
        let targets: Vec<&str> = dataset
            .poses_for(id, &base.emotion)
            .into_iter()
            .filter(|p| *p != base.pose)
            .collect();
        let neg_seed = rng.random::<u64>();
        let Some(&target_pose) = targets.choose(&mut rng) else {
            skipped += 1;
            continue;
        };
        match sample_negatives(dataset, &base, target_pose, neg_seed) {
            Ok(negatives) => items.push(BatchItem {
                target: SampleKey::new(id, &base.emotion, target_pose),
                base,
                negatives,
            }),
            Err(FraError::Sampling { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(Batch { items, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    fn tiny() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            identities: 5,
            emotions: 3,
            poses: 2,
            dim: 8,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn counts_below_two_rejected() {
        let spec = SyntheticSpec {
            poses: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(FraError::Config(_))));
    }

    #[test]
    fn template_landmarks_are_valid_for_every_cell() {
        for p in 0..5 {
            for e in 0..7 {
                for j in [(0.92, -0.02), (1.08, 0.02)] {
                    synth_landmarks(p, 5, e, 7, j).unwrap();
                }
            }
        }
    }

    #[test]
    fn distinct_poses_rasterize_differently() {
        let d = tiny();
        let k0 = SampleKey::new("id000", "emo0", "pose0");
        let k1 = SampleKey::new("id000", "emo0", "pose1");
        assert_ne!(d.image(&k0, 64, 1).unwrap(), d.image(&k1, 64, 1).unwrap());
    }

    #[test]
    fn oracle_reproduces_noise_free_embeddings() {
        let d = generate_synthetic(&SyntheticSpec {
            identities: 3,
            emotions: 2,
            poses: 2,
            dim: 16,
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let truth = d.factor_truth().unwrap();
        for (k, r) in d.records() {
            let o = truth.oracle_target(k).unwrap();
            for (a, b) in o.iter().zip(&r.embedding) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_pose_batches_target_the_other_pose() {
        let d = tiny();
        let b = make_batch(&d, d.identities(), 16, 3).unwrap();
        assert_eq!(b.items.len(), 16);
        for it in &b.items {
            assert_ne!(it.base.pose, it.target.pose);
            assert_eq!(it.negatives.pose.pose, it.base.pose);
        }
    }

    #[test]
    fn single_pose_identity_is_skipped() {
        let mut records = BTreeMap::new();
        let lm = synth_landmarks(0, 2, 0, 2, (1.0, 0.0)).unwrap();
        for (i, e, p) in [("a", "x", "p"), ("b", "x", "p"), ("b", "x", "q"), ("b", "y", "p"), ("b", "y", "q")] {
            records.insert(
                SampleKey::new(i, e, p),
                Record {
                    embedding: vec![1.0, 0.5],
                    landmarks: lm.clone(),
                },
            );
        }
        let d = Dataset::new(records, "test", None).unwrap();
        let b = make_batch(&d, &["a".to_string()], 4, 0).unwrap();
        assert!(b.items.is_empty());
        assert!(b.skipped > 0);
        let b = make_batch(&d, &["b".to_string()], 4, 0).unwrap();
        assert_eq!(b.items.len(), 4);
        assert_eq!(d.missing_keys(), vec![SampleKey::new("a", "x", "q"), SampleKey::new("a", "y", "p"), SampleKey::new("a", "y", "q")]);
    }

    #[test]
    fn split_count_mismatch_rejected() {
        let d = tiny();
        assert!(matches!(split_by_identity(&d, (3, 1, 0), 0), Err(FraError::Config(_))));
        let s = split_by_identity(&d, (5, 0, 0), 0).unwrap();
        assert_eq!(s.train.len(), 5);
        assert!(s.is_partition_of(d.identities()));
    }

    #[test]
    fn proportional_counts_for_full_and_desk_sizes() {
        assert_eq!(proportional_counts(140), (99, 11, 30));
        assert_eq!(proportional_counts(20), (14, 2, 4));
    }

    #[test]
    fn identity_dominates_the_noise_free_embedding() {
        let d = generate_synthetic(&SyntheticSpec {
            noise_sigma: 0.0,
            dim: 64,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0.0, 0.0, 0.0);
        let keys = d.keys();
        for (i, a) in keys.iter().enumerate() {
            for b in &keys[i + 1..] {
                let c = cosine(d.embedding(a).unwrap(), d.embedding(b).unwrap());
                if a.identity == b.identity {
                    within += c;
                    nw += 1.0;
                } else {
                    cross += c;
                    nc += 1.0;
                }
                if a.identity != b.identity && a.emotion == b.emotion && a.pose == b.pose {
                    assert_ne!(d.embedding(a).unwrap(), d.embedding(b).unwrap());
                }
            }
        }
        assert!(within / nw - cross / nc >= 0.1, "within {} cross {}", within / nw, cross / nc);
        let again = generate_synthetic(&SyntheticSpec {
            noise_sigma: 0.0,
            dim: 64,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!(d.records().zip(again.records()).all(|((_, a), (_, b))| {
            a.embedding.iter().zip(&b.embedding).all(|(x, y)| x.to_bits() == y.to_bits())
        }));
    }

    #[test]
    fn full_scale_grid_has_4900_records() {
        let d = generate_synthetic(&SyntheticSpec {
            identities: 140,
            emotions: 7,
            poses: 5,
            dim: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(d.len(), 4900);
        let s = split_by_identity(&d, (99, 11, 30), 5).unwrap();
        assert!(s.is_partition_of(d.identities()));
        assert!(((s.train.len() as f64 / 140.0) - 0.707).abs() < 1e-3);
        assert_eq!(s, split_by_identity(&d, (99, 11, 30), 5).unwrap());
        let all = split_by_identity(&d, (140, 0, 0), 5).unwrap();
        assert_eq!((all.train.len(), all.val.len(), all.test.len()), (140, 0, 0));
    }

    #[test]
    fn batches_draw_only_from_their_identities() {
        let d = generate_synthetic(&SyntheticSpec {
            identities: 140,
            dim: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let s = split_by_identity(&d, (99, 11, 30), 1).unwrap();
        let train = d.subset(&s.train).unwrap();
        let b = make_batch(&train, &s.train, 32, 9).unwrap();
        assert_eq!(b.items.len(), 32);
        for it in &b.items {
            for k in [&it.base, &it.target, &it.negatives.pose, &it.negatives.identity, &it.negatives.emotion] {
                assert_eq!(s.partition_of(&k.identity), Some(Partition::Train), "{k}");
            }
        }
        assert_eq!(b, make_batch(&train, &s.train, 32, 9).unwrap());
    }

    #[test]
    fn csv_round_trip_preserves_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let (e, l) = (dir.path().join("e.csv"), dir.path().join("l.csv"));
        let d = generate_synthetic(&SyntheticSpec {
            dim: 16,
            ..SyntheticSpec::default()
        })
        .unwrap();
        write_csv(&d, &e, &l).unwrap();
        let back = load_embeddings(&e, &l).unwrap();
        assert_eq!(back.keys(), d.keys());
        for (k, r) in d.records() {
            let b = back.record(k).unwrap();
            assert!((l2_norm(&b.embedding) - 1.0).abs() < 1e-9);
            assert!(r.embedding.iter().zip(&b.embedding).all(|(x, y)| (x - y).abs() < 1e-12));
            assert!(r.landmarks.points().iter().zip(b.landmarks.points()).all(|(p, q)| {
                (p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12
            }));
        }
    }

    #[test]
    fn loader_reports_schema_and_join_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (e, l) = (dir.path().join("e.csv"), dir.path().join("l.csv"));
        write_csv(&tiny(), &e, &l).unwrap();
        let lm_header = std::fs::read_to_string(&l).unwrap().lines().next().unwrap().to_string();

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        let msg = load_embeddings(&e, &empty).unwrap_err().to_string();
        assert!(msg.contains("unjoined keys") && msg.contains("(id000, emo0, pose0)"), "{msg}");
        std::fs::write(&empty, format!("{lm_header}\n")).unwrap();
        assert!(load_embeddings(&e, &empty).unwrap_err().to_string().contains("unjoined keys"));

        let mut text = std::fs::read_to_string(&e).unwrap();
        let third = text.lines().nth(2).unwrap().to_string();
        text = text.replacen(&third, &format!("{third},0.5"), 1);
        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, text).unwrap();
        let msg = load_embeddings(&ragged, &l).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("ragged row with 9 values, header declares 8"), "{msg}");
    }
}
