//! Classification protocol: linear probes on real, generated and combined
//! embeddings, with ROC curves and confusion matrices.

use crate::data::{Dataset, SampleKey, SplitSpec};
use crate::error::{FraError, Result};
use crate::linalg::gemm;
use crate::model::FraModel;
use crate::tensor::cosine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Label families a probe can predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Identity,
    Pose,
    Emotion,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Identity, Target::Pose, Target::Emotion];

    pub fn name(self) -> &'static str {
        match self {
            Target::Identity => "identity",
            Target::Pose => "pose",
            Target::Emotion => "emotion",
        }
    }

    pub fn label(self, key: &SampleKey) -> &str {
        match self {
            Target::Identity => &key.identity,
            Target::Pose => &key.pose,
            Target::Emotion => &key.emotion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub l2_penalty: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_penalty: 1e-3,
            max_steps: 5000,
            grad_tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    /// `[n_classes × dim]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

struct ProbeProblem<'a> {
    x: &'a [f64],
    y: &'a [usize],
    n: usize,
    d: usize,
    c: usize,
    lambda: f64,
}

impl ProbeProblem<'_> {
    /// Objective and gradient at `theta = [W (c×d) ‖ b (c)]`.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (n, d, c) = (self.n, self.d, self.c);
        let (w, b) = theta.split_at(c * d);
        let mut logits = vec![0.0; n * c];
        for row in logits.chunks_mut(c) {
            row.copy_from_slice(b);
        }
        gemm(n, d, c, self.x, false, w, true, 1.0, &mut logits);
        let mut loss = 0.0;
        for (i, row) in logits.chunks_mut(c).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[self.y[i]];
            softmax_in_place(row);
            row[self.y[i]] -= 1.0;
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        let (gw, gb) = grad.split_at_mut(c * d);
        gemm(c, n, d, &logits, true, self.x, false, 0.0, gw);
        gb.fill(0.0);
        for row in logits.chunks(c) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut reg = 0.0;
        for (g, wv) in gw.iter_mut().zip(w) {
            *g += self.lambda * wv;
            reg += wv * wv;
        }
        loss / n as f64 + 0.5 * self.lambda * reg
    }
}

fn encode_labels(labels: &[String]) -> Result<(Vec<String>, Vec<usize>)> {
    let classes: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(FraError::config(format!(
            "probe needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label from class set"))
        .collect();
    Ok((classes, idx))
}

/// Full-batch Nesterov gradient descent on softmax cross-entropy with
/// `l2_penalty/2·‖W‖²` (bias unpenalized).
pub fn train_probe(embeddings: &[Vec<f64>], labels: &[String], cfg: &ProbeConfig, seed: u64) -> Result<LinearProbe> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(FraError::contract("probe needs one label per embedding"));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(FraError::contract("probe embeddings have mixed lengths"));
    }
    if !(cfg.l2_penalty >= 0.0) {
        return Err(FraError::config("probe l2_penalty must be ≥ 0"));
    }
    let (classes, y) = encode_labels(labels)?;
    let (n, c) = (embeddings.len(), classes.len());
    let x: Vec<f64> = embeddings.iter().flatten().copied().collect();
    let problem = ProbeProblem {
        x: &x,
        y: &y,
        n,
        d,
        c,
        lambda: cfg.l2_penalty,
    };
    // Curvature bound: the softmax Hessian is ≤ ½·mean(‖[x;1]‖²) per class block.
    let mean_sq = x.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).sum::<f64>() / n as f64;
    let lipschitz = 0.5 * mean_sq + cfg.l2_penalty;
    let step = 1.0 / lipschitz;
    let mu = cfg.l2_penalty;
    let momentum = if mu > 0.0 {
        let q = (mu / lipschitz).sqrt();
        (1.0 - q) / (1.0 + q)
    } else {
        0.9
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = c * d + c;
    let mut theta: Vec<f64> = (0..len).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut prev = theta.clone();
    let mut look = vec![0.0; len];
    let mut grad = vec![0.0; len];
    let mut g_here = vec![0.0; len];
    let mut steps = 0;
    while steps < cfg.max_steps {
        for i in 0..len {
            look[i] = theta[i] + momentum * (theta[i] - prev[i]);
        }
        problem.eval(&look, &mut grad);
        prev.copy_from_slice(&theta);
        for i in 0..len {
            theta[i] = look[i] - step * grad[i];
        }
        steps += 1;
        if steps % 10 == 0 {
            problem.eval(&theta, &mut g_here);
            if g_here.iter().map(|v| v * v).sum::<f64>().sqrt() < cfg.grad_tol {
                break;
            }
        }
    }
    let final_loss = problem.eval(&theta, &mut grad);
    let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bias = theta.split_off(c * d);
    Ok(LinearProbe {
        classes,
        weights: theta,
        bias,
        dim: d,
        steps,
        final_loss,
        grad_norm,
    })
}

impl LinearProbe {
    /// Class probabilities, one row per embedding.
    pub fn predict_proba(&self, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let c = self.classes.len();
        embeddings
            .iter()
            .map(|e| {
                if e.len() != self.dim {
                    return Err(FraError::config(format!(
                        "probe expects length {}, got {}",
                        self.dim,
                        e.len()
                    )));
                }
                let mut row: Vec<f64> = (0..c)
                    .map(|k| {
                        self.bias[k]
                            + self.weights[k * self.dim..(k + 1) * self.dim]
                                .iter()
                                .zip(e)
                                .map(|(w, x)| w * x)
                                .sum::<f64>()
                    })
                    .collect();
                softmax_in_place(&mut row);
                Ok(row)
            })
            .collect()
    }

    /// Highest-probability class, ties to the first.
    pub fn predict(&self, embeddings: &[Vec<f64>]) -> Result<Vec<String>> {
        Ok(self
            .predict_proba(embeddings)?
            .iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                self.classes[best].clone()
            })
            .collect())
    }

    pub fn accuracy(&self, embeddings: &[Vec<f64>], labels: &[String]) -> Result<f64> {
        if labels.is_empty() {
            return Err(FraError::contract("accuracy over an empty set"));
        }
        let pred = self.predict(embeddings)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// ROC

/// JSON has no infinity; the opening ROC threshold is written as the string `"inf"`.
mod threshold_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(v.to_string()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(with = "threshold_json")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub per_class_auc: BTreeMap<String, f64>,
    /// Mean of the per-class AUCs.
    pub macro_auc: f64,
    /// Class-averaged curve over shared thresholds.
    pub macro_points: Vec<RocPoint>,
    pub per_class_points: BTreeMap<String, Vec<RocPoint>>,
    pub warnings: Vec<String>,
}

fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// One-vs-rest curve; tied scores move together so the AUC counts ties as ½.
fn one_vs_rest(scores: &[f64], positive: &[bool]) -> Vec<RocPoint> {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: t,
            fpr: fp / n,
            tpr: tp / p,
        });
    }
    pts
}

/// Per-class and macro-averaged one-vs-rest ROC.
///
/// `scores[i][k]` is the score of class `classes[k]` for sample `i`. Classes
/// without both positives and negatives among `labels` are excluded with a warning.
pub fn roc_points(classes: &[String], scores: &[Vec<f64>], labels: &[String]) -> Result<RocReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(FraError::contract("roc needs one score row per label"));
    }
    let mut warnings = Vec::new();
    let mut used = Vec::new();
    for (k, c) in classes.iter().enumerate() {
        let pos = labels.iter().filter(|l| *l == c).count();
        if pos == 0 || pos == labels.len() {
            warnings.push(format!("class `{c}` has no {} in the evaluation labels; excluded from ROC", if pos == 0 { "positives" } else { "negatives" }));
        } else {
            used.push(k);
        }
    }
    for l in labels {
        if !classes.contains(l) {
            warnings.push(format!("label `{l}` is unknown to the scorer"));
        }
    }
    warnings.dedup();
    if used.is_empty() {
        return Err(FraError::input("no class has both positives and negatives"));
    }
    let mut per_class_auc = BTreeMap::new();
    let mut per_class_points = BTreeMap::new();
    for &k in &used {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| *l == classes[k]).collect();
        let pts = one_vs_rest(&s, &pos);
        per_class_auc.insert(classes[k].clone(), trapezoid(&pts));
        per_class_points.insert(classes[k].clone(), pts);
    }
    let macro_auc = per_class_auc.values().sum::<f64>() / per_class_auc.len() as f64;

    let mut thresholds: Vec<f64> = used.iter().flat_map(|&k| scores.iter().map(move |r| r[k])).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut macro_points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for &t in &thresholds {
        let (mut fpr, mut tpr) = (0.0, 0.0);
        for &k in &used {
            let (mut tp, mut fp, mut p, mut n) = (0.0, 0.0, 0.0, 0.0);
            for (r, l) in scores.iter().zip(labels) {
                let hit = r[k] >= t;
                if *l == classes[k] {
                    p += 1.0;
                    tp += f64::from(u8::from(hit));
                } else {
                    n += 1.0;
                    fp += f64::from(u8::from(hit));
                }
            }
            tpr += tp / p;
            fpr += fp / n;
        }
        macro_points.push(RocPoint {
            threshold: t,
            fpr: fpr / used.len() as f64,
            tpr: tpr / used.len() as f64,
        });
    }
    Ok(RocReport {
        per_class_auc,
        macro_auc,
        macro_points,
        per_class_points,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Confusion matrices

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    /// `counts[truth][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn build(classes: &[String], truth: &[String], predicted: &[String]) -> Result<Self> {
        let mut labels: Vec<String> = classes.to_vec();
        for l in truth.iter().chain(predicted) {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
        labels.sort();
        let n = labels.len();
        let mut counts = vec![vec![0u64; n]; n];
        for (t, p) in truth.iter().zip(predicted) {
            let i = labels.binary_search(t).expect("label inserted");
            let j = labels.binary_search(p).expect("label inserted");
            counts[i][j] += 1;
        }
        Ok(Confusion { labels, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub probe: ProbeConfig,
    /// Fraction of each identity's real samples held out for evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub stamp_radius: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            probe: ProbeConfig::default(),
            holdout_fraction: 0.2,
            seed: 0,
            stamp_radius: crate::raster::DEFAULT_STAMP_RADIUS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentAccuracy {
    pub identity: f64,
    pub pose: f64,
    pub emotion: f64,
}

impl ExperimentAccuracy {
    pub fn get(&self, t: Target) -> f64 {
        match t {
            Target::Identity => self.identity,
            Target::Pose => self.pose,
            Target::Emotion => self.emotion,
        }
    }

    fn from_map(m: &BTreeMap<Target, f64>) -> Self {
        ExperimentAccuracy {
            identity: m[&Target::Identity],
            pose: m[&Target::Pose],
            emotion: m[&Target::Emotion],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    /// Probe trained on the real 80%, tested on the real 20%.
    pub experiment_1: ExperimentAccuracy,
    /// Probe trained and tested within the generated set (80/20).
    pub experiment_2: ExperimentAccuracy,
    /// Probe trained on real 80% plus generated, tested on the real 20%.
    pub experiment_3: ExperimentAccuracy,
}

impl Accuracies {
    pub fn cells(&self) -> Vec<f64> {
        [&self.experiment_1, &self.experiment_2, &self.experiment_3]
            .iter()
            .flat_map(|e| Target::ALL.map(|t| e.get(t)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAgreement {
    /// Mean cosine between generated embeddings and the factor-model target.
    pub augmented_cosine: f64,
    /// Mean cosine between the base embeddings and the same targets.
    pub baseline_cosine: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub seed: u64,
    pub split: SplitSpec,
    pub checkpoint_id: String,
    pub probe: String,
    pub l2_penalty: f64,
    pub experiment_2_protocol: String,
    pub roc_and_confusion_source: String,
    pub real_train: usize,
    pub real_heldout: usize,
    pub generated: usize,
    /// Held-out keys shared by experiments 1 and 3.
    pub heldout_keys: Vec<SampleKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub accuracies: Accuracies,
    pub roc: BTreeMap<Target, RocReport>,
    pub confusion: BTreeMap<Target, Confusion>,
    pub oracle: Option<OracleAgreement>,
    pub warnings: Vec<String>,
}

/// Per-group split of `0..groups.len()` into (train, held) index lists, each
/// group contributing `round(fraction·n)` held items (at least one when it has
/// two or more, never all of them).
pub fn stratified_indices(groups: &[&str], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_group {
        idx.shuffle(&mut rng);
        let h = if idx.len() >= 2 {
            ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        held.extend_from_slice(&idx[..h]);
        train.extend_from_slice(&idx[h..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// [`stratified_indices`] over sample keys, grouped by identity.
pub fn stratified_holdout(keys: &[SampleKey], fraction: f64, seed: u64) -> (Vec<SampleKey>, Vec<SampleKey>) {
    let groups: Vec<&str> = keys.iter().map(|k| k.identity.as_str()).collect();
    let (tr, he) = stratified_indices(&groups, fraction, seed);
    (
        tr.into_iter().map(|i| keys[i].clone()).collect(),
        he.into_iter().map(|i| keys[i].clone()).collect(),
    )
}

fn labels_of(keys: &[SampleKey], t: Target) -> Vec<String> {
    keys.iter().map(|k| t.label(k).to_string()).collect()
}

/// Runs experiments 1 to 3 on the test identities of `split`.
pub fn run_protocol(
    dataset: &Dataset,
    split: &SplitSpec,
    model: &FraModel,
    checkpoint_id: &str,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    if dataset.dim() != model.combiner.config.face_dim {
        return Err(FraError::config(format!(
            "dataset embeddings have length {}, checkpoint expects {}",
            dataset.dim(),
            model.combiner.config.face_dim
        )));
    }
    if split.test.is_empty() {
        return Err(FraError::config("split has no test identities"));
    }
    let test_keys: Vec<SampleKey> = split
        .test
        .iter()
        .flat_map(|i| dataset.keys_of_identity(i).iter().cloned())
        .collect();
    let (real_train, held) = stratified_holdout(&test_keys, cfg.holdout_fraction, cfg.seed);
    if held.is_empty() {
        return Err(FraError::config("held-out set is empty; test identities need at least two samples"));
    }

    // one augmentation per (real training sample, other pose of the same identity/emotion)
    let mut pairs = Vec::new();
    for base in &real_train {
        for p in dataset.poses_for(&base.identity, &base.emotion) {
            if p != base.pose {
                pairs.push((base.clone(), SampleKey::new(&base.identity, &base.emotion, p)));
            }
        }
    }
    if pairs.is_empty() {
        return Err(FraError::config("no augmentation pairs: every test sample has a single pose"));
    }
    let generated = model.augment(dataset, &pairs, cfg.stamp_radius)?;
    let gen_keys: Vec<SampleKey> = pairs.iter().map(|(_, t)| t.clone()).collect();

    let emb = |keys: &[SampleKey]| -> Result<Vec<Vec<f64>>> {
        keys.iter().map(|k| Ok(dataset.embedding(k)?.to_vec())).collect()
    };
    let x_train = emb(&real_train)?;
    let x_held = emb(&held)?;

    let gen_groups: Vec<&str> = gen_keys.iter().map(|k| k.identity.as_str()).collect();
    let (g_train, g_test) = stratified_indices(&gen_groups, cfg.holdout_fraction, cfg.seed ^ 0x5eed);

    let mut warnings = Vec::new();
    let mut e1 = BTreeMap::new();
    let mut e2 = BTreeMap::new();
    let mut e3 = BTreeMap::new();
    let mut roc = BTreeMap::new();
    let mut confusion = BTreeMap::new();
    for t in Target::ALL {
        let seed = cfg.seed.wrapping_add(t as u64);
        let y_train = labels_of(&real_train, t);
        let y_held = labels_of(&held, t);

        let p1 = train_probe(&x_train, &y_train, &cfg.probe, seed)?;
        e1.insert(t, p1.accuracy(&x_held, &y_held)?);

        let gx: Vec<Vec<f64>> = g_train.iter().map(|&i| generated[i].clone()).collect();
        let gy: Vec<String> = g_train.iter().map(|&i| t.label(&gen_keys[i]).to_string()).collect();
        let tx: Vec<Vec<f64>> = g_test.iter().map(|&i| generated[i].clone()).collect();
        let ty: Vec<String> = g_test.iter().map(|&i| t.label(&gen_keys[i]).to_string()).collect();
        let acc2 = if tx.is_empty() {
            warnings.push(format!("experiment 2 {}: empty generated test split", t.name()));
            0.0
        } else {
            train_probe(&gx, &gy, &cfg.probe, seed)?.accuracy(&tx, &ty)?
        };
        e2.insert(t, acc2);

        let mut x3 = x_train.clone();
        x3.extend(generated.iter().cloned());
        let mut y3 = y_train.clone();
        y3.extend(gen_keys.iter().map(|k| t.label(k).to_string()));
        let p3 = train_probe(&x3, &y3, &cfg.probe, seed)?;
        e3.insert(t, p3.accuracy(&x_held, &y_held)?);

        let scores = p3.predict_proba(&x_held)?;
        let r = roc_points(&p3.classes, &scores, &y_held)?;
        warnings.extend(r.warnings.iter().map(|w| format!("{} roc: {w}", t.name())));
        roc.insert(t, r);
        confusion.insert(t, Confusion::build(&p3.classes, &y_held, &p3.predict(&x_held)?)?);
    }

    let oracle = match dataset.factor_truth() {
        Some(truth) => {
            let (mut a, mut b) = (0.0, 0.0);
            for ((base, target), g) in pairs.iter().zip(&generated) {
                let o = truth.oracle_target(target)?;
                a += cosine(g, &o);
                b += cosine(dataset.embedding(base)?, &o);
            }
            let n = pairs.len() as f64;
            Some(OracleAgreement {
                augmented_cosine: a / n,
                baseline_cosine: b / n,
                gain: (a - b) / n,
            })
        }
        None => None,
    };

    Ok(EvalReport {
        metadata: EvalMetadata {
            seed: cfg.seed,
            split: split.clone(),
            checkpoint_id: checkpoint_id.to_string(),
            probe: "multinomial logistic regression (linear-kernel stand-in)".into(),
            l2_penalty: cfg.probe.l2_penalty,
            experiment_2_protocol: "probe trained and tested within the generated set, stratified 80/20 by identity".into(),
            roc_and_confusion_source: "experiment 3 probe scored on the real held-out set".into(),
            real_train: real_train.len(),
            real_heldout: held.len(),
            generated: generated.len(),
            heldout_keys: held,
        },
        accuracies: Accuracies {
            experiment_1: ExperimentAccuracy::from_map(&e1),
            experiment_2: ExperimentAccuracy::from_map(&e2),
            experiment_3: ExperimentAccuracy::from_map(&e3),
        },
        roc,
        confusion,
        oracle,
        warnings,
    })
}
