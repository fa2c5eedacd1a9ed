//! Acceptance suite: one test per acceptance criterion.
//!
//! Each test prints a single `[PASS]`/`[FAIL]` line with the measured values
//! (written to the process stdout directly, so it shows without
//! `--nocapture`) and then asserts. Tests hold a shared lock so the timed
//! criteria do not compete for cores.

use fra_core::autodiff::Tape;
use fra_core::checkpoint::Checkpoint;
use fra_core::combiner::{attention, attention_on_tape, multi_head, CombinerConfig, CombinerWeights};
use fra_core::config::RunConfig;
use fra_core::data::{generate_synthetic, make_batch, write_csv, SampleKey, SyntheticSpec};
use fra_core::eval::{roc_points, run_protocol, stratified_holdout, train_probe, EvalReport, Target};
use fra_core::gradcheck::CheckOptions;
use fra_core::model::{assemble_batch, FraModel, ModelConfig};
use fra_core::objective::{total_loss, triplet_term, TripletItem, DEFAULT_MARGIN};
use fra_core::pose::{AutoencoderWeights, PoseLatent};
use fra_core::raster::{BinaryLandmarkImage, DEFAULT_STAMP_RADIUS};
use fra_core::run::train_from_config;
use fra_core::train::{moving_average, pretrain_autoencoder, OptimConfig};
use fra_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line and fails the test when `ok` is false.
fn verdict(criterion: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] {criterion}: {detail}");
    let _ = out.flush();
    assert!(ok, "{criterion}: {detail}");
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    let mut mag = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                let t = a.get2(i, l) * b.get2(l, j);
                c[i * n + j] += t;
                mag[i * n + j] += t.abs();
            }
        }
    }
    (c, mag)
}

fn tiny_run_config(identities: usize, seed: u64) -> RunConfig {
    let cfg: RunConfig = serde_json::from_value(serde_json::json!({
        "data": {"synthetic": {"identities": identities, "emotions": 2, "poses": 3, "dim": 32, "seed": seed}},
        "model": {
            "autoencoder": {"image_size": 16, "latent_dim": 32, "channels": [2, 2, 2]},
            "combiner": {"face_dim": 32, "pose_dim": 32, "patch": 4, "model_dim": 8, "heads": 2,
                         "layers": 1, "ff_dim": 8, "dropout": 0.1}
        },
        "optim": {"steps": 6, "batch_size": 4, "eval_every": 3, "val_batch": 4},
        "seed": seed
    }))
    .unwrap();
    cfg.validate().unwrap();
    cfg
}

// ---------------------------------------------------------------------------

#[test]
fn gradient_integrity() {
    let _g = serial();
    let mut cfg = RunConfig::default();
    cfg.model.combiner.dropout = 0.0;
    let ds = cfg.load_dataset().unwrap();
    let split = cfg.split(&ds).unwrap();
    let train = ds.subset(&split.train).unwrap();
    let batch = make_batch(&train, &split.train, 4, cfg.seed).unwrap();
    let tensors = assemble_batch(&ds, &batch.items, cfg.model.autoencoder.image_size, cfg.model.stamp_radius).unwrap();
    let mut model = FraModel::init(&cfg.model, cfg.seed).unwrap();
    model.jitter_biases(0.05, cfg.seed ^ 0xb1a5).unwrap();
    let opts = CheckOptions {
        step: 1e-5,
        tol: 1e-4,
        abs_floor: 1e-5,
        max_coords: Some(64),
        seed: cfg.seed,
    };
    let start = Instant::now();
    let (report, names) = model.gradcheck(&tensors, DEFAULT_MARGIN, &opts).unwrap();
    let elapsed = start.elapsed();
    let ae = report.coords.iter().filter(|c| names[c.param].starts_with("ae.")).count();
    let comb = report.coords.iter().filter(|c| names[c.param].starts_with("comb.")).count();
    let ok = report.passed() && report.checked >= 64 && ae > 0 && comb > 0 && elapsed < Duration::from_secs(60);
    verdict(
        "gradient integrity",
        ok,
        &format!(
            "{} coords ({ae} autoencoder, {comb} combiner, {} kink replacements), max rel err {:.2e} < 1e-4, h=1e-5, {:.1}s < 60s",
            report.checked,
            report.branch_crossings,
            report.max_rel_err,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn attention_correctness() {
    let _g = serial();
    const CASES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let (mut worst_sum, mut worst_env, mut worst_mh, mut worst_perm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let pool_cfg = CombinerConfig {
        face_dim: 16,
        pose_dim: 16,
        patch: 4,
        model_dim: 8,
        heads: 2,
        layers: 2,
        ff_dim: 8,
        dropout: 0.0,
        positional: false,
        ..CombinerConfig::default()
    };
    for case in 0..CASES {
        let (t, s, dk, dv) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8));
        let scale = [0.5, 3.0, 30.0][case % 3];
        let (q, k, v) = (random(&mut rng, &[1, t, dk], scale), random(&mut rng, &[1, s, dk], scale), random(&mut rng, &[1, s, dv], 2.0));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let (out, w) = attention_on_tape(&mut tape, qv, kv, vv).unwrap();
        for row in tape.value(w).data().chunks(s) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for row in tape.value(out).data().chunks(dv) {
            for (c, &x) in row.iter().enumerate() {
                let col: Vec<f64> = (0..s).map(|j| v.data()[j * dv + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                worst_env = worst_env.max(lo - x).max(x - hi);
            }
        }

        let d = rng.random_range(1..8);
        let x = random(&mut rng, &[t, d], 2.0);
        let ws: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[d, d], 1.0)).collect();
        let mh = multi_head(&x, 1, &ws[0], &ws[1], &ws[2], &Tensor::eye(d)).unwrap();
        let proj = |w: &Tensor| {
            let (p, _) = matmul_oracle(&x, w);
            Tensor::new(vec![t, d], p).unwrap()
        };
        let single = attention(&proj(&ws[0]), &proj(&ws[1]), &proj(&ws[2])).unwrap();
        for (a, b) in mh.data().iter().zip(single.data()) {
            worst_mh = worst_mh.max((a - b).abs() / b.abs().max(1.0));
        }

        let comb = CombinerWeights::init(pool_cfg.clone(), case as u64).unwrap();
        let tokens = random(&mut rng, &[pool_cfg.tokens().unwrap(), pool_cfg.model_dim], 2.0);
        let mut order: Vec<usize> = (0..tokens.shape()[0]).collect();
        order.shuffle(&mut rng);
        let permuted = Tensor::from_rows(&order.iter().map(|&i| tokens.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = comb.encode_and_mean_pool(&tokens).unwrap();
        let b = comb.encode_and_mean_pool(&permuted).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            worst_perm = worst_perm.max((p - q).abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = worst_sum < 1e-9 && worst_env <= 1e-12 && worst_mh < 1e-12 && worst_perm < 1e-9 && elapsed < Duration::from_secs(10);
    verdict(
        "attention correctness",
        ok,
        &format!(
            "{CASES} cases in {:.2}s < 10s; softmax row-sum dev {worst_sum:.1e} < 1e-9, V-envelope excess {:.1e} ≤ 1e-12, \
             multi_head(h=1, W^O=I) rel dev {worst_mh:.1e} < 1e-12, pooled permutation dev {worst_perm:.1e} < 1e-9",
            elapsed.as_secs_f64(),
            worst_env.max(0.0)
        ),
    );
}

#[test]
fn loss_semantics() {
    let _g = serial();
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let a = e(0);
    let anti: Vec<f64> = a.iter().map(|x| -x).collect();
    let m = DEFAULT_MARGIN;
    // (positive, negative, expected) with d(a,p) and d(a,n) at the distance extremes 0, 2 and 4
    let cases = [
        (a.clone(), anti.clone(), 6.0),
        (a.clone(), e(1), 8.0),
        (a.clone(), a.clone(), 10.0),
        (e(1), anti.clone(), 8.0),
        (e(1), e(2), 10.0),
        (anti.clone(), a.clone(), 14.0),
        (anti.clone(), anti.clone(), 10.0),
    ];
    let mut worst = 0.0f64;
    for (p, n, want) in &cases {
        let got = triplet_term(&[a.clone()], &[p.clone()], &[n.clone()], m).unwrap();
        worst = worst.max((got - want).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = |rng: &mut ChaCha8Rng| fra_core::tensor::normalized(&random(rng, &[6], 1.0).into_data());
    let items: Vec<TripletItem> = (0..5)
        .map(|_| TripletItem {
            anchor: unit(&mut rng),
            positive: unit(&mut rng),
            neg_pose: unit(&mut rng),
            neg_identity: unit(&mut rng),
            neg_emotion: unit(&mut rng),
        })
        .collect();
    let img = BinaryLandmarkImage::from_cells(8, 8, (0..64).map(|i| u8::from(i % 5 == 0)).collect()).unwrap();
    let recon = Tensor::new(vec![8, 8], (0..64).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
    let l = total_loss(&items, &[(recon, img.clone())], m).unwrap();
    let sum_dev = (l.total - (l.bce + l.triplet_pose + l.triplet_identity + l.triplet_emotion)).abs();

    let sat = TripletItem {
        anchor: a.clone(),
        positive: a.clone(),
        neg_pose: anti.clone(),
        neg_identity: anti.clone(),
        neg_emotion: anti.clone(),
    };
    // squared distances of unit vectors are at most 4, so the goal state needs margin ≤ 4
    let satisfied = total_loss(&[sat], &[(img.to_tensor(), img)], 4.0).unwrap().total;

    let ok = worst <= 1e-12 && sum_dev <= 1e-12 && satisfied <= 1e-6;
    verdict(
        "loss semantics",
        ok,
        &format!(
            "{} extreme-distance triplets at margin {m} max dev {worst:.1e} ≤ 1e-12; total − component sum {sum_dev:.1e} ≤ 1e-12; \
             satisfied-state total {satisfied:.2e} ≤ 1e-6",
            cases.len()
        ),
    );
}

#[test]
fn oracle_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut mm, mut conv, mut bce, mut auc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (m, k, n) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let (a, b) = (random(&mut rng, &[m, k], 1.0), random(&mut rng, &[k, n], 1.0));
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        let (want, mag) = matmul_oracle(&a, &b);
        for ((g, w), s) in tape.value(c).data().iter().zip(&want).zip(&mag) {
            mm = mm.max((g - w).abs() / s.max(f64::MIN_POSITIVE));
        }

        let (ch, co, kk, stride, pad) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=2), rng.random_range(0..=1));
        // whole number of strides past the kernel, so every output position is exact
        let h = kk + stride * rng.random_range(0..=2usize);
        let x = random(&mut rng, &[1, ch, h, h], 1.0);
        let w = random(&mut rng, &[co, ch, kk, kk], 1.0);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let oh = (h + 2 * pad - kk) / stride + 1;
        for o in 0..co {
            for r in 0..oh {
                for q in 0..oh {
                    let (mut sum, mut mag) = (0.0, 0.0);
                    for c in 0..ch {
                        for u in 0..kk {
                            for v in 0..kk {
                                let (yy, xx) = ((r * stride + u) as isize - pad as isize, (q * stride + v) as isize - pad as isize);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < h {
                                    let t = x.data()[(c * h + yy as usize) * h + xx as usize] * w.data()[((o * ch + c) * kk + u) * kk + v];
                                    sum += t;
                                    mag += t.abs();
                                }
                            }
                        }
                    }
                    let got = tape.value(y).data()[(o * oh + r) * oh + q];
                    conv = conv.max((got - sum).abs() / f64::max(mag, f64::MIN_POSITIVE));
                }
            }
        }

        let cells = rng.random_range(1..=64);
        let p: Vec<f64> = (0..cells).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<u8> = (0..cells).map(|_| rng.random_range(0..=1)).collect();
        let img = BinaryLandmarkImage::from_cells(8, 8, (0..64).map(|i| if i < cells { y[i] } else { 0 }).collect()).unwrap();
        let mut full = p.clone();
        full.resize(64, 0.5);
        let got = fra_core::pose::bce_loss(&Tensor::new(vec![8, 8], full.clone()).unwrap(), &img).unwrap();
        let mut want = 0.0;
        for (i, &q) in full.iter().enumerate() {
            let q = q.clamp(1e-7, 1.0 - 1e-7);
            want += if img.cells()[i] == 1 { -q.ln() } else { -(1.0 - q).ln() };
        }
        bce = bce.max((got - want / 64.0).abs());

        let classes: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let n = rng.random_range(6..40);
        let labels: Vec<String> = (0..n).map(|i| classes[i % 3].clone()).collect();
        // coarse scores force ties, which count one half
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| f64::from(rng.random_range(0..6u8)) / 6.0).collect()).collect();
        let roc = roc_points(&classes, &scores, &labels).unwrap();
        for (k, cls) in classes.iter().enumerate() {
            let (mut wins, mut pairs) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == *cls && labels[j] != *cls {
                        pairs += 1.0;
                        wins += match scores[i][k].partial_cmp(&scores[j][k]).unwrap() {
                            std::cmp::Ordering::Greater => 1.0,
                            std::cmp::Ordering::Equal => 0.5,
                            std::cmp::Ordering::Less => 0.0,
                        };
                    }
                }
            }
            auc = auc.max((roc.per_class_auc[cls] - wins / pairs).abs());
        }
    }
    let ok = mm <= 1e-12 && conv <= 1e-12 && bce <= 1e-12 && auc <= 1e-6;
    verdict(
        "oracle equivalence",
        ok,
        &format!(
            "200 random instances each: matmul vs triple loop rel {mm:.1e} ≤ 1e-12, conv2d vs quadruple loop rel {conv:.1e} ≤ 1e-12, \
             BCE vs direct sum {bce:.1e} ≤ 1e-12, AUC vs pair counting {auc:.1e} ≤ 1e-6"
        ),
    );
}

#[test]
fn end_to_end_directional() {
    let _g = serial();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = RunConfig::from_json_file(&path).unwrap();
    let s = &cfg.data.synthetic;
    assert_eq!((s.identities, s.emotions, s.poses), (20, 4, 4));
    let ds = cfg.load_dataset().unwrap();
    let split = cfg.split(&ds).unwrap();
    let start = Instant::now();
    let outcome = train_from_config(&cfg, &ds, &split, None, |_, _| {}).unwrap();
    let train_time = start.elapsed();
    let report = run_protocol(&ds, &split, &outcome.model, "acceptance", &cfg.eval).unwrap();
    let acc = &report.accuracies;
    let oracle = report.oracle.as_ref().expect("synthetic data carries factor truth");
    let a = acc.experiment_3.identity >= acc.experiment_1.identity;
    let b = acc.experiment_2.pose >= 0.8;
    let c = oracle.gain >= 0.05;
    let ok = a && b && c && train_time <= Duration::from_secs(300);
    verdict(
        "end-to-end directional",
        ok,
        &format!(
            "{} steps in {:.0}s ≤ 300s; (a) exp3 identity {:.3} ≥ exp1 identity {:.3}: {a}; (b) exp2 pose {:.3} ≥ 0.8: {b}; \
             (c) augmented cosine {:.4} − baseline {:.4} = {:.4} ≥ 0.05: {c}",
            cfg.optim.steps,
            train_time.as_secs_f64(),
            acc.experiment_3.identity,
            acc.experiment_1.identity,
            acc.experiment_2.pose,
            oracle.augmented_cosine,
            oracle.baseline_cosine,
            oracle.gain
        ),
    );
}

#[test]
fn autoencoder_convergence() {
    let _g = serial();
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let ids = ds.identities().to_vec();
    let (fit_ids, held_ids) = ids.split_at(ids.len() / 2);
    let pool: Vec<SampleKey> = fit_ids.iter().flat_map(|i| ds.keys_of_identity(i).iter().cloned()).collect();
    let fit: Vec<SampleKey> = pool.iter().step_by(pool.len() / 32).take(32).cloned().collect();
    let cfg = ModelConfig::default().autoencoder;
    let size = cfg.image_size;
    let image = |k: &SampleKey| ds.image(k, size, DEFAULT_STAMP_RADIUS).unwrap();
    let images: Vec<BinaryLandmarkImage> = fit.iter().map(image).collect();
    let mut ae = AutoencoderWeights::init(cfg, 0).unwrap();
    let optim = OptimConfig {
        lr: 0.02,
        momentum: 0.9,
        batch_size: 32,
        ..OptimConfig::default()
    };
    let history = pretrain_autoencoder(&mut ae, &images, &optim, 200, 1).unwrap();
    let ma = moving_average(&history, 10);
    let rises = ma.windows(2).filter(|w| w[1] >= w[0]).count();

    let latents = |keys: &[SampleKey]| -> Vec<PoseLatent> {
        let imgs: Vec<BinaryLandmarkImage> = keys.iter().map(image).collect();
        ae.encode_batch(&imgs).unwrap()
    };
    let fit_lat = latents(&fit);
    let poses = ds.poses().to_vec();
    let centroids: Vec<Vec<f64>> = poses
        .iter()
        .map(|p| {
            let members: Vec<&PoseLatent> = fit.iter().zip(&fit_lat).filter(|(k, _)| &k.pose == p).map(|(_, l)| l).collect();
            let mut c = vec![0.0; members[0].0.len()];
            for m in &members {
                for (ci, v) in c.iter_mut().zip(&m.0) {
                    *ci += v / members.len() as f64;
                }
            }
            c
        })
        .collect();
    let held: Vec<SampleKey> = held_ids.iter().flat_map(|i| ds.keys_of_identity(i).iter().cloned()).collect();
    let held_lat = latents(&held);
    let correct = held
        .iter()
        .zip(&held_lat)
        .filter(|(k, l)| {
            let dist = |c: &Vec<f64>| c.iter().zip(&l.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..poses.len()).min_by(|&i, &j| dist(&centroids[i]).total_cmp(&dist(&centroids[j]))).unwrap();
            poses[best] == k.pose
        })
        .count();
    let accuracy = correct as f64 / held.len() as f64;
    let ok = rises == 0 && accuracy >= 0.9;
    verdict(
        "autoencoder convergence",
        ok,
        &format!(
            "200 steps on a fixed 32-image batch: BCE {:.4} → {:.4}, 10-step moving average non-decreasing {rises} times (need 0); \
             held-out nearest-centroid pose accuracy {accuracy:.3} on {} images of unseen identities ≥ 0.9",
            history[0],
            history[199],
            held.len()
        ),
    );
}

#[test]
fn determinism_and_persistence() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> (Vec<u8>, String, Vec<u8>, Vec<u8>) {
        let mut cfg = tiny_run_config(8, 3);
        cfg.split.counts = Some((4, 2, 2));
        let ds = cfg.load_dataset().unwrap();
        let split = cfg.split(&ds).unwrap();
        let out = train_from_config(&cfg, &ds, &split, None, |_, _| {}).unwrap();
        let ckpt = Checkpoint::capture(&cfg, &out.model, &out.state).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let id = fra_core::checkpoint::content_id(&bytes);
        let report = run_protocol(&ds, &split, &out.model, &id, &cfg.eval).unwrap();
        let (e, l) = (dir.path().join(format!("{tag}_e.csv")), dir.path().join(format!("{tag}_l.csv")));
        write_csv(&ds, &e, &l).unwrap();
        let loss_csv = dir.path().join(format!("{tag}_loss.csv"));
        let mut w = csv::Writer::from_path(&loss_csv).unwrap();
        for h in &out.state.history {
            w.write_record([h.bce, h.triplet_pose, h.triplet_identity, h.triplet_emotion, h.total].map(|v| v.to_string())).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let mut csvs = std::fs::read(&e).unwrap();
        csvs.extend(std::fs::read(&l).unwrap());
        (bytes, serde_json::to_string(&report).unwrap(), csvs, std::fs::read(&loss_csv).unwrap())
    };
    let a = run("a");
    let b = run("b");
    let same_ckpt = a.0 == b.0;
    let same_report = a.1 == b.1;
    let same_csv = a.2 == b.2 && a.3 == b.3;

    let ckpt = Checkpoint::from_bytes(&a.0).unwrap();
    let path = dir.path().join("x.ckpt");
    ckpt.save(&path).unwrap();
    let (loaded, _) = Checkpoint::load(&path).unwrap();
    let tensors_equal = ckpt.tensors.len() == loaded.tensors.len()
        && ckpt.tensors.iter().zip(loaded.tensors.iter()).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bitwise_eq(t2));
    let bytes_equal = loaded.to_bytes().unwrap() == a.0;
    let parsed: EvalReport = serde_json::from_str(&a.1).unwrap();
    let report_round_trip = serde_json::to_string(&parsed).unwrap() == a.1;

    let ok = same_ckpt && same_report && same_csv && tensors_equal && bytes_equal && report_round_trip;
    verdict(
        "determinism & persistence",
        ok,
        &format!(
            "rerun identical: checkpoint {same_ckpt} ({} bytes), report {same_report}, CSVs {same_csv}; \
             save→load bitwise over {} tensors: {tensors_equal}, re-serialized bytes equal: {bytes_equal}, report JSON round trip: {report_round_trip}",
            a.0.len(),
            ckpt.tensors.len()
        ),
    );
}

#[test]
fn protocol_fidelity() {
    let _g = serial();
    let mut cfg = tiny_run_config(140, 9);
    cfg.optim.steps = 2;
    let ds = cfg.load_dataset().unwrap();
    let split = cfg.split(&ds).unwrap();
    let counts = (split.train.len(), split.val.len(), split.test.len());
    let disjoint = split.is_partition_of(ds.identities());

    // every key a training step can touch comes from the training identities
    let train_set = ds.subset(&split.train).unwrap();
    let mut leaked = 0;
    let mut audited = 0;
    for step in 0..200 {
        let b = make_batch(&train_set, &split.train, 32, step).unwrap();
        for it in &b.items {
            for k in [&it.base, &it.target, &it.negatives.pose, &it.negatives.identity, &it.negatives.emotion] {
                audited += 1;
                if !split.train.contains(&k.identity) {
                    leaked += 1;
                }
            }
        }
    }

    let outcome = train_from_config(&cfg, &ds, &split, None, |_, _| {}).unwrap();
    let report = run_protocol(&ds, &split, &outcome.model, "fidelity", &cfg.eval).unwrap();
    let test_keys: Vec<SampleKey> = split.test.iter().flat_map(|i| ds.keys_of_identity(i).iter().cloned()).collect();
    let (real_train, held) = stratified_holdout(&test_keys, cfg.eval.holdout_fraction, cfg.eval.seed);
    let same_heldout = held == report.metadata.heldout_keys && real_train.len() == report.metadata.real_train;
    let held_fraction = held.len() as f64 / test_keys.len() as f64;

    // experiment 1 recomputed on the independently derived held-out set; experiment 3
    // scores the same keys, so its confusion counts must cover exactly those samples
    let emb = |keys: &[SampleKey]| keys.iter().map(|k| ds.embedding(k).unwrap().to_vec()).collect::<Vec<_>>();
    let mut exp1_matches = true;
    for t in Target::ALL {
        let labels = |keys: &[SampleKey]| keys.iter().map(|k| t.label(k).to_string()).collect::<Vec<_>>();
        let probe = train_probe(&emb(&real_train), &labels(&real_train), &cfg.eval.probe, cfg.eval.seed.wrapping_add(t as u64)).unwrap();
        let acc = probe.accuracy(&emb(&held), &labels(&held)).unwrap();
        exp1_matches &= acc == report.accuracies.experiment_1.get(t);
        exp1_matches &= report.confusion[&t].total() == held.len() as u64;
    }
    let json: serde_json::Value = serde_json::to_value(&report.accuracies).unwrap();
    let cells = report.accuracies.cells();
    let grid = ["experiment_1", "experiment_2", "experiment_3"]
        .iter()
        .all(|e| ["identity", "pose", "emotion"].iter().all(|t| json[e][t].is_f64()))
        && json.as_object().unwrap().len() == 3;
    let nine = cells.len() == 9 && cells.iter().all(|c| (0.0..=1.0).contains(c)) && grid;

    let ok = counts == (99, 11, 30) && disjoint && leaked == 0 && audited > 0 && same_heldout && exp1_matches && nine
        && (held_fraction - 0.2).abs() < 0.05;
    verdict(
        "protocol fidelity",
        ok,
        &format!(
            "split {counts:?} disjoint and exhaustive: {disjoint}; {audited} training-batch keys audited, {leaked} outside train; \
             held-out set ({} keys, {:.1}% of test samples) shared by experiments 1 and 3: {}; {} accuracy cells in a 3×3 grid",
            held.len(),
            100.0 * held_fraction,
            same_heldout && exp1_matches,
            cells.len()
        ),
    );
}
