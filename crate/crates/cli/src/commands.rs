use crate::output::{write_csv, write_text, CliError, CliResult};
use crate::plots;
use crate::{AugmentArgs, Cli, Command, DataArgs, EvalArgs, GradcheckArgs, ModelArgs, PoolingArg, PretrainArgs, SubsetArg, SynthArgs, TrainArgs};
use fra_core::checkpoint::Checkpoint;
use fra_core::combiner::Pooling;
use fra_core::config::{DataSource, RunConfig};
use fra_core::data::{generate_synthetic, make_batch, write_csv as write_dataset, write_factor_truth, Dataset, SampleKey, SplitSpec};
use fra_core::eval::{run_protocol, EvalReport, Target};
use fra_core::gradcheck::CheckOptions;
use fra_core::model::{assemble_batch, FraModel};
use fra_core::objective::LossBreakdown;
use fra_core::run::{pretrain, steps_per_epoch, train_from_config};
use fra_core::train::{moving_average, TrainState};
use std::path::{Path, PathBuf};

const LOSS_COLUMNS: [&str; 5] = ["bce", "triplet_pose", "triplet_identity", "triplet_emotion", "total"];

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Pretrain(a) => pretrain_cmd(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Augment(a) => augment(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

// ---------------------------------------------------------------------------
// Configuration assembly

fn base_config(cli: &Cli, fallback: Option<&RunConfig>) -> CliResult<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::from_json_file(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_all_seeds(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if d.embeddings.is_some() || d.landmarks.is_some() {
        cfg.data.source = DataSource::Files;
        cfg.data.embeddings = d.embeddings.clone().or(cfg.data.embeddings.take());
        cfg.data.landmarks = d.landmarks.clone().or(cfg.data.landmarks.take());
    }
    if d.factor_truth.is_some() {
        cfg.data.factor_truth = d.factor_truth.clone();
    }
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(d) = m.dropout {
        cfg.model.combiner.dropout = d;
    }
    if let Some(p) = m.pooling {
        cfg.model.combiner.pooling = match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Flatten => Pooling::Flatten,
        };
    }
}

fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Runtime(format!("cannot create output directory {}: {e}", cfg.out.display())))?;
    Ok(cfg.out.clone())
}

fn dataset_and_split(cfg: &RunConfig) -> CliResult<(Dataset, SplitSpec)> {
    let ds = cfg.load_dataset()?;
    let split = cfg.split(&ds)?;
    Ok((ds, split))
}

/// Loads a checkpoint and builds the run configuration around it; the model
/// architecture always comes from the checkpoint.
fn with_checkpoint(cli: &Cli, path: &Path, data: &DataArgs) -> CliResult<(Checkpoint, String, RunConfig)> {
    let (ckpt, id) = Checkpoint::load(path)?;
    let mut cfg = base_config(cli, Some(&ckpt.config))?;
    cfg.model = ckpt.config.model.clone();
    apply_data(&mut cfg, data);
    cfg.validate()?;
    Ok((ckpt, id, cfg))
}

// ---------------------------------------------------------------------------
// Shared writers

fn f(v: f64) -> String {
    v.to_string()
}

fn loss_cells(l: &LossBreakdown) -> Vec<String> {
    [l.bce, l.triplet_pose, l.triplet_identity, l.triplet_emotion, l.total].map(f).to_vec()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn write_loss_files(out: &Path, state: &TrainState) -> CliResult<()> {
    let mut h = header(&["step"]);
    h.extend(header(&LOSS_COLUMNS));
    let rows: Vec<Vec<String>> = state
        .history
        .iter()
        .enumerate()
        .map(|(i, l)| std::iter::once(i.to_string()).chain(loss_cells(l)).collect())
        .collect();
    write_csv(&out.join("loss.csv"), &h, &rows, 0)?;
    let rows: Vec<Vec<String>> = state
        .val_history
        .iter()
        .map(|(s, l)| std::iter::once(s.to_string()).chain(loss_cells(l)).collect())
        .collect();
    write_csv(&out.join("val_loss.csv"), &h, &rows, 0)?;
    write_text(&out.join("loss.svg"), &loss_svg(state))
}

fn loss_svg(state: &TrainState) -> String {
    let totals: Vec<f64> = state.history.iter().map(|l| l.total).collect();
    let mut series = vec![(
        "train total".to_string(),
        totals.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect::<Vec<_>>(),
    )];
    let window = 10;
    let ma = moving_average(&totals, window);
    if !ma.is_empty() {
        series.push((
            format!("{window}-step mean"),
            ma.iter().enumerate().map(|(i, &v)| ((i + window - 1) as f64, v)).collect(),
        ));
    }
    if !state.val_history.is_empty() {
        series.push((
            "validation total".to_string(),
            state.val_history.iter().map(|(s, l)| (*s as f64, l.total)).collect(),
        ));
    }
    plots::line_chart("Total loss", "step", "loss", &series)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// synth

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let mut cfg = base_config(cli, None)?;
    let s = &mut cfg.data.synthetic;
    if let Some(v) = a.identities {
        s.identities = v;
    }
    if let Some(v) = a.emotions {
        s.emotions = v;
    }
    if let Some(v) = a.poses {
        s.poses = v;
    }
    if let Some(v) = a.dim {
        s.dim = v;
    }
    if let Some(v) = a.noise_sigma {
        s.noise_sigma = v;
    }
    s.validate().map_err(|e| CliError::Validation(format!("data.synthetic: {e}")))?;
    let ds = generate_synthetic(&cfg.data.synthetic)?;
    let out = prepare_out(&cfg)?;
    let (emb, lm, truth) = (out.join("embeddings.csv"), out.join("landmarks.csv"), out.join("factor_truth.json"));
    write_dataset(&ds, &emb, &lm)?;
    if let Some(t) = ds.factor_truth() {
        write_factor_truth(t, &truth)?;
    }
    let check = fra_core::data::load_embeddings(&emb, &lm)
        .map_err(|e| CliError::Runtime(format!("written dataset failed to reload: {e}")))?;
    if check.len() != ds.len() {
        return Err(CliError::Runtime(format!("wrote {} records, reloaded {}", ds.len(), check.len())));
    }
    println!(
        "wrote {} records ({} identities × {} emotions × {} poses, D={}) to {}",
        ds.len(),
        ds.identities().len(),
        ds.emotions().len(),
        ds.poses().len(),
        ds.dim(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain

fn pretrain_cmd(cli: &Cli, a: &PretrainArgs) -> CliResult<()> {
    let mut cfg = base_config(cli, None)?;
    apply_data(&mut cfg, &a.data);
    cfg.pretrain.steps = a.steps.unwrap_or(if cfg.pretrain.steps == 0 { 200 } else { cfg.pretrain.steps });
    if let Some(v) = a.lr {
        cfg.pretrain.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.pretrain.batch_size = v;
    }
    cfg.validate()?;
    let out = prepare_out(&cfg)?;
    let (ds, split) = dataset_and_split(&cfg)?;
    let mut model = FraModel::init(&cfg.model, cfg.seed)?;
    let history = pretrain(&cfg, &ds, &split, &mut model)?;
    let rows: Vec<Vec<String>> = history.iter().enumerate().map(|(i, v)| vec![i.to_string(), f(*v)]).collect();
    write_csv(&out.join("pretrain_loss.csv"), &header(&["step", "bce"]), &rows, 0)?;
    let pts: Vec<(f64, f64)> = history.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
    write_text(
        &out.join("pretrain_loss.svg"),
        &plots::line_chart("Autoencoder reconstruction", "step", "BCE", &[("BCE".into(), pts)]),
    )?;
    // Joint training continues from these weights with `train --resume`.
    let mut saved = cfg.clone();
    saved.pretrain.steps = 0;
    let state = TrainState::new(&model);
    let id = Checkpoint::capture(&saved, &model, &state)?.save(&out.join("pretrain.ckpt"))?;
    let w = 10.min(history.len());
    println!(
        "pretrained {} steps: BCE {:.6} → {:.6} ({}-step means); checkpoint {} ({id})",
        history.len(),
        mean(&history[..w]),
        mean(&history[history.len() - w..]),
        w,
        out.join("pretrain.ckpt").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let mut cfg = base_config(cli, resume.as_ref().map(|(c, _)| &c.config))?;
    if let Some((c, _)) = &resume {
        cfg.model = c.config.model.clone();
    }
    apply_data(&mut cfg, &a.data);
    if resume.is_none() {
        apply_model(&mut cfg, &a.model);
    } else if a.model.dropout.is_some() || a.model.pooling.is_some() {
        return Err(CliError::Validation("model flags cannot change a resumed checkpoint's architecture".into()));
    }
    let o = &mut cfg.optim;
    if let Some(v) = a.steps {
        o.steps = v;
    }
    if let Some(v) = a.lr {
        o.lr = v;
    }
    if let Some(v) = a.momentum {
        o.momentum = v;
    }
    if let Some(v) = a.batch_size {
        o.batch_size = v;
    }
    if let Some(v) = a.clip_norm {
        o.clip_norm = Some(v);
    }
    if let Some(v) = a.eval_every {
        o.eval_every = v;
    }
    if let Some(v) = a.margin {
        cfg.margin = v;
    }
    if let Some(v) = a.pretrain_steps {
        cfg.pretrain.steps = v;
    }
    cfg.validate()?;
    let out = prepare_out(&cfg)?;
    let (ds, split) = dataset_and_split(&cfg)?;
    if let Some(e) = a.epochs {
        cfg.optim.steps = e * steps_per_epoch(&ds, &split, cfg.optim.batch_size);
    }
    let resume_state = match &resume {
        Some((c, _)) => {
            let model = c.model()?;
            let state = c.train_state()?;
            if state.step > cfg.optim.steps {
                return Err(CliError::Validation(format!(
                    "optim.steps: {} is below the checkpoint's step {}",
                    cfg.optim.steps, state.step
                )));
            }
            Some((model, state))
        }
        None => None,
    };
    let start = resume_state.as_ref().map_or(0, |(_, s)| s.step);
    let every = cfg.optim.eval_every.clamp(1, 50);
    let total = cfg.optim.steps;
    let outcome = train_from_config(&cfg, &ds, &split, resume_state, |step, l| {
        if (step + 1) % every == 0 || step + 1 == total {
            eprintln!("step {:>6}/{total}  {l}", step + 1);
        }
    })?;
    write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))?;
    if !outcome.pretrain_history.is_empty() {
        let rows: Vec<Vec<String>> = outcome
            .pretrain_history
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), f(*v)])
            .collect();
        write_csv(&out.join("pretrain_loss.csv"), &header(&["step", "bce"]), &rows, 0)?;
    }
    write_loss_files(&out, &outcome.state)?;
    let final_id = Checkpoint::capture(&cfg, &outcome.model, &outcome.state)?.save(&out.join("final.ckpt"))?;
    println!("final checkpoint {} ({final_id}) at step {}", out.join("final.ckpt").display(), outcome.state.step);
    if outcome.best.is_none() && cfg.optim.eval_every > 0 {
        eprintln!("warning: no validation ran; the val split needs two identities with a feasible batch");
    }
    if let Some(best) = &outcome.best {
        let mut model = outcome.model.clone();
        model.set_params(&best.params)?;
        let mut state = TrainState::new(&model);
        state.step = best.step;
        state.history = outcome.state.history[..best.step as usize].to_vec();
        state.val_history = outcome.state.val_history.iter().filter(|(s, _)| *s <= best.step).copied().collect();
        let id = Checkpoint::capture(&cfg, &model, &state)?.save(&out.join("best.ckpt"))?;
        println!(
            "best validation total {:.6} at step {}: {} ({id})",
            best.loss.total,
            best.step,
            out.join("best.ckpt").display()
        );
    }
    let totals: Vec<f64> = outcome.state.history[start as usize..].iter().map(|l| l.total).collect();
    if !totals.is_empty() {
        let w = 10.min(totals.len());
        println!(
            "total loss {}-step means: first {:.6}, last {:.6}",
            w,
            mean(&totals[..w]),
            mean(&totals[totals.len() - w..])
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// augment

fn augment(cli: &Cli, a: &AugmentArgs) -> CliResult<()> {
    let (ckpt, id, cfg) = with_checkpoint(cli, &a.checkpoint, &a.data)?;
    let out = prepare_out(&cfg)?;
    let ds = cfg.load_dataset()?;
    if ds.dim() != cfg.model.combiner.face_dim {
        return Err(CliError::Validation(format!(
            "checkpoint expects embeddings of length {}, dataset has {}",
            cfg.model.combiner.face_dim,
            ds.dim()
        )));
    }
    let model = ckpt.model()?;
    let poses: Vec<String> = match &a.poses {
        None => ds.poses().to_vec(),
        Some(list) => {
            for p in list {
                if !ds.poses().contains(p) {
                    return Err(CliError::Validation(format!(
                        "unknown pose label `{p}`; known labels: {}",
                        ds.poses().join(", ")
                    )));
                }
            }
            list.clone()
        }
    };
    let identities: Vec<String> = match a.subset {
        SubsetArg::All => ds.identities().to_vec(),
        s => {
            let split = cfg.split(&ds)?;
            match s {
                SubsetArg::Train => split.train,
                SubsetArg::Val => split.val,
                _ => split.test,
            }
        }
    };
    let mut pairs = Vec::new();
    for i in &identities {
        for base in ds.keys_of_identity(i) {
            for p in &poses {
                let target = SampleKey::new(&base.identity, &base.emotion, p);
                if ds.get(&target).is_none() {
                    return Err(CliError::Validation(format!(
                        "no landmarks for target {target}; the dataset lacks that sample"
                    )));
                }
                pairs.push((base.clone(), target));
            }
        }
    }
    let generated = model.augment(&ds, &pairs, cfg.model.stamp_radius)?;
    let mut h = header(&["identity", "emotion", "pose", "base_pose", "self_augmented"]);
    h.extend((0..ds.dim()).map(|j| format!("e{j}")));
    let rows: Vec<Vec<String>> = pairs
        .iter()
        .zip(&generated)
        .map(|((b, t), v)| {
            let mut r = vec![
                t.identity.clone(),
                t.emotion.clone(),
                t.pose.clone(),
                b.pose.clone(),
                (b == t).to_string(),
            ];
            r.extend(v.iter().map(|x| f(*x)));
            r
        })
        .collect();
    let path = out.join(&a.output);
    write_csv(&path, &h, &rows, 5)?;
    let selfs = pairs.iter().filter(|(b, t)| b == t).count();
    println!(
        "wrote {} augmented embeddings ({} samples × {} poses, {selfs} self-augmentations) to {} using checkpoint {id}",
        rows.len(),
        rows.len() / poses.len().max(1),
        poses.len(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let (ckpt, id, mut cfg) = with_checkpoint(cli, &a.checkpoint, &a.data)?;
    if let Some(s) = a.split_seed {
        cfg.split.seed = s;
    }
    if let Some(h) = a.holdout_fraction {
        cfg.eval.holdout_fraction = h;
    }
    cfg.validate()?;
    let out = prepare_out(&cfg)?;
    let (ds, split) = dataset_and_split(&cfg)?;
    let model = ckpt.model()?;
    let mut protocol = cfg.eval.clone();
    protocol.stamp_radius = cfg.model.stamp_radius;
    let report = run_protocol(&ds, &split, &model, &id, &protocol)?;
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_report_tables(&out, &report)?;
    if let Ok(state) = ckpt.train_state() {
        if !state.history.is_empty() {
            write_text(&out.join("loss.svg"), &loss_svg(&state))?;
        }
    }
    print_report(&report);
    Ok(())
}

fn write_report_tables(out: &Path, report: &EvalReport) -> CliResult<()> {
    for t in Target::ALL {
        let name = t.name();
        if let Some(roc) = report.roc.get(&t) {
            let rows: Vec<Vec<String>> = roc
                .macro_points
                .iter()
                .map(|p| vec![f(p.threshold), f(p.fpr), f(p.tpr)])
                .collect();
            write_csv(&out.join(format!("roc_{name}.csv")), &header(&["threshold", "fpr", "tpr"]), &rows, 0)?;
            let mut curves = vec![(
                format!("macro (AUC {:.3})", roc.macro_auc),
                roc.macro_points.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>(),
            )];
            for (class, pts) in &roc.per_class_points {
                curves.push((
                    format!("{class} ({:.3})", roc.per_class_auc[class]),
                    pts.iter().map(|p| (p.fpr, p.tpr)).collect(),
                ));
            }
            write_text(
                &out.join(format!("roc_{name}.svg")),
                &plots::roc_chart(&format!("ROC, {name} (experiment 3 probe)"), &curves),
            )?;
        }
        if let Some(c) = report.confusion.get(&t) {
            let mut h = header(&["label"]);
            h.extend(c.labels.iter().cloned());
            let rows: Vec<Vec<String>> = c
                .labels
                .iter()
                .zip(&c.counts)
                .map(|(l, row)| std::iter::once(l.clone()).chain(row.iter().map(u64::to_string)).collect())
                .collect();
            write_csv(&out.join(format!("confusion_{name}.csv")), &h, &rows, 1)?;
            write_text(
                &out.join(format!("confusion_{name}.svg")),
                &plots::heatmap(&format!("Confusion, {name} (experiment 3 probe)"), &c.labels, &c.counts),
            )?;
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("{:<14}{:>10}{:>10}{:>10}", "experiment", "identity", "pose", "emotion");
    let acc = &r.accuracies;
    for (name, e) in [("1 real", &acc.experiment_1), ("2 generated", &acc.experiment_2), ("3 real+gen", &acc.experiment_3)] {
        println!("{name:<14}{:>10.4}{:>10.4}{:>10.4}", e.identity, e.pose, e.emotion);
    }
    if let Some(o) = &r.oracle {
        println!(
            "oracle cosine: augmented {:.4}, base {:.4}, gain {:+.4}",
            o.augmented_cosine, o.baseline_cosine, o.gain
        );
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

// ---------------------------------------------------------------------------
// gradcheck

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> CliResult<()> {
    let mut cfg = base_config(cli, None)?;
    match a.dropout {
        Some(d) if d > 0.0 => {
            return Err(CliError::Validation(format!(
                "gradcheck refuses dropout {d}: finite differences need a deterministic loss"
            )))
        }
        _ => cfg.model.combiner.dropout = 0.0,
    }
    cfg.validate()?;
    if a.coords == 0 || a.batch_size == 0 {
        return Err(CliError::Validation("--coords and --batch-size must be ≥ 1".into()));
    }
    let out = prepare_out(&cfg)?;
    let (ds, split) = dataset_and_split(&cfg)?;
    let mut model = FraModel::init(&cfg.model, cfg.seed)?;
    model.jitter_biases(0.05, cfg.seed ^ 0xb1a5)?;
    let batch = make_batch(&ds, &split.train, a.batch_size, cfg.seed)?;
    let tensors = assemble_batch(&ds, &batch.items, cfg.model.autoencoder.image_size, cfg.model.stamp_radius)?;
    let opts = CheckOptions {
        step: a.step,
        tol: a.tol,
        abs_floor: a.floor,
        max_coords: Some(a.coords),
        seed: cfg.seed,
    };
    let (report, names) = model.gradcheck(&tensors, cfg.margin, &opts)?;
    let ae = report.coords.iter().filter(|c| names[c.param].starts_with("ae.")).count();
    let json = serde_json::json!({
        "passed": report.passed(),
        "tolerance": report.tol,
        "step": report.step,
        "floor": a.floor,
        "checked": report.checked,
        "autoencoder_coords": ae,
        "combiner_coords": report.checked - ae,
        "branch_crossings": report.branch_crossings,
        "max_rel_err": report.max_rel_err,
        "coords": report.coords.iter().map(|c| serde_json::json!({
            "tensor": names[c.param],
            "index": c.index,
            "analytic": c.analytic,
            "numeric": c.numeric,
            "rel_err": c.rel_err,
        })).collect::<Vec<_>>(),
    });
    write_text(&out.join("gradcheck.json"), &(serde_json::to_string_pretty(&json)? + "\n"))?;
    println!(
        "checked {} coordinates ({ae} autoencoder, {} combiner; {} replaced for crossing a ReLU kink): max relative error {:.3e}, tolerance {:.1e}",
        report.checked,
        report.checked - ae,
        report.branch_crossings,
        report.max_rel_err,
        report.tol
    );
    if report.passed() {
        return Ok(());
    }
    let listing: Vec<String> = report
        .failures
        .iter()
        .map(|c| {
            format!(
                "{}[{}]: analytic {:e}, numeric {:e}, rel err {:.3e}",
                names[c.param], c.index, c.analytic, c.numeric, c.rel_err
            )
        })
        .collect();
    for l in &listing {
        println!("  FAIL {l}");
    }
    Err(CliError::Verification(format!(
        "{} of {} coordinates exceed tolerance {:e}",
        report.failures.len(),
        report.checked,
        report.tol
    )))
}
