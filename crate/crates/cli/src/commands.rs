use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use sparsemod::datagen::{build_dataset, kl_divergence, pdf_table as make_pdf, store, Dataset, PdfKind};
use sparsemod::lwe::{run_attack, RecoveryResult};
use sparsemod::model::checkpoint::Checkpoint;
use sparsemod::trainer::{
    curriculum_train, evaluate, predict_samples, stratified_eval, Control, EvalPlan, MetricsRecord, ModelPredictor,
    Trainer,
};
use sparsemod::Modulus;

use crate::config::{ExperimentConfig, Resolved};
use crate::report::{pct, samples, RunSummary, TextTable};

pub const DATA_FILE: &str = "data.smds";
pub const CHECKPOINT_FILE: &str = "checkpoint.smck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

pub fn pdf_table(kind: &str, n_terms: usize, q: u64, json: bool) -> Result<()> {
    let kind: PdfKind = kind.parse()?;
    if kind == PdfKind::Custom {
        bail!("custom tables come from an experiment config, not the command line");
    }
    let pdf = make_pdf(kind, n_terms, Modulus::new(q)?)?;
    if json {
        let doc = serde_json::json!({"kind": kind, "n_terms": n_terms, "q": q, "table": pdf.table()});
        println!("{doc}");
    } else {
        println!("# {kind} N={n_terms} q={q}");
        for (i, p) in pdf.table().iter().enumerate() {
            println!("{:>4} {p:.10}", i + 1);
        }
    }
    Ok(())
}

pub fn kl(n_terms: usize, q: u64, json: bool) -> Result<()> {
    let q = Modulus::new(q)?;
    let reference = make_pdf(PdfKind::Default, n_terms, q)?;
    let mut rows = Vec::new();
    for kind in [PdfKind::Default, PdfKind::InvSqrt, PdfKind::Uni] {
        rows.push((kind, kl_divergence(&make_pdf(kind, n_terms, q)?, &reference)?));
    }
    if json {
        let doc: serde_json::Map<String, serde_json::Value> =
            rows.iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect();
        println!("{}", serde_json::Value::Object(doc));
    } else {
        let mut t = TextTable::new(["f", "KL(f ‖ f_default)"]);
        for (k, v) in rows {
            t.push(vec![k.to_string(), format!("{v:.2}")]);
        }
        print!("{}", t.render());
    }
    Ok(())
}

/// The experiment's training set, loaded from `path` if given.
fn dataset(r: &Resolved, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => {
            let ds = store::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ds.spec != r.data {
                bail!("{} was generated from a different data section", p.display());
            }
            Ok(ds)
        }
        None => Ok(build_dataset(&r.data)?),
    }
}

fn plan(r: &Resolved, ds: &Dataset) -> Result<EvalPlan> {
    Ok(EvalPlan::build(&r.eval, &r.data.task, r.data.n_terms, r.data.q, &ds.vector_set())?)
}

pub fn gen_data(config: &Path, out: Option<PathBuf>, text: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let r = cfg.resolve()?;
    let ds = build_dataset(&r.data)?;
    let bad = ds.audit_labels()?;
    if !bad.is_empty() {
        bail!("{} samples failed the label audit", bad.len());
    }
    let path = out.unwrap_or_else(|| cfg.out_dir().join(DATA_FILE));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let digest = store::save(&ds, &path)?;
    if let Some(t) = text {
        store::export_text(&ds, BufWriter::new(File::create(&t)?))?;
    }
    println!("{} samples -> {}", ds.len(), path.display());
    println!("sha256 {}", hex::encode(digest));
    Ok(())
}

fn write_history(path: &Path, history: &[MetricsRecord]) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in history {
        writeln!(w, "{}", r.to_json_line())?;
    }
    w.flush()?;
    Ok(w)
}

fn progress(label: &str, r: &MetricsRecord) {
    eprintln!(
        "[{label}] step {} samples {} loss {:.4} mse {:.4} acc@0.5% {}",
        r.step,
        r.samples_seen,
        r.train_loss,
        r.eval_mse,
        pct(r.accuracy_at(0.005))
    );
}

fn finish(
    cfg: &ExperimentConfig,
    r: &Resolved,
    dir: &Path,
    history: &[MetricsRecord],
    quiet: bool,
) -> Result<RunSummary> {
    let s = RunSummary::from_history(r.data.n_terms, r.data.q.get(), history, &cfg.summary)
        .ok_or_else(|| anyhow!("run produced no evaluation records"))?;
    let table = s.table(&cfg.summary);
    fs::write(dir.join(SUMMARY_FILE), &table)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&s)? + "\n")?;
    if !quiet {
        print!("{table}");
    }
    Ok(s)
}

/// Runs one experiment end to end and returns its summary.
pub fn run_experiment(cfg: &ExperimentConfig, data: Option<&Path>, resume: bool, quiet: bool) -> Result<RunSummary> {
    let r = cfg.resolve()?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let label = cfg.label();
    let ds = dataset(&r, data)?;
    let plan = plan(&r, &ds)?;
    let metrics = dir.join(METRICS_FILE);

    if let Some(cl) = &cfg.curriculum {
        if resume {
            bail!("curriculum runs cannot be resumed");
        }
        let (outcome, switch) = curriculum_train(&r.model, &ds, &r.train, cl, &plan)?;
        write_history(&metrics, &outcome.history)?;
        if !quiet {
            match switch {
                Some(s) => eprintln!("[{label}] switched to phase 2 after {s} samples"),
                None => eprintln!("[{label}] threshold {} never fired", cl.threshold.label()),
            }
        }
        return finish(cfg, &r, &dir, &outcome.history, quiet);
    }

    let ck_path = dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        let ck = Checkpoint::<f32>::load(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
        if ck.model != r.model {
            bail!("checkpoint model differs from the config");
        }
        let t = Trainer::resume(&ck, &ds)?;
        if *t.config() != r.train {
            bail!("checkpoint training settings differ from the config");
        }
        t
    } else {
        Trainer::new(&r.model, &ds, &r.train)?
    };
    let mut w = write_history(&metrics, trainer.history())?;
    let mut last_saved = trainer.step();
    while !trainer.is_done() {
        let every = r.checkpoint_every;
        trainer.run(&plan, |rec, _, _| {
            writeln!(w, "{}", rec.to_json_line())?;
            w.flush()?;
            if !quiet {
                progress(&label, rec);
            }
            Ok(match every {
                Some(e) if rec.step >= last_saved + e => Control::Stop,
                _ => Control::Continue,
            })
        })?;
        trainer.checkpoint()?.save(&ck_path)?;
        last_saved = trainer.step();
    }
    finish(cfg, &r, &dir, trainer.history(), quiet)
}

pub fn train(config: &Path, data: Option<PathBuf>, resume: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    if cfg.attack.is_some() {
        bail!("this config describes an attack; use the attack command");
    }
    run_experiment(&cfg, data.as_deref(), resume, false).map(|_| ())
}

fn load_checkpoint(cfg: &ExperimentConfig, r: &Resolved, path: Option<PathBuf>) -> Result<Checkpoint<f32>> {
    let path = path.unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT_FILE));
    let ck = Checkpoint::<f32>::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if ck.model != r.model {
        bail!("checkpoint model differs from the config");
    }
    Ok(ck)
}

pub fn eval(config: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let r = cfg.resolve()?;
    let ck = load_checkpoint(&cfg, &r, checkpoint)?;
    let ds = build_dataset(&r.data)?;
    let plan = plan(&r, &ds)?;
    let mut predictor = ModelPredictor::new(&ck.params, &ck.model);
    let summary = evaluate(&mut predictor, &plan.test, r.data.q, &plan.taus)?;
    let strata = if plan.strata.is_empty() {
        Vec::new()
    } else {
        stratified_eval(&mut predictor, &plan.strata, r.data.q, plan.strata_tau)?
    };
    let doc = serde_json::json!({
        "step": ck.step,
        "eval_mse": summary.mse,
        "tau_acc": summary.tau_acc,
        "stratified": strata,
        "degenerate_rate": summary.degenerate_rate,
        "mean_magnitude": summary.mean_magnitude,
    });
    println!("{doc}");

    let history: Vec<MetricsRecord> = ck
        .state
        .get("history")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .unwrap_or_default();
    let Some(rec) = history.iter().rev().find(|h| h.step == ck.step) else {
        eprintln!("no training-time record at step {} to compare against", ck.step);
        return Ok(());
    };
    let same = rec.eval_mse.to_bits() == summary.mse.to_bits()
        && rec.tau_acc == summary.tau_acc
        && rec.degenerate_rate.to_bits() == summary.degenerate_rate.to_bits()
        && rec.mean_magnitude.to_bits() == summary.mean_magnitude.to_bits()
        && (rec.stratified.is_empty() || rec.stratified == strata);
    if !same {
        bail!("evaluation differs from the training-time record at step {}", ck.step);
    }
    eprintln!("matches the training-time record at step {}", ck.step);
    Ok(())
}

pub fn attack(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    run_attack_experiment(&cfg, false).map(|_| ())
}

/// Runs the attack described by `cfg` and writes its logs and summary.
pub fn run_attack_experiment(cfg: &ExperimentConfig, quiet: bool) -> Result<RecoveryResult> {
    let section = cfg
        .attack
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [attack] section"))?;
    let ac = cfg.attack_config(section)?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut w = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let label = cfg.label();
    let mut io_err = None;
    let result = run_attack(&ac, |k, rec| {
        let line = serde_json::json!({"init": k, "record": rec});
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            io_err.get_or_insert(e);
        }
        if !quiet {
            progress(&format!("{label} init {k}"), rec);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    fs::write(dir.join("recovery.jsonl"), result.to_json_lines())?;
    let mut t = TextTable::new(["init", "secret", "candidate", "verified", "samples"]);
    for i in &result.inits {
        t.push(vec![
            i.init.to_string(),
            i.secret.clone(),
            i.candidate.clone(),
            if i.verified { "yes" } else { "no" }.into(),
            match (&i.error, i.samples_at_recovery) {
                (Some(e), _) => format!("failed: {e}"),
                (None, s) => samples(s),
            },
        ]);
    }
    let table = format!(
        "{}recovered {}/{} ({})\n",
        t.render(),
        result.recovered,
        result.inits.len(),
        pct(Some(result.recovery_fraction))
    );
    fs::write(dir.join(SUMMARY_FILE), &table)?;
    if !quiet {
        print!("{table}");
    }
    Ok(result)
}

pub fn dump_predictions(
    config: &Path,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    limit: Option<usize>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let r = cfg.resolve()?;
    let ck = load_checkpoint(&cfg, &r, checkpoint)?;
    let ds = build_dataset(&r.data)?;
    let plan = plan(&r, &ds)?;
    let test = &plan.test[..limit.unwrap_or(plan.test.len()).min(plan.test.len())];
    let outputs = predict_samples(&mut ModelPredictor::new(&ck.params, &ck.model), test)?;
    let path = out.unwrap_or_else(|| cfg.out_dir().join(format!("predictions-step{}.csv", ck.step)));
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "a,label,x,y")?;
    for (s, p) in test.iter().zip(&outputs) {
        let a: Vec<String> = s.a.iter().map(u64::to_string).collect();
        writeln!(w, "{},{},{},{}", a.join(" "), s.label, p.x, p.y)?;
    }
    w.flush()?;
    println!("{} predictions -> {}", outputs.len(), path.display());
    Ok(())
}
