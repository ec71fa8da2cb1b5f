//! Experiment grids, each expanded from one base experiment.
//!
//! The base file fixes everything a table does not vary (budget, test size,
//! model overrides, seeds). Each grid point becomes its own experiment under
//! `<output_dir>/<table>/<run>`, so runs are independent and any worker count
//! yields the same files.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Result};
use clap::ValueEnum;

use sparsemod::datagen::{kl_divergence, pdf_table, PdfKind, TaskKind};
use sparsemod::model::{Embedding, Positional};
use sparsemod::rng::derive_seed;
use sparsemod::trainer::{CurriculumConfig, Phase2Data, Threshold};
use sparsemod::Modulus;

use crate::commands::{run_attack_experiment, run_experiment};
use crate::config::{AttackSection, ExperimentConfig};
use crate::report::{pct, samples, TextTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Table {
    /// N × q grid with f_inv_sqrt.
    Table2,
    /// Training PDF comparison with KL divergence.
    Table3,
    /// Fixed distribution against the best curriculum, 8 trials each.
    Table4,
    /// Sparse slots hold K instead of zero.
    Table5,
    /// Repeated samples at a fixed budget.
    Table6,
    /// Custom loss against plain MSE.
    Table7,
    /// LWE recovery with and without the regularizer.
    Table8,
    /// Samples needed to reach the loss and accuracy bars.
    AppendixB,
    /// The full curriculum search grid.
    AppendixC,
    Asymmetric,
    ModMul,
    ScalarProduct,
}

const QS: [u64; 4] = [257, 3329, 42899, 974269];
const NS: [usize; 4] = [16, 32, 64, 128];
const TRIALS: u64 = 8;

impl Table {
    fn dir(self) -> String {
        self.to_possible_value().unwrap().get_name().to_string()
    }
}

/// One grid point.
#[derive(Debug, Clone)]
pub struct Run {
    pub name: String,
    pub cfg: ExperimentConfig,
    /// Table columns this run fills besides the metrics, e.g. `("f", "uni")`.
    pub keys: Vec<(String, String)>,
}

fn with_nq(base: &ExperimentConfig, n: usize, q: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.data.n_terms = n;
    c.data.q = q;
    c
}

fn kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn nq_keys(n: usize, q: u64) -> Vec<(&'static str, String)> {
    vec![("N", n.to_string()), ("q", q.to_string())]
}

fn best_curriculum() -> CurriculumConfig {
    CurriculumConfig {
        threshold: Threshold::Loss { eps: 1e-2 },
        phase2: Phase2Data::Full,
    }
}

/// Expands `table` over `base`.
pub fn expand(table: Table, base: &ExperimentConfig) -> Result<Vec<Run>> {
    let mut runs = Vec::new();
    let mut push = |name: String, mut cfg: ExperimentConfig, keys: Vec<(&str, String)>| {
        cfg.output_dir = base.output_dir.join(table.dir()).join(&name);
        cfg.name = Some(name.clone());
        runs.push(Run { name, cfg, keys: kv(&keys) });
    };
    let mut base = base.clone();
    base.curriculum = None;
    if table != Table::Table8 {
        base.attack = None;
    }
    match table {
        Table::Table2 => {
            for n in NS {
                for q in QS {
                    let mut c = with_nq(&base, n, q);
                    c.data.pdf = PdfKind::InvSqrt;
                    push(format!("n{n}-q{q}"), c, nq_keys(n, q));
                }
            }
        }
        Table::Table3 => {
            for n in NS {
                for pdf in [PdfKind::Default, PdfKind::InvSqrt, PdfKind::Uni] {
                    let mut c = with_nq(&base, n, 257);
                    c.data.pdf = pdf;
                    let kl = kl_divergence(&c.pdf()?, &pdf_table(PdfKind::Default, n, Modulus::new(257)?)?)?;
                    let mut keys = nq_keys(n, 257);
                    keys.push(("f", pdf.to_string()));
                    keys.push(("KL", format!("{kl:.1}")));
                    push(format!("n{n}-{pdf}"), c, keys);
                }
            }
        }
        Table::Table4 => {
            for n in NS {
                for q in QS {
                    for method in ["ours", "cl"] {
                        for trial in 0..TRIALS {
                            let mut c = with_nq(&base, n, q);
                            c.data.pdf = PdfKind::InvSqrt;
                            c.seeds.model = derive_seed(base.seeds.model, trial);
                            if method == "cl" {
                                c.curriculum = Some(best_curriculum());
                                c.train.lr_peak = Some(3e-5);
                                c.train.weight_decay = Some(0.1);
                            }
                            let mut keys = nq_keys(n, q);
                            keys.push(("method", method.into()));
                            push(format!("n{n}-q{q}-{method}-t{trial}"), c, keys);
                        }
                    }
                }
            }
        }
        Table::Table5 => {
            for n in [32, 64, 128] {
                for (q, k) in QS.into_iter().zip([160, 3176, 24606, 79062]) {
                    let mut c = with_nq(&base, n, q);
                    c.data.pdf = PdfKind::InvSqrt;
                    c.data.task = TaskKind::ModAddSparseK { k };
                    let mut keys = nq_keys(n, q);
                    keys.push(("K", k.to_string()));
                    push(format!("n{n}-q{q}-k{k}"), c, keys);
                }
            }
        }
        Table::Table6 => {
            for repeats in [1000u64, 100, 10, 1] {
                if !base.data.budget.is_multiple_of(repeats) {
                    bail!("budget {} is not divisible by {repeats} repeats", base.data.budget);
                }
                for n in NS {
                    let mut c = with_nq(&base, n, 257);
                    c.data.pdf = PdfKind::InvSqrt;
                    c.data.distinct = base.data.budget / repeats;
                    let mut keys = nq_keys(n, 257);
                    keys.push(("repeats", repeats.to_string()));
                    push(format!("r{repeats}-n{n}"), c, keys);
                }
            }
        }
        Table::Table7 => {
            for n in [16, 32] {
                for q in QS {
                    for alpha in [1e-4, 0.0] {
                        let mut c = with_nq(&base, n, q);
                        c.data.pdf = PdfKind::InvSqrt;
                        c.train.alpha = Some(alpha);
                        let mut keys = nq_keys(n, q);
                        keys.push(("α", format!("{alpha}")));
                        push(format!("n{n}-q{q}-a{alpha}"), c, keys);
                    }
                }
            }
        }
        Table::Table8 => {
            let template = base.attack.clone().unwrap_or(AttackSection {
                hamming: 0,
                inits: 20,
                distinguisher: None,
                verify_pairs: None,
                fresh_secret_per_init: false,
                stop_on_recovery: true,
            });
            for (n, h) in [(64, 6), (128, 5), (256, 4)] {
                for q in QS {
                    for alpha in [1e-2, 0.0] {
                        let mut c = with_nq(&base, n, q);
                        c.data.pdf = PdfKind::InvSqrt;
                        c.data.task = TaskKind::ModAdd;
                        c.model.positional = Some(Positional::Learned);
                        c.train.alpha = Some(alpha);
                        c.attack = Some(AttackSection {
                            hamming: h,
                            ..template.clone()
                        });
                        let mut keys = nq_keys(n, q);
                        keys.push(("h", h.to_string()));
                        keys.push(("α", format!("{alpha}")));
                        push(format!("n{n}-h{h}-q{q}-a{alpha}"), c, keys);
                    }
                }
            }
        }
        Table::AppendixB => {
            for n in [6, 9, 12, 15, 18] {
                for pdf in [PdfKind::Default, PdfKind::InvSqrt] {
                    let mut c = with_nq(&base, n, 3329);
                    c.data.pdf = pdf;
                    let mut keys = nq_keys(n, 3329);
                    keys.push(("f", pdf.to_string()));
                    push(format!("n{n}-{pdf}"), c, keys);
                }
            }
        }
        Table::AppendixC => {
            let thresholds = [
                Threshold::Fraction { fraction: 0.01 },
                Threshold::Fraction { fraction: 0.03 },
                Threshold::Fraction { fraction: 0.10 },
                Threshold::Loss { eps: 1e-2 },
                Threshold::Loss { eps: 1e-3 },
            ];
            for threshold in thresholds {
                for phase2 in [Phase2Data::Remainder, Phase2Data::Full] {
                    for lr in [1e-5, 3e-5, 1e-4] {
                        for wd in [0.03, 0.1, 0.3] {
                            let mut c = base.clone();
                            c.data.pdf = PdfKind::InvSqrt;
                            c.curriculum = Some(CurriculumConfig { threshold, phase2 });
                            c.train.lr_peak = Some(lr);
                            c.train.weight_decay = Some(wd);
                            let mix = match phase2 {
                                Phase2Data::Remainder => "x2",
                                Phase2Data::Full => "full",
                            };
                            let keys = vec![
                                ("threshold", threshold.label()),
                                ("phase 2", mix.to_string()),
                                ("lr", format!("{lr:e}")),
                                ("wd", format!("{wd}")),
                            ];
                            let th = threshold.label().replace(['%', '<'], "");
                            push(format!("{th}-{mix}-lr{lr:e}-wd{wd}"), c, keys);
                        }
                    }
                }
            }
        }
        Table::Asymmetric => {
            for (j, k) in [(1, 1), (1, 3), (2, 1)] {
                let mut c = with_nq(&base, 16, 257);
                c.data.pdf = PdfKind::InvSqrt;
                c.data.task = TaskKind::Asymmetric { j, k };
                c.model.positional = Some(Positional::Learned);
                let mut keys = nq_keys(16, 257);
                keys.push(("function", format!("h_{{j={j},k={k}}}")));
                push(format!("asym-j{j}-k{k}"), c, keys);
            }
        }
        Table::ModMul => {
            for n in [16, 32, 64] {
                for q in [97, 257, 3329] {
                    for pdf in [PdfKind::InvSqrt, PdfKind::Default] {
                        let mut c = with_nq(&base, n, q);
                        c.data.pdf = pdf;
                        c.data.task = TaskKind::ModMul;
                        c.model.embedding = Some(Embedding::Token);
                        let mut keys = nq_keys(n, q);
                        keys.push(("f", pdf.to_string()));
                        push(format!("n{n}-q{q}-{pdf}"), c, keys);
                    }
                }
            }
        }
        Table::ScalarProduct => {
            for n in [2, 4, 8] {
                for q in [97, 257, 3329] {
                    for pdf in [PdfKind::InvSqrt, PdfKind::Default] {
                        let mut c = with_nq(&base, 2 * n, q);
                        c.data.pdf = pdf;
                        c.data.task = TaskKind::ScalarProduct { half_len: n };
                        c.model.embedding = Some(Embedding::Token);
                        c.model.positional = Some(Positional::Learned);
                        let mut keys = nq_keys(n, q);
                        keys.push(("f", pdf.to_string()));
                        push(format!("n{n}-q{q}-{pdf}"), c, keys);
                    }
                }
            }
        }
    }
    for r in &runs {
        r.cfg.resolve().map_err(|e| e.context(format!("run {}", r.name)))?;
    }
    Ok(runs)
}

enum Outcome {
    Train(crate::report::RunSummary),
    Attack { recovered: usize, inits: usize },
}

fn run_one(run: &Run) -> Result<Outcome> {
    if run.cfg.attack.is_some() {
        let r = run_attack_experiment(&run.cfg, true)?;
        Ok(Outcome::Attack {
            recovered: r.recovered,
            inits: r.inits.len(),
        })
    } else {
        Ok(Outcome::Train(run_experiment(&run.cfg, None, false, true)?))
    }
}

pub fn run(table: Table, base: &Path, dry_run: bool, jobs: usize) -> Result<()> {
    let base = ExperimentConfig::load(base)?;
    let runs = expand(table, &base)?;
    if dry_run {
        for r in &runs {
            let keys: Vec<String> = r.keys.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("{}  {}", r.name, keys.join(" "));
        }
        println!("{} runs", runs.len());
        return Ok(());
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Outcome>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(r) = runs.get(i) else { break };
                eprintln!("[{}/{}] {}", i + 1, runs.len(), r.name);
                let out = run_one(r);
                if let Err(e) = &out {
                    eprintln!("run {} failed: {e:#}", r.name);
                }
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let key_names: Vec<String> = runs[0].keys.iter().map(|(k, _)| k.clone()).collect();
    let mut header = vec!["run".to_string()];
    header.extend(key_names);
    let attack = table == Table::Table8;
    if attack {
        header.push("Recovery %".into());
    } else {
        header.extend(["MSE", "τ=0.5% Accuracy", "τ=1% Accuracy", "samples to threshold"].map(String::from));
    }
    let mut t = TextTable::new(header);
    let mut failed = 0;
    for (r, out) in runs.iter().zip(results) {
        let mut row = vec![r.name.clone()];
        row.extend(r.keys.iter().map(|(_, v)| v.clone()));
        match out {
            Some(Ok(Outcome::Train(s))) => row.extend([
                format!("{:.2}", s.mse),
                pct(s.acc_05),
                pct(s.acc_1),
                samples(s.samples_to_threshold),
            ]),
            Some(Ok(Outcome::Attack { recovered, inits })) => {
                row.push(pct(Some(recovered as f64 / inits as f64)))
            }
            _ => {
                failed += 1;
                row.push("failed".into());
            }
        }
        t.push(row);
    }
    let out = t.render();
    let dir = base.out_dir().join(table.dir());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("summary.txt"), &out)?;
    print!("{out}");
    if failed > 0 {
        bail!("{failed} of {} runs failed", runs.len());
    }
    Ok(())
}
