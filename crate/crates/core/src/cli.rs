//! `recame` command line: `generate | train | eval | gradcheck | report`.
//!
//! Exit codes: 0 on success, 1 on a validation error (bad flags, configs
//! or inputs), 2 on a runtime failure (I/O, diverged training, a failing
//! gradient check).
//!
//! A run directory holds:
//!
//! ```text
//! config.json          effective training config (seed override applied)
//! manifest.jsonl       copy of the training manifest
//! checkpoints/final/   meta.json + branch_{k}.bin
//! history.csv
//! eval/report.json, eval/confusion.csv, eval/embeddings.csv
//! gradcheck/{name}.json
//! report.md
//! ```

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datagen::{generate_dataset, load_split, read_manifest, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_embeddings, EvalReport, Subgroup, SubgroupSpec};
use crate::model::load_checkpoint;
use crate::train::gradcheck::{gradcheck, CHECK_NAMES};
use crate::train::{train, TrainingConfig, TrainingHistory};

/// Evaluation batch size.
const EVAL_BATCH: usize = 128;

#[derive(Debug, Parser)]
#[command(name = "recame", version, about = "Imbalanced image classification with a multi-expert network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: images/, manifest.jsonl, stats.json.
    Generate(GenerateArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Render history.csv and eval/report.json as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Dataset preset: icdefect-mini or toy.
    #[arg(long, default_value = "icdefect-mini")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset manifest.jsonl; evaluation uses its test split.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; results go to `eval/` inside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory [default: OUT/checkpoints/final].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bin thresholds `head=..,many=..,medium=..` or a preset (ic, imagenet, mini).
    #[arg(long, default_value = "ic")]
    pub subgroups: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run every check.
    #[arg(long)]
    pub all: bool,
    /// Checks to run when --all is absent.
    pub names: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory; reports go to `gradcheck/` inside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Report(a) => run_report(a),
    }
}

fn run_generate(a: &GenerateArgs) -> Result<()> {
    let spec = DatasetSpec::preset(&a.preset, a.seed)?;
    let (manifest, stats) = generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} images to {} (imbalance ratio {:.1})",
        manifest.records.len(),
        a.out.display(),
        stats.imbalance_ratio
    );
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let manifest = read_manifest(&a.data)?;
    fs::create_dir_all(&a.out)?;
    config.save(&a.out.join("config.json"))?;
    fs::copy(&a.data, a.out.join("manifest.jsonl"))?;
    let outcome = train(&config, &manifest, Some(&a.out), &mut |r| {
        eprintln!(
            "epoch {:>4}  lr {:.6}  total {:.5}  arb {:.5}  hcm {:.5}",
            r.epoch, r.lr, r.losses.total, r.losses.arb, r.losses.hcm
        );
    })?;
    println!(
        "trained {} epochs; checkpoint at {}",
        outcome.history.len(),
        a.out.join("checkpoints").join("final").display()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let spec: SubgroupSpec = a.subgroups.parse()?;
    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.out.join("checkpoints").join("final"));
    let (mut model, meta) = load_checkpoint::<f32>(&ckpt)?;
    let manifest = read_manifest(&a.data)?;
    if manifest.header.num_classes != meta.c {
        return Err(Error::invalid(format!(
            "checkpoint has {} classes, dataset {}",
            meta.c, manifest.header.num_classes
        )));
    }
    let data = load_split(&manifest, Split::Test)?;
    let report = evaluate(&mut model, &data, &meta.class_counts, &spec, EVAL_BATCH)?;
    let dir = a.out.join("eval");
    fs::create_dir_all(&dir)?;
    report.write_json(&dir.join("report.json"))?;
    report.write_confusion_csv(&dir.join("confusion.csv"))?;
    export_embeddings(&mut model, &data, &dir.join("embeddings.csv"), EVAL_BATCH)?;
    println!(
        "top-1 {:.4}  majority {}  minority {}",
        report.top1,
        fmt_opt(report.majority),
        fmt_opt(report.minority)
    );
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let names: Vec<String> = if a.all {
        CHECK_NAMES.iter().map(|s| s.to_string()).collect()
    } else if a.names.is_empty() {
        return Err(Error::invalid("name at least one check or pass --all"));
    } else {
        a.names.clone()
    };
    let dir = a.out.as_ref().map(|o| o.join("gradcheck"));
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
    }
    let mut failed = Vec::new();
    for name in &names {
        let r = gradcheck(name, a.seed)?;
        println!(
            "{:<12} {}  max rel err {:.3e}",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.max_relative_error
        );
        if let Some(d) = &dir {
            r.write_json(&d.join(format!("{name}.json")))?;
        }
        if !r.passed {
            failed.push(r.name);
        }
    }
    let _ = std::io::stdout().flush();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradcheckFailed(failed))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Markdown summary of a run directory.
pub fn render_report(run_dir: &Path) -> Result<String> {
    let history_path = run_dir.join("history.csv");
    let report_path = run_dir.join("eval").join("report.json");
    let mut md = String::from("# Run summary\n\n");
    if history_path.exists() {
        let h = TrainingHistory::read_csv(&history_path)?;
        if let Some(last) = h.epochs.last() {
            let l = last.losses;
            md.push_str("| Epochs | Final lr | Total | ARB | HCM | Contrastive | Center | KD all | KD hard |\n");
            md.push_str("|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
            let _ = writeln!(
                md,
                "| {} | {:.6} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                last.epoch, last.lr, l.total, l.arb, l.hcm, l.contrastive, l.center, l.kd_all, l.kd_hard
            );
        }
    }
    if report_path.exists() {
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path)?)?;
        let s = &r.subgroups;
        md.push_str("| Head | Many | Medium | Few | Avg. | Majority | Minority |\n");
        md.push_str("|---:|---:|---:|---:|---:|---:|---:|\n");
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            fmt_opt(s.head),
            fmt_opt(s.many),
            fmt_opt(s.medium),
            fmt_opt(s.few),
            fmt_opt(Some(s.average)),
            fmt_opt(r.majority),
            fmt_opt(r.minority)
        );
        md.push_str("| Class | Bin | Accuracy |\n|---:|:---|---:|\n");
        for (c, acc) in r.per_class.iter().enumerate() {
            let bin = s.class_bins.get(c).copied().map_or("?", Subgroup::name);
            let _ = writeln!(md, "| {c} | {bin} | {} |", fmt_opt(*acc));
        }
    }
    if !history_path.exists() && !report_path.exists() {
        return Err(Error::invalid(format!(
            "{} has neither history.csv nor eval/report.json",
            run_dir.display()
        )));
    }
    Ok(md)
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let md = render_report(&a.out)?;
    fs::write(a.out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
