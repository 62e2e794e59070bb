use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vigil::analysis::{score_metrics, summarize_runs, AnalysisError};
use vigil::config::{AnnotatorMode, RunConfig};
use vigil::io::load_scores;
use vigil::runner::{exit, RunError};
use vigil::{datagen, Checkpoint, DataError};
use vigil_core::metrics::{ber, ebi};
use vigil_core::Methodology;

#[derive(Debug, Parser)]
#[command(
    name = "vigil",
    version,
    about = "Active-learning threshold adaptation for anomaly scorers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic drifting dataset from a spec file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run warm-up and the slice loop, writing report.json, summary.csv and verdicts.json.
    Run(RunArgs),
    /// Metrics for a labeled score file, or EBI/BER for a given FNR/FPR pair.
    Eval(EvalArgs),
    /// Cumulative-EBI quartiles per methodology over run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (JSON). Flags below override its fields.
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Resume from a checkpoint written at an annotation timeout.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    methodology: Option<Methodology>,
    /// oracle, server or scripted.
    #[arg(long)]
    annotator: Option<AnnotatorMode>,
    /// Verdict log for the scripted annotator.
    #[arg(long)]
    verdicts: Option<PathBuf>,
    /// Oracle label-flip probability.
    #[arg(long)]
    flip: Option<f64>,
    /// Annotation server port (default from VIGIL_PORT, else 8787).
    #[arg(long)]
    port: Option<u16>,
    /// Seconds a barrier waits for verdicts before checkpointing.
    #[arg(long)]
    timeout: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSON-lines file of {id, score, label}.
    #[arg(long, required_unless_present_all = ["fnr", "fpr"], conflicts_with_all = ["fnr", "fpr"])]
    scores: Option<PathBuf>,
    #[arg(long, requires = "fpr")]
    fnr: Option<f64>,
    #[arg(long, requires = "fnr")]
    fpr: Option<f64>,
    /// Read --fnr/--fpr as percentages.
    #[arg(long)]
    percent: bool,
    #[arg(long)]
    json: bool,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn cmd_gen(spec: PathBuf, out: PathBuf) -> ExitCode {
    let spec = match datagen::read_spec(&spec) {
        Ok(s) => s,
        Err(e) => return fail(exit::CONFIG, e),
    };
    match datagen::generate(&spec, &out) {
        Ok(_) => {
            println!("{}", datagen::manifest_path(&out).display());
            ExitCode::SUCCESS
        }
        Err(e @ DataError::InvalidSpec(_)) => fail(exit::CONFIG, e),
        Err(e) => fail(exit::FAILURE, e),
    }
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let (mut config, resume) = match (&args.config, &args.resume) {
        (Some(path), _) => match RunConfig::load(path) {
            Ok(c) => (c, None),
            Err(e) => return fail(exit::CONFIG, e),
        },
        (None, Some(path)) => match Checkpoint::read(path) {
            Ok(c) => (c.config.clone(), Some(c)),
            Err(e) => return fail(exit::CONFIG, e),
        },
        (None, None) => unreachable!("clap requires one of --config/--resume"),
    };
    if let Some(m) = args.methodology {
        if resume.is_some() && m != config.methodology {
            return fail(
                exit::CONFIG,
                RunError::config("methodology", "cannot change methodology when resuming"),
            );
        }
        config.methodology = m;
    }
    if let Some(a) = args.annotator {
        config.annotator.mode = a;
    }
    if let Some(v) = args.verdicts {
        config.annotator.verdicts = Some(v);
    }
    if let Some(f) = args.flip {
        config.annotator.flip_probability = f;
    }
    if let Some(p) = args.port {
        config.annotator.port = p;
    }
    if let Some(t) = args.timeout {
        config.annotator.timeout_secs = t;
    }
    if let Some(o) = args.out {
        config.output_dir = o;
    }
    match vigil::execute(&config, resume) {
        Ok(outcome) => {
            let r = &outcome.report;
            println!("report: {}", outcome.report_path.display());
            println!("summary: {}", outcome.summary_path.display());
            let pct = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", v * 100.0));
            println!(
                "{}: slices={} fnr={} fpr={} ebi={}",
                r.methodology,
                r.per_slice.len(),
                pct(r.cumulative_fnr),
                pct(r.cumulative_fpr),
                pct(r.cumulative_ebi)
            );
            if let Some(w) = r.workload_reduction {
                println!("workload reduction: {:.2}%", w * 100.0);
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.exit_code(), e),
    }
}

fn cmd_eval(args: EvalArgs) -> ExitCode {
    if let (Some(fnr), Some(fpr)) = (args.fnr, args.fpr) {
        let scale = if args.percent { 100.0 } else { 1.0 };
        let (fnr, fpr) = (fnr / scale, fpr / scale);
        let (e, b) = match (ebi(fpr, fnr), ber(fpr, fnr)) {
            (Ok(e), Ok(b)) => (e, b),
            (Err(err), _) | (_, Err(err)) => return fail(exit::DATA, err),
        };
        if args.json {
            println!("{}", serde_json::json!({ "fnr": fnr, "fpr": fpr, "ebi": e, "ber": b }));
        } else {
            println!("fnr: {:.6} ({:.2}%)", fnr, fnr * 100.0);
            println!("fpr: {:.6} ({:.2}%)", fpr, fpr * 100.0);
            println!("ebi: {:.6} ({:.2}%)", e, e * 100.0);
            println!("ber: {:.6} ({:.2}%)", b, b * 100.0);
        }
        return ExitCode::SUCCESS;
    }
    let path = args.scores.expect("clap requires --scores without --fnr/--fpr");
    let metrics = load_scores(&path)
        .map_err(AnalysisError::from)
        .and_then(|r| score_metrics(&r));
    match metrics {
        Ok(m) if args.json => {
            println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
            ExitCode::SUCCESS
        }
        Ok(m) => {
            println!("samples: {}", m.n);
            println!("auc_roc: {:.6}", m.auc_roc);
            println!("auc_pr: {:.6}", m.auc_pr);
            println!("eer_theta: {}", m.eer_theta);
            println!("eer_fpr: {:.6}", m.eer_fpr);
            println!("eer_fnr: {:.6}", m.eer_fnr);
            println!("ebi: {:.6}", m.ebi);
            println!("ber: {:.6}", m.ber);
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit::DATA, e),
    }
}

fn cmd_report(runs: Vec<PathBuf>, json: bool) -> ExitCode {
    match summarize_runs(&runs) {
        Ok(rows) if json => {
            println!("{}", serde_json::to_string_pretty(&rows).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Ok(rows) => {
            println!(
                "{:<18} {:>5} {:>8} {:>8} {:>8}",
                "methodology", "runs", "q1", "median", "q3"
            );
            for r in rows {
                let (q1, med, q3) = r.summary.percent();
                println!(
                    "{:<18} {:>5} {:>8.2} {:>8.2} {:>8.2}",
                    r.methodology.as_str(),
                    r.runs,
                    q1,
                    med,
                    q3
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit::DATA, e),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Gen { spec, out } => cmd_gen(spec, out),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report { runs, json } => cmd_report(runs, json),
    }
}
