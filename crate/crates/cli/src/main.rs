//! `d2h`: score traces, evaluate detectors, generate synthetic corpora and
//! inspect single trace files.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unreadable or unwritable path, bad trace file, no labeled rows |
//! | 2 | usage error; trace fails validation under `--strict`; layer out of range |
//! | 3 | drift requested but the trace lacks the needed attention reduction |

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use d2h_core::baselines::BaselineConfig;
use d2h_core::io::{open_trace_dir, read_trace_file, write_trace_file, EXTENSION};
use d2h_core::metrics::evaluate_detectors;
use d2h_core::pca::pca_2d;
use d2h_core::pipeline::{score_batch, ScoringConfig};
use d2h_core::score::{layer_dispersion, DriftConfig, FusionConfig, ImportanceMode, Normalization};
use d2h_core::synth::{generate_labeled_batch, SynthPreset, DEFAULT_SEED};
use d2h_core::{Detector, Label, MetricError, ScoreError, ScoreRecord};

#[derive(Parser)]
#[command(
    name = "d2h",
    version,
    about = "Training-free hallucination scoring from hidden-state traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every trace in a directory and write one CSV row per trace.
    Score(ScoreArgs),
    /// Compute AUROC, FPR@95 and AUPR per detector from a score CSV.
    Eval(EvalArgs),
    /// Write a labeled synthetic trace corpus.
    Synth(SynthArgs),
    /// Print a trace's header and per-layer dispersion.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    FinalRow,
    ColMean,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Minmax,
    Zscore,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_name = "DIR")]
    traces: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Fraction of tokens kept as key tokens per layer.
    #[arg(long, default_value_t = 0.5)]
    k: f64,
    #[arg(long, value_enum, default_value = "final-row")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "minmax")]
    norm: NormArg,
    #[arg(long, default_value_t = 0.5)]
    w_dispersion: f64,
    #[arg(long, default_value_t = 0.5)]
    w_drift: f64,
    /// `all`, `none`, or a comma-separated list of baseline names.
    #[arg(long, default_value = "all")]
    baselines: String,
    /// Temperature the traces' scaled summaries were taken at.
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, env = "D2H_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Fail on the first unreadable or invalid trace instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    scores: PathBuf,
    /// Report path; `.json` gives JSON, anything else CSV. Repeatable.
    /// Without it the CSV report goes to stdout.
    #[arg(long, value_name = "FILE")]
    out: Vec<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    faithful: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    halluc: u64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value = "default")]
    preset: String,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Layer to project; 0 is the embedding output when stored.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, value_name = "FILE", requires = "layer")]
    pca2d: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn parse_baselines(spec: &str) -> anyhow::Result<Vec<Detector>> {
    match spec {
        "all" => return Ok(Detector::BASELINES.to_vec()),
        "none" => return Ok(Vec::new()),
        _ => {}
    }
    let mut wanted = Vec::new();
    for name in spec.split(',').map(str::trim) {
        let det: Detector = name.parse().map_err(|e: String| anyhow!(e))?;
        if !Detector::BASELINES.contains(&det) {
            return Err(anyhow!("{det} is not a baseline"));
        }
        wanted.push(det);
    }
    Ok(Detector::BASELINES
        .into_iter()
        .filter(|d| wanted.contains(d))
        .collect())
}

fn score(args: ScoreArgs) -> Result<(), Failure> {
    let cfg = ScoringConfig {
        drift: DriftConfig {
            k_fraction: args.k,
            importance_mode: match args.mode {
                ModeArg::FinalRow => ImportanceMode::FinalRow,
                ModeArg::ColMean => ImportanceMode::ColMean,
            },
            ..DriftConfig::default()
        },
        fusion: FusionConfig {
            w_dispersion: args.w_dispersion,
            w_drift: args.w_drift,
            normalization: match args.norm {
                NormArg::Minmax => Normalization::MinMax,
                NormArg::Zscore => Normalization::ZScore,
            },
        },
        baselines: parse_baselines(&args.baselines).exit_with(2)?,
        baseline: BaselineConfig {
            temperature: args.temperature,
            ..BaselineConfig::default()
        },
    };
    cfg.drift.validate().exit_with(2)?;
    cfg.fusion.validate().exit_with(2)?;

    let mut dir = open_trace_dir(&args.traces, args.strict)
        .with_context(|| format!("cannot read trace directory {}", args.traces.display()))
        .exit_with(1)?;
    let mut traces = Vec::new();
    for item in dir.by_ref() {
        traces.push(item.map_err(|e| anyhow!("{e}")).exit_with(2)?.1);
    }
    for e in dir.errors() {
        eprintln!("warning: skipped {e}");
    }
    if traces.is_empty() {
        return Err(anyhow!("no readable traces in {}", args.traces.display())).exit_with(1);
    }

    let records = score_batch(&traces, &cfg, args.jobs).map_err(|e| Failure {
        code: if matches!(e.root(), ScoreError::DriftUnavailable(_)) {
            3
        } else {
            2
        },
        error: anyhow!("{e}"),
    })?;
    for r in &records {
        for (det, why) in &r.omitted {
            eprintln!("warning: {}: {det} omitted: {why}", r.trace_id);
        }
    }

    let mut columns = vec![Detector::Dispersion, Detector::Drift];
    columns.extend(&cfg.baselines);
    write_scores(&args.out, &records, &columns)
        .with_context(|| format!("cannot write {}", args.out.display()))
        .exit_with(1)
}

fn write_scores(path: &Path, records: &[ScoreRecord], columns: &[Detector]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trace_id".to_owned(), "label".to_owned()];
    header.extend(columns.iter().map(|d| d.name().to_owned()));
    header.extend(columns.iter().map(|d| format!("oriented_{d}")));
    header.push(Detector::D2h.name().to_owned());
    w.write_record(&header)?;

    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in records {
        let mut row = vec![
            r.trace_id.clone(),
            r.label.map_or("", Label::as_str).to_owned(),
        ];
        row.extend(columns.iter().map(|&d| cell(r.raw(d))));
        row.extend(columns.iter().map(|&d| cell(r.oriented(d))));
        row.push(cell(r.raw(Detector::D2h)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_scores(path: &Path) -> anyhow::Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let id_col = header
        .iter()
        .position(|h| h == "trace_id")
        .context("missing trace_id column")?;
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .context("missing label column")?;
    let score_cols: Vec<(usize, Detector)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.parse::<Detector>().ok().map(|d| (i, d)))
        .collect();

    let mut records = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let line = n + 2;
        let label = match &row[label_col] {
            "" => None,
            s => Some(
                s.parse::<Label>()
                    .map_err(|e| anyhow!("line {line}: {e}"))?,
            ),
        };
        let mut rec = ScoreRecord::new(&row[id_col], label);
        for &(i, det) in &score_cols {
            if row[i].is_empty() {
                continue;
            }
            let v: f64 = row[i]
                .parse()
                .with_context(|| format!("line {line}: bad {det} value {:?}", &row[i]))?;
            rec.set(det, v);
        }
        records.push(rec);
    }
    Ok(records)
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let records = read_scores(&args.scores)
        .with_context(|| format!("cannot read {}", args.scores.display()))
        .exit_with(1)?;
    let report = match evaluate_detectors(&records) {
        Err(MetricError::NoLabeledRecords) => {
            return Err(anyhow!("no row carries a correct/hallucinated label")).exit_with(1)
        }
        r => r.exit_with(1)?,
    };
    if !report.excluded.is_empty() {
        eprintln!("warning: {} unlabeled rows excluded", report.excluded.len());
    }
    for det in &report.skipped {
        eprintln!("warning: {det} skipped: scores cover only one class");
    }

    if args.out.is_empty() {
        return report.write_csv(io::stdout().lock()).exit_with(1);
    }
    for path in &args.out {
        let written = if path.extension().is_some_and(|e| e == "json") {
            fs::write(path, report.to_json() + "\n")
        } else {
            fs::File::create(path).and_then(|f| {
                let mut f = io::BufWriter::new(f);
                report.write_csv(&mut f)?;
                f.flush()
            })
        };
        written
            .with_context(|| format!("cannot write {}", path.display()))
            .exit_with(1)?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let preset = SynthPreset::by_name(&args.preset)
        .ok_or_else(|| anyhow!("unknown preset {:?}", args.preset))
        .exit_with(2)?;
    let traces = generate_labeled_batch(
        args.faithful as usize,
        args.halluc as usize,
        &preset,
        args.seed,
    );
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .exit_with(1)?;
    for t in &traces {
        let path = args.out.join(format!("{}.{EXTENSION}", t.meta.trace_id));
        write_trace_file(&path, t)
            .with_context(|| format!("cannot write {}", path.display()))
            .exit_with(1)?;
    }
    eprintln!("wrote {} traces to {}", traces.len(), args.out.display());
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<(), Failure> {
    let trace = read_trace_file(&args.trace)
        .with_context(|| format!("cannot read {}", args.trace.display()))
        .exit_with(1)?;
    let m = &trace.meta;
    let layer = match args.layer {
        Some(l) if l > m.n_layers || (l == 0 && !m.has_embedding_layer) => {
            let low = if m.has_embedding_layer { 0 } else { 1 };
            return Err(anyhow!("layer {l} out of range {low}..={}", m.n_layers)).exit_with(2);
        }
        Some(0) => trace.embedding(),
        Some(l) => Some(trace.layer(l)),
        None => None,
    };

    let mut out = io::stdout().lock();
    let mut print = || -> io::Result<()> {
        writeln!(out, "trace_id\t{}", m.trace_id)?;
        writeln!(out, "label\t{}", m.label.map_or("none", Label::as_str))?;
        writeln!(out, "n_layers\t{}", m.n_layers)?;
        writeln!(out, "embedding_layer\t{}", m.has_embedding_layer)?;
        writeln!(out, "t_gen\t{}", m.t_gen)?;
        writeln!(out, "prompt_len\t{}", m.prompt_len)?;
        writeln!(out, "hidden_dim\t{}", m.hidden_dim)?;
        writeln!(out, "n_heads\t{}", m.n_heads)?;
        writeln!(out, "vocab_size\t{}", m.vocab_size)?;
        writeln!(out, "temperature\t{}", m.temperature)?;
        let attn = serde_json::to_value(m.attn_reduction).unwrap_or_default();
        writeln!(out, "attention\t{}", attn.as_str().unwrap_or_default())?;
        if let Some(extra) = &trace.extra {
            writeln!(out, "extra\t{extra}")?;
        }
        writeln!(out, "layer\tdispersion")?;
        for l in 1..=m.n_layers {
            writeln!(out, "{l}\t{}", layer_dispersion(trace.layer(l)))?;
        }
        Ok(())
    };
    print().exit_with(1)?;

    if let (Some(path), Some(matrix)) = (&args.pca2d, layer) {
        let proj = pca_2d(matrix);
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("cannot write {}", path.display()))
            .exit_with(1)?;
        let mut write = || -> anyhow::Result<()> {
            w.write_record(["pc1", "pc2"])?;
            for [a, b] in &proj.points {
                w.write_record([a.to_string(), b.to_string()])?;
            }
            w.flush()?;
            Ok(())
        };
        write().exit_with(1)?;
    }
    Ok(())
}
