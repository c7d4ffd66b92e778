use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use stconsist::geometry::WarpMode;
use stconsist::harness::{
    ablate_losses, config_hash, confusion, frequency_analysis, frequency_analysis_parts, replicate_seeds, run_report,
    split_labels, sweep_supervision, train_baseline, train_with_consistency, AblationTable, Dataset,
    ExperimentConfig, FrameRef, FrequencyAnalysis, LossCurve, RunReport, SweepTable, TrainConfig, TrainOutcome,
};
use stconsist::losses::LossVariant;
use stconsist::metrics::MiouResult;
use stconsist::persist::{load_checkpoint, load_dataset, read_json, save_checkpoint, save_dataset, write_bytes, write_json};
use stconsist::report::{fig2_csv, fig2_svg, loss_curve_csv, table1_csv, table1_svg, table2_csv, table2_svg};
use stconsist::scenegen::{class_census, SceneConfig};
use stconsist::{Error, Result};

#[derive(Parser)]
#[command(name = "stconsist", version, about = "Spatio-temporal consistency experiments on synthetic RGBD video")]
struct Cli {
    /// Parallel workers for sweep cells and evaluation; capped by STCONSIST_THREADS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData {
        /// Scene configuration JSON; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of sequences held out for evaluation.
        #[arg(long, default_value_t = 0.2)]
        eval_fraction: f64,
    },
    /// Supervised phase, then the consistency phase.
    Train {
        #[command(flatten)]
        io: RunIo,
        #[command(flatten)]
        overrides: Overrides,
        /// Stop after the supervised phase.
        #[arg(long)]
        baseline_only: bool,
        /// Reuse the phase-1 checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// MIOU of a checkpoint on the training and/or held-out frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Both)]
        split: SplitArg,
        /// Where report.json goes; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline vs consistency across labeled fractions.
    Sweep {
        #[command(flatten)]
        io: RunIo,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        plot: bool,
    },
    /// Every consistency loss variant from a shared baseline.
    Ablate {
        #[command(flatten)]
        io: RunIo,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        plot: bool,
    },
    /// Re-emit tables and plots from a run directory's report.json.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Args)]
struct RunIo {
    #[arg(long)]
    data: PathBuf,
    /// Experiment configuration JSON; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    phase1_steps: Option<u64>,
    #[arg(long)]
    phase2_steps: Option<u64>,
    #[arg(long, value_enum)]
    warp_mode: Option<WarpArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum WarpArg {
    ForwardSplat,
    InverseSample,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Uniform,
    LabelPrior,
    PixelPrior,
    Combined,
    Ce,
    CombinedCe,
}

impl From<VariantArg> for LossVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Uniform => LossVariant::Uniform,
            VariantArg::LabelPrior => LossVariant::LabelPrior,
            VariantArg::PixelPrior => LossVariant::PixelPrior,
            VariantArg::Combined => LossVariant::Combined,
            VariantArg::Ce => LossVariant::Ce,
            VariantArg::CombinedCe => LossVariant::CombinedCe,
        }
    }
}

/// Contents of `report.json`, tagged by the command that wrote it.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Document {
    Train(TrainDoc),
    Eval(EvalDoc),
    Sweep(SweepDoc),
    Ablation(AblationDoc),
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainDoc {
    config: ExperimentConfig,
    labeled_frames: usize,
    baseline: RunReport,
    consistency: Option<RunReport>,
    frequency: Option<FrequencyAnalysis>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalDoc {
    phase: u8,
    step: u64,
    train: Option<MiouResult>,
    eval: Option<MiouResult>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepDoc {
    config: ExperimentConfig,
    sweep: SweepTable,
    /// Per-seed frequency analysis at the lowest fraction.
    frequency: Vec<(usize, FrequencyAnalysis)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationDoc {
    config: ExperimentConfig,
    ablation: AblationTable,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Checksum(_) => 4,
        _ => 2,
    }
}

fn workers(flag: Option<usize>) -> Result<usize> {
    let mut n = flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Ok(v) = std::env::var("STCONSIST_THREADS") {
        let cap: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("STCONSIST_THREADS={v} is not a worker count")))?;
        if cap > 0 {
            n = n.min(cap);
        }
    }
    Ok(n.max(1))
}

fn experiment_config(path: Option<&Path>, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match path {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Format { path, reason } => Error::Config(format!("{}: {reason}", path.display())),
            e => e,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.fraction {
        cfg.fraction = v;
    }
    if let Some(v) = &o.fractions {
        cfg.fractions = v.clone();
    }
    if let Some(v) = o.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = o.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = o.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = o.phase1_steps {
        cfg.train.phase1_steps = v;
    }
    if let Some(v) = o.phase2_steps {
        cfg.train.phase2_steps = v;
    }
    if let Some(v) = o.warp_mode {
        cfg.train.warp_mode = match v {
            WarpArg::ForwardSplat => WarpMode::ForwardSplat,
            WarpArg::InverseSample => WarpMode::InverseSample,
        };
    }
    if let Some(v) = o.variant {
        cfg.train.variant = v.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn print_miou(label: &str, m: &MiouResult) {
    let per: Vec<String> = m
        .per_class
        .iter()
        .map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}")))
        .collect();
    println!("{label}: miou {:.4} per-class [{}]", m.miou, per.join(", "));
}

fn gen_data(config: Option<&Path>, out: &Path, seed: u64, eval_fraction: f64) -> Result<()> {
    let cfg: SceneConfig = match config {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Format { path, reason } => Error::Config(format!("{}: {reason}", path.display())),
            e => e,
        })?,
        None => SceneConfig::default(),
    };
    cfg.validate()?;
    let data = Dataset::generate(&cfg, seed, eval_fraction)?;
    save_dataset(out, &data, eval_fraction)?;
    let census = class_census(data.sequences.iter().flat_map(|s| &s.frames), cfg.classes);
    println!(
        "wrote {} sequences x {} frames to {}",
        data.sequences.len(),
        cfg.frames_per_sequence,
        out.display()
    );
    for (c, f) in census.iter().enumerate() {
        println!("class {c}: {:.4}", f);
    }
    Ok(())
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    phase: u8,
    error: String,
    config: &'a ExperimentConfig,
}

fn guarded<T>(out: &Path, phase: u8, cfg: &ExperimentConfig, r: Result<T>) -> Result<T> {
    if let Err(Error::Numeric(msg)) = &r {
        write_json(
            &out.join("diagnostic.json"),
            &Diagnostic {
                phase,
                error: msg.clone(),
                config: cfg,
            },
        )?;
    }
    r
}

fn train(io: &RunIo, o: &Overrides, baseline_only: bool, resume: bool) -> Result<()> {
    let cfg = experiment_config(io.config.as_deref(), o)?;
    let data = load_dataset(&io.data)?;
    let (split_seed, train_seed) = replicate_seeds(cfg.train.seed, 0);
    let tc = TrainConfig {
        seed: train_seed,
        ..cfg.train.clone()
    };
    let split = split_labels(data.train_frames().len(), cfg.fraction, split_seed)?;
    let hash = config_hash(&cfg);
    let echo = serde_json::to_value(&cfg)?;
    let phase1_dir = io.out.join("phase1");
    let curve_path = io.out.join("phase1_curve.json");

    let t0 = Instant::now();
    let baseline = if resume {
        let ck = load_checkpoint(&phase1_dir)?;
        if ck.config_hash != hash {
            return Err(Error::Config(format!(
                "refusing to resume: checkpoint config hash {} differs from {hash}",
                ck.config_hash
            )));
        }
        if ck.phase != 1 {
            return Err(Error::Config(format!("checkpoint is from phase {}, expected 1", ck.phase)));
        }
        let curve: LossCurve = read_json(&curve_path)?;
        TrainOutcome { checkpoint: ck, curve }
    } else {
        let mut b = guarded(&io.out, 1, &cfg, train_baseline(&data, &split, &tc))?;
        b.checkpoint.config_hash = hash.clone();
        save_checkpoint(&phase1_dir, &b.checkpoint)?;
        write_json(&curve_path, &b.curve)?;
        b
    };
    let t1 = t0.elapsed().as_secs_f64();
    let base_report = run_report(&data, &split, &baseline, echo.clone(), t1)?;
    println!("phase 1: {} labeled frames, held-out miou {:.4}", split.count(), base_report.miou);

    let mut doc = TrainDoc {
        config: cfg.clone(),
        labeled_frames: split.count(),
        baseline: base_report,
        consistency: None,
        frequency: None,
    };
    let mut phase2 = None;
    if !baseline_only {
        let t = Instant::now();
        let out = guarded(
            &io.out,
            2,
            &cfg,
            train_with_consistency(&data, &split, &baseline.checkpoint, &tc),
        )?;
        save_checkpoint(&io.out.join("phase2"), &out.checkpoint)?;
        let r = run_report(&data, &split, &out, echo, t.elapsed().as_secs_f64())?;
        println!("phase 2: held-out miou {:.4}", r.miou);
        let fa = frequency_analysis(&doc.baseline, &r)?;
        write_text(&io.out.join("fig2.csv"), &fig2_csv(&[(0, fa.clone())]))?;
        doc.frequency = Some(fa);
        doc.consistency = Some(r);
        phase2 = Some(out.curve);
    }
    write_text(&io.out.join("loss_curve.csv"), &loss_curve_csv(&baseline.curve, phase2.as_ref()))?;
    write_json(
        &io.out.join("timing.json"),
        &serde_json::json!({
            "phase1_seconds": doc.baseline.wall_clock,
            "phase2_seconds": doc.consistency.as_ref().map(|r| r.wall_clock),
        }),
    )?;
    write_json(&io.out.join("report.json"), &Document::Train(doc))
}

fn eval(checkpoint: &Path, data_dir: &Path, split: SplitArg, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_dataset(data_dir)?;
    let run = |frames: Vec<FrameRef>| confusion(&data, &ck.params, &frames).map(|c| c.iou());
    let train = match split {
        SplitArg::Train | SplitArg::Both => Some(run(data.train_frames())?),
        SplitArg::Eval => None,
    };
    let held = match split {
        SplitArg::Eval | SplitArg::Both => Some(run(data.eval_frames())?),
        SplitArg::Train => None,
    };
    if let Some(m) = &train {
        print_miou("train", m);
    }
    if let Some(m) = &held {
        print_miou("held-out", m);
    }
    let doc = Document::Eval(EvalDoc {
        phase: ck.phase,
        step: ck.step,
        train,
        eval: held,
    });
    write_json(&out.unwrap_or(checkpoint).join("report.json"), &doc)
}

fn sweep_frequency(t: &SweepTable) -> Result<Vec<(usize, FrequencyAnalysis)>> {
    let lowest = t.means.iter().map(|m| m.fraction).fold(f64::INFINITY, f64::min);
    t.rows
        .iter()
        .filter(|r| r.fraction == lowest)
        .map(|r| {
            frequency_analysis_parts(&r.baseline_per_class, &r.consist_per_class, &r.class_frequency)
                .map(|fa| (r.seed, fa))
        })
        .collect()
}

fn emit(dir: &Path, doc: &Document, plot: bool) -> Result<()> {
    match doc {
        Document::Train(d) => {
            if let Some(fa) = &d.frequency {
                let runs = [(0, fa.clone())];
                write_text(&dir.join("fig2.csv"), &fig2_csv(&runs))?;
                if plot {
                    write_text(&dir.join("fig2.svg"), &fig2_svg(&runs))?;
                }
            }
        }
        Document::Eval(_) => {}
        Document::Sweep(d) => {
            write_text(&dir.join("table1.csv"), &table1_csv(&d.sweep))?;
            write_text(&dir.join("fig2.csv"), &fig2_csv(&d.frequency))?;
            if plot {
                write_text(&dir.join("table1.svg"), &table1_svg(&d.sweep))?;
                write_text(&dir.join("fig2.svg"), &fig2_svg(&d.frequency))?;
            }
        }
        Document::Ablation(d) => {
            write_text(&dir.join("table2.csv"), &table2_csv(&d.ablation))?;
            if plot {
                write_text(&dir.join("table2.svg"), &table2_svg(&d.ablation))?;
            }
        }
    }
    Ok(())
}

fn summarize(doc: &Document) {
    match doc {
        Document::Train(d) => {
            println!("baseline miou {:.4}", d.baseline.miou);
            if let Some(c) = &d.consistency {
                println!("consistency miou {:.4}", c.miou);
            }
        }
        Document::Eval(d) => {
            if let Some(m) = &d.train {
                print_miou("train", m);
            }
            if let Some(m) = &d.eval {
                print_miou("held-out", m);
            }
        }
        Document::Sweep(d) => {
            for m in &d.sweep.means {
                println!(
                    "fraction {}: baseline {:.4} consistency {:.4} ({:+.2} points)",
                    m.fraction,
                    m.baseline_miou,
                    m.consist_miou,
                    100.0 * (m.consist_miou - m.baseline_miou)
                );
            }
            match d.sweep.label_efficiency {
                Some(f) => println!("label efficiency factor {f}"),
                None => println!("label efficiency factor: none"),
            }
        }
        Document::Ablation(d) => {
            for r in &d.ablation.rows {
                println!("{:<12} {:.4}", r.label(), r.mean_miou);
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let n = workers(cli.workers)?;
    // a second build attempt fails when a pool already exists; both are fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            eval_fraction,
        } => gen_data(config.as_deref(), &out, seed, eval_fraction),
        Command::Train {
            io,
            overrides,
            baseline_only,
            resume,
        } => train(&io, &overrides, baseline_only, resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, split, out.as_deref()),
        Command::Sweep { io, overrides, plot } => {
            let cfg = experiment_config(io.config.as_deref(), &overrides)?;
            let data = load_dataset(&io.data)?;
            let sweep = sweep_supervision(&data, &cfg.fractions, cfg.seeds, &cfg.train, n)?;
            let frequency = sweep_frequency(&sweep)?;
            let doc = Document::Sweep(SweepDoc {
                config: cfg,
                sweep,
                frequency,
            });
            summarize(&doc);
            emit(&io.out, &doc, plot)?;
            write_json(&io.out.join("report.json"), &doc)
        }
        Command::Ablate { io, overrides, plot } => {
            let cfg = experiment_config(io.config.as_deref(), &overrides)?;
            let data = load_dataset(&io.data)?;
            let ablation = ablate_losses(&data, cfg.fraction, cfg.seeds, &cfg.train, n)?;
            let doc = Document::Ablation(AblationDoc { config: cfg, ablation });
            summarize(&doc);
            emit(&io.out, &doc, plot)?;
            write_json(&io.out.join("report.json"), &doc)
        }
        Command::Report { run, plot } => {
            let doc: Document = read_json(&run.join("report.json"))?;
            summarize(&doc);
            emit(&run, &doc, plot)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
