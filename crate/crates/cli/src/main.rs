use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use elbo_align::config::{ExponentReading, RunConfig};
use elbo_align::elbo::StrategyKind;
use elbo_align::harness::{self, Dataset, DatasetSpec, SweepParam};
use elbo_align::io::{self, Provenance};
use elbo_align::objectives::ObjectiveKind;
use elbo_align::schedule::Schedule;
use elbo_align::verify::{self, Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "elbo-align", version, about = "ELBO-calibrated pixel-text alignment on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scene dataset (manifest + ground-truth label maps).
    Synth(SynthArgs),
    /// Segment every scene of a dataset.
    Segment(SegmentArgs),
    /// Score predicted label maps, or compare calibrated and uncalibrated runs.
    Eval(EvalArgs),
    /// Run the oracle verification suites.
    Verify(VerifyArgs),
    /// Rerun segmentation + evaluation over a list of parameter values.
    Sweep(SweepArgs),
}

fn fraction(s: &str) -> std::result::Result<f64, String> {
    harness::parse_fraction(s).map_err(|e| e.to_string())
}

fn parsed<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

/// Pipeline settings: a JSON config with flag overrides.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Alignment-score base γ in (0, 1]; fractions like 1/3 are accepted.
    #[arg(long, value_parser = fraction)]
    gamma: Option<f64>,
    /// Skip the ELBO scores and the calibration step.
    #[arg(long)]
    no_calibration: bool,
    /// Use this constant score for every class.
    #[arg(long, value_parser = fraction)]
    fixed_s: Option<f64>,
    /// Background threshold on the winning class probability.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = parsed::<ExponentReading>)]
    exponent_reading: Option<ExponentReading>,
    #[arg(long, value_parser = parsed::<ObjectiveKind>)]
    objective: Option<ObjectiveKind>,
    #[arg(long, value_parser = parsed::<Schedule>)]
    schedule: Option<Schedule>,
    #[arg(long)]
    elbo_steps: Option<usize>,
    #[arg(long, value_parser = parsed::<StrategyKind>)]
    elbo_strategy: Option<StrategyKind>,
    /// Plain Monte-Carlo pairs instead of ±ε antithetic pairs.
    #[arg(long)]
    no_antithetic: bool,
    #[arg(long)]
    attention_steps: Option<usize>,
    /// `lo-hi`, or a named range (small, middle, large, random).
    #[arg(long)]
    attention_range: Option<String>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    softmax_temp: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Run the toy denoiser in 32-bit arithmetic.
    #[arg(long)]
    float32: bool,
    /// Score classes absent from prediction and ground truth as IoU 1.
    #[arg(long)]
    include_absent: bool,
    /// Leave background out of the mIoU mean.
    #[arg(long)]
    no_background_miou: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(g) = self.gamma {
            c.elbo.gamma = g;
        }
        if self.no_calibration {
            c.calibration.enabled = false;
        }
        if let Some(s) = self.fixed_s {
            c.calibration.fixed_s = Some(s);
        }
        if let Some(t) = self.threshold {
            c.threshold = Some(t);
        }
        if let Some(r) = self.exponent_reading {
            c.calibration.reading = r;
        }
        if let Some(k) = self.objective {
            c.objective = k;
        }
        if let Some(s) = self.schedule {
            c.schedule = s;
        }
        if let Some(n) = self.elbo_steps {
            c.elbo.steps = n;
        }
        if let Some(k) = self.elbo_strategy {
            c.elbo.strategy = k;
        }
        if self.no_antithetic {
            c.elbo.antithetic = false;
        }
        if let Some(n) = self.attention_steps {
            c.attention.steps = n;
        }
        if let Some(r) = &self.attention_range {
            let (steps, range, random) = harness::parse_attention_range(r)?;
            if let Some(n) = steps {
                c.attention.steps = n;
            }
            c.attention.range = range;
            c.attention.random = random;
        }
        if let Some(s) = self.noise_seed {
            c.noise_seed = s;
        }
        if let Some(t) = self.softmax_temp {
            c.softmax_temp = t;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if self.float32 {
            c.float32 = true;
        }
        if self.include_absent {
            c.metrics.include_absent = true;
        }
        if self.no_background_miou {
            c.metrics.background_in_miou = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Base scenes to generate.
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    /// Write the unbiased scene and one variant per bias mode for each base.
    #[arg(long)]
    bias_suite: bool,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Key scale of the rare classes.
    #[arg(long, default_value_t = elbo_align::toyscene::DEFAULT_RARITY)]
    rarity: f64,
    #[arg(long, default_value_t = 0)]
    vocab_seed: u64,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SegmentArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label maps (a `segment` output or a directory of PGMs).
    #[arg(long, required_unless_present = "compare")]
    pred: Option<PathBuf>,
    /// Ground-truth label maps (a dataset directory or a directory of PGMs).
    #[arg(long, required_unless_present = "compare")]
    gt: Option<PathBuf>,
    /// Run the dataset calibrated and uncalibrated and tabulate by bias mode.
    #[arg(long, requires = "data", conflicts_with_all = ["pred", "gt"])]
    compare: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report JSON path (printed to stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-scene (or, with --compare, per-mode) CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trials per cell (suite defaults otherwise).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_parser = parsed::<ObjectiveKind>)]
    objective: Option<ObjectiveKind>,
    #[arg(long, value_parser = parsed::<Schedule>)]
    schedule: Option<Schedule>,
    /// Suites to run (identity, equivalence, ranking, schedule, metrics). Default:
    /// all, or identity + equivalence when --objective is given.
    #[arg(long = "suite", value_parser = parsed::<Suite>)]
    suites: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_parser = parsed::<SweepParam>)]
    param: SweepParam,
    /// Comma-separated values; the parameter's standard grid by default.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// CSV path (printed to stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => io::write_file(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        scenes: a.scenes,
        bias_suite: a.bias_suite,
        data_seed: a.data_seed,
        rarity: a.rarity,
        vocab_seed: a.vocab_seed,
        ..DatasetSpec::default()
    };
    let ds = Dataset::synthesize(spec)?;
    io::write_dataset(&a.out, &ds, Provenance::new(&command_line(), None, Some(spec)), a.force)?;
    println!("wrote {} scenes to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let ds = io::read_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let results = harness::run_dataset(&ds, &cfg)?;
    let prov = Provenance::new(&command_line(), Some(&cfg), Some(ds.spec));
    let report = io::write_segment_outputs(&a.out, &ds, &results, &prov, a.force)?;
    println!(
        "segmented {} scenes: mIoU {:.4}  precision {:.4}  F1 {:.4}",
        report.scenes, report.aggregate.miou, report.aggregate.precision, report.aggregate.f1
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.run.config()?;
    if a.compare {
        let data = a.data.as_deref().expect("clap enforces --data");
        let ds = io::read_dataset(data)?;
        let rows = harness::compare_modes(&ds, &cfg)?;
        let table = harness::comparison_csv(&rows);
        if let Some(p) = &a.csv {
            io::write_file(p, &table)?;
        }
        let json = serde_json::json!({
            "modes": rows,
            "provenance": Provenance::new(&command_line(), Some(&cfg), Some(ds.spec)),
        });
        match &a.out {
            Some(p) => io::write_json(p, &json)?,
            None => print!("{table}"),
        }
        return Ok(());
    }
    let (pred, gt) = (a.pred.expect("clap enforces --pred"), a.gt.expect("clap enforces --gt"));
    let p = io::read_label_dir(&pred)?;
    let g = io::read_label_dir(&gt)?;
    let (aggregate, per_scene) = harness::evaluate_label_sets(&p, &g, cfg.metrics)?;
    if let Some(csv) = &a.csv {
        io::write_file(csv, io::per_scene_csv(per_scene.iter().map(|(n, r)| (n.as_str(), "", r))))?;
    }
    let json = serde_json::json!({
        "scenes": per_scene.len(),
        "aggregate": aggregate,
        "provenance": Provenance::new(&command_line(), Some(&cfg), None),
    });
    let text = serde_json::to_string_pretty(&json)? + "\n";
    emit(a.out.as_deref(), &text)
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let report = verify::run(&VerifyOptions {
        trials: a.trials,
        objective: a.objective,
        schedule: a.schedule,
        suites: a.suites,
        seed: a.seed,
    })?;
    for c in &report.cells {
        println!("{c}");
    }
    let failed = report.cells.iter().filter(|c| !c.passed).count();
    println!("{} cells, {} failed", report.cells.len(), failed);
    if let Some(p) = &a.json {
        io::write_json(p, &report)?;
    }
    Ok(report.passed())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let ds = io::read_dataset(&a.data)?;
    let values = if a.values.is_empty() { a.param.default_values() } else { a.values };
    let rows = harness::sweep(&ds, &cfg, a.param, &values)?;
    emit(a.out.as_deref(), &harness::sweep_csv(&rows))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Synth(a) => synth(a).map(|_| true),
        Cmd::Segment(a) => segment(a).map(|_| true),
        Cmd::Eval(a) => eval(a).map(|_| true),
        Cmd::Verify(a) => verify(a),
        Cmd::Sweep(a) => sweep(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
