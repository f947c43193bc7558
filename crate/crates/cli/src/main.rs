mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rotdrop::experiments::{self, Arm, DatasetSpec, ExperimentSpec};
use rotdrop::generators::{GeneratorConfig, GeneratorError, MaskGeneratorKind, PredefinedMask, ScheduleConfig};
use rotdrop::hw_cost::{self, CostOptions};
use rotdrop::lfsr::LfsrConfig;

use config::{ConfigFile, MaskStatsSection, SweepSection};

/// Bad flags or config; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "rotdrop", version, about = "Dropout mask generators, their hardware cost, and training studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print masks from a generator, one '0'/'1' literal per line
    GenMask(GenMaskArgs),
    /// Compare clock cycles, RNGs and comparators of the three generators
    HwCost(HwCostArgs),
    /// Train the none/general/proposed arms and report generalization gaps
    Train(TrainArgs),
    /// Train the rotation arm once per constant rotate amount
    SweepR(SweepArgs),
    /// Per-position and pairwise keep frequencies of a generator
    MaskStats(MaskStatsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScheduleMode {
    Constant,
    Sequence,
    Random,
}

fn parse_kind(s: &str) -> Result<MaskGeneratorKind, String> {
    MaskGeneratorKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    Arm::from_str(s).map_err(|e| e.to_string())
}

#[derive(Args, Debug, Default)]
struct GeneratorArgs {
    /// general-serial, general-parallel or proposed (`general` means serial)
    #[arg(long, value_parser = parse_kind)]
    kind: Option<MaskGeneratorKind>,
    /// Mask length in bits
    #[arg(long)]
    n: Option<usize>,
    /// Keep probability
    #[arg(long)]
    p: Option<f64>,
    /// Constant rotate amount (proposed)
    #[arg(long)]
    r: Option<usize>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleMode>,
    /// Rotate amounts cycled by the sequence schedule
    #[arg(long, value_delimiter = ',')]
    r_values: Vec<usize>,
    #[arg(long, value_enum)]
    predefined: Option<PredefinedArg>,
    /// LFSR register width: 8, 16 or 32
    #[arg(long)]
    lfsr_width: Option<u32>,
    /// LFSR taps, e.g. 8,6,5,4
    #[arg(long, value_delimiter = ',')]
    lfsr_taps: Vec<u32>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PredefinedArg {
    Exact,
    Bernoulli,
}

impl From<PredefinedArg> for PredefinedMask {
    fn from(p: PredefinedArg) -> Self {
        match p {
            PredefinedArg::Exact => PredefinedMask::Exact,
            PredefinedArg::Bernoulli => PredefinedMask::Bernoulli,
        }
    }
}

impl GeneratorArgs {
    fn resolve(&self, file: Option<GeneratorConfig>, seed: Option<u64>) -> anyhow::Result<GeneratorConfig> {
        let kind = self
            .kind
            .or(file.as_ref().map(|c| c.kind))
            .ok_or_else(|| usage("missing --kind (or [generator] kind in the config)"))?;
        let n = self
            .n
            .or(file.as_ref().map(|c| c.n))
            .ok_or_else(|| usage("missing --n (or [generator] n in the config)"))?;
        let mut cfg = file.unwrap_or_else(|| GeneratorConfig::new(kind, n, 0.5, 0));
        cfg.kind = kind;
        cfg.n = n;
        if let Some(p) = self.p {
            cfg.p = p;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.predefined {
            cfg.predefined = p.into();
        }
        if let Some(w) = self.lfsr_width {
            cfg.lfsr = LfsrConfig { width: w, taps: None };
        }
        if !self.lfsr_taps.is_empty() {
            cfg.lfsr.taps = Some(self.lfsr_taps.clone());
        }
        let mode = self.schedule.or(if !self.r_values.is_empty() {
            Some(ScheduleMode::Sequence)
        } else if self.r.is_some() {
            Some(ScheduleMode::Constant)
        } else {
            None
        });
        match mode {
            Some(ScheduleMode::Constant) => cfg.schedule = ScheduleConfig::Constant { r: self.r.unwrap_or(1) },
            Some(ScheduleMode::Sequence) if self.r_values.is_empty() => {
                return Err(usage("--schedule sequence needs --r-values"))
            }
            Some(ScheduleMode::Sequence) => cfg.schedule = ScheduleConfig::Sequence { values: self.r_values.clone() },
            Some(ScheduleMode::Random) => cfg.schedule = ScheduleConfig::Random { seed: None },
            None => {}
        }
        // Surface bad n/p/LFSR settings as usage errors before any work.
        cfg.build().map_err(|e: GeneratorError| usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenMaskArgs {
    #[command(flatten)]
    generator: GeneratorArgs,
    /// Number of masks
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Config file with a [generator] section
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write masks here instead of stdout
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HwCostArgs {
    /// Mask widths, e.g. --n 8,64
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// Emit CSV instead of tables
    #[arg(long)]
    csv: bool,
    /// Rotate the mask register in place (n register bits instead of 2n)
    #[arg(long)]
    in_place: bool,
    /// Accepted for uniformity; the cost model is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Config file with an [experiment] section
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Keep probability at hidden-layer outputs
    #[arg(long)]
    keep: Option<f64>,
    /// MNIST directory (overrides the config and ROTDROP_DATA_DIR)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Stratified training subset size
    #[arg(long)]
    train_subset: Option<usize>,
    /// Parent directory for run directories
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Exact output directory, bypassing the timestamped name
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl ExperimentArgs {
    fn resolve(&self, file: Option<ExperimentSpec>) -> anyhow::Result<ExperimentSpec> {
        let mut spec = file.unwrap_or_default();
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(t) = self.trials {
            spec.trials = t;
            spec.trial_seeds = None;
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
        }
        if let Some(k) = self.keep {
            spec.dropout.keep = k;
        }
        if self.data_dir.is_some() || self.train_subset.is_some() {
            match &mut spec.dataset {
                DatasetSpec::Mnist { dir, train_subset, .. } => {
                    if let Some(d) = &self.data_dir {
                        *dir = Some(d.clone());
                    }
                    if let Some(k) = self.train_subset {
                        *train_subset = Some(k);
                    }
                }
                DatasetSpec::Synthetic { .. } => {
                    return Err(usage("--data-dir/--train-subset apply to MNIST datasets only"));
                }
            }
        }
        spec.validate().map_err(|e| usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Arms to train, e.g. none,general,proposed
    #[arg(long, value_delimiter = ',', value_parser = parse_arm)]
    arms: Vec<Arm>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Constant rotate amounts to sweep
    #[arg(long = "r", value_delimiter = ',')]
    r_values: Vec<usize>,
}

#[derive(Args, Debug)]
struct MaskStatsArgs {
    #[command(flatten)]
    generator: GeneratorArgs,
    /// Number of masks to sample
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

const DEFAULT_R_VALUES: [usize; 6] = [1, 2, 4, 8, 16, 32];
const DEFAULT_STATS_SAMPLES: usize = 10_000;

/// `<parent>/<UTC timestamp>-seed<seed>`, suffixed if that already exists.
fn run_directory(explicit: Option<&Path>, parent: &Path, seed: u64) -> anyhow::Result<PathBuf> {
    if let Some(dir) = explicit {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        return Ok(dir.to_path_buf());
    }
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as i64);
    let stamp = chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-seed{seed}");
    let mut dir = parent.join(&base);
    let mut k = 2;
    while dir.exists() {
        dir = parent.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_config(dir: &Path, config: &ConfigFile) -> anyhow::Result<PathBuf> {
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn report_outputs(summary: &str, files: &[PathBuf]) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{summary}")?;
    for f in files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(())
}

fn cmd_gen_mask(args: GenMaskArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load_opt(args.config.as_deref())?;
    let cfg = args.generator.resolve(file.generator, args.seed)?;
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let masks = rotdrop::generators::generator_stream(&cfg, args.count)?;
    let mut text = String::with_capacity(args.count * (cfg.n + 1));
    for m in &masks {
        text.push_str(&m.to_string());
        text.push('\n');
    }
    match args.output {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_hw_cost(args: HwCostArgs) -> anyhow::Result<()> {
    if args.n.contains(&0) {
        return Err(usage("--n values must be at least 1"));
    }
    let options = CostOptions {
        in_place_register: args.in_place,
    };
    let comparisons = args
        .n
        .iter()
        .map(|&n| hw_cost::compare_costs_with(n, options))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = std::io::stdout().lock();
    if args.csv {
        out.write_all(hw_cost::comparisons_to_csv(&comparisons)?.as_bytes())?;
    } else {
        for c in &comparisons {
            writeln!(out, "{}", c.render_table())?;
        }
        out.write_all(hw_cost::qualitative_summary().as_bytes())?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load_opt(args.experiment.config.as_deref())?;
    let mut spec = args.experiment.resolve(file.experiment)?;
    if !args.arms.is_empty() {
        spec.arms = args.arms;
        spec.validate().map_err(|e| usage(e.to_string()))?;
    }
    let report = experiments::run_overfit_study(&spec)?;
    let dir = run_directory(args.experiment.run_dir.as_deref(), &args.experiment.out_dir, spec.seed)?;
    let mut files = experiments::emit_overfit_report(&report, &dir)?;
    let resolved = ConfigFile {
        experiment: Some(spec),
        ..ConfigFile::default()
    };
    files.push(write_config(&dir, &resolved)?);
    report_outputs(&experiments::overfit_summary_text(&report), &files)?;
    Ok(())
}

fn cmd_sweep_r(args: SweepArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load_opt(args.experiment.config.as_deref())?;
    let mut spec = args.experiment.resolve(file.experiment)?;
    spec.arms = vec![Arm::Proposed];
    let r_values = if !args.r_values.is_empty() {
        args.r_values
    } else if let Some(s) = file.sweep {
        s.r_values
    } else {
        DEFAULT_R_VALUES.to_vec()
    };
    if r_values.is_empty() {
        return Err(usage("r list must not be empty"));
    }
    let report = experiments::run_r_sweep(&spec, &r_values)?;
    let dir = run_directory(args.experiment.run_dir.as_deref(), &args.experiment.out_dir, spec.seed)?;
    let mut files = experiments::emit_sweep_report(&report, &dir)?;
    let resolved = ConfigFile {
        experiment: Some(spec),
        sweep: Some(SweepSection { r_values }),
        ..ConfigFile::default()
    };
    files.push(write_config(&dir, &resolved)?);
    report_outputs(&experiments::sweep_summary_text(&report), &files)?;
    Ok(())
}

fn cmd_mask_stats(args: MaskStatsArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load_opt(args.config.as_deref())?;
    let cfg = args.generator.resolve(file.generator, args.seed)?;
    let samples = args
        .samples
        .or(file.mask_stats.map(|m| m.samples))
        .unwrap_or(DEFAULT_STATS_SAMPLES);
    if samples < cfg.n {
        return Err(usage(format!("--samples must be at least n = {}", cfg.n)));
    }
    let report = experiments::mask_statistics(&cfg, samples)?;
    let dir = run_directory(args.run_dir.as_deref(), &args.out_dir, cfg.seed)?;
    let mut files = experiments::emit_mask_stats(&report, &dir)?;
    let resolved = ConfigFile {
        generator: Some(cfg),
        mask_stats: Some(MaskStatsSection { samples }),
        ..ConfigFile::default()
    };
    files.push(write_config(&dir, &resolved)?);
    report_outputs(&experiments::mask_stats_summary_text(&report), &files)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenMask(a) => cmd_gen_mask(a),
        Command::HwCost(a) => cmd_hw_cost(a),
        Command::Train(a) => cmd_train(a),
        Command::SweepR(a) => cmd_sweep_r(a),
        Command::MaskStats(a) => cmd_mask_stats(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // reader went away (e.g. piped into `head`)
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
