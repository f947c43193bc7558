//! Multi-trial training studies and mask statistics, with CSV/text output.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Dataset, Split, SyntheticKind, DATA_DIR_ENV};
use crate::generators::{
    derive_seed, GeneratorConfig, GeneratorError, MaskGenerator, MaskGeneratorKind, MaskSource, PredefinedMask,
    ScheduleConfig,
};
use crate::hw_cost::{self, compare_costs};
use crate::lfsr::LfsrConfig;
use crate::mask::{BitMask, RotateAmount};
use crate::nn::{self, Activation, DropoutSite, EpochMetrics, Mlp, NnError, TrainConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("arm {arm}, trial {trial}: {source}")]
    Training {
        arm: Arm,
        trial: usize,
        #[source]
        source: NnError,
    },
    #[error("arm {arm}, trial {trial}: {violations} of {masks} masks changed popcount")]
    PopcountDrift {
        arm: Arm,
        trial: usize,
        violations: u64,
        masks: u64,
    },
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("no MNIST directory given and {DATA_DIR_ENV} is unset; {}", data::FETCH_INSTRUCTIONS)]
    MissingDataDir,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Dropout strategy of one arm of a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    None,
    General,
    Proposed,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::None, Arm::General, Arm::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::General => "general",
            Arm::Proposed => "proposed",
        }
    }

    fn generator_kind(self) -> Option<MaskGeneratorKind> {
        match self {
            Arm::None => None,
            Arm::General => Some(MaskGeneratorKind::GeneralSerial),
            Arm::Proposed => Some(MaskGeneratorKind::ProposedRotation),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arm {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Arm::None),
            "general" => Ok(Arm::General),
            "proposed" => Ok(Arm::Proposed),
            other => Err(ExperimentError::InvalidSpec(format!(
                "unknown arm {other:?}; expected none, general or proposed"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX files in `dir`, or in `$ROTDROP_DATA_DIR` when `dir` is unset.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        /// Stratified training subset size; the whole file when unset.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_subset: Option<usize>,
    },
    Synthetic {
        generator: SyntheticKind,
        train_size: usize,
        test_size: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Mnist {
            dir: None,
            train_subset: Some(1000),
            test_subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![300, 100],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
        }
    }
}

/// Mask generator settings shared by the dropout arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    /// Keep probability at every hidden-layer output.
    pub keep: f64,
    /// Keep probability on the input layer; no input dropout when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_keep: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub predefined: PredefinedMask,
    /// Defaults to 32 bits: an 8-bit register repeats its uniform stream
    /// every 255 draws, which leaves a 300-wide layer only 17 distinct masks.
    #[serde(default = "training_lfsr")]
    pub lfsr: LfsrConfig,
}

fn training_lfsr() -> LfsrConfig {
    LfsrConfig { width: 32, taps: None }
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self {
            keep: 0.5,
            input_keep: None,
            schedule: ScheduleConfig::default(),
            predefined: PredefinedMask::default(),
            lfsr: training_lfsr(),
        }
    }
}

/// Unset fields take the desk-scale defaults: a stratified 1,000-image MNIST
/// subset, a 784-300-100-10 relu network, 30 epochs of batch-100 SGD at
/// learning rate 0.1, keep probability 0.5 and 5 trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSettings,
    pub dropout: DropoutSpec,
    pub arms: Vec<Arm>,
    pub trials: usize,
    pub seed: u64,
    /// Explicit per-trial seeds; derived from `seed` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trial_seeds: Option<Vec<u64>>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "overfit".into(),
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainSettings::default(),
            dropout: DropoutSpec::default(),
            arms: Arm::ALL.to_vec(),
            trials: 5,
            seed: 0,
            trial_seeds: None,
        }
    }
}

const TRIAL_STREAM_BASE: u64 = 100;
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const MASK_STREAM_BASE: u64 = 10;
const SUBSET_STREAM: u64 = 3;

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let invalid = |m: String| Err(ExperimentError::InvalidSpec(m));
        if self.trials == 0 {
            return invalid("trials must be at least 1".into());
        }
        if self.arms.is_empty() {
            return invalid("arms must not be empty".into());
        }
        if let Some(seeds) = &self.trial_seeds {
            if seeds.len() != self.trials {
                return invalid(format!("{} trial seeds for {} trials", seeds.len(), self.trials));
            }
        }
        if self.model.hidden.contains(&0) {
            return invalid("hidden layer widths must be positive".into());
        }
        for p in std::iter::once(self.dropout.keep).chain(self.dropout.input_keep) {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("keep probability {p} outside [0, 1]"));
            }
        }
        self.train_config(0).validate().map_err(|e| ExperimentError::InvalidSpec(e.to_string()))
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        match &self.trial_seeds {
            Some(seeds) => seeds[trial],
            None => derive_seed(self.seed, TRIAL_STREAM_BASE + trial as u64),
        }
    }

    fn train_config(&self, trial_seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            seed: derive_seed(trial_seed, SHUFFLE_STREAM),
        }
    }

    /// Widths of every layer, input and output included.
    pub fn layer_sizes(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.model.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }

    /// `(layer_input, keep)` for every dropout site.
    pub fn dropout_sites(&self) -> Vec<(usize, f64)> {
        self.dropout
            .input_keep
            .map(|p| (0, p))
            .into_iter()
            .chain((1..=self.model.hidden.len()).map(|i| (i, self.dropout.keep)))
            .collect()
    }
}

/// Loads the training and test sets an experiment runs on.
pub fn load_datasets(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset), ExperimentError> {
    match spec {
        DatasetSpec::Mnist {
            dir,
            train_subset,
            test_subset,
        } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => std::env::var_os(DATA_DIR_ENV)
                    .map(PathBuf::from)
                    .ok_or(ExperimentError::MissingDataDir)?,
            };
            let (mut train, mut test) = data::load_mnist(&dir)?;
            let subset_seed = derive_seed(seed, SUBSET_STREAM);
            if let Some(k) = train_subset {
                train = data::subset(&train, *k, subset_seed)?;
            }
            if let Some(k) = test_subset {
                test = data::subset(&test, *k, subset_seed)?;
            }
            Ok((train, test))
        }
        DatasetSpec::Synthetic {
            generator,
            train_size,
            test_size,
        } => {
            let train = data::make_synthetic(generator, *train_size, seed, Split::Train)?;
            let test = data::make_synthetic(generator, *test_size, seed, Split::Test)?;
            Ok((train, test))
        }
    }
}

/// Counts masks whose popcount differs from the predefined mask.
struct AuditedSource {
    inner: MaskGenerator,
    expected: Option<usize>,
    masks: u64,
    violations: u64,
}

impl AuditedSource {
    fn new(inner: MaskGenerator) -> Self {
        let expected = inner.as_proposed().map(|g| g.predefined().count_ones());
        Self {
            inner,
            expected,
            masks: 0,
            violations: 0,
        }
    }
}

impl MaskSource for AuditedSource {
    fn next_mask(&mut self) -> BitMask {
        let mask = self.inner.next_mask();
        self.masks += 1;
        if self.expected.is_some_and(|e| e != mask.count_ones()) {
            self.violations += 1;
        }
        mask
    }

    fn mask_len(&self) -> usize {
        self.inner.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PopcountAudit {
    pub masks: u64,
    pub violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub arm: Arm,
    pub trial: usize,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    /// Proposed arm only.
    pub audit: Option<PopcountAudit>,
}

impl TrialResult {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.metrics.last().expect("at least one epoch")
    }

    /// Final-epoch training-phase accuracy minus test accuracy.
    pub fn final_gap(&self) -> f64 {
        let m = self.final_metrics();
        m.train_accuracy - m.test_accuracy
    }

    /// As `final_gap`, with the training set scored by the unmasked network.
    pub fn final_eval_gap(&self) -> f64 {
        let m = self.final_metrics();
        m.train_eval_accuracy - m.test_accuracy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_accuracy: MeanSd,
    pub test_accuracy: MeanSd,
    pub train_loss: MeanSd,
    pub test_loss: MeanSd,
    pub train_eval_accuracy: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub epochs: Vec<EpochStats>,
    pub final_train_accuracy: MeanSd,
    pub final_test_accuracy: MeanSd,
    pub final_gap: MeanSd,
    pub final_train_eval_accuracy: MeanSd,
    pub final_eval_gap: MeanSd,
}

fn summarize<'a>(arm: Arm, trials: impl Iterator<Item = &'a TrialResult> + Clone) -> ArmSummary {
    let epochs = trials.clone().next().map_or(0, |t| t.metrics.len());
    let stat = |e: usize, f: fn(&EpochMetrics) -> f64| MeanSd::of(trials.clone().map(|t| f(&t.metrics[e])));
    ArmSummary {
        arm,
        epochs: (0..epochs)
            .map(|e| EpochStats {
                epoch: e + 1,
                train_accuracy: stat(e, |m| m.train_accuracy),
                test_accuracy: stat(e, |m| m.test_accuracy),
                train_loss: stat(e, |m| m.train_loss),
                test_loss: stat(e, |m| m.test_loss),
                train_eval_accuracy: stat(e, |m| m.train_eval_accuracy),
            })
            .collect(),
        final_train_accuracy: MeanSd::of(trials.clone().map(|t| t.final_metrics().train_accuracy)),
        final_test_accuracy: MeanSd::of(trials.clone().map(|t| t.final_metrics().test_accuracy)),
        final_gap: MeanSd::of(trials.clone().map(TrialResult::final_gap)),
        final_train_eval_accuracy: MeanSd::of(trials.clone().map(|t| t.final_metrics().train_eval_accuracy)),
        final_eval_gap: MeanSd::of(trials.map(TrialResult::final_eval_gap)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverfitReport {
    pub name: String,
    pub layer_sizes: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Ordered by arm (as listed in the spec), then trial.
    pub trials: Vec<TrialResult>,
    pub summaries: Vec<ArmSummary>,
}

impl OverfitReport {
    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}

/// Trains one arm for one trial. Arms of the same trial share the weight
/// initialization, shuffle order and mask seeds.
fn run_trial(
    spec: &ExperimentSpec,
    schedule: &ScheduleConfig,
    arm: Arm,
    trial: usize,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrialResult, ExperimentError> {
    let seed = spec.trial_seed(trial);
    let sizes = spec.layer_sizes(train_set.feature_dim(), train_set.num_classes());
    let wrap = |source| ExperimentError::Training { arm, trial, source };
    let mut mlp = Mlp::new(&sizes, spec.model.activation, derive_seed(seed, INIT_STREAM)).map_err(wrap)?;

    let mut sources = Vec::new();
    if let Some(kind) = arm.generator_kind() {
        for (i, (layer_input, keep)) in spec.dropout_sites().into_iter().enumerate() {
            let config = GeneratorConfig {
                kind,
                n: sizes[layer_input],
                p: keep,
                seed: derive_seed(seed, MASK_STREAM_BASE + i as u64),
                lfsr: spec.dropout.lfsr.clone(),
                schedule: schedule.clone(),
                predefined: spec.dropout.predefined,
            };
            sources.push((layer_input, keep, AuditedSource::new(config.build()?)));
        }
    }
    let mut sites: Vec<DropoutSite<'_>> = sources
        .iter_mut()
        .map(|(layer_input, keep, source)| DropoutSite {
            layer_input: *layer_input,
            keep: *keep,
            source,
        })
        .collect();
    let metrics = nn::train(&mut mlp, train_set, test_set, &spec.train_config(seed), &mut sites).map_err(wrap)?;
    drop(sites);

    let audit = (arm == Arm::Proposed).then(|| PopcountAudit {
        masks: sources.iter().map(|s| s.2.masks).sum(),
        violations: sources.iter().map(|s| s.2.violations).sum(),
    });
    if let Some(a) = audit {
        if a.violations > 0 {
            return Err(ExperimentError::PopcountDrift {
                arm,
                trial,
                violations: a.violations,
                masks: a.masks,
            });
        }
        log::info!("arm {arm} trial {trial}: popcount constant over {} masks", a.masks);
    }
    Ok(TrialResult {
        arm,
        trial,
        seed,
        metrics,
        audit,
    })
}

fn run_jobs(
    spec: &ExperimentSpec,
    jobs: &[(Arm, ScheduleConfig, usize)],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<TrialResult>, ExperimentError> {
    // rayon's ordered collect keeps the merge keyed by job position
    jobs.par_iter()
        .map(|(arm, schedule, trial)| run_trial(spec, schedule, *arm, *trial, train_set, test_set))
        .collect()
}

/// Trains every arm for every trial and aggregates final-epoch metrics.
pub fn run_overfit_study(spec: &ExperimentSpec) -> Result<OverfitReport, ExperimentError> {
    spec.validate()?;
    let (train_set, test_set) = load_datasets(&spec.dataset, spec.seed)?;
    run_overfit_study_on(spec, &train_set, &test_set)
}

pub fn run_overfit_study_on(
    spec: &ExperimentSpec,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<OverfitReport, ExperimentError> {
    spec.validate()?;
    let mut arms = Vec::new();
    for &arm in &spec.arms {
        if !arms.contains(&arm) {
            arms.push(arm);
        }
    }
    let jobs: Vec<_> = arms
        .iter()
        .flat_map(|&arm| (0..spec.trials).map(move |t| (arm, t)))
        .map(|(arm, t)| (arm, spec.dropout.schedule.clone(), t))
        .collect();
    let trials = run_jobs(spec, &jobs, train_set, test_set)?;
    let summaries = arms
        .iter()
        .map(|&arm| summarize(arm, trials.iter().filter(move |t| t.arm == arm)))
        .collect();
    Ok(OverfitReport {
        name: spec.name.clone(),
        layer_sizes: spec.layer_sizes(train_set.feature_dim(), train_set.num_classes()),
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        trials,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub r: usize,
    /// `r mod width` for each dropout site.
    pub effective: Vec<usize>,
    /// Some site never rotates (`r mod width == 0`).
    pub degenerate: bool,
    pub trials: Vec<TrialResult>,
    pub final_test_accuracy: MeanSd,
    pub final_train_accuracy: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub name: String,
    pub layer_sizes: Vec<usize>,
    pub points: Vec<SweepPoint>,
    pub warnings: Vec<String>,
}

impl SweepReport {
    /// Max minus min of mean final test accuracy over the listed r values.
    pub fn spread(&self, rs: &[usize]) -> Option<f64> {
        let means: Vec<f64> = self
            .points
            .iter()
            .filter(|p| rs.contains(&p.r))
            .map(|p| p.final_test_accuracy.mean)
            .collect();
        if means.is_empty() {
            return None;
        }
        let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().copied().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }
}

/// Proposed arm with a constant rotation per r value.
pub fn run_r_sweep(spec: &ExperimentSpec, r_values: &[usize]) -> Result<SweepReport, ExperimentError> {
    spec.validate()?;
    let (train_set, test_set) = load_datasets(&spec.dataset, spec.seed)?;
    run_r_sweep_on(spec, r_values, &train_set, &test_set)
}

pub fn run_r_sweep_on(
    spec: &ExperimentSpec,
    r_values: &[usize],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<SweepReport, ExperimentError> {
    spec.validate()?;
    if r_values.is_empty() {
        return Err(ExperimentError::InvalidSpec("r list must not be empty".into()));
    }
    let sizes = spec.layer_sizes(train_set.feature_dim(), train_set.num_classes());
    let widths: Vec<usize> = spec.dropout_sites().iter().map(|&(l, _)| sizes[l]).collect();
    let mut distinct_widths = widths.clone();
    distinct_widths.sort_unstable();
    distinct_widths.dedup();
    if widths.is_empty() {
        return Err(ExperimentError::InvalidSpec("r sweep needs at least one dropout site".into()));
    }
    let mut warnings = Vec::new();
    for &r in r_values {
        for &w in &distinct_widths {
            if r >= w {
                let msg = format!("r = {r} is not below layer width {w}; effective rotation is {}", r % w);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    let jobs: Vec<_> = r_values
        .iter()
        .flat_map(|&r| (0..spec.trials).map(move |t| (Arm::Proposed, ScheduleConfig::Constant { r }, t)))
        .collect();
    let mut results = run_jobs(spec, &jobs, train_set, test_set)?.into_iter();
    let points = r_values
        .iter()
        .map(|&r| {
            let trials: Vec<TrialResult> = results.by_ref().take(spec.trials).collect();
            let effective: Vec<usize> = widths.iter().map(|&w| RotateAmount(r).effective(w)).collect();
            SweepPoint {
                r,
                degenerate: effective.contains(&0),
                effective,
                final_test_accuracy: MeanSd::of(trials.iter().map(|t| t.final_metrics().test_accuracy)),
                final_train_accuracy: MeanSd::of(trials.iter().map(|t| t.final_metrics().train_accuracy)),
                trials,
            }
        })
        .collect();
    Ok(SweepReport {
        name: spec.name.clone(),
        layer_sizes: sizes,
        points,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStatsReport {
    pub kind: MaskGeneratorKind,
    pub samples: usize,
    pub keep_frequency: Vec<f64>,
    pub overall_keep_rate: f64,
    /// Proposed generator with a periodic schedule only.
    pub orbit_period: Option<usize>,
    /// `co_keep[i][j]`: fraction of masks keeping both `i` and `j`.
    pub co_keep: Vec<Vec<f64>>,
}

/// Empirical statistics over the first `samples` masks of a generator.
pub fn mask_statistics(config: &GeneratorConfig, samples: usize) -> Result<MaskStatsReport, ExperimentError> {
    let n = config.n;
    if samples < n.max(1) {
        return Err(ExperimentError::InvalidSpec(format!(
            "need at least n = {n} samples, got {samples}"
        )));
    }
    let mut generator = config.build()?;
    let orbit_period = generator.as_proposed().and_then(|g| g.orbit_period());
    let mut kept = vec![0u64; n];
    let mut pairs = vec![0u64; n * n];
    let mut ones = Vec::with_capacity(n);
    for _ in 0..samples {
        let mask = generator.next_mask();
        ones.clear();
        ones.extend(mask.iter().enumerate().filter(|&(_, b)| b).map(|(i, _)| i));
        for &i in &ones {
            kept[i] += 1;
            let row = &mut pairs[i * n..(i + 1) * n];
            for &j in &ones {
                row[j] += 1;
            }
        }
    }
    let t = samples as f64;
    Ok(MaskStatsReport {
        kind: config.kind,
        samples,
        keep_frequency: kept.iter().map(|&k| k as f64 / t).collect(),
        overall_keep_rate: kept.iter().sum::<u64>() as f64 / (t * n as f64),
        orbit_period,
        co_keep: pairs.chunks(n).map(|row| row.iter().map(|&c| c as f64 / t).collect()).collect(),
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub const OVERFIT_CSV_HEADER: [&str; 6] = ["arm", "trial", "epoch", "split", "accuracy", "loss"];
pub const SWEEP_CSV_HEADER: [&str; 5] = ["r", "trial", "epoch", "split", "accuracy"];
pub const ARM_SUMMARY_CSV_HEADER: [&str; 12] = [
    "arm",
    "epoch",
    "train_acc_mean",
    "train_acc_sd",
    "test_acc_mean",
    "test_acc_sd",
    "train_loss_mean",
    "train_loss_sd",
    "test_loss_mean",
    "test_loss_sd",
    "train_eval_acc_mean",
    "train_eval_acc_sd",
];
pub const SWEEP_SUMMARY_CSV_HEADER: [&str; 7] = [
    "r",
    "effective_r",
    "degenerate",
    "test_acc_mean",
    "test_acc_sd",
    "train_acc_mean",
    "train_acc_sd",
];
pub const MASK_STATS_CSV_HEADER: [&str; 2] = ["position", "keep_freq"];

pub fn write_overfit_csv<W: Write>(trials: &[TrialResult], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OVERFIT_CSV_HEADER)?;
    for t in trials {
        for m in &t.metrics {
            for (split, acc, loss) in [
                ("train", m.train_accuracy, m.train_loss),
                ("test", m.test_accuracy, m.test_loss),
                ("train-eval", m.train_eval_accuracy, m.train_eval_loss),
            ] {
                w.write_record([
                    t.arm.name().to_string(),
                    t.trial.to_string(),
                    m.epoch.to_string(),
                    split.to_string(),
                    fmt_f(acc),
                    fmt_f(loss),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Per-arm, per-epoch mean and sd over trials.
pub fn write_arm_summary_csv<W: Write>(summaries: &[ArmSummary], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ARM_SUMMARY_CSV_HEADER)?;
    for s in summaries {
        for e in &s.epochs {
            let mut row = vec![s.arm.name().to_string(), e.epoch.to_string()];
            for m in [e.train_accuracy, e.test_accuracy, e.train_loss, e.test_loss, e.train_eval_accuracy] {
                row.push(fmt_f(m.mean));
                row.push(fmt_f(m.sd));
            }
            w.write_record(row)?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One row per r value. `effective_r` lists `r mod width` per site, `;`-separated.
pub fn write_sweep_summary_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_SUMMARY_CSV_HEADER)?;
    for p in points {
        let effective: Vec<String> = p.effective.iter().map(usize::to_string).collect();
        w.write_record([
            p.r.to_string(),
            effective.join(";"),
            p.degenerate.to_string(),
            fmt_f(p.final_test_accuracy.mean),
            fmt_f(p.final_test_accuracy.sd),
            fmt_f(p.final_train_accuracy.mean),
            fmt_f(p.final_train_accuracy.sd),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    for p in points {
        for t in &p.trials {
            for m in &t.metrics {
                for (split, acc) in [
                    ("train", m.train_accuracy),
                    ("test", m.test_accuracy),
                    ("train-eval", m.train_eval_accuracy),
                ] {
                    w.write_record([
                        p.r.to_string(),
                        t.trial.to_string(),
                        m.epoch.to_string(),
                        split.to_string(),
                        fmt_f(acc),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_mask_stats_csv<W: Write>(report: &MaskStatsReport, out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MASK_STATS_CSV_HEADER)?;
    for (i, f) in report.keep_frequency.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f(*f)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Square matrix, one row per line, no header.
pub fn write_co_keep_csv<W: Write>(report: &MaskStatsReport, out: W) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in &report.co_keep {
        w.write_record(row.iter().map(|v| fmt_f(*v)))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn pct(m: MeanSd) -> String {
    format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.sd)
}

/// Distinct dropout-site widths, for the hardware cost tables.
fn site_widths(layer_sizes: &[usize]) -> Vec<usize> {
    let mut widths: Vec<usize> = layer_sizes[1..layer_sizes.len().saturating_sub(1)].to_vec();
    widths.sort_unstable();
    widths.dedup();
    widths
}

fn hw_section(out: &mut String, layer_sizes: &[usize]) {
    out.push_str("\nMask generation cost per layer width\n\n");
    for n in site_widths(layer_sizes) {
        if let Ok(c) = compare_costs(n) {
            out.push_str(&c.render_table());
            out.push('\n');
        }
    }
    out.push_str(&hw_cost::qualitative_summary());
}

pub fn overfit_summary_text(report: &OverfitReport) -> String {
    let trials = report.trials.iter().map(|t| t.trial).max().map_or(0, |m| m + 1);
    let sizes: Vec<String> = report.layer_sizes.iter().map(usize::to_string).collect();
    let mut out = format!(
        "Experiment {}\nnetwork {}, {} train / {} test samples, {} trial(s)\n\n",
        report.name,
        sizes.join("-"),
        report.train_samples,
        report.test_samples,
        trials
    );
    out.push_str("Final epoch, mean ± sd over trials. \"train\" is the running accuracy with masks\n");
    out.push_str("applied; \"train-eval\" scores the training set with the unmasked network.\n\n");
    out.push_str("arm        train (%)         test (%)          gap (pp)          train-eval (%)    eval gap (pp)\n");
    for s in &report.summaries {
        out.push_str(&format!(
            "{:<10} {}  {}  {}  {}  {}\n",
            s.arm.name(),
            pct(s.final_train_accuracy),
            pct(s.final_test_accuracy),
            pct(s.final_gap),
            pct(s.final_train_eval_accuracy),
            pct(s.final_eval_gap)
        ));
    }
    for t in &report.trials {
        if let Some(a) = t.audit {
            out.push_str(&format!(
                "popcount audit: {} trial {}: {} masks, {} violations\n",
                t.arm, t.trial, a.masks, a.violations
            ));
        }
    }
    hw_section(&mut out, &report.layer_sizes);
    out
}

pub fn sweep_summary_text(report: &SweepReport) -> String {
    let sizes: Vec<String> = report.layer_sizes.iter().map(usize::to_string).collect();
    let mut out = format!("Rotation sweep {}\nnetwork {}\n\n", report.name, sizes.join("-"));
    out.push_str("r      test acc (%)      train acc (%)     note\n");
    for p in &report.points {
        out.push_str(&format!(
            "{:<6} {}  {}  {}\n",
            p.r,
            pct(p.final_test_accuracy),
            pct(p.final_train_accuracy),
            if p.degenerate { "degenerate: mask never moves" } else { "" }
        ));
    }
    for w in &report.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

pub fn mask_stats_summary_text(report: &MaskStatsReport) -> String {
    let min = report.keep_frequency.iter().copied().fold(f64::INFINITY, f64::min);
    let max = report.keep_frequency.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!(
        "Mask statistics: {} generator, n = {}, {} masks\noverall keep rate {:.6}\nper-position keep frequency in [{:.6}, {:.6}]\n",
        report.kind,
        report.keep_frequency.len(),
        report.samples,
        report.overall_keep_rate,
        min,
        max
    );
    match report.orbit_period {
        Some(p) => out.push_str(&format!("orbit period {p}\n")),
        None if report.kind == MaskGeneratorKind::ProposedRotation => out.push_str("orbit period: aperiodic schedule\n"),
        None => {}
    }
    out
}

fn write_file(path: PathBuf, contents: impl FnOnce(&mut Vec<u8>) -> Result<(), ExperimentError>) -> Result<PathBuf, ExperimentError> {
    let mut buf = Vec::new();
    contents(&mut buf)?;
    fs::write(&path, buf).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes `overfit.csv`, `arm_summary.csv` and `summary.txt` into `dir`.
pub fn emit_overfit_report(report: &OverfitReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    ensure_dir(dir)?;
    Ok(vec![
        write_file(dir.join("overfit.csv"), |b| write_overfit_csv(&report.trials, b))?,
        write_file(dir.join("arm_summary.csv"), |b| write_arm_summary_csv(&report.summaries, b))?,
        write_file(dir.join("summary.txt"), |b| {
            b.extend_from_slice(overfit_summary_text(report).as_bytes());
            Ok(())
        })?,
    ])
}

/// Writes `sweep.csv`, `sweep_summary.csv` and `summary.txt` into `dir`.
pub fn emit_sweep_report(report: &SweepReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    ensure_dir(dir)?;
    Ok(vec![
        write_file(dir.join("sweep.csv"), |b| write_sweep_csv(&report.points, b))?,
        write_file(dir.join("sweep_summary.csv"), |b| write_sweep_summary_csv(&report.points, b))?,
        write_file(dir.join("summary.txt"), |b| {
            b.extend_from_slice(sweep_summary_text(report).as_bytes());
            Ok(())
        })?,
    ])
}

/// Writes `mask_stats.csv`, `co_keep.csv` and `summary.txt` into `dir`.
pub fn emit_mask_stats(report: &MaskStatsReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    ensure_dir(dir)?;
    Ok(vec![
        write_file(dir.join("mask_stats.csv"), |b| write_mask_stats_csv(report, b))?,
        write_file(dir.join("co_keep.csv"), |b| write_co_keep_csv(report, b))?,
        write_file(dir.join("summary.txt"), |b| {
            b.extend_from_slice(mask_stats_summary_text(report).as_bytes());
            Ok(())
        })?,
    ])
}
