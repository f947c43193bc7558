//! Mask generators: the comparator-based general method (serial and parallel
//! hardware variants) and the rotation-based method.
//!
//! Serial and parallel general generators are functionally identical. Both
//! draw one LFSR uniform per bit in position order; they only differ in
//! [`crate::hw_cost`]. The rotation generator keeps one predefined mask and
//! rotates the working copy by a scheduled amount each step, so every emitted
//! mask has the same popcount as the predefined one.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lfsr::{Lfsr, LfsrConfig, LfsrError};
use crate::mask::{
    make_bernoulli_mask, make_exact_mask, BitMask, KeepProbability, MaskError, RotateAmount,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Lfsr(#[from] LfsrError),
    #[error("rotation sequence must not be empty")]
    EmptySequence,
    #[error("mask count must be at least 1")]
    ZeroCount,
    #[error("unknown generator kind {0:?}; expected general-serial, general-parallel or proposed")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskGeneratorKind {
    #[serde(alias = "general", alias = "serial")]
    GeneralSerial,
    #[serde(alias = "parallel")]
    GeneralParallel,
    #[serde(rename = "proposed", alias = "proposed-rotation", alias = "rotation")]
    ProposedRotation,
}

impl MaskGeneratorKind {
    pub const ALL: [MaskGeneratorKind; 3] = [
        MaskGeneratorKind::GeneralSerial,
        MaskGeneratorKind::GeneralParallel,
        MaskGeneratorKind::ProposedRotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskGeneratorKind::GeneralSerial => "general-serial",
            MaskGeneratorKind::GeneralParallel => "general-parallel",
            MaskGeneratorKind::ProposedRotation => "proposed",
        }
    }

    pub fn is_general(self) -> bool {
        !matches!(self, MaskGeneratorKind::ProposedRotation)
    }
}

impl fmt::Display for MaskGeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskGeneratorKind {
    type Err = GeneratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "general-serial" | "general" | "serial" => Ok(Self::GeneralSerial),
            "general-parallel" | "parallel" => Ok(Self::GeneralParallel),
            "proposed" | "proposed-rotation" | "rotation" => Ok(Self::ProposedRotation),
            other => Err(GeneratorError::UnknownKind(other.to_string())),
        }
    }
}

/// How the predefined mask of the rotation generator is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredefinedMask {
    /// Exactly `round(p * n)` ones.
    #[default]
    Exact,
    /// Independent Bernoulli(p) bits.
    Bernoulli,
}

/// Rotation schedule as written in configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant { r: usize },
    Sequence { values: Vec<usize> },
    /// `r` drawn uniformly from `1..n`; the seed defaults to one derived
    /// from the generator seed.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Constant { r: 1 }
    }
}

#[derive(Debug, Clone)]
pub enum RotationSchedule {
    Constant(RotateAmount),
    Sequence { values: Vec<usize>, next: usize },
    SeededRandom(ChaCha8Rng),
}

impl RotationSchedule {
    pub fn constant(r: usize) -> Self {
        RotationSchedule::Constant(RotateAmount(r))
    }

    pub fn sequence(values: Vec<usize>) -> Result<Self, GeneratorError> {
        if values.is_empty() {
            return Err(GeneratorError::EmptySequence);
        }
        Ok(RotationSchedule::Sequence { values, next: 0 })
    }

    pub fn seeded_random(seed: u64) -> Self {
        RotationSchedule::SeededRandom(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_config(config: &ScheduleConfig, generator_seed: u64) -> Result<Self, GeneratorError> {
        match config {
            ScheduleConfig::Constant { r } => Ok(Self::constant(*r)),
            ScheduleConfig::Sequence { values } => Self::sequence(values.clone()),
            ScheduleConfig::Random { seed } => Ok(Self::seeded_random(
                seed.unwrap_or_else(|| derive_seed(generator_seed, SCHEDULE_STREAM)),
            )),
        }
    }

    /// Next rotation amount for a mask of length `n`.
    pub fn next_amount(&mut self, n: usize) -> RotateAmount {
        match self {
            RotationSchedule::Constant(r) => *r,
            RotationSchedule::Sequence { values, next } => {
                let r = values[*next];
                *next = (*next + 1) % values.len();
                RotateAmount(r)
            }
            RotationSchedule::SeededRandom(rng) => {
                if n < 2 {
                    RotateAmount(0)
                } else {
                    RotateAmount(rng.gen_range(1..n))
                }
            }
        }
    }

    // Number of distinct schedule states, None when unbounded.
    fn cycle_len(&self) -> Option<usize> {
        match self {
            RotationSchedule::Constant(_) => Some(1),
            RotationSchedule::Sequence { values, .. } => Some(values.len()),
            RotationSchedule::SeededRandom(_) => None,
        }
    }

    fn phase(&self) -> usize {
        match self {
            RotationSchedule::Sequence { next, .. } => *next,
            _ => 0,
        }
    }
}

const PREDEFINED_STREAM: u64 = 1;
const SCHEDULE_STREAM: u64 = 2;
const LFSR_STREAM: u64 = 3;

/// Derives an independent 64-bit seed for a numbered sub-stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Comparator method: `n` fresh uniforms against the drop ratio `d = 1 - p`;
/// bit `i` is 1 iff the `i`-th uniform is `>= d`.
pub fn general_next_mask(
    n: usize,
    p: KeepProbability,
    rng: &mut Lfsr,
) -> Result<BitMask, MaskError> {
    let drop_ratio = p.drop_ratio();
    BitMask::from_fn(n, |_| rng.uniform(rng.width()) >= drop_ratio)
}

#[derive(Debug, Clone)]
pub struct GeneralGenerator {
    kind: MaskGeneratorKind,
    n: usize,
    p: KeepProbability,
    rng: Lfsr,
}

impl GeneralGenerator {
    pub fn new(kind: MaskGeneratorKind, n: usize, p: KeepProbability, rng: Lfsr) -> Result<Self, GeneratorError> {
        debug_assert!(kind.is_general());
        if n == 0 {
            return Err(MaskError::ZeroLength.into());
        }
        Ok(Self { kind, n, p, rng })
    }

    pub fn next_mask(&mut self) -> BitMask {
        general_next_mask(self.n, self.p, &mut self.rng).expect("length validated at construction")
    }

    pub fn rng(&self) -> &Lfsr {
        &self.rng
    }
}

#[derive(Debug, Clone)]
pub struct ProposedGenerator {
    predefined: BitMask,
    current: BitMask,
    schedule: RotationSchedule,
}

impl ProposedGenerator {
    pub fn new(predefined: BitMask, schedule: RotationSchedule) -> Self {
        Self {
            current: predefined.clone(),
            predefined,
            schedule,
        }
    }

    pub fn predefined(&self) -> &BitMask {
        &self.predefined
    }

    pub fn current(&self) -> &BitMask {
        &self.current
    }

    /// Rotates the working mask by the next scheduled amount and returns it.
    pub fn next_mask(&mut self) -> BitMask {
        let r = self.schedule.next_amount(self.current.len());
        self.current = self.current.rotate_left(r);
        self.current.clone()
    }

    /// Steps until the generator state (working mask and schedule phase)
    /// returns to where it is now. `None` for random schedules.
    pub fn orbit_period(&self) -> Option<usize> {
        let bound = self.current.len() * self.schedule.cycle_len()?;
        let mut probe = self.clone();
        for steps in 1..=bound {
            probe.next_mask();
            if probe.current == self.current && probe.schedule.phase() == self.schedule.phase() {
                return Some(steps);
            }
        }
        unreachable!("rotation orbit longer than n times the schedule length")
    }
}

/// Full description of a generator; everything it emits follows from this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: MaskGeneratorKind,
    pub n: usize,
    pub p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lfsr: LfsrConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub predefined: PredefinedMask,
}

impl GeneratorConfig {
    pub fn new(kind: MaskGeneratorKind, n: usize, p: f64, seed: u64) -> Self {
        Self {
            kind,
            n,
            p,
            seed,
            lfsr: LfsrConfig::default(),
            schedule: ScheduleConfig::default(),
            predefined: PredefinedMask::default(),
        }
    }

    pub fn with_schedule(mut self, schedule: ScheduleConfig) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn build(&self) -> Result<MaskGenerator, GeneratorError> {
        MaskGenerator::from_config(self)
    }
}

#[derive(Debug, Clone)]
pub enum MaskGenerator {
    General(GeneralGenerator),
    Proposed(ProposedGenerator),
}

impl MaskGenerator {
    pub fn from_config(config: &GeneratorConfig) -> Result<Self, GeneratorError> {
        let p = KeepProbability::new(config.p)?;
        if config.n == 0 {
            return Err(MaskError::ZeroLength.into());
        }
        match config.kind {
            kind @ (MaskGeneratorKind::GeneralSerial | MaskGeneratorKind::GeneralParallel) => {
                let rng = config.lfsr.build(derive_seed(config.seed, LFSR_STREAM))?;
                Ok(MaskGenerator::General(GeneralGenerator::new(kind, config.n, p, rng)?))
            }
            MaskGeneratorKind::ProposedRotation => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, PREDEFINED_STREAM));
                let predefined = match config.predefined {
                    PredefinedMask::Exact => make_exact_mask(config.n, p, &mut rng)?,
                    PredefinedMask::Bernoulli => make_bernoulli_mask(config.n, p, &mut rng)?,
                };
                let schedule = RotationSchedule::from_config(&config.schedule, config.seed)?;
                Ok(MaskGenerator::Proposed(ProposedGenerator::new(predefined, schedule)))
            }
        }
    }

    pub fn kind(&self) -> MaskGeneratorKind {
        match self {
            MaskGenerator::General(g) => g.kind,
            MaskGenerator::Proposed(_) => MaskGeneratorKind::ProposedRotation,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MaskGenerator::General(g) => g.n,
            MaskGenerator::Proposed(g) => g.current.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_mask(&mut self) -> BitMask {
        match self {
            MaskGenerator::General(g) => g.next_mask(),
            MaskGenerator::Proposed(g) => g.next_mask(),
        }
    }

    pub fn as_proposed(&self) -> Option<&ProposedGenerator> {
        match self {
            MaskGenerator::Proposed(g) => Some(g),
            MaskGenerator::General(_) => None,
        }
    }
}

/// Anything that hands out one mask per training sample.
pub trait MaskSource: Send {
    fn next_mask(&mut self) -> BitMask;
    fn mask_len(&self) -> usize;
}

impl MaskSource for MaskGenerator {
    fn next_mask(&mut self) -> BitMask {
        MaskGenerator::next_mask(self)
    }

    fn mask_len(&self) -> usize {
        self.len()
    }
}

/// The first `count` masks of the generator described by `config`.
pub fn generator_stream(config: &GeneratorConfig, count: usize) -> Result<Vec<BitMask>, GeneratorError> {
    if count == 0 {
        return Err(GeneratorError::ZeroCount);
    }
    let mut generator = config.build()?;
    Ok((0..count).map(|_| generator.next_mask()).collect())
}
