//! Fibonacci linear-feedback shift register, the hardware RNG model.
//!
//! Tap positions use the usual 1-based polynomial notation: taps
//! `{8, 6, 5, 4}` on an 8-bit register stand for `x^8 + x^6 + x^5 + x^4 + 1`.
//! Tap `t` reads state bit `w - t`. Each step emits the low bit, shifts the
//! register right by one and inserts the XOR of the tapped bits at the top.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::UniformSource;

pub const SUPPORTED_WIDTHS: [u32; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LfsrError {
    #[error("unsupported LFSR width {0}; expected one of 8, 16, 32")]
    UnsupportedWidth(u32),
    #[error("tap {tap} is outside 1..={width}")]
    TapOutOfRange { tap: u32, width: u32 },
    #[error("tap set must include the register width {0}")]
    MissingTopTap(u32),
    #[error("LFSR state must be nonzero")]
    ZeroState,
}

/// Maximal-length tap sets for the supported widths.
pub fn default_taps(width: u32) -> Option<&'static [u32]> {
    match width {
        8 => Some(&[8, 6, 5, 4]),
        16 => Some(&[16, 14, 13, 11]),
        32 => Some(&[32, 22, 2, 1]),
        _ => None,
    }
}

/// Width and tap set, as written in generator configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfsrConfig {
    pub width: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taps: Option<Vec<u32>>,
}

impl Default for LfsrConfig {
    fn default() -> Self {
        Self { width: 8, taps: None }
    }
}

impl LfsrConfig {
    pub fn resolved_taps(&self) -> Result<Vec<u32>, LfsrError> {
        match &self.taps {
            Some(taps) => Ok(taps.clone()),
            None => default_taps(self.width)
                .map(<[u32]>::to_vec)
                .ok_or(LfsrError::UnsupportedWidth(self.width)),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Lfsr, LfsrError> {
        Lfsr::from_seed(self.width, &self.resolved_taps()?, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lfsr {
    width: u32,
    taps: Vec<u32>,
    tap_mask: u32,
    state: u32,
}

impl Lfsr {
    /// The top tap (`width`) is required: it makes the update a bijection on
    /// states, so a nonzero register can never reach the all-zero lockup.
    pub fn new(width: u32, taps: &[u32], state: u32) -> Result<Self, LfsrError> {
        if !SUPPORTED_WIDTHS.contains(&width) {
            return Err(LfsrError::UnsupportedWidth(width));
        }
        let mut tap_mask = 0u32;
        for &tap in taps {
            if tap == 0 || tap > width {
                return Err(LfsrError::TapOutOfRange { tap, width });
            }
            tap_mask |= 1 << (width - tap);
        }
        if !taps.contains(&width) {
            return Err(LfsrError::MissingTopTap(width));
        }
        let state = state & Self::register_mask(width);
        if state == 0 {
            return Err(LfsrError::ZeroState);
        }
        Ok(Self {
            width,
            taps: taps.to_vec(),
            tap_mask,
            state,
        })
    }

    /// Seeds the register from a 64-bit seed; a zero draw maps to state 1.
    pub fn from_seed(width: u32, taps: &[u32], seed: u64) -> Result<Self, LfsrError> {
        let draw = ChaCha8Rng::seed_from_u64(seed).next_u32() & Self::register_mask(width.min(32));
        Self::new(width, taps, draw.max(1))
    }

    fn register_mask(width: u32) -> u32 {
        if width >= 32 {
            u32::MAX
        } else {
            (1 << width) - 1
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn taps(&self) -> &[u32] {
        &self.taps
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    /// One shift; returns the emitted (low) bit.
    pub fn step(&mut self) -> bool {
        let out = self.state & 1 == 1;
        let feedback = (self.state & self.tap_mask).count_ones() & 1;
        self.state = (self.state >> 1) | (feedback << (self.width - 1));
        out
    }

    /// Collects `k` output bits, first bit most significant, as `v / 2^k`.
    ///
    /// # Panics
    ///
    /// Panics unless `1 <= k <= width`.
    pub fn uniform(&mut self, k: u32) -> f64 {
        assert!(
            (1..=self.width).contains(&k),
            "uniform width {k} outside 1..={}",
            self.width
        );
        let mut v = 0u64;
        for _ in 0..k {
            v = (v << 1) | u64::from(self.step());
        }
        v as f64 / (1u64 << k) as f64
    }
}

impl UniformSource for Lfsr {
    fn next_uniform(&mut self) -> f64 {
        self.uniform(self.width)
    }
}
