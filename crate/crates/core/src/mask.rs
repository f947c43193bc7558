//! Binary dropout masks.
//!
//! A [`BitMask`] is a fixed-length keep/drop vector: bit `1` keeps the unit,
//! bit `0` drops it. Bits are packed little-endian into `u64` words, index 0
//! being the least significant bit of the first word. Bits past `len` in the
//! final word are always zero.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use thiserror::Error;

const WORD_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("mask length must be at least 1")]
    ZeroLength,
    #[error("mask length {mask} does not match input length {input}")]
    LengthMismatch { mask: usize, input: usize },
    #[error("invalid character {found:?} at position {position} in mask literal")]
    InvalidLiteral { found: char, position: usize },
    #[error("keep probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
}

/// Probability that a mask bit is 1 (the unit is kept).
///
/// The drop ratio used by comparator-based generators is `1 - p`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct KeepProbability(f64);

impl KeepProbability {
    pub fn new(p: f64) -> Result<Self, MaskError> {
        if (0.0..=1.0).contains(&p) {
            Ok(Self(p))
        } else {
            Err(MaskError::InvalidProbability(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn drop_ratio(self) -> f64 {
        1.0 - self.0
    }

    /// Number of kept bits in an exact-popcount mask of length `n`,
    /// `round(p * n)` with halves rounded up.
    pub fn exact_ones(self, n: usize) -> usize {
        let ones = (self.0 * n as f64 + 0.5).floor() as usize;
        ones.min(n)
    }
}

impl TryFrom<f64> for KeepProbability {
    type Error = MaskError;

    fn try_from(p: f64) -> Result<Self, Self::Error> {
        Self::new(p)
    }
}

/// Circular shift amount; only `r mod n` matters for a mask of length `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RotateAmount(pub usize);

impl RotateAmount {
    pub fn effective(self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            self.0 % n
        }
    }
}

impl From<usize> for RotateAmount {
    fn from(r: usize) -> Self {
        Self(r)
    }
}

/// Source of uniform draws in `[0, 1)`.
///
/// Every `rand` generator is a source; the hardware model in
/// [`crate::lfsr::Lfsr`] is one too.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

impl<R: RngCore + ?Sized> UniformSource for R {
    fn next_uniform(&mut self) -> f64 {
        self.gen::<f64>()
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    len: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(len: usize) -> Result<Self, MaskError> {
        if len == 0 {
            return Err(MaskError::ZeroLength);
        }
        Ok(Self {
            len,
            words: vec![0; len.div_ceil(WORD_BITS)],
        })
    }

    pub fn ones(len: usize) -> Result<Self, MaskError> {
        let mut mask = Self::zeros(len)?;
        mask.words.iter_mut().for_each(|w| *w = u64::MAX);
        mask.clear_tail();
        Ok(mask)
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self, MaskError> {
        Self::from_fn(bits.len(), |i| bits[i])
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Result<Self, MaskError> {
        let mut mask = Self::zeros(len)?;
        for i in 0..len {
            if f(i) {
                mask.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// Always false; masks have at least one bit.
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// # Panics
    ///
    /// Panics if `index >= self.len()`.
    pub fn get(&self, index: usize) -> bool {
        assert!(index < self.len, "bit index {index} out of range for mask of length {}", self.len);
        (self.words[index / WORD_BITS] >> (index % WORD_BITS)) & 1 == 1
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        (0..self.len).map(move |i| (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1)
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Circular left rotation: bit `i` of the result is bit `(i + r) mod n`
    /// of `self`.
    pub fn rotate_left(&self, r: RotateAmount) -> BitMask {
        let k = r.effective(self.len);
        if k == 0 {
            return self.clone();
        }
        let low = shift_down(&self.words, k);
        let high = shift_up(&self.words, self.len - k);
        let mut out = BitMask {
            len: self.len,
            words: low.iter().zip(&high).map(|(a, b)| a | b).collect(),
        };
        out.clear_tail();
        out
    }

    /// Elementwise product with `x`; dropped positions become exactly zero.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, MaskError> {
        if x.len() != self.len {
            return Err(MaskError::LengthMismatch {
                mask: self.len,
                input: x.len(),
            });
        }
        Ok(self
            .iter()
            .zip(x)
            .map(|(keep, &v)| if keep { v } else { 0.0 })
            .collect())
    }

    fn clear_tail(&mut self) {
        let used = self.len % WORD_BITS;
        if used != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << used) - 1;
            }
        }
    }
}

// out bit i = in bit (i + k); bits shifted in from past the end are zero.
fn shift_down(words: &[u64], k: usize) -> Vec<u64> {
    let (ws, bs) = (k / WORD_BITS, k % WORD_BITS);
    let word = |i: usize| words.get(i).copied().unwrap_or(0);
    (0..words.len())
        .map(|i| {
            let lo = word(i + ws);
            if bs == 0 {
                lo
            } else {
                (lo >> bs) | (word(i + ws + 1) << (WORD_BITS - bs))
            }
        })
        .collect()
}

// out bit i = in bit (i - k); bits below zero are zero.
fn shift_up(words: &[u64], k: usize) -> Vec<u64> {
    let (ws, bs) = (k / WORD_BITS, k % WORD_BITS);
    let word = |i: Option<usize>| i.and_then(|i| words.get(i)).copied().unwrap_or(0);
    (0..words.len())
        .map(|i| {
            let src = i.checked_sub(ws);
            let hi = word(src);
            if bs == 0 {
                hi
            } else {
                let below = word(src.and_then(|s| s.checked_sub(1)));
                (hi << bs) | (below >> (WORD_BITS - bs))
            }
        })
        .collect()
}

impl fmt::Display for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.iter().map(|b| if b { '1' } else { '0' }).collect();
        f.write_str(&s)
    }
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitMask({self})")
    }
}

/// Parses the text literal form: `'0'`/`'1'` characters, leftmost is index 0.
impl FromStr for BitMask {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .enumerate()
            .map(|(position, c)| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                found => Err(MaskError::InvalidLiteral { found, position }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        BitMask::from_bits(&bits)
    }
}

/// Independent Bernoulli mask: bit `i` is 1 iff the `i`-th draw is `< p`.
/// Consumes exactly `n` draws.
pub fn make_bernoulli_mask<S: UniformSource + ?Sized>(
    n: usize,
    p: KeepProbability,
    source: &mut S,
) -> Result<BitMask, MaskError> {
    let mut mask = BitMask::zeros(n)?;
    for i in 0..n {
        if source.next_uniform() < p.value() {
            mask.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
        }
    }
    Ok(mask)
}

/// Mask with exactly `round(p * n)` ones at positions picked by a seeded
/// shuffle of `0..n`.
pub fn make_exact_mask<R: Rng + ?Sized>(
    n: usize,
    p: KeepProbability,
    rng: &mut R,
) -> Result<BitMask, MaskError> {
    let mut mask = BitMask::zeros(n)?;
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(rng);
    for &i in &positions[..p.exact_ones(n)] {
        mask.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
    }
    Ok(mask)
}

pub fn rotate(mask: &BitMask, r: RotateAmount) -> BitMask {
    mask.rotate_left(r)
}

pub fn popcount(mask: &BitMask) -> usize {
    mask.count_ones()
}

pub fn apply_mask(mask: &BitMask, x: &[f64]) -> Result<Vec<f64>, MaskError> {
    mask.apply(x)
}
