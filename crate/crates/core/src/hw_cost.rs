//! Analytic cycle and component model of the three mask-generation circuits.
//!
//! Only cycle counts and component inventories are modeled. Slice register,
//! LUT and LUT-FF pair counts come from vendor synthesis of 8- and 64-bit
//! mask generators and are carried verbatim as [`SynthesisReference`] data.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::generators::MaskGeneratorKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("mask width must be at least 1")]
    ZeroWidth,
    #[error("clock period must be positive and finite, got {0}")]
    InvalidClockPeriod(f64),
    #[error("csv: {0}")]
    Csv(String),
}

pub const CSV_HEADER: [&str; 8] = [
    "strategy",
    "n",
    "cycles",
    "rng",
    "comparators",
    "mask_register_bits",
    "rotator_width_bits",
    "control_bits",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HwCostReport {
    pub strategy: MaskGeneratorKind,
    pub n: usize,
    pub clock_cycles_per_mask: usize,
    pub rng_count: usize,
    pub comparator_count: usize,
    pub mask_register_bits: usize,
    /// Zero unless the circuit has a rotator.
    pub rotator_width_bits: usize,
    /// Bits needed to encode the rotate amount.
    pub control_bits: usize,
}

impl HwCostReport {
    fn csv_record(&self) -> [String; 8] {
        [
            self.strategy.name().to_string(),
            self.n.to_string(),
            self.clock_cycles_per_mask.to_string(),
            self.rng_count.to_string(),
            self.comparator_count.to_string(),
            self.mask_register_bits.to_string(),
            self.rotator_width_bits.to_string(),
            self.control_bits.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostOptions {
    /// Rotate the stored mask in place instead of keeping a separate working
    /// register; halves the rotation method's mask storage to `n` bits.
    pub in_place_register: bool,
}

fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

pub fn cost_model(strategy: MaskGeneratorKind, n: usize) -> Result<HwCostReport, CostError> {
    cost_model_with(strategy, n, CostOptions::default())
}

pub fn cost_model_with(
    strategy: MaskGeneratorKind,
    n: usize,
    options: CostOptions,
) -> Result<HwCostReport, CostError> {
    if n == 0 {
        return Err(CostError::ZeroWidth);
    }
    let report = match strategy {
        // one RNG and comparator looped n times
        MaskGeneratorKind::GeneralSerial => HwCostReport {
            strategy,
            n,
            clock_cycles_per_mask: n,
            rng_count: 1,
            comparator_count: 1,
            mask_register_bits: n,
            rotator_width_bits: 0,
            control_bits: 0,
        },
        MaskGeneratorKind::GeneralParallel => HwCostReport {
            strategy,
            n,
            clock_cycles_per_mask: 1,
            rng_count: n,
            comparator_count: n,
            mask_register_bits: n,
            rotator_width_bits: 0,
            control_bits: 0,
        },
        MaskGeneratorKind::ProposedRotation => HwCostReport {
            strategy,
            n,
            clock_cycles_per_mask: 1,
            rng_count: 0,
            comparator_count: 0,
            mask_register_bits: if options.in_place_register { n } else { 2 * n },
            rotator_width_bits: n,
            control_bits: ceil_log2(n),
        },
    };
    Ok(report)
}

/// Time to produce one mask: cycles times the clock period, in the period's
/// units.
pub fn mask_generation_latency(
    strategy: MaskGeneratorKind,
    n: usize,
    clock_period: f64,
) -> Result<f64, CostError> {
    if !(clock_period.is_finite() && clock_period > 0.0) {
        return Err(CostError::InvalidClockPeriod(clock_period));
    }
    Ok(cost_model(strategy, n)?.clock_cycles_per_mask as f64 * clock_period)
}

/// Synthesized FPGA utilization for one mask width, columns ordered
/// serial / parallel / rotation. External measurement, not model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthesisReference {
    pub n: usize,
    pub slice_registers: [u32; 3],
    pub slice_luts: [u32; 3],
    pub lut_ff_pairs: [u32; 3],
    pub clock_cycles: [u32; 3],
    /// `None` where the circuit has no RNG.
    pub rngs: [Option<u32>; 3],
}

pub const SYNTHESIS_REFERENCE: [SynthesisReference; 2] = [
    SynthesisReference {
        n: 8,
        slice_registers: [32, 7, 8],
        slice_luts: [44, 80, 7],
        lut_ff_pairs: [27, 72, 0],
        clock_cycles: [8, 1, 1],
        rngs: [Some(1), Some(8), None],
    },
    SynthesisReference {
        n: 64,
        slice_registers: [149, 588, 70],
        slice_luts: [190, 640, 64],
        lut_ff_pairs: [141, 576, 64],
        clock_cycles: [64, 1, 1],
        rngs: [Some(1), Some(64), None],
    },
];

pub fn synthesis_reference(n: usize) -> Option<&'static SynthesisReference> {
    SYNTHESIS_REFERENCE.iter().find(|r| r.n == n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngRatio {
    Finite(usize),
    /// The denominator circuit uses no RNG at all.
    Eliminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostComparison {
    pub n: usize,
    /// Serial, parallel, rotation.
    pub reports: [HwCostReport; 3],
    pub reference: Option<&'static SynthesisReference>,
}

pub fn compare_costs(n: usize) -> Result<CostComparison, CostError> {
    compare_costs_with(n, CostOptions::default())
}

pub fn compare_costs_with(n: usize, options: CostOptions) -> Result<CostComparison, CostError> {
    let [a, b, c] = MaskGeneratorKind::ALL;
    Ok(CostComparison {
        n,
        reports: [
            cost_model_with(a, n, options)?,
            cost_model_with(b, n, options)?,
            cost_model_with(c, n, options)?,
        ],
        reference: synthesis_reference(n),
    })
}

impl CostComparison {
    pub fn report(&self, strategy: MaskGeneratorKind) -> &HwCostReport {
        self.reports
            .iter()
            .find(|r| r.strategy == strategy)
            .expect("comparison holds every strategy")
    }

    pub fn cycle_ratio_serial_over_rotation(&self) -> usize {
        self.reports[0].clock_cycles_per_mask / self.reports[2].clock_cycles_per_mask
    }

    pub fn rng_ratio_parallel_over_rotation(&self) -> RngRatio {
        match self.reports[2].rng_count {
            0 => RngRatio::Eliminated,
            d => RngRatio::Finite(self.reports[1].rng_count / d),
        }
    }

    /// Plain-text table in the layout of a resource comparison sheet, with
    /// reference synthesis numbers appended when known for this width.
    pub fn render_table(&self) -> String {
        let [s, p, r] = &self.reports;
        let mut out = String::new();
        let _ = writeln!(out, "Mask generator cost, n = {} bits", self.n);
        let _ = writeln!(out, "{:<34} {:>16} {:>16} {:>16}", "", "general-serial", "general-parallel", "proposed");
        let row = |out: &mut String, label: &str, vals: [String; 3]| {
            let _ = writeln!(out, "{:<34} {:>16} {:>16} {:>16}", label, vals[0], vals[1], vals[2]);
        };
        let rng = |c: usize| if c == 0 { "N/A".to_string() } else { c.to_string() };
        row(&mut out, "Clock cycles per mask", [s, p, r].map(|x| x.clock_cycles_per_mask.to_string()));
        row(&mut out, "RNGs required", [s, p, r].map(|x| rng(x.rng_count)));
        row(&mut out, "Comparators", [s, p, r].map(|x| x.comparator_count.to_string()));
        row(&mut out, "Mask register bits", [s, p, r].map(|x| x.mask_register_bits.to_string()));
        row(&mut out, "Rotator width (bits)", [s, p, r].map(|x| x.rotator_width_bits.to_string()));
        row(&mut out, "Control bits", [s, p, r].map(|x| x.control_bits.to_string()));
        let _ = writeln!(
            out,
            "serial/proposed cycle ratio: {}; parallel/proposed RNG ratio: {}",
            self.cycle_ratio_serial_over_rotation(),
            match self.rng_ratio_parallel_over_rotation() {
                RngRatio::Eliminated => "eliminated".to_string(),
                RngRatio::Finite(v) => v.to_string(),
            }
        );
        if let Some(reference) = self.reference {
            let _ = writeln!(out, "Reference FPGA synthesis results (external data, not modeled):");
            let fmt3 = |v: [u32; 3]| v.map(|x| x.to_string());
            row(&mut out, "  Slice registers", fmt3(reference.slice_registers));
            row(&mut out, "  Slice LUTs", fmt3(reference.slice_luts));
            row(&mut out, "  Fully used LUT-FF pairs", fmt3(reference.lut_ff_pairs));
            row(&mut out, "  Clock cycles per mask", fmt3(reference.clock_cycles));
            row(
                &mut out,
                "  RNGs required",
                reference.rngs.map(|x| x.map_or("N/A".to_string(), |v| v.to_string())),
            );
        }
        out
    }
}

/// CSV with the fixed column schema, one row per strategy per width.
pub fn comparisons_to_csv(comparisons: &[CostComparison]) -> Result<String, CostError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| CostError::Csv(e.to_string());
    writer.write_record(CSV_HEADER).map_err(to_err)?;
    for report in comparisons.iter().flat_map(|c| c.reports.iter()) {
        writer.write_record(report.csv_record()).map_err(to_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| CostError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Qualitative comparison of the comparator and rotation approaches.
pub fn qualitative_summary() -> String {
    let rows = [
        ("", "General dropout", "Rotation dropout"),
        ("Processing", "Serial looping", "Parallel"),
        ("Time", "Slow (grows with # of neurons)", "Fast (independent of # of neurons)"),
        ("Randomness", "High", "Normal"),
        ("Dropout mask", "Regenerated for each layer", "Predefined"),
        ("Resources required", "Very high (parallel), high (serial)", "Low"),
        ("Suitable application", "Software", "Hardware"),
    ];
    let mut out = String::new();
    for (a, b, c) in rows {
        let _ = writeln!(out, "{a:<22} {b:<38} {c}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use MaskGeneratorKind::*;

    #[test]
    fn eight_bit_rows() {
        let serial = cost_model(GeneralSerial, 8).unwrap();
        assert_eq!((serial.clock_cycles_per_mask, serial.rng_count), (8, 1));
        let parallel = cost_model(GeneralParallel, 8).unwrap();
        assert_eq!((parallel.clock_cycles_per_mask, parallel.rng_count), (1, 8));
        let rotation = cost_model(ProposedRotation, 8).unwrap();
        assert_eq!((rotation.clock_cycles_per_mask, rotation.rng_count), (1, 0));
        assert_eq!(rotation.control_bits, 3);
        assert_eq!(rotation.mask_register_bits, 16);
    }

    #[test]
    fn sixty_four_bit_rows() {
        let parallel = cost_model(GeneralParallel, 64).unwrap();
        assert_eq!((parallel.clock_cycles_per_mask, parallel.rng_count, parallel.comparator_count), (1, 64, 64));
        let rotation = cost_model(ProposedRotation, 64).unwrap();
        assert_eq!((rotation.clock_cycles_per_mask, rotation.rng_count), (1, 0));
        assert_eq!((rotation.rotator_width_bits, rotation.control_bits), (64, 6));
    }

    #[test]
    fn model_agrees_with_reference_cycle_and_rng_rows() {
        for reference in SYNTHESIS_REFERENCE {
            let cmp = compare_costs(reference.n).unwrap();
            for (i, report) in cmp.reports.iter().enumerate() {
                assert_eq!(report.clock_cycles_per_mask as u32, reference.clock_cycles[i]);
                assert_eq!(
                    report.rng_count as u32,
                    reference.rngs[i].unwrap_or(0),
                    "{} at n={}",
                    report.strategy,
                    reference.n
                );
            }
        }
    }

    #[test]
    fn reference_annotations() {
        assert_eq!(compare_costs(8).unwrap().reference.unwrap().slice_luts, [44, 80, 7]);
        assert_eq!(compare_costs(64).unwrap().reference.unwrap().slice_luts, [190, 640, 64]);
        assert!(compare_costs(16).unwrap().reference.is_none());
    }

    #[test]
    fn degenerate_width() {
        let cmp = compare_costs(1).unwrap();
        assert!(cmp.reports.iter().all(|r| r.clock_cycles_per_mask == 1));
        assert_eq!(cmp.report(ProposedRotation).control_bits, 0);
        assert_eq!(cost_model(GeneralSerial, 0), Err(CostError::ZeroWidth));
    }

    #[test]
    fn in_place_register_option() {
        let opts = CostOptions { in_place_register: true };
        assert_eq!(cost_model_with(ProposedRotation, 64, opts).unwrap().mask_register_bits, 64);
        assert_eq!(cost_model_with(GeneralSerial, 64, opts).unwrap().mask_register_bits, 64);
    }

    #[test]
    fn latency() {
        assert_eq!(mask_generation_latency(GeneralSerial, 64, 10.0).unwrap(), 640.0);
        assert_eq!(mask_generation_latency(ProposedRotation, 64, 10.0).unwrap(), 10.0);
        for n in 1..200 {
            let s = mask_generation_latency(GeneralSerial, n, 2.5).unwrap();
            let r = mask_generation_latency(ProposedRotation, n, 2.5).unwrap();
            assert_eq!(s / r, n as f64);
        }
        assert!(mask_generation_latency(GeneralSerial, 8, 0.0).is_err());
        assert!(mask_generation_latency(GeneralSerial, 8, f64::NAN).is_err());
    }

    #[test]
    fn invariants_over_widths() {
        let mut last_comparators = 0;
        for n in 1..=512 {
            let cmp = compare_costs(n).unwrap();
            let [s, p, r] = cmp.reports;
            assert_eq!(s.clock_cycles_per_mask, n);
            assert_eq!((p.clock_cycles_per_mask, r.clock_cycles_per_mask), (1, 1));
            assert_eq!((s.rng_count, p.rng_count, r.rng_count), (1, n, 0));
            assert!(p.comparator_count > last_comparators);
            last_comparators = p.comparator_count;
            assert_eq!(cmp.cycle_ratio_serial_over_rotation(), n);
            assert_eq!(cmp.rng_ratio_parallel_over_rotation(), RngRatio::Eliminated);
            assert!(s.rotator_width_bits == 0 && p.rotator_width_bits == 0 && r.rotator_width_bits > 0);
            assert!(1usize << r.control_bits >= n);
        }
    }

    #[test]
    fn csv_schema() {
        let csv = comparisons_to_csv(&[compare_costs(8).unwrap()]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "strategy,n,cycles,rng,comparators,mask_register_bits,rotator_width_bits,control_bits");
        assert_eq!(lines[1], "general-serial,8,8,1,1,8,0,0");
        assert_eq!(lines[2], "general-parallel,8,1,8,8,8,0,0");
        assert_eq!(lines[3], "proposed,8,1,0,0,16,8,3");
        assert_eq!(comparisons_to_csv(&[]).unwrap().lines().count(), 1);
    }

    #[test]
    fn table_marks_missing_rng_and_reference() {
        let table = compare_costs(8).unwrap().render_table();
        assert!(table.contains("N/A"));
        assert!(table.contains("external data"));
        assert!(!compare_costs(9).unwrap().render_table().contains("external data"));
    }
}
