//! Compression-ratio reports over a catalog.
//!
//! Ratios are computed from exact integer bit counts and only rounded for
//! display, half-up to the nearest integer. For schemes whose payload scales
//! with the rank the displayed figure is the rank-1 coefficient, shown as
//! `461/r ×`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelCatalog, ParamSpec};
use crate::commsim::FLOAT_BITS;
use crate::compressors::{payload_bits, CompressorKind};

/// `num / den` rounded half-up.
pub fn round_half_up(num: u128, den: u128) -> u128 {
    assert!(den > 0, "division by zero");
    (2 * num + den) / (2 * den)
}

fn rank_proportional(kind: CompressorKind) -> bool {
    matches!(
        kind,
        CompressorKind::PowerSgd
            | CompressorKind::BestApprox
            | CompressorKind::UnbiasedRank
            | CompressorKind::Atomo
            | CompressorKind::TopK
            | CompressorKind::RandomK
            | CompressorKind::RandomBlock
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoefficientDisplay {
    /// `c/r ×`
    PerRank(u128),
    /// `c×`
    Fixed(u128),
}

impl fmt::Display for CoefficientDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientDisplay::PerRank(c) => write!(f, "{c}/r ×"),
            CoefficientDisplay::Fixed(c) => write!(f, "{c}×"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub name: String,
    pub tensor_shape: Vec<usize>,
    pub matrix_shape: (usize, usize),
    pub uncompressed_bits: u64,
    pub payload_bits: u64,
    /// Payload bits of the same scheme at rank 1.
    pub unit_rank_payload_bits: u64,
}

impl RatioRow {
    pub fn ratio(&self) -> f64 {
        self.uncompressed_bits as f64 / self.payload_bits as f64
    }

    pub fn uncompressed_kib(&self) -> u128 {
        round_half_up(self.uncompressed_bits as u128, 8 * 1024)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub catalog: String,
    pub compressor: CompressorKind,
    pub rank: usize,
    pub rows: Vec<RatioRow>,
    /// All bias vectors together; they always travel uncompressed.
    pub bias_bits: u64,
}

impl RatioReport {
    pub fn total_uncompressed_bits(&self) -> u64 {
        self.rows.iter().map(|r| r.uncompressed_bits).sum::<u64>() + self.bias_bits
    }

    pub fn total_payload_bits(&self) -> u64 {
        self.rows.iter().map(|r| r.payload_bits).sum::<u64>() + self.bias_bits
    }

    fn unit_rank_payload_bits(&self) -> u64 {
        self.rows.iter().map(|r| r.unit_rank_payload_bits).sum::<u64>() + self.bias_bits
    }

    pub fn total_ratio(&self) -> f64 {
        self.total_uncompressed_bits() as f64 / self.total_payload_bits() as f64
    }

    /// Total ratio at the report's rank, rounded half-up.
    pub fn total_ratio_rounded(&self) -> u128 {
        round_half_up(
            self.total_uncompressed_bits() as u128,
            self.total_payload_bits() as u128,
        )
    }

    pub fn is_rank_proportional(&self) -> bool {
        rank_proportional(self.compressor)
    }

    /// Per-row display value: `461/r ×` style for rank-proportional schemes.
    pub fn row_display(&self, row: &RatioRow) -> CoefficientDisplay {
        if self.is_rank_proportional() {
            CoefficientDisplay::PerRank(round_half_up(
                row.uncompressed_bits as u128,
                row.unit_rank_payload_bits as u128,
            ))
        } else {
            CoefficientDisplay::Fixed(round_half_up(
                row.uncompressed_bits as u128,
                row.payload_bits as u128,
            ))
        }
    }

    /// Total display value, biases included.
    pub fn total_display(&self) -> CoefficientDisplay {
        if self.is_rank_proportional() {
            CoefficientDisplay::PerRank(round_half_up(
                self.total_uncompressed_bits() as u128,
                self.unit_rank_payload_bits() as u128,
            ))
        } else {
            CoefficientDisplay::Fixed(self.total_ratio_rounded())
        }
    }

    pub fn bias_kib(&self) -> u128 {
        round_half_up(self.bias_bits as u128, 8 * 1024)
    }

    pub fn total_mib(&self) -> u128 {
        round_half_up(self.total_uncompressed_bits() as u128, 8 * 1024 * 1024)
    }
}

pub fn compression_ratio(catalog: &ModelCatalog, kind: CompressorKind, rank: usize) -> RatioReport {
    assert!(rank >= 1, "rank must be at least 1");
    let rows = catalog
        .matrices()
        .map(|p: &ParamSpec| {
            let (n, m) = p.matrix_shape();
            RatioRow {
                name: p.name().to_string(),
                tensor_shape: p.tensor_shape().to_vec(),
                matrix_shape: (n, m),
                uncompressed_bits: FLOAT_BITS * (n * m) as u64,
                payload_bits: payload_bits(kind, n, m, rank),
                unit_rank_payload_bits: payload_bits(kind, n, m, 1),
            }
        })
        .collect();
    RatioReport {
        catalog: catalog.name.clone(),
        compressor: kind,
        rank,
        rows,
        bias_bits: FLOAT_BITS * catalog.biases().map(ParamSpec::numel).sum::<usize>() as u64,
    }
}

/// Payload per epoch in MiB.
pub fn data_per_epoch_mib(report: &RatioReport, batches_per_epoch: usize) -> f64 {
    report.total_payload_bits() as f64 / 8.0 * batches_per_epoch as f64 / (1024.0 * 1024.0)
}
