//! Sign-based compressors. Both aggregate with all-gather.

use crate::linalg::Matrix;

use super::payload::{CompressedPayload, SignBits};

/// `(‖M‖₁, sign(M))`, sign of zero taken as `+1`.
pub fn sign_norm_compress(m: &Matrix) -> CompressedPayload {
    CompressedPayload::SignNorm {
        l1_norm: m.l1_norm(),
        signs: SignBits::from_values(m.data()),
        rows: m.rows(),
        cols: m.cols(),
    }
}

/// `(1/W) Σ_i (ℓ_i / nm) S_i`. The sum runs over workers in order and the
/// division by `W` comes last.
pub fn sign_norm_aggregate(payloads: &[CompressedPayload]) -> Matrix {
    let (rows, cols) = payloads[0].shape();
    let nm = (rows * cols) as f64;
    let mut out = Matrix::zeros(rows, cols);
    for p in payloads {
        let CompressedPayload::SignNorm { l1_norm, signs, .. } = p else {
            panic!("sign_norm_aggregate expects SignNorm payloads");
        };
        let scale = l1_norm / nm;
        for (o, s) in out.data_mut().iter_mut().zip(signs.iter()) {
            *o += scale * s;
        }
    }
    let w = payloads.len() as f64;
    out.map(|v| v / w)
}

pub fn signum_compress(m: &Matrix) -> CompressedPayload {
    CompressedPayload::SignsOnly {
        signs: SignBits::from_values(m.data()),
        rows: m.rows(),
        cols: m.cols(),
    }
}

/// Elementwise majority vote `sign(Σ S_i)`, ties resolved to `+1`.
pub fn signum_vote(payloads: &[CompressedPayload]) -> Matrix {
    let (rows, cols) = payloads[0].shape();
    let mut tally = vec![0i64; rows * cols];
    for p in payloads {
        let CompressedPayload::SignsOnly { signs, .. } = p else {
            panic!("signum_vote expects SignsOnly payloads");
        };
        for (t, i) in tally.iter_mut().zip(0..) {
            *t += if signs.is_negative(i) { -1 } else { 1 };
        }
    }
    Matrix::new(
        rows,
        cols,
        tally.into_iter().map(|t| if t < 0 { -1.0 } else { 1.0 }).collect(),
    )
    .expect("tally matches shape")
}
