//! Parameter-shape catalogs and desk-scale training problems.

mod catalog;
mod problems;
mod ratio;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use catalog::ModelCatalog;
pub use problems::{
    finite_difference_check, least_squares_problem, sample_batch, shard_range,
    tiny_mlp_problem, LeastSquares, Problem, TinyMlp,
};
pub use ratio::{
    compression_ratio, data_per_epoch_mib, round_half_up, CoefficientDisplay, RatioReport,
    RatioRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Matrix,
    Bias,
}

/// A named model parameter. One-dimensional tensors are biases and travel
/// uncompressed; anything else is reshaped to `first dim × product of the
/// rest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    name: String,
    tensor_shape: Vec<usize>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, tensor_shape: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if tensor_shape.is_empty() || tensor_shape.contains(&0) {
            return Err(Error::contract(
                "ParamSpec::new",
                format!("`{name}` needs a non-empty shape of positive dims, got {tensor_shape:?}"),
            ));
        }
        Ok(Self { name, tensor_shape })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor_shape(&self) -> &[usize] {
        &self.tensor_shape
    }

    pub fn kind(&self) -> ParamKind {
        if self.tensor_shape.len() == 1 {
            ParamKind::Bias
        } else {
            ParamKind::Matrix
        }
    }

    pub fn is_bias(&self) -> bool {
        self.kind() == ParamKind::Bias
    }

    pub fn numel(&self) -> usize {
        self.tensor_shape.iter().product()
    }

    /// Storage shape: `(n, m)` for matrices, `(len, 1)` for biases.
    pub fn matrix_shape(&self) -> (usize, usize) {
        let n = self.tensor_shape[0];
        (n, self.numel() / n)
    }
}

impl fmt::Display for ParamSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.name, format_dims(&self.tensor_shape))
    }
}

/// `512x512x3x3`.
pub fn format_dims(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_rule() {
        let p = ParamSpec::new("layer4.1.conv2", vec![512, 512, 3, 3]).unwrap();
        assert_eq!(p.kind(), ParamKind::Matrix);
        assert_eq!(p.matrix_shape(), (512, 4608));
        let b = ParamSpec::new("bn.bias", vec![64]).unwrap();
        assert!(b.is_bias());
        assert_eq!(b.matrix_shape(), (64, 1));
        assert!(ParamSpec::new("x", vec![]).is_err());
        assert!(ParamSpec::new("x", vec![3, 0]).is_err());
        assert_eq!(p.to_string(), "layer4.1.conv2 512x512x3x3");
    }
}
