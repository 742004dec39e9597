use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_dims, ParamSpec};
use crate::error::{Error, Result};

/// A named list of parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCatalog {
    pub name: String,
    pub params: Vec<ParamSpec>,
    /// Optimizer steps per epoch, for data-per-epoch totals.
    pub batches_per_epoch: Option<usize>,
}

fn spec(name: &str, dims: &[usize]) -> ParamSpec {
    ParamSpec::new(name, dims.to_vec()).expect("built-in shapes are valid")
}

impl ModelCatalog {
    pub fn new(name: impl Into<String>, params: Vec<ParamSpec>) -> Self {
        Self {
            name: name.into(),
            params,
            batches_per_epoch: None,
        }
    }

    /// ResNet18 for 32×32 inputs and 10 classes. Matrix parameters come in
    /// decreasing size, then the batch-norm and classifier vectors.
    pub fn resnet18() -> Self {
        let mut params = vec![
            spec("layer4.1.conv2", &[512, 512, 3, 3]),
            spec("layer4.0.conv2", &[512, 512, 3, 3]),
            spec("layer4.1.conv1", &[512, 512, 3, 3]),
            spec("layer4.0.conv1", &[512, 256, 3, 3]),
            spec("layer3.1.conv2", &[256, 256, 3, 3]),
            spec("layer3.1.conv1", &[256, 256, 3, 3]),
            spec("layer3.0.conv2", &[256, 256, 3, 3]),
            spec("layer3.0.conv1", &[256, 128, 3, 3]),
            spec("layer2.1.conv2", &[128, 128, 3, 3]),
            spec("layer2.1.conv1", &[128, 128, 3, 3]),
            spec("layer2.0.conv2", &[128, 128, 3, 3]),
            spec("layer4.0.shortcut.0", &[512, 256, 1, 1]),
            spec("layer2.0.conv1", &[128, 64, 3, 3]),
            spec("layer1.1.conv1", &[64, 64, 3, 3]),
            spec("layer1.1.conv2", &[64, 64, 3, 3]),
            spec("layer1.0.conv2", &[64, 64, 3, 3]),
            spec("layer1.0.conv1", &[64, 64, 3, 3]),
            spec("layer3.0.shortcut.0", &[256, 128, 1, 1]),
            spec("layer2.0.shortcut.0", &[128, 64, 1, 1]),
            spec("linear", &[10, 512]),
            spec("conv1", &[64, 3, 3, 3]),
        ];
        let mut bn = |prefix: &str, c: usize| {
            params.push(spec(&format!("{prefix}.weight"), &[c]));
            params.push(spec(&format!("{prefix}.bias"), &[c]));
        };
        bn("bn1", 64);
        for (layer, c) in [(1, 64), (2, 128), (3, 256), (4, 512)] {
            for block in 0..2 {
                bn(&format!("layer{layer}.{block}.bn1"), c);
                bn(&format!("layer{layer}.{block}.bn2"), c);
                if layer > 1 && block == 0 {
                    bn(&format!("layer{layer}.{block}.shortcut.1"), c);
                }
            }
        }
        params.push(spec("linear.bias", &[10]));
        Self {
            name: "resnet18".into(),
            params,
            // 50 000 images / (16 workers × 128), last partial batch dropped.
            batches_per_epoch: Some(24),
        }
    }

    /// Three-layer LSTM language model with 650 hidden units over a 28 869
    /// word vocabulary; the decoder weight is tied to the encoder.
    pub fn lstm() -> Self {
        let mut params = vec![spec("encoder", &[28869, 650])];
        for l in 0..3 {
            params.push(spec(&format!("rnn-ih-l{l}"), &[2600, 650]));
            params.push(spec(&format!("rnn-hh-l{l}"), &[2600, 650]));
        }
        for l in 0..3 {
            params.push(spec(&format!("rnn-bias-ih-l{l}"), &[2600]));
            params.push(spec(&format!("rnn-bias-hh-l{l}"), &[2600]));
        }
        params.push(spec("decoder.bias", &[28869]));
        Self {
            name: "lstm".into(),
            params,
            batches_per_epoch: Some(70),
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "resnet18" => Ok(Self::resnet18()),
            "lstm" => Ok(Self::lstm()),
            _ => Err(Error::Unknown {
                kind: "catalog",
                name: name.to_string(),
            }),
        }
    }

    /// Resolves a built-in name or, failing that, a catalog file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Ok(c) => Ok(c),
            Err(e) => {
                let path = Path::new(name_or_path);
                if path.exists() {
                    Self::load(path)
                } else {
                    Err(e)
                }
            }
        }
    }

    /// Parses the text format: one parameter per line, `name dim1xdim2x...`.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut params = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [pname, dims] = fields[..] else {
                return Err(Error::Parse(format!(
                    "line {}: expected `name dims`, got `{line}`",
                    lineno + 1
                )));
            };
            let dims = dims
                .split(['x', 'X'])
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            params.push(
                ParamSpec::new(pname, dims)
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?,
            );
        }
        if params.is_empty() {
            return Err(Error::Parse("catalog has no parameters".into()));
        }
        Ok(Self::new(name, params))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::parse(name, &text)
    }

    pub fn to_text(&self) -> String {
        self.params
            .iter()
            .map(|p| format!("{} {}\n", p.name(), format_dims(p.tensor_shape())))
            .collect()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn matrices(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| !p.is_bias())
    }

    pub fn biases(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.is_bias())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_totals() {
        let r = ModelCatalog::resnet18();
        assert_eq!(r.total_numel(), 11_173_962);
        assert_eq!(r.biases().map(ParamSpec::numel).sum::<usize>(), 9610);
        let l = ModelCatalog::lstm();
        assert_eq!(l.biases().map(ParamSpec::numel).sum::<usize>(), 44_469);
        assert_eq!(l.matrices().count(), 7);
    }

    #[test]
    fn text_round_trip() {
        let r = ModelCatalog::resnet18();
        let back = ModelCatalog::parse("resnet18", &r.to_text()).unwrap();
        assert_eq!(back.params, r.params);
    }

    #[test]
    fn parse_errors() {
        assert!(ModelCatalog::parse("x", "").is_err());
        assert!(ModelCatalog::parse("x", "a 3xq").is_err());
        assert!(ModelCatalog::parse("x", "a").is_err());
        assert!(ModelCatalog::parse("x", "a 3x0").is_err());
        let c = ModelCatalog::parse("x", "# header\nfc 10x20  # weights\n\nb 10\n").unwrap();
        assert_eq!(c.params.len(), 2);
        assert!(ModelCatalog::builtin("vgg").is_err());
    }
}
