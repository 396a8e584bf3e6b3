//! Checkpoint layout: `<dir>/manifest.txt` with one `key value` pair per
//! line, plus `<dir>/tensors/<name>.bin` raw little-endian IEEE-754 blobs.
//! Round-trips are bit-exact.

use super::{Model, ModelConfig, ModelError, Nonlinearity, Normalization, Positional, Result};
use crate::numerics::{Precision, Scalar, Tensor};
use std::fs;
use std::path::Path;

const FORMAT_TAG: &str = "sinklab-checkpoint-v1";

fn nonlinearity_name(x: Nonlinearity) -> &'static str {
    match x {
        Nonlinearity::Gelu => "gelu",
        Nonlinearity::Relu => "relu",
    }
}

fn normalization_name(x: Normalization) -> &'static str {
    match x {
        Normalization::None => "none",
        Normalization::Rms => "rms",
    }
}

fn positional_name(x: Positional) -> &'static str {
    match x {
        Positional::Rope => "rope",
        Positional::None => "none",
    }
}

fn bad(detail: impl Into<String>) -> ModelError {
    ModelError::Manifest(detail.into())
}

/// Peek at a checkpoint's stored precision so callers can pick the right
/// `Model<S>` instantiation before loading.
pub fn checkpoint_precision(dir: &Path) -> Result<Precision> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    for line in manifest.lines() {
        if let Some(rest) = line.trim().strip_prefix("precision ") {
            return match rest.trim() {
                "f32" => Ok(Precision::Single),
                "f64" => Ok(Precision::Double),
                other => Err(bad(format!("unknown precision {other:?}"))),
            };
        }
    }
    Err(bad("manifest is missing `precision`"))
}

impl<S: Scalar> Model<S> {
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tensors_dir = dir.join("tensors");
        fs::create_dir_all(&tensors_dir)?;
        let cfg = &self.config;
        let mut manifest = String::new();
        manifest.push_str(&format!("format {FORMAT_TAG}\n"));
        manifest.push_str(&format!("precision {}\n", cfg.precision.name()));
        manifest.push_str(&format!("n_layers {}\n", cfg.n_layers));
        manifest.push_str(&format!("n_heads {}\n", cfg.n_heads));
        manifest.push_str(&format!("d_model {}\n", cfg.d_model));
        manifest.push_str(&format!("vocab_size {}\n", cfg.vocab_size));
        manifest.push_str(&format!("mlp_hidden {}\n", cfg.mlp_hidden));
        manifest.push_str(&format!(
            "nonlinearity {}\n",
            nonlinearity_name(cfg.nonlinearity)
        ));
        manifest.push_str(&format!(
            "normalization {}\n",
            normalization_name(cfg.normalization)
        ));
        manifest.push_str(&format!("positional {}\n", positional_name(cfg.positional)));
        for (name, tensor) in self.named_tensors() {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
            let mut bytes = Vec::with_capacity(tensor.numel() * S::PRECISION.byte_width());
            for &x in tensor.data() {
                x.write_le(&mut bytes);
            }
            fs::write(tensors_dir.join(format!("{name}.bin")), bytes)?;
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Model<S>> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut fields: Vec<(String, String)> = Vec::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("manifest line without a value: {line:?}")))?;
            fields.push((key.to_string(), rest.to_string()));
        }
        let lookup = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| bad(format!("manifest is missing `{key}`")))
        };
        if lookup("format")? != FORMAT_TAG {
            return Err(bad(format!(
                "unsupported checkpoint format {:?}",
                lookup("format")?
            )));
        }
        let precision = match lookup("precision")? {
            "f32" => Precision::Single,
            "f64" => Precision::Double,
            other => return Err(bad(format!("unknown precision {other:?}"))),
        };
        if precision != S::PRECISION {
            return Err(bad(format!(
                "checkpoint is {} but the loader expects {}",
                precision.name(),
                S::PRECISION.name()
            )));
        }
        let num = |key: &str| -> Result<usize> {
            lookup(key)?
                .parse()
                .map_err(|_| bad(format!("`{key}` is not a count: {:?}", lookup(key))))
        };
        let config = ModelConfig {
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_model: num("d_model")?,
            vocab_size: num("vocab_size")?,
            mlp_hidden: num("mlp_hidden")?,
            nonlinearity: match lookup("nonlinearity")? {
                "gelu" => Nonlinearity::Gelu,
                "relu" => Nonlinearity::Relu,
                other => return Err(bad(format!("unknown nonlinearity {other:?}"))),
            },
            normalization: match lookup("normalization")? {
                "none" => Normalization::None,
                "rms" => Normalization::Rms,
                other => return Err(bad(format!("unknown normalization {other:?}"))),
            },
            positional: match lookup("positional")? {
                "rope" => Positional::Rope,
                "none" => Positional::None,
                other => return Err(bad(format!("unknown positional {other:?}"))),
            },
            precision,
        };
        config.validate()?;

        let declared: Vec<(String, Vec<usize>)> = fields
            .iter()
            .filter(|(k, _)| k == "tensor")
            .map(|(_, v)| {
                let mut parts = v.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| bad("tensor line without a name"))?
                    .to_string();
                let dims = parts
                    .map(|p| {
                        p.parse::<usize>()
                            .map_err(|_| bad(format!("bad dimension {p:?} for tensor {name}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                Ok((name, dims))
            })
            .collect::<Result<_>>()?;

        let read_tensor = |name: &str, expect_shape: &[usize]| -> Result<Tensor<S>> {
            let (_, dims) = declared
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| bad(format!("manifest does not declare tensor {name}")))?;
            if dims != expect_shape {
                return Err(bad(format!(
                    "tensor {name} declared as {dims:?}, expected {expect_shape:?}"
                )));
            }
            let bytes = fs::read(dir.join("tensors").join(format!("{name}.bin")))?;
            let width = S::PRECISION.byte_width();
            let numel: usize = expect_shape.iter().product();
            if bytes.len() != numel * width {
                return Err(bad(format!(
                    "tensor {name} blob is {} bytes, expected {}",
                    bytes.len(),
                    numel * width
                )));
            }
            let data = bytes.chunks_exact(width).map(S::from_le).collect();
            Ok(Tensor::from_vec(expect_shape, data).expect("length checked above"))
        };

        let d = config.d_model;
        let embed = read_tensor("embed", &[config.vocab_size, d])?;
        let unembed = read_tensor("unembed", &[d, config.vocab_size])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                heads.push(super::HeadParams {
                    wq: read_tensor(&format!("layer{l}.head{h}.wq"), &[d, d])?,
                    wk: read_tensor(&format!("layer{l}.head{h}.wk"), &[d, d])?,
                    wv: read_tensor(&format!("layer{l}.head{h}.wv"), &[d, d])?,
                });
            }
            layers.push(super::LayerParams {
                heads,
                w_out: read_tensor(&format!("layer{l}.attn_out"), &[config.n_heads * d, d])?,
                w1: read_tensor(&format!("layer{l}.mlp_w1"), &[d, config.mlp_hidden])?,
                w2: read_tensor(&format!("layer{l}.mlp_w2"), &[config.mlp_hidden, d])?,
            });
        }
        let expected = 2 + config.n_layers * (3 * config.n_heads + 3);
        if declared.len() != expected {
            return Err(bad(format!(
                "manifest declares {} tensors, expected {expected}",
                declared.len()
            )));
        }
        Ok(Model {
            config,
            embed,
            unembed,
            layers,
        })
    }
}
