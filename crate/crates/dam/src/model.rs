//! Model assembly: configuration, the named parameter registry, and
//! checkpoint-facing tensor export/import.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::decoder::{DecoderParams, UnitConfig};
use crate::encoder::{EncoderParams, EncoderVariant};
use crate::error::{DamError, Result};
use crate::lstm::uniform_matrix;
use crate::rng::DetRng;
use crate::tensor::{ParamId, ParamSet, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub region_dim: usize,
    pub encoder: EncoderVariant,
    pub units: UnitConfig,
    /// One embedding table for encoder and decoder when true; separate
    /// tables otherwise.
    pub share_embedding: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == 0 || self.region_dim == 0 {
            return Err(DamError::Config(
                "hidden, embed_dim, and region_dim must be positive".into(),
            ));
        }
        self.units.validate()
    }
}

/// Encoder + decoder parameters behind one named registry, bound to a
/// vocabulary. Parameters are immutable during forward passes; training
/// mutates them between tapes.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub(crate) config: ModelConfig,
    pub(crate) vocab: Vocabulary,
    pub(crate) params: ParamSet<S>,
    pub(crate) embed: ParamId,
    pub(crate) embed_enc: ParamId,
    pub(crate) enc: EncoderParams,
    pub(crate) dec: DecoderParams,
}

impl<S: Scalar> Model<S> {
    /// Builds a model with seeded initialization. The same seed and
    /// config always produce identical parameters.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() <= crate::data::UNK {
            return Err(DamError::Config("vocabulary is missing special tokens".into()));
        }
        let mut rng = DetRng::seed(seed);
        let mut params = ParamSet::new();
        let embed_scale = 1.0 / (config.embed_dim as f64).sqrt();
        let embed = uniform_matrix(
            &mut params,
            "embed".into(),
            vocab.len(),
            config.embed_dim,
            embed_scale,
            &mut rng,
        );
        let embed_enc = if config.share_embedding {
            embed
        } else {
            uniform_matrix(
                &mut params,
                "embed_enc".into(),
                vocab.len(),
                config.embed_dim,
                embed_scale,
                &mut rng,
            )
        };
        let enc = EncoderParams::register(&mut params, "enc", &config, &mut rng);
        let dec = DecoderParams::register(&mut params, "dec", &config, vocab.len(), &mut rng);
        Ok(Model {
            config,
            vocab,
            params,
            embed,
            embed_enc,
            enc,
            dec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn decoder_embedding(&self) -> ParamId {
        self.embed
    }

    pub fn encoder_embedding(&self) -> ParamId {
        self.embed_enc
    }

    /// Sets every parameter to zero. Useful for wiring tests where the
    /// analytic output of the zero model is known.
    pub fn zero_params(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.get_mut(id).data_mut().fill(S::zero());
        }
    }

    /// Named tensors in checkpoint form.
    pub fn export_tensors(&self) -> BTreeMap<String, TensorRecord> {
        self.params
            .iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().iter().map(|v| v.as_f64()).collect(),
                    },
                )
            })
            .collect()
    }

    /// Restores parameters from named tensors, validating that the map
    /// matches this model's configuration exactly.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, TensorRecord>) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let record = tensors.get(&name).ok_or_else(|| {
                DamError::Checkpoint(format!(
                    "missing tensor `{name}` required by the configured model"
                ))
            })?;
            let own = self.params.get(id).shape().to_vec();
            if record.shape != own {
                return Err(DamError::Checkpoint(format!(
                    "tensor `{name}` shape mismatch: checkpoint {:?} vs config {:?}",
                    record.shape, own
                )));
            }
            let data: Vec<S> = record.data.iter().map(|&v| S::from_f64_lossy(v)).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(DamError::Checkpoint(format!("tensor `{name}` is not finite")));
            }
            self.params.get_mut(id).data_mut().copy_from_slice(&data);
        }
        for name in tensors.keys() {
            if self.params.by_name(name).is_none() {
                return Err(DamError::Checkpoint(format!(
                    "unexpected tensor `{name}` not used by the configured model"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Anything that owns a parameter set the gradient checker can perturb.
pub trait HasParams<S: Scalar> {
    fn param_set(&self) -> &ParamSet<S>;
    fn param_set_mut(&mut self) -> &mut ParamSet<S>;
}

impl<S: Scalar> HasParams<S> for ParamSet<S> {
    fn param_set(&self) -> &ParamSet<S> {
        self
    }
    fn param_set_mut(&mut self) -> &mut ParamSet<S> {
        self
    }
}

impl<S: Scalar> HasParams<S> for Model<S> {
    fn param_set(&self) -> &ParamSet<S> {
        &self.params
    }
    fn param_set_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }
}

// ── Test fixtures (shared across module tests) ───────────────────────

#[cfg(test)]
pub(crate) fn test_vocab() -> Vocabulary {
    let mut tokens: Vec<String> = ["<pad>", "<s>", "</s>", "<unk>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for t in [
        "yes", "no", "red", "blue", "a", "circle", "square", "is", "there", "what", "color",
        "?", "one", "two", "it",
    ] {
        tokens.push(t.to_string());
    }
    Vocabulary::from_tokens(tokens, 0)
}

#[cfg(test)]
pub(crate) fn test_model_f64(
    encoder: EncoderVariant,
    units: UnitConfig,
    hidden: usize,
) -> Model<f64> {
    let config = ModelConfig {
        hidden,
        embed_dim: 3,
        region_dim: crate::data::REGION_DIM,
        encoder,
        units,
        share_embedding: true,
    };
    Model::new(config, test_vocab(), 42).unwrap()
}

#[cfg(test)]
pub(crate) fn test_round_input(model: &Model<f64>) -> crate::data::RoundInput {
    let v = model.vocab();
    let ids = |words: &[&str]| -> Vec<usize> {
        words.iter().map(|w| v.id(w)).collect()
    };
    let mut region_a = vec![0.0; model.config().region_dim];
    region_a[0] = 1.0;
    region_a[3] = 1.0;
    let mut region_b = vec![0.0; model.config().region_dim];
    region_b[1] = 1.0;
    region_b[4] = 1.0;
    region_b[7] = 0.5;
    crate::data::RoundInput {
        question: ids(&["is", "there", "a", "square", "?"]),
        history: vec![ids(&["a", "red", "circle"]), ids(&["what", "color", "?", "red"])],
        regions: vec![region_a, region_b],
        captions: vec![ids(&["a", "red", "circle"]), ids(&["a", "blue", "square"])],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_deterministic() {
        let a = test_model_f64(EncoderVariant::Dualvd, UnitConfig::FULL, 4);
        let b = test_model_f64(EncoderVariant::Dualvd, UnitConfig::FULL, 4);
        for ((ia, na, ta), (_, _, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, a.params.name(ia));
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn export_then_load_round_trips() {
        let a = test_model_f64(EncoderVariant::Mn, UnitConfig::FULL, 4);
        let mut b = test_model_f64(EncoderVariant::Mn, UnitConfig::FULL, 4);
        b.zero_params();
        b.load_tensors(&a.export_tensors()).unwrap();
        for ((_, _, ta), (_, _, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn load_rejects_missing_and_unexpected_tensors() {
        let a = test_model_f64(EncoderVariant::Lf, UnitConfig::TWO_LSTM, 4);
        let mut full = test_model_f64(EncoderVariant::Lf, UnitConfig::FULL, 4);
        let err = full.load_tensors(&a.export_tensors()).unwrap_err();
        assert!(err.to_string().contains("missing tensor"), "{err}");

        let mut small = test_model_f64(EncoderVariant::Lf, UnitConfig::TWO_LSTM, 4);
        let err = small
            .load_tensors(&test_model_f64(EncoderVariant::Lf, UnitConfig::FULL, 4).export_tensors())
            .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("unexpected tensor") || msg.contains("shape mismatch"),
            "{msg}"
        );
    }

    #[test]
    fn load_rejects_shape_mismatch_naming_tensor() {
        let a = test_model_f64(EncoderVariant::Lf, UnitConfig::FULL, 4);
        let mut other = test_model_f64(EncoderVariant::Lf, UnitConfig::FULL, 6);
        let err = other.load_tensors(&a.export_tensors()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("shape mismatch"), "{msg}");
        assert!(msg.contains('`'), "{msg}");
    }
}
