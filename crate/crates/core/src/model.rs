//! Model configuration, parameters and training examples.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attractor::{AttractorSet, Nonlinearity, KEEP_FRACTION};
use crate::dsp::{self, ComplexSpectrogram, StftConfig, Waveform, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::nn::params::ANCHORS;
use crate::nn::{standardize, EmbedNetConfig, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Attractors from oracle assignments during training.
    Danet,
    /// Attractors from trainable anchor points.
    Adanet,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "danet" => Ok(Self::Danet),
            "adanet" => Ok(Self::Adanet),
            other => Err(Error::invalid(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub net: EmbedNetConfig,
    pub stft: StftConfig,
    pub nonlinearity: Nonlinearity,
    pub keep_fraction: f64,
    /// Anchor count `N` (ADANet only).
    pub anchors: usize,
    /// Output slots `C_max` used by ADANet training.
    pub slots: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Danet,
            net: EmbedNetConfig::default(),
            stft: StftConfig::default(),
            nonlinearity: Nonlinearity::Softmax,
            keep_fraction: KEEP_FRACTION,
            anchors: 6,
            slots: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.stft.validate()?;
        if self.net.n_bins != self.stft.n_bins() {
            return Err(Error::invalid(format!(
                "network expects {} bins but the STFT yields {}",
                self.net.n_bins,
                self.stft.n_bins()
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid("keep fraction must be in (0, 1]"));
        }
        if self.kind == ModelKind::Adanet {
            if self.slots == 0 {
                return Err(Error::invalid("need at least one output slot"));
            }
            if self.anchors < self.slots {
                return Err(Error::TooManySources {
                    sources: self.slots,
                    anchors: self.anchors,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    fixed: Option<AttractorSet>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = config.net.init_params(seed);
        if config.kind == ModelKind::Adanet {
            params.insert_uniform(ANCHORS, (config.anchors, config.net.embedding_dim), -1.0, 1.0);
        }
        Ok(Self {
            config,
            params,
            fixed: None,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore, fixed: Option<AttractorSet>) -> Result<Self> {
        config.validate()?;
        let mut expected: Vec<(String, usize, usize)> = config.net.layer_shapes();
        if config.kind == ModelKind::Adanet {
            expected.push((ANCHORS.to_string(), config.anchors, config.net.embedding_dim));
        }
        for (name, r, c) in &expected {
            match params.get(name) {
                Some(a) if a.dim() == (*r, *c) => {}
                Some(a) => {
                    return Err(Error::shape(format!(
                        "{name} is {:?}, config implies ({r}, {c})",
                        a.dim()
                    )))
                }
                None => return Err(Error::shape(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::shape("unexpected extra parameters"));
        }
        if let Some(f) = &fixed {
            if f.dim() != config.net.embedding_dim {
                return Err(Error::shape("fixed attractors have the wrong dimension"));
            }
        }
        Ok(Self {
            config,
            params,
            fixed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn anchors(&self) -> Option<&Array2<f64>> {
        self.params.get(ANCHORS)
    }

    pub fn fixed_attractors(&self) -> Option<&AttractorSet> {
        self.fixed.as_ref()
    }

    /// Changes the threshold keep fraction used at inference.
    pub fn set_keep_fraction(&mut self, q: f64) -> Result<()> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::invalid("keep fraction must be in (0, 1]"));
        }
        self.config.keep_fraction = q;
        Ok(())
    }

    pub fn set_fixed_attractors(&mut self, a: Option<AttractorSet>) {
        self.fixed = a;
    }
}

/// Network input features for a mixture: standardised log magnitude, `T × F`.
pub fn features(spec: &ComplexSpectrogram) -> Array2<f64> {
    standardize(&dsp::log_magnitude(&dsp::magnitude(spec), LOG_FLOOR))
}

/// One training utterance (or chunk of one).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `T × F` standardised log magnitude of the mixture.
    pub features: Array2<f64>,
    /// Flattened mixture magnitude (1 × FT).
    pub mix_mag: Array1<f64>,
    /// Flattened reference magnitudes (C × FT).
    pub source_mags: Array2<f64>,
}

impl Example {
    pub fn from_waveforms(mixture: &Waveform, sources: &[Waveform], cfg: &StftConfig) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("need at least one source"));
        }
        let spec = dsp::stft(mixture, cfg)?;
        let mix_mag = dsp::magnitude(&spec).flatten();
        let mut source_mags = Array2::zeros((sources.len(), mix_mag.len()));
        for (i, s) in sources.iter().enumerate() {
            if s.len() != mixture.len() {
                return Err(Error::shape(format!(
                    "source {i} has {} samples, mixture has {}",
                    s.len(),
                    mixture.len()
                )));
            }
            let m = dsp::magnitude(&dsp::stft(s, cfg)?).flatten();
            source_mags.row_mut(i).assign(&m);
        }
        Ok(Self {
            features: features(&spec),
            mix_mag,
            source_mags,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_sources(&self) -> usize {
        self.source_mags.nrows()
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Example {
        let f = self.n_bins();
        let end = (start + len).min(self.n_frames());
        Example {
            features: self.features.slice(s![start..end, ..]).to_owned(),
            mix_mag: self.mix_mag.slice(s![start * f..end * f]).to_owned(),
            source_mags: self.source_mags.slice(s![.., start * f..end * f]).to_owned(),
        }
    }

    /// Non-overlapping chunks of `len` frames. An utterance shorter than
    /// `len` is returned whole; a trailing partial chunk is dropped.
    pub fn chunks(&self, len: usize) -> Vec<Example> {
        let t = self.n_frames();
        if len == 0 || t <= len {
            return vec![self.clone()];
        }
        (0..t / len).map(|i| self.slice_frames(i * len, len)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(frames: usize) -> Example {
        Example {
            features: Array2::from_shape_fn((frames, 3), |(t, f)| (t * 3 + f) as f64),
            mix_mag: Array1::from_shape_fn(frames * 3, |i| i as f64),
            source_mags: Array2::from_shape_fn((2, frames * 3), |(c, i)| (c * 1000 + i) as f64),
        }
    }

    #[test]
    fn chunking_keeps_alignment() {
        let ex = example(10);
        let chunks = ex.chunks(4);
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1].features.row(0).to_vec(), vec![12.0, 13.0, 14.0]);
        assert_eq!(chunks[1].mix_mag[0], 12.0);
        assert_eq!(chunks[1].source_mags[[1, 0]], 1012.0);
        assert_eq!(ex.chunks(400).len(), 1);
        assert_eq!(ex.chunks(400)[0], ex);
    }

    #[test]
    fn adanet_model_has_anchor_array() {
        let cfg = ModelConfig {
            kind: ModelKind::Adanet,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 1).unwrap();
        let a = m.anchors().unwrap();
        assert_eq!(a.dim(), (6, 20));
        assert!(a.iter().all(|x| x.abs() <= 1.0));
        assert!(Model::from_parts(m.config().clone(), m.params().clone(), None).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig {
            kind: ModelKind::Adanet,
            anchors: 2,
            slots: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.anchors = 3;
        assert!(cfg.validate().is_ok());
        cfg.net.n_bins = 100;
        assert!(cfg.validate().is_err());
    }
}
