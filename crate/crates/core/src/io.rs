//! 16-bit PCM WAV files and model checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attractor::AttractorSet;
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{AdamHyper, AdamState, ParamStore};

const PCM_SCALE: f64 = 32768.0;

/// Quantises one sample the way [`wav_write`] does. Returns the integer code
/// and whether it saturated.
pub fn quantize(x: f64) -> (i16, bool) {
    let v = (x * PCM_SCALE).round();
    if v > i16::MAX as f64 {
        (i16::MAX, true)
    } else if v < i16::MIN as f64 {
        (i16::MIN, true)
    } else {
        (v as i16, false)
    }
}

pub fn dequantize(v: i16) -> f64 {
    v as f64 / PCM_SCALE
}

/// Snaps a float sample onto the 16-bit grid.
pub fn snap(x: f64) -> f64 {
    dequantize(quantize(x).0)
}

/// Writes mono 16-bit PCM at 8 kHz. Returns how many samples were clipped.
pub fn wav_write(w: &Waveform, path: &Path) -> Result<usize> {
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            msg: format!("sample rate {} is not {SAMPLE_RATE}", w.sample_rate()),
        });
    }
    let n = w.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    buf.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    let mut clipped = 0;
    for &x in w.samples() {
        let (v, sat) = quantize(x);
        clipped += sat as usize;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    Ok(clipped)
}

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn wav_read(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err(path, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(wav_err(path, "truncated fmt chunk"));
            }
            format = Some((
                u16_at(&bytes, body),
                u16_at(&bytes, body + 2),
                u32_at(&bytes, body + 4),
                u16_at(&bytes, body + 14),
            ));
        } else if id == b"data" {
            let (tag, channels, rate, bits) = format.ok_or_else(|| wav_err(path, "data before fmt chunk"))?;
            if tag != 1 {
                return Err(wav_err(path, format!("unsupported format tag {tag}")));
            }
            if channels != 1 {
                return Err(wav_err(path, "mono required"));
            }
            if bits != 16 {
                return Err(wav_err(path, format!("{bits}-bit samples, 16 required")));
            }
            if rate != SAMPLE_RATE {
                return Err(wav_err(path, format!("sample rate {rate}, {SAMPLE_RATE} required")));
            }
            if body + size > bytes.len() {
                return Err(wav_err(path, "payload shorter than header claims"));
            }
            let samples = bytes[body..body + size]
                .chunks_exact(2)
                .map(|c| dequantize(i16::from_le_bytes([c[0], c[1]])))
                .collect();
            return Waveform::new(samples, rate);
        }
        pos = body + size + (size & 1);
    }
    Err(wav_err(path, "no data chunk"))
}

const MAGIC: &[u8; 8] = b"DANETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    best_val_loss: Option<f64>,
    adam_step: u64,
    adam: AdamHyper,
    has_fixed: bool,
    trainer: Option<serde_json::Value>,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Opaque trainer bookkeeping, kept as JSON.
    pub trainer: Option<serde_json::Value>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let params = ck.model.params();
    let mut arrays: Vec<(String, &Array2<f64>)> = Vec::new();
    for (name, a) in params.iter() {
        arrays.push((format!("param/{name}"), a));
    }
    for ((name, _), m) in params.iter().zip(&ck.adam.m) {
        arrays.push((format!("adam.m/{name}"), m));
    }
    for ((name, _), v) in params.iter().zip(&ck.adam.v) {
        arrays.push((format!("adam.v/{name}"), v));
    }
    if let Some(f) = ck.model.fixed_attractors() {
        arrays.push(("fixed".to_string(), f.values()));
    }
    let header = Header {
        config: ck.model.config().clone(),
        seed: params.seed(),
        epoch: ck.epoch,
        best_val_loss: ck.best_val_loss,
        adam_step: ck.adam.step,
        adam: ck.adam.hyper,
        has_fixed: ck.model.fixed_attractors().is_some(),
        trainer: ck.trainer.clone(),
        arrays: arrays
            .iter()
            .map(|(n, a)| ArrayEntry {
                name: n.clone(),
                rows: a.nrows(),
                cols: a.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, a) in &arrays {
        for x in a.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file"));
    }
    let version = u32_at(&bytes, 8);
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if 20 + hlen > bytes.len() {
        return Err(ckpt_err(path, "truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[20..20 + hlen]).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut pos = 20 + hlen;
    let mut params = ParamStore::new(header.seed);
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut fixed = None;
    for entry in &header.arrays {
        let n = entry.rows * entry.cols;
        if pos + n * 8 > bytes.len() {
            return Err(ckpt_err(path, format!("array {} is truncated", entry.name)));
        }
        let data: Vec<f64> = bytes[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += n * 8;
        let a = Array2::from_shape_vec((entry.rows, entry.cols), data).expect("size checked");
        if let Some(name) = entry.name.strip_prefix("param/") {
            params.insert(name, a);
        } else if entry.name.starts_with("adam.m/") {
            m.push(a);
        } else if entry.name.starts_with("adam.v/") {
            v.push(a);
        } else if entry.name == "fixed" {
            fixed = Some(AttractorSet::new(a)?);
        } else {
            return Err(ckpt_err(path, format!("unknown array {}", entry.name)));
        }
    }
    if pos != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes after arrays"));
    }
    if header.has_fixed != fixed.is_some() {
        return Err(ckpt_err(path, "fixed attractor flag disagrees with arrays"));
    }
    params.check_shapes(&m).map_err(|e| ckpt_err(path, e.to_string()))?;
    params.check_shapes(&v).map_err(|e| ckpt_err(path, e.to_string()))?;
    let model = Model::from_parts(header.config, params, fixed).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(Checkpoint {
        model,
        adam: AdamState {
            m,
            v,
            step: header.adam_step,
            hyper: header.adam,
        },
        epoch: header.epoch,
        best_val_loss: header.best_val_loss,
        trainer: header.trainer,
    })
}
