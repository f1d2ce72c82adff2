//! STFT analysis/synthesis and spectrogram utilities.
//!
//! Spectrograms are stored frame-major: `values[[t, f]]`. Flattening a
//! spectrogram therefore yields index `t * n_bins + f`, i.e. the frequency
//! index varies fastest. Every module that talks about "FT" vectors uses this
//! order.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;

/// Default floor for [`log_magnitude`].
pub const LOG_FLOOR: f64 = 1e-8;

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform must have at least one sample"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 256,
            hop: 64,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::invalid(format!(
                "hop {} must be in 1..={}",
                self.hop, self.window_len
            )));
        }
        if self.window_len < 2 {
            return Err(Error::invalid("window_len must be at least 2"));
        }
        Ok(())
    }

    pub fn fft_size(&self) -> usize {
        self.window_len
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            1 + (len - self.window_len) / self.hop
        }
    }

    pub fn output_len(&self, n_frames: usize) -> usize {
        (n_frames.saturating_sub(1)) * self.hop + self.window_len
    }

    /// Periodic square-root Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| (0.5 * (1.0 - (2.0 * PI * i as f64 / n).cos())).sqrt())
            .collect()
    }
}

/// Complex STFT, `values[[t, f]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    values: Array2<Complex64>,
    config: StftConfig,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(values: Array2<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        config.validate()?;
        if values.ncols() != config.n_bins() {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, config implies {}",
                values.ncols(),
                config.n_bins()
            )));
        }
        Ok(Self {
            values,
            config,
            sample_rate,
        })
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    /// Number of T-F bins (F·T).
    pub fn n_cells(&self) -> usize {
        self.values.len()
    }
}

/// Non-negative magnitude spectrogram, `values[[t, f]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    values: Array2<f64>,
}

impl MagnitudeSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("magnitudes must be finite and non-negative"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    /// Flattened 1×FT vector, frequency index fastest.
    pub fn flatten(&self) -> Array1<f64> {
        self.values.iter().copied().collect()
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = cfg.window_len;
    if w.len() < n {
        return Err(Error::SignalTooShort {
            len: w.len(),
            needed: n,
        });
    }
    let n_frames = cfg.n_frames(w.len());
    let n_bins = cfg.n_bins();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut values = Array2::zeros((n_frames, n_bins));
    for t in 0..n_frames {
        let frame = &w.samples()[t * cfg.hop..t * cfg.hop + n];
        for ((b, &x), &win) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(x * win, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_bins {
            values[[t, f]] = buf[f];
        }
    }
    ComplexSpectrogram::new(values, *cfg, w.sample_rate())
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = spec.config();
    let n = cfg.window_len;
    if spec.n_bins() != cfg.n_bins() {
        return Err(Error::shape(format!(
            "{} bins inconsistent with fft size {}",
            spec.n_bins(),
            n
        )));
    }
    let n_frames = spec.n_frames();
    if n_frames == 0 {
        return Err(Error::invalid("spectrogram has no frames"));
    }
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let out_len = cfg.output_len(n_frames);
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..n_frames {
        let row = spec.values().row(t);
        // Rebuild the full Hermitian spectrum from the one-sided bins.
        for k in 0..n {
            buf[k] = if k < row.len() {
                row[k]
            } else {
                row[n - k].conj()
            };
        }
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for k in 0..n {
            out[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    for (o, z) in out.iter_mut().zip(&norm) {
        *o = if *z > 1e-10 { *o / z } else { 0.0 };
    }
    Waveform::new(out, spec.sample_rate())
}

pub fn magnitude(spec: &ComplexSpectrogram) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram {
        values: spec.values().mapv(|c| c.norm()),
    }
}

/// Elementwise `ln(max(value, floor))`.
pub fn log_magnitude(mag: &MagnitudeSpectrogram, floor: f64) -> Array2<f64> {
    mag.values().mapv(|v| v.max(floor).ln())
}

/// Masks the mixture magnitude, keeps the mixture phase and inverts.
pub fn reconstruct(mask_row: &[f64], mix: &ComplexSpectrogram) -> Result<Waveform> {
    if mask_row.len() != mix.n_cells() {
        return Err(Error::shape(format!(
            "mask has {} entries, spectrogram has {}",
            mask_row.len(),
            mix.n_cells()
        )));
    }
    if let Some(i) = mask_row.iter().position(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::invalid(format!(
            "mask entry {i} = {} outside [0, 1]",
            mask_row[i]
        )));
    }
    let n_bins = mix.n_bins();
    let values = Array2::from_shape_fn(mix.values().raw_dim(), |(t, f)| {
        mix.values()[[t, f]] * mask_row[t * n_bins + f]
    });
    istft(&ComplexSpectrogram::new(values, mix.config(), mix.sample_rate())?)
}
