//! Synthetic harmonic "speakers" and on-disk mixture datasets.
//!
//! Each source is a harmonic tone complex with a slow amplitude envelope.
//! Mixtures are built so that the mixture equals the sum of its stored
//! references exactly, both in memory and after 16-bit quantisation.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::io::{snap, wav_read, wav_write};

pub const F0_MIN: f64 = 100.0;
pub const F0_MAX: f64 = 400.0;
/// Smallest ratio between the fundamentals of two sources in one mixture.
pub const F0_RATIO_MIN: f64 = 1.25;
pub const AM_DEPTH: f64 = 0.5;
pub const SOURCE_PEAK: f64 = 0.5;
pub const MIX_PEAK: f64 = 0.9;
pub const SNR_RANGE_DB: (f64, f64) = (0.0, 5.0);
pub const DEFAULT_DURATION: f64 = 2.0;
/// Harmonic count range per source, further capped by Nyquist.
pub const HARMONICS: (usize, usize) = (3, 8);
/// Smallest allowed distance between harmonics of different sources.
pub const MIN_HARMONIC_GAP_HZ: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub f0: f64,
    pub n_harmonics: usize,
    pub am_rate: f64,
    pub duration: f64,
    pub seed: u64,
}

/// Harmonic series with `1/k` amplitudes and random phases, multiplied by a
/// sinusoidal envelope and peak-normalised.
pub fn synth_source(spec: &SourceSpec) -> Result<Waveform> {
    let sr = SAMPLE_RATE as f64;
    let highest = spec.f0 * spec.n_harmonics as f64;
    if highest >= sr / 2.0 {
        return Err(Error::Nyquist {
            highest_hz: highest,
            nyquist_hz: sr / 2.0,
        });
    }
    if spec.n_harmonics == 0 || !(spec.f0 > 0.0) || !(spec.duration > 0.0) {
        return Err(Error::invalid("source needs f0 > 0, harmonics ≥ 1, duration > 0"));
    }
    let n = (spec.duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<f64> = (0..spec.n_harmonics).map(|_| rng.random::<f64>() * TAU).collect();
    let am_phase = rng.random::<f64>() * TAU;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, ph)| {
                    let h = (k + 1) as f64;
                    (TAU * h * spec.f0 * t + ph).sin() / h
                })
                .sum();
            tone * (1.0 + AM_DEPTH * (TAU * spec.am_rate * t + am_phase).sin())
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut x {
            *v *= SOURCE_PEAK / peak;
        }
    }
    Waveform::new(x, SAMPLE_RATE)
}

/// Scales `s2` so that `10 log10(P(s1) / P(s2')) = snr_db`; returns the
/// mixture and the scaled interferer.
pub fn mix_at_snr(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if s1.len() != s2.len() {
        return Err(Error::shape(format!("sources have {} and {} samples", s1.len(), s2.len())));
    }
    let p1 = s1.power();
    let p2 = s2.power();
    if p2 == 0.0 {
        return Err(Error::ZeroPower(1));
    }
    if p1 == 0.0 {
        return Err(Error::ZeroPower(0));
    }
    let g = (p1 / (p2 * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = s2.samples().iter().map(|v| v * g).collect();
    let mix = s1.samples().iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok((Waveform::new(mix, SAMPLE_RATE)?, Waveform::new(scaled, SAMPLE_RATE)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub sources: Vec<SourceSpec>,
    /// Level of the first source over every other source.
    pub snr_db: f64,
    pub seed: u64,
}

/// Renders a mixture and its scaled references. References are snapped to
/// the 16-bit grid before summing so the mixture stays exactly additive.
pub fn render_mixture(spec: &MixtureSpec) -> Result<(Waveform, Vec<Waveform>)> {
    let raw = spec.sources.iter().map(synth_source).collect::<Result<Vec<_>>>()?;
    let first = raw.first().ok_or_else(|| Error::invalid("mixture needs a source"))?;
    let mut refs = vec![first.samples().to_vec()];
    for s in &raw[1..] {
        let (_, scaled) = mix_at_snr(first, s, spec.snr_db)?;
        refs.push(scaled.into_samples());
    }
    let n = first.len();
    let peak = (0..n)
        .map(|i| refs.iter().map(|r| r[i]).sum::<f64>().abs())
        .fold(0.0f64, f64::max);
    let gain = if peak > MIX_PEAK { MIX_PEAK / peak } else { 1.0 };
    for r in &mut refs {
        for v in r.iter_mut() {
            *v = snap(*v * gain);
        }
    }
    let mix: Vec<f64> = (0..n).map(|i| refs.iter().map(|r| r[i]).sum()).collect();
    let refs = refs
        .into_iter()
        .map(|r| Waveform::new(r, SAMPLE_RATE))
        .collect::<Result<Vec<_>>>()?;
    Ok((Waveform::new(mix, SAMPLE_RATE)?, refs))
}

/// FNV-1a over the split name, mixed with the dataset seed and index.
fn mixture_seed(seed: u64, split: &str, index: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in split.bytes().chain(seed.to_le_bytes()).chain((index as u64).to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Closest distance in Hz between harmonics of two different sources.
pub fn min_cross_gap(sources: &[(f64, usize)]) -> f64 {
    let mut gap = f64::INFINITY;
    for (i, &(fa, ha)) in sources.iter().enumerate() {
        for &(fb, hb) in &sources[i + 1..] {
            for ka in 1..=ha {
                for kb in 1..=hb {
                    gap = gap.min((ka as f64 * fa - kb as f64 * fb).abs());
                }
            }
        }
    }
    gap
}

/// Draws `(f0, harmonics)` per source until fundamentals are at least
/// [`F0_RATIO_MIN`] apart and no two harmonics of different sources fall
/// within [`MIN_HARMONIC_GAP_HZ`].
fn draw_sources(rng: &mut ChaCha8Rng, c: usize) -> Vec<(f64, usize)> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    loop {
        let drawn: Vec<(f64, usize)> = (0..c)
            .map(|_| {
                let f0 = (F0_MIN.ln() + rng.random::<f64>() * (F0_MAX / F0_MIN).ln()).exp();
                let max_h = ((nyquist - 1.0) / f0).floor() as usize;
                (f0, rng.random_range(HARMONICS.0..=HARMONICS.1).min(max_h))
            })
            .collect();
        let separated = drawn.iter().enumerate().all(|(i, (a, _))| {
            drawn[i + 1..]
                .iter()
                .all(|(b, _)| a.max(*b) / a.min(*b) >= F0_RATIO_MIN)
        });
        if separated && min_cross_gap(&drawn) >= MIN_HARMONIC_GAP_HZ {
            return drawn;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub mixtures: Vec<MixtureSpec>,
}

impl DatasetManifest {
    /// Draws `count` mixtures of `speakers` sources each.
    pub fn generate(split: &str, count: usize, speakers: usize, seed: u64, duration: f64) -> Result<Self> {
        if speakers == 0 {
            return Err(Error::invalid("need at least one speaker"));
        }
        let mixtures = (0..count)
            .map(|i| {
                let mseed = mixture_seed(seed, split, i);
                let mut rng = ChaCha8Rng::seed_from_u64(mseed);
                let sources = draw_sources(&mut rng, speakers)
                    .into_iter()
                    .map(|(f0, n_harmonics)| SourceSpec {
                        f0,
                        n_harmonics,
                        am_rate: rng.random_range(0.5..4.0),
                        duration,
                        seed: rng.random(),
                    })
                    .collect();
                MixtureSpec {
                    sources,
                    snr_db: rng.random_range(SNR_RANGE_DB.0..SNR_RANGE_DB.1),
                    seed: mseed,
                }
            })
            .collect();
        Ok(Self {
            split: split.to_string(),
            seed,
            mixtures,
        })
    }

    /// In-memory mixtures and references.
    pub fn render(&self) -> Result<Vec<(Waveform, Vec<Waveform>)>> {
        self.mixtures.iter().map(render_mixture).collect()
    }
}

/// One line of `index.jsonl`; paths are relative to the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub mixture_path: String,
    pub source_paths: Vec<String>,
    #[serde(rename = "C")]
    pub c: usize,
    pub snr_db: f64,
    pub seed: u64,
}

pub const INDEX_FILE: &str = "index.jsonl";

/// Writes WAVs and `index.jsonl` under `out`. Returns the index entries.
pub fn write_dataset(manifest: &DatasetManifest, out: &Path) -> Result<Vec<IndexEntry>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(manifest.mixtures.len());
    for (i, spec) in manifest.mixtures.iter().enumerate() {
        let (mix, refs) = render_mixture(spec)?;
        let stem = format!("{}_{i:05}", manifest.split);
        let mixture_path = format!("{stem}_mix.wav");
        wav_write(&mix, &out.join(&mixture_path))?;
        let mut source_paths = Vec::with_capacity(refs.len());
        for (j, r) in refs.iter().enumerate() {
            let p = format!("{stem}_s{j}.wav");
            wav_write(r, &out.join(&p))?;
            source_paths.push(p);
        }
        entries.push(IndexEntry {
            mixture_path,
            source_paths,
            c: refs.len(),
            snr_db: spec.snr_db,
            seed: spec.seed,
        });
    }
    let path = out.join(INDEX_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for e in &entries {
        let line = serde_json::to_string(e).expect("plain struct");
        writeln!(f, "{line}").map_err(|err| Error::io(&path, err))?;
    }
    Ok(entries)
}

/// Reads an index; accepts the index file itself or its directory.
pub fn read_index(path: &Path) -> Result<(PathBuf, Vec<IndexEntry>)> {
    let file = if path.is_dir() { path.join(INDEX_FILE) } else { path.to_path_buf() };
    let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: IndexEntry = serde_json::from_str(&line)
            .map_err(|err| Error::invalid(format!("{}:{}: {err}", file.display(), n + 1)))?;
        if e.c != e.source_paths.len() {
            return Err(Error::invalid(format!(
                "{}:{}: C = {} but {} source paths",
                file.display(),
                n + 1,
                e.c,
                e.source_paths.len()
            )));
        }
        entries.push(e);
    }
    Ok((base, entries))
}

pub fn load_entry(base: &Path, e: &IndexEntry) -> Result<(Waveform, Vec<Waveform>)> {
    let mix = wav_read(&base.join(&e.mixture_path))?;
    let refs = e
        .source_paths
        .iter()
        .map(|p| wav_read(&base.join(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok((mix, refs))
}
