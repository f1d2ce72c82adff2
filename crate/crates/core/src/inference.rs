//! Test-time attractor estimation and separation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adanet::select_attractor_set;
use crate::attractor::{estimate_masks, similarity_scores, threshold_vector, AttractorSet, ThresholdVector};
use crate::dsp::{self, Waveform};
use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::model::{features, Model};
use crate::nn::{embed, EmbeddingMatrix};
use crate::perm::permutations;

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Cluster thresholded embeddings with k-means.
    KMeans,
    /// Use the attractor table stored with the model.
    Fixed,
    /// Select among anchor subsets (ADANet models only).
    Anchored,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::KMeans),
            "fixed" => Ok(Self::Fixed),
            "anchored" => Ok(Self::Anchored),
            other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::KMeans => "kmeans",
            Self::Fixed => "fixed",
            Self::Anchored => "anchored",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `C × K` centres.
    pub centers: Array2<f64>,
    /// Nearest centre for every bin, kept or not.
    pub labels: Vec<usize>,
    /// Inertia over the kept bins after each assignment step.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.history.last().expect("at least one iteration")
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: ndarray::ArrayView1<'_, f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding, fitted on the kept bins only.
/// An emptied cluster is re-seeded at the point farthest from its centre.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, w: &ThresholdVector, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if w.len() != points.nrows() {
        return Err(Error::shape(format!(
            "threshold covers {} bins, got {} points",
            w.len(),
            points.nrows()
        )));
    }
    let kept: Vec<usize> = (0..points.nrows()).filter(|&i| w.is_kept(i)).collect();
    if kept.is_empty() {
        return Err(Error::invalid("no bins above threshold"));
    }
    let fit = points.select(Axis(0), &kept);
    let n = fit.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Array2::zeros((k, fit.ncols()));
    centers.row_mut(0).assign(&fit.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = fit.rows().into_iter().map(|p| sq_dist(p, centers.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(j).assign(&fit.row(pick));
        for (i, p) in fit.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(j)));
        }
    }

    let mut labels = vec![0; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut inertia = 0.0;
        for (i, p) in fit.rows().into_iter().enumerate() {
            let (j, d) = nearest(p, &centers);
            labels[i] = j;
            inertia += d;
        }
        let prev = history.last().copied();
        history.push(inertia);
        if let Some(prev) = prev {
            if prev - inertia <= KMEANS_TOL * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, p) in fit.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &p);
            counts[labels[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(fit.row(a), centers.row(labels[a]));
                        let db = sq_dist(fit.row(b), centers.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centers.row_mut(j).assign(&fit.row(far));
                labels[far] = j;
            }
        }
    }
    let all_labels = points.rows().into_iter().map(|p| nearest(p, &centers).0).collect();
    Ok(KMeansResult {
        centers,
        labels: all_labels,
        history,
    })
}

/// Permutation of `set` rows closest (summed squared distance) to `reference`.
pub fn align_to(set: &AttractorSet, reference: &Array2<f64>) -> Vec<usize> {
    let c = set.n_sources();
    let mut best = (f64::INFINITY, (0..c).collect::<Vec<_>>());
    for perm in permutations(c) {
        let d: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &p)| sq_dist(set.values().row(p), reference.row(i)))
            .sum();
        if d < best.0 {
            best = (d, perm);
        }
    }
    best.1
}

/// Averages attractor sets after aligning each to the running mean.
pub fn fixed_attractors(sets: &[AttractorSet]) -> Result<AttractorSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("no attractor sets to average"))?;
    let (c, k) = first.values().dim();
    if c > 4 {
        return Err(Error::invalid(format!("alignment supports at most 4 sources, got {c}")));
    }
    let mut sum = first.values().clone();
    for (n, s) in sets.iter().enumerate().skip(1) {
        if s.values().dim() != (c, k) {
            return Err(Error::shape("attractor sets differ in shape"));
        }
        let mean = &sum / n as f64;
        let perm = align_to(s, &mean);
        sum += s.permuted(&perm).values();
    }
    AttractorSet::new(sum / sets.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Separation {
    pub sources: Vec<Waveform>,
    pub masks: MaskSet,
    pub attractors: AttractorSet,
    pub embeddings: EmbeddingMatrix,
    pub threshold: ThresholdVector,
}

/// Attractors for `c` sources from embeddings under `strategy`.
pub fn infer_attractors(
    model: &Model,
    v: &EmbeddingMatrix,
    w: &ThresholdVector,
    c: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<AttractorSet> {
    match strategy {
        Strategy::KMeans => AttractorSet::new(kmeans(v.bins().view(), c, w, seed)?.centers),
        Strategy::Fixed => {
            let f = model
                .fixed_attractors()
                .ok_or_else(|| Error::invalid("model has no fixed attractor table"))?;
            if f.n_sources() != c {
                return Err(Error::invalid(format!(
                    "fixed table has {} attractors, {c} requested",
                    f.n_sources()
                )));
            }
            Ok(f.clone())
        }
        Strategy::Anchored => {
            let anchors = model
                .anchors()
                .ok_or_else(|| Error::invalid("anchored inference needs an ADANet model"))?;
            Ok(select_attractor_set(anchors.view(), v, w, c)?.attractors)
        }
    }
}

pub fn separate(model: &Model, mixture: &Waveform, c: usize, strategy: Strategy, seed: u64) -> Result<Separation> {
    if c == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    let cfg = model.config();
    let spec = dsp::stft(mixture, &cfg.stft)?;
    let feats = features(&spec);
    let v = embed(model.params(), feats.view(), &cfg.net)?;
    let mix_mag = dsp::magnitude(&spec).flatten();
    let w = threshold_vector(mix_mag.view(), cfg.keep_fraction)?;
    let attractors = infer_attractors(model, &v, &w, c, strategy, seed)?;
    let masks = estimate_masks(&similarity_scores(&attractors, &v)?, cfg.nonlinearity)?;
    let sources = (0..c)
        .map(|i| dsp::reconstruct(masks.row(i).as_slice().expect("contiguous"), &spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Separation {
        sources,
        masks,
        attractors,
        embeddings: v,
        threshold: w,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `dims × K`, orthonormal rows, by decreasing variance.
    pub components: Array2<f64>,
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    /// Projects rows of `points` (`n × K`) onto the components.
    pub fn project(&self, points: ArrayView2<'_, f64>) -> Array2<f64> {
        (&points - &self.mean.view().insert_axis(Axis(0))).dot(&self.components.t())
    }
}

/// Principal components of the rows of `points` by power iteration with
/// deflation.
pub fn pca(points: ArrayView2<'_, f64>, dims: usize) -> Result<Pca> {
    let (n, k) = points.dim();
    if n == 0 || dims == 0 || dims > k {
        return Err(Error::invalid(format!("cannot take {dims} components of {n} × {k} data")));
    }
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let centered = &points - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / n as f64;
    let total_variance = cov.diag().sum();
    let mut components = Array2::zeros((dims, k));
    let mut variances = Vec::with_capacity(dims);
    for d in 0..dims {
        let mut x = Array1::from_shape_fn(k, |i| 1.0 + 0.1 * ((i * 7 + d * 3) % 11) as f64);
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let mut y = cov.dot(&x);
            for prev in 0..d {
                let c = components.row(prev);
                let p = c.dot(&y);
                y.scaled_add(-p, &c);
            }
            let norm = y.dot(&y).sqrt();
            if norm < 1e-300 {
                // Remaining variance is zero; any orthogonal direction works.
                y = Array1::zeros(k);
                y[d % k] = 1.0;
                for prev in 0..d {
                    let c = components.row(prev);
                    let p = c.dot(&y);
                    y.scaled_add(-p, &c);
                }
                let nn = y.dot(&y).sqrt();
                x = y / nn;
                lambda = 0.0;
                break;
            }
            let y = y / norm;
            let delta = (&y - &x).mapv(f64::abs).sum();
            x = y;
            lambda = norm;
            if delta < 1e-12 {
                break;
            }
        }
        cov = cov - lambda * outer(&x);
        components.row_mut(d).assign(&x);
        variances.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        variances,
        total_variance,
    })
}

fn outer(x: &Array1<f64>) -> Array2<f64> {
    let col = x.view().insert_axis(Axis(1));
    let row = x.view().insert_axis(Axis(0));
    col.dot(&row)
}
