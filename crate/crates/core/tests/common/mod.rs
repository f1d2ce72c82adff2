//! Helpers shared by the integration tests and the acceptance runner:
//! tiny model configurations, a finite-difference gradient checker and
//! loop-based reference implementations of the attractor arithmetic.

#![allow(dead_code)]

use danet::attractor::{threshold_vector, Nonlinearity, ThresholdVector};
use danet::data::DatasetManifest;
use danet::dsp::StftConfig;
use danet::model::{Example, Model, ModelConfig, ModelKind};
use danet::nn::{EmbedNetConfig, ParamGrads};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 33-bin STFT with a one-layer net; well under 2000 parameters.
pub fn tiny_config(kind: ModelKind) -> ModelConfig {
    let stft = StftConfig {
        window_len: 64,
        hop: 16,
    };
    ModelConfig {
        kind,
        net: EmbedNetConfig {
            context: 1,
            hidden_sizes: vec![6],
            embedding_dim: 4,
            n_bins: stft.n_bins(),
        },
        stft,
        nonlinearity: Nonlinearity::Softmax,
        keep_fraction: 0.9,
        anchors: 3,
        slots: 2,
    }
}

/// Two-speaker examples rendered from the synthetic generator.
pub fn examples(cfg: &ModelConfig, split: &str, count: usize, seed: u64, duration: f64) -> Vec<Example> {
    DatasetManifest::generate(split, count, 2, seed, duration)
        .unwrap()
        .render()
        .unwrap()
        .iter()
        .map(|(m, r)| Example::from_waveforms(m, r, &cfg.stft).unwrap())
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub within: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.checked.max(1) as f64
    }
}

/// Compares analytic gradients with central differences on every scalar
/// parameter. A coordinate passes when the relative error is below `tol`,
/// or when both values are below `floor` in magnitude.
pub fn grad_check(
    model: &Model,
    loss: impl Fn(&Model) -> f64,
    analytic: &ParamGrads,
    h: f64,
    tol: f64,
    floor: f64,
) -> GradCheck {
    let mut probe = model.clone();
    let mut out = GradCheck {
        checked: 0,
        within: 0,
        worst: 0.0,
    };
    for (p, g) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let base = model.params().iter().nth(p).unwrap().1[[r, c]];
            set(&mut probe, p, r, c, base + h);
            let up = loss(&probe);
            set(&mut probe, p, r, c, base - h);
            let down = loss(&probe);
            set(&mut probe, p, r, c, base);
            let numeric = (up - down) / (2.0 * h);
            let a = g[[r, c]];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < floor { 0.0 } else { (a - numeric).abs() / scale };
            out.checked += 1;
            if rel < tol {
                out.within += 1;
            }
            out.worst = out.worst.max(rel);
        }
    }
    out
}

fn set(model: &mut Model, p: usize, r: usize, c: usize, value: f64) {
    model.params_mut().values_mut().nth(p).unwrap()[[r, c]] = value;
}

/// `a_i[k] = Σ y_i w v_k / Σ y_i w`, or `None` for an empty source.
pub fn ref_attractors(v: &Array2<f64>, y: &Array2<f64>, w: &Array1<f64>) -> Option<Vec<Vec<f64>>> {
    let (k, ft) = v.dim();
    let mut out = Vec::new();
    for i in 0..y.nrows() {
        let mut mass = 0.0;
        let mut num = vec![0.0; k];
        for b in 0..ft {
            let yw = y[[i, b]] * w[b];
            mass += yw;
            for (d, n) in num.iter_mut().enumerate() {
                *n += yw * v[[d, b]];
            }
        }
        if mass <= 0.0 {
            return None;
        }
        out.push(num.into_iter().map(|n| n / mass).collect());
    }
    Some(out)
}

/// Per-bin softmax of anchor scores.
pub fn ref_anchor_assignments(anchors: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (n, k) = anchors.dim();
    let ft = v.ncols();
    let mut y = Array2::zeros((n, ft));
    for b in 0..ft {
        let s: Vec<f64> = (0..n)
            .map(|j| (0..k).map(|d| anchors[[j, d]] * v[[d, b]]).sum())
            .collect();
        let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - top).exp()).sum();
        for j in 0..n {
            y[[j, b]] = (s[j] - top).exp() / z;
        }
    }
    y
}

/// Subsets of `0..n` of size `c`, sorted lexicographically.
pub fn ref_subsets(n: usize, c: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == c)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect();
    out.sort();
    out
}

/// Exhaustive selection: `(index, attractors)` of the subset with the
/// smallest maximum pairwise dot product, first index on ties.
pub fn ref_select(anchors: &Array2<f64>, v: &Array2<f64>, w: &Array1<f64>, c: usize) -> Option<(usize, Vec<Vec<f64>>)> {
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    for (p, subset) in ref_subsets(anchors.nrows(), c).iter().enumerate() {
        let l = Array2::from_shape_fn((c, anchors.ncols()), |(i, d)| anchors[[subset[i], d]]);
        let y = ref_anchor_assignments(&l, v);
        let Some(a) = ref_attractors(v, &y, w) else {
            continue;
        };
        let mut s = if c < 2 { 0.0 } else { f64::NEG_INFINITY };
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    s = s.max(a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum());
                }
            }
        }
        if best.as_ref().is_none_or(|b| s < b.1) {
            best = Some((p, s, a));
        }
    }
    best.map(|(p, _, a)| (p, a))
}

/// All orderings of `0..n` by Heap's algorithm (unsorted).
pub fn ref_permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k - 1 {
            heap(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
        heap(k - 1, a, out);
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

/// `(1/C) Σ_i Σ_b (x_b (t_{perm_i, b} - e_{i, b}))²`.
pub fn ref_perm_loss(x: &Array1<f64>, t: &Array2<f64>, e: &Array2<f64>, perm: &[usize]) -> f64 {
    let c = e.nrows();
    let mut total = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        for b in 0..x.len() {
            let d = x[b] * (t[[j, b]] - e[[i, b]]);
            total += d * d;
        }
    }
    total / c as f64
}

/// Minimum over every ordering; among equal losses the smallest ordering wins.
pub fn ref_pit(x: &Array1<f64>, t: &Array2<f64>, e: &Array2<f64>) -> (f64, Vec<usize>) {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in ref_permutations(e.nrows()) {
        let l = ref_perm_loss(x, t, e, &p);
        let better = match &best {
            None => true,
            Some((bl, bp)) => l < *bl || (l == *bl && p < *bp),
        };
        if better {
            best = Some((l, p));
        }
    }
    best.unwrap()
}

/// Random problem for the attractor oracles.
pub struct Instance {
    pub v: Array2<f64>,
    pub mix_mag: Array1<f64>,
    pub w: ThresholdVector,
    pub anchors: Array2<f64>,
    pub c: usize,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=8);
    let ft = rng.random_range(1..=200);
    let n = rng.random_range(1..=8);
    let c = rng.random_range(1..=n.min(3));
    let v = Array2::from_shape_fn((k, ft), |_| rng.random_range(-1.0..1.0));
    let mix_mag = Array1::from_shape_fn(ft, |_| rng.random_range(0.0..2.0));
    let q = rng.random_range(0.1..=1.0);
    let w = threshold_vector(mix_mag.view(), q).unwrap();
    let anchors = Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0));
    Instance { v, mix_mag, w, anchors, c }
}

/// Random `C × FT` masks whose columns sum to one.
pub fn random_masks(rng: &mut impl Rng, c: usize, ft: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((c, ft), |_| rng.random_range(0.01..1.0));
    for mut col in m.columns_mut() {
        let s = col.sum();
        col /= s;
    }
    m
}
