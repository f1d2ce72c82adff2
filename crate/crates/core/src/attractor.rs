//! Thresholding, attractor formation, similarity scores, mask estimation and
//! the L2 mask-reconstruction objective.
//!
//! Every operation exists twice: a plain numeric version used at inference
//! time and by oracles, and a taped version used to train.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{self, MaskSet};
use crate::model::{Example, Model};
use crate::nn::tape::{sigmoid, softmax_columns};
use crate::nn::{adam_step, forward_embeddings, AdamState, EmbeddingMatrix, ParamGrads, Tape, Var};

/// Default fraction of T-F bins kept for attractor estimation.
pub const KEEP_FRACTION: f64 = 0.9;

/// Binary 1×FT filter over T-F bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    w: Array1<f64>,
    keep_fraction: f64,
}

impl ThresholdVector {
    /// All bins kept.
    pub fn all(n_cells: usize) -> Self {
        Self {
            w: Array1::ones(n_cells),
            keep_fraction: 1.0,
        }
    }

    pub fn from_mask(w: Array1<f64>) -> Result<Self> {
        if w.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("threshold entries must be 0 or 1"));
        }
        let kept = w.sum() / w.len().max(1) as f64;
        Ok(Self {
            w,
            keep_fraction: kept,
        })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.w
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep_fraction
    }

    pub fn is_kept(&self, ft: usize) -> bool {
        self.w[ft] != 0.0
    }

    pub fn n_kept(&self) -> usize {
        self.w.iter().filter(|v| **v != 0.0).count()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Keeps the loudest `q` fraction of bins.
///
/// `ρ` is the value at index `floor((1−q)·FT)` of the ascending sort and a bin
/// is kept iff its magnitude is `≥ ρ`.
pub fn threshold_vector(mix_mag: ArrayView1<'_, f64>, q: f64) -> Result<ThresholdVector> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("keep fraction {q} outside (0, 1]")));
    }
    let n = mix_mag.len();
    if n == 0 {
        return Ok(ThresholdVector {
            w: Array1::zeros(0),
            keep_fraction: q,
        });
    }
    let mut sorted = mix_mag.to_vec();
    sorted.sort_by(f64::total_cmp);
    // The epsilon absorbs representation error in 1−q (1−0.9 < 0.1 in f64).
    let idx = (((1.0 - q) * n as f64) + 1e-9).floor() as usize;
    let rho = sorted[idx.min(n - 1)];
    let w = mix_mag.mapv(|m| if m >= rho { 1.0 } else { 0.0 });
    Ok(ThresholdVector { w, keep_fraction: q })
}

/// Attractors `A` (C × K), one row per source.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSet(pub Array2<f64>);

impl AttractorSet {
    pub fn new(a: Array2<f64>) -> Result<Self> {
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("attractors must be finite"));
        }
        Ok(Self(a))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n_sources(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(self.0.select(Axis(0), perm))
    }
}

fn weighted_assignment(y: ArrayView2<'_, f64>, w: &ThresholdVector) -> Result<Array2<f64>> {
    if y.ncols() != w.len() {
        return Err(Error::shape(format!(
            "assignment has {} bins, threshold has {}",
            y.ncols(),
            w.len()
        )));
    }
    Ok(&y * &w.values().view().insert_axis(Axis(0)))
}

/// `a_i = (y_i ⊙ w) Vᵀ / Σ (y_i ⊙ w)`.
pub fn form_attractors(
    v: &EmbeddingMatrix,
    y: ArrayView2<'_, f64>,
    w: &ThresholdVector,
) -> Result<AttractorSet> {
    if y.ncols() != v.n_cells() {
        return Err(Error::shape(format!(
            "assignment has {} bins, embeddings have {}",
            y.ncols(),
            v.n_cells()
        )));
    }
    let yw = weighted_assignment(y, w)?;
    let mass = yw.sum_axis(Axis(1));
    if let Some(i) = mass.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::EmptySource { source_index: i });
    }
    let num = yw.dot(v.bins());
    Ok(AttractorSet(num / &mass.insert_axis(Axis(1))))
}

/// `d_i = a_i V`, a `C × FT` matrix of dot products.
pub fn similarity_scores(a: &AttractorSet, v: &EmbeddingMatrix) -> Result<Array2<f64>> {
    if a.dim() != v.dim() {
        return Err(Error::shape(format!(
            "attractors have dimension {}, embeddings {}",
            a.dim(),
            v.dim()
        )));
    }
    Ok(a.values().dot(&v.v()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Softmax,
    Sigmoid,
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::invalid(format!("unknown nonlinearity {other:?}"))),
        }
    }
}

/// Softmax across sources per bin, or elementwise logistic sigmoid.
pub fn estimate_masks(d: &Array2<f64>, nl: Nonlinearity) -> Result<MaskSet> {
    if d.nrows() == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    let m = match nl {
        Nonlinearity::Softmax => softmax_columns(d),
        Nonlinearity::Sigmoid => d.mapv(sigmoid),
    };
    Ok(MaskSet::from_raw(m))
}

/// `(1/C) Σ_i ‖x ⊙ (m_i − m̂_i)‖²`.
pub fn reconstruction_loss(x: ArrayView1<'_, f64>, target: &MaskSet, est: &MaskSet) -> Result<f64> {
    if target.values().dim() != est.values().dim() || x.len() != target.n_cells() {
        return Err(Error::shape(format!(
            "x {} / target {:?} / estimate {:?}",
            x.len(),
            target.values().dim(),
            est.values().dim()
        )));
    }
    let c = target.n_sources() as f64;
    let diff = (target.values() - est.values()) * &x.insert_axis(Axis(0));
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / c)
}

// ---- taped versions -------------------------------------------------------

/// Records attractor formation from a constant assignment `y ⊙ w`.
pub(crate) fn record_attractors_fixed(
    tape: &mut Tape,
    vt: Var,
    y: ArrayView2<'_, f64>,
    w: &ThresholdVector,
) -> Result<Var> {
    let yw = weighted_assignment(y, w)?;
    let mass = yw.sum_axis(Axis(1));
    if let Some(i) = mass.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::EmptySource { source_index: i });
    }
    let normalized = yw / &mass.insert_axis(Axis(1));
    let yn = tape.constant(normalized);
    Ok(tape.matmul(yn, vt))
}

/// Records attractor formation from an assignment node that carries gradient.
pub(crate) fn record_attractors(tape: &mut Tape, vt: Var, y: Var, w: &ThresholdVector) -> Var {
    let w_row = tape.constant(w.values().clone().insert_axis(Axis(0)));
    let yw = tape.mul_row(y, w_row);
    let mass = tape.row_sums(yw);
    let num = tape.matmul(yw, vt);
    tape.div_rows(num, mass)
}

pub(crate) fn record_masks(tape: &mut Tape, attractors: Var, vt: Var, nl: Nonlinearity) -> Var {
    let d = tape.matmul_nt(attractors, vt);
    match nl {
        Nonlinearity::Softmax => tape.softmax_cols(d),
        Nonlinearity::Sigmoid => tape.sigmoid(d),
    }
}

pub(crate) fn record_loss(tape: &mut Tape, x: ArrayView1<'_, f64>, target: &MaskSet, est: Var) -> Var {
    let c = target.n_sources() as f64;
    let t = tape.constant(target.values().clone());
    let x_row = tape.constant(x.to_owned().insert_axis(Axis(0)));
    let diff = tape.sub(t, est);
    let weighted = tape.mul_row(diff, x_row);
    let sq = tape.sum_squares(weighted);
    tape.scale(sq, 1.0 / c)
}

/// Records the full DANet objective for one example, with attractors formed
/// from the IBM of the reference sources and a WFM target.
pub fn record_danet_loss(tape: &mut Tape, model: &Model, vars: &crate::nn::ParamVars, ex: &Example) -> Result<Var> {
    let cfg = model.config();
    let vt = forward_embeddings(tape, vars, ex.features.view(), &cfg.net)?;
    let y = masks::ibm(ex.source_mags.view())?;
    let target = masks::wfm(ex.source_mags.view())?;
    let w = threshold_vector(ex.mix_mag.view(), cfg.keep_fraction)?;
    let a = record_attractors_fixed(tape, vt, y.values().view(), &w)?;
    let m = record_masks(tape, a, vt, cfg.nonlinearity);
    Ok(record_loss(tape, ex.mix_mag.view(), &target, m))
}

/// Loss and parameter gradients of the DANet objective averaged over `batch`.
pub fn danet_gradients(model: &Model, batch: &[Example]) -> Result<(f64, ParamGrads)> {
    let mut total = 0.0;
    let mut grads = model.params().zeros_like();
    for ex in batch {
        let mut tape = Tape::new();
        let vars = model.params().record(&mut tape);
        let loss = record_danet_loss(&mut tape, model, &vars, ex)?;
        total += tape.scalar(loss);
        let mut g = tape.backward(loss)?;
        for (acc, gi) in grads.iter_mut().zip(vars.collect(&tape, &mut g)) {
            *acc += &gi;
        }
    }
    let n = batch.len().max(1) as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grads))
}

/// One optimiser step on the DANet objective. Returns the mean batch loss.
pub fn danet_train_step(model: &mut Model, adam: &mut AdamState, batch: &[Example]) -> Result<f64> {
    let (loss, grads) = danet_gradients(model, batch)?;
    if loss.is_finite() {
        adam_step(model.params_mut(), &grads, adam)?;
    }
    Ok(loss)
}

/// Plain DANet loss for one example (no tape), used for validation.
pub fn danet_loss(model: &Model, ex: &Example) -> Result<f64> {
    let cfg = model.config();
    let v = crate::nn::embed(model.params(), ex.features.view(), &cfg.net)?;
    let y = masks::ibm(ex.source_mags.view())?;
    let target = masks::wfm(ex.source_mags.view())?;
    let w = threshold_vector(ex.mix_mag.view(), cfg.keep_fraction)?;
    let a = form_attractors(&v, y.values().view(), &w)?;
    let m = estimate_masks(&similarity_scores(&a, &v)?, cfg.nonlinearity)?;
    reconstruction_loss(ex.mix_mag.view(), &target, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_embeddings(ft: usize, k: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
        EmbeddingMatrix::from_bins(Array2::from_shape_fn((ft, k), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    /// Explicit-loop weighted mean, written independently of the matrix path.
    fn oracle_attractors(v: &EmbeddingMatrix, y: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
        let (c, ft) = y.dim();
        let k = v.dim();
        let mut out = Array2::zeros((c, k));
        for i in 0..c {
            let mut mass = 0.0;
            for b in 0..ft {
                let weight = y[[i, b]] * w[b];
                mass += weight;
                for d in 0..k {
                    out[[i, d]] += weight * v.bins()[[b, d]];
                }
            }
            for d in 0..k {
                out[[i, d]] /= mass;
            }
        }
        out
    }

    #[test]
    fn threshold_drops_smallest_bin() {
        let mags: Array1<f64> = (1..=10).map(f64::from).collect();
        let w = threshold_vector(mags.view(), 0.9).unwrap();
        assert_eq!(w.n_kept(), 9);
        assert!(!w.is_kept(0));
        // Oracle: sorted list, index floor(0.1·10) = 1 → ρ = 2.
        let mut sorted = mags.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rho = sorted[1];
        assert!(mags.iter().zip(w.values()).all(|(m, k)| (*m >= rho) == (*k == 1.0)));
    }

    #[test]
    fn threshold_edge_cases() {
        let mags = array![3.0, 1.0, 2.0];
        assert_eq!(threshold_vector(mags.view(), 1.0).unwrap().n_kept(), 3);
        let flat = Array1::from_elem(20, 0.7);
        assert_eq!(threshold_vector(flat.view(), 0.9).unwrap().n_kept(), 20);
        assert!(threshold_vector(mags.view(), 0.0).is_err());
        assert!(threshold_vector(mags.view(), 1.5).is_err());
    }

    #[test]
    fn attractor_of_constant_field() {
        let v = EmbeddingMatrix::from_bins(Array2::from_shape_fn((6, 3), |(_, k)| k as f64 + 0.5)).unwrap();
        let y = Array2::ones((1, 6));
        let a = form_attractors(&v, y.view(), &ThresholdVector::all(6)).unwrap();
        assert_eq!(a.values().row(0).to_vec(), vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn binary_assignment_gives_plain_mean() {
        let v = EmbeddingMatrix::from_bins(array![[1.0, 0.0], [3.0, 2.0], [10.0, 10.0], [0.0, 4.0]]).unwrap();
        let y = array![[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
        let a = form_attractors(&v, y.view(), &ThresholdVector::all(4)).unwrap();
        assert_eq!(a.values(), &array![[2.0, 1.0], [5.0, 7.0]]);
    }

    #[test]
    fn empty_source_is_an_error() {
        let v = EmbeddingMatrix::from_bins(Array2::ones((3, 2))).unwrap();
        let y = array![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let w = ThresholdVector::from_mask(array![1.0, 1.0, 0.0]).unwrap();
        let err = form_attractors(&v, y.view(), &w).unwrap_err();
        assert!(err.to_string().contains("empty source under threshold"));
    }

    #[test]
    fn random_attractors_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let ft = rng.random_range(5..80);
            let k = rng.random_range(1..8);
            let c = rng.random_range(1..4);
            let v = random_embeddings(ft, k, &mut rng);
            let y = Array2::from_shape_fn((c, ft), |_| rng.random_range(0.05..1.0));
            let w = Array1::from_shape_fn(ft, |i| if i == 0 || rng.random_bool(0.8) { 1.0 } else { 0.0 });
            let a = form_attractors(&v, y.view(), &ThresholdVector::from_mask(w.clone()).unwrap()).unwrap();
            let o = oracle_attractors(&v, &y, &w);
            for (p, q) in a.values().iter().zip(o.iter()) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_embeddings(30, 4, &mut rng);
        let basis = AttractorSet::new(array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
        let d = similarity_scores(&basis, &v).unwrap();
        assert_eq!(d.row(0), v.v().row(2));
        assert!(d.row(1).iter().all(|x| *x == 0.0));
        let a = AttractorSet::new(Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0))).unwrap();
        let d = similarity_scores(&a, &v).unwrap();
        for i in 0..3 {
            for b in 0..30 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.values()[[i, k]] * v.bins()[[b, k]];
                }
                assert!((d[[i, b]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_nonlinearities() {
        let eq = Array2::from_elem((3, 4), 1.3);
        let m = estimate_masks(&eq, Nonlinearity::Softmax).unwrap();
        assert!(m.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let d = array![[2.0_f64.ln()], [0.0]];
        let m = estimate_masks(&d, Nonlinearity::Softmax).unwrap();
        assert!((m.values()[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.values()[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
        let m = estimate_masks(&array![[0.0]], Nonlinearity::Sigmoid).unwrap();
        assert_eq!(m.values()[[0, 0]], 0.5);
    }

    #[test]
    fn loss_examples() {
        let x = Array1::ones(4);
        let t = MaskSet::new(Array2::from_elem((2, 4), 0.75)).unwrap();
        let e = MaskSet::new(Array2::from_elem((2, 4), 0.25)).unwrap();
        assert_eq!(reconstruction_loss(x.view(), &t, &t).unwrap(), 0.0);
        assert!((reconstruction_loss(x.view(), &t, &e).unwrap() - 1.0).abs() < 1e-15);
        let short = Array1::ones(3);
        assert!(reconstruction_loss(short.view(), &t, &e).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array1::from_shape_fn(7, |_| rng.random_range(0.0..3.0));
        let t = MaskSet::new(Array2::from_shape_fn((3, 7), |_| rng.random_range(0.0..1.0))).unwrap();
        let e0 = Array2::from_shape_fn((3, 7), |_| rng.random_range(0.0..1.0));
        let mut tape = Tape::new();
        let ev = tape.param(e0.clone());
        let l = record_loss(&mut tape, x.view(), &t, ev);
        let mut g = tape.backward(l).unwrap();
        let grad = g.take_or_zeros(ev, (3, 7));
        let h = 1e-6;
        for idx in 0..e0.len() {
            let mut p = e0.clone();
            let mut m = e0.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let lp = reconstruction_loss(x.view(), &t, &MaskSet::from_raw(p)).unwrap();
            let lm = reconstruction_loss(x.view(), &t, &MaskSet::from_raw(m)).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - grad.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn taped_pipeline_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random_embeddings(40, 5, &mut rng);
        let y = Array2::from_shape_fn((2, 40), |_| rng.random_range(0.0..1.0));
        let w = threshold_vector(Array1::from_shape_fn(40, |_| rng.random_range(0.0..1.0)).view(), 0.9).unwrap();
        let x = Array1::from_shape_fn(40, |_| rng.random_range(0.0..2.0));
        let target = MaskSet::new(Array2::from_shape_fn((2, 40), |_| rng.random_range(0.0..1.0))).unwrap();
        for nl in [Nonlinearity::Softmax, Nonlinearity::Sigmoid] {
            let a = form_attractors(&v, y.view(), &w).unwrap();
            let m = estimate_masks(&similarity_scores(&a, &v).unwrap(), nl).unwrap();
            let expected = reconstruction_loss(x.view(), &target, &m).unwrap();
            for soft in [false, true] {
                let mut tape = Tape::new();
                let vt = tape.param(v.bins().clone());
                let at = if soft {
                    let yv = tape.constant(y.clone());
                    record_attractors(&mut tape, vt, yv, &w)
                } else {
                    record_attractors_fixed(&mut tape, vt, y.view(), &w).unwrap()
                };
                let mt = record_masks(&mut tape, at, vt, nl);
                let l = record_loss(&mut tape, x.view(), &target, mt);
                assert!((tape.scalar(l) - expected).abs() < 1e-10 * expected.max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_masks_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let d = Array2::from_shape_vec((3, 4), vals).unwrap();
            let m = estimate_masks(&d, Nonlinearity::Softmax).unwrap();
            for s in m.values().sum_axis(Axis(0)) {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn attractors_invariant_to_bin_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ft = 25;
            let v = random_embeddings(ft, 3, &mut rng);
            let y = Array2::from_shape_fn((2, ft), |_| rng.random_range(0.1..1.0));
            let mut order: Vec<usize> = (0..ft).collect();
            for i in (1..ft).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let a = form_attractors(&v, y.view(), &ThresholdVector::all(ft)).unwrap();
            let vp = EmbeddingMatrix::from_bins(v.bins().select(Axis(0), &order)).unwrap();
            let yp = y.select(Axis(1), &order);
            let b = form_attractors(&vp, yp.view(), &ThresholdVector::all(ft)).unwrap();
            for (p, q) in a.values().iter().zip(b.values()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn one_hot_attractor_in_convex_hull(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ft = 20;
            let v = random_embeddings(ft, 4, &mut rng);
            let members: Vec<usize> = (0..ft).filter(|_| rng.random_bool(0.5)).collect();
            prop_assume!(!members.is_empty());
            let mut y = Array2::zeros((1, ft));
            for &m in &members {
                y[[0, m]] = 1.0;
            }
            let a = form_attractors(&v, y.view(), &ThresholdVector::all(ft)).unwrap();
            // Each coordinate lies between the members' min and max.
            for k in 0..4 {
                let vals: Vec<f64> = members.iter().map(|&m| v.bins()[[m, k]]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a.values()[[0, k]] >= lo - 1e-12 && a.values()[[0, k]] <= hi + 1e-12);
            }
        }
    }
}
