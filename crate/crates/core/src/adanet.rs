//! Anchored attractors: subset enumeration, anchor-based assignments,
//! minimum in-set similarity selection, permutation-invariant loss and the
//! energy-based active-source detector.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::attractor::{
    self, estimate_masks, form_attractors, record_attractors, record_loss, record_masks,
    similarity_scores, threshold_vector, AttractorSet, ThresholdVector,
};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::masks::{self, MaskSet, SpeakerAssignment};
use crate::model::{Example, Model};
use crate::nn::params::ANCHORS;
use crate::nn::tape::softmax_columns;
use crate::nn::{adam_step, forward_embeddings, AdamState, EmbeddingMatrix, ParamGrads, ParamVars, Tape, Var};
use crate::perm::{combinations, permutations};

/// Outputs more than this many dB below the loudest are considered silent.
pub const SILENCE_DB: f64 = 20.0;

/// Lexicographic list of all `c`-subsets of `n` anchors.
pub fn enumerate_subsets(n: usize, c: usize) -> Result<Vec<Vec<usize>>> {
    if c == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    if c > n {
        return Err(Error::TooManySources {
            sources: c,
            anchors: n,
        });
    }
    Ok(combinations(n, c))
}

/// `Ŷ = Softmax(L V)` with the softmax taken across the `C` anchors per bin.
pub fn assignments_from_anchors(anchors: ArrayView2<'_, f64>, v: &EmbeddingMatrix) -> Result<SpeakerAssignment> {
    if anchors.ncols() != v.dim() {
        return Err(Error::shape(format!(
            "anchors have dimension {}, embeddings {}",
            anchors.ncols(),
            v.dim()
        )));
    }
    if anchors.nrows() == 0 {
        return Err(Error::invalid("need at least one anchor"));
    }
    Ok(MaskSet::from_raw(softmax_columns(&anchors.dot(&v.v()))))
}

/// Largest off-diagonal entry of `A Aᵀ`; zero for a single attractor.
pub fn in_set_similarity(a: &AttractorSet) -> f64 {
    let s = a.values().dot(&a.values().t());
    let c = s.nrows();
    let mut best = f64::NEG_INFINITY;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                best = best.max(s[[i, j]]);
            }
        }
    }
    if c < 2 {
        0.0
    } else {
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSelection {
    /// Position of the chosen subset in [`enumerate_subsets`] order.
    pub index: usize,
    pub subset: Vec<usize>,
    pub attractors: AttractorSet,
    /// `s_p` per subset; `None` where the subset had an empty source.
    pub similarities: Vec<Option<f64>>,
}

/// Forms attractors for every `c`-subset of anchors and keeps the set whose
/// largest pairwise similarity is smallest (ties to the lowest index).
pub fn select_attractor_set(
    anchors: ArrayView2<'_, f64>,
    v: &EmbeddingMatrix,
    w: &ThresholdVector,
    c: usize,
) -> Result<SubsetSelection> {
    let subsets = enumerate_subsets(anchors.nrows(), c)?;
    let mut similarities = Vec::with_capacity(subsets.len());
    let mut best: Option<(usize, f64, AttractorSet)> = None;
    for (p, subset) in subsets.iter().enumerate() {
        let lp = anchors.select(Axis(0), subset);
        let y = assignments_from_anchors(lp.view(), v)?;
        let a = match form_attractors(v, y.values().view(), w) {
            Ok(a) => a,
            Err(Error::EmptySource { .. }) => {
                similarities.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = in_set_similarity(&a);
        similarities.push(Some(s));
        if best.as_ref().is_none_or(|(_, bs, _)| s < *bs) {
            best = Some((p, s, a));
        }
    }
    let (index, _, attractors) = best.ok_or(Error::AllSubsetsEmpty)?;
    Ok(SubsetSelection {
        index,
        subset: subsets[index].clone(),
        attractors,
        similarities,
    })
}

/// Minimum loss over all target orderings. Estimate `i` is scored against
/// target `perm[i]`; ties go to the lexicographically first permutation.
pub fn pit_loss(x: ArrayView1<'_, f64>, targets: &MaskSet, estimates: &MaskSet) -> Result<(f64, Vec<usize>)> {
    if targets.n_sources() != estimates.n_sources() {
        return Err(Error::shape(format!(
            "{} targets for {} estimates",
            targets.n_sources(),
            estimates.n_sources()
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(targets.n_sources()) {
        let l = attractor::reconstruction_loss(x, &targets.permuted(&perm), estimates)?;
        if best.as_ref().is_none_or(|(bl, _)| l < *bl) {
            best = Some((l, perm));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Indices of outputs within [`SILENCE_DB`] of the loudest one.
pub fn detect_active_sources(estimates: &[Waveform]) -> Vec<usize> {
    let powers: Vec<f64> = estimates.iter().map(Waveform::power).collect();
    active_from_powers(&powers)
}

pub fn active_from_powers(powers: &[f64]) -> Vec<usize> {
    let max = powers.iter().copied().fold(0.0, f64::max);
    let loudest = powers
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let active: Vec<usize> = powers
        .iter()
        .enumerate()
        .filter(|(_, &p)| !(10.0 * (max / p).log10() > SILENCE_DB))
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        loudest.into_iter().collect()
    } else {
        active
    }
}

/// Targets padded with all-zero rows up to `slots`.
pub fn padded_targets(source_mags: ArrayView2<'_, f64>, slots: usize) -> Result<MaskSet> {
    let c = source_mags.nrows();
    if c > slots {
        return Err(Error::invalid(format!("{c} sources exceed {slots} output slots")));
    }
    let wfm = masks::wfm(source_mags)?;
    let mut out = Array2::zeros((slots, source_mags.ncols()));
    out.slice_mut(ndarray::s![..c, ..]).assign(wfm.values());
    MaskSet::new(out)
}

/// Records the ADANet objective for one example: anchored attractor
/// selection over `C_max` slots, then PIT against padded WFM targets.
pub fn record_adanet_loss(tape: &mut Tape, model: &Model, vars: &ParamVars, ex: &Example) -> Result<Var> {
    let cfg = model.config();
    let slots = cfg.slots;
    let vt = forward_embeddings(tape, vars, ex.features.view(), &cfg.net)?;
    let anchors_var = vars.get(ANCHORS);
    let w = threshold_vector(ex.mix_mag.view(), cfg.keep_fraction)?;
    let v = EmbeddingMatrix::from_bins(tape.value(vt).clone())?;
    let selection = select_attractor_set(tape.value(anchors_var).view(), &v, &w, slots)?;

    let lp = tape.select_rows(anchors_var, &selection.subset);
    let d = tape.matmul_nt(lp, vt);
    let y = tape.softmax_cols(d);
    let a = record_attractors(tape, vt, y, &w);
    let m = record_masks(tape, a, vt, cfg.nonlinearity);

    let targets = padded_targets(ex.source_mags.view(), slots)?;
    let est = MaskSet::from_raw(tape.value(m).clone());
    let (_, perm) = pit_loss(ex.mix_mag.view(), &targets, &est)?;
    Ok(record_loss(tape, ex.mix_mag.view(), &targets.permuted(&perm), m))
}

pub fn adanet_gradients(model: &Model, batch: &[Example]) -> Result<(f64, ParamGrads)> {
    let mut total = 0.0;
    let mut grads = model.params().zeros_like();
    for ex in batch {
        let mut tape = Tape::new();
        let vars = model.params().record(&mut tape);
        let loss = record_adanet_loss(&mut tape, model, &vars, ex)?;
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

pub fn adanet_train_step(model: &mut Model, adam: &mut AdamState, batch: &[Example]) -> Result<f64> {
    let (loss, grads) = adanet_gradients(model, batch)?;
    if loss.is_finite() {
        adam_step(model.params_mut(), &grads, adam)?;
    }
    Ok(loss)
}

/// ADANet objective without a tape, used for validation.
pub fn adanet_loss(model: &Model, ex: &Example) -> Result<f64> {
    let cfg = model.config();
    let anchors = model
        .anchors()
        .ok_or_else(|| Error::invalid("model has no anchors"))?;
    let v = crate::nn::embed(model.params(), ex.features.view(), &cfg.net)?;
    let w = threshold_vector(ex.mix_mag.view(), cfg.keep_fraction)?;
    let sel = select_attractor_set(anchors.view(), &v, &w, cfg.slots)?;
    let est = estimate_masks(&similarity_scores(&sel.attractors, &v)?, cfg.nonlinearity)?;
    let targets = padded_targets(ex.source_mags.view(), cfg.slots)?;
    Ok(pit_loss(ex.mix_mag.view(), &targets, &est)?.0)
}
