//! Ideal masks (IBM, IRM, WFM) and mask application.
//!
//! All matrices here are `C × FT`: one row per source, one column per T-F bin
//! in the flattened order of [`crate::dsp::MagnitudeSpectrogram::flatten`].

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// A `C × FT` matrix of masks with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet(Array2<f64>);

impl MaskSet {
    pub fn new(masks: Array2<f64>) -> Result<Self> {
        if masks.nrows() == 0 {
            return Err(Error::invalid("mask set needs at least one source"));
        }
        if let Some(v) = masks.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask entry {v} outside [0, 1]")));
        }
        Ok(Self(masks))
    }

    /// Wraps a matrix the caller guarantees to be in range.
    pub(crate) fn from_raw(masks: Array2<f64>) -> Self {
        debug_assert!(masks.iter().all(|v| (0.0..=1.0).contains(v)));
        Self(masks)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n_sources(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_cells(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(self.0.select(Axis(0), perm))
    }
}

/// Per-bin source membership (hard or soft), `C × FT`, entries in `[0, 1]`.
pub type SpeakerAssignment = MaskSet;

fn check_sources(mags: ArrayView2<'_, f64>) -> Result<()> {
    if mags.nrows() == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    Ok(())
}

/// Ideal binary mask. Ties go to the lowest source index.
pub fn ibm(source_mags: ArrayView2<'_, f64>) -> Result<MaskSet> {
    check_sources(source_mags)?;
    let mut out = Array2::zeros(source_mags.raw_dim());
    for (ft, col) in source_mags.axis_iter(Axis(1)).enumerate() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        out[[best, ft]] = 1.0;
    }
    Ok(MaskSet(out))
}

fn ratio_mask(source_mags: ArrayView2<'_, f64>, power: i32) -> Result<MaskSet> {
    check_sources(source_mags)?;
    let c = source_mags.nrows();
    let mut out = Array2::zeros(source_mags.raw_dim());
    for (ft, col) in source_mags.axis_iter(Axis(1)).enumerate() {
        let total: f64 = col.iter().map(|m| m.abs().powi(power)).sum();
        for i in 0..c {
            out[[i, ft]] = if total > 0.0 {
                col[i].abs().powi(power) / total
            } else {
                1.0 / c as f64
            };
        }
    }
    Ok(MaskSet(out))
}

/// Ideal ratio mask; zero-energy bins get `1/C`.
pub fn irm(source_mags: ArrayView2<'_, f64>) -> Result<MaskSet> {
    ratio_mask(source_mags, 1)
}

/// Wiener-filter-like mask (power ratio); zero-energy bins get `1/C`.
pub fn wfm(source_mags: ArrayView2<'_, f64>) -> Result<MaskSet> {
    ratio_mask(source_mags, 2)
}

/// Estimated magnitudes `x ⊙ m_i` for every source.
pub fn apply(masks: &MaskSet, mix_mag: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    if mix_mag.len() != masks.n_cells() {
        return Err(Error::shape(format!(
            "mixture has {} bins, masks have {}",
            mix_mag.len(),
            masks.n_cells()
        )));
    }
    Ok(&masks.0 * &mix_mag.insert_axis(Axis(0)))
}
