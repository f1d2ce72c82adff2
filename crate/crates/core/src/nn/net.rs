//! Context-window embedding network.
//!
//! Each frame `t` sees frames `t-c ..= t+c` (edges replicated), passes them
//! through tanh hidden layers and emits `K` values for each of the `F` bins of
//! frame `t`.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamStore, ParamVars};
use crate::nn::tape::{Tape, Var};

/// Half-width of the uniform weight initialisation.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedNetConfig {
    /// Frames of context on each side.
    pub context: usize,
    pub hidden_sizes: Vec<usize>,
    /// Embedding dimension `K`.
    pub embedding_dim: usize,
    /// Frequency bins per frame `F`.
    pub n_bins: usize,
}

impl Default for EmbedNetConfig {
    fn default() -> Self {
        Self {
            context: 2,
            hidden_sizes: vec![128, 128],
            embedding_dim: 20,
            n_bins: 129,
        }
    }
}

impl EmbedNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if self.n_bins == 0 {
            return Err(Error::invalid("n_bins must be at least 1"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden layers must be non-empty"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        (2 * self.context + 1) * self.n_bins
    }

    /// `(name, rows, cols)` of every network array, in store order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut width = self.input_width();
        for (i, &h) in self.hidden_sizes.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), width, h));
            out.push((format!("hidden{i}.bias"), 1, h));
            width = h;
        }
        let out_width = self.n_bins * self.embedding_dim;
        out.push(("out.weight".to_string(), width, out_width));
        out.push(("out.bias".to_string(), 1, out_width));
        out
    }

    /// Fresh parameters, uniform(−0.05, 0.05) from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new(seed);
        for (name, r, c) in self.layer_shapes() {
            store.insert_uniform(&name, (r, c), -INIT_SCALE, INIT_SCALE);
        }
        store
    }
}

/// Embeddings `V` (K × FT), stored transposed: one row of length `K` per T-F
/// bin, bins in flattened (frequency-fastest) order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    bins: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn from_bins(bins: Array2<f64>) -> Result<Self> {
        if bins.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("embeddings must be finite"));
        }
        Ok(Self { bins })
    }

    /// `FT × K` view (the transpose of `V`).
    pub fn bins(&self) -> &Array2<f64> {
        &self.bins
    }

    /// `K × FT` view.
    pub fn v(&self) -> ArrayView2<'_, f64> {
        self.bins.t()
    }

    pub fn embedding(&self, ft: usize) -> ArrayView1<'_, f64> {
        self.bins.row(ft)
    }

    pub fn dim(&self) -> usize {
        self.bins.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.bins.nrows()
    }
}

/// Zero-mean, unit-variance scaling over the whole utterance.
pub fn standardize(features: &Array2<f64>) -> Array2<f64> {
    let n = features.len() as f64;
    let mean = features.sum() / n;
    let var = features.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    features.mapv(|x| (x - mean) / std)
}

/// Stacks each frame with its neighbours: row `t` holds frames
/// `t-c ..= t+c` (clamped at the edges) back to back.
pub fn context_windows(features: ArrayView2<'_, f64>, context: usize) -> Array2<f64> {
    let (n_frames, n_bins) = features.dim();
    let width = 2 * context + 1;
    let mut out = Array2::zeros((n_frames, width * n_bins));
    for t in 0..n_frames {
        for j in 0..width {
            let src = (t + j).saturating_sub(context).min(n_frames - 1);
            out.slice_mut(s![t, j * n_bins..(j + 1) * n_bins])
                .assign(&features.row(src));
        }
    }
    out
}

/// Records the network on `tape` and returns the `FT × K` embedding node.
///
/// `features` is `T × F` (frames by bins), already standardised.
pub fn forward_embeddings(
    tape: &mut Tape,
    params: &ParamVars,
    features: ArrayView2<'_, f64>,
    cfg: &EmbedNetConfig,
) -> Result<Var> {
    let (n_frames, n_bins) = features.dim();
    if n_frames == 0 {
        return Err(Error::invalid("need at least one frame"));
    }
    if n_bins != cfg.n_bins {
        return Err(Error::shape(format!(
            "features have {n_bins} bins, network expects {}",
            cfg.n_bins
        )));
    }
    let x = tape.constant(context_windows(features, cfg.context));
    let mut h = x;
    for i in 0..cfg.hidden_sizes.len() {
        let w = params.get(&format!("hidden{i}.weight"));
        let b = params.get(&format!("hidden{i}.bias"));
        let z = tape.matmul(h, w);
        let z = tape.add_row(z, b);
        h = tape.tanh(z);
    }
    let z = tape.matmul(h, params.get("out.weight"));
    let out = tape.add_row(z, params.get("out.bias"));
    // Row t is [bin 0: K values, bin 1: K values, ...], so a row-major
    // reshape lands bin (t, f) at row t·F + f.
    Ok(tape.reshape(out, n_frames * n_bins, cfg.embedding_dim))
}

/// Inference-only forward pass.
pub fn embed(
    params: &ParamStore,
    features: ArrayView2<'_, f64>,
    cfg: &EmbedNetConfig,
) -> Result<EmbeddingMatrix> {
    let mut tape = Tape::new();
    let vars = params.record_frozen(&mut tape);
    let v = forward_embeddings(&mut tape, &vars, features, cfg)?;
    EmbeddingMatrix::from_bins(tape.value(v).clone())
}
