//! Curriculum training with validation-driven scheduling.
//!
//! Training runs on short chunks until validation stalls, then restarts from
//! the best weights on long chunks with a smaller learning rate. Every random
//! choice is derived from the seed and the epoch number, so a run resumed from
//! an epoch-boundary checkpoint is bitwise identical to an uninterrupted one.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adanet::{adanet_loss, adanet_train_step, select_attractor_set};
use crate::attractor::{danet_loss, danet_train_step, form_attractors, threshold_vector, AttractorSet};
use crate::error::{Error, Result};
use crate::inference::fixed_attractors;
use crate::io::Checkpoint;
use crate::masks;
use crate::model::{Example, Model, ModelConfig, ModelKind};
use crate::nn::{embed, lr_schedule, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    /// Initial learning rate of the long-chunk phase.
    pub long_lr: f64,
    pub short_chunk: usize,
    pub long_chunk: usize,
    pub batch_size: usize,
    pub max_short_epochs: usize,
    pub max_long_epochs: usize,
    /// Epochs without improvement before switching to long chunks.
    pub switch_patience: usize,
    /// Epochs without improvement before stopping.
    pub stop_patience: usize,
    pub curriculum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-3,
            long_lr: 1e-4,
            short_chunk: 100,
            long_chunk: 400,
            // Sized so a 500-mixture run fits in 15 minutes on one core.
            batch_size: 16,
            max_short_epochs: 8,
            max_long_epochs: 2,
            switch_patience: 5,
            stop_patience: 10,
            curriculum: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.short_chunk == 0 || self.long_chunk == 0 {
            return Err(Error::invalid("batch size and chunk lengths must be positive"));
        }
        if !(self.lr > 0.0 && self.long_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Short,
    Long,
    Done,
}

/// Scheduler bookkeeping saved alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub phase: Phase,
    /// Completed epochs overall.
    pub epoch: usize,
    /// Completed epochs in the current phase.
    pub phase_epoch: usize,
    pub since_best: usize,
    /// Counter consumed by the learning-rate schedule.
    pub since_lr: usize,
    pub best_val: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub chunk_len: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub improved: bool,
    pub skipped_batches: usize,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,phase,chunk_len,lr,train_loss,valid_loss,improved,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{},{},{},{}",
            self.epoch,
            match self.phase {
                Phase::Short => "short",
                Phase::Long => "long",
                Phase::Done => "done",
            },
            self.chunk_len,
            self.lr,
            self.train_loss,
            self.valid_loss,
            self.improved as u8,
            self.skipped_batches
        )
    }
}

fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::EmptySource { .. } | Error::AllSubsetsEmpty)
}

pub fn example_loss(model: &Model, ex: &Example) -> Result<f64> {
    match model.config().kind {
        ModelKind::Danet => danet_loss(model, ex),
        ModelKind::Adanet => adanet_loss(model, ex),
    }
}

/// Mean loss over examples; examples with an empty source are skipped.
pub fn validation_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in examples {
        match example_loss(model, ex) {
            Ok(l) => {
                total += l;
                n += 1;
            }
            Err(e) if is_degenerate(&e) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::invalid("no usable validation examples"));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    best: Model,
    adam: AdamState,
    state: TrainerState,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let adam = AdamState::new(model.params(), cfg.lr);
        let phase = if cfg.curriculum { Phase::Short } else { Phase::Long };
        Ok(Self {
            best: model.clone(),
            model,
            adam,
            cfg,
            state: TrainerState {
                phase,
                epoch: 0,
                phase_epoch: 0,
                since_best: 0,
                since_lr: 0,
                best_val: None,
            },
        })
    }

    /// Rebuilds a trainer from the `last` and `best` checkpoints it wrote.
    pub fn resume(last: Checkpoint, best: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state: TrainerState = serde_json::from_value(
            last.trainer
                .ok_or_else(|| Error::invalid("checkpoint has no trainer state"))?,
        )
        .map_err(|e| Error::invalid(format!("bad trainer state: {e}")))?;
        Ok(Self {
            cfg,
            model: last.model,
            best: best.model,
            adam: last.adam,
            state,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn best(&self) -> &Model {
        &self.best
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    pub fn into_best(self) -> Model {
        self.best
    }

    fn checkpoint_of(&self, model: &Model) -> Checkpoint {
        Checkpoint {
            model: model.clone(),
            adam: self.adam.clone(),
            epoch: self.state.epoch,
            best_val_loss: self.state.best_val,
            trainer: Some(serde_json::to_value(&self.state).expect("plain struct")),
        }
    }

    /// Current weights plus everything needed to resume.
    pub fn last_checkpoint(&self) -> Checkpoint {
        self.checkpoint_of(&self.model)
    }

    pub fn best_checkpoint(&self) -> Checkpoint {
        self.checkpoint_of(&self.best)
    }

    fn chunk_len(&self) -> usize {
        match self.state.phase {
            Phase::Short => self.cfg.short_chunk,
            _ => self.cfg.long_chunk,
        }
    }

    /// One pass over the shuffled training chunks, then validation and
    /// schedule updates.
    pub fn run_epoch(&mut self, train: &[Example], valid: &[Example]) -> Result<EpochLog> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let start = Instant::now();
        let chunk_len = self.chunk_len();
        let lr = self.adam.lr();
        let mut chunks: Vec<Example> = train.iter().flat_map(|ex| ex.chunks(chunk_len)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.state.epoch as u64 + 1);
        chunks.shuffle(&mut rng);

        let mut total = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for (step, batch) in chunks.chunks(self.cfg.batch_size).enumerate() {
            let res = match self.model.config().kind {
                ModelKind::Danet => danet_train_step(&mut self.model, &mut self.adam, batch),
                ModelKind::Adanet => adanet_train_step(&mut self.model, &mut self.adam, batch),
            };
            match res {
                Ok(loss) if loss.is_finite() => {
                    total += loss;
                    used += 1;
                }
                Ok(_) => {
                    return Err(Error::Diverged {
                        epoch: self.state.epoch,
                        step,
                    })
                }
                Err(e) if is_degenerate(&e) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let valid_loss = validation_loss(&self.model, valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: self.state.epoch,
                step: used + skipped,
            });
        }

        let s = &mut self.state;
        let improved = s.best_val.is_none_or(|b| valid_loss < b);
        if improved {
            s.best_val = Some(valid_loss);
            s.since_best = 0;
            s.since_lr = 0;
            self.best = self.model.clone();
        } else {
            s.since_best += 1;
            s.since_lr += 1;
        }
        lr_schedule(&mut self.adam, &mut s.since_lr);
        let log = EpochLog {
            epoch: s.epoch,
            phase: s.phase,
            chunk_len,
            lr,
            train_loss: if used > 0 { total / used as f64 } else { f64::NAN },
            valid_loss,
            improved,
            skipped_batches: skipped,
            seconds: start.elapsed().as_secs_f64(),
        };
        s.epoch += 1;
        s.phase_epoch += 1;
        match s.phase {
            Phase::Short if s.since_best >= self.cfg.switch_patience || s.phase_epoch >= self.cfg.max_short_epochs => {
                s.phase = Phase::Long;
                s.phase_epoch = 0;
                s.since_best = 0;
                s.since_lr = 0;
                self.model = self.best.clone();
                self.adam = AdamState::new(self.model.params(), self.cfg.long_lr);
                if self.cfg.max_long_epochs == 0 {
                    s.phase = Phase::Done;
                }
            }
            Phase::Long if s.since_best >= self.cfg.stop_patience || s.phase_epoch >= self.cfg.max_long_epochs => {
                s.phase = Phase::Done;
            }
            _ => {}
        }
        Ok(log)
    }

    /// Trains to completion, calling `on_epoch` after every epoch.
    pub fn run(
        &mut self,
        train: &[Example],
        valid: &[Example],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let log = self.run_epoch(train, valid)?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }
}

/// Training-time attractors of one example: oracle-assignment attractors for
/// DANet, the selected anchor set for ADANet.
pub fn training_attractors(model: &Model, ex: &Example) -> Result<AttractorSet> {
    let cfg = model.config();
    let v = embed(model.params(), ex.features.view(), &cfg.net)?;
    let w = threshold_vector(ex.mix_mag.view(), cfg.keep_fraction)?;
    match cfg.kind {
        ModelKind::Danet => {
            let y = masks::ibm(ex.source_mags.view())?;
            form_attractors(&v, y.values().view(), &w)
        }
        ModelKind::Adanet => {
            let anchors = model.anchors().ok_or_else(|| Error::invalid("model has no anchors"))?;
            Ok(select_attractor_set(anchors.view(), &v, &w, ex.n_sources())?.attractors)
        }
    }
}

/// Averages training attractors over `examples` into a fixed table.
pub fn fit_fixed_attractors(model: &Model, examples: &[Example]) -> Result<AttractorSet> {
    let mut sets = Vec::with_capacity(examples.len());
    for ex in examples {
        match training_attractors(model, ex) {
            Ok(a) => sets.push(a),
            Err(e) if is_degenerate(&e) => {}
            Err(e) => return Err(e),
        }
    }
    fixed_attractors(&sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetManifest;
    use crate::nn::EmbedNetConfig;

    fn tiny_setup(kind: ModelKind) -> (ModelConfig, TrainConfig, Vec<Example>, Vec<Example>) {
        let mcfg = ModelConfig {
            kind,
            net: EmbedNetConfig {
                context: 1,
                hidden_sizes: vec![8],
                embedding_dim: 4,
                n_bins: 129,
            },
            anchors: 3,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            seed: 3,
            short_chunk: 10,
            long_chunk: 20,
            batch_size: 2,
            max_short_epochs: 2,
            max_long_epochs: 1,
            ..TrainConfig::default()
        };
        let to_ex = |split: &str, n| {
            DatasetManifest::generate(split, n, 2, 5, 0.3)
                .unwrap()
                .render()
                .unwrap()
                .iter()
                .map(|(m, r)| Example::from_waveforms(m, r, &mcfg.stft).unwrap())
                .collect::<Vec<_>>()
        };
        let train = to_ex("train", 3);
        let valid = to_ex("valid", 2);
        (mcfg, tcfg, train, valid)
    }

    #[test]
    fn curriculum_walks_through_phases() {
        let (mcfg, tcfg, train, valid) = tiny_setup(ModelKind::Danet);
        let mut t = Trainer::new(mcfg, tcfg).unwrap();
        let mut logs = vec![];
        t.run(&train, &valid, |_, l| {
            logs.push(l.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(logs[0].chunk_len, 10);
        assert_eq!(logs[2].phase, Phase::Long);
        assert_eq!(logs[2].lr, 1e-4);
        assert!(t.is_done());
        assert!(t.run_epoch(&train, &valid).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mcfg, tcfg, train, valid) = tiny_setup(ModelKind::Adanet);
        let mut full = Trainer::new(mcfg.clone(), tcfg.clone()).unwrap();
        full.run(&train, &valid, |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(mcfg, tcfg.clone()).unwrap();
        first.run_epoch(&train, &valid).unwrap();
        let mut resumed = Trainer::resume(first.last_checkpoint(), first.best_checkpoint(), tcfg).unwrap();
        resumed.run(&train, &valid, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.best().params(), full.best().params());
        assert_eq!(resumed.model().params(), full.model().params());
    }

    #[test]
    fn fixed_table_has_one_row_per_source() {
        let (mcfg, _, train, _) = tiny_setup(ModelKind::Danet);
        let model = Model::new(mcfg, 1).unwrap();
        let a = fit_fixed_attractors(&model, &train).unwrap();
        assert_eq!(a.values().dim(), (2, 4));
    }
}
