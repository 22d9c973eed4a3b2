//! Joint-model training: state, per-step batch construction and the loop.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::conditioning::{sample_modality_mask, ConditionInputs, ConditioningError};
use crate::config::RunConfig;
use crate::dataset::{segment_rows, Dataset};
use crate::flow::{cfm_loss_with_draws, draw_flow, FlowDraw, FlowError};
use crate::instruction::{encode_captions, InstructionBundle, InstructionError, Vocab};
use crate::model::{ConditionRequest, JointNet};
use crate::nn::{Optimizer, OptimizerKind};
use crate::rng::derive_rng;
use crate::speaker::{train_speaker_encoder, SpeakerEmbedding, SpeakerEncoder, SpeakerError, SpeakerTrainReport};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Speaker(#[from] SpeakerError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Rescale gradients whose global norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 0.05,
            optimizer: OptimizerChoice::Sgd,
            checkpoint_every: 500,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Invalid("steps and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(TrainError::Invalid("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub encoder: SpeakerEncoder,
    pub net: JointNet,
    pub store: ParamStore,
    pub optimizer: Optimizer,
    /// Completed optimizer steps.
    pub step: u64,
    /// Batch loss of every completed step.
    pub losses: Vec<f64>,
}

impl TrainState {
    /// Trains the speaker encoder on the solo clips, then initializes the joint model.
    pub fn new(config: RunConfig, dataset: &Dataset) -> Result<(Self, SpeakerTrainReport), TrainError> {
        config.train.validate()?;
        let pairs = dataset.speaker_training_pairs();
        let (encoder, report) = train_speaker_encoder(
            &pairs,
            config.backbone.width,
            &config.speaker,
            &mut derive_rng(config.seed, "speaker-encoder", 0),
        )?;
        let vocab = Vocab::default();
        let mut store = ParamStore::default();
        let net = JointNet::new(
            &mut store,
            &mut derive_rng(config.seed, "model-init", 0),
            &config.backbone,
            vocab.table_rows(),
            config.world.alphabet,
            encoder.width,
        )?;
        let optimizer = Optimizer::new(config.train.optimizer.kind(), config.train.lr);
        Ok((
            Self {
                config,
                vocab,
                encoder,
                net,
                store,
                optimizer,
                step: 0,
                losses: Vec::new(),
            },
            report,
        ))
    }

    /// Caption table rows for a bundle.
    pub fn caption_rows(&self, bundle: &InstructionBundle) -> Result<Vec<usize>, TrainError> {
        encode_captions(bundle, &self.vocab)?
            .into_iter()
            .map(|t| {
                self.vocab
                    .table_index(t)
                    .ok_or_else(|| TrainError::Invalid(format!("token {t:?} has no caption row")))
            })
            .collect()
    }

    /// Raw conditioning for a bundle; `speakers` is indexed by speaker tag.
    pub fn condition_inputs(
        &self,
        bundle: &InstructionBundle,
        speakers: Vec<SpeakerEmbedding>,
        image: Option<Vec<f64>>,
    ) -> Result<ConditionInputs, TrainError> {
        Ok(ConditionInputs {
            caption_tokens: self.caption_rows(bundle)?,
            segments: bundle
                .segments
                .iter()
                .map(|s| (s.tag, s.phonemes.as_usize()))
                .collect(),
            speakers,
            image,
        })
    }

    /// Runs one optimizer step and returns its batch loss.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<f64, TrainError> {
        let mut rng = derive_rng(self.config.seed, "train-step", self.step);
        let n = data.inputs.len();
        let mut requests = Vec::with_capacity(self.config.train.batch_size);
        let mut targets = Vec::with_capacity(self.config.train.batch_size);
        let mut draws: Vec<FlowDraw> = Vec::with_capacity(self.config.train.batch_size);
        for _ in 0..self.config.train.batch_size {
            let i = rng.random_range(0..n);
            let mask = sample_modality_mask(&self.config.mask, &mut rng);
            let mut inputs = data.inputs[i].clone();
            inputs.speakers = data.references(i, &mut rng);
            requests.push(ConditionRequest { inputs, mask });
            let [a, v] = &data.targets[i];
            draws.push(draw_flow(&mut rng, &[(a.rows(), a.cols()), (v.rows(), v.cols())]));
            targets.push(i);
        }
        let batch: Vec<(&[Matrix], &ConditionRequest)> = targets
            .iter()
            .zip(&requests)
            .map(|(&i, r)| (&data.targets[i][..], r))
            .collect();
        let (loss, grads) = cfm_loss_with_draws(&self.net, &self.store, &batch, &draws, true)?;
        let mut grads = grads.expect("gradients requested");
        if let Some(clip) = self.config.train.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.optimizer.apply(&mut self.store, &grads);
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Steps until `until` completed steps, calling `after` after each one.
    pub fn train_until<E: From<TrainError>>(
        &mut self,
        data: &TrainingData,
        until: u64,
        mut after: impl FnMut(&TrainState, f64) -> Result<(), E>,
    ) -> Result<(), E> {
        while self.step < until {
            let loss = self.train_step(data)?;
            after(self, loss)?;
        }
        Ok(())
    }
}

/// Per-clip training inputs derived from a dataset and a frozen encoder.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// Conditioning with an empty speaker list, filled per step.
    pub inputs: Vec<ConditionInputs>,
    /// `[audio, video]` per clip.
    pub targets: Vec<[Matrix; 2]>,
    speakers: Vec<Vec<usize>>,
    /// Embedding of every (clip, segment).
    embeddings: Vec<Vec<SpeakerEmbedding>>,
    /// (clip, segment) pairs voiced by each speaker.
    by_speaker: Vec<Vec<(usize, usize)>>,
}

impl TrainingData {
    pub fn new(state: &TrainState, dataset: &Dataset) -> Result<Self, TrainError> {
        if dataset.clips.is_empty() {
            return Err(TrainError::Invalid("empty dataset".into()));
        }
        let mut inputs = Vec::with_capacity(dataset.clips.len());
        let mut embeddings = Vec::with_capacity(dataset.clips.len());
        let mut by_speaker = vec![Vec::new(); dataset.world.n_speakers()];
        for (i, q) in dataset.clips.iter().enumerate() {
            let image = (q.video.rows() > 0).then(|| q.video.row(0).to_vec());
            inputs.push(state.condition_inputs(&q.bundle(), Vec::new(), image)?);
            let mut per_segment = Vec::with_capacity(q.speakers.len());
            for (k, &s) in q.speakers.iter().enumerate() {
                let rows = if q.speakers.len() == 1 { q.audio.clone() } else { segment_rows(q, k) };
                per_segment.push(state.encoder.embed(&rows)?);
                by_speaker[s].push((i, k));
            }
            embeddings.push(per_segment);
        }
        Ok(Self {
            inputs,
            targets: dataset.clips.iter().map(|q| [q.audio.clone(), q.video.clone()]).collect(),
            speakers: dataset.clips.iter().map(|q| q.speakers.clone()).collect(),
            embeddings,
            by_speaker,
        })
    }

    /// One reference embedding per speaker of clip `i`, taken from a different
    /// clip of the same speaker when one exists.
    pub fn references(&self, i: usize, rng: &mut crate::rng::Rng) -> Vec<SpeakerEmbedding> {
        self.speakers[i]
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let pool = &self.by_speaker[s];
                let others = pool.iter().filter(|(j, _)| *j != i).count();
                if others == 0 {
                    return self.embeddings[i][k].clone();
                }
                let pick = rng.random_range(0..others);
                let &(j, kk) = pool.iter().filter(|(j, _)| *j != i).nth(pick).expect("in range");
                self.embeddings[j][kk].clone()
            })
            .collect()
    }
}
