//! Sampling from a trained state, metric evaluation and the negative-guidance ablation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{ConditioningError, MaskFlags, Task};
use crate::dataset::{segment_audio, with_pool, Dataset};
use crate::flow::{euler_integrate, initial_noise, FlowError, SamplerConfig};
use crate::instruction::{InstructionBundle, PhonemeSequence};
use crate::metrics::{
    decode_phonemes, frechet_distance, kl_divergence, sync_score, token_error_rate, MetricReport, MetricsError,
};
use crate::rng::derive_rng;
use crate::speaker::{cosine_similarity, negative_embedding, NegativeStrategy, NoiseSource, SpeakerEmbedding, SpeakerError};
use crate::tensor::Matrix;
use crate::train::{TrainError, TrainState};
use crate::world::{Quadruplet, WorldSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Speaker(#[from] SpeakerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid evaluation: {0}")]
    Invalid(String),
}

/// A generated audio-video latent pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub audio: Matrix,
    pub video: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub bundle: InstructionBundle,
    /// Reference speaker embeddings indexed by speaker tag; empty disables cloning.
    pub speakers: Vec<SpeakerEmbedding>,
    /// First video frame.
    pub image: Option<Vec<f64>>,
    pub duration: f64,
    /// Extra masking on top of what the request leaves out.
    pub mask: MaskFlags,
}

/// A trained state bound to its world and an optional noise source.
pub struct Sampler<'a> {
    pub state: &'a TrainState,
    pub world: &'a WorldSpec,
    pub noise: Option<NoiseSource<'a>>,
}

impl<'a> Sampler<'a> {
    pub fn new(state: &'a TrainState, world: &'a WorldSpec) -> Self {
        Self {
            state,
            world,
            noise: Some(NoiseSource::World(world)),
        }
    }

    pub fn embed(&self, audio: &Matrix) -> Result<SpeakerEmbedding, EvalError> {
        Ok(self.state.encoder.embed(audio)?)
    }

    /// Generates one clip. Initial noise depends only on `(seed, index)`, so
    /// runs that differ in the negative strategy share it.
    pub fn generate(
        &self,
        request: &GenerationRequest,
        cfg: &SamplerConfig,
        seed: u64,
        index: u64,
    ) -> Result<LatentClip, EvalError> {
        let state = self.state;
        let conditioner = &state.net.conditioner;
        let inputs = state.condition_inputs(&request.bundle, request.speakers.clone(), request.image.clone())?;
        let cond = conditioner.condition_set(&state.store, &inputs, request.mask)?;
        let rows_a = self.world.audio_rows(request.duration);
        let rows_v = self.world.video_rows(request.duration);
        let negative = negative_embedding(
            cfg.negative_strategy,
            &state.encoder,
            self.noise,
            &state.config.gaussian_levels,
            rows_a,
            &mut derive_rng(seed, "negative", index),
        )?;
        let neg = conditioner.negative_condition_set(&state.store, &negative)?;
        let x = initial_noise(
            &mut derive_rng(seed, "sample-noise", index),
            &[(rows_a, self.world.config.d_audio), (rows_v, self.world.config.d_video)],
        );
        let mut out = euler_integrate(&state.net, &state.store, x, &cond, &neg, cfg)?;
        let video = out.pop().expect("two streams");
        let audio = out.pop().expect("two streams");
        Ok(LatentClip { audio, video })
    }
}

/// A held-out clip plus reference audio for each of its speakers.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub target: Quadruplet,
    /// Indexed by speaker tag.
    pub references: Vec<Matrix>,
}

/// The first `n` clips of `dataset` (cycling if needed), each with references
/// taken from other solo clips of the same speakers.
pub fn eval_cases(dataset: &Dataset, n: usize) -> Result<Vec<EvalCase>, EvalError> {
    if dataset.clips.is_empty() {
        return Err(EvalError::Invalid("evaluation set is empty".into()));
    }
    (0..n)
        .map(|i| {
            let i = i % dataset.clips.len();
            let target = dataset.clips[i].clone();
            let references = target
                .speakers
                .iter()
                .enumerate()
                .map(|(k, &s)| match dataset.reference_clip(s, i) {
                    Some(j) => dataset.clips[j].audio.clone(),
                    None => segment_audio(&target.audio, &target.segments, k),
                })
                .collect();
            Ok(EvalCase { target, references })
        })
        .collect()
}

/// One generated clip and its per-sample metrics.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub clip: LatentClip,
    pub decoded: PhonemeSequence,
    pub ter: f64,
    pub speaker_sim: f64,
    pub sync_score: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub samples: Vec<SampleRecord>,
}

impl Evaluation {
    /// Mean sync score when every audio track is paired with the next sample's video.
    pub fn shuffled_sync(&self, cases: &[EvalCase], world: &WorldSpec) -> Result<f64, EvalError> {
        let n = self.samples.len();
        if n < 2 {
            return Err(EvalError::Invalid("shuffling needs two samples".into()));
        }
        let mut total = 0.0;
        for i in 0..n {
            let len = cases[i].target.phonemes().len();
            total += sync_score(&self.samples[i].clip.audio, &self.samples[(i + 1) % n].clip.video, world, Some(len))?;
        }
        Ok(total / n as f64)
    }
}

/// Mean over segments of the cosine between the generated segment's
/// embedding and its reference embedding.
pub fn clip_speaker_similarity(
    sampler: &Sampler,
    audio: &Matrix,
    case: &EvalCase,
) -> Result<f64, EvalError> {
    let segs = &case.target.segments;
    let mut total = 0.0;
    for (k, reference) in case.references.iter().enumerate() {
        let generated = if segs.len() > 1 { segment_audio(audio, segs, k) } else { audio.clone() };
        let a = sampler.embed(&generated)?;
        let b = sampler.embed(reference)?;
        total += cosine_similarity(a.values(), b.values())?;
    }
    Ok(total / case.references.len().max(1) as f64)
}

/// Generates one clip per case under `task` and scores it against the case.
pub fn evaluate(
    sampler: &Sampler,
    cases: &[EvalCase],
    task: Task,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Evaluation, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Invalid("no evaluation cases".into()));
    }
    let mask = task.mask();
    let samples: Vec<Result<SampleRecord, EvalError>> = with_pool(|| {
        cases
            .par_iter()
            .enumerate()
            .map(|(i, case)| {
                let q = &case.target;
                let speakers = if mask.audio_masked {
                    Vec::new()
                } else {
                    case.references.iter().map(|r| sampler.embed(r)).collect::<Result<_, _>>()?
                };
                let request = GenerationRequest {
                    bundle: q.bundle(),
                    speakers,
                    image: (!mask.image_masked && q.video.rows() > 0).then(|| q.video.row(0).to_vec()),
                    duration: q.duration,
                    mask,
                };
                let clip = sampler.generate(&request, cfg, seed, i as u64)?;
                let truth = q.phonemes();
                let decoded = decode_phonemes(&clip.audio, sampler.world, Some(truth.len()))?;
                Ok(SampleRecord {
                    ter: token_error_rate(&decoded, &truth),
                    speaker_sim: clip_speaker_similarity(sampler, &clip.audio, case)?,
                    sync_score: sync_score(&clip.audio, &clip.video, sampler.world, Some(truth.len()))?,
                    decoded,
                    clip,
                })
            })
            .collect()
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = samples.len() as f64;
    let generated = Matrix::concat_rows(&samples.iter().map(|s| &s.clip.audio).collect::<Vec<_>>());
    let real = Matrix::concat_rows(&cases.iter().map(|c| &c.target.audio).collect::<Vec<_>>());
    let report = MetricReport {
        ter: samples.iter().map(|s| s.ter).sum::<f64>() / n,
        speaker_sim: samples.iter().map(|s| s.speaker_sim).sum::<f64>() / n,
        sync_score: samples.iter().map(|s| s.sync_score).sum::<f64>() / n,
        fd: frechet_distance(&generated, &real)?,
        kl: kl_divergence(&generated, &real)?,
        n_samples: samples.len(),
        strategy: Some(cfg.negative_strategy),
        seed,
    };
    Ok(Evaluation { report, samples })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: NegativeStrategy,
    pub gaussian_rms: Option<f64>,
    pub guidance_w: f64,
    pub report: MetricReport,
}

pub const ABLATION_HEADER: [&str; 10] = [
    "strategy",
    "gaussian_rms",
    "n_samples",
    "ter",
    "speaker_sim",
    "sync_score",
    "fd",
    "kl",
    "guidance_w",
    "seed",
];

/// Evaluates every negative strategy with the same seeds, so only the
/// unconditional branch differs between rows.
pub fn run_cfg_ablation(
    sampler: &Sampler,
    cases: &[EvalCase],
    task: Task,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<AblationRow>, EvalError> {
    NegativeStrategy::all()
        .into_iter()
        .map(|strategy| {
            let cfg = SamplerConfig {
                negative_strategy: strategy,
                ..cfg.clone()
            };
            let eval = evaluate(sampler, cases, task, &cfg, seed)?;
            Ok(AblationRow {
                strategy,
                gaussian_rms: strategy.gaussian_rms(&sampler.state.config.gaussian_levels),
                guidance_w: cfg.guidance_w,
                report: eval.report,
            })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        let m = &r.report;
        w.write_record([
            r.strategy.to_string(),
            r.gaussian_rms.map(|v| v.to_string()).unwrap_or_default(),
            m.n_samples.to_string(),
            m.ter.to_string(),
            m.speaker_sim.to_string(),
            m.sync_score.to_string(),
            m.fd.to_string(),
            m.kl.to_string(),
            r.guidance_w.to_string(),
            m.seed.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, generate_split};
    use crate::train::tests::tiny_config;

    fn setup() -> (TrainState, Dataset) {
        let config = tiny_config();
        let ds = generate(&config.world, &config.data, config.seed).unwrap();
        let (state, _) = TrainState::new(config.clone(), &ds).unwrap();
        let eval = generate_split(&config.world, &config.data, config.seed, 1).unwrap();
        (state, eval)
    }

    #[test]
    fn ablation_has_eight_rows_and_is_deterministic() {
        let (state, eval) = setup();
        let world = state.config.build_world().unwrap();
        let sampler = Sampler::new(&state, &world);
        let cases = eval_cases(&eval, 3).unwrap();
        let cfg = SamplerConfig {
            steps: 4,
            guidance_w: 3.0,
            ..SamplerConfig::default()
        };
        let csv_of = || {
            let rows = run_cfg_ablation(&sampler, &cases, Task::TA2VA, &cfg, 5).unwrap();
            let mut buf = Vec::new();
            write_ablation_csv(&rows, &mut buf).unwrap();
            (rows, String::from_utf8(buf).unwrap())
        };
        let (rows, a) = csv_of();
        let (_, b) = csv_of();
        assert_eq!(a, b);
        assert_eq!(rows.len(), 8);
        assert_eq!(a.lines().count(), 9);
        assert_eq!(a.lines().next().unwrap(), ABLATION_HEADER.join(","));

        let request = |i: usize| GenerationRequest {
            bundle: cases[i].target.bundle(),
            speakers: vec![sampler.embed(&cases[i].references[0]).unwrap()],
            image: None,
            duration: cases[i].target.duration,
            mask: MaskFlags::default(),
        };
        let zero = sampler.generate(&request(0), &cfg, 5, 0).unwrap();
        let natural = SamplerConfig {
            negative_strategy: NegativeStrategy::Natural,
            ..cfg.clone()
        };
        let nat = sampler.generate(&request(0), &natural, 5, 0).unwrap();
        assert!(zero.audio.max_abs_diff(&nat.audio) > 0.0);
        let unguided = SamplerConfig {
            guidance_w: 1.0,
            ..cfg.clone()
        };
        let nat1 = sampler
            .generate(&request(0), &SamplerConfig { negative_strategy: NegativeStrategy::Natural, ..unguided.clone() }, 5, 0)
            .unwrap();
        assert!(sampler.generate(&request(0), &unguided, 5, 0).unwrap().audio.bit_eq(&nat1.audio));
    }

    #[test]
    fn natural_without_noise_source_fails() {
        let (state, eval) = setup();
        let world = state.config.build_world().unwrap();
        let sampler = Sampler {
            noise: None,
            ..Sampler::new(&state, &world)
        };
        let cases = eval_cases(&eval, 1).unwrap();
        let cfg = SamplerConfig {
            steps: 2,
            negative_strategy: NegativeStrategy::Natural,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            evaluate(&sampler, &cases, Task::T2VA, &cfg, 0),
            Err(EvalError::Speaker(SpeakerError::MissingNoiseSource))
        ));
    }
}
