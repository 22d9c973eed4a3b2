//! The synthetic audio-video world standing in for real codecs and corpora.
//!
//! Audio latent row `i` of a clip is `φ[p(i)] + α·τ[s(i)] + n_i`: the
//! codebook vector of the phoneme active at that row, the speaker's timbre
//! vector, and AR(1) background noise. Phonemes are stretched uniformly over
//! the clip. Video row `j` carries the lip aperture of the phoneme active at
//! the frame centre in channel 0 and small white noise elsewhere.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction::{g2p, InstructionBundle, PhonemeSequence, Segment, SpeakerTag};
use crate::rng::{derive_rng, normal_matrix, standard_normal, Rng};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error("world construction failed: {0}")]
    ConstructionFailure(String),
    #[error("clip has {rows} audio rows for {phonemes} phonemes")]
    DurationTooShort { rows: usize, phonemes: usize },
    #[error("invalid synthesis request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub alphabet: usize,
    pub n_speakers: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub audio_hz: f64,
    pub video_hz: f64,
    pub timbre_alpha: f64,
    pub noise_sigma: f64,
    pub noise_rho: f64,
    pub video_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            alphabet: 27,
            n_speakers: 8,
            d_audio: 16,
            d_video: 12,
            audio_hz: 43.0,
            video_hz: 3.0,
            timbre_alpha: 0.5,
            noise_sigma: 0.1,
            noise_rho: 0.9,
            video_noise: 0.05,
        }
    }
}

/// Minimum pairwise distance between codebook vectors.
pub const MIN_CODEBOOK_DISTANCE: f64 = 0.1;
/// Maximum pairwise cosine between timbre vectors.
pub const MAX_TIMBRE_COSINE: f64 = 0.8;
const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub seed: u64,
    /// `alphabet × d_audio`, unit rows.
    pub codebook: Matrix,
    /// `n_speakers × d_audio`, unit rows.
    pub timbre: Matrix,
    /// Lip aperture per phoneme, in `[0, 1]`.
    pub apertures: Vec<f64>,
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws unit vectors one at a time, redrawing any that violate `ok` against
/// those already accepted.
fn draw_set(
    rng: &mut Rng,
    n: usize,
    d: usize,
    what: &str,
    ok: impl Fn(&[f64], &[f64]) -> bool,
) -> Result<Matrix, WorldError> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut draws = 0;
    while rows.len() < n {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(WorldError::ConstructionFailure(format!(
                "could not place {n} {what} vectors in {d} dimensions"
            )));
        }
        let v = unit_vector(rng, d);
        if rows.iter().all(|r| ok(r, &v)) {
            rows.push(v);
        }
    }
    Ok(Matrix::from_rows(&rows))
}

pub fn build_world(config: &WorldConfig, seed: u64) -> Result<WorldSpec, WorldError> {
    if config.alphabet < 4 {
        return Err(WorldError::InvalidConfig(format!("alphabet {} < 4", config.alphabet)));
    }
    if config.n_speakers < 2 {
        return Err(WorldError::InvalidConfig(format!("{} speakers < 2", config.n_speakers)));
    }
    if config.d_audio < 2 || config.d_video < 1 {
        return Err(WorldError::InvalidConfig("latent widths too small".into()));
    }
    if !(config.audio_hz > 0.0 && config.video_hz > 0.0) {
        return Err(WorldError::InvalidConfig("rates must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.noise_rho) || config.noise_sigma < 0.0 {
        return Err(WorldError::InvalidConfig("noise needs rho in [0, 1) and sigma >= 0".into()));
    }
    let mut rng = derive_rng(seed, "world", 0);
    let codebook = draw_set(&mut rng, config.alphabet, config.d_audio, "codebook", |a, b| {
        dist(a, b) > MIN_CODEBOOK_DISTANCE
    })?;
    let timbre = draw_set(&mut rng, config.n_speakers, config.d_audio, "timbre", |a, b| {
        dot(a, b) < MAX_TIMBRE_COSINE
    })?;
    let last = (config.alphabet - 1) as f64;
    let apertures = (0..config.alphabet).map(|a| a as f64 / last).collect();
    Ok(WorldSpec {
        config: config.clone(),
        seed,
        codebook,
        timbre,
        apertures,
    })
}

/// What to synthesize. `transcripts[k]` is spoken by `speakers[k]`, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub speakers: Vec<usize>,
    pub transcripts: Vec<PhonemeSequence>,
    pub duration: f64,
    pub noise_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub video: Vec<String>,
    pub audio: Vec<Vec<String>>,
}

/// One training sample: video, audio, caption and transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruplet {
    pub video: Matrix,
    pub audio: Matrix,
    pub caption: Caption,
    pub segments: Vec<Segment>,
    pub speakers: Vec<usize>,
    pub duration: f64,
}

impl Quadruplet {
    pub fn phonemes(&self) -> PhonemeSequence {
        PhonemeSequence(self.segments.iter().flat_map(|s| s.phonemes.0.iter().copied()).collect())
    }

    pub fn bundle(&self) -> InstructionBundle {
        InstructionBundle {
            video_caption: self.caption.video.clone(),
            audio_captions: self.caption.audio.clone(),
            segments: self.segments.clone(),
            n_speakers: self.speakers.len(),
        }
    }
}

/// Row `i` of a `rows`-long grid carries phoneme `floor(i·L/rows)`.
pub fn phoneme_at(row: usize, rows: usize, phonemes: usize) -> usize {
    row * phonemes / rows
}

/// First row of phoneme `k` under uniform stretching.
pub fn phoneme_start(k: usize, rows: usize, phonemes: usize) -> usize {
    (k * rows).div_ceil(phonemes)
}

impl WorldSpec {
    pub fn audio_rows(&self, duration: f64) -> usize {
        (duration * self.config.audio_hz).round() as usize
    }

    pub fn video_rows(&self, duration: f64) -> usize {
        (duration * self.config.video_hz).round() as usize
    }

    pub fn n_speakers(&self) -> usize {
        self.config.n_speakers
    }

    pub fn alphabet(&self) -> usize {
        self.config.alphabet
    }

    pub fn timbre_of(&self, speaker: usize) -> &[f64] {
        self.timbre.row(speaker)
    }

    /// Stationary AR(1) noise with standard deviation `sigma` per channel.
    pub fn noise_clip(&self, rows: usize, sigma: f64, rng: &mut Rng) -> Matrix {
        let rho = self.config.noise_rho;
        let innov = (1.0 - rho * rho).sqrt();
        let d = self.config.d_audio;
        let mut out = Matrix::zeros(rows, d);
        let mut state: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        for r in 0..rows {
            if r > 0 {
                for s in state.iter_mut() {
                    *s = rho * *s + innov * standard_normal(rng);
                }
            }
            for (o, s) in out.row_mut(r).iter_mut().zip(&state) {
                *o = sigma * s;
            }
        }
        out
    }

    /// Background noise at the world's default amplitude.
    pub fn natural_noise(&self, rows: usize, rng: &mut Rng) -> Matrix {
        self.noise_clip(rows, self.config.noise_sigma, rng)
    }

    pub fn gender(&self, speaker: usize) -> &'static str {
        if speaker.is_multiple_of(2) {
            "female"
        } else {
            "male"
        }
    }

    pub fn caption_for(&self, speakers: &[usize]) -> Caption {
        let video = match speakers {
            [s] => format!("a {} speaker talking", self.gender(*s)),
            _ => "two people talking".to_string(),
        };
        Caption {
            video: video.split(' ').map(str::to_string).collect(),
            audio: speakers
                .iter()
                .map(|&s| vec![self.gender(s).to_string(), "voice".to_string()])
                .collect(),
        }
    }

    pub fn synth_quadruplet(&self, req: &SynthRequest, rng: &mut Rng) -> Result<Quadruplet, WorldError> {
        if req.speakers.is_empty() || req.speakers.len() > 2 || req.speakers.len() != req.transcripts.len() {
            return Err(WorldError::InvalidRequest(
                "need one or two speakers, one transcript each".into(),
            ));
        }
        if let Some(&s) = req.speakers.iter().find(|&&s| s >= self.n_speakers()) {
            return Err(WorldError::InvalidRequest(format!("speaker {s} not in world")));
        }
        if req.transcripts.iter().flat_map(|t| t.ids()).any(|&p| usize::from(p) >= self.alphabet()) {
            return Err(WorldError::InvalidRequest("phoneme outside alphabet".into()));
        }
        if !(req.duration > 0.0) || req.noise_amplitude < 0.0 {
            return Err(WorldError::InvalidRequest("duration and noise must be positive".into()));
        }
        let phonemes: Vec<(usize, usize)> = req
            .transcripts
            .iter()
            .zip(&req.speakers)
            .flat_map(|(t, &s)| t.ids().iter().map(move |&p| (usize::from(p), s)))
            .collect();
        let t_a = self.audio_rows(req.duration);
        let t_v = self.video_rows(req.duration).max(1);
        let l = phonemes.len();
        if l == 0 || t_a < l {
            return Err(WorldError::DurationTooShort { rows: t_a, phonemes: l });
        }

        let alpha = self.config.timbre_alpha;
        let mut audio = self.noise_clip(t_a, req.noise_amplitude, rng);
        for i in 0..t_a {
            let (p, s) = phonemes[phoneme_at(i, t_a, l)];
            let (phi, tau) = (self.codebook.row(p), self.timbre.row(s));
            for (c, o) in audio.row_mut(i).iter_mut().enumerate() {
                *o += phi[c] + alpha * tau[c];
            }
        }

        let mut video = normal_matrix(rng, t_v, self.config.d_video, self.config.video_noise);
        for j in 0..t_v {
            let centre = (j as f64 + 0.5) / t_v as f64;
            let k = ((centre * l as f64) as usize).min(l - 1);
            video.set(j, 0, self.apertures[phonemes[k].0]);
        }

        let segments = req
            .transcripts
            .iter()
            .enumerate()
            .map(|(k, t)| Segment {
                tag: SpeakerTag::from_index(k).expect("at most two speakers"),
                phonemes: t.clone(),
            })
            .collect();
        Ok(Quadruplet {
            video,
            audio,
            caption: self.caption_for(&req.speakers),
            segments,
            speakers: req.speakers.clone(),
            duration: req.duration,
        })
    }
}

const WORDS: &[&str] = &[
    "hi", "hello", "yes", "no", "good", "day", "sun", "sea", "blue", "red", "cat", "dog", "run",
    "go", "stop", "time", "moon", "star", "tree", "rain", "home", "song", "play", "fast", "slow",
    "warm", "cold", "open", "near", "far", "jump", "zoo", "quiz", "wax", "kid", "fox", "big",
    "map", "vet", "gum",
];

/// Random words joined by spaces, at most `max_len` characters, at least one word.
pub fn random_transcript(rng: &mut Rng, max_words: usize, max_len: usize) -> (String, PhonemeSequence) {
    let n = rng.random_range(1..=max_words.max(1));
    let mut text = String::new();
    for _ in 0..n {
        let w = WORDS.choose(rng).expect("word list is not empty");
        let candidate = if text.is_empty() {
            w.to_string()
        } else {
            format!("{text} {w}")
        };
        if candidate.len() > max_len {
            break;
        }
        text = candidate;
    }
    if text.is_empty() {
        let w = WORDS.choose(rng).expect("word list is not empty");
        text = w[..w.len().min(max_len.max(1))].to_string();
    }
    let ph = g2p(&text).expect("word list is lowercase ascii");
    (text, ph)
}

/// Dataset-level knobs for [`plan_clip`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_clips: usize,
    pub clip_seconds: f64,
    pub max_words: usize,
    pub max_phonemes: usize,
    pub dialogue_fraction: f64,
    /// Fraction of clips synthesized at `degraded_noise` to give the filter something to reject.
    pub degraded_fraction: f64,
    pub degraded_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clips: 5000,
            clip_seconds: 2.0,
            max_words: 3,
            max_phonemes: 12,
            dialogue_fraction: 0.2,
            degraded_fraction: 0.0,
            degraded_noise: 1.5,
        }
    }
}

/// A request plus the plain-text transcripts it was made from.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedClip {
    pub request: SynthRequest,
    pub texts: Vec<String>,
}

/// Plans clip `index` of a dataset; deterministic in `(seed, index)`.
pub fn plan_clip(world: &WorldSpec, data: &DataConfig, seed: u64, index: u64) -> PlannedClip {
    let mut rng = derive_rng(seed, "plan", index);
    let k = world.n_speakers();
    let dialogue = rng.random_bool(data.dialogue_fraction.clamp(0.0, 1.0));
    let degraded = rng.random_bool(data.degraded_fraction.clamp(0.0, 1.0));
    let (speakers, texts, transcripts) = if dialogue {
        let a = rng.random_range(0..k);
        let b = (a + rng.random_range(1..k)) % k;
        let half = (data.max_phonemes / 2).max(1);
        let (t0, p0) = random_transcript(&mut rng, data.max_words.div_ceil(2), half);
        let (t1, p1) = random_transcript(&mut rng, data.max_words.div_ceil(2), half);
        (vec![a, b], vec![t0, t1], vec![p0, p1])
    } else {
        let (t, p) = random_transcript(&mut rng, data.max_words, data.max_phonemes);
        (vec![rng.random_range(0..k)], vec![t], vec![p])
    };
    PlannedClip {
        request: SynthRequest {
            speakers,
            transcripts,
            duration: data.clip_seconds,
            noise_amplitude: if degraded {
                data.degraded_noise
            } else {
                world.config.noise_sigma
            },
        },
        texts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn world() -> WorldSpec {
        build_world(&WorldConfig::default(), 42).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(world(), world());
        assert_ne!(world().codebook, build_world(&WorldConfig::default(), 43).unwrap().codebook);
    }

    #[test]
    fn invariants_hold_exhaustively() {
        let w = world();
        for i in 0..w.timbre.rows() {
            for j in 0..i {
                assert!(dot(w.timbre.row(i), w.timbre.row(j)) < MAX_TIMBRE_COSINE);
            }
        }
        for i in 0..w.codebook.rows() {
            for j in 0..i {
                assert!(dist(w.codebook.row(i), w.codebook.row(j)) > MIN_CODEBOOK_DISTANCE);
            }
        }
        assert!(w.apertures.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn rejects_tiny_configs() {
        let small = WorldConfig {
            alphabet: 2,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&small, 1), Err(WorldError::InvalidConfig(_))));
        let lonely = WorldConfig {
            n_speakers: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&lonely, 1), Err(WorldError::InvalidConfig(_))));
        // 50 speakers pairwise below cosine 0.8 in 2-D is impossible
        let crowded = WorldConfig {
            n_speakers: 50,
            d_audio: 2,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&crowded, 1), Err(WorldError::ConstructionFailure(_))));
    }

    #[test]
    fn three_second_clip_shapes() {
        let w = world();
        let req = SynthRequest {
            speakers: vec![3],
            transcripts: vec![g2p("hello").unwrap()],
            duration: 3.0,
            noise_amplitude: 0.1,
        };
        let q = w.synth_quadruplet(&req, &mut seeded(1)).unwrap();
        assert_eq!(q.audio.shape(), (129, 16));
        assert_eq!(q.video.shape(), (9, 12));
        let again = w.synth_quadruplet(&req, &mut seeded(1)).unwrap();
        assert!(q.audio.bit_eq(&again.audio) && q.video.bit_eq(&again.video));
    }

    #[test]
    fn too_many_phonemes() {
        let w = world();
        let req = SynthRequest {
            speakers: vec![0],
            transcripts: vec![g2p("abcdefghij").unwrap()],
            duration: 0.1,
            noise_amplitude: 0.0,
        };
        assert_eq!(
            w.synth_quadruplet(&req, &mut seeded(1)).unwrap_err(),
            WorldError::DurationTooShort { rows: 4, phonemes: 10 }
        );
    }

    #[test]
    fn timbre_recoverable_at_zero_noise() {
        let w = world();
        for s in 0..w.n_speakers() {
            let ph = g2p("good day").unwrap();
            let req = SynthRequest {
                speakers: vec![s],
                transcripts: vec![ph.clone()],
                duration: 2.0,
                noise_amplitude: 0.0,
            };
            let q = w.synth_quadruplet(&req, &mut seeded(s as u64)).unwrap();
            let t_a = q.audio.rows();
            let mean = q.audio.mean_rows();
            let mut phoneme_mean = vec![0.0; 16];
            for i in 0..t_a {
                let p = ph.ids()[phoneme_at(i, t_a, ph.len())] as usize;
                for (m, v) in phoneme_mean.iter_mut().zip(w.codebook.row(p)) {
                    *m += v / t_a as f64;
                }
            }
            let resid: Vec<f64> = mean.iter().zip(&phoneme_mean).map(|(a, b)| a - b).collect();
            let tau = w.timbre_of(s);
            let cos = dot(&resid, tau) / (dot(&resid, &resid).sqrt() * dot(tau, tau).sqrt());
            assert!(cos > 0.99, "speaker {s}: {cos}");
        }
    }

    #[test]
    fn stretching_boundaries_agree() {
        for rows in [43usize, 86, 129] {
            for l in 1..=12 {
                for k in 0..l {
                    let start = phoneme_start(k, rows, l);
                    assert_eq!(phoneme_at(start, rows, l), k);
                    if start > 0 {
                        assert_eq!(phoneme_at(start - 1, rows, l), k - 1);
                    }
                }
            }
        }
    }

    #[test]
    fn planned_clips_fit() {
        let w = world();
        let data = DataConfig::default();
        for i in 0..200 {
            let plan = plan_clip(&w, &data, 9, i);
            let total: usize = plan.request.transcripts.iter().map(|t| t.len()).sum();
            assert!(total <= data.max_phonemes && total > 0);
            assert!(w.synth_quadruplet(&plan.request, &mut seeded(i)).is_ok());
            if plan.request.speakers.len() == 2 {
                assert_ne!(plan.request.speakers[0], plan.request.speakers[1]);
            }
        }
    }
}
