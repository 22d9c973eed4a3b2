//! Joint transformer over audio, video and condition tokens.
//!
//! Token order is `[audio | video | text | phoneme | image | refaudio]`.
//! Under the default [`RopeClock::Audio`] audio rows are rotated at their
//! index, while video rows and unmasked phoneme rows are rotated at the audio
//! row their span is centred on; other condition rows are not rotated.
//! Audio, video and (unmasked) phoneme rows also receive a learned projection
//! of clip-relative sinusoidal features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, RopeTable, Tape, Var};
use crate::conditioning::{ConditionSet, ConditionVars, MaskFlags};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::rng::{normal_matrix, Rng};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackboneError {
    #[error("invalid backbone configuration: {0}")]
    InvalidConfig(String),
    #[error("rotary embedding needs an even head width, got {0}")]
    OddHeadWidth(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub rope_base: f64,
    pub mlp_ratio: usize,
    /// Frequencies of the clip-relative position features.
    pub relative_frequencies: usize,
    pub clock: RopeClock,
}

/// Rotary positions of the non-audio rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeClock {
    /// Video at `0..T_v`, conditions unrotated.
    PerModality,
    /// Video and unmasked phoneme rows at the centre of the audio rows they cover.
    #[default]
    Audio,
}

/// Audio row at the centre of slot `k` when `rows` audio rows are split into `slots` equal parts.
pub fn audio_clock_position(k: usize, slots: usize, rows: usize) -> usize {
    (2 * k + 1) * rows / (2 * slots)
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            d_audio: 16,
            d_video: 12,
            rope_base: 10_000.0,
            mlp_ratio: 4,
            relative_frequencies: 16,
            clock: RopeClock::Audio,
        }
    }
}

impl BackboneConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.depth == 0 || self.heads == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return Err(BackboneError::InvalidConfig("depth, heads, width and mlp_ratio must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(BackboneError::InvalidConfig(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !self.head_width().is_multiple_of(2) {
            return Err(BackboneError::OddHeadWidth(self.head_width()));
        }
        if !self.width.is_multiple_of(2) {
            return Err(BackboneError::InvalidConfig("width must be even".into()));
        }
        if self.d_audio == 0 || self.d_video == 0 {
            return Err(BackboneError::InvalidConfig("latent widths must be positive".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(BackboneError::InvalidConfig("rope_base must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t`: `[sin(t·ω_k)…, cos(t·ω_k)…]` with `ω_k`
/// geometric from 1 to 1000.
pub fn timestep_embed(t: f64, width: usize) -> Vec<f64> {
    assert!(width.is_multiple_of(2) && width > 0, "timestep width must be even");
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            1000f64.powf(frac)
        })
        .collect();
    freqs
        .iter()
        .map(|w| (t * w).sin())
        .chain(freqs.iter().map(|w| (t * w).cos()))
        .collect()
}

/// Rotates consecutive pairs of each row by `position·θ_k`.
pub fn rope_rotate(x: &Matrix, positions: &[usize], base: f64) -> Result<Matrix, BackboneError> {
    if !x.cols().is_multiple_of(2) {
        return Err(BackboneError::OddHeadWidth(x.cols()));
    }
    if positions.len() != x.rows() {
        return Err(BackboneError::ShapeMismatch(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let pos: Vec<Option<usize>> = positions.iter().copied().map(Some).collect();
    Ok(RopeTable::new(&pos, x.cols(), base).apply(x, false))
}

/// `n × 2F` features `[cos(πk·u), sin(πk·u)]`, `k = 1..=F`, at `u = (i + ½)/n`.
pub fn relative_features(n: usize, frequencies: usize) -> Matrix {
    Matrix::from_fn(n, 2 * frequencies, |i, c| {
        let u = (i as f64 + 0.5) / n as f64;
        let k = (c / 2 + 1) as f64;
        let a = std::f64::consts::PI * k * u;
        if c % 2 == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityPrediction {
    pub v_audio: Matrix,
    pub v_video: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    ln_attn: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// Indices into the token-type table.
const TYPE_AUDIO: usize = 0;
const TYPE_VIDEO: usize = 1;
const TYPE_TEXT: usize = 2;
const TYPE_PHONEME: usize = 3;
const TYPE_IMAGE: usize = 4;
const TYPE_REFAUDIO: usize = 5;
const TOKEN_TYPES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    audio_in: Linear,
    video_in: Linear,
    relative: Linear,
    token_types: ParamId,
    time: Mlp,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    audio_out: Linear,
    video_out: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: BackboneConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        let d = config.width;
        let residual_gain = 1.0 / (2.0 * config.depth as f64).sqrt();
        let audio_in = Linear::new(store, rng, "backbone.audio_in", config.d_audio, d, 1.0, true);
        let video_in = Linear::new(store, rng, "backbone.video_in", config.d_video, d, 1.0, true);
        let relative = Linear::new(store, rng, "backbone.relative", 2 * config.relative_frequencies, d, 1.0, false);
        let token_types = store.add("backbone.token_types", normal_matrix(rng, TOKEN_TYPES, d, 0.02));
        let time = Mlp::new(store, rng, "backbone.time", d, d, d, 1.0);
        let blocks = (0..config.depth)
            .map(|i| {
                let name = format!("backbone.block{i}");
                Block {
                    ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
                    qkv: Linear::new(store, rng, &format!("{name}.qkv"), d, 3 * d, 1.0, true),
                    proj: Linear::new(store, rng, &format!("{name}.proj"), d, d, residual_gain, true),
                    ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
                    mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, config.mlp_ratio * d, d, residual_gain),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, "backbone.ln_out", d);
        let audio_out = Linear::new(store, rng, "backbone.audio_out", d, config.d_audio, 0.5, true);
        let video_out = Linear::new(store, rng, "backbone.video_out", d, config.d_video, 0.5, true);
        Ok(Self {
            config,
            audio_in,
            video_in,
            relative,
            token_types,
            time,
            blocks,
            ln_out,
            audio_out,
            video_out,
        })
    }

    fn check(&self, audio: (usize, usize), video: (usize, usize), width: usize) -> Result<(), BackboneError> {
        let c = &self.config;
        if audio.1 != c.d_audio || video.1 != c.d_video || audio.0 == 0 || video.0 == 0 {
            return Err(BackboneError::ShapeMismatch(format!(
                "latents {}×{} / {}×{} for a model expecting ·×{} / ·×{}",
                audio.0, audio.1, video.0, video.1, c.d_audio, c.d_video
            )));
        }
        if width != c.width {
            return Err(BackboneError::ShapeMismatch(format!(
                "condition width {width} vs model width {}",
                c.width
            )));
        }
        Ok(())
    }

    fn typed(&self, tape: &mut Tape<'_>, x: Var, kind: usize) -> Var {
        let table = tape.param(self.token_types);
        let row = tape.gather(table, &[kind]);
        tape.add_row(x, row)
    }

    fn with_relative(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let n = tape.shape(x).0;
        if n == 0 {
            return x;
        }
        let f = tape.constant(relative_features(n, self.config.relative_frequencies));
        let r = self.relative.forward(tape, f);
        tape.add(x, r)
    }

    /// Velocity on the tape; returns `(v_audio, v_video)`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        audio: Var,
        video: Var,
        t: f64,
        cond: &ConditionVars,
    ) -> Result<(Var, Var), BackboneError> {
        let (t_a, t_v) = (tape.shape(audio).0, tape.shape(video).0);
        self.check(tape.shape(audio), tape.shape(video), tape.shape(cond.text).1)?;
        for v in [cond.phoneme, cond.image, cond.refaudio] {
            if tape.shape(v).1 != self.config.width {
                return Err(BackboneError::ShapeMismatch("condition grids differ in width".into()));
            }
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(BackboneError::ShapeMismatch(format!("t = {t} outside [0, 1]")));
        }

        let a = self.audio_in.forward(tape, audio);
        let a = self.with_relative(tape, a);
        let a = self.typed(tape, a, TYPE_AUDIO);
        let v = self.video_in.forward(tape, video);
        let v = self.with_relative(tape, v);
        let v = self.typed(tape, v, TYPE_VIDEO);
        let text = self.typed(tape, cond.text, TYPE_TEXT);
        let phoneme = if phonemes_present(cond.mask) {
            self.with_relative(tape, cond.phoneme)
        } else {
            cond.phoneme
        };
        let phoneme = self.typed(tape, phoneme, TYPE_PHONEME);
        let image = self.typed(tape, cond.image, TYPE_IMAGE);
        let refaudio = self.typed(tape, cond.refaudio, TYPE_REFAUDIO);
        let x = tape.concat_rows(&[a, v, text, phoneme, image, refaudio]);
        let n = tape.shape(x).0;

        let temb = tape.constant(Matrix::row_vector(&timestep_embed(t, self.config.width)));
        let temb = self.time.forward(tape, temb);
        let mut x = tape.add_row(x, temb);

        let n_text = tape.shape(cond.text).0;
        let n_phon = tape.shape(cond.phoneme).0;
        let shared = self.config.clock == RopeClock::Audio;
        let phonemes_on_clock = shared && phonemes_present(cond.mask);
        let positions: Vec<Option<usize>> = (0..t_a)
            .map(Some)
            .chain((0..t_v).map(|j| Some(if shared { audio_clock_position(j, t_v, t_a) } else { j })))
            .chain(std::iter::repeat_n(None, n_text))
            .chain((0..n_phon).map(|k| phonemes_on_clock.then(|| audio_clock_position(k, n_phon, t_a))))
            .chain(std::iter::repeat_n(None, n - t_a - t_v - n_text - n_phon))
            .collect();
        let table = RopeTable::new(&positions, self.config.head_width(), self.config.rope_base);
        let d = self.config.width;
        let dh = self.config.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        for block in &self.blocks {
            let h = block.ln_attn.forward(tape, x);
            let qkv = block.qkv.forward(tape, h);
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, d);
            let val = tape.slice_cols(qkv, 2 * d, d);
            let q = tape.rope(q, table.clone());
            let k = tape.rope(k, table.clone());
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(val, hd * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, scale);
                let p = tape.softmax_rows(s);
                heads.push(tape.matmul(p, vh));
            }
            let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let att = block.proj.forward(tape, att);
            x = tape.add(x, att);
            let h = block.ln_mlp.forward(tape, x);
            let m = block.mlp.forward(tape, h);
            x = tape.add(x, m);
        }
        let x = self.ln_out.forward(tape, x);
        let xa = tape.slice_rows(x, 0, t_a);
        let xv = tape.slice_rows(x, t_a, t_v);
        Ok((self.audio_out.forward(tape, xa), self.video_out.forward(tape, xv)))
    }

    /// Evaluates the velocity for plain matrices.
    pub fn predict(
        &self,
        store: &ParamStore,
        audio: &Matrix,
        video: &Matrix,
        t: f64,
        cond: &ConditionSet,
    ) -> Result<VelocityPrediction, BackboneError> {
        let mut tape = Tape::new(store);
        let vars = condition_constants(&mut tape, cond);
        let a = tape.constant(audio.clone());
        let v = tape.constant(video.clone());
        let (va, vv) = self.forward(&mut tape, a, v, t, &vars)?;
        Ok(VelocityPrediction {
            v_audio: tape.value(va).clone(),
            v_video: tape.value(vv).clone(),
        })
    }

    /// Independent evaluation of each input.
    pub fn predict_batch(
        &self,
        store: &ParamStore,
        inputs: &[(&Matrix, &Matrix, f64, &ConditionSet)],
    ) -> Result<Vec<VelocityPrediction>, BackboneError> {
        inputs
            .iter()
            .map(|(a, v, t, c)| self.predict(store, a, v, *t, c))
            .collect()
    }
}

fn phonemes_present(mask: MaskFlags) -> bool {
    !(mask.text_dropped || mask.full_drop)
}

/// Puts a condition set on the tape as constants.
pub fn condition_constants(tape: &mut Tape<'_>, cond: &ConditionSet) -> ConditionVars {
    ConditionVars {
        text: tape.constant(cond.text_emb.clone()),
        phoneme: tape.constant(cond.phoneme_emb.clone()),
        image: tape.constant(cond.image_emb.clone()),
        refaudio: tape.constant(cond.refaudio_emb.clone()),
        mask: cond.mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ConditionInputs, Conditioner, Task};
    use crate::instruction::SpeakerTag;
    use crate::rng::seeded;
    use crate::speaker::SpeakerEmbedding;
    use proptest::prelude::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            width: 16,
            heads: 2,
            d_audio: 4,
            d_video: 3,
            relative_frequencies: 4,
            ..BackboneConfig::default()
        }
    }

    fn setup() -> (ParamStore, Conditioner, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = seeded(5);
        let cond = Conditioner::new(&mut store, &mut rng, 16, 12, 27, 3, 16);
        let bb = Backbone::new(&mut store, &mut rng, small()).unwrap();
        (store, cond, bb)
    }

    fn inputs(phonemes: Vec<usize>) -> ConditionInputs {
        ConditionInputs {
            caption_tokens: vec![1, 2],
            segments: vec![(SpeakerTag::S0, phonemes)],
            speakers: vec![SpeakerEmbedding::from_values((0..16).map(|i| (i as f64).cos()).collect())],
            image: Some(vec![0.3, -0.1, 0.2]),
        }
    }

    #[test]
    fn timestep_embedding_examples() {
        let e = timestep_embed(0.0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(timestep_embed(0.3, 8), timestep_embed(0.3, 8));
        assert_ne!(timestep_embed(0.3, 8), timestep_embed(0.7, 8));
    }

    #[test]
    fn rope_examples() {
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 2.0, 0.5]]);
        assert_eq!(rope_rotate(&x, &[0], 10_000.0).unwrap(), x);
        assert!(matches!(
            rope_rotate(&Matrix::zeros(1, 3), &[0], 10.0),
            Err(BackboneError::OddHeadWidth(3))
        ));
    }

    #[test]
    fn rope_quarter_turn() {
        // θ_1 = base^(-1/2) = π/2
        let base = (2.0 / std::f64::consts::PI).powi(2);
        let x = Matrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]);
        let r = rope_rotate(&x, &[1], base).unwrap();
        assert!(r.get(0, 2).abs() < 1e-6 && (r.get(0, 3) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rope_shift_invariance() {
        let mut rng = seeded(3);
        for _ in 0..100 {
            let q = normal_matrix(&mut rng, 1, 8, 1.0);
            let k = normal_matrix(&mut rng, 1, 8, 1.0);
            use rand::Rng as _;
            let (m, n, s) = (rng.random_range(0..50), rng.random_range(0..50), rng.random_range(0..50));
            let dot = |a: &Matrix, b: &Matrix| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>();
            let base = dot(&rope_rotate(&q, &[m], 100.0).unwrap(), &rope_rotate(&k, &[n], 100.0).unwrap());
            let shifted = dot(&rope_rotate(&q, &[m + s], 100.0).unwrap(), &rope_rotate(&k, &[n + s], 100.0).unwrap());
            assert!((base - shifted).abs() < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let odd = BackboneConfig {
            width: 12,
            heads: 4,
            ..small()
        };
        assert_eq!(odd.validate(), Err(BackboneError::OddHeadWidth(3)));
        let uneven = BackboneConfig { heads: 3, ..small() };
        assert!(matches!(uneven.validate(), Err(BackboneError::InvalidConfig(_))));
    }

    #[test]
    fn shapes_mirror_inputs_for_every_task() {
        let (store, cond, bb) = setup();
        let audio = normal_matrix(&mut seeded(1), 9, 4, 1.0);
        let video = normal_matrix(&mut seeded(2), 2, 3, 1.0);
        for task in Task::ALL {
            let set = cond.condition_set(&store, &inputs(vec![3, 4, 5]), task.mask()).unwrap();
            let out = bb.predict(&store, &audio, &video, 0.4, &set).unwrap();
            assert_eq!(out.v_audio.shape(), (9, 4));
            assert_eq!(out.v_video.shape(), (2, 3));
            assert!(out.v_audio.all_finite() && out.v_video.all_finite());
        }
        let set = cond.condition_set(&store, &inputs(vec![3]), Task::T2VA.mask()).unwrap();
        assert!(matches!(
            bb.predict(&store, &Matrix::zeros(9, 5), &video, 0.4, &set),
            Err(BackboneError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sensitive_to_phonemes_and_order() {
        let (store, cond, bb) = setup();
        let audio = normal_matrix(&mut seeded(1), 9, 4, 1.0);
        let video = normal_matrix(&mut seeded(2), 2, 3, 1.0);
        let a = cond.condition_set(&store, &inputs(vec![3, 4, 5]), Task::TA2VA.mask()).unwrap();
        let b = cond.condition_set(&store, &inputs(vec![3, 7, 5]), Task::TA2VA.mask()).unwrap();
        let pa = bb.predict(&store, &audio, &video, 0.5, &a).unwrap();
        let pb = bb.predict(&store, &audio, &video, 0.5, &b).unwrap();
        assert!(pa.v_audio.max_abs_diff(&pb.v_audio) > 0.0);

        let mut rows: Vec<Vec<f64>> = (0..9).map(|r| audio.row(r).to_vec()).collect();
        rows.reverse();
        let permuted = Matrix::from_rows(&rows);
        let pp = bb.predict(&store, &permuted, &video, 0.5, &a).unwrap();
        let mut back: Vec<Vec<f64>> = (0..9).map(|r| pp.v_audio.row(r).to_vec()).collect();
        back.reverse();
        assert!(Matrix::from_rows(&back).max_abs_diff(&pa.v_audio) > 0.0);
        assert!(pa.v_audio.bit_eq(&bb.predict(&store, &audio, &video, 0.5, &a).unwrap().v_audio));
    }

    #[test]
    fn audio_clock_positions() {
        assert_eq!(audio_clock_position(0, 6, 86), 7);
        assert_eq!(audio_clock_position(5, 6, 86), 78);
        assert_eq!(audio_clock_position(0, 1, 9), 4);
        assert_eq!((0..9).map(|k| audio_clock_position(k, 9, 9)).collect::<Vec<_>>(), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn clock_choice_changes_attention() {
        let (store, cond, bb) = setup();
        let per_modality = Backbone {
            config: BackboneConfig {
                clock: RopeClock::PerModality,
                ..small()
            },
            ..bb.clone()
        };
        let audio = normal_matrix(&mut seeded(1), 9, 4, 1.0);
        let video = normal_matrix(&mut seeded(2), 3, 3, 1.0);
        let set = cond.condition_set(&store, &inputs(vec![3, 4, 5]), Task::T2VA.mask()).unwrap();
        let shared = bb.predict(&store, &audio, &video, 0.5, &set).unwrap();
        let separate = per_modality.predict(&store, &audio, &video, 0.5, &set).unwrap();
        assert!(shared.v_video.max_abs_diff(&separate.v_video) > 0.0);
        assert!(shared.v_audio.max_abs_diff(&separate.v_audio) > 0.0);
    }

    #[test]
    fn batch_matches_single() {
        let (store, cond, bb) = setup();
        let a1 = normal_matrix(&mut seeded(1), 9, 4, 1.0);
        let v1 = normal_matrix(&mut seeded(2), 2, 3, 1.0);
        let a2 = normal_matrix(&mut seeded(3), 5, 4, 1.0);
        let v2 = normal_matrix(&mut seeded(4), 1, 3, 1.0);
        let c1 = cond.condition_set(&store, &inputs(vec![3, 4]), Task::TIA2VA.mask()).unwrap();
        let c2 = cond.condition_set(&store, &inputs(vec![9]), Task::T2VA.mask()).unwrap();
        let batch = bb
            .predict_batch(&store, &[(&a1, &v1, 0.2, &c1), (&a2, &v2, 0.9, &c2)])
            .unwrap();
        let s1 = bb.predict(&store, &a1, &v1, 0.2, &c1).unwrap();
        let s2 = bb.predict(&store, &a2, &v2, 0.9, &c2).unwrap();
        assert!(batch[0].v_audio.max_abs_diff(&s1.v_audio) < 1e-6);
        assert!(batch[1].v_video.max_abs_diff(&s2.v_video) < 1e-6);
    }

    proptest! {
        #[test]
        fn output_shapes(t_a in 1usize..12, t_v in 1usize..4, l in 1usize..6, t in 0.0f64..=1.0) {
            let (store, cond, bb) = setup();
            let audio = normal_matrix(&mut seeded(t_a as u64), t_a, 4, 1.0);
            let video = normal_matrix(&mut seeded(t_v as u64), t_v, 3, 1.0);
            let set = cond.condition_set(&store, &inputs((0..l).collect()), Task::TIA2VA.mask()).unwrap();
            let out = bb.predict(&store, &audio, &video, t, &set).unwrap();
            prop_assert_eq!(out.v_audio.shape(), (t_a, 4));
            prop_assert_eq!(out.v_video.shape(), (t_v, 3));
        }
    }
}
