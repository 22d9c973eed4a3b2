//! Conditioning streams: caption embeddings, phoneme embeddings with timbre
//! and speaker-ID injection, reference image and reference audio tokens, and
//! placeholder substitution under stochastic modality masking.
//!
//! The free functions ([`inject_timbre`], [`assemble_dialogue`],
//! [`apply_conditions`]) define the semantics on plain matrices. The
//! [`Conditioner`] builds the same grids on an autodiff tape so the embedding
//! tables train together with the backbone.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::instruction::SpeakerTag;
use crate::nn::Linear;
use crate::rng::{normal_matrix, Rng};
use crate::speaker::SpeakerEmbedding;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConditioningError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("at most two dialogue speakers are supported, got {0}")]
    SegmentCountExceeded(usize),
    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),
    #[error("token id {id} outside table of {rows} rows")]
    TokenOutOfRange { id: usize, rows: usize },
}

/// Probabilities of masking each optional modality during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityMaskPolicy {
    pub p_image: f64,
    pub p_refaudio: f64,
    pub p_full_drop: f64,
}

impl Default for ModalityMaskPolicy {
    fn default() -> Self {
        Self {
            p_image: 0.5,
            p_refaudio: 0.5,
            p_full_drop: 0.10,
        }
    }
}

impl ModalityMaskPolicy {
    pub fn validate(&self) -> Result<(), ConditioningError> {
        for (name, p) in [
            ("p_image", self.p_image),
            ("p_refaudio", self.p_refaudio),
            ("p_full_drop", self.p_full_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConditioningError::InvalidPolicy(format!("{name} = {p} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskFlags {
    pub text_dropped: bool,
    pub image_masked: bool,
    pub audio_masked: bool,
    pub full_drop: bool,
}

/// The four generation tasks realized by one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// text only
    T2VA,
    /// text + reference image
    TI2VA,
    /// text + reference audio
    TA2VA,
    /// text + image + audio
    TIA2VA,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::T2VA, Task::TI2VA, Task::TA2VA, Task::TIA2VA];

    pub fn mask(self) -> MaskFlags {
        let (image_masked, audio_masked) = match self {
            Task::T2VA => (true, true),
            Task::TI2VA => (false, true),
            Task::TA2VA => (true, false),
            Task::TIA2VA => (false, false),
        };
        MaskFlags {
            image_masked,
            audio_masked,
            ..MaskFlags::default()
        }
    }
}

impl MaskFlags {
    /// Everything replaced by placeholders: the unconditional branch.
    pub fn unconditional() -> Self {
        Self {
            text_dropped: true,
            image_masked: true,
            audio_masked: true,
            full_drop: true,
        }
    }

    /// `None` under a full drop.
    pub fn task(&self) -> Option<Task> {
        if self.full_drop {
            return None;
        }
        Some(match (self.image_masked, self.audio_masked) {
            (true, true) => Task::T2VA,
            (false, true) => Task::TI2VA,
            (true, false) => Task::TA2VA,
            (false, false) => Task::TIA2VA,
        })
    }
}

/// Draws image, reference-audio and full-drop flags independently; a full
/// drop overrides everything to masked.
pub fn sample_modality_mask(policy: &ModalityMaskPolicy, rng: &mut Rng) -> MaskFlags {
    let image_masked = rng.random_bool(policy.p_image.clamp(0.0, 1.0));
    let audio_masked = rng.random_bool(policy.p_refaudio.clamp(0.0, 1.0));
    let full_drop = rng.random_bool(policy.p_full_drop.clamp(0.0, 1.0));
    if full_drop {
        MaskFlags::unconditional()
    } else {
        MaskFlags {
            text_dropped: false,
            image_masked,
            audio_masked,
            full_drop: false,
        }
    }
}

/// Row `l` of the result is `P_l + S + I`.
pub fn inject_timbre(phonemes: &Matrix, speaker: &[f64], id: &[f64]) -> Result<Matrix, ConditioningError> {
    let d = phonemes.cols();
    if speaker.len() != d || id.len() != d {
        return Err(ConditioningError::ShapeMismatch(format!(
            "phoneme width {d}, speaker width {}, id width {}",
            speaker.len(),
            id.len()
        )));
    }
    let offset: Vec<f64> = speaker.iter().zip(id).map(|(s, i)| s + i).collect();
    let mut out = phonemes.clone();
    for r in 0..out.rows() {
        for (a, o) in out.row_mut(r).iter_mut().zip(&offset) {
            *a += o;
        }
    }
    Ok(out)
}

/// Per-segment timbre injection followed by temporal concatenation in
/// segment order. `speakers` is indexed by tag; `ids` holds `I_0` and `I_1`
/// as rows. ID rows are added even when the speaker embedding is zero.
pub fn assemble_dialogue(
    segments: &[(SpeakerTag, Matrix)],
    speakers: &[SpeakerEmbedding],
    ids: &Matrix,
) -> Result<Matrix, ConditioningError> {
    if speakers.len() > 2 {
        return Err(ConditioningError::SegmentCountExceeded(speakers.len()));
    }
    if ids.rows() != 2 {
        return Err(ConditioningError::ShapeMismatch(format!("{} id rows, expected 2", ids.rows())));
    }
    let mut parts = Vec::with_capacity(segments.len());
    for (tag, p) in segments {
        let speaker = speakers.get(tag.index()).ok_or_else(|| {
            ConditioningError::ShapeMismatch(format!("no speaker embedding for {tag}"))
        })?;
        parts.push(inject_timbre(p, speaker.values(), ids.row(tag.index()))?);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(if refs.is_empty() {
        Matrix::zeros(0, ids.cols())
    } else {
        Matrix::concat_rows(&refs)
    })
}

/// Condition grids before masking.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbeddings {
    pub text: Matrix,
    pub phoneme: Matrix,
    pub image: Matrix,
    pub refaudio: Matrix,
}

/// One learnable row per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Placeholders {
    pub text: Vec<f64>,
    pub phoneme: Vec<f64>,
    pub image: Vec<f64>,
    pub refaudio: Vec<f64>,
}

/// Nominal row count of a masked modality's grid.
pub const PLACEHOLDER_ROWS: usize = 1;

/// The active conditioning subset, every grid `D` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub text_emb: Matrix,
    pub phoneme_emb: Matrix,
    pub image_emb: Matrix,
    pub refaudio_emb: Matrix,
    pub mask: MaskFlags,
}

impl ConditionSet {
    pub fn width(&self) -> usize {
        self.text_emb.cols()
    }

    pub fn grids(&self) -> [&Matrix; 4] {
        [&self.text_emb, &self.phoneme_emb, &self.image_emb, &self.refaudio_emb]
    }

    pub fn token_count(&self) -> usize {
        self.grids().iter().map(|g| g.rows()).sum()
    }
}

fn broadcast(row: &[f64], n: usize) -> Matrix {
    Matrix::from_fn(n, row.len(), |_, c| row[c])
}

/// Replaces masked modalities by their placeholder row; unmasked grids pass through.
pub fn apply_conditions(emb: ConditionEmbeddings, mask: MaskFlags, placeholders: &Placeholders) -> ConditionSet {
    let full = mask.full_drop;
    let pick = |grid: Matrix, masked: bool, row: &[f64]| {
        if masked || full {
            broadcast(row, PLACEHOLDER_ROWS)
        } else {
            grid
        }
    };
    ConditionSet {
        text_emb: pick(emb.text, mask.text_dropped, &placeholders.text),
        phoneme_emb: pick(emb.phoneme, mask.text_dropped, &placeholders.phoneme),
        image_emb: pick(emb.image, mask.image_masked, &placeholders.image),
        refaudio_emb: pick(emb.refaudio, mask.audio_masked, &placeholders.refaudio),
        mask,
    }
}

/// Raw, unembedded conditioning for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInputs {
    /// Rows of the caption table (see [`crate::instruction::Vocab::table_index`]).
    pub caption_tokens: Vec<usize>,
    pub segments: Vec<(SpeakerTag, Vec<usize>)>,
    /// Speaker embeddings indexed by tag; empty when no reference audio exists.
    pub speakers: Vec<SpeakerEmbedding>,
    /// First video frame, `d_video` wide.
    pub image: Option<Vec<f64>>,
}

impl ConditionInputs {
    /// Mask with the unavailable modalities forced on.
    pub fn available_mask(&self, requested: MaskFlags) -> MaskFlags {
        if requested.full_drop {
            return requested;
        }
        MaskFlags {
            image_masked: requested.image_masked || self.image.is_none(),
            audio_masked: requested.audio_masked || self.speakers.is_empty(),
            ..requested
        }
    }

    pub fn phoneme_count(&self) -> usize {
        self.segments.iter().map(|(_, p)| p.len()).sum()
    }
}

/// Tape handles for a condition set, in backbone token order.
#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub text: Var,
    pub phoneme: Var,
    pub image: Var,
    pub refaudio: Var,
    pub mask: MaskFlags,
}

/// Learnable conditioning tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioner {
    pub width: usize,
    pub caption_table: ParamId,
    pub phoneme_table: ParamId,
    /// `I_0`, `I_1`
    pub speaker_ids: [ParamId; 2],
    pub placeholder_text: ParamId,
    pub placeholder_phoneme: ParamId,
    pub placeholder_image: ParamId,
    pub placeholder_refaudio: ParamId,
    pub image_proj: Linear,
    /// Fixed map from the speaker-encoder width to `width`, when they differ.
    pub speaker_projection: Option<Matrix>,
}

/// Standard deviation of the speaker-ID embedding initialization.
pub const ID_INIT_STD: f64 = 0.02;

impl Conditioner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        width: usize,
        caption_rows: usize,
        phoneme_rows: usize,
        d_video: usize,
        speaker_width: usize,
    ) -> Self {
        let caption_table = store.add("cond.caption_table", normal_matrix(rng, caption_rows, width, 0.5));
        let phoneme_table = store.add("cond.phoneme_table", normal_matrix(rng, phoneme_rows, width, 0.5));
        let speaker_ids = [
            store.add("cond.id0", normal_matrix(rng, 1, width, ID_INIT_STD)),
            store.add("cond.id1", normal_matrix(rng, 1, width, ID_INIT_STD)),
        ];
        let mut placeholder = |name: &str, rng: &mut Rng| store.add(name, normal_matrix(rng, 1, width, 0.5));
        let placeholder_text = placeholder("cond.placeholder.text", rng);
        let placeholder_phoneme = placeholder("cond.placeholder.phoneme", rng);
        let placeholder_image = placeholder("cond.placeholder.image", rng);
        let placeholder_refaudio = placeholder("cond.placeholder.refaudio", rng);
        let image_proj = Linear::new(store, rng, "cond.image_proj", d_video, width, 1.0, true);
        let speaker_projection = (speaker_width != width)
            .then(|| normal_matrix(rng, speaker_width, width, 1.0 / (speaker_width as f64).sqrt()));
        Self {
            width,
            caption_table,
            phoneme_table,
            speaker_ids,
            placeholder_text,
            placeholder_phoneme,
            placeholder_image,
            placeholder_refaudio,
            image_proj,
            speaker_projection,
        }
    }

    /// Speaker embedding at backbone width (zero stays zero).
    pub fn project_speaker(&self, s: &SpeakerEmbedding) -> Result<Vec<f64>, ConditioningError> {
        match &self.speaker_projection {
            None if s.width() == self.width => Ok(s.values().to_vec()),
            Some(p) if p.rows() == s.width() => Ok(Matrix::row_vector(s.values()).matmul(p).into_vec()),
            _ => Err(ConditioningError::ShapeMismatch(format!(
                "speaker width {} cannot be reconciled with {}",
                s.width(),
                self.width
            ))),
        }
    }

    pub fn placeholders(&self, store: &ParamStore) -> Placeholders {
        Placeholders {
            text: store.get(self.placeholder_text).as_slice().to_vec(),
            phoneme: store.get(self.placeholder_phoneme).as_slice().to_vec(),
            image: store.get(self.placeholder_image).as_slice().to_vec(),
            refaudio: store.get(self.placeholder_refaudio).as_slice().to_vec(),
        }
    }

    pub fn id_rows(&self, store: &ParamStore) -> Matrix {
        Matrix::concat_rows(&[store.get(self.speaker_ids[0]), store.get(self.speaker_ids[1])])
    }

    fn check_ids(ids: &[usize], rows: usize) -> Result<(), ConditioningError> {
        match ids.iter().find(|&&id| id >= rows) {
            Some(&id) => Err(ConditioningError::TokenOutOfRange { id, rows }),
            None => Ok(()),
        }
    }

    /// Builds the condition grids on `tape`. Unavailable modalities are
    /// masked regardless of `mask`.
    pub fn build(
        &self,
        tape: &mut Tape<'_>,
        inputs: &ConditionInputs,
        mask: MaskFlags,
    ) -> Result<ConditionVars, ConditioningError> {
        let mask = inputs.available_mask(mask);
        let store = tape.store();
        if inputs.speakers.len() > 2 {
            return Err(ConditioningError::SegmentCountExceeded(inputs.speakers.len()));
        }
        let text = if mask.text_dropped || mask.full_drop {
            tape.param(self.placeholder_text)
        } else {
            Self::check_ids(&inputs.caption_tokens, store.get(self.caption_table).rows())?;
            let table = tape.param(self.caption_table);
            tape.gather(table, &inputs.caption_tokens)
        };

        let phoneme = if mask.text_dropped || mask.full_drop {
            tape.param(self.placeholder_phoneme)
        } else {
            let rows = store.get(self.phoneme_table).rows();
            let table = tape.param(self.phoneme_table);
            let mut parts = Vec::with_capacity(inputs.segments.len());
            for (tag, ids) in &inputs.segments {
                Self::check_ids(ids, rows)?;
                let p = tape.gather(table, ids);
                let id_row = tape.param(self.speaker_ids[tag.index()]);
                let p = tape.add_row(p, id_row);
                let p = if mask.audio_masked {
                    p
                } else {
                    let s = inputs.speakers.get(tag.index()).ok_or_else(|| {
                        ConditioningError::ShapeMismatch(format!("no speaker embedding for {tag}"))
                    })?;
                    let s = tape.constant(Matrix::row_vector(&self.project_speaker(s)?));
                    tape.add_row(p, s)
                };
                parts.push(p);
            }
            if parts.is_empty() {
                tape.constant(Matrix::zeros(0, self.width))
            } else {
                tape.concat_rows(&parts)
            }
        };

        let image = match (&inputs.image, mask.image_masked) {
            (Some(frame), false) => {
                let x = tape.constant(Matrix::row_vector(frame));
                self.image_proj.forward(tape, x)
            }
            _ => tape.param(self.placeholder_image),
        };

        let refaudio = if mask.audio_masked {
            tape.param(self.placeholder_refaudio)
        } else {
            let mut rows = Vec::with_capacity(inputs.speakers.len());
            for (i, s) in inputs.speakers.iter().enumerate() {
                let s = tape.constant(Matrix::row_vector(&self.project_speaker(s)?));
                let id_row = tape.param(self.speaker_ids[i]);
                rows.push(tape.add(s, id_row));
            }
            tape.concat_rows(&rows)
        };

        Ok(ConditionVars {
            text,
            phoneme,
            image,
            refaudio,
            mask,
        })
    }

    /// Evaluates [`Conditioner::build`] into plain matrices.
    pub fn condition_set(
        &self,
        store: &ParamStore,
        inputs: &ConditionInputs,
        mask: MaskFlags,
    ) -> Result<ConditionSet, ConditioningError> {
        let mut tape = Tape::new(store);
        let vars = self.build(&mut tape, inputs, mask)?;
        Ok(ConditionSet {
            text_emb: tape.value(vars.text).clone(),
            phoneme_emb: tape.value(vars.phoneme).clone(),
            image_emb: tape.value(vars.image).clone(),
            refaudio_emb: tape.value(vars.refaudio).clone(),
            mask: vars.mask,
        })
    }

    /// The unconditional branch with a chosen negative speaker embedding.
    /// With the zero sentinel this is exactly the full-drop condition set.
    pub fn negative_condition_set(
        &self,
        store: &ParamStore,
        negative: &SpeakerEmbedding,
    ) -> Result<ConditionSet, ConditioningError> {
        let ph = self.placeholders(store);
        let mut set = apply_conditions(
            ConditionEmbeddings {
                text: Matrix::zeros(0, self.width),
                phoneme: Matrix::zeros(0, self.width),
                image: Matrix::zeros(0, self.width),
                refaudio: Matrix::zeros(0, self.width),
            },
            MaskFlags::unconditional(),
            &ph,
        );
        if !negative.is_zero_sentinel() {
            let s = self.project_speaker(negative)?;
            let zero = vec![0.0; self.width];
            set.phoneme_emb = inject_timbre(&set.phoneme_emb, &s, &zero)?;
            set.refaudio_emb = Matrix::row_vector(&s);
        }
        Ok(set)
    }
}
