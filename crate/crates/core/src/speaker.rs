//! Speaker encoder, negative speaker embeddings and cosine verification.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape};
use crate::nn::{Linear, Optimizer, OptimizerKind};
use crate::rng::{normal_matrix, Rng};
use crate::tensor::Matrix;
use crate::world::WorldSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpeakerError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty input grid")]
    EmptyInput,
    #[error("the natural strategy needs a noise source")]
    MissingNoiseSource,
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown negative strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid gaussian levels: {0}")]
    InvalidLevels(String),
}

/// Global timbre vector. Unit norm, except for the zero sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    values: Vec<f64>,
    zero_sentinel: bool,
}

impl SpeakerEmbedding {
    /// The all-zeros vector used where no reference voice exists.
    pub fn zero(width: usize) -> Self {
        Self {
            values: vec![0.0; width],
            zero_sentinel: true,
        }
    }

    /// Normalizes `values` to unit norm; an all-zero input becomes the sentinel.
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Self::zero(values.len());
        }
        Self {
            values: values.into_iter().map(|v| v / n).collect(),
            zero_sentinel: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero_sentinel(&self) -> bool {
        self.zero_sentinel
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, SpeakerError> {
    if a.len() != b.len() {
        return Err(SpeakerError::ShapeMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SpeakerError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    /// Multiplier on the cosine logits of the classifier head.
    pub logit_scale: f64,
    /// Fraction of each speaker's clips held out for the accuracy report.
    pub holdout_fraction: f64,
}

impl Default for SpeakerTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 400,
            lr: 0.01,
            logit_scale: 10.0,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTrainReport {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub n_train: usize,
    pub n_holdout: usize,
}

/// Mean-pool over time, then a two-layer MLP to a unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEncoder {
    pub store: ParamStore,
    pub input_width: usize,
    pub width: usize,
    hidden: Linear,
    out: Linear,
}

impl SpeakerEncoder {
    pub fn new(rng: &mut Rng, input_width: usize, hidden: usize, width: usize) -> Self {
        let mut store = ParamStore::new();
        let h = Linear::new(&mut store, rng, "speaker.hidden", input_width, hidden, 1.0, true);
        let out = Linear::new(&mut store, rng, "speaker.out", hidden, width, 1.0, true);
        Self {
            store,
            input_width,
            width,
            hidden: h,
            out,
        }
    }

    fn pooled(&self, grid: &Matrix) -> Result<Matrix, SpeakerError> {
        if grid.rows() == 0 {
            return Err(SpeakerError::EmptyInput);
        }
        if grid.cols() != self.input_width {
            return Err(SpeakerError::ShapeMismatch(format!(
                "grid width {} vs encoder input {}",
                grid.cols(),
                self.input_width
            )));
        }
        Ok(Matrix::row_vector(&grid.mean_rows()))
    }

    /// Raw (unnormalized) embeddings for a batch of pooled rows.
    fn forward(&self, tape: &mut Tape<'_>, pooled: Matrix) -> crate::autodiff::Var {
        let x = tape.constant(pooled);
        let h = self.hidden.forward(tape, x);
        let h = tape.silu(h);
        self.out.forward(tape, h)
    }

    pub fn embed(&self, grid: &Matrix) -> Result<SpeakerEmbedding, SpeakerError> {
        let pooled = self.pooled(grid)?;
        let mut tape = Tape::new(&self.store);
        let e = self.forward(&mut tape, pooled);
        let mut values = tape.value(e).as_slice().to_vec();
        if values.iter().all(|v| *v == 0.0) {
            // keep the unit-norm contract for a degenerate output
            values[0] = 1.0;
        }
        Ok(SpeakerEmbedding::from_values(values))
    }
}

pub fn speaker_embed(encoder: &SpeakerEncoder, grid: &Matrix) -> Result<SpeakerEmbedding, SpeakerError> {
    encoder.embed(grid)
}

/// Trains on `(audio grid, speaker id)` pairs with a cosine classifier head that
/// is discarded afterwards.
pub fn train_speaker_encoder(
    data: &[(&Matrix, usize)],
    width: usize,
    config: &SpeakerTrainConfig,
    rng: &mut Rng,
) -> Result<(SpeakerEncoder, SpeakerTrainReport), SpeakerError> {
    let n_classes = data.iter().map(|(_, s)| s + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; n_classes];
    for (_, s) in data {
        counts[*s] += 1;
    }
    let present: Vec<usize> = (0..n_classes).filter(|&s| counts[s] > 0).collect();
    if present.len() < 2 {
        return Err(SpeakerError::InsufficientData(format!(
            "{} speaker(s); need at least 2",
            present.len()
        )));
    }
    if let Some(&s) = present.iter().find(|&&s| counts[s] < 10) {
        return Err(SpeakerError::InsufficientData(format!(
            "speaker {s} has {} clips; need at least 10",
            counts[s]
        )));
    }
    let input_width = data[0].0.cols();
    let mut encoder = SpeakerEncoder::new(rng, input_width, config.hidden, width);

    // hold out the last clips of each speaker
    let mut seen = vec![0usize; n_classes];
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (grid, s) in data {
        let keep_out = ((counts[*s] as f64) * config.holdout_fraction).floor() as usize;
        seen[*s] += 1;
        let pooled = encoder.pooled(grid)?;
        if seen[*s] > counts[*s] - keep_out {
            holdout.push((pooled, *s));
        } else {
            train.push((pooled, *s));
        }
    }
    let stack = |set: &[(Matrix, usize)]| -> (Matrix, Vec<usize>) {
        let rows: Vec<&Matrix> = set.iter().map(|(m, _)| m).collect();
        (Matrix::concat_rows(&rows), set.iter().map(|(_, s)| *s).collect())
    };
    let (x_train, y_train) = stack(&train);

    let base = encoder.store.len();
    let head = encoder
        .store
        .add("speaker.head", normal_matrix(rng, n_classes, width, 1.0 / (width as f64).sqrt()));
    let mut opt = Optimizer::new(OptimizerKind::adam(), config.lr);
    let logits_of = |enc: &SpeakerEncoder, tape: &mut Tape<'_>, x: &Matrix| {
        let e = enc.forward(tape, x.clone());
        let e = tape.l2_normalize_rows(e);
        let w = tape.param(head);
        let w = tape.l2_normalize_rows(w);
        let l = tape.matmul_t(e, w);
        tape.scale(l, config.logit_scale)
    };
    for _ in 0..config.steps {
        let grads = {
            let mut tape = Tape::new(&encoder.store);
            let logits = logits_of(&encoder, &mut tape, &x_train);
            let loss = tape.cross_entropy(logits, &y_train);
            tape.backward(loss)
        };
        opt.apply(&mut encoder.store, &grads);
    }
    let accuracy = |set: &[(Matrix, usize)]| -> f64 {
        if set.is_empty() {
            return f64::NAN;
        }
        let (x, y) = stack(set);
        let mut tape = Tape::new(&encoder.store);
        let logits = logits_of(&encoder, &mut tape, &x);
        let l = tape.value(logits);
        let hits = (0..l.rows())
            .filter(|&r| {
                let row = l.row(r);
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                best == y[r]
            })
            .count();
        hits as f64 / l.rows() as f64
    };
    let report = SpeakerTrainReport {
        train_accuracy: accuracy(&train),
        holdout_accuracy: accuracy(&holdout),
        n_train: train.len(),
        n_holdout: holdout.len(),
    };
    encoder.store.truncate(base);
    Ok((encoder, report))
}

/// Target RMS of the six gaussian levels, strictly increasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct GaussianLevels([f64; 6]);

impl GaussianLevels {
    pub const DEFAULT: [f64; 6] = [0.01, 0.05, 0.1, 0.5, 1.0, 2.0];

    pub fn new(levels: [f64; 6]) -> Result<Self, SpeakerError> {
        if levels[0] <= 0.0 || !levels.windows(2).all(|w| w[0] < w[1]) || levels.iter().any(|v| !v.is_finite()) {
            return Err(SpeakerError::InvalidLevels(format!(
                "{levels:?} must be positive and strictly increasing"
            )));
        }
        Ok(Self(levels))
    }

    /// RMS of level `1..=6`.
    pub fn rms(&self, level: u8) -> f64 {
        self.0[usize::from(level) - 1]
    }

    pub fn as_array(&self) -> [f64; 6] {
        self.0
    }
}

impl Default for GaussianLevels {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

impl TryFrom<[f64; 6]> for GaussianLevels {
    type Error = SpeakerError;
    fn try_from(v: [f64; 6]) -> Result<Self, SpeakerError> {
        Self::new(v)
    }
}

impl From<GaussianLevels> for [f64; 6] {
    fn from(g: GaussianLevels) -> Self {
        g.0
    }
}

/// What the unconditional CFG branch receives as its speaker embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NegativeStrategy {
    Zero,
    /// Level `1..=6`.
    Gaussian(u8),
    Natural,
}

impl NegativeStrategy {
    pub fn all() -> [NegativeStrategy; 8] {
        use NegativeStrategy::*;
        [Zero, Gaussian(1), Gaussian(2), Gaussian(3), Gaussian(4), Gaussian(5), Gaussian(6), Natural]
    }

    pub fn gaussian_rms(&self, levels: &GaussianLevels) -> Option<f64> {
        match self {
            NegativeStrategy::Gaussian(k) => Some(levels.rms(*k)),
            _ => None,
        }
    }
}

impl fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativeStrategy::Zero => f.write_str("zero"),
            NegativeStrategy::Gaussian(k) => write!(f, "gaussian{k}"),
            NegativeStrategy::Natural => f.write_str("natural"),
        }
    }
}

impl FromStr for NegativeStrategy {
    type Err = SpeakerError;
    fn from_str(s: &str) -> Result<Self, SpeakerError> {
        match s {
            "zero" => Ok(NegativeStrategy::Zero),
            "natural" => Ok(NegativeStrategy::Natural),
            _ => s
                .strip_prefix("gaussian")
                .and_then(|k| k.parse::<u8>().ok())
                .filter(|k| (1..=6).contains(k))
                .map(NegativeStrategy::Gaussian)
                .ok_or_else(|| SpeakerError::UnknownStrategy(s.to_string())),
        }
    }
}

impl TryFrom<String> for NegativeStrategy {
    type Error = SpeakerError;
    fn try_from(s: String) -> Result<Self, SpeakerError> {
        s.parse()
    }
}

impl From<NegativeStrategy> for String {
    fn from(s: NegativeStrategy) -> String {
        s.to_string()
    }
}

/// Where natural-noise grids come from.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSource<'a> {
    World(&'a WorldSpec),
    Clip(&'a Matrix),
}

/// White noise rescaled to exactly `rms`.
pub fn gaussian_grid(rows: usize, cols: usize, rms: f64, rng: &mut Rng) -> Matrix {
    let mut g = normal_matrix(rng, rows, cols, 1.0);
    let actual = (g.as_slice().iter().map(|v| v * v).sum::<f64>() / g.len().max(1) as f64).sqrt();
    if actual > 0.0 {
        g = g.scale(rms / actual);
    }
    g
}

/// The negative speaker embedding for `strategy`. `rows` sets the length of
/// synthesized noise grids; a supplied noise clip is used as is.
pub fn negative_embedding(
    strategy: NegativeStrategy,
    encoder: &SpeakerEncoder,
    noise: Option<NoiseSource<'_>>,
    levels: &GaussianLevels,
    rows: usize,
    rng: &mut Rng,
) -> Result<SpeakerEmbedding, SpeakerError> {
    match strategy {
        NegativeStrategy::Zero => Ok(SpeakerEmbedding::zero(encoder.width)),
        NegativeStrategy::Gaussian(k) => {
            let grid = gaussian_grid(rows, encoder.input_width, levels.rms(k), rng);
            encoder.embed(&grid)
        }
        NegativeStrategy::Natural => match noise {
            None => Err(SpeakerError::MissingNoiseSource),
            Some(NoiseSource::World(w)) => encoder.embed(&w.natural_noise(rows, rng)),
            Some(NoiseSource::Clip(m)) => encoder.embed(m),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::g2p;
    use crate::rng::seeded;
    use crate::world::{build_world, random_transcript, SynthRequest, WorldConfig};
    use proptest::prelude::*;

    fn world() -> WorldSpec {
        build_world(&WorldConfig::default(), 3).unwrap()
    }

    fn clips(w: &WorldSpec, per_speaker: usize, seed: u64) -> Vec<(Matrix, usize)> {
        let mut rng = seeded(seed);
        let mut out = Vec::new();
        for _ in 0..per_speaker {
            for s in 0..w.n_speakers() {
                let (_, ph) = random_transcript(&mut rng, 3, 12);
                let req = SynthRequest {
                    speakers: vec![s],
                    transcripts: vec![ph],
                    duration: 2.0,
                    noise_amplitude: 0.1,
                };
                out.push((w.synth_quadruplet(&req, &mut rng).unwrap().audio, s));
            }
        }
        out
    }

    fn trained() -> (WorldSpec, SpeakerEncoder, SpeakerTrainReport) {
        let w = world();
        let data = clips(&w, 50, 1);
        let refs: Vec<(&Matrix, usize)> = data.iter().map(|(m, s)| (m, *s)).collect();
        let (enc, report) = train_speaker_encoder(&refs, 32, &SpeakerTrainConfig::default(), &mut seeded(2)).unwrap();
        (w, enc, report)
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), Err(SpeakerError::ZeroVector));
    }

    #[test]
    fn eight_strategies_roundtrip_names() {
        let all = NegativeStrategy::all();
        let names: std::collections::BTreeSet<String> = all.iter().map(|s| s.to_string()).collect();
        assert_eq!(names.len(), 8);
        for s in all {
            assert_eq!(s.to_string().parse::<NegativeStrategy>().unwrap(), s);
        }
        assert!("gaussian7".parse::<NegativeStrategy>().is_err());
        let levels = GaussianLevels::default();
        let rms: Vec<f64> = all.iter().filter_map(|s| s.gaussian_rms(&levels)).collect();
        assert_eq!(rms, GaussianLevels::DEFAULT.to_vec());
        assert!(GaussianLevels::new([0.1, 0.1, 0.2, 0.3, 0.4, 0.5]).is_err());
    }

    #[test]
    fn gaussian_grid_hits_rms() {
        let mut rng = seeded(4);
        for rms in GaussianLevels::DEFAULT {
            let g = gaussian_grid(86, 16, rms, &mut rng);
            let actual = (g.as_slice().iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt();
            assert!((actual - rms).abs() <= 0.01 * rms);
        }
    }

    #[test]
    fn guards() {
        let w = world();
        let data = clips(&w, 12, 5);
        let one: Vec<(&Matrix, usize)> = data.iter().filter(|(_, s)| *s == 0).map(|(m, s)| (m, *s)).collect();
        assert!(matches!(
            train_speaker_encoder(&one, 8, &SpeakerTrainConfig::default(), &mut seeded(1)),
            Err(SpeakerError::InsufficientData(_))
        ));
        let few: Vec<(&Matrix, usize)> = data.iter().take(16).map(|(m, s)| (m, *s)).collect();
        assert!(matches!(
            train_speaker_encoder(&few, 8, &SpeakerTrainConfig::default(), &mut seeded(1)),
            Err(SpeakerError::InsufficientData(_))
        ));
        let enc = SpeakerEncoder::new(&mut seeded(1), 16, 8, 8);
        assert_eq!(enc.embed(&Matrix::zeros(0, 16)), Err(SpeakerError::EmptyInput));
        assert_eq!(
            negative_embedding(NegativeStrategy::Natural, &enc, None, &GaussianLevels::default(), 10, &mut seeded(1)),
            Err(SpeakerError::MissingNoiseSource)
        );
    }

    #[test]
    fn classifier_separates_speakers_and_embeddings_cluster() {
        let (w, enc, report) = trained();
        assert!(report.holdout_accuracy > 0.9, "{report:?}");
        assert_eq!(enc.store.len(), 4, "head must be discarded");

        let held = clips(&w, 2, 77);
        let emb: Vec<(SpeakerEmbedding, usize)> =
            held.iter().map(|(m, s)| (speaker_embed(&enc, m).unwrap(), *s)).collect();
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        for i in 0..emb.len() {
            for j in 0..i {
                let c = cosine_similarity(emb[i].0.values(), emb[j].0.values()).unwrap();
                if emb[i].1 == emb[j].1 {
                    same.push(c);
                } else {
                    diff.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) > mean(&diff) + 0.3, "same {} diff {}", mean(&same), mean(&diff));
    }

    #[test]
    fn training_is_deterministic() {
        let w = world();
        let data = clips(&w, 10, 6);
        let refs: Vec<(&Matrix, usize)> = data.iter().map(|(m, s)| (m, *s)).collect();
        let cfg = SpeakerTrainConfig {
            steps: 20,
            holdout_fraction: 0.0,
            ..SpeakerTrainConfig::default()
        };
        let (a, _) = train_speaker_encoder(&refs, 8, &cfg, &mut seeded(9)).unwrap();
        let (b, _) = train_speaker_encoder(&refs, 8, &cfg, &mut seeded(9)).unwrap();
        assert!(a.store.bit_eq(&b.store));
    }

    #[test]
    fn negative_embeddings() {
        let w = world();
        let enc = SpeakerEncoder::new(&mut seeded(1), 16, 16, 8);
        let levels = GaussianLevels::default();
        let zero = negative_embedding(NegativeStrategy::Zero, &enc, None, &levels, 86, &mut seeded(1)).unwrap();
        assert!(zero.is_zero_sentinel() && zero.values().iter().all(|v| v.to_bits() == 0));
        let nat = |seed| {
            negative_embedding(NegativeStrategy::Natural, &enc, Some(NoiseSource::World(&w)), &levels, 86, &mut seeded(seed))
                .unwrap()
        };
        let a = nat(5);
        assert!(!a.is_zero_sentinel() && (a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, nat(5));
        let clip = w.natural_noise(40, &mut seeded(3));
        let from_clip =
            negative_embedding(NegativeStrategy::Natural, &enc, Some(NoiseSource::Clip(&clip)), &levels, 86, &mut seeded(1))
                .unwrap();
        assert_eq!(from_clip, enc.embed(&clip).unwrap());
        for k in 1..=6 {
            let g = negative_embedding(NegativeStrategy::Gaussian(k), &enc, None, &levels, 86, &mut seeded(1)).unwrap();
            assert!((g.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_on_clean_clip_is_unit() {
        let w = world();
        let enc = SpeakerEncoder::new(&mut seeded(1), 16, 16, 8);
        let req = SynthRequest {
            speakers: vec![1],
            transcripts: vec![g2p("hello").unwrap()],
            duration: 1.0,
            noise_amplitude: 0.0,
        };
        let q = w.synth_quadruplet(&req, &mut seeded(1)).unwrap();
        let e = speaker_embed(&enc, &q.audio).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e, speaker_embed(&enc, &q.audio).unwrap());
    }

    proptest! {
        #[test]
        fn embedding_norm_is_one(rows in 1usize..20, seed in any::<u64>(), scale in 1e-6f64..1e3) {
            let enc = SpeakerEncoder::new(&mut seeded(7), 16, 16, 8);
            let grid = normal_matrix(&mut seeded(seed), rows, 16, scale);
            let e = enc.embed(&grid).unwrap();
            prop_assert!((e.norm() - 1.0).abs() < 1e-6);
        }
    }
}
