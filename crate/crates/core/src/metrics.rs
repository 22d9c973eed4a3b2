//! Evaluation metrics against the synthetic world's oracle.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction::PhonemeSequence;
use crate::speaker::NegativeStrategy;
use crate::tensor::Matrix;
use crate::world::{phoneme_start, WorldSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("covariance could not be regularized: {0}")]
    DegenerateCovariance(String),
}

/// Squared distance from `m` to the nearest `φ_a + α·τ_s`, with `τ_s`
/// ranging over the timbre bank and the zero vector.
fn phoneme_distance(world: &WorldSpec, m: &[f64], a: usize) -> f64 {
    let phi = world.codebook.row(a);
    let alpha = world.config.timbre_alpha;
    let base: f64 = m.iter().zip(phi).map(|(x, p)| (x - p) * (x - p)).sum();
    (0..world.n_speakers()).fold(base, |best, s| {
        let tau = world.timbre_of(s);
        let d: f64 = m
            .iter()
            .zip(phi)
            .zip(tau)
            .map(|((x, p), t)| {
                let r = x - p - alpha * t;
                r * r
            })
            .sum();
        best.min(d)
    })
}

/// Nearest phoneme to a mean latent row; ties go to the lowest id.
fn nearest_phoneme(world: &WorldSpec, m: &[f64]) -> u8 {
    let mut best = (0usize, f64::INFINITY);
    for a in 0..world.alphabet() {
        let d = phoneme_distance(world, m, a);
        if d < best.1 {
            best = (a, d);
        }
    }
    best.0 as u8
}

fn window_mean(audio: &Matrix, start: usize, end: usize) -> Vec<f64> {
    let mut m = vec![0.0; audio.cols()];
    for r in start..end {
        for (acc, v) in m.iter_mut().zip(audio.row(r)) {
            *acc += v;
        }
    }
    let n = (end - start) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Phoneme id per audio row: from equal windows when `expected_len` is given,
/// otherwise row by row.
fn row_phonemes(audio: &Matrix, world: &WorldSpec, expected_len: Option<usize>) -> Result<Vec<u8>, MetricsError> {
    if audio.rows() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if audio.cols() != world.config.d_audio {
        return Err(MetricsError::ShapeMismatch(format!(
            "audio width {} vs world {}",
            audio.cols(),
            world.config.d_audio
        )));
    }
    let rows = audio.rows();
    match expected_len {
        Some(l) if l > 0 => {
            let l = l.min(rows);
            let mut out = vec![0u8; rows];
            for k in 0..l {
                let (s, e) = (phoneme_start(k, rows, l), phoneme_start(k + 1, rows, l));
                let p = nearest_phoneme(world, &window_mean(audio, s, e));
                out[s..e].iter_mut().for_each(|v| *v = p);
            }
            Ok(out)
        }
        _ => Ok((0..rows).map(|r| nearest_phoneme(world, audio.row(r))).collect()),
    }
}

/// Oracle phoneme recognizer for world latents.
pub fn decode_phonemes(
    audio: &Matrix,
    world: &WorldSpec,
    expected_len: Option<usize>,
) -> Result<PhonemeSequence, MetricsError> {
    let per_row = row_phonemes(audio, world, expected_len)?;
    match expected_len {
        Some(l) if l > 0 => {
            let l = l.min(audio.rows());
            Ok(PhonemeSequence(
                (0..l).map(|k| per_row[phoneme_start(k, audio.rows(), l)]).collect(),
            ))
        }
        _ => {
            let mut merged = per_row;
            merged.dedup();
            Ok(PhonemeSequence(merged))
        }
    }
}

pub fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over `max(1, |reference|)`.
pub fn token_error_rate(hypothesis: &PhonemeSequence, reference: &PhonemeSequence) -> f64 {
    edit_distance(hypothesis.ids(), reference.ids()) as f64 / reference.len().max(1) as f64
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 1e-24 || sbb <= 1e-24 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Per video frame, the mean aperture of the phonemes decoded in that frame's audio span.
pub fn audio_articulation_track(
    audio: &Matrix,
    video_rows: usize,
    world: &WorldSpec,
    expected_len: Option<usize>,
) -> Result<Vec<f64>, MetricsError> {
    if video_rows == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let per_row = row_phonemes(audio, world, expected_len)?;
    let t_a = audio.rows();
    Ok((0..video_rows)
        .map(|j| {
            let s = j * t_a / video_rows;
            let e = ((j + 1) * t_a / video_rows).max(s + 1).min(t_a);
            let sum: f64 = per_row[s..e].iter().map(|&p| world.apertures[usize::from(p)]).sum();
            sum / (e - s) as f64
        })
        .collect())
}

/// Correlation of the audio-implied and the video articulation tracks.
pub fn sync_score(
    audio: &Matrix,
    video: &Matrix,
    world: &WorldSpec,
    expected_len: Option<usize>,
) -> Result<f64, MetricsError> {
    if video.rows() == 0 || video.cols() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let track = audio_articulation_track(audio, video.rows(), world, expected_len)?;
    let lips: Vec<f64> = (0..video.rows()).map(|j| video.get(j, 0)).collect();
    Ok(pearson(&track, &lips))
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn mean_cov(x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.rows();
    let mean = x.mean_rows();
    let d = x.cols();
    let mut centred = to_dmatrix(x);
    for r in 0..n {
        for c in 0..d {
            centred[(r, c)] -= mean[c];
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centred.transpose() * &centred / denom;
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two row sets.
pub fn frechet_distance(a: &Matrix, b: &Matrix) -> Result<f64, MetricsError> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if a.cols() != b.cols() {
        return Err(MetricsError::ShapeMismatch(format!("{} vs {} features", a.cols(), b.cols())));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(MetricsError::DegenerateCovariance("non-finite features".into()));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = psd_sqrt(&ca);
    let cross = psd_sqrt(&(&sa * &cb * &sa));
    let value = mean_term + ca.trace() + cb.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(MetricsError::DegenerateCovariance("non-finite distance".into()));
    }
    Ok(value.max(0.0))
}

pub const KL_BINS: usize = 32;
pub const KL_SMOOTHING: f64 = 1e-6;

/// Mean over feature dimensions of `KL(a ‖ b)` between histograms on shared edges.
pub fn kl_divergence(a: &Matrix, b: &Matrix) -> Result<f64, MetricsError> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if a.cols() != b.cols() {
        return Err(MetricsError::ShapeMismatch(format!("{} vs {} features", a.cols(), b.cols())));
    }
    let d = a.cols();
    let mut total = 0.0;
    for c in 0..d {
        let col = |m: &Matrix| (0..m.rows()).map(|r| m.get(r, c)).collect::<Vec<f64>>();
        let (xa, xb) = (col(a), col(b));
        let lo = xa.iter().chain(&xb).copied().fold(f64::INFINITY, f64::min);
        let hi = xa.iter().chain(&xb).copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            continue;
        }
        let hist = |xs: &[f64]| {
            let mut h = vec![0.0; KL_BINS];
            for &x in xs {
                let k = (((x - lo) / (hi - lo)) * KL_BINS as f64) as usize;
                h[k.min(KL_BINS - 1)] += 1.0;
            }
            let n = xs.len() as f64;
            h.iter_mut()
                .for_each(|v| *v = (*v / n + KL_SMOOTHING) / (1.0 + KL_BINS as f64 * KL_SMOOTHING));
            h
        };
        let (p, q) = (hist(&xa), hist(&xb));
        total += p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
    }
    Ok((total / d.max(1) as f64).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ter: f64,
    pub speaker_sim: f64,
    pub sync_score: f64,
    pub fd: f64,
    pub kl: f64,
    pub n_samples: usize,
    pub strategy: Option<NegativeStrategy>,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::instruction::g2p;
    use crate::rng::{normal_matrix, seeded};
    use crate::world::{build_world, random_transcript, SynthRequest, WorldConfig};
    use rand::Rng as _;

    fn world() -> WorldSpec {
        build_world(&WorldConfig::default(), 8).unwrap()
    }

    #[test]
    fn clean_clips_decode_exactly() {
        let w = world();
        let mut rng = seeded(1);
        for i in 0..1000 {
            let dialogue = i % 5 == 0;
            let (_, p0) = random_transcript(&mut rng, 2, if dialogue { 6 } else { 12 });
            let (speakers, transcripts) = if dialogue {
                let (_, p1) = random_transcript(&mut rng, 2, 6);
                (vec![i % 8, (i + 3) % 8], vec![p0, p1])
            } else {
                (vec![i % 8], vec![p0])
            };
            let reference = PhonemeSequence(transcripts.iter().flat_map(|t| t.0.clone()).collect());
            let req = SynthRequest {
                speakers,
                transcripts,
                duration: 2.0,
                noise_amplitude: 0.0,
            };
            let q = w.synth_quadruplet(&req, &mut rng).unwrap();
            let hyp = decode_phonemes(&q.audio, &w, Some(reference.len())).unwrap();
            assert_eq!(token_error_rate(&hyp, &reference), 0.0, "clip {i}");
        }
    }

    #[test]
    fn per_row_decoding_merges_runs() {
        let w = world();
        let ph = g2p("cat").unwrap();
        let req = SynthRequest {
            speakers: vec![2],
            transcripts: vec![ph.clone()],
            duration: 1.0,
            noise_amplitude: 0.0,
        };
        let q = w.synth_quadruplet(&req, &mut seeded(1)).unwrap();
        assert_eq!(decode_phonemes(&q.audio, &w, None).unwrap(), ph);
        assert_eq!(decode_phonemes(&Matrix::zeros(0, 16), &w, None), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let mut w = world();
        w.config.alphabet = 4;
        w.config.n_speakers = 2;
        w.config.d_audio = 2;
        w.codebook = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 5.0], vec![0.0, -5.0]]);
        w.timbre = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]);
        w.apertures = vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let audio = Matrix::zeros(6, 2);
        assert_eq!(decode_phonemes(&audio, &w, Some(2)).unwrap(), PhonemeSequence(vec![0, 0]));
    }

    #[test]
    fn noise_decodes_near_chance() {
        let mut w = world();
        w.config.noise_rho = 0.0;
        let mut rng = seeded(3);
        let len = 12;
        let (mut ter, mut oracle) = (0.0, 0.0);
        let n = 1000;
        for _ in 0..n {
            let noise = w.noise_clip(86, 1.0, &mut rng);
            let reference = PhonemeSequence((0..len).map(|_| rng.random_range(0..27u8)).collect());
            ter += token_error_rate(&decode_phonemes(&noise, &w, Some(len)).unwrap(), &reference);
            // independent oracle: two uniform random strings
            let a: Vec<u8> = (0..len).map(|_| rng.random_range(0..27u8)).collect();
            let b: Vec<u8> = (0..len).map(|_| rng.random_range(0..27u8)).collect();
            oracle += edit_distance(&a, &b) as f64 / len as f64;
        }
        let (ter, oracle) = (ter / n as f64, oracle / n as f64);
        assert!((ter - oracle).abs() < 0.03, "ter {ter} oracle {oracle}");
        assert!((ter - (1.0 - 1.0 / 27.0)).abs() < 0.08);
    }

    #[test]
    fn ter_examples() {
        let k = g2p("kitten").unwrap();
        let s = g2p("sitting").unwrap();
        assert_eq!(token_error_rate(&k, &s), 3.0 / 7.0);
        assert_eq!(token_error_rate(&k, &k), 0.0);
        assert_eq!(token_error_rate(&PhonemeSequence(vec![]), &PhonemeSequence(vec![4])), 1.0);
        assert_eq!(token_error_rate(&PhonemeSequence(vec![4]), &PhonemeSequence(vec![])), 1.0);
    }

    #[test]
    fn edit_distance_triangle() {
        let mut rng = seeded(4);
        for _ in 0..300 {
            let mut s = || -> Vec<u8> { (0..rng.random_range(0..8)).map(|_| rng.random_range(0..4u8)).collect() };
            let (a, b, c) = (s(), s(), s());
            assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            assert_eq!(edit_distance(&a, &a), 0);
        }
    }

    #[test]
    fn sync_examples() {
        let w = world();
        let req = SynthRequest {
            speakers: vec![0],
            transcripts: vec![g2p("hello world").unwrap()],
            duration: 3.0,
            noise_amplitude: 0.0,
        };
        let q = w.synth_quadruplet(&req, &mut seeded(2)).unwrap();
        let track = audio_articulation_track(&q.audio, q.video.rows(), &w, Some(11)).unwrap();
        let mut copy = q.video.clone();
        let mut negated = q.video.clone();
        let mean = track.iter().sum::<f64>() / track.len() as f64;
        for (j, v) in track.iter().enumerate() {
            copy.set(j, 0, *v);
            negated.set(j, 0, 2.0 * mean - v);
        }
        assert!((sync_score(&q.audio, &copy, &w, Some(11)).unwrap() - 1.0).abs() < 1e-12);
        assert!((sync_score(&q.audio, &negated, &w, Some(11)).unwrap() + 1.0).abs() < 1e-12);
        let mut flat = q.video.clone();
        (0..flat.rows()).for_each(|j| flat.set(j, 0, 0.4));
        assert_eq!(sync_score(&q.audio, &flat, &w, Some(11)).unwrap(), 0.0);

        let mut scaled = q.video.clone();
        (0..scaled.rows()).for_each(|j| scaled.set(j, 0, 3.0 * q.video.get(j, 0) - 7.0));
        let a = sync_score(&q.audio, &q.video, &w, Some(11)).unwrap();
        let b = sync_score(&q.audio, &scaled, &w, Some(11)).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert!(a > 0.5, "ground-truth clip sync {a}");
    }

    #[test]
    fn frechet_examples() {
        let mut rng = seeded(5);
        let a = normal_matrix(&mut rng, 500, 3, 1.0);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);

        let n = 100_000;
        let x = normal_matrix(&mut rng, n, 1, 1.0);
        let y = normal_matrix(&mut rng, n, 1, 1.0).map(|v| v + 1.0);
        // closed form for 1-D Gaussians: (μ1 − μ2)² + (σ1 − σ2)²
        let stats = |m: &Matrix| {
            let mu = m.mean();
            let var = m.as_slice().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64;
            (mu, var.sqrt())
        };
        let ((m1, s1), (m2, s2)) = (stats(&x), stats(&y));
        let closed = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        let fd = frechet_distance(&x, &y).unwrap();
        assert!((fd - 1.0).abs() < 0.05 && (fd - closed).abs() < 1e-4, "{fd} vs {closed}");

        let shift = [0.5, -1.0, 2.0];
        let b = a.map(|v| v).zip_map(&Matrix::from_fn(500, 3, |_, c| shift[c]), |v, s| v + s);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 5.25).abs() < 1e-6, "{fd}");
        let c = normal_matrix(&mut rng, 300, 3, 2.0);
        assert!((frechet_distance(&a, &c).unwrap() - frechet_distance(&c, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn kl_examples() {
        let mut rng = seeded(6);
        let a = normal_matrix(&mut rng, 400, 2, 1.0);
        assert!(kl_divergence(&a, &a).unwrap() <= 1e-6);
        let far = a.map(|v| v + 100.0);
        let kl = kl_divergence(&a, &far).unwrap();
        assert!(kl.is_finite() && kl > 5.0);
        let skew = normal_matrix(&mut rng, 400, 2, 1.0).map(|v| v.abs());
        let ab = kl_divergence(&a, &skew).unwrap();
        let ba = kl_divergence(&skew, &a).unwrap();
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn report_serializes() {
        let r = MetricReport {
            ter: 0.1,
            speaker_sim: 0.5,
            sync_score: 0.7,
            fd: 1.0,
            kl: 0.2,
            n_samples: 3,
            strategy: Some(NegativeStrategy::Gaussian(2)),
            seed: 9,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"gaussian2\""));
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
    }

    proptest! {
        #[test]
        fn ter_bounds(a in prop::collection::vec(0u8..27, 0..12), b in prop::collection::vec(0u8..27, 1..12)) {
            let (a, b) = (PhonemeSequence(a), PhonemeSequence(b));
            prop_assert!(token_error_rate(&a, &b) >= 0.0);
            prop_assert_eq!(token_error_rate(&b, &b), 0.0);
        }

        #[test]
        fn frechet_is_symmetric_and_nonnegative(seed in 0u64..500, scale in 0.1f64..3.0) {
            let mut rng = seeded(seed);
            let a = normal_matrix(&mut rng, 60, 3, 1.0);
            let b = normal_matrix(&mut rng, 40, 3, scale);
            let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
            prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-8);
        }

        #[test]
        fn pearson_is_affine_invariant(
            xs in prop::collection::vec(-5.0f64..5.0, 3..20),
            scale in 0.1f64..10.0,
            shift in -10.0f64..10.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x - i as f64).collect();
            let moved: Vec<f64> = ys.iter().map(|y| scale * y + shift).collect();
            prop_assert!((pearson(&xs, &ys) - pearson(&xs, &moved)).abs() < 1e-6);
        }
    }
}
