//! Datasets of world quadruplets on disk, and the speaker-verification filter.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction::{g2p, InstructionError, Segment, SpeakerTag};
use crate::rng::{derive_rng, derive_seed};
use crate::speaker::{cosine_similarity, SpeakerEncoder, SpeakerError};
use crate::tensor::Matrix;
use crate::tensor_io::{find_matrix, quantize, read_tensors, write_matrices, TensorIoError};
use crate::world::{build_world, phoneme_start, plan_clip, Caption, DataConfig, Quadruplet, WorldConfig, WorldError, WorldSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SONATE_THREADS";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error(transparent)]
    Speaker(#[from] SpeakerError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Tensor file relative to the manifest, holding `audio` and `video`.
    pub file: String,
    pub speakers: Vec<usize>,
    /// Plain-text transcript per speaker, in speaking order.
    pub transcripts: Vec<String>,
    pub caption: Caption,
    pub duration: f64,
    pub noise_amplitude: f64,
}

impl ManifestEntry {
    pub fn segments(&self) -> Result<Vec<Segment>, DatasetError> {
        self.transcripts
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let tag = SpeakerTag::from_index(k)
                    .ok_or_else(|| DatasetError::Invalid("more than two speakers in a clip".into()))?;
                Ok(Segment {
                    tag,
                    phonemes: g2p(t)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub world_seed: u64,
    /// 0 for training data; other values give disjoint clips of the same world.
    #[serde(default)]
    pub split: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn world(&self) -> Result<WorldSpec, DatasetError> {
        Ok(build_world(&self.world, self.world_seed)?)
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|source| DatasetError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Worker count from `SONATE_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool capped by [`worker_threads`].
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// An in-memory dataset: the manifest plus its loaded quadruplets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub world: WorldSpec,
    pub clips: Vec<Quadruplet>,
}

/// Synthesizes `data.n_clips` quadruplets of the world seeded by `seed`.
/// Latents are rounded to `f32` so that the in-memory dataset equals what a
/// file round-trip produces.
pub fn generate(world_config: &WorldConfig, data: &DataConfig, seed: u64) -> Result<Dataset, DatasetError> {
    generate_split(world_config, data, seed, 0)
}

/// Like [`generate`], with clips drawn from stream `split`.
pub fn generate_split(
    world_config: &WorldConfig,
    data: &DataConfig,
    seed: u64,
    split: u64,
) -> Result<Dataset, DatasetError> {
    let world_seed = derive_seed(seed, "world-seed", 0);
    let world = build_world(world_config, world_seed)?;
    let seed = if split == 0 { seed } else { derive_seed(seed, "split", split) };
    let made: Vec<Result<(ManifestEntry, Quadruplet), DatasetError>> = with_pool(|| {
        (0..data.n_clips)
            .into_par_iter()
            .map(|i| {
                let plan = plan_clip(&world, data, seed, i as u64);
                let mut rng = derive_rng(seed, "clip", i as u64);
                let mut q = world.synth_quadruplet(&plan.request, &mut rng)?;
                q.audio = quantize(&q.audio);
                q.video = quantize(&q.video);
                let entry = ManifestEntry {
                    file: format!("clips/{i:06}.snte"),
                    speakers: plan.request.speakers.clone(),
                    transcripts: plan.texts,
                    caption: q.caption.clone(),
                    duration: plan.request.duration,
                    noise_amplitude: plan.request.noise_amplitude,
                };
                Ok((entry, q))
            })
            .collect()
    });
    let mut entries = Vec::with_capacity(made.len());
    let mut clips = Vec::with_capacity(made.len());
    for r in made {
        let (e, q) = r?;
        entries.push(e);
        clips.push(q);
    }
    Ok(Dataset {
        manifest: Manifest {
            world_seed,
            split,
            world: world_config.clone(),
            data: data.clone(),
            entries,
        },
        world,
        clips,
    })
}

impl Dataset {
    /// Writes the manifest and one tensor file per clip under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, DatasetError> {
        let results: Vec<Result<(), DatasetError>> = with_pool(|| {
            self.manifest
                .entries
                .par_iter()
                .zip(&self.clips)
                .map(|(e, q)| {
                    write_matrices(&dir.join(&e.file), &[("audio", &q.audio), ("video", &q.video)])?;
                    Ok(())
                })
                .collect()
        });
        results.into_iter().collect::<Result<(), _>>()?;
        let path = dir.join(MANIFEST_FILE);
        self.manifest.write(&path)?;
        Ok(path)
    }

    /// Loads a manifest (or a directory containing one) and its tensor files.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest = Manifest::read(&path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let world = manifest.world()?;
        let clips: Vec<Result<Quadruplet, DatasetError>> = with_pool(|| {
            manifest
                .entries
                .par_iter()
                .map(|e| {
                    let tensors = read_tensors(&base.join(&e.file))?;
                    Ok(Quadruplet {
                        audio: find_matrix(&tensors, "audio")?,
                        video: find_matrix(&tensors, "video")?,
                        caption: e.caption.clone(),
                        segments: e.segments()?,
                        speakers: e.speakers.clone(),
                        duration: e.duration,
                    })
                })
                .collect()
        });
        let clips = clips.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(Self { manifest, world, clips })
    }

    /// Keeps the clips at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: Manifest {
                entries: indices.iter().map(|&i| self.manifest.entries[i].clone()).collect(),
                ..self.manifest.clone()
            },
            world: self.world.clone(),
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
        }
    }

    /// A solo clip of `speaker` other than `me`: the next one in dataset
    /// order, wrapping; `None` when the speaker has no other solo clip.
    pub fn reference_clip(&self, speaker: usize, me: usize) -> Option<usize> {
        let pool: Vec<usize> = (0..self.clips.len())
            .filter(|&j| j != me && self.clips[j].speakers == [speaker])
            .collect();
        pool.iter().copied().find(|&j| j > me).or_else(|| pool.first().copied())
    }

    /// `(audio, speaker)` training pairs for the speaker encoder: solo clips only.
    pub fn speaker_training_pairs(&self) -> Vec<(&Matrix, usize)> {
        self.clips
            .iter()
            .filter(|q| q.speakers.len() == 1)
            .map(|q| (&q.audio, q.speakers[0]))
            .collect()
    }
}

/// Row range `[start, end)` of segment `k` when segments of `lens`
/// phonemes are stretched over `rows` rows.
pub fn segment_span(lens: &[usize], k: usize, rows: usize) -> (usize, usize) {
    let total: usize = lens.iter().sum();
    if total == 0 {
        return (0, rows);
    }
    let before: usize = lens[..k].iter().sum();
    (phoneme_start(before, rows, total), phoneme_start(before + lens[k], rows, total))
}

/// Rows of `audio` voiced by segment `k` of `segments`.
pub fn segment_audio(audio: &Matrix, segments: &[Segment], k: usize) -> Matrix {
    let lens: Vec<usize> = segments.iter().map(|s| s.phonemes.len()).collect();
    let (start, end) = segment_span(&lens, k, audio.rows());
    audio.slice_rows(start, end - start)
}

/// Audio rows voiced by segment `k` of a clip.
pub fn segment_rows(q: &Quadruplet, k: usize) -> Matrix {
    segment_audio(&q.audio, &q.segments, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub scores: Vec<f64>,
    pub accepted: Vec<usize>,
    pub accept_rate: f64,
}

/// Keeps the pairs whose speaker embeddings have cosine ≥ `threshold`.
pub fn verification_filter(
    pairs: &[(&Matrix, &Matrix)],
    encoder: &SpeakerEncoder,
    threshold: f64,
) -> Result<FilterReport, SpeakerError> {
    let scores = pairs
        .iter()
        .map(|(gen, reference)| {
            let a = encoder.embed(gen)?;
            let b = encoder.embed(reference)?;
            cosine_similarity(a.values(), b.values())
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(report_for(scores, threshold))
}

/// Applies `threshold` to precomputed scores.
pub fn report_for(scores: Vec<f64>, threshold: f64) -> FilterReport {
    let accepted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= threshold).collect();
    let accept_rate = if scores.is_empty() {
        0.0
    } else {
        accepted.len() as f64 / scores.len() as f64
    };
    FilterReport {
        threshold,
        scores,
        accepted,
        accept_rate,
    }
}

/// Scores every clip against references of the same speakers: each segment's
/// rows are compared with the nearest other solo clip of that speaker (by
/// dataset order, wrapping), and the clip's score is the minimum over its
/// segments. Clips whose speaker has no other solo clip score against themselves.
pub fn dataset_filter(dataset: &Dataset, encoder: &SpeakerEncoder, threshold: f64) -> Result<FilterReport, SpeakerError> {
    let scores = dataset
        .clips
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut worst = f64::INFINITY;
            for (k, &s) in q.speakers.iter().enumerate() {
                let rows = if q.speakers.len() == 1 { q.audio.clone() } else { segment_rows(q, k) };
                let r = dataset.reference_clip(s, i).unwrap_or(i);
                let a = encoder.embed(&rows)?;
                let b = encoder.embed(&dataset.clips[r].audio)?;
                worst = worst.min(cosine_similarity(a.values(), b.values())?);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>, SpeakerError>>()?;
    Ok(report_for(scores, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::speaker::{train_speaker_encoder, SpeakerTrainConfig};
    use rand::Rng as _;

    fn small_data(n: usize) -> DataConfig {
        DataConfig {
            n_clips: n,
            ..DataConfig::default()
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = generate(&WorldConfig::default(), &small_data(12), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in back.clips.iter().zip(&ds.clips) {
            assert!(a.audio.bit_eq(&b.audio) && a.video.bit_eq(&b.video));
            assert_eq!(a.segments, b.segments);
        }
        assert_eq!(Dataset::load(dir.path()).unwrap().clips.len(), 12);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&WorldConfig::default(), &small_data(6), 9).unwrap();
        let b = generate(&WorldConfig::default(), &small_data(6), 9).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert!(a.clips.iter().zip(&b.clips).all(|(x, y)| x.audio.bit_eq(&y.audio)));
    }

    #[test]
    fn segment_rows_split_dialogue() {
        let ds = generate(&WorldConfig::default(), &small_data(40), 2).unwrap();
        let q = ds.clips.iter().find(|q| q.speakers.len() == 2).expect("some dialogue");
        let a = segment_rows(q, 0);
        let b = segment_rows(q, 1);
        assert_eq!(a.rows() + b.rows(), q.audio.rows());
    }

    #[test]
    fn filter_bounds_monotonicity_and_degraded_rejection() {
        let data = DataConfig {
            n_clips: 240,
            degraded_fraction: 0.15,
            dialogue_fraction: 0.0,
            ..DataConfig::default()
        };
        let ds = generate(&WorldConfig::default(), &data, 6).unwrap();
        let clean: Vec<(&Matrix, usize)> = ds
            .clips
            .iter()
            .zip(&ds.manifest.entries)
            .filter(|(_, e)| e.noise_amplitude < 1.0)
            .map(|(q, _)| (&q.audio, q.speakers[0]))
            .collect();
        let (enc, _) = train_speaker_encoder(&clean, 32, &SpeakerTrainConfig::default(), &mut seeded(1)).unwrap();
        let report = dataset_filter(&ds, &enc, 0.7).unwrap();
        assert_eq!(report, dataset_filter(&ds, &enc, 0.7).unwrap());
        assert_eq!(report_for(report.scores.clone(), -1.0).accepted.len(), ds.clips.len());
        assert!(report_for(report.scores.clone(), 1.0 + 1e-9).accepted.is_empty());

        let mut rng = seeded(3);
        for _ in 0..20 {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (lo, hi) = (a.min(b), a.max(b));
            let loose = report_for(report.scores.clone(), lo).accepted;
            let strict = report_for(report.scores.clone(), hi).accepted;
            assert!(strict.iter().all(|i| loose.contains(i)));
        }

        let degraded: Vec<usize> = (0..ds.clips.len())
            .filter(|&i| ds.manifest.entries[i].noise_amplitude > 1.0)
            .collect();
        let rejected = degraded.iter().filter(|i| !report.accepted.contains(i)).count();
        assert!(rejected * 2 > degraded.len(), "{rejected} of {} degraded rejected", degraded.len());
    }
}
