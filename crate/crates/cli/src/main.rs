use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avflow::checkpoint::{self, CheckpointError};
use avflow::conditioning::{MaskFlags, Task};
use avflow::config::{ConfigError, Override, RunConfig};
use avflow::dataset::{dataset_filter, generate_split, Dataset, DatasetError};
use avflow::evaluate::{
    eval_cases, evaluate, run_cfg_ablation, write_ablation_csv, EvalError, GenerationRequest, Sampler,
};
use avflow::instruction::{parse_instruction, InstructionError};
use avflow::metrics::{decode_phonemes, sync_score, token_error_rate};
use avflow::speaker::{cosine_similarity, train_speaker_encoder, NoiseSource, SpeakerError};
use avflow::tensor::Matrix;
use avflow::tensor_io::{read_first_matrix, write_matrices, TensorIoError};
use avflow::train::{TrainError, TrainState, TrainingData};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "avflow", version, about = "Joint audio-video flow matching on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Args, Clone, Default)]
struct SamplerFlags {
    /// Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance scale.
    #[arg(long)]
    w: Option<f64>,
    /// Negative strategy: zero, gaussian1..gaussian6 or natural.
    #[arg(long)]
    strategy: Option<String>,
    /// Tensor file used as the natural noise clip.
    #[arg(long)]
    noise_file: Option<PathBuf>,
    /// Do not synthesize natural noise from the world.
    #[arg(long)]
    no_world_noise: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of quadruplets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_clips: Option<usize>,
        /// Clip stream; use a nonzero split for held-out data.
        #[arg(long, default_value_t = 0)]
        split: u64,
    },
    /// Score clips with the speaker-verification filter.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use this checkpoint's speaker encoder instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the joint model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total optimizer steps.
        #[arg(long)]
        train_steps: Option<usize>,
        /// Continue from the checkpoint if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Generate one clip from an instruction.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Instruction file.
        #[arg(long, conflicts_with = "text")]
        instruction: Option<PathBuf>,
        /// Instruction given inline.
        #[arg(long)]
        text: Option<String>,
        /// Reference audio tensor file, one per speaker in tag order.
        #[arg(long)]
        ref_audio: Vec<PathBuf>,
        /// Reference image tensor file; its first row is the frame.
        #[arg(long)]
        ref_image: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics over a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_task, default_value = "TA2VA")]
        task: Task,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every negative strategy and write the ablation CSV.
    AblateCfg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_task, default_value = "TA2VA")]
        task: Task,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::ALL
        .into_iter()
        .find(|t| format!("{t:?}").eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown task `{s}` (T2VA, TI2VA, TA2VA, TIA2VA)"))
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Speaker(#[from] SpeakerError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn speaker_code(e: &SpeakerError) -> &'static str {
    match e {
        SpeakerError::MissingNoiseSource => "MissingNoiseSource",
        SpeakerError::InsufficientData(_) => "InsufficientData",
        _ => "SpeakerError",
    }
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Config(ConfigError::Schema { .. }) => "SchemaError",
            CliError::Config(ConfigError::Invalid(_)) => "InvalidConfig",
            CliError::Config(ConfigError::Io { .. }) | CliError::Io { .. } => "Io",
            CliError::Checkpoint(CheckpointError::VersionMismatch { .. }) => "VersionMismatch",
            CliError::Checkpoint(CheckpointError::CorruptCheckpoint(_)) => "CorruptCheckpoint",
            CliError::Checkpoint(CheckpointError::Io { .. }) => "Io",
            CliError::Speaker(e)
            | CliError::Eval(EvalError::Speaker(e))
            | CliError::Train(TrainError::Speaker(e))
            | CliError::Dataset(DatasetError::Speaker(e)) => speaker_code(e),
            CliError::Eval(EvalError::Train(TrainError::Instruction(_)))
            | CliError::Train(TrainError::Instruction(_))
            | CliError::Instruction(_) => "InstructionError",
            CliError::TensorIo(_) | CliError::Dataset(DatasetError::TensorIo(_)) => "TensorIoError",
            CliError::Dataset(_) => "DatasetError",
            CliError::Train(_) => "TrainError",
            CliError::Eval(_) => "EvalError",
            CliError::Usage(_) => "Usage",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(common: &Common, mut extra: Vec<Override>) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(Override::new("seed", seed));
    }
    for o in &common.overrides {
        overrides.push(Override::parse(o)?);
    }
    overrides.append(&mut extra);
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn sampler_overrides(f: &SamplerFlags) -> Vec<Override> {
    let mut o = Vec::new();
    if let Some(s) = f.steps {
        o.push(Override::new("sampler.steps", s));
    }
    if let Some(w) = f.w {
        o.push(Override::new("sampler.guidance_w", w));
    }
    if let Some(s) = &f.strategy {
        o.push(Override::new("sampler.negative_strategy", s.as_str()));
    }
    if let Some(p) = &f.noise_file {
        o.push(Override::new("noise.file", p.to_string_lossy().as_ref()));
    }
    if f.no_world_noise {
        o.push(Override::new("noise.use_world", false));
    }
    o
}

fn path_override(key: &str, p: &Option<PathBuf>) -> Option<Override> {
    p.as_ref().map(|p| Override::new(key, p.to_string_lossy().as_ref()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Natural-noise source per the config: a file beats the world.
fn noise_source<'a>(config: &RunConfig, clip: &'a Option<Matrix>, world: &'a avflow::world::WorldSpec) -> Option<NoiseSource<'a>> {
    match clip {
        Some(m) => Some(NoiseSource::Clip(m)),
        None if config.noise.use_world => Some(NoiseSource::World(world)),
        None => None,
    }
}

fn load_noise_clip(config: &RunConfig) -> Result<Option<Matrix>, CliError> {
    config
        .noise
        .file
        .as_deref()
        .map(|p| Ok(read_first_matrix(p)?))
        .transpose()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, extra) = match &cli.command {
        Command::GenData { common, out, n_clips, .. } => {
            let mut o: Vec<Override> = path_override("paths.dataset_dir", out).into_iter().collect();
            if let Some(n) = n_clips {
                o.push(Override::new("data.n_clips", *n));
            }
            (common, o)
        }
        Command::Filter {
            common,
            dataset,
            threshold,
            out,
            ..
        } => {
            let mut o: Vec<Override> = path_override("paths.dataset_dir", dataset).into_iter().collect();
            o.extend(path_override("paths.output_dir", out));
            if let Some(t) = threshold {
                o.push(Override::new("filter.threshold", *t));
            }
            (common, o)
        }
        Command::Train {
            common,
            dataset,
            checkpoint,
            train_steps,
            ..
        } => {
            let mut o: Vec<Override> = path_override("paths.dataset_dir", dataset).into_iter().collect();
            o.extend(path_override("paths.checkpoint", checkpoint));
            if let Some(s) = train_steps {
                o.push(Override::new("train.steps", *s));
            }
            (common, o)
        }
        Command::Sample {
            common,
            sampler,
            checkpoint,
            out,
            ..
        } => {
            let mut o = sampler_overrides(sampler);
            o.extend(path_override("paths.checkpoint", checkpoint));
            o.extend(path_override("paths.output_dir", out));
            (common, o)
        }
        Command::Eval {
            common,
            sampler,
            checkpoint,
            dataset,
            n_samples,
            out,
            ..
        }
        | Command::AblateCfg {
            common,
            sampler,
            checkpoint,
            dataset,
            n_samples,
            out,
            ..
        } => {
            let mut o = sampler_overrides(sampler);
            o.extend(path_override("paths.checkpoint", checkpoint));
            o.extend(path_override("paths.dataset_dir", dataset));
            o.extend(path_override("paths.output_dir", out));
            if let Some(n) = n_samples {
                o.push(Override::new("eval.n_samples", *n));
            }
            (common, o)
        }
    };
    let config = load_config(common, extra)?;
    if common.print_config {
        println!("{}", config.to_json_pretty());
        return Ok(());
    }
    match cli.command {
        Command::GenData { split, .. } => gen_data(&config, split),
        Command::Filter { checkpoint, .. } => filter(&config, checkpoint.as_deref()),
        Command::Train { resume, .. } => train(config, resume),
        Command::Sample {
            instruction,
            text,
            ref_audio,
            ref_image,
            duration,
            index,
            ..
        } => sample(&config, instruction, text, &ref_audio, ref_image, duration, index),
        Command::Eval { task, .. } => eval(&config, task),
        Command::AblateCfg { task, .. } => ablate(&config, task),
    }
}

fn gen_data(config: &RunConfig, split: u64) -> Result<(), CliError> {
    let ds = generate_split(&config.world, &config.data, config.seed, split)?;
    let path = ds.save(&config.paths.dataset_dir)?;
    println!("wrote {} clips to {}", ds.clips.len(), path.display());
    Ok(())
}

fn filter(config: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let dir = &config.paths.dataset_dir;
    let ds = Dataset::load(dir)?;
    let encoder = match checkpoint {
        Some(p) => checkpoint::load(p)?.encoder,
        None => {
            let pairs = ds.speaker_training_pairs();
            train_speaker_encoder(
                &pairs,
                config.backbone.width,
                &config.speaker,
                &mut avflow::rng::derive_rng(config.seed, "speaker-encoder", 0),
            )?
            .0
        }
    };
    let report = dataset_filter(&ds, &encoder, config.filter.threshold)?;
    let mut accepted = ds.manifest.clone();
    accepted.entries = report.accepted.iter().map(|&i| ds.manifest.entries[i].clone()).collect();
    let base = if dir.is_dir() { dir.clone() } else { dir.parent().unwrap_or(Path::new(".")).to_path_buf() };
    let accepted_path = base.join("accepted.json");
    accepted.write(&accepted_path)?;
    let report_path = config.paths.output_dir.join("filter_report.json");
    write_json(&report_path, &report)?;
    println!(
        "accepted {}/{} clips (rate {:.3}); manifest {}, report {}",
        report.accepted.len(),
        report.scores.len(),
        report.accept_rate,
        accepted_path.display(),
        report_path.display()
    );
    Ok(())
}

fn train(config: RunConfig, resume: bool) -> Result<(), CliError> {
    let ds = Dataset::load(&config.paths.dataset_dir)?;
    let path = config.paths.checkpoint.clone();
    let mut state = if resume && path.exists() {
        let mut state = checkpoint::load(&path)?;
        state.config.train.steps = config.train.steps;
        state.config.train.checkpoint_every = config.train.checkpoint_every;
        eprintln!("resuming from step {}", state.step);
        state
    } else {
        let (state, report) = TrainState::new(config, &ds)?;
        eprintln!(
            "speaker encoder: train accuracy {:.3}, held-out accuracy {:.3}",
            report.train_accuracy, report.holdout_accuracy
        );
        state
    };
    let data = TrainingData::new(&state, &ds)?;
    let total = state.config.train.steps as u64;
    let every = state.config.train.checkpoint_every as u64;
    state.train_until::<CliError>(&data, total, |s, loss| {
        if s.step % 100 == 0 || s.step == total {
            eprintln!("step {} loss {loss:.5}", s.step);
        }
        if every > 0 && s.step % every == 0 && s.step < total {
            checkpoint::save(&path, s)?;
        }
        Ok(())
    })?;
    checkpoint::save(&path, &state)?;
    println!("trained to step {}; checkpoint {}", state.step, path.display());
    Ok(())
}

/// The checkpointed state with the sampler and noise settings of `config`.
fn load_state(config: &RunConfig) -> Result<TrainState, CliError> {
    let mut state = checkpoint::load(&config.paths.checkpoint)?;
    state.config.sampler = config.sampler.clone();
    state.config.noise = config.noise.clone();
    state.config.gaussian_levels = config.gaussian_levels;
    state.config.eval = config.eval.clone();
    Ok(state)
}

fn sample(
    config: &RunConfig,
    instruction: Option<PathBuf>,
    text: Option<String>,
    ref_audio: &[PathBuf],
    ref_image: Option<PathBuf>,
    duration: Option<f64>,
    index: u64,
) -> Result<(), CliError> {
    let source = match (instruction, text) {
        (Some(p), None) => fs::read_to_string(&p).map_err(io_err(&p))?,
        (None, Some(t)) => t.replace("\\n", "\n"),
        _ => return Err(CliError::Usage("sample needs --instruction <file> or --text <instruction>".into())),
    };
    let bundle = parse_instruction(&source)?;
    let state = load_state(config)?;
    let world = state.config.build_world().map_err(DatasetError::from)?;
    let noise_clip = load_noise_clip(config)?;
    let sampler = Sampler {
        noise: noise_source(config, &noise_clip, &world),
        ..Sampler::new(&state, &world)
    };
    let refs = ref_audio
        .iter()
        .map(|p| read_first_matrix(p))
        .collect::<Result<Vec<_>, _>>()?;
    let speakers = refs.iter().map(|r| sampler.embed(r)).collect::<Result<Vec<_>, _>>()?;
    let image = ref_image
        .map(|p| -> Result<Vec<f64>, CliError> {
            let m = read_first_matrix(&p)?;
            if m.rows() == 0 {
                return Err(CliError::Usage(format!("{} holds no frame", p.display())));
            }
            Ok(m.row(0).to_vec())
        })
        .transpose()?;
    let request = GenerationRequest {
        bundle: bundle.clone(),
        speakers: speakers.clone(),
        image,
        duration: duration.unwrap_or(config.data.clip_seconds),
        mask: MaskFlags::default(),
    };
    let clip = sampler.generate(&request, &config.sampler, config.seed, index)?;
    let out = &config.paths.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_matrices(&out.join("sample.snte"), &[("audio", &clip.audio), ("video", &clip.video)])?;
    let truth = bundle.phonemes();
    let expected = (!truth.is_empty()).then_some(truth.len());
    let decoded = decode_phonemes(&clip.audio, &world, expected).map_err(EvalError::from)?;
    let sim = match speakers.first() {
        Some(s) => Some(cosine_similarity(sampler.embed(&clip.audio)?.values(), s.values())?),
        None => None,
    };
    let report = json!({
        "transcript": truth.to_text(),
        "decoded": decoded.to_text(),
        "ter": token_error_rate(&decoded, &truth),
        "sync_score": sync_score(&clip.audio, &clip.video, &world, expected).map_err(EvalError::from)?,
        "speaker_sim": sim,
        "guidance_w": config.sampler.guidance_w,
        "strategy": config.sampler.negative_strategy.to_string(),
        "seed": config.seed,
        "index": index,
    });
    write_json(&out.join("sample.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn eval_setup(config: &RunConfig) -> Result<(TrainState, Dataset, Option<Matrix>), CliError> {
    let state = load_state(config)?;
    let ds = Dataset::load(&config.paths.dataset_dir)?;
    if ds.manifest.world_seed != state.config.world_seed() || ds.manifest.world != state.config.world {
        return Err(CliError::Usage(
            "the dataset was generated from a different world than the checkpoint".into(),
        ));
    }
    let noise = load_noise_clip(config)?;
    Ok((state, ds, noise))
}

fn eval(config: &RunConfig, task: Task) -> Result<(), CliError> {
    let (state, ds, noise) = eval_setup(config)?;
    let sampler = Sampler {
        noise: noise_source(config, &noise, &ds.world),
        ..Sampler::new(&state, &ds.world)
    };
    let cases = eval_cases(&ds, config.eval.n_samples)?;
    let result = evaluate(&sampler, &cases, task, &config.sampler, config.seed)?;
    let path = config.paths.output_dir.join("metrics.json");
    write_json(&path, &result.report)?;
    println!("{}", serde_json::to_string_pretty(&result.report).expect("json"));
    Ok(())
}

fn ablate(config: &RunConfig, task: Task) -> Result<(), CliError> {
    let (state, ds, noise) = eval_setup(config)?;
    let sampler = Sampler {
        noise: noise_source(config, &noise, &ds.world),
        ..Sampler::new(&state, &ds.world)
    };
    let cases = eval_cases(&ds, config.eval.n_samples)?;
    let rows = run_cfg_ablation(&sampler, &cases, task, &config.sampler, config.seed)?;
    let out = &config.paths.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("ablation.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_ablation_csv(&rows, file)?;
    write_ablation_csv(&rows, std::io::stdout())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error[Usage]: {}", e.kind());
            eprint!("{}", e.render());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[Usage]: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
