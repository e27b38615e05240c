//! `renn` command-line tool.
//!
//! Exit codes: 0 success, 2 usage error, 3 shape or config error, 4 I/O or
//! malformed file, 5 numeric failure (divergence, non-finite values).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use renn_core::attack::{evaluate_privacy, summarize, write_rows_csv, write_summary_json, AttackConfig, ReportRow};
use renn_core::dary::{read_file, write_atomic, write_file, DaryPayload};
use renn_core::model_io::{load_critic, load_model, save_critic, save_model};
use renn_core::pipeline::{decrypt_feature, ToyShape};
use renn_core::rotation::{phase_of, RotationMatrix};
use renn_core::training::{train_toy, two_blobs, write_log_csv, Critic, TrainConfig};
use renn_core::{decode, encode, process, sample_rotation, Error, ModelSpec, Seed};

#[derive(Parser)]
#[command(
    name = "renn",
    version,
    about = "Encrypted d-ary feature inference and attack evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random rotation key and write it as a DARY file. Prints its phase.
    GenRotation {
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        d: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one input vector and rotate it with the key.
    Encrypt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the processing stack on an encrypted feature. Needs no key.
    Process {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Undo the rotation, decode, and write the prediction as JSON.
    Decrypt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a small model on two Gaussian blobs.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_log: PathBuf,
        #[arg(long)]
        out_critic: Option<PathBuf>,
        /// Fill the wall_seconds column (makes the log non-reproducible).
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Run the inversion attack on every row of an input file.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// DARY file with one input vector per element.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        critic: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Recompute the aggregate JSON from a per-sample attack CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyRunConfig {
    d: usize,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    model: ModelSection,
    train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    n_train: usize,
    n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 1000,
            n_test: 200,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    hidden: usize,
    features: usize,
    relu_c: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 8,
            features: 4,
            relu_c: 1.0,
        }
    }
}

#[derive(Serialize)]
struct PredictionJson<'a> {
    label: usize,
    scores: &'a [f64],
    feature: &'a [f64],
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Format(_) => 4,
        Error::Diverged { .. } | Error::NonFinite(_) | Error::InsufficientSamples(_) => 5,
        _ => 3,
    }
}

fn read_key(path: &Path) -> Result<RotationMatrix, Error> {
    read_file(path)?.into_rotation()
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>, Error> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenRotation { d, seed, out } => {
            let r = sample_rotation(d as usize, Seed(seed))?;
            write_file(&out, &DaryPayload::from(&r))?;
            let phase = serde_json::to_string(phase_of(&r).coords()).map_err(|e| Error::Format(e.to_string()))?;
            println!("{phase}");
        }
        Command::Encrypt {
            model,
            key,
            input,
            out,
            seed,
        } => {
            let model = load_model(&model)?;
            let key = read_key(&key)?;
            let x = read_file(&input)?.values;
            let f = encode(&x, &model, &key, Seed(seed))?;
            write_file(&out, &DaryPayload::from(&f))?;
        }
        Command::Process {
            model,
            input,
            out,
            seed,
        } => {
            let model = load_model(&model)?;
            let f = read_file(&input)?.into_tensor()?;
            let h = process(&f, &model, Seed(seed), false)?;
            write_file(&out, &DaryPayload::from(&h))?;
        }
        Command::Decrypt { model, key, input, out } => {
            let model = load_model(&model)?;
            let key = read_key(&key)?;
            let h = read_file(&input)?.into_tensor()?;
            let feature = decrypt_feature(&h, &key)?;
            let pred = decode(&h, &key, &model)?;
            let json = PredictionJson {
                label: pred.label,
                scores: &pred.scores,
                feature: &feature,
            };
            write_atomic(&out, &json_bytes(&json)?)?;
        }
        Command::TrainToy {
            config,
            seed,
            out_model,
            out_log,
            out_critic,
            record_wall_time,
        } => {
            let mut cfg: ToyRunConfig = read_toml(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let root = Seed(cfg.train.seed);
            let (train, test) = two_blobs(cfg.data.n_train, cfg.data.n_test, root.derive(100))?;
            let shape = ToyShape {
                input_dim: 2,
                hidden: cfg.model.hidden,
                features: cfg.model.features,
                class_count: 2,
                relu_c: cfg.model.relu_c,
            };
            let model = ModelSpec::toy(cfg.d, shape, root.derive(101))?;
            let critic = Critic::new(
                shape.features,
                cfg.train.critic_hidden,
                cfg.train.clip_c,
                root.derive(102),
            )?;
            let outcome = train_toy(&train, &test, model, critic, &cfg.train)?;
            save_model(&outcome.model, &out_model)?;
            if let Some(p) = out_critic {
                save_critic(&outcome.critic, &p)?;
            }
            write_log_csv(&out_log, &outcome.log, record_wall_time)?;
        }
        Command::Attack {
            config,
            model,
            inputs,
            critic,
            seed,
            out_csv,
            out_json,
        } => {
            let mut cfg: AttackConfig = read_toml(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let model = load_model(&model)?;
            let payload = read_file(&inputs)?;
            let rows: Vec<Vec<f64>> = payload.values.chunks_exact(payload.d).map(<[f64]>::to_vec).collect();
            let critic = critic.as_deref().map(load_critic).transpose()?;
            let reports = evaluate_privacy(&model, &rows, &cfg, critic.as_ref())?;
            let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
            write_rows_csv(&out_csv, &rows)?;
            write_summary_json(&out_json, &summarize(&rows))?;
        }
        Command::Report { input, out } => {
            let rows = renn_core::attack::read_rows_csv(&input)?;
            write_summary_json(&out, &summarize(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
