//! `sepcount`: generate data, train, count, separate and evaluate.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sepcount_core::checkpoint::Checkpoint;
use sepcount_core::counter::{
    calibrate_rank_threshold, counting_benchmark, default_threshold_grid, gde_count_scaled, rank_count,
    BenchmarkConfig, GdePredictor, RankPredictor,
};
use sepcount_core::data::{build_dataset, wav_read, wav_write, MANIFEST_FILE, PEAK};
use sepcount_core::selfcheck;
use sepcount_core::trainer::{load_split, model_counting_table, TrainSession};
use sepcount_core::{evaluate, CountMode, Error, Manifest, Preset, Regime, Separator, Split, Waveform};

use config::{CountModeName, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Config(String),
    Io(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::Io(_) => 4,
            Failure::Check(_) => 10,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Capacity { .. } => 3,
                Error::Io { .. } => 4,
                Error::WavFormat { .. } | Error::WavParse { .. } => 5,
                Error::Checkpoint(_) => 6,
                Error::Manifest { .. } | Error::Empty(_) => 7,
                Error::NoSource => 9,
                Error::Diverged { .. }
                | Error::Numeric(_)
                | Error::NonFiniteGradient(_)
                | Error::ZeroPower(_)
                | Error::ZeroReference => 8,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Check(m) => write!(f, "self-check failed: {m}"),
        }
    }
}

/// Speech separation with source counting.
///
/// Exit codes: 0 ok, 2 usage, 3 configuration, 4 i/o, 5 wav format,
/// 6 checkpoint, 7 dataset, 8 numeric, 9 no source detected,
/// 10 self-check failure.
#[derive(Parser, Debug)]
#[command(name = "sepcount", version)]
struct Cli {
    /// TOML configuration file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for data, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model and dataset scale.
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (WAVs and manifest).
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Source counts to generate, comma separated.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Train on a generated corpus.
    Train {
        /// Corpus directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Estimate the number of speakers in a WAV file.
    Count {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Separate a WAV file into `<input>_src<i>.wav`.
    Separate {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Known speaker count; skips counting.
        #[arg(long)]
        num_speakers: Option<usize>,
        #[arg(long, value_enum)]
        count_mode: Option<CountModeName>,
        /// Output directory (default: next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a corpus split and compare counting methods.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum)]
        count_mode: Option<CountModeName>,
        /// Directory for report.csv, summary.txt and counting.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the COLA and gradient-check suites.
    Selfcheck,
    /// Counting accuracy on synthetic embeddings, GDE against the rank baseline.
    Benchmark {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::Generate { out, counts } => {
            if let Some(c) = counts {
                cfg.data.counts = c;
            }
            for &c in &cfg.data.counts {
                if c > cfg.model.num_centers {
                    return Err(Error::Capacity {
                        requested: c,
                        capacity: cfg.model.num_centers,
                    }
                    .into());
                }
            }
            let m = build_dataset(&cfg.data, &out)?;
            println!("wrote {} records to {}", m.records.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Train {
            data,
            out,
            epochs,
            regime,
            checkpoint,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(r) = regime {
                cfg.train.regime = r;
            }
            cfg.train.preset = cfg.preset;
            let manifest = Manifest::read(&data)?;
            let train = load_split(&manifest, Split::Train)?;
            let valid = load_split(&manifest, Split::Valid)?;
            let mut session = match checkpoint {
                Some(p) => TrainSession::from_checkpoint(&Checkpoint::load(&p)?)?,
                None => TrainSession::new(&cfg.train, cfg.model.clone())?,
            };
            println!(
                "training {} parameters on {} mixtures ({} valid)",
                session.model.num_parameters(),
                train.len(),
                valid.len()
            );
            let outcome = session.run(&cfg.train, &train, &valid, Some(&out), &mut |s| {
                let v = s.valid_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!("epoch {:>4}  train {:.4}  valid {v}", s.epoch, s.train_loss);
            })?;
            println!(
                "saved {} and {} (best epoch {})",
                out.join("last.ckpt").display(),
                out.join("best.ckpt").display(),
                outcome.best.header.epoch
            );
        }
        Command::Count { input, checkpoint } => {
            let model = load_model(&checkpoint)?;
            let x = wav_read(&input)?;
            let v = model.embeddings(&x)?.v;
            let g = gde_count_scaled(&v, cfg.count.gde_scale)?;
            let r = rank_count(&v, cfg.count.rank_threshold)?;
            println!("estimated speakers (GDE): {}", g.estimate);
            println!("rank baseline (threshold {}): {}", cfg.count.rank_threshold, r);
            println!("factor F(N): {:.6}", g.factor);
            if g.saturated {
                println!("warning: no non-positive GDE value; estimate saturated");
            }
            println!("{:>3} {:>14} {:>14} {:>14}", "k", "center", "radius", "GDE(k)");
            for k in 0..g.gde.len() {
                println!("{:>3} {:>14.6e} {:>14.6e} {:>14.6e}", k + 1, g.centers[k], g.radii[k], g.gde[k]);
            }
        }
        Command::Separate {
            input,
            checkpoint,
            num_speakers,
            count_mode,
            out,
        } => {
            if let Some(n) = num_speakers {
                cfg.count.num_speakers = Some(n);
                cfg.count.mode = CountModeName::Oracle;
            } else if let Some(m) = count_mode {
                cfg.count.mode = m;
            }
            let model = load_model(&checkpoint)?;
            let x = wav_read(&input)?;
            let sep = model.separate(&x, count_mode_for(&cfg, None)?)?;
            for w in &sep.warnings {
                eprintln!("warning: {w}");
            }
            let dir = match &out {
                Some(d) => {
                    fs::create_dir_all(d).map_err(|e| Failure::Io(format!("{}: {e}", d.display())))?;
                    d.clone()
                }
                None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let stem = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "input".into());
            println!("separated {} sources", sep.count);
            for (i, est) in sep.estimates.iter().enumerate() {
                let p = dir.join(format!("{stem}_src{}.wav", i + 1));
                wav_write(&p, &peak_normalize(est)?)?;
                println!("{}", p.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            count_mode,
            out,
        } => {
            if let Some(m) = count_mode {
                cfg.count.mode = m;
            }
            let model = load_model(&checkpoint)?;
            let manifest = Manifest::read(&data)?;
            let items = load_split(&manifest, split)?;
            let report = evaluate(&model, &items, count_mode_for(&cfg, Some(0))?)?;
            let gde = GdePredictor {
                scale: cfg.count.gde_scale,
            };
            let rank = RankPredictor {
                threshold: cfg.count.rank_threshold,
            };
            let table = model_counting_table(&model, &items, &[&gde, &rank])?;
            let summary = report.summary()?;
            print!("{summary}\n{}", table.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
                for (name, text) in [
                    ("report.csv", report.to_csv()),
                    ("summary.txt", summary),
                    ("counting.csv", table.to_csv()),
                ] {
                    let p = dir.join(name);
                    fs::write(&p, text).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
                }
            }
        }
        Command::Selfcheck => {
            let results = selfcheck::run_all()?;
            let mut failed = 0;
            for r in &results {
                println!("{}", r.line());
                if !r.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} of {} suites failed", results.len())));
            }
            println!("all {} suites passed", results.len());
        }
        Command::Benchmark { trials, out } => {
            let base = BenchmarkConfig {
                trials_per_count: trials,
                seed: cfg.seed,
                ..BenchmarkConfig::default()
            };
            let mut calib = base.clone();
            calib.embeddings.noise = (0.05, 0.05);
            calib.seed = cfg.seed.wrapping_add(1);
            let (thr, acc) = calibrate_rank_threshold(&calib, &default_threshold_grid())?;
            println!("rank threshold calibrated at sigma = 0.05: {thr} ({acc:.1} %)");
            let gde = GdePredictor {
                scale: cfg.count.gde_scale,
            };
            let rank = RankPredictor { threshold: thr };
            let table = counting_benchmark(&base, &[&gde, &rank])?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
                let p = dir.join("counting_benchmark.csv");
                fs::write(&p, table.to_csv()).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            }
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Separator, Failure> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Separator::from_params(ckpt.header.model.clone(), ckpt.params)?)
}

/// Oracle mode needs a count: `--num-speakers`, or `fallback` (evaluation
/// substitutes each record's own count).
fn count_mode_for(cfg: &RunConfig, fallback: Option<usize>) -> Result<CountMode, Failure> {
    Ok(match cfg.count.mode {
        CountModeName::Oracle => CountMode::Oracle {
            count: cfg
                .count
                .num_speakers
                .or(fallback)
                .ok_or_else(|| Failure::Config("oracle counting needs --num-speakers".into()))?,
        },
        CountModeName::Gde => CountMode::Gde {
            scale: cfg.count.gde_scale,
        },
        CountModeName::Rank => CountMode::Rank {
            threshold: cfg.count.rank_threshold,
        },
    })
}

/// Estimates carry no absolute scale; write them at the corpus peak level.
fn peak_normalize(w: &Waveform) -> Result<Waveform, Failure> {
    let peak = w.peak();
    if peak == 0.0 {
        return Ok(w.clone());
    }
    Ok(Waveform::new(w.samples().iter().map(|v| v * PEAK / peak).collect())?)
}
