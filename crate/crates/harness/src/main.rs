use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use condsep::classifier::{pretrain, Classifier, ClassifierConfig};
use condsep::separator::CLASSIFIER1_PREFIX;
use condsep::synthdata::{build_dataset, load_example, read_wav, write_wav, DatasetManifest, Split};
use harness::checkpoint::{classifier_checkpoint, load_classifier, Checkpoint};
use harness::config::{expand_grid, load_config, ClassifierTrainConfig, DataConfig, ExperimentConfig, KvConfig};
use harness::error::{HarnessError, Result};
use harness::eval::evaluate;
use harness::experiment::Experiment;
use harness::plot::plot_embeddings;
use harness::sweep::{collect_records, render_table, summary, sweep};
use harness::train::train;

#[derive(Parser)]
#[command(name = "condsep", about = "Classifier-conditioned sound separation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of mixtures and write WAV files plus a manifest.
    MakeData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the sound classifier on a dataset.
    PretrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one separation setting.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        basis: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained classifier checkpoint.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Run directory for the checkpoint and record.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a separation checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Examples to score (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        /// Directory for `eval.csv` and `eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separate one WAV file.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clean source WAVs, needed only by the oracle settings.
        #[arg(long = "source")]
        sources: Vec<PathBuf>,
    },
    /// Plot top-class probabilities of one example.
    PlotEmbeddings {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configuration of a grid file.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Base configuration the grid overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the run records under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn parse<T: std::str::FromStr>(what: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| HarnessError::Config(format!("{what} `{v}`: {e}")))
}

fn load_classifier_opt(path: Option<&PathBuf>) -> Result<Option<condsep::classifier::ClassifierParams>> {
    path.map(|p| load_classifier(&Checkpoint::load(p)?)).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData { config, out } => {
            let cfg: DataConfig = load_config(config.as_deref())?;
            let manifest = build_dataset(&cfg.0, &out)?;
            println!("{} examples written to {}", manifest.entries.len(), out.display());
        }
        Command::PretrainClassifier { data, config, out } => {
            let cfg: ClassifierTrainConfig = load_config(config.as_deref())?;
            let manifest = DatasetManifest::load(&data)?;
            let classifier = Classifier::new(ClassifierConfig::new(manifest.num_classes()), CLASSIFIER1_PREFIX)?;
            let (params, report) = pretrain(&manifest, &classifier, &cfg.0)?;
            classifier_checkpoint(&params, &report, cfg.0.steps as u64)?.save(&out)?;
            println!(
                "validation accuracy {:.4}, mAP {:.4}; saved {}",
                report.validation_accuracy,
                report.validation_map,
                out.display()
            );
        }
        Command::Train { data, setting, basis, config, classifier, out } => {
            let mut cfg: ExperimentConfig = load_config(config.as_deref())?;
            if let Some(s) = setting {
                cfg.set("setting", &s)?;
            }
            if let Some(b) = basis {
                cfg.set("basis", &b)?;
            }
            let manifest = DatasetManifest::load(&data)?;
            let classifier = load_classifier_opt(classifier.as_ref())?;
            let run_id = out.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
            let outcome = train(&cfg, &manifest, classifier.as_ref(), &run_id, Some(&out))?;
            println!(
                "best validation SI-SDRi {:.3} dB at step {}",
                outcome.record.best_validation().unwrap_or(f64::NAN),
                outcome.record.best_step.unwrap_or(0)
            );
        }
        Command::Evaluate { checkpoint, data, split, limit, out } => {
            let split: Split = parse("split", &split)?;
            let manifest = DatasetManifest::load(&data)?;
            let report = evaluate(&Checkpoint::load(&checkpoint)?, &manifest, split, limit)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                report.write_csv(&dir.join("eval.csv"))?;
                report.write_json(&dir.join("eval.json"))?;
            }
            println!("{} on {split}: mean SI-SDRi {:.3} dB", report.setting, report.mean_si_sdri);
        }
        Command::Separate { checkpoint, input, out, sources } => {
            let exp = Experiment::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let mixture = read_wav(&input)?;
            let refs = sources.iter().map(|p| read_wav(p)).collect::<condsep::Result<Vec<_>>>()?;
            let sep = exp.separate(&mixture, (!refs.is_empty()).then_some(refs.as_slice()))?;
            let last = sep.stage2.as_ref().unwrap_or(&sep.stage1);
            fs::create_dir_all(&out)?;
            for (k, est) in last.estimates.iter().enumerate() {
                let path = out.join(format!("source{}.wav", k + 1));
                write_wav(&path, est)?;
                println!("{}", path.display());
            }
        }
        Command::PlotEmbeddings { classifier, data, id, out } => {
            let params = load_classifier(&Checkpoint::load(&classifier)?)?;
            let manifest = DatasetManifest::load(&data)?;
            let id = match id {
                Some(id) => id,
                None => manifest
                    .ids(Split::Test)
                    .into_iter()
                    .next()
                    .ok_or_else(|| HarnessError::Config("test split is empty".into()))?,
            };
            let example = load_example(&manifest, &id)?;
            let names: Vec<String> = manifest.info.classes.iter().map(|c| c.name.clone()).collect();
            for panel in plot_embeddings(&example, &params, &names, &out)? {
                println!("{}", panel.png.display());
            }
        }
        Command::Sweep { grid, data, config, classifier, out } => {
            let base: ExperimentConfig = load_config(config.as_deref())?;
            let grid = expand_grid(&fs::read_to_string(&grid)?, &base)?;
            let manifest = DatasetManifest::load(&data)?;
            let classifier = load_classifier_opt(classifier.as_ref())?;
            fs::create_dir_all(&out)?;
            let records = sweep(&grid, &manifest, classifier.as_ref(), Some(&out))?;
            print!("{}", render_table(&summary(&records)));
        }
        Command::Report { runs } => {
            print!("{}", render_table(&summary(&collect_records(&runs)?)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
