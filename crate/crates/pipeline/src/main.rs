use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inpaint_core::checkpoint::Archive;
use inpaint_core::metrics::{MetricRecord, MetricRegistry};
use inpaint_pipeline::config::RunConfig;
use inpaint_pipeline::evaluate::{evaluate_utterance, records_for, write_report, EvalInput};
use inpaint_pipeline::grid::{grid_search, rows_to_jsonl};
use inpaint_pipeline::infer::{load_mel, output_paths, run_inpaint, Models};
use inpaint_pipeline::manifest::{ingest, load_split, Utterance};
use inpaint_pipeline::toy::write_toy_corpus;
use inpaint_pipeline::train::{classifier_from_archive, denoiser_from_archive, target_tokens, train_ctc, train_ddpm};
use inpaint_pipeline::{Error, Result};

#[derive(Parser)]
#[command(name = "inpaint", version, about = "Diffusion-based speech inpainting with transcript guidance")]
struct Cli {
    /// Root for relative output folders.
    #[arg(long, global = true, env = "INPAINT_OUTPUT_ROOT", default_value = ".")]
    output_root: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set guidance.w2=0.8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the manifest and fit normalization stats.
    Ingest(ConfigArgs),
    /// Train the denoiser.
    TrainDdpm {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the newest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the CTC classifier on noised spectrograms.
    TrainCtc {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        resume: bool,
    },
    /// Inpaint the evaluation split.
    Inpaint {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        models: ModelPaths,
    },
    /// Score previously inpainted spectrograms against their references.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        models: ModelPaths,
        /// Folder written by `inpaint`.
        #[arg(long)]
        outputs: PathBuf,
    },
    /// Rank every (w1, w2) pair of the configured grid.
    GridSearch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        models: ModelPaths,
    },
    /// Write the synthetic corpus and a desk-scale config into a folder.
    Desk {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ModelPaths {
    /// Denoiser weights; `<output>/denoiser.safetensors` by default.
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Classifier weights; `<output>/classifier.safetensors` by default.
    #[arg(long)]
    classifier: Option<PathBuf>,
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(&a.config, &a.overrides)
}

fn write_config_copy(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(out.join("config.sha256"), cfg.hash() + "\n")?;
    Ok(())
}

struct Loaded {
    denoiser: inpaint_core::models::AnyDenoiser<f32>,
    kind: inpaint_core::models::DenoiserKind,
    classifier: Option<(inpaint_core::guidance::Conformer<f32>, inpaint_core::guidance::Vocab)>,
    stats: inpaint_core::audio::MelStats,
    schedule: inpaint_core::diffusion::DiffusionSchedule<f32>,
}

impl Loaded {
    fn models(&self) -> Models<'_> {
        Models {
            denoiser: &self.denoiser,
            denoiser_kind: self.kind,
            classifier: self.classifier.as_ref().map(|(c, v)| (c, v)),
            stats: &self.stats,
            schedule: &self.schedule,
        }
    }
}

fn load_models(cfg: &RunConfig, out: &Path, paths: &ModelPaths) -> Result<Loaded> {
    let dpath = paths.denoiser.clone().unwrap_or_else(|| out.join("denoiser.safetensors"));
    let (denoiser, dcfg, stats) = denoiser_from_archive(&Archive::load(&dpath)?)?;
    let cpath = paths.classifier.clone().unwrap_or_else(|| out.join("classifier.safetensors"));
    let classifier = if cpath.is_file() {
        let (c, v, _) = classifier_from_archive(&Archive::load(&cpath)?)?;
        Some((c, v))
    } else {
        None
    };
    Ok(Loaded {
        denoiser,
        kind: dcfg.kind,
        classifier,
        stats,
        schedule: cfg.schedule.build()?,
    })
}

fn eval_split(cfg: &RunConfig) -> Result<Vec<Utterance>> {
    let path = cfg.data.eval_manifest.as_ref().unwrap_or(&cfg.data.manifest);
    load_split(path, cfg.data.eval_min_duration_s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => {
            let cfg = load_config(&a)?;
            let out = cfg.output_path(&cli.output_root);
            let corpus = ingest(&cfg.data.manifest, cfg.data.min_duration_s)?;
            write_config_copy(&cfg, &out)?;
            corpus.stats.save(&out.join("stats.txt"))?;
            println!(
                "{} utterances, log-mel range [{:.4}, {:.4}]",
                corpus.utterances.len(),
                corpus.stats.global_min,
                corpus.stats.global_max
            );
        }
        Command::TrainDdpm { cfg: a, resume } => {
            let cfg = load_config(&a)?;
            let out = cfg.output_path(&cli.output_root);
            let corpus = ingest(&cfg.data.manifest, cfg.data.min_duration_s)?;
            write_config_copy(&cfg, &out)?;
            let r = train_ddpm(&cfg, &corpus, &out, resume)?;
            println!("denoiser trained to step {} -> {}", r.final_step, r.model_path.display());
        }
        Command::TrainCtc { cfg: a, resume } => {
            let cfg = load_config(&a)?;
            let out = cfg.output_path(&cli.output_root);
            let corpus = ingest(&cfg.data.manifest, cfg.data.min_duration_s)?;
            write_config_copy(&cfg, &out)?;
            let r = train_ctc(&cfg, &corpus, &out, resume)?;
            println!("classifier trained for {} epochs -> {}", r.final_step, r.model_path.display());
        }
        Command::Inpaint { cfg: a, models } => {
            let cfg = load_config(&a)?;
            let out = cfg.output_path(&cli.output_root);
            let loaded = load_models(&cfg, &out, &models)?;
            let utts = eval_split(&cfg)?;
            let s = run_inpaint(&cfg, &loaded.models(), &utts, &out.join("inpaint"), &MetricRegistry::new())?;
            for m in &s.report.summary {
                println!("{:<12} median {:?} mean {:?} (n={})", m.metric, m.median, m.mean, m.count);
            }
            println!("report sha256 {}", s.report.report_sha256);
            if !s.failed.is_empty() {
                return Err(Error::Runtime(format!("{} of {} utterances failed", s.failed.len(), utts.len())));
            }
        }
        Command::Evaluate { cfg: a, models, outputs } => {
            let cfg = load_config(&a)?;
            let out = cfg.output_path(&cli.output_root);
            let loaded = load_models(&cfg, &out, &models)?;
            let hash = cfg.hash();
            let mut records: Vec<MetricRecord> = Vec::new();
            for utt in eval_split(&cfg)? {
                let (mel_p, _, wav_p) = output_paths(&outputs, utt.id());
                if !mel_p.is_file() {
                    log::warn!("no output for {}", utt.id());
                    continue;
                }
                let (gen, mask) = load_mel(&mel_p)?;
                let gen_wave = if wav_p.is_file() {
                    Some(inpaint_core::audio::read_wav(&wav_p)?)
                } else {
                    None
                };
                let tokens = loaded
                    .classifier
                    .as_ref()
                    .and_then(|(_, v)| target_tokens(v, &utt.entry.transcript, utt.entry.phonemes.as_deref()).ok());
                let reference = utt.mel(&loaded.stats)?;
                let values = evaluate_utterance(
                    &EvalInput {
                        reference: &reference,
                        generated: &gen,
                        mask: &mask,
                        reference_wave: Some(&utt.wave),
                        generated_wave: gen_wave.as_ref(),
                        transcript: Some(&utt.entry.transcript),
                        classifier: loaded.classifier.as_ref().zip(tokens.as_ref()).map(|((c, _), y)| (c, y)),
                    },
                    &loaded.stats,
                    &MetricRegistry::new(),
                )?;
                records.extend(records_for(utt.id(), values, &hash));
            }
            let files = write_report(&outputs.join("evaluation"), &records, &hash)?;
            for m in &files.summary {
                println!("{:<12} median {:?} mean {:?} (n={})", m.metric, m.median, m.mean, m.count);
            }
        }
        Command::GridSearch { cfg: a, models } => {
            let cfg = load_config(&a)?;
            let out = cfg.output_path(&cli.output_root);
            let loaded = load_models(&cfg, &out, &models)?;
            let utts = eval_split(&cfg)?;
            let rows = grid_search(&cfg, &loaded.models(), &utts, &cfg.grid.w1, &cfg.grid.w2, &MetricRegistry::new())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("grid.jsonl"), rows_to_jsonl(&rows)?)?;
            for r in rows.iter().take(5) {
                println!("#{:<3} w1={:<5} w2={:<5} {:?} {:?}", r.rank, r.w1, r.w2, r.primary, r.secondary);
            }
            println!("{} rows -> {}", rows.len(), out.join("grid.jsonl").display());
        }
        Command::Desk { dir } => {
            let manifest = write_toy_corpus(&dir.join("corpus"))?;
            let cfg = RunConfig::desk(PathBuf::from("corpus/manifest.jsonl"));
            std::fs::write(dir.join("desk.toml"), cfg.to_toml()?)?;
            println!("wrote {} and {}", manifest.display(), dir.join("desk.toml").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
