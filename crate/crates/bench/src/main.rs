use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use speech_refine::config::ServiceConfig;
use speech_refine::pipeline::{Pipeline, SessionStore};
use speech_refine::refine::PromptTemplates;
use speech_refine::sir::{PoolMode, SirModel, TrainHyper};
use speech_refine::Backends;
use speech_refine_bench::listening::{ingest_ratings, write_bundle, ListeningKey};
use speech_refine_bench::profile::{profile_latency, write_profile, ProfileTarget};
use speech_refine_bench::report::write_report;
use speech_refine_bench::speech_eval::{run_speech_eval, SpeechEvalReport, SpeechEvalSettings};
use speech_refine_bench::text_eval::run_text_eval_with;
use speech_refine_bench::train::{dataset_from_manifest, train_and_evaluate, TrainSettings};
use speech_refine_bench::{fixtures, read_manifest, EvalRunConfig, RefinerVariant};

#[derive(Parser)]
#[command(name = "speech-refine", version, about = "Train, evaluate, profile and serve the speech refinement pipeline")]
struct Cli {
    /// Service configuration (JSON); environment overrides apply on top.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; multi-seed runs use seed, seed+1, ...
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for reports and artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for per-entry work.
    #[arg(long, global = true, default_value_t = 4)]
    workers: usize,
    /// Log verbosity, as a tracing filter such as `info` or `speech_refine=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    Mean,
    Attention,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    WithClass,
    WithoutClass,
    Rule,
}

impl From<Variant> for RefinerVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::WithClass => RefinerVariant::WithClass,
            Variant::WithoutClass => RefinerVariant::WithoutClass,
            Variant::Rule => RefinerVariant::Rule,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus (WAV files and manifest.jsonl).
    GenFixtures {
        #[arg(long, default_value_t = 80)]
        per_class: usize,
        /// Also write a long clip of this many seconds for profiling.
        #[arg(long)]
        profile_clip_s: Option<f64>,
    },
    /// Train the impairment classifier and report held-out metrics.
    TrainSir {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, value_enum, default_value = "mean")]
        pool: Pool,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 20)]
        min_per_class: usize,
    },
    /// Score refined text against the intended text.
    EvalText {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "with-class,without-class,rule")]
        variants: Vec<Variant>,
    },
    /// Run the full pipeline on recordings; report recovery and write listening-test materials.
    EvalSpeech {
        #[arg(long)]
        manifest: PathBuf,
        /// Trained classifier; defaults to the configured model_path.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "with-class,without-class")]
        variants: Vec<Variant>,
    },
    /// Measure per-stage latency and real-time factor.
    Profile {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Base URL of a running server; profiles in-process when absent.
        #[arg(long)]
        server: Option<String>,
        /// Environment variable holding the server's bearer token.
        #[arg(long)]
        token_env: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the REST service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Unblind a completed rating sheet and summarise it.
    IngestRatings {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Speech report to fill Clarity and C-MOS into.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).context("--log")?)
        .with_writer(std::io::stderr)
        .init();
    let service = ServiceConfig::load(cli.config.as_deref())?;
    let run = |variants: Vec<RefinerVariant>, n_seeds: usize| -> Result<EvalRunConfig> {
        let cfg = EvalRunConfig {
            seeds: (0..n_seeds as u64).map(|k| cli.seed + k).collect(),
            variants,
            backends: service.backends.clone(),
            out_dir: Some(cli.out.clone()),
            workers: cli.workers,
        };
        cfg.validate()?;
        Ok(cfg)
    };
    let templates = match &service.prompts_dir {
        Some(dir) => PromptTemplates::from_dir(dir)?,
        None => PromptTemplates::default(),
    };

    match cli.command {
        Command::GenFixtures { per_class, profile_clip_s } => {
            let entries = fixtures::write_synthetic_fixture(&cli.out, per_class, cli.seed)?;
            println!("wrote {} clips and {}", entries.len(), cli.out.join("manifest.jsonl").display());
            if let Some(secs) = profile_clip_s {
                let clip = fixtures::long_clip(secs)?;
                let dir = cli.out.join("profile");
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("long.wav"), speech_refine::audio::write_wav(&clip))?;
                let entry = speech_refine_bench::ManifestEntry {
                    sample_id: "long".into(),
                    class_label: speech_refine::ImpairmentClass::Healthy,
                    audio_path: Some("long.wav".into()),
                    intent_text: None,
                    impaired_text: None,
                };
                speech_refine_bench::write_manifest(&dir.join("manifest.jsonl"), &[entry])?;
                println!("wrote {:.2} s profiling clip to {}", clip.duration_s(), dir.display());
            }
        }
        Command::TrainSir { manifest, d, epochs, lr, batch, pool, test_fraction, min_per_class } => {
            let manifest = read_manifest(&manifest)?;
            let settings = TrainSettings {
                hyper: TrainHyper {
                    d,
                    pool_mode: match pool {
                        Pool::Mean => PoolMode::Mean,
                        Pool::Attention => PoolMode::Attention,
                    },
                    lr,
                    epochs,
                    batch,
                    seed: cli.seed,
                },
                test_fraction,
                min_per_class,
                split_seed: cli.seed,
                dsp: service.dsp.clone(),
            };
            let pool = run(vec![RefinerVariant::Rule], 1)?.thread_pool()?;
            let data = dataset_from_manifest(&manifest, &settings.dsp, settings.split_seed, &pool)?;
            let (model, report) = train_and_evaluate(&data, &settings)?;
            std::fs::create_dir_all(&cli.out)?;
            let model_path = cli.out.join("sir_model.json");
            model.save(&model_path)?;
            let text = report.to_text();
            write_report(&cli.out, "train_sir", &report, &text)?;
            print!("{text}");
            println!("model saved to {}", model_path.display());
        }
        Command::EvalText { manifest, seeds, variants } => {
            let manifest = read_manifest(&manifest)?;
            let cfg = run(variants.into_iter().map(Into::into).collect(), seeds)?;
            let backends = Backends::from_config(&cfg.backends)?;
            let report = run_text_eval_with(&manifest, &cfg, &backends, &templates, &service.llm_params)?;
            let text = report.to_text();
            write_report(&cli.out, "eval_text", &report, &text)?;
            print!("{text}");
        }
        Command::EvalSpeech { manifest, model, variants } => {
            let manifest = read_manifest(&manifest)?;
            let cfg = run(variants.into_iter().map(Into::into).collect(), 1)?;
            let model = load_model(model.as_deref().or(service.model_path.as_deref()), &service)?;
            let settings = SpeechEvalSettings {
                dsp: service.dsp.clone(),
                style: service.default_style.clone(),
                templates,
                llm_params: service.llm_params.clone(),
            };
            let out = run_speech_eval(&manifest, &cfg, model, &settings)?;
            let text = out.report.to_text();
            write_report(&cli.out, "eval_speech", &out.report, &text)?;
            write_bundle(&out.listening, &cli.out.join("listening"), &cli.out.join("listening_key.json"))?;
            print!("{text}");
            println!(
                "listening test: {} pairs in {}; key in {}",
                out.listening.manifest.pairs.len(),
                cli.out.join("listening").display(),
                cli.out.join("listening_key.json").display()
            );
        }
        Command::Profile { manifest, trials, server, token_env, model } => {
            let manifest = read_manifest(&manifest)?;
            let cfg = run(vec![RefinerVariant::WithClass], 1)?;
            let clips = manifest
                .entries
                .iter()
                .filter(|e| e.audio_path.is_some())
                .map(|e| Ok((e.sample_id.clone(), manifest.load_audio(e)?)))
                .collect::<Result<Vec<_>>>()?;
            let report = match server {
                Some(url) => {
                    let token = token_env.as_deref().and_then(|name| std::env::var(name).ok());
                    profile_latency(&clips, trials, ProfileTarget::Remote { url, token }, &cfg)?
                }
                None => {
                    let model = load_model(model.as_deref().or(service.model_path.as_deref()), &service)?
                        .context("in-process profiling needs a classifier (--model or model_path)")?;
                    let backends = Backends::from_config(&service.backends)?;
                    let pipeline =
                        Pipeline::new(model, &service.dsp, backends, Arc::new(SessionStore::in_memory()))?
                            .with_templates(templates)
                            .with_llm_params(service.llm_params.clone());
                    profile_latency(&clips, trials, ProfileTarget::InProcess(&pipeline), &cfg)?
                }
            };
            write_profile(&report, &cli.out)?;
            print!("{}", report.to_text());
        }
        Command::Serve { listen } => {
            let mut service = service;
            if let Some(addr) = listen {
                service.listen = addr;
            }
            // Blocking HTTP clients must be built outside the async runtime.
            let state = speech_refine_server::AppState::from_config(&service)?;
            tokio::runtime::Runtime::new()?.block_on(speech_refine_server::serve(service, state))?;
        }
        Command::IngestRatings { ratings, key, report } => {
            let key: ListeningKey = serde_json::from_slice(&std::fs::read(&key).with_context(|| key.display().to_string())?)?;
            let file = std::fs::File::open(&ratings).with_context(|| ratings.display().to_string())?;
            let summary = ingest_ratings(file, &key)?;
            let text = summary.to_text();
            write_report(&cli.out, "ratings", &summary, &text)?;
            print!("{text}");
            if let Some(path) = report {
                let mut speech: SpeechEvalReport = serde_json::from_slice(&std::fs::read(&path)?)?;
                speech.apply_ratings(&summary);
                let text = speech.to_text();
                write_report(&cli.out, "eval_speech_rated", &speech, &text)?;
                print!("\n{text}");
            }
        }
    }
    Ok(())
}

fn load_model(path: Option<&Path>, service: &ServiceConfig) -> Result<Option<Arc<SirModel>>> {
    match path {
        Some(p) => Ok(Some(Arc::new(
            SirModel::load(p, &service.dsp).with_context(|| format!("loading {}", p.display()))?,
        ))),
        None => Ok(None),
    }
}
