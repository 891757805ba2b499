//! `lid`: synthesize corpora, extract features, train and evaluate the
//! dialect identification systems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dialect_lid::corpus::{load_manifest, load_features, synth_corpus, Corpus, SynthSpec, DIALECTS_FILE, VOCAB_FILE};
use dialect_lid::ctc::{ctc_greedy_decode, write_alignment_table};
use dialect_lid::eval::{compare_systems, evaluate, write_report, Metrics, COMPARISON_CSV, COMPARISON_TXT};
use dialect_lid::frontend::{Frontend, Waveform};
use dialect_lid::models::{AcousticModel, Vocab};
use dialect_lid::pipeline::{
    align_corpus, configure_threads, run_baseline, run_three_stage, run_two_stage, Checkpoint, Dataset, StageId,
    System, SystemConfig, SystemKind,
};

#[derive(Parser)]
#[command(name = "lid", version, about = "Multi-stage dialect identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialect corpus.
    SynthCorpus {
        /// TOML corpus description; defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute log-mel features for a manifest and cache them.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// System config whose `[frontend]` table to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a complete system into an output directory.
    Train {
        #[arg(long)]
        system: SystemKind,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seed for every stage, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Feature cache directory (as written by `featurize`).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Force-align a manifest with a trained acoustic model.
    Align {
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy phoneme decoding of one WAV file.
    Decode {
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        utt: PathBuf,
        /// Phoneme list to print unit names instead of ids.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Evaluate a trained system on a test manifest.
    Evaluate {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Name shown in comparison tables; defaults to the system kind.
        #[arg(long)]
        name: Option<String>,
    },
    /// Compare evaluation reports in a table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Directory for comparison.csv / comparison.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match configure_threads().map_err(anyhow::Error::from).and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<dialect_lid::Error>().is_some_and(|e| e.is_numerical()));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn parent(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn system_config(path: Option<&Path>) -> Result<SystemConfig> {
    match path {
        Some(p) => SystemConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(SystemConfig::default()),
    }
}

/// Dialect names from `dialects.txt` beside the manifest, or `d0`, `d1`, …
fn dialect_names(dir: &Path, n: usize) -> Result<Vec<String>> {
    let path = dir.join(DIALECTS_FILE);
    if !path.is_file() {
        return Ok((0..n).map(|i| format!("d{i}")).collect());
    }
    let names: Vec<String> = std::fs::read_to_string(&path)?.lines().map(str::to_string).collect();
    if names.len() < n {
        bail!("{} lists {} dialects, manifest uses {n}", path.display(), names.len());
    }
    Ok(names)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthCorpus { spec, out } => {
            let spec = match spec {
                Some(p) => SynthSpec::from_toml(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SynthSpec::default(),
            };
            let (train, test) = synth_corpus(&spec, &out)?;
            println!("wrote {} train and {} test utterances to {}", train.len(), test.len(), out.display());
        }
        Command::Featurize { manifest, cache, config } => {
            let frontend = system_config(config.as_deref())?.frontend;
            let m = load_manifest(&manifest)?;
            let features = load_features(parent(&manifest), &m, &frontend, Some(&cache))?;
            let frames: usize = features.iter().map(|f| f.frames).sum();
            println!("cached {} utterances ({frames} frames) in {}", features.len(), cache.display());
        }
        Command::Train {
            system,
            corpus,
            config,
            out,
            seed,
            cache,
        } => {
            let mut cfg = system_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let corpus = Corpus::load(&corpus)?;
            let train = Dataset::from_manifest(
                &corpus.root,
                &corpus.train,
                corpus.vocab.clone(),
                corpus.n_dialects(),
                &cfg.frontend,
                cache.as_deref(),
            )?;
            let convergence = match system {
                SystemKind::Baseline => run_baseline(&train, &cfg, &out)?.convergence,
                SystemKind::TwoStage => run_two_stage(&train, &cfg, &out, None)?.convergence,
                SystemKind::ThreeStage => run_three_stage(&train, &cfg, &out, None)?.convergence,
            };
            for e in &convergence.entries {
                println!("{}: converged after {} epoch(s), kept epoch {}", e.stage, e.epochs, e.best_epoch);
            }
        }
        Command::Align { am, manifest, out } => {
            let ckpt = Checkpoint::load(&am)?;
            ckpt.expect_stage(StageId::Am)?;
            let root = parent(&manifest);
            let m = load_manifest(&manifest)?;
            let vocab = Vocab::load(&root.join(VOCAB_FILE))?;
            let data = Dataset::from_manifest(root, &m, vocab, m.n_dialects(), &ckpt.meta.frontend, None)?;
            let (table, skipped) = align_corpus(&data, &ckpt)?;
            write_alignment_table(&out, &table)?;
            println!("aligned {} utterances, skipped {}", table.len(), skipped.len());
        }
        Command::Decode { am, utt, vocab } => {
            let ckpt = Checkpoint::load(&am)?;
            ckpt.expect_stage(StageId::Am)?;
            let wave = Waveform::read_wav(&utt)?;
            let features = Frontend::new(ckpt.meta.frontend.clone(), wave.sample_rate)?.features(&wave)?;
            let model = AcousticModel {
                config: ckpt.meta.model,
                params: ckpt.params,
            };
            let ids = ctc_greedy_decode(&model.infer(&features)?.0);
            let tokens: Vec<String> = match vocab {
                Some(p) => {
                    let v = Vocab::load(&p)?;
                    if v.hash() != ckpt.meta.vocab_hash {
                        bail!("{} does not match the checkpoint's vocabulary", p.display());
                    }
                    ids.iter().map(|&i| v.unit(i).unwrap_or("?").to_string()).collect()
                }
                None => ids.iter().map(usize::to_string).collect(),
            };
            println!("{}", tokens.join(" "));
        }
        Command::Evaluate {
            system,
            test,
            report,
            name,
        } => {
            let (sys, manifest) = System::load(&system)?;
            let root = parent(&test);
            let m = load_manifest(&test)?;
            let vocab_path = root.join(VOCAB_FILE);
            let vocab = if vocab_path.is_file() {
                Vocab::load(&vocab_path)?
            } else {
                Vocab::synthetic(manifest.model.vocab_size)
            };
            let data = Dataset::from_manifest(root, &m, vocab, manifest.dialects, &manifest.frontend, None)?;
            let names = dialect_names(root, manifest.dialects)?;
            let name = name.unwrap_or_else(|| sys.kind().to_string());
            let (metrics, predictions) = evaluate(&sys, &name, &names[..manifest.dialects], &data)?;
            write_report(&metrics, &predictions, &report)?;
            print!("{}", metrics.summary());
        }
        Command::Compare { reports, out } => {
            let metrics = reports.iter().map(|d| Metrics::load(d)).collect::<dialect_lid::Result<Vec<_>>>()?;
            if metrics.len() < 2 {
                bail!("compare needs at least two reports");
            }
            let table = compare_systems(&metrics);
            print!("{}", table.to_text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(COMPARISON_CSV), table.to_csv())?;
                std::fs::write(dir.join(COMPARISON_TXT), table.to_text())?;
            }
        }
    }
    Ok(())
}
