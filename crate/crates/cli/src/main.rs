use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use prunebench::metrics::Method;
use prunebench::nsa::{materialize_suggestions, suggest_words};
use prunebench::pipeline::{
    cmd_calibrate, cmd_eval, cmd_nsa, cmd_prune, cmd_run, cmd_sweep, load_config, with_pool, CalibSettings,
    CalibrateArgs, EvalArgs, NsaArgs, NsaSettings, PerplexitySettings, PruneArgs, PruneSettings, RunArgs,
    RunConfig, SweepArgs, SweepConfig, DEFAULT_PERPLEXITY_LINES,
};
use prunebench::sparsify::{Group, DEFAULT_BLOCK_SIZE};
use prunebench::util::{file_sha256, sha256_hex};
use prunebench::{calib, fixture, nsa, Error};

const SUGGEST_ENV: &str = "PRUNEBENCH_SUGGEST_URL";

#[derive(Parser)]
#[command(name = "prunebench", version, about = "Post-training pruning laboratory for a tiny decoder-only transformer")]
struct Cli {
    /// Record per-stage wall times in manifests (makes them non-reproducible).
    #[arg(long, global = true)]
    record_timings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate calibration statistics for every prunable layer.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = calib::DEFAULT_N_SAMPLES)]
        n_samples: usize,
        #[arg(long, default_value_t = calib::DEFAULT_SEQ_LEN)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = calib::DEFAULT_DAMPING_FRACTION)]
        damping: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a model with calibration statistics.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[command(flatten)]
        prune: PruneFlags,
        /// Also write the saliency matrices to metrics.pbw.
        #[arg(long)]
        dump_metrics: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on task files and optionally a perplexity corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "task")]
        tasks: Vec<PathBuf>,
        #[arg(long)]
        perplexity_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PERPLEXITY_LINES)]
        perplexity_lines: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Neuron semantic attribution of a dense model against its pruned copy.
    Nsa {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value = "layer.1.mlp.act")]
        site: String,
        #[arg(long, default_value_t = nsa::DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value_t = nsa::DEFAULT_WORDS_PER_NEURON)]
        words_per_neuron: usize,
        #[arg(long, default_value_t = nsa::DEFAULT_DROP_THRESHOLD)]
        drop_threshold: f64,
        /// Use signed activations in the score instead of magnitudes.
        #[arg(long)]
        signed: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate, prune, evaluate and attribute in one go from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every cell of a sweep grid from a JSON config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the fixture model, corpora, tasks and configs.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask an external service for influential words and save them as a lexicon.
    Suggest {
        #[arg(long)]
        task: String,
        #[arg(long)]
        samples: PathBuf,
        /// Service URL; falls back to the PRUNEBENCH_SUGGEST_URL variable.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PruneFlags {
    #[arg(long)]
    method: Method,
    /// Unstructured sparsity ratio in [0, 1].
    #[arg(long, conflicts_with = "nm", required_unless_present = "nm")]
    sparsity: Option<f64>,
    /// N:M pattern such as 2:4.
    #[arg(long)]
    nm: Option<String>,
    /// Search a column permutation before N:M selection.
    #[arg(long)]
    permute: bool,
    #[arg(long, default_value = "per_row")]
    group: Group,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: usize,
}

impl PruneFlags {
    fn settings(&self) -> PruneSettings {
        PruneSettings {
            method: self.method,
            sparsity: self.sparsity,
            nm: self.nm.clone(),
            permute: self.permute,
            group: self.group,
            block_size: self.block_size,
            ..PruneSettings::new(self.method, prunebench::sparsify::Pattern::Unstructured { ratio: 0.0 })
        }
    }
}

/// Flags that take precedence over the run config file.
#[derive(Args)]
struct RunOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, conflicts_with = "nm")]
    sparsity: Option<f64>,
    #[arg(long)]
    nm: Option<String>,
    #[arg(long)]
    permute: bool,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    run_id: Option<String>,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.prune.method = m;
        }
        if let Some(r) = self.sparsity {
            cfg.prune.sparsity = Some(r);
            cfg.prune.nm = None;
        }
        if let Some(nm) = &self.nm {
            cfg.prune.nm = Some(nm.clone());
            cfg.prune.sparsity = None;
        }
        if self.permute {
            cfg.prune.permute = true;
        }
        if let Some(n) = self.n_samples {
            cfg.calibration.n_samples = n;
        }
        if let Some(s) = self.seq_len {
            cfg.calibration.seq_len = s;
        }
    }
}

/// The invocation as recorded in manifests. The output location is left out
/// so that the same command writing elsewhere yields the same manifest.
fn recorded_command() -> Vec<String> {
    let mut out = vec!["prunebench".to_string()];
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--out" {
            args.next();
        } else if !a.starts_with("--out=") {
            out.push(a);
        }
    }
    out
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let command = recorded_command();
    let timings = cli.record_timings;
    match cli.command {
        Command::Calibrate {
            model,
            corpus,
            n_samples,
            seq_len,
            seed,
            damping,
            out,
        } => {
            let args = CalibrateArgs {
                model,
                corpus,
                settings: CalibSettings {
                    n_samples,
                    seq_len,
                    seed,
                    damping_fraction: damping,
                },
                out,
                record_timings: timings,
            };
            with_pool(|| cmd_calibrate(&args, &command))?;
            println!("wrote {}", args.out.display());
        }
        Command::Prune {
            model,
            stats,
            prune,
            dump_metrics,
            out,
        } => {
            let args = PruneArgs {
                model,
                stats,
                settings: prune.settings(),
                out,
                dump_metrics,
                record_timings: timings,
            };
            let m = with_pool(|| cmd_prune(&args, &command))?;
            println!("wrote {} files under {}", m.outputs.len(), args.out.display());
        }
        Command::Eval {
            model,
            tasks,
            perplexity_corpus,
            perplexity_lines,
            out,
        } => {
            let args = EvalArgs {
                model,
                tasks,
                perplexity: perplexity_corpus.map(|corpus| PerplexitySettings {
                    corpus,
                    max_lines: perplexity_lines,
                }),
                out,
                record_timings: timings,
            };
            with_pool(|| cmd_eval(&args, &command))?;
            print!("{}", std::fs::read_to_string(args.out.join("eval/results.csv"))?);
        }
        Command::Nsa {
            dense,
            pruned,
            lexicon,
            samples,
            site,
            top_k,
            words_per_neuron,
            drop_threshold,
            signed,
            out,
        } => {
            let args = NsaArgs {
                dense,
                pruned,
                settings: NsaSettings {
                    lexicon,
                    samples,
                    site,
                    top_k,
                    words_per_neuron,
                    drop_threshold,
                    signed,
                },
                out,
                record_timings: timings,
            };
            let m = with_pool(|| cmd_nsa(&args, &command))?;
            for rel in m.outputs.keys() {
                println!("wrote {}", args.out.join(rel).display());
            }
        }
        Command::Run { config, overrides, out } => {
            let mut cfg: RunConfig = load_config(&config)?;
            overrides.apply(&mut cfg);
            let args = RunArgs {
                config: cfg,
                base_dir: config_dir(&config),
                config_hash: Some(file_sha256(&config)?),
                out_root: out,
                run_id: overrides.run_id.clone(),
                record_timings: timings,
            };
            let (root, _) = with_pool(|| cmd_run(&args, &command))?;
            println!("{}", root.display());
        }
        Command::Sweep {
            config,
            seed,
            n_samples,
            run_id,
            out,
        } => {
            let mut cfg: SweepConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_samples {
                cfg.n_samples = n;
            }
            let args = SweepArgs {
                config: cfg,
                base_dir: config_dir(&config),
                config_hash: Some(file_sha256(&config)?),
                out_root: out,
                run_id,
                record_timings: timings,
            };
            let outcome = cmd_sweep(&args, &command)?;
            println!("{} cells, {} rows", outcome.grid.cells.len(), outcome.rows.len());
            println!("{}", outcome.root.display());
        }
        Command::GenFixtures { out } => {
            let set = with_pool(fixture::generate)?;
            let written = set.write(&out)?;
            println!(
                "wrote {} files (temperature {}, model {})",
                written.len(),
                set.temperature,
                &set.bundle.fingerprint()[..12]
            );
        }
        Command::Suggest {
            task,
            samples,
            endpoint,
            out,
        } => {
            let endpoint = endpoint.or_else(|| std::env::var(SUGGEST_ENV).ok());
            let texts = calib::load_corpus(&samples)?;
            let words = suggest_words(endpoint.as_deref(), &task, &texts)?;
            let lex = materialize_suggestions(&task, &words, &out)
                .with_context(|| format!("saving suggestions to {}", out.display()))?;
            println!(
                "{} words for `{task}` saved to {} ({})",
                lex.words.len(),
                out.display(),
                &sha256_hex(lex.words.join("\n").as_bytes())[..12]
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
