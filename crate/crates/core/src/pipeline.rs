//! Commands behind the CLI: calibrate, prune, eval, nsa, sweep and the full
//! `run` pipeline, plus run manifests and the worker pool.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{
    accumulate_stats, load_corpus, sample_texts, CalibStats, DEFAULT_DAMPING_FRACTION, DEFAULT_N_SAMPLES,
    DEFAULT_SEQ_LEN,
};
use crate::error::{Error, Result};
use crate::eval::{corpus_sequences, evaluate, perplexity, EvalResult, TaskFile};
use crate::linalg::Matrix;
use crate::metrics::{Method, MetricConfig, SparseGptSaliency, DEFAULT_RIA_EXPONENT};
use crate::model::{container_bytes, ModelBundle};
use crate::nsa::{
    attribute, load_lexicon, NsaConfig, NsaReport, DEFAULT_DROP_THRESHOLD, DEFAULT_TOP_K, DEFAULT_WORDS_PER_NEURON,
};
use crate::report::{render_nsa_report, sweep_csv, sweep_report, SweepRow};
use crate::sparsify::{prune_model, Group, Pattern, PruneConfig, PruneOutput, DEFAULT_BLOCK_SIZE};
use crate::util::{file_sha256, sha256_hex, to_json_pretty, write_file};

pub const WORKERS_ENV: &str = "PRUNEBENCH_WORKERS";
pub const TOOL: &str = "prunebench";
pub const DEFAULT_PERPLEXITY_LINES: usize = 64;

/// Worker count from `PRUNEBENCH_WORKERS`, defaulting to the logical CPUs.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::invalid(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` on a rayon pool bounded by [`worker_count`].
pub fn with_pool<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command invocation. Output locations are not part of
/// it, so two runs that differ only in where they write agree byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub effective_config: serde_json::Value,
    pub inputs: BTreeMap<String, InputFile>,
    pub outputs: BTreeMap<String, String>,
    /// Only present when timings were requested.
    pub wall_times_ms: Option<BTreeMap<String, f64>>,
}

impl RunManifest {
    fn new(command: &[String], seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_vec(),
            seed,
            config_hash: None,
            effective_config: config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_times_ms: None,
        }
    }

    fn input(&mut self, role: &str, path: &Path, shown: &str) -> Result<String> {
        let sha256 = file_sha256(path)?;
        self.inputs.insert(
            role.to_string(),
            InputFile {
                path: shown.to_string(),
                sha256: sha256.clone(),
            },
        );
        Ok(sha256)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, to_json_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Collects stage wall times when enabled.
struct Timer {
    times: Option<BTreeMap<String, f64>>,
}

impl Timer {
    fn new(enabled: bool) -> Self {
        Self {
            times: enabled.then(BTreeMap::new),
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        if let Some(t) = self.times.as_mut() {
            t.insert(name.to_string(), start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(out)
    }
}

/// Writes a file under `root` and records its hash in `outputs`.
fn emit(root: &Path, rel: &str, bytes: impl AsRef<[u8]>, outputs: &mut BTreeMap<String, String>) -> Result<()> {
    write_file(&root.join(rel), bytes.as_ref())?;
    outputs.insert(rel.to_string(), sha256_hex(bytes.as_ref()));
    Ok(())
}

fn display(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| display(p), |s| s.to_string_lossy().into_owned())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

// ---------------------------------------------------------------- calibrate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSettings {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub damping_fraction: f64,
}

impl Default for CalibSettings {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_N_SAMPLES,
            seq_len: DEFAULT_SEQ_LEN,
            seed: 0,
            damping_fraction: DEFAULT_DAMPING_FRACTION,
        }
    }
}

/// Samples a corpus and accumulates statistics. The stats fingerprint binds
/// the model, the corpus contents and every sampling setting.
pub fn calibrate(bundle: &ModelBundle, lines: &[String], corpus_sha: &str, s: &CalibSettings) -> Result<CalibStats> {
    if s.n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    if s.seq_len == 0 || s.seq_len > bundle.spec().max_seq_len {
        return Err(Error::invalid(format!(
            "seq_len {} must be in 1..={}",
            s.seq_len,
            bundle.spec().max_seq_len
        )));
    }
    if !(s.damping_fraction >= 0.0) || !s.damping_fraction.is_finite() {
        return Err(Error::invalid("damping fraction must be finite and non-negative"));
    }
    let samples = sample_texts(bundle.vocab(), lines, s.n_samples, s.seq_len, s.seed)?;
    let tokens: Vec<Vec<u32>> = samples.into_iter().map(|s| s.tokens).collect();
    let mut stats = accumulate_stats(bundle, &tokens, s.damping_fraction)?;
    let binding = format!(
        "{}|{}|{corpus_sha}|{}|{}|{}",
        stats.fingerprint(),
        bundle.fingerprint(),
        s.n_samples,
        s.seq_len,
        s.seed
    );
    stats.set_fingerprint(sha256_hex(binding.as_bytes()));
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct CalibrateArgs {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub settings: CalibSettings,
    pub out: PathBuf,
    pub record_timings: bool,
}

/// Manifest path of a single-file output.
pub fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn cmd_calibrate(args: &CalibrateArgs, command: &[String]) -> Result<RunManifest> {
    let mut timer = Timer::new(args.record_timings);
    let mut m = RunManifest::new(command, Some(args.settings.seed), serde_json::to_value(&args.settings)?);
    m.input("model", &args.model, &display(&args.model))?;
    let corpus_sha = m.input("corpus", &args.corpus, &display(&args.corpus))?;
    let bundle = ModelBundle::load(&args.model)?;
    let lines = load_corpus(&args.corpus)?;
    let stats = timer.stage("calibrate", || calibrate(&bundle, &lines, &corpus_sha, &args.settings))?;
    let bytes = stats.to_bytes();
    write_file(&args.out, &bytes)?;
    m.outputs.insert(
        args.out.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        sha256_hex(&bytes),
    );
    m.wall_times_ms = timer.times;
    m.save(&sidecar_manifest(&args.out))?;
    Ok(m)
}

// -------------------------------------------------------------------- prune

/// Prune settings as written in configs and on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSettings {
    pub method: Method,
    #[serde(default)]
    pub sparsity: Option<f64>,
    #[serde(default)]
    pub nm: Option<String>,
    #[serde(default)]
    pub permute: bool,
    #[serde(default)]
    pub group: Group,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_ria_exponent")]
    pub ria_exponent: f64,
    #[serde(default)]
    pub sparsegpt_saliency: SparseGptSaliency,
}

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

fn default_ria_exponent() -> f64 {
    DEFAULT_RIA_EXPONENT
}

impl PruneSettings {
    pub fn new(method: Method, pattern: Pattern) -> Self {
        let (sparsity, nm) = match pattern {
            Pattern::Unstructured { ratio } => (Some(ratio), None),
            Pattern::NOfM { .. } => (None, Some(pattern.to_string())),
        };
        Self {
            method,
            sparsity,
            nm,
            permute: false,
            group: Group::PerRow,
            block_size: DEFAULT_BLOCK_SIZE,
            ria_exponent: DEFAULT_RIA_EXPONENT,
            sparsegpt_saliency: SparseGptSaliency::default(),
        }
    }

    pub fn pattern(&self) -> Result<Pattern> {
        match (&self.sparsity, &self.nm) {
            (Some(r), None) => {
                let p = Pattern::Unstructured { ratio: *r };
                p.validate()?;
                Ok(p)
            }
            (None, Some(nm)) => {
                let p: Pattern = nm.parse()?;
                if !matches!(p, Pattern::NOfM { .. }) {
                    return Err(Error::invalid(format!("`{nm}` is not an N:M pattern")));
                }
                Ok(p)
            }
            _ => Err(Error::invalid("give exactly one of a sparsity ratio or an N:M pattern")),
        }
    }

    pub fn to_config(&self) -> Result<PruneConfig> {
        let cfg = PruneConfig {
            metric: MetricConfig {
                method: self.method,
                ria_exponent: self.ria_exponent,
                sparsegpt_saliency: self.sparsegpt_saliency,
            },
            pattern: self.pattern()?,
            permute: self.permute,
            group: self.group,
            block_size: self.block_size,
            record_timings: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes the pruned model, masks and summary under `dir` (paths relative to
/// `root`).
fn write_prune_outputs(
    root: &Path,
    dir: &str,
    out: &PruneOutput,
    write_model: bool,
    outputs: &mut BTreeMap<String, String>,
) -> Result<()> {
    let join = |name: &str| if dir.is_empty() { name.to_string() } else { format!("{dir}/{name}") };
    if write_model {
        emit(root, &join("model.pbw"), out.bundle.to_bytes(), outputs)?;
    }
    for mask in &out.masks {
        emit(root, &join(&format!("masks/{}.mask", mask.layer)), mask.to_bytes(), outputs)?;
    }
    emit(root, &join("prune_summary.json"), to_json_pretty(&out.summary)?, outputs)?;
    if let Some(metrics) = &out.metrics {
        let tensors: Vec<(String, &Matrix)> = metrics.iter().map(|(k, v)| (k.clone(), v)).collect();
        emit(root, &join("metrics.pbw"), container_bytes(None, &tensors), outputs)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PruneArgs {
    pub model: PathBuf,
    pub stats: PathBuf,
    pub settings: PruneSettings,
    pub out: PathBuf,
    pub dump_metrics: bool,
    pub record_timings: bool,
}

pub fn cmd_prune(args: &PruneArgs, command: &[String]) -> Result<RunManifest> {
    let mut timer = Timer::new(args.record_timings);
    let mut m = RunManifest::new(command, None, serde_json::to_value(&args.settings)?);
    m.input("model", &args.model, &display(&args.model))?;
    m.input("stats", &args.stats, &display(&args.stats))?;
    let bundle = ModelBundle::load(&args.model)?;
    let stats = CalibStats::load(&args.stats)?;
    let mut cfg = args.settings.to_config()?;
    cfg.record_timings = args.record_timings;
    let out = timer.stage("prune", || prune_model(&bundle, &stats, &cfg, args.dump_metrics))?;
    let mut outputs = BTreeMap::new();
    write_prune_outputs(&args.out, "", &out, true, &mut outputs)?;
    m.outputs = outputs;
    m.wall_times_ms = timer.times;
    m.save(&args.out.join("manifest.json"))?;
    Ok(m)
}

// --------------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerplexitySettings {
    pub corpus: PathBuf,
    #[serde(default = "default_ppl_lines")]
    pub max_lines: usize,
}

fn default_ppl_lines() -> usize {
    DEFAULT_PERPLEXITY_LINES
}

/// Perplexity over the first `max_lines` lines of a corpus.
pub fn corpus_perplexity(bundle: &ModelBundle, lines: &[String], max_lines: usize) -> Result<f64> {
    let take: Vec<String> = lines.iter().take(max_lines).cloned().collect();
    perplexity(bundle, &corpus_sequences(bundle, &take))
}

fn eval_csv(rows: &[(String, &EvalResult)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    let mut header = vec!["model".to_string()];
    header.extend(EvalResult::CSV_HEADER.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(err)?;
    for (label, r) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(r.csv_record());
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub tasks: Vec<PathBuf>,
    pub perplexity: Option<PerplexitySettings>,
    pub out: PathBuf,
    pub record_timings: bool,
}

pub fn cmd_eval(args: &EvalArgs, command: &[String]) -> Result<RunManifest> {
    if args.tasks.is_empty() && args.perplexity.is_none() {
        return Err(Error::invalid("nothing to evaluate: give task files or a perplexity corpus"));
    }
    let mut timer = Timer::new(args.record_timings);
    let config = serde_json::json!({ "perplexity": args.perplexity });
    let mut m = RunManifest::new(command, None, config);
    m.input("model", &args.model, &display(&args.model))?;
    let bundle = ModelBundle::load(&args.model)?;
    let mut outputs = BTreeMap::new();
    let mut results = Vec::new();
    for (i, path) in args.tasks.iter().enumerate() {
        m.input(&format!("task.{i}"), path, &display(path))?;
        let task = TaskFile::load(path)?;
        let r = timer.stage(&format!("eval.{}", task.task), || evaluate(&bundle, &task))?;
        emit(&args.out, &format!("eval/{}.json", task.task), to_json_pretty(&r)?, &mut outputs)?;
        results.push(r);
    }
    let label = stem(&args.model);
    let rows: Vec<(String, &EvalResult)> = results.iter().map(|r| (label.clone(), r)).collect();
    emit(&args.out, "eval/results.csv", eval_csv(&rows)?, &mut outputs)?;
    if let Some(p) = &args.perplexity {
        m.input("perplexity_corpus", &p.corpus, &display(&p.corpus))?;
        let lines = load_corpus(&p.corpus)?;
        let ppl = timer.stage("perplexity", || corpus_perplexity(&bundle, &lines, p.max_lines))?;
        emit(
            &args.out,
            "eval/perplexity.json",
            to_json_pretty(&serde_json::json!({ "model": label, "perplexity": ppl }))?,
            &mut outputs,
        )?;
    }
    m.outputs = outputs;
    m.wall_times_ms = timer.times;
    m.save(&args.out.join("eval/manifest.json"))?;
    Ok(m)
}

// ---------------------------------------------------------------------- nsa

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsaSettings {
    pub lexicon: PathBuf,
    pub samples: PathBuf,
    pub site: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_words")]
    pub words_per_neuron: usize,
    #[serde(default = "default_threshold")]
    pub drop_threshold: f64,
    #[serde(default)]
    pub signed: bool,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_words() -> usize {
    DEFAULT_WORDS_PER_NEURON
}

fn default_threshold() -> f64 {
    DEFAULT_DROP_THRESHOLD
}

impl NsaSettings {
    pub fn config(&self) -> NsaConfig {
        NsaConfig {
            site: self.site.clone(),
            top_k: self.top_k,
            words_per_neuron: self.words_per_neuron,
            drop_threshold: self.drop_threshold,
            signed: self.signed,
        }
    }
}

fn run_nsa(dense: &ModelBundle, pruned: &ModelBundle, s: &NsaSettings) -> Result<NsaReport> {
    let lexicon = load_lexicon(&s.lexicon)?;
    let samples = load_corpus(&s.samples)?;
    attribute(dense, pruned, &samples, &lexicon, &s.config())
}

fn emit_nsa(root: &Path, report: &NsaReport, outputs: &mut BTreeMap<String, String>) -> Result<()> {
    emit(root, &format!("nsa/{}.json", report.task), to_json_pretty(report)?, outputs)?;
    emit(root, &format!("nsa/{}.html", report.task), render_nsa_report(report), outputs)
}

#[derive(Debug, Clone)]
pub struct NsaArgs {
    pub dense: PathBuf,
    pub pruned: PathBuf,
    pub settings: NsaSettings,
    pub out: PathBuf,
    pub record_timings: bool,
}

pub fn cmd_nsa(args: &NsaArgs, command: &[String]) -> Result<RunManifest> {
    let mut timer = Timer::new(args.record_timings);
    let mut m = RunManifest::new(command, None, serde_json::to_value(&args.settings)?);
    m.input("dense_model", &args.dense, &display(&args.dense))?;
    m.input("pruned_model", &args.pruned, &display(&args.pruned))?;
    m.input("lexicon", &args.settings.lexicon, &display(&args.settings.lexicon))?;
    m.input("samples", &args.settings.samples, &display(&args.settings.samples))?;
    let dense = ModelBundle::load(&args.dense)?;
    let pruned = ModelBundle::load(&args.pruned)?;
    let report = timer.stage("nsa", || run_nsa(&dense, &pruned, &args.settings))?;
    let mut outputs = BTreeMap::new();
    emit_nsa(&args.out, &report, &mut outputs)?;
    m.outputs = outputs;
    m.wall_times_ms = timer.times;
    m.save(&args.out.join("nsa/manifest.json"))?;
    Ok(m)
}

// ---------------------------------------------------------------------- run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibSection {
    pub corpus: PathBuf,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_damping")]
    pub damping_fraction: f64,
}

fn default_n_samples() -> usize {
    DEFAULT_N_SAMPLES
}

fn default_seq_len() -> usize {
    DEFAULT_SEQ_LEN
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING_FRACTION
}

/// The `run` pipeline configuration. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub calibration: CalibSection,
    pub prune: PruneSettings,
    #[serde(default)]
    pub tasks: Vec<PathBuf>,
    #[serde(default)]
    pub perplexity: Option<PerplexitySettings>,
    #[serde(default)]
    pub nsa: Option<NsaSettings>,
}

pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Output directory name derived from the effective config and input hashes.
fn derived_run_id(prefix: &str, manifest: &RunManifest) -> Result<String> {
    let key = serde_json::to_string(&(&manifest.effective_config, &manifest.inputs))?;
    Ok(format!("{prefix}-{}", &sha256_hex(key.as_bytes())[..12]))
}

fn check_run_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::invalid(format!("invalid run id `{id}`")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: RunConfig,
    /// Directory that relative config paths are resolved against.
    pub base_dir: PathBuf,
    pub config_hash: Option<String>,
    pub out_root: PathBuf,
    pub run_id: Option<String>,
    pub record_timings: bool,
}

/// calibrate → prune → eval (dense and pruned) → perplexity → nsa, writing
/// `out_root/<run-id>/`. Returns the run directory and its manifest.
pub fn cmd_run(args: &RunArgs, command: &[String]) -> Result<(PathBuf, RunManifest)> {
    let cfg = &args.config;
    let base = &args.base_dir;
    let mut timer = Timer::new(args.record_timings);
    let mut m = RunManifest::new(command, Some(cfg.seed), serde_json::to_value(cfg)?);
    m.config_hash = args.config_hash.clone();
    let model_path = resolve(base, &cfg.model);
    let corpus_path = resolve(base, &cfg.calibration.corpus);
    m.input("model", &model_path, &display(&cfg.model))?;
    let corpus_sha = m.input("calibration_corpus", &corpus_path, &display(&cfg.calibration.corpus))?;
    for (i, t) in cfg.tasks.iter().enumerate() {
        m.input(&format!("task.{i}"), &resolve(base, t), &display(t))?;
    }
    if let Some(p) = &cfg.perplexity {
        m.input("perplexity_corpus", &resolve(base, &p.corpus), &display(&p.corpus))?;
    }
    if let Some(n) = &cfg.nsa {
        m.input("lexicon", &resolve(base, &n.lexicon), &display(&n.lexicon))?;
        m.input("nsa_samples", &resolve(base, &n.samples), &display(&n.samples))?;
    }
    let run_id = match &args.run_id {
        Some(id) => id.clone(),
        None => derived_run_id("run", &m)?,
    };
    check_run_id(&run_id)?;
    let root = args.out_root.join(&run_id);
    let mut outputs = BTreeMap::new();

    let dense = ModelBundle::load(&model_path)?;
    let settings = CalibSettings {
        n_samples: cfg.calibration.n_samples,
        seq_len: cfg.calibration.seq_len,
        seed: cfg.seed,
        damping_fraction: cfg.calibration.damping_fraction,
    };
    let lines = load_corpus(&corpus_path)?;
    let stats = timer.stage("calibrate", || calibrate(&dense, &lines, &corpus_sha, &settings))?;
    emit(&root, "stats.bin", stats.to_bytes(), &mut outputs)?;

    let mut prune_cfg = cfg.prune.to_config()?;
    prune_cfg.record_timings = args.record_timings;
    let pruned = timer.stage("prune", || prune_model(&dense, &stats, &prune_cfg, false))?;
    write_prune_outputs(&root, "", &pruned, true, &mut outputs)?;

    let mut rows = Vec::new();
    for t in &cfg.tasks {
        let task = TaskFile::load(&resolve(base, t))?;
        let d = timer.stage(&format!("eval.{}.dense", task.task), || evaluate(&dense, &task))?;
        let p = timer.stage(&format!("eval.{}.pruned", task.task), || evaluate(&pruned.bundle, &task))?;
        emit(&root, &format!("eval/{}.dense.json", task.task), to_json_pretty(&d)?, &mut outputs)?;
        emit(&root, &format!("eval/{}.pruned.json", task.task), to_json_pretty(&p)?, &mut outputs)?;
        rows.push(("dense".to_string(), d));
        rows.push(("pruned".to_string(), p));
    }
    if !rows.is_empty() {
        let refs: Vec<(String, &EvalResult)> = rows.iter().map(|(l, r)| (l.clone(), r)).collect();
        emit(&root, "eval/results.csv", eval_csv(&refs)?, &mut outputs)?;
    }
    if let Some(p) = &cfg.perplexity {
        let lines = load_corpus(&resolve(base, &p.corpus))?;
        let (d, q) = timer.stage("perplexity", || {
            Ok((
                corpus_perplexity(&dense, &lines, p.max_lines)?,
                corpus_perplexity(&pruned.bundle, &lines, p.max_lines)?,
            ))
        })?;
        let body = serde_json::json!({ "corpus": display(&p.corpus), "dense": d, "pruned": q });
        emit(&root, "eval/perplexity.json", to_json_pretty(&body)?, &mut outputs)?;
    }
    if let Some(n) = &cfg.nsa {
        let resolved = NsaSettings {
            lexicon: resolve(base, &n.lexicon),
            samples: resolve(base, &n.samples),
            ..n.clone()
        };
        let report = timer.stage("nsa", || run_nsa(&dense, &pruned.bundle, &resolved))?;
        emit_nsa(&root, &report, &mut outputs)?;
    }
    m.outputs = outputs;
    m.wall_times_ms = timer.times;
    m.save(&root.join("manifest.json"))?;
    Ok((root, m))
}

// -------------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub models: Vec<PathBuf>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub sparsities: Vec<f64>,
    #[serde(default)]
    pub nm: Vec<String>,
    #[serde(default)]
    pub permute: bool,
    pub calib_corpora: Vec<PathBuf>,
    #[serde(default = "default_seq_lens")]
    pub seq_lens: Vec<usize>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_damping")]
    pub damping_fraction: f64,
    #[serde(default)]
    pub tasks: Vec<PathBuf>,
    #[serde(default)]
    pub perplexity: Option<PerplexitySettings>,
}

fn default_seq_lens() -> Vec<usize> {
    vec![DEFAULT_SEQ_LEN]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell_id: String,
    pub model: usize,
    pub method: Method,
    pub pattern: Pattern,
    pub corpus: usize,
    pub seq_len: usize,
}

/// The cartesian product of the sweep axes, in canonical order
/// (model, method, pattern, corpus, sequence length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub models: Vec<String>,
    pub methods: Vec<Method>,
    pub patterns: Vec<Pattern>,
    pub corpora: Vec<String>,
    pub seq_lens: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

fn pattern_slug(p: &Pattern) -> String {
    match p {
        Pattern::Unstructured { ratio } => format!("u{ratio}"),
        Pattern::NOfM { n, m } => format!("nm{n}of{m}"),
    }
}

fn unique<T: Ord + Clone + std::fmt::Debug>(axis: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::invalid(format!("sweep axis `{axis}` is empty")));
    }
    let set: BTreeSet<&T> = items.iter().collect();
    if set.len() != items.len() {
        return Err(Error::invalid(format!("sweep axis `{axis}` has duplicate entries: {items:?}")));
    }
    Ok(())
}

impl SweepGrid {
    pub fn new(cfg: &SweepConfig) -> Result<Self> {
        let models: Vec<String> = cfg.models.iter().map(|p| stem(p)).collect();
        let corpora: Vec<String> = cfg.calib_corpora.iter().map(|p| stem(p)).collect();
        unique("models", &models)?;
        unique("methods", &cfg.methods)?;
        unique("calib_corpora", &corpora)?;
        unique("seq_lens", &cfg.seq_lens)?;
        let mut patterns = Vec::new();
        for r in &cfg.sparsities {
            let p = Pattern::Unstructured { ratio: *r };
            p.validate()?;
            patterns.push(p);
        }
        for nm in &cfg.nm {
            let p: Pattern = nm.parse()?;
            if !matches!(p, Pattern::NOfM { .. }) {
                return Err(Error::invalid(format!("`{nm}` is not an N:M pattern")));
            }
            patterns.push(p);
        }
        let labels: Vec<String> = patterns.iter().map(pattern_slug).collect();
        unique("patterns", &labels)?;
        if cfg.permute && cfg.sparsities.iter().len() > 0 {
            return Err(Error::invalid("permute applies to N:M patterns only; split the sweep"));
        }
        let mut cells = Vec::new();
        for (mi, model) in models.iter().enumerate() {
            for method in &cfg.methods {
                for pattern in &patterns {
                    for (ci, corpus) in corpora.iter().enumerate() {
                        for &seq_len in &cfg.seq_lens {
                            let cell_id = format!(
                                "c{:03}-{model}-{method}-{}-{corpus}-s{seq_len}",
                                cells.len(),
                                pattern_slug(pattern)
                            );
                            cells.push(SweepCell {
                                cell_id,
                                model: mi,
                                method: *method,
                                pattern: *pattern,
                                corpus: ci,
                                seq_len,
                            });
                        }
                    }
                }
            }
        }
        let grid = Self {
            models,
            methods: cfg.methods.clone(),
            patterns,
            corpora,
            seq_lens: cfg.seq_lens.clone(),
            cells,
        };
        let expected = grid.models.len() * grid.methods.len() * grid.patterns.len() * grid.corpora.len() * grid.seq_lens.len();
        if grid.cells.len() != expected {
            return Err(Error::Invariant(format!("sweep grid has {} cells, expected {expected}", grid.cells.len())));
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub config: SweepConfig,
    pub base_dir: PathBuf,
    pub config_hash: Option<String>,
    pub out_root: PathBuf,
    pub run_id: Option<String>,
    pub record_timings: bool,
}

pub struct SweepOutcome {
    pub root: PathBuf,
    pub manifest: RunManifest,
    pub grid: SweepGrid,
    pub rows: Vec<SweepRow>,
}

struct CellResult {
    rows: Vec<SweepRow>,
    outputs: BTreeMap<String, String>,
}

pub fn cmd_sweep(args: &SweepArgs, command: &[String]) -> Result<SweepOutcome> {
    let cfg = &args.config;
    let base = &args.base_dir;
    let grid = SweepGrid::new(cfg)?;
    let mut timer = Timer::new(args.record_timings);
    let mut m = RunManifest::new(command, Some(cfg.seed), serde_json::to_value(cfg)?);
    m.config_hash = args.config_hash.clone();
    let mut model_shas = Vec::new();
    for (i, p) in cfg.models.iter().enumerate() {
        model_shas.push(m.input(&format!("model.{i}"), &resolve(base, p), &display(p))?);
    }
    let mut corpus_shas = Vec::new();
    for (i, p) in cfg.calib_corpora.iter().enumerate() {
        corpus_shas.push(m.input(&format!("calib_corpus.{i}"), &resolve(base, p), &display(p))?);
    }
    for (i, t) in cfg.tasks.iter().enumerate() {
        m.input(&format!("task.{i}"), &resolve(base, t), &display(t))?;
    }
    if let Some(p) = &cfg.perplexity {
        m.input("perplexity_corpus", &resolve(base, &p.corpus), &display(&p.corpus))?;
    }
    let run_id = match &args.run_id {
        Some(id) => id.clone(),
        None => derived_run_id("sweep", &m)?,
    };
    check_run_id(&run_id)?;
    let root = args.out_root.join(&run_id);

    let models: Vec<ModelBundle> = cfg.models.iter().map(|p| ModelBundle::load(&resolve(base, p))).collect::<Result<_>>()?;
    let corpora: Vec<Vec<String>> = cfg
        .calib_corpora
        .iter()
        .map(|p| load_corpus(&resolve(base, p)))
        .collect::<Result<_>>()?;
    let tasks: Vec<TaskFile> = cfg.tasks.iter().map(|t| TaskFile::load(&resolve(base, t))).collect::<Result<_>>()?;
    let ppl_lines = match &cfg.perplexity {
        Some(p) => Some((load_corpus(&resolve(base, &p.corpus))?, p.max_lines)),
        None => None,
    };

    let (rows, outputs) = with_pool(|| {
        // statistics per (model, corpus, seq_len)
        let keys: Vec<(usize, usize, usize)> = (0..models.len())
            .flat_map(|mi| (0..corpora.len()).flat_map(move |ci| cfg.seq_lens.iter().map(move |&s| (mi, ci, s))))
            .collect();
        let stats: Vec<CalibStats> = timer.stage("calibrate", || {
            keys.par_iter()
                .map(|&(mi, ci, seq_len)| {
                    let s = CalibSettings {
                        n_samples: cfg.n_samples,
                        seq_len,
                        seed: cfg.seed,
                        damping_fraction: cfg.damping_fraction,
                    };
                    calibrate(&models[mi], &corpora[ci], &corpus_shas[ci], &s)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut outputs = BTreeMap::new();
        for (&(mi, ci, seq_len), s) in keys.iter().zip(&stats) {
            let rel = format!("stats/{}-{}-s{seq_len}.bin", grid.models[mi], grid.corpora[ci]);
            emit(&root, &rel, s.to_bytes(), &mut outputs)?;
        }
        let stats_of = |mi: usize, ci: usize, seq_len: usize| {
            let k = keys.iter().position(|&key| key == (mi, ci, seq_len)).expect("stats key");
            &stats[k]
        };
        let dense_ppl: Vec<Option<f64>> = models
            .iter()
            .map(|b| ppl_lines.as_ref().map(|(l, n)| corpus_perplexity(b, l, *n)).transpose())
            .collect::<Result<_>>()?;
        log::info!("sweep: {} cells on {} workers", grid.cells.len(), rayon::current_num_threads());
        let results: Vec<CellResult> = timer.stage("cells", || {
            grid.cells
                .par_iter()
                .map(|cell| {
                    let bundle = &models[cell.model];
                    let mut settings = PruneSettings::new(cell.method, cell.pattern);
                    settings.permute = cfg.permute;
                    let pc = settings.to_config()?;
                    let pruned = prune_model(bundle, stats_of(cell.model, cell.corpus, cell.seq_len), &pc, false)?;
                    let mut outputs = BTreeMap::new();
                    let dir = format!("cells/{}", cell.cell_id);
                    write_prune_outputs(&root, &dir, &pruned, false, &mut outputs)?;
                    let ppl = match &ppl_lines {
                        Some((l, n)) => Some(corpus_perplexity(&pruned.bundle, l, *n)?),
                        None => None,
                    };
                    let mut rows = Vec::new();
                    for task in &tasks {
                        let r = evaluate(&pruned.bundle, task)?;
                        emit(&root, &format!("{dir}/eval/{}.json", task.task), to_json_pretty(&r)?, &mut outputs)?;
                        rows.push(SweepRow {
                            cell_id: cell.cell_id.clone(),
                            model: grid.models[cell.model].clone(),
                            method: cell.method.to_string(),
                            pattern: cell.pattern.to_string(),
                            calib_corpus: grid.corpora[cell.corpus].clone(),
                            seq_len: cell.seq_len,
                            task: task.task.clone(),
                            category: task.category.to_string(),
                            n_items: r.n_items,
                            correct: r.correct,
                            accuracy: r.accuracy,
                            perplexity: ppl,
                        });
                    }
                    if tasks.is_empty() {
                        rows.push(SweepRow {
                            cell_id: cell.cell_id.clone(),
                            model: grid.models[cell.model].clone(),
                            method: cell.method.to_string(),
                            pattern: cell.pattern.to_string(),
                            calib_corpus: grid.corpora[cell.corpus].clone(),
                            seq_len: cell.seq_len,
                            task: String::new(),
                            category: String::new(),
                            n_items: 0,
                            correct: 0,
                            accuracy: 0.0,
                            perplexity: ppl,
                        });
                    }
                    Ok(CellResult { rows, outputs })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut rows = Vec::new();
        for r in results {
            rows.extend(r.rows);
            outputs.extend(r.outputs);
        }
        if let Some((_, _)) = &ppl_lines {
            let dense: BTreeMap<&str, Option<f64>> =
                grid.models.iter().map(String::as_str).zip(dense_ppl.iter().copied()).collect();
            emit(&root, "dense_perplexity.json", to_json_pretty(&dense)?, &mut outputs)?;
        }
        emit(&root, "grid.json", to_json_pretty(&grid)?, &mut outputs)?;
        emit(&root, "sweep.csv", sweep_csv(&rows)?, &mut outputs)?;
        emit(&root, "sweep_report.md", sweep_report(&rows), &mut outputs)?;
        Ok((rows, outputs))
    })?;
    m.outputs = outputs;
    m.wall_times_ms = timer.times;
    m.save(&root.join("manifest.json"))?;
    Ok(SweepOutcome {
        root,
        manifest: m,
        grid,
        rows,
    })
}

/// Configs shipped with the fixtures, as (relative path, bytes).
pub fn fixture_configs() -> Result<Vec<(String, Vec<u8>)>> {
    let run = RunConfig {
        model: "../model/tiny-2L.pbw".into(),
        seed: 42,
        calibration: CalibSection {
            corpus: "../corpora/reviews.jsonl".into(),
            n_samples: 64,
            seq_len: 64,
            damping_fraction: DEFAULT_DAMPING_FRACTION,
        },
        prune: PruneSettings::new(Method::Wanda, Pattern::Unstructured { ratio: 0.5 }),
        tasks: crate::fixture::TASKS
            .iter()
            .map(|t| PathBuf::from(format!("../{}", crate::fixture::task_file(t))))
            .collect(),
        perplexity: Some(PerplexitySettings {
            corpus: "../corpora/wiki.jsonl".into(),
            max_lines: 32,
        }),
        nsa: Some(NsaSettings {
            lexicon: format!("../{}", crate::fixture::LEXICON_FILE).into(),
            samples: format!("../{}", crate::fixture::NSA_SAMPLES_FILE).into(),
            site: "layer.1.mlp.act".into(),
            top_k: DEFAULT_TOP_K,
            words_per_neuron: DEFAULT_WORDS_PER_NEURON,
            drop_threshold: DEFAULT_DROP_THRESHOLD,
            signed: false,
        }),
    };
    let sweep = SweepConfig {
        models: vec!["../model/tiny-2L.pbw".into()],
        methods: vec![Method::Wanda],
        sparsities: (1..=8).map(|i| i as f64 / 10.0).collect(),
        nm: vec![],
        permute: false,
        calib_corpora: vec!["../corpora/wiki.jsonl".into()],
        seq_lens: vec![64],
        n_samples: 64,
        seed: 42,
        damping_fraction: DEFAULT_DAMPING_FRACTION,
        tasks: vec![format!("../{}", crate::fixture::task_file("sentiment")).into()],
        perplexity: Some(PerplexitySettings {
            corpus: "../corpora/wiki.jsonl".into(),
            max_lines: 32,
        }),
    };
    let corpora = SweepConfig {
        methods: Method::ALL.to_vec(),
        sparsities: vec![0.5],
        calib_corpora: crate::fixture::CORPORA
            .iter()
            .map(|c| PathBuf::from(format!("../{}", crate::fixture::corpus_file(c))))
            .collect(),
        tasks: crate::fixture::TASKS
            .iter()
            .map(|t| PathBuf::from(format!("../{}", crate::fixture::task_file(t))))
            .collect(),
        ..sweep.clone()
    };
    Ok(vec![
        ("configs/pipeline.json".into(), to_json_pretty(&run)?.into_bytes()),
        ("configs/sweep_sparsity.json".into(), to_json_pretty(&sweep)?.into_bytes()),
        ("configs/sweep_corpora.json".into(), to_json_pretty(&corpora)?.into_bytes()),
    ])
}
