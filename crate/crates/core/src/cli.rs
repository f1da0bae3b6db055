//! `tvg` command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::Radius;
use crate::data::{self, compute_snr, DatasetManifest, SyntheticSpec};
use crate::detection::PredictionRecord;
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalQuery};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::par::{self, Parallelism};
use crate::training::{self, TrainConfig, LOSS_LOG_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullTag {
    Full,
}

/// A radius in config files: a number or `"full"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiusSpec {
    Window(usize),
    Full(FullTag),
}

impl From<RadiusSpec> for Radius {
    fn from(r: RadiusSpec) -> Self {
        match r {
            RadiusSpec::Window(r) => Radius::Window(r),
            RadiusSpec::Full(_) => Radius::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub t_values: Vec<usize>,
    pub l: usize,
    pub radii: Vec<RadiusSpec>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            t_values: vec![200, 600],
            l: 20,
            radii: vec![
                RadiusSpec::Window(4),
                RadiusSpec::Window(8),
                RadiusSpec::Window(16),
                RadiusSpec::Full(FullTag::Full),
            ],
            repeats: 5,
        }
    }
}

/// Default file locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

/// Whole-run configuration. Every field has a default, so `{}` is a valid
/// desk-scale run. `seed` drives data generation, initialization, and
/// training order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("config: {e}"),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    /// Applies the top-level seed to every sub-config.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.data.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let (m, d) = (&self.model, &self.data);
        if d.t > m.max_t || d.feature_dim != m.feature_dim || d.vocab_size > m.vocab_size || d.query_len[1] > m.max_l {
            return Err(Error::Config(format!(
                "data (T={}, F={}, vocab={}, max query {}) does not fit the model (max_t={}, F={}, vocab={}, max_l={})",
                d.t, d.feature_dim, d.vocab_size, d.query_len[1], m.max_t, m.feature_dim, m.vocab_size, m.max_l
            )));
        }
        if self.bench.repeats == 0 {
            return Err(Error::Config("bench.repeats must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON run configuration; omitted fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw [default: config `seed`, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel loops
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output path (see each subcommand for its default)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "tvg", version, about = "Temporal video grounding on synthetic planted-segment videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory [--out default: data]
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Index of the first sample in the seeded stream
        #[arg(long, default_value_t = 0)]
        offset: u64,
    },
    /// Train a model and write a checkpoint [--out default: model.ckpt]
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: config paths.data_dir, else data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Loss CSV [default: config paths.loss_log, else <out>.loss.csv]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Training steps [default: config train.steps]
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate [default: config train.lr]
        #[arg(long)]
        lr: Option<f64>,
        /// Batch size [default: config train.batch_size]
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run two-stage inference and score it [--out default: eval.json]
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint [default: config paths.checkpoint, else model.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory [default: config paths.data_dir, else data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction JSONL [default: config paths.predictions, else <out>.predictions.jsonl]
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Benchmark full versus neighboring attention [--out default: bench.csv]
    Bench {
        #[command(flatten)]
        common: Common,
        /// Timed passes per configuration [default: config bench.repeats]
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Summarize a checkpoint, feature file, or annotation file
    Inspect {
        #[command(flatten)]
        common: Common,
        /// File to inspect
        path: PathBuf,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Format { .. } | Error::Parse { .. } => 3,
        _ => 1,
    }
}

fn setup(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref())?.with_seed(common.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn mode(threads: usize) -> Parallelism {
    if threads > 1 {
        Parallelism::Parallel
    } else {
        Parallelism::Sequential
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.paths.data_dir.clone()).unwrap_or_else(|| "data".into())
}

pub fn cmd_gen_data(common: &Common, count: usize, offset: u64) -> Result<String> {
    let cfg = setup(common)?;
    let out = common.out.clone().unwrap_or_else(|| "data".into());
    let samples = par::with_threads(common.threads, || data::generate(&cfg.data, offset, count, mode(common.threads)))??;
    let manifest = DatasetManifest {
        count,
        offset,
        spec: cfg.data.clone(),
    };
    data::write_dataset(&out, &manifest, &samples)?;
    Ok(format!("wrote {count} samples to {}", out.display()))
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

pub fn cmd_train(common: &Common, args: TrainArgs) -> Result<String> {
    let mut cfg = setup(common)?;
    cfg.train.steps = args.steps.unwrap_or(cfg.train.steps);
    cfg.train.lr = args.lr.unwrap_or(cfg.train.lr);
    cfg.train.batch_size = args.batch_size.unwrap_or(cfg.train.batch_size);
    cfg.train.validate()?;

    let dir = data_dir(args.data, &cfg);
    let out = common
        .out
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .unwrap_or_else(|| "model.ckpt".into());
    let log_path = args
        .log
        .or_else(|| cfg.paths.loss_log.clone())
        .unwrap_or_else(|| with_suffix(&out, ".loss.csv"));

    let samples: Vec<_> = data::load_dataset(&dir)?.iter().map(data::to_sample).collect();
    if samples.is_empty() {
        return Err(Error::Contract(format!("{} holds no samples", dir.display())));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;

    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io)?;
    let result = par::with_threads(common.threads, || {
        training::train_loop(&mut model, &samples, &cfg.train, mode(common.threads), |step, l| {
            writeln!(log, "{}", l.csv_row(step)).map_err(io)
        })
    })?;
    log.flush().map_err(io)?;
    let losses = result?;

    model.save(&out)?;
    let last = losses.last().map_or(f64::NAN, |l| l.total);
    Ok(format!(
        "trained {} steps on {} samples; final loss {last}; checkpoint {}; log {}",
        losses.len(),
        samples.len(),
        out.display(),
        log_path.display()
    ))
}

pub fn cmd_eval(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, predictions: Option<PathBuf>) -> Result<String> {
    let cfg = setup(common)?;
    let ckpt = checkpoint
        .or_else(|| cfg.paths.checkpoint.clone())
        .unwrap_or_else(|| "model.ckpt".into());
    let dir = data_dir(data, &cfg);
    let out = common.out.clone().unwrap_or_else(|| "eval.json".into());
    let pred_path = predictions
        .or_else(|| cfg.paths.predictions.clone())
        .unwrap_or_else(|| with_suffix(&out, ".predictions.jsonl"));

    let model = Model::load(cfg.model.clone(), &ckpt)?;
    let dataset = data::load_dataset(&dir)?;
    let inputs: Vec<_> = dataset.iter().map(|(x, a)| (x, a.token_ids.as_slice())).collect();
    let ranked = par::with_threads(common.threads, || {
        eval::predict_all(&model, &inputs, cfg.train.n, mode(common.threads))
    })??;

    let records: Vec<PredictionRecord> = dataset
        .iter()
        .zip(&ranked)
        .map(|((_, a), r)| PredictionRecord::new(a.query_id.clone(), r))
        .collect();
    let queries: Vec<EvalQuery> = dataset
        .iter()
        .map(|(_, a)| EvalQuery {
            query_id: a.query_id.clone(),
            gt: a.span(),
            snr: compute_snr(a),
        })
        .collect();
    let spans: Vec<_> = records.iter().map(PredictionRecord::spans).collect();
    let result = eval::evaluate(&queries, &spans, &cfg.eval)?;

    write(&pred_path, eval::prediction_lines(&records))?;
    write(&out, result.to_json())?;
    let mut msg = format!("{} queries", result.query_count);
    for (k, v) in &result.recall {
        let _ = write!(msg, "; {k} = {v:.2}");
    }
    Ok(msg)
}

pub fn cmd_bench(common: &Common, repeats: Option<usize>) -> Result<String> {
    let cfg = setup(common)?;
    let out = common.out.clone().unwrap_or_else(|| "bench.csv".into());
    let b = &cfg.bench;
    let repeats = repeats.unwrap_or(b.repeats);
    let radii: Vec<Radius> = b.radii.iter().map(|&r| r.into()).collect();
    let mut rows = Vec::new();
    for &t in &b.t_values {
        rows.extend(eval::bench_report(t, b.l, &radii, repeats, cfg.model.d_model, cfg.model.heads, cfg.seed)?);
    }
    write(&out, eval::bench_csv(&rows))?;
    Ok(format!("{} configurations written to {}", rows.len(), out.display()))
}

/// Human-readable summary of a checkpoint, feature file, or annotation file.
pub fn inspect_bytes(bytes: &[u8]) -> Result<String> {
    if bytes.starts_with(checkpoint::MAGIC) {
        let (manifest, _) = checkpoint::decode_manifest(bytes)?;
        checkpoint::decode(bytes)?;
        let mut s = format!(
            "checkpoint: {} tensors, {} parameters\n",
            manifest.params.len(),
            manifest.total_params()
        );
        for e in &manifest.params {
            let _ = writeln!(s, "  {} {:?}", e.name, e.shape);
        }
        return Ok(s);
    }
    if bytes.starts_with(data::FEATURE_MAGIC) {
        let x = data::decode_features(bytes)?;
        return Ok(format!("features: {}×{} float64 (version {})\n", x.rows(), x.cols(), data::FEATURE_VERSION));
    }
    let text = std::str::from_utf8(bytes).ok().filter(|t| t.trim_start().starts_with('{'));
    match text {
        Some(t) => {
            let anns = data::parse_annotations(t)?;
            let snrs: Vec<f64> = anns.iter().map(compute_snr).collect();
            let (lo, hi) = snrs
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
            Ok(format!("annotations: {} queries, SNR range [{lo:.3}, {hi:.3}]\n", anns.len()))
        }
        None => Err(Error::Format {
            offset: 0,
            msg: "unrecognized file format".into(),
        }),
    }
}

pub fn cmd_inspect(common: &Common, path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let summary = inspect_bytes(&bytes)?;
    if let Some(out) = &common.out {
        write(out, &summary)?;
    }
    Ok(summary.trim_end().to_string())
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { common, count, offset } => cmd_gen_data(&common, count, offset),
        Command::Train {
            common,
            data,
            log,
            steps,
            lr,
            batch_size,
        } => cmd_train(
            &common,
            TrainArgs {
                data,
                log,
                steps,
                lr,
                batch_size,
            },
        ),
        Command::Eval {
            common,
            checkpoint,
            data,
            predictions,
        } => cmd_eval(&common, checkpoint, data, predictions),
        Command::Bench { common, repeats } => cmd_bench(&common, repeats),
        Command::Inspect { common, path } => cmd_inspect(&common, &path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn empty_document_is_the_desk_run() {
        let cfg = RunConfig::from_json("{}").unwrap();
        cfg.validate().unwrap();
        let m = &cfg.model;
        assert_eq!((m.max_t, m.feature_dim, m.d_model, m.heads, m.enc_layers, m.cross_layers), (100, 32, 64, 4, 2, 4));
        assert_eq!(m.anchor_scales, vec![4, 8, 16, 32]);
        assert_eq!((cfg.train.n, cfg.train.n_pos), (16, 4));
        assert_eq!(cfg.train.weights.mu, 1e-3);
        assert_eq!(cfg.train.weights.lambda, 0.1);
        assert_eq!(cfg.train.weights.iou_threshold, 0.5);
        assert_eq!(cfg.data.t, 100);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(RunConfig::from_json("{\"modle\": {}}"), Err(Error::Parse { .. })));
        assert!(matches!(RunConfig::from_json("{"), Err(Error::Parse { .. })));
        let mut cfg = RunConfig::default();
        cfg.data.feature_dim = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig::from_json(r#"{"bench": {"radii": [2, "full"]}}"#).unwrap();
        assert_eq!(cfg.bench.radii[1], RadiusSpec::Full(FullTag::Full));
    }

    #[test]
    fn seed_flag_wins() {
        let cfg = RunConfig::from_json(r#"{"seed": 5}"#).unwrap();
        let a = cfg.clone().with_seed(None);
        assert_eq!((a.seed, a.train.seed, a.data.seed), (5, 5, 5));
        let b = cfg.with_seed(Some(9));
        assert_eq!((b.seed, b.train.seed, b.data.seed), (9, 9, 9));
    }

    #[test]
    fn exit_codes() {
        let missing = Error::io("x", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&missing), 2);
        assert_eq!(exit_code(&Error::Format { offset: 3, msg: String::new() }), 3);
        assert_eq!(exit_code(&Error::Numeric("nan".into())), 1);
    }

    #[test]
    fn help_lists_defaults() {
        Cli::command().debug_assert();
        for sub in ["gen-data", "train", "eval", "bench", "inspect"] {
            let mut cmd = Cli::command();
            let help = cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string();
            for flag in ["--config", "--seed", "--threads", "--out"] {
                assert!(help.contains(flag), "{sub} lacks {flag}");
            }
            assert!(help.contains("default"), "{sub}");
        }
    }

    #[test]
    fn inspect_rejects_unknown_bytes() {
        assert!(matches!(inspect_bytes(b"\x00\x01garbage"), Err(Error::Format { offset: 0, .. })));
        let f = data::encode_features(3, 2, &[0.0; 6]).unwrap();
        assert_eq!(inspect_bytes(&f).unwrap(), "features: 3×2 float64 (version 1)\n");
        assert!(matches!(inspect_bytes(&f[..20]), Err(Error::Format { offset: 20, .. })));
    }
}
