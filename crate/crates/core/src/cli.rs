//! The `affect` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 diverged
//! training.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_idx_dataset, parse_signal_csv, SignalDataset, StateAssignment, SyntheticParams,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_scatter_svg};
use crate::inference::{
    embed_dataset, infer_state_mahalanobis, infer_state_with_temperature, mind_react, InferenceResult, Mind,
    MindMember, TrainedManifold, DEFAULT_TEMPERATURE,
};
use crate::manifold::{canonical_margins, embeddability_check, Canonical, ManifoldSpec};
use crate::network::{mlp_layers, EmbeddingNetwork, DEFAULT_DROPOUT};
use crate::training::{continue_train, train, TrainConfig, TrainOutcome, TrainingLog};

pub const SEED_ENV: &str = "AFFECT_SEED";

/// Where the manifold definition comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifoldSource {
    /// A built-in manifold; `d` is taken from the dataset.
    Canonical {
        canonical: Canonical,
        #[serde(default = "default_embedding_dim")]
        embedding_dim: usize,
    },
    Path(PathBuf),
    Inline(ManifoldSpec),
}

fn default_embedding_dim() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticParams),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Raw label (digit) to state id.
        assignment: StateAssignment,
    },
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Initialization seed; the training seed when absent.
    pub seed: Option<u64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![128, 64],
            dropout: DEFAULT_DROPOUT,
            seed: None,
        }
    }
}

/// A complete training run. Relative paths resolve against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifold: ManifoldSource,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_split_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

impl RunConfig {
    /// The synthetic reference experiment: `states`-state Gaussian clusters
    /// (d = 20, 500 per state, separation 6, seed 1), p = 2, b = 32,
    /// λp = λn = 1, 10 epochs, hidden widths 128/64 without dropout, Adam at
    /// learning rate 1e-2, training seed 1.
    pub fn reference(which: Canonical) -> Self {
        RunConfig {
            manifold: ManifoldSource::Canonical {
                canonical: which,
                embedding_dim: 2,
            },
            dataset: DatasetSource::Synthetic(SyntheticParams::reference(which.state_names().len())),
            network: NetworkConfig {
                hidden: vec![128, 64],
                dropout: 0.0,
                seed: None,
            },
            train: TrainConfig {
                learning_rate: 1e-2,
                seed: 1,
                ..TrainConfig::default()
            },
            test_fraction: 0.2,
            split_seed: 1,
            output_dir: default_output_dir(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    pub fn load_dataset(&self, base: &Path) -> Result<SignalDataset> {
        match &self.dataset {
            DatasetSource::Synthetic(params) => params.generate(),
            DatasetSource::Idx {
                images,
                labels,
                assignment,
            } => load_idx_dataset(resolve(base, images), resolve(base, labels), assignment),
            DatasetSource::Csv(path) => SignalDataset::from_csv(&read_text(&resolve(base, path))?, None),
        }
    }

    pub fn manifold_spec(&self, base: &Path, input_dim: usize) -> Result<ManifoldSpec> {
        match &self.manifold {
            ManifoldSource::Canonical {
                canonical,
                embedding_dim,
            } => ManifoldSpec::canonical(*canonical, *embedding_dim, input_dim),
            ManifoldSource::Path(path) => load_json(&resolve(base, path)),
            ManifoldSource::Inline(spec) => Ok(spec.clone()),
        }
    }

    pub fn init_network(&self, spec: &ManifoldSpec) -> Result<EmbeddingNetwork> {
        let mut widths = vec![spec.input_dim];
        widths.extend(&self.network.hidden);
        widths.push(spec.embedding_dim);
        EmbeddingNetwork::init(
            mlp_layers(&widths, self.network.dropout),
            self.network.seed.unwrap_or(self.train.seed),
        )
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.train.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub outcome: TrainOutcome,
    pub train_set: SignalDataset,
    pub test_set: SignalDataset,
}

/// Loads data, splits it, builds the network and trains.
pub fn execute_run(config: &RunConfig, base: &Path) -> Result<RunArtifacts> {
    let dataset = config.load_dataset(base)?;
    let spec = config.manifold_spec(base, dataset.dim())?;
    let (train_set, test_set) = dataset.split_holdout(config.test_fraction, config.split_seed)?;
    let net = config.init_network(&spec)?;
    let outcome = train(&train_set, &spec, &config.train, net)?;
    Ok(RunArtifacts {
        outcome,
        train_set,
        test_set,
    })
}

pub fn model_json(model: &TrainedManifold) -> Result<String> {
    Ok(serde_json::to_string_pretty(model)? + "\n")
}

#[derive(Parser, Debug)]
#[command(name = "affect", version, about = "Train and query affective manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a manifold; writes model.json, loss.csv, train.csv and test.csv
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue training an existing model on the data of a run config
    Continue {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Infer the state of each signal row of a CSV file
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Euclidean)]
        metric: Metric,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
    },
    /// Let every manifold of a mind react to each signal row
    React {
        #[arg(long)]
        mind: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Margin reproduction report on a labelled CSV dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in margin matrix and its embeddability
    Layout {
        #[arg(long, value_parser = parse_canonical)]
        which: Canonical,
        #[arg(long, default_value_t = 2)]
        dim: usize,
    },
    /// Scatter plot of a 2-D model's embeddings of a labelled CSV dataset
    Plot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Euclidean,
    Mahalanobis,
}

fn parse_canonical(s: &str) -> std::result::Result<Canonical, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Mind file: `{"manifolds": [{"model": "love/model.json", "input": [0, 20]}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MindFile {
    pub manifolds: Vec<MindFileEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MindFileEntry {
    pub model: PathBuf,
    #[serde(default)]
    pub input: Option<[usize; 2]>,
}

pub fn load_mind(path: &Path) -> Result<Mind> {
    let file: MindFile = load_json(path)?;
    let base = parent_dir(path);
    let members = file
        .manifolds
        .iter()
        .map(|entry| {
            let input: Option<Range<usize>> = entry.input.map(|[a, b]| a..b);
            Ok(MindMember {
                model: load_json(&resolve(&base, &entry.model))?,
                input,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mind::new(members)
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_io(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with_io<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn load_labelled(path: &Path, model: &TrainedManifold) -> Result<SignalDataset> {
    SignalDataset::from_csv(&read_text(path)?, Some(model.spec.state_count()))
}

fn write_run_outputs(dir: &Path, model: &TrainedManifold, log: &TrainingLog) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("model.json"), &model_json(model)?)?;
    write_text(&dir.join("loss.csv"), &log.to_csv())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train { config } => {
            let base = parent_dir(&config);
            let cfg = RunConfig::load(&config)?.with_env_seed()?;
            let run = execute_run(&cfg, &base)?;
            let dir = resolve(&base, &cfg.output_dir);
            write_run_outputs(&dir, &run.outcome.model, &run.outcome.log)?;
            write_text(&dir.join("train.csv"), &run.train_set.to_csv())?;
            write_text(&dir.join("test.csv"), &run.test_set.to_csv())?;
            let last = run.outcome.log.epochs.last().map(|r| r.loss.total);
            writeln!(
                out,
                "trained {} on {} signals; final epoch loss {}; wrote {}",
                run.outcome.model.name(),
                run.train_set.len(),
                last.map_or("n/a".to_string(), |l| format!("{l:.6}")),
                dir.display()
            )
            .map_err(|e| Error::io("<stdout>", e))
        }
        Command::Continue { model, config } => {
            let base = parent_dir(&config);
            let cfg = RunConfig::load(&config)?.with_env_seed()?;
            let trained: TrainedManifold = load_json(&model)?;
            let dataset = cfg.load_dataset(&base)?;
            let (train_set, _) = dataset.split_holdout(cfg.test_fraction, cfg.split_seed)?;
            let outcome = continue_train(&trained, &train_set, &cfg.train)?;
            let dir = resolve(&base, &cfg.output_dir);
            write_run_outputs(&dir, &outcome.model, &outcome.log)?;
            writeln!(out, "continued {}; wrote {}", outcome.model.name(), dir.display())
                .map_err(|e| Error::io("<stdout>", e))
        }
        Command::Infer {
            model,
            input,
            metric,
            temperature,
        } => {
            let trained: TrainedManifold = load_json(&model)?;
            let rows = parse_signal_csv(&read_text(&input)?)?;
            let results = rows
                .iter()
                .map(|x| match metric {
                    Metric::Euclidean => infer_state_with_temperature(&trained, x, temperature),
                    Metric::Mahalanobis => infer_state_mahalanobis(&trained, x),
                })
                .collect::<Result<Vec<InferenceResult>>>()?;
            print_json(out, &results)
        }
        Command::React { mind, input } => {
            let mind = load_mind(&mind)?;
            let rows = parse_signal_csv(&read_text(&input)?)?;
            let reactions = rows.iter().map(|x| mind_react(&mind, x)).collect::<Result<Vec<_>>>()?;
            print_json(out, &reactions)
        }
        Command::Eval { model, data, out: report_path } => {
            let trained: TrainedManifold = load_json(&model)?;
            let report = evaluate(&trained, &load_labelled(&data, &trained)?)?;
            if let Some(path) = report_path {
                write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
            print_json(out, &report)
        }
        Command::Layout { which, dim } => {
            let margins = canonical_margins(which);
            let report = embeddability_check(&margins, dim);
            let names = which.state_names();
            let text = format!(
                "{which} ({})\n{margins}embeddable in {dim}D: {}\neigenvalues: {}\n",
                names.join(", "),
                report.embeddable,
                report
                    .eigenvalues
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
        Command::Plot { model, data, out: svg_path } => {
            let trained: TrainedManifold = load_json(&model)?;
            let dataset = load_labelled(&data, &trained)?;
            let emb = embed_dataset(&trained, &dataset)?;
            render_scatter_svg(&emb, dataset.labels(), &trained.spec.state_names(), &svg_path)?;
            writeln!(out, "wrote {}", svg_path.display()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}
