//! `train`, `sample` and `eval` commands behind the binary.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig, SizeMode};
use crate::denoiser::{fit, DenoiserError, DenoiserParams, ModelShape, TrainOptions};
use crate::diffusion::{GuidanceConfig, GuidanceMode};
use crate::eval::{run_benchmark, write_records, BenchmarkOptions, EvalError, EvalReport, Generator, SampleRecord};
use crate::graphdata::{compute_marginals, GraphDataset, Split, SplitSpec, Vocab};
use crate::nodecount::{train_nodecount, NodeCountError, NodeCountOptions, SizeSource};
use crate::schedule::cosine_schedule_with_offset;
use crate::smiles::{property_vector, smiles_to_graph, PropertyId};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss.log";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const RECORDS_FILE: &str = "records.tsv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    TooFewReferences(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Dataset(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Dimension(_) => 5,
            CliError::TooFewReferences(_) => 6,
            CliError::Output { .. } => 7,
            CliError::Internal(_) => 8,
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Output {
            path: parent.display().to_string(),
            message: e.to_string(),
        })?;
    }
    fs::write(path, contents).map_err(|e| CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads `SMILES` or `SMILES<TAB>v1,v2,...` lines and computes the listed
/// properties from each molecule. Given values must agree with the computed
/// ones, so generated molecules are scored on the same definitions.
pub fn load_property_dataset(
    path: &Path,
    vocab: &Vocab,
    properties: &[PropertyId],
    split: SplitSpec,
) -> Result<GraphDataset, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
    let mut graphs = Vec::new();
    let mut props = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |m: String| CliError::Dataset(format!("{}:{}: {m}", path.display(), i + 1));
        let (smi, given) = match line.split_once('\t') {
            Some((s, v)) => (s.trim(), Some(v)),
            None => (line, None),
        };
        let g = smiles_to_graph(smi, vocab).map_err(|e| at(e.to_string()))?;
        let computed = property_vector(&g, vocab, properties);
        if let Some(given) = given {
            let values: Vec<f64> = given
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| at(format!("bad value {v:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            if values.len() != properties.len() {
                return Err(at(format!(
                    "{} values for {} properties",
                    values.len(),
                    properties.len()
                )));
            }
            for ((v, c), p) in values.iter().zip(&computed).zip(properties) {
                if (v - c).abs() > 1e-6 * v.abs().max(1.0) {
                    return Err(at(format!("{} is {v} in the file but {c} computed", p.name())));
                }
            }
        }
        graphs.push(g);
        props.push(computed);
    }
    GraphDataset::new(graphs, props, split).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<f64>,
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let base = fs::canonicalize(&base).unwrap_or(base);
    Ok(RunConfig::parse(&text, &base)?)
}

/// Trains from a config file and writes checkpoint, loss log and config
/// echo into the configured output directory.
pub fn cmd_train(config_path: &Path, mut progress: impl FnMut(usize, f64)) -> Result<TrainSummary, CliError> {
    let cfg = read_config(config_path)?;
    let vocab = Vocab::by_name(&cfg.vocab).expect("validated vocabulary");
    let split = SplitSpec {
        train: cfg.train_fraction,
        validation: cfg.validation_fraction,
        seed: cfg.seed,
    };
    let ds = load_property_dataset(&cfg.data_path, &vocab, &cfg.properties, split)?;
    let train_idx = ds.indices(Split::Train);
    let marginal_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.split[i] != Split::Test).collect();
    let marginals = compute_marginals(marginal_idx.iter().map(|&i| &ds.graphs[i]))
        .map_err(|e| CliError::Dataset(e.to_string()))?;
    let schedule = cosine_schedule_with_offset(cfg.steps, cfg.schedule_offset)
        .map_err(|e| CliError::Config(ConfigError::Invalid {
            key: "schedule.steps".into(),
            message: e.to_string(),
        }))?;
    let shape = ModelShape {
        guide_dim: cfg.properties.len(),
        atom_types: vocab.atoms.len(),
        bond_types: vocab.bonds.len(),
        steps: cfg.steps,
        n_max: marginals.n_max(),
    };
    let examples: Vec<_> = train_idx
        .iter()
        .map(|&i| (ds.graphs[i].clone(), ds.guides[i].clone()))
        .collect();
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
    };
    let mut params = DenoiserParams::init(cfg.denoiser.clone(), shape, cfg.seed).map_err(denoiser_error)?;
    let history = fit(&mut params, &examples, &schedule, &marginals, &opts, &mut progress).map_err(denoiser_error)?;

    let nodecount = if cfg.nodecount {
        let data: Vec<_> = examples.iter().map(|(g, y)| (y.clone(), g.n())).collect();
        let nc_opts = NodeCountOptions {
            hidden: cfg.nodecount_hidden,
            epochs: cfg.nodecount_epochs,
            batch_size: cfg.nodecount_batch_size,
            lr: cfg.nodecount_lr,
            seed: cfg.seed,
        };
        Some(train_nodecount(&data, marginals.n_max(), &nc_opts).map_err(|e| match e {
            NodeCountError::Diverged(_) => CliError::Diverged(e.to_string()),
            other => CliError::Internal(other.to_string()),
        })?)
    } else {
        None
    };

    let ck = Checkpoint {
        vocab: cfg.vocab.clone(),
        properties: cfg.properties.clone(),
        schedule_offset: cfg.schedule_offset,
        split,
        marginals,
        standardization: ds.standardization.clone(),
        denoiser: params,
        nodecount,
    };
    let ck_path = cfg.output_dir.join(CHECKPOINT_FILE);
    let mut bytes = Vec::new();
    crate::checkpoint::write_tensors(&mut bytes, &ck.to_tensors()).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&ck_path, &bytes)?;
    let log: String = history
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{}\t{l:?}\n", e + 1))
        .collect();
    write_file(&cfg.output_dir.join(LOSS_LOG_FILE), log.as_bytes())?;
    write_file(&cfg.output_dir.join(CONFIG_ECHO_FILE), cfg.to_text().as_bytes())?;
    Ok(TrainSummary {
        checkpoint: ck_path,
        history,
    })
}

fn denoiser_error(e: DenoiserError) -> CliError {
    match e {
        DenoiserError::Diverged { .. } => CliError::Diverged(e.to_string()),
        DenoiserError::EmptyDataset => CliError::Dataset(e.to_string()),
        DenoiserError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    /// Raw target properties, in checkpoint property order.
    pub guide: Vec<f64>,
    pub count: usize,
    pub s: f64,
    pub mode: GuidanceMode,
    pub size: SizeMode,
    /// Evaluate only the placeholder branch, ignoring `s` and `mode`.
    pub unconditional: bool,
    pub seed: u64,
    pub out: PathBuf,
}

fn size_source<'a>(ck: &'a Checkpoint, mode: SizeMode) -> Result<SizeSource<'a>, CliError> {
    match mode {
        SizeMode::Marginal => Ok(SizeSource::Marginal(&ck.marginals.size)),
        SizeMode::Inferred => ck
            .nodecount
            .as_ref()
            .map(SizeSource::Inferred)
            .ok_or_else(|| CliError::Usage("checkpoint has no node-count model; use --size marginal".into())),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::TooFewReferences { .. } => CliError::TooFewReferences(e.to_string()),
        EvalError::NodeCount(NodeCountError::DimensionMismatch { .. }) | EvalError::ShapeMismatch(_) => {
            CliError::Dimension(e.to_string())
        }
        other => CliError::Internal(other.to_string()),
    }
}

fn guidance(s: f64, mode: GuidanceMode) -> Result<GuidanceConfig, CliError> {
    GuidanceConfig::new(s, mode).map_err(|e| CliError::Usage(format!("--s: {e}")))
}

fn sample_lines(records: &[SampleRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let props: Vec<String> = r.achieved.iter().map(|v| format!("{v:?}")).collect();
            format!("{}\t{}\t{}\n", r.smiles, props.join(","), u8::from(r.valid))
        })
        .collect()
}

/// Writes `count` lines of `SMILES<TAB>achieved properties<TAB>valid`.
pub fn cmd_sample(args: &SampleArgs) -> Result<Vec<SampleRecord>, CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    if args.guide.len() != ck.properties.len() {
        return Err(CliError::Dimension(format!(
            "guide has {} values, checkpoint expects {} ({})",
            args.guide.len(),
            ck.properties.len(),
            ck.properties.iter().map(|p| p.name()).collect::<Vec<_>>().join(",")
        )));
    }
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let cfg = guidance(args.s, args.mode)?;
    let vocab = Vocab::by_name(&ck.vocab).expect("checkpoint vocabulary is known");
    let schedule = cosine_schedule_with_offset(ck.denoiser.shape.steps, ck.schedule_offset)
        .map_err(|e| CliError::Checkpoint(CheckpointError::Malformed(e.to_string())))?;
    let gen = Generator {
        denoiser: &ck.denoiser,
        sizes: size_source(&ck, args.size)?,
        schedule: &schedule,
        marginals: &ck.marginals,
        standardization: &ck.standardization,
        vocab: &vocab,
        properties: &ck.properties,
    };
    let records = gen
        .generate_many(&args.guide, (!args.unconditional).then_some(&cfg), args.count, args.seed)
        .map_err(eval_error)?;
    write_file(&args.out, sample_lines(&records).as_bytes())?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub k: usize,
    pub r: usize,
    pub s: f64,
    pub mode: GuidanceMode,
    /// Defaults to inferred when the checkpoint carries a node-count model.
    pub size: Option<SizeMode>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Benchmarks on the test split of `dataset` (re-derived with the split
/// stored at training time) and writes the report and per-sample records.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let vocab = Vocab::by_name(&ck.vocab).expect("checkpoint vocabulary is known");
    let ds = load_property_dataset(&args.dataset, &vocab, &ck.properties, ck.split)?;
    let pool: Vec<Vec<f64>> = ds.indices(Split::Test).iter().map(|&i| ds.properties[i].clone()).collect();
    let size = args.size.unwrap_or(if ck.nodecount.is_some() {
        SizeMode::Inferred
    } else {
        SizeMode::Marginal
    });
    let schedule = cosine_schedule_with_offset(ck.denoiser.shape.steps, ck.schedule_offset)
        .map_err(|e| CliError::Checkpoint(CheckpointError::Malformed(e.to_string())))?;
    let gen = Generator {
        denoiser: &ck.denoiser,
        sizes: size_source(&ck, size)?,
        schedule: &schedule,
        marginals: &ck.marginals,
        standardization: &ck.standardization,
        vocab: &vocab,
        properties: &ck.properties,
    };
    let opts = BenchmarkOptions {
        k: args.k,
        r: args.r,
        guidance: guidance(args.s, args.mode)?,
        seed: args.seed,
    };
    let report = run_benchmark(&gen, &pool, &opts).map_err(eval_error)?;
    write_file(&args.out.join(REPORT_FILE), report.summary_text().as_bytes())?;
    write_file(&args.out.join(RECORDS_FILE), write_records(&report.records).as_bytes())?;
    Ok(report)
}
