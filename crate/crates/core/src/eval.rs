//! Conditioning error and generation quality over a sampling campaign.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffusion::{self, Denoise, DiffusionError, GuidanceConfig};
use crate::graphdata::{wl_hash, DatasetMarginals, Standardization, Vocab};
use crate::nodecount::{NodeCountError, SizeSource};
use crate::rng::{cell_stream, substream};
use crate::schedule::NoiseSchedule;
use crate::smiles::{check_valence, graph_to_smiles, property_vector, smiles_to_graph, PropertyId};

pub const WL_ROUNDS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no valid samples to score")]
    NoValidSamples,
    #[error("asked for {k} reference molecules but only {available} are available")]
    TooFewReferences { k: usize, available: usize },
    #[error("K and R must both be at least 1")]
    EmptyGrid,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("record line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    NodeCount(#[from] NodeCountError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeSummary {
    pub per_property: Vec<f64>,
    pub total: f64,
    pub per_property_stderr: Vec<f64>,
    pub total_stderr: f64,
    /// Valid samples entering the mean.
    pub count: usize,
}

fn stderr(means: &[f64]) -> f64 {
    let k = means.len();
    if k < 2 {
        return 0.0;
    }
    let mu = means.iter().sum::<f64>() / k as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (k - 1) as f64;
    (var / k as f64).sqrt()
}

/// Mean of `|y_i − ŷ_ij|` over valid cells, per property and averaged
/// across properties. Standard errors come from the spread of the
/// per-reference means.
pub fn mae(targets: &[Vec<f64>], generated: &[Vec<Vec<f64>>], valid: &[Vec<bool>]) -> Result<MaeSummary, EvalError> {
    if targets.is_empty() || generated.iter().any(|row| row.is_empty()) {
        return Err(EvalError::EmptyGrid);
    }
    if generated.len() != targets.len() || valid.len() != targets.len() {
        return Err(EvalError::ShapeMismatch("targets, samples and mask disagree in K".into()));
    }
    let d = targets[0].len();
    let mut sums = vec![0.0; d];
    let mut count = 0usize;
    let mut ref_means: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut ref_totals = Vec::new();
    for ((y, row), mask) in targets.iter().zip(generated).zip(valid) {
        if row.len() != mask.len() || y.len() != d {
            return Err(EvalError::ShapeMismatch("ragged sample grid".into()));
        }
        let mut local = vec![0.0; d];
        let mut local_count = 0usize;
        for (y_hat, &ok) in row.iter().zip(mask) {
            if !ok {
                continue;
            }
            if y_hat.len() != d {
                return Err(EvalError::ShapeMismatch("property vector length".into()));
            }
            for k in 0..d {
                local[k] += (y[k] - y_hat[k]).abs();
            }
            local_count += 1;
        }
        if local_count == 0 {
            continue;
        }
        for k in 0..d {
            sums[k] += local[k];
            ref_means[k].push(local[k] / local_count as f64);
        }
        ref_totals.push(local.iter().sum::<f64>() / (d as f64 * local_count as f64));
        count += local_count;
    }
    if count == 0 {
        return Err(EvalError::NoValidSamples);
    }
    let per_property: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    Ok(MaeSummary {
        total: per_property.iter().sum::<f64>() / d as f64,
        per_property,
        per_property_stderr: ref_means.iter().map(|m| stderr(m)).collect(),
        total_stderr: stderr(&ref_totals),
        count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Raw target properties.
    pub target: Vec<f64>,
    /// Raw properties of the generated graph, computed even when invalid.
    pub achieved: Vec<f64>,
    pub valid: bool,
    pub smiles: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub properties: Vec<PropertyId>,
    pub k: usize,
    pub r: usize,
    /// `None` when no sample was valid.
    pub mae: Option<MaeSummary>,
    pub validity: f64,
    pub uniqueness: f64,
    /// `K × R` records, reference-major.
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    /// Aggregates records laid out as `k` consecutive groups of `r`.
    pub fn from_records(
        properties: Vec<PropertyId>,
        k: usize,
        r: usize,
        records: Vec<SampleRecord>,
        vocab: &Vocab,
    ) -> Result<Self, EvalError> {
        if k == 0 || r == 0 {
            return Err(EvalError::EmptyGrid);
        }
        if records.len() != k * r {
            return Err(EvalError::ShapeMismatch(format!(
                "{} records for a {k}×{r} grid",
                records.len()
            )));
        }
        let targets: Vec<Vec<f64>> = records.chunks(r).map(|c| c[0].target.clone()).collect();
        let generated: Vec<Vec<Vec<f64>>> = records
            .chunks(r)
            .map(|c| c.iter().map(|s| s.achieved.clone()).collect())
            .collect();
        let mask: Vec<Vec<bool>> = records.chunks(r).map(|c| c.iter().map(|s| s.valid).collect()).collect();
        let mae = match mae(&targets, &generated, &mask) {
            Ok(m) => Some(m),
            Err(EvalError::NoValidSamples) => None,
            Err(e) => return Err(e),
        };
        let valid: Vec<&SampleRecord> = records.iter().filter(|s| s.valid).collect();
        let mut hashes = HashSet::new();
        for s in &valid {
            let g = smiles_to_graph(&s.smiles, vocab).map_err(|e| EvalError::BadRecord {
                line: 0,
                message: format!("cannot re-read {}: {e}", s.smiles),
            })?;
            hashes.insert(wl_hash(&g, WL_ROUNDS));
        }
        let validity = valid.len() as f64 / records.len() as f64;
        let uniqueness = if valid.is_empty() {
            0.0
        } else {
            hashes.len() as f64 / valid.len() as f64
        };
        Ok(Self {
            properties,
            k,
            r,
            mae,
            validity,
            uniqueness,
            records,
        })
    }

    /// Line-oriented `key<TAB>value` summary.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.properties.iter().map(|p| p.name()).collect();
        writeln!(s, "properties\t{}", names.join(",")).unwrap();
        writeln!(s, "k\t{}", self.k).unwrap();
        writeln!(s, "r\t{}", self.r).unwrap();
        writeln!(s, "samples\t{}", self.records.len()).unwrap();
        writeln!(s, "validity\t{}", self.validity).unwrap();
        writeln!(s, "uniqueness\t{}", self.uniqueness).unwrap();
        match &self.mae {
            Some(m) => {
                writeln!(s, "valid_scored\t{}", m.count).unwrap();
                writeln!(s, "mae_total\t{}", m.total).unwrap();
                writeln!(s, "mae_total_stderr\t{}", m.total_stderr).unwrap();
                for (i, name) in names.iter().enumerate() {
                    writeln!(s, "mae.{name}\t{}", m.per_property[i]).unwrap();
                    writeln!(s, "mae_stderr.{name}\t{}", m.per_property_stderr[i]).unwrap();
                }
            }
            None => writeln!(s, "mae_total\tnone").unwrap(),
        }
        s
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// One `target<TAB>achieved<TAB>valid<TAB>smiles` line per record.
pub fn write_records(records: &[SampleRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            join(&r.target),
            join(&r.achieved),
            u8::from(r.valid),
            r.smiles
        )
        .unwrap();
    }
    s
}

pub fn read_records(text: &str) -> Result<Vec<SampleRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |message: String| EvalError::BadRecord { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let nums = |f: &str| -> Result<Vec<f64>, EvalError> {
            f.split(',')
                .map(|x| x.parse::<f64>().map_err(|e| bad(format!("bad number {x:?}: {e}"))))
                .collect()
        };
        let valid = match fields[2] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("bad validity flag {other:?}"))),
        };
        out.push(SampleRecord {
            target: nums(fields[0])?,
            achieved: nums(fields[1])?,
            valid,
            smiles: fields[3].to_string(),
        });
    }
    Ok(out)
}

/// Model and data context of a sampling campaign.
pub struct Generator<'a, D: ?Sized> {
    pub denoiser: &'a D,
    pub sizes: SizeSource<'a>,
    pub schedule: &'a NoiseSchedule,
    pub marginals: &'a DatasetMarginals,
    pub standardization: &'a Standardization,
    pub vocab: &'a Vocab,
    pub properties: &'a [PropertyId],
}

impl<D: Denoise + Sync + ?Sized> Generator<'_, D> {
    /// One sample for raw `target` properties; `cell` selects the random
    /// stream so any cell of a grid can be regenerated alone. Without a
    /// guidance config only the placeholder branch is evaluated.
    pub fn generate(
        &self,
        target: &[f64],
        cfg: Option<&GuidanceConfig>,
        seed: u64,
        cell: u64,
    ) -> Result<SampleRecord, EvalError> {
        if target.len() != self.properties.len() {
            return Err(EvalError::ShapeMismatch(format!(
                "target has {} values for {} properties",
                target.len(),
                self.properties.len()
            )));
        }
        let mut rng = cell_stream(seed, "sample", cell);
        let guide = self.standardization.apply(target);
        let n = self.sizes.sample(&guide, &mut rng)?;
        let g = match cfg {
            Some(cfg) => diffusion::sample(self.denoiser, &guide, n, cfg, self.schedule, self.marginals, &mut rng)?,
            None => diffusion::sample_unconditional(self.denoiser, n, self.schedule, self.marginals, &mut rng)?,
        };
        Ok(SampleRecord {
            target: target.to_vec(),
            achieved: property_vector(&g, self.vocab, self.properties),
            valid: check_valence(&g, self.vocab).valid,
            smiles: graph_to_smiles(&g, self.vocab),
        })
    }

    /// `count` samples for one target, in parallel.
    pub fn generate_many(
        &self,
        target: &[f64],
        cfg: Option<&GuidanceConfig>,
        count: usize,
        seed: u64,
    ) -> Result<Vec<SampleRecord>, EvalError> {
        (0..count as u64)
            .into_par_iter()
            .map(|c| self.generate(target, cfg, seed, c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub k: usize,
    pub r: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

/// Draws `k` reference property vectors from `pool` without replacement,
/// generates `r` samples per reference, and scores them.
pub fn run_benchmark<D: Denoise + Sync + ?Sized>(
    gen: &Generator<'_, D>,
    pool: &[Vec<f64>],
    opts: &BenchmarkOptions,
) -> Result<EvalReport, EvalError> {
    if opts.k == 0 || opts.r == 0 {
        return Err(EvalError::EmptyGrid);
    }
    if opts.k > pool.len() {
        return Err(EvalError::TooFewReferences {
            k: opts.k,
            available: pool.len(),
        });
    }
    let mut rng = substream(opts.seed, "eval.references");
    let refs: Vec<&Vec<f64>> = sample_indices(&mut rng, pool.len(), opts.k)
        .into_iter()
        .map(|i| &pool[i])
        .collect();
    let r = opts.r;
    let records = (0..opts.k * r)
        .into_par_iter()
        .map(|cell| gen.generate(refs[cell / r], Some(&opts.guidance), opts.seed, cell as u64))
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::from_records(gen.properties.to_vec(), opts.k, r, records, gen.vocab)
}
