//! Experiment protocols and their metric tables.
//!
//! Every run is keyed by `(arm, protocol, source, target, seed)` and is
//! independent of every other run, so runs execute in parallel and the table
//! is sorted into canonical order afterwards.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{LinearClassifier, NormalizedClassifier, Prediction};
use crate::data::{
    generate_benchmark, split_train_val, BenchmarkSpec, MultiDomainDataset,
};
use crate::embedding::{central_difference_gradient, relative_error, Embedding, Matrix};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Result, TdgError};
use crate::prompt::{prompt_loss_and_grads_weighted, LossWeights, PromptTemplate};
use crate::rng::RngStream;
use crate::train::{evaluate, train, Arm, PromptObjective, TrainConfig};
use crate::words::DomainWordPool;

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const LAMBDA_SWEEP: [f64; 4] = [0.0, 0.1, 0.3, 1.0];
pub const CSV_HEADER: &str = "arm,protocol,source,target,seed,accuracy";
pub const PROTOCOL_LODO: &str = "lodo";
pub const PROTOCOL_SINGLE_SOURCE: &str = "single-source";

/// One line of a metrics table. `seed` is a seed number for raw results and
/// `mean`, `std` or `gain` for aggregates; `source` and `target` hold domain
/// ids (several sources joined with `+`), `all` or `avg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub arm: String,
    pub protocol: String,
    pub source: String,
    pub target: String,
    pub seed: String,
    /// Fraction correct, except on `gain` rows where it is the difference
    /// to the baseline arm in percentage points.
    pub accuracy: f64,
}

impl MetricRow {
    pub fn is_raw(&self) -> bool {
        self.seed.parse::<u64>().is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub spec_sha256: String,
    pub config_sha256: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub metadata: Option<TableMetadata>,
}

fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

fn seed_rank(seed: &str) -> (u8, u64) {
    match seed {
        "mean" => (1, 0),
        "std" => (2, 0),
        "gain" => (3, 0),
        s => s.parse().map(|v| (0, v)).unwrap_or((4, 0)),
    }
}

fn row_cmp(a: &MetricRow, b: &MetricRow) -> Ordering {
    a.arm
        .cmp(&b.arm)
        .then_with(|| a.protocol.cmp(&b.protocol))
        .then_with(|| natural_cmp(&a.source, &b.source))
        .then_with(|| natural_cmp(&a.target, &b.target))
        .then_with(|| seed_rank(&a.seed).cmp(&seed_rank(&b.seed)))
        .then_with(|| a.seed.cmp(&b.seed))
}

/// Six fractional digits, ties to even; negative zero prints as zero.
pub fn format_decimal(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn rounded(v: f64) -> f64 {
    format_decimal(v).parse().expect("formatted decimal parses")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

impl MetricsTable {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        let mut t = Self {
            rows,
            metadata: None,
        };
        t.sort();
        t
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(row_cmp);
    }

    pub fn raw_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.is_raw())
    }

    pub fn find(&self, arm: &str, source: &str, target: &str, seed: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.source == source && r.target == target && r.seed == seed)
            .map(|r| r.accuracy)
    }

    /// Overall mean accuracy of an arm (the `all/avg/mean` aggregate).
    pub fn overall_mean(&self, arm: &str) -> Option<f64> {
        self.find(arm, "all", "avg", "mean")
    }

    /// Overall gain of an arm over the baseline in percentage points.
    pub fn overall_gain(&self, arm: &str) -> Option<f64> {
        self.find(arm, "all", "avg", "gain")
    }

    /// Builds the table from raw results: per-cell mean/std over seeds,
    /// per-source and overall averages, and gains over `baseline` when that
    /// arm is present. Raw accuracies are rounded to the printed precision
    /// first, so aggregates recompute exactly from the emitted rows.
    pub fn from_raw(raw: Vec<MetricRow>, baseline: Option<&str>, per_source_avg: bool) -> Self {
        let raw: Vec<MetricRow> = raw
            .into_iter()
            .map(|r| MetricRow {
                accuracy: rounded(r.accuracy),
                ..r
            })
            .collect();
        let mut rows = raw.clone();

        // (arm, protocol) -> (source, target) -> seed -> accuracy
        type Cells = BTreeMap<(String, String), BTreeMap<String, f64>>;
        let mut groups: BTreeMap<(String, String), Cells> = BTreeMap::new();
        for r in &raw {
            groups
                .entry((r.arm.clone(), r.protocol.clone()))
                .or_default()
                .entry((r.source.clone(), r.target.clone()))
                .or_default()
                .insert(r.seed.clone(), r.accuracy);
        }

        let mut means: BTreeMap<(String, String, String, String), f64> = BTreeMap::new();
        let mut push = |rows: &mut Vec<MetricRow>, key: &(String, String), src: &str, tgt: &str, vals: &[f64]| {
            let m = mean(vals);
            for (seed, v) in [("mean", m), ("std", std_dev(vals))] {
                rows.push(MetricRow {
                    arm: key.0.clone(),
                    protocol: key.1.clone(),
                    source: src.to_string(),
                    target: tgt.to_string(),
                    seed: seed.to_string(),
                    accuracy: v,
                });
            }
            means.insert((key.0.clone(), key.1.clone(), src.to_string(), tgt.to_string()), m);
        };

        for (key, cells) in &groups {
            for ((src, tgt), seeds) in cells {
                let vals: Vec<f64> = seeds.values().copied().collect();
                push(&mut rows, key, src, tgt, &vals);
            }
            // Per-seed averages over cells, then mean/std over seeds.
            let per_seed_avg = |filter: &dyn Fn(&str) -> bool| -> Vec<f64> {
                let mut by_seed: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for (_, seeds) in cells.iter().filter(|((s, _), _)| filter(s)) {
                    for (seed, v) in seeds {
                        by_seed.entry(seed.as_str()).or_default().push(*v);
                    }
                }
                by_seed.values().map(|v| mean(v)).collect()
            };
            if per_source_avg {
                let sources: Vec<&String> = {
                    let mut s: Vec<&String> = cells.keys().map(|(s, _)| s).collect();
                    s.dedup();
                    s
                };
                for src in sources {
                    let vals = per_seed_avg(&|s: &str| s == src);
                    push(&mut rows, key, src, "avg", &vals);
                }
            }
            let vals = per_seed_avg(&|_| true);
            push(&mut rows, key, "all", "avg", &vals);
        }

        if let Some(base) = baseline {
            let mut gains = Vec::new();
            for ((arm, protocol, src, tgt), m) in &means {
                if let Some(b) = means.get(&(base.to_string(), protocol.clone(), src.clone(), tgt.clone())) {
                    gains.push(MetricRow {
                        arm: arm.clone(),
                        protocol: protocol.clone(),
                        source: src.clone(),
                        target: tgt.clone(),
                        seed: "gain".to_string(),
                        accuracy: 100.0 * (m - b),
                    });
                }
            }
            rows.extend(gains);
        }
        Self::new(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.arm,
                r.protocol,
                r.source,
                r.target,
                r.seed,
                format_decimal(r.accuracy)
            ));
        }
        out
    }

    pub fn from_csv<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim_end() != CSV_HEADER {
            return Err(TdgError::Parse(format!("expected CSV header {CSV_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            let [arm, protocol, source, target, seed, acc] = cells[..] else {
                return Err(TdgError::Parse(format!("expected 6 columns in {line:?}")));
            };
            let accuracy: f64 = acc
                .parse()
                .map_err(|_| TdgError::Parse(format!("bad accuracy {acc:?}")))?;
            rows.push(MetricRow {
                arm: arm.into(),
                protocol: protocol.into(),
                source: source.into(),
                target: target.into(),
                seed: seed.into(),
                accuracy,
            });
        }
        Ok(Self {
            rows,
            metadata: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct JsonRow<'a> {
            arm: &'a str,
            protocol: &'a str,
            source: &'a str,
            target: &'a str,
            seed: &'a str,
            accuracy: Box<serde_json::value::RawValue>,
        }
        #[derive(Serialize)]
        struct JsonTable<'a> {
            columns: Vec<&'static str>,
            metadata: &'a Option<TableMetadata>,
            rows: Vec<JsonRow<'a>>,
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                Ok(JsonRow {
                    arm: &r.arm,
                    protocol: &r.protocol,
                    source: &r.source,
                    target: &r.target,
                    seed: &r.seed,
                    accuracy: serde_json::value::RawValue::from_string(format_decimal(r.accuracy))
                        .map_err(|e| TdgError::Parse(e.to_string()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let table = JsonTable {
            columns: CSV_HEADER.split(',').collect(),
            metadata: &self.metadata,
            rows,
        };
        let mut s =
            serde_json::to_string_pretty(&table).map_err(|e| TdgError::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = TdgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(TdgError::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// Writes the table and returns the number of bytes written.
pub fn emit_table<W: Write>(table: &MetricsTable, format: TableFormat, mut sink: W) -> Result<usize> {
    let text = match format {
        TableFormat::Csv => table.to_csv(),
        TableFormat::Json => table.to_json()?,
    };
    sink.write_all(text.as_bytes())?;
    sink.flush()?;
    Ok(text.len())
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn metadata(spec: &BenchmarkSpec, config_echo: &str) -> Result<TableMetadata> {
    let spec_text = toml::to_string(spec).map_err(|e| TdgError::Parse(e.to_string()))?;
    Ok(TableMetadata {
        spec_sha256: sha256_hex(&spec_text),
        config_sha256: sha256_hex(config_echo),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn config_echo(config: &TrainConfig, seeds: &[u64], extra: &str) -> Result<String> {
    let mut s = toml::to_string(config).map_err(|e| TdgError::Parse(e.to_string()))?;
    s.push_str(&format!("seeds = {seeds:?}\n{extra}"));
    Ok(s)
}

/// A labelled training configuration within an experiment.
#[derive(Debug, Clone)]
pub struct ArmSpec {
    pub label: String,
    pub config: TrainConfig,
}

impl ArmSpec {
    pub fn from_arm(base: &TrainConfig, arm: Arm) -> Self {
        Self {
            label: arm.label().to_string(),
            config: TrainConfig {
                arm,
                ..base.clone()
            },
        }
    }
}

fn join_domains(ds: &[usize]) -> String {
    ds.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

/// `(sources, targets)` pairs to train and evaluate.
fn protocol_cells(protocol: &str, n_domains: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..n_domains)
        .map(|d| {
            let others: Vec<usize> = (0..n_domains).filter(|&o| o != d).collect();
            if protocol == PROTOCOL_LODO {
                (others, vec![d])
            } else {
                (vec![d], others)
            }
        })
        .collect()
}

fn run_grid(
    ds: &MultiDomainDataset,
    arms: &[ArmSpec],
    seeds: &[u64],
    protocol: &str,
    pool: &DomainWordPool,
) -> Result<Vec<MetricRow>> {
    if ds.num_domains() < 2 {
        return Err(TdgError::Config("at least 2 domains are required".into()));
    }
    let cells = protocol_cells(protocol, ds.num_domains());
    let mut jobs = Vec::new();
    for arm in arms {
        for (sources, targets) in &cells {
            for &seed in seeds {
                jobs.push((arm, sources, targets, seed));
            }
        }
    }
    let results: Vec<Result<Vec<MetricRow>>> = jobs
        .par_iter()
        .map(|&(arm, sources, targets, seed)| {
            let context = |e: TdgError| {
                TdgError::Config(format!(
                    "run arm={} protocol={protocol} sources={} seed={seed}: {e}",
                    arm.label,
                    join_domains(sources)
                ))
            };
            let split = split_train_val(ds, sources, seed)?;
            let config = TrainConfig {
                seed,
                ..arm.config.clone()
            };
            let model = train(&config, ds, &split, Some(pool)).map_err(|e| match e {
                TdgError::NonFinite { .. } | TdgError::DegenerateFeature { .. } => e,
                other => context(other),
            })?;
            targets
                .iter()
                .map(|&t| {
                    debug_assert!(!sources.contains(&t));
                    Ok(MetricRow {
                        arm: arm.label.clone(),
                        protocol: protocol.to_string(),
                        source: join_domains(sources),
                        target: t.to_string(),
                        seed: seed.to_string(),
                        accuracy: evaluate(&model, ds, t, true)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(TdgError::Config("at least one seed is required".into()));
    }
    Ok(())
}

fn run_protocol(
    config: &TrainConfig,
    spec: &BenchmarkSpec,
    pool: &DomainWordPool,
    seeds: &[u64],
    arms: &[ArmSpec],
    protocol: &str,
    baseline: Option<&str>,
) -> Result<MetricsTable> {
    check_seeds(seeds)?;
    let ds = generate_benchmark(spec)?;
    let raw = run_grid(&ds, arms, seeds, protocol, pool)?;
    let mut table = MetricsTable::from_raw(raw, baseline, protocol == PROTOCOL_SINGLE_SOURCE);
    let labels: Vec<&str> = arms.iter().map(|a| a.label.as_str()).collect();
    table.metadata = Some(metadata(
        spec,
        &config_echo(config, seeds, &format!("protocol = {protocol:?}\narms = {labels:?}\nwords = {:?}\n", pool.words()))?,
    )?);
    Ok(table)
}

/// Leave-one-domain-out for each requested arm; gains are over ERM.
pub fn run_lodo(
    config: &TrainConfig,
    spec: &BenchmarkSpec,
    pool: &DomainWordPool,
    seeds: &[u64],
    arms: &[Arm],
) -> Result<MetricsTable> {
    let arms: Vec<ArmSpec> = arms.iter().map(|&a| ArmSpec::from_arm(config, a)).collect();
    run_protocol(config, spec, pool, seeds, &arms, PROTOCOL_LODO, Some(Arm::Erm.label()))
}

/// Train on each domain alone and evaluate on every other one.
pub fn run_single_source(
    config: &TrainConfig,
    spec: &BenchmarkSpec,
    pool: &DomainWordPool,
    seeds: &[u64],
    arms: &[Arm],
) -> Result<MetricsTable> {
    let arms: Vec<ArmSpec> = arms.iter().map(|&a| ArmSpec::from_arm(config, a)).collect();
    run_protocol(
        config,
        spec,
        pool,
        seeds,
        &arms,
        PROTOCOL_SINGLE_SOURCE,
        Some(Arm::Erm.label()),
    )
}

pub const ABLATION_NO_TEXT: &str = "no-text";
pub const ABLATION_ALIGN_ONLY: &str = "align-only";
pub const ABLATION_SIM_ONLY: &str = "sim-only";
pub const ABLATION_FULL: &str = "full";

/// The four prompt-loss arms, all with the normalized classifier.
pub fn ablation_arms(config: &TrainConfig) -> Vec<ArmSpec> {
    let with = |label: &str, arm: Arm, objective: PromptObjective| ArmSpec {
        label: label.to_string(),
        config: TrainConfig {
            arm,
            objective,
            ..config.clone()
        },
    };
    vec![
        with(ABLATION_NO_TEXT, Arm::Norm, PromptObjective::Full),
        with(ABLATION_ALIGN_ONLY, Arm::Tdg, PromptObjective::AlignmentOnly),
        with(ABLATION_SIM_ONLY, Arm::Tdg, PromptObjective::SimilarityOnly),
        with(ABLATION_FULL, Arm::Tdg, PromptObjective::Full),
    ]
}

/// Prompt-loss ablation under leave-one-domain-out; gains are over the
/// no-text arm.
pub fn run_loss_ablation(
    config: &TrainConfig,
    spec: &BenchmarkSpec,
    pool: &DomainWordPool,
    seeds: &[u64],
) -> Result<MetricsTable> {
    run_protocol(
        config,
        spec,
        pool,
        seeds,
        &ablation_arms(config),
        PROTOCOL_LODO,
        Some(ABLATION_NO_TEXT),
    )
}

pub fn lambda_label(lambda: f64) -> String {
    format!("lambda={lambda}")
}

/// TDG under leave-one-domain-out for each λ.
pub fn sweep_lambda(
    config: &TrainConfig,
    spec: &BenchmarkSpec,
    pool: &DomainWordPool,
    seeds: &[u64],
    lambdas: &[f64],
) -> Result<MetricsTable> {
    let arms: Vec<ArmSpec> = lambdas
        .iter()
        .map(|&lambda| ArmSpec {
            label: lambda_label(lambda),
            config: TrainConfig {
                arm: Arm::Tdg,
                lambda,
                ..config.clone()
            },
        })
        .collect();
    for a in &arms {
        a.config.validate()?;
    }
    run_protocol(config, spec, pool, seeds, &arms, PROTOCOL_LODO, None)
}

// ---------------------------------------------------------------------------
// Gradient checks

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Every analytic gradient the trainer relies on.
pub const GRAD_FAMILIES: [&str; 10] = [
    "prompt.v1",
    "prompt.v2",
    "ce.logits",
    "normalized.heads",
    "normalized.feature",
    "linear.heads",
    "linear.biases",
    "linear.feature",
    "image_encoder.weight",
    "image_encoder.bias",
];

/// Scales one analytic gradient component to prove the checker notices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFault {
    pub family: &'static str,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyReport {
    pub family: String,
    pub max_relative_error: f64,
    pub worst_trial_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub tolerance: f64,
    pub families: Vec<FamilyReport>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&FamilyReport> {
        self.families
            .iter()
            .filter(|f| !(f.max_relative_error <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Turns a failed report into a verification error naming the family,
    /// trial seed and observed error.
    pub fn into_result(self) -> Result<Self> {
        if let Some(f) = self.failures().first() {
            return Err(TdgError::Verification(format!(
                "gradient family {} failed: relative error {:e} > {:e} at trial seed {}",
                f.family, f.max_relative_error, self.tolerance, f.worst_trial_seed
            )));
        }
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("family,max_relative_error,worst_trial_seed,status\n");
        for f in &self.families {
            let ok = f.max_relative_error <= self.tolerance;
            out.push_str(&format!(
                "{},{:e},{},{}\n",
                f.family,
                f.max_relative_error,
                f.worst_trial_seed,
                if ok { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    run_gradcheck_with_fault(seed, trials, None)
}

fn inject(fault: Option<GradFault>, family: &str, grad: &mut [f64]) {
    if let Some(f) = fault.filter(|f| f.family == family) {
        if let Some(g) = grad.iter_mut().find(|g| **g != 0.0) {
            *g *= f.factor;
        }
    }
}

pub fn run_gradcheck_with_fault(
    seed: u64,
    trials: usize,
    fault: Option<GradFault>,
) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(TdgError::Config("gradcheck needs at least one trial".into()));
    }
    let per_trial: Vec<Vec<(&'static str, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| gradcheck_trial(seed.wrapping_add(t as u64), fault))
        .collect::<Result<_>>()?;
    let mut families: Vec<FamilyReport> = GRAD_FAMILIES
        .iter()
        .map(|f| FamilyReport {
            family: f.to_string(),
            max_relative_error: 0.0,
            worst_trial_seed: seed,
        })
        .collect();
    for (t, errs) in per_trial.iter().enumerate() {
        for &(name, err) in errs {
            let f = families
                .iter_mut()
                .find(|f| f.family == name)
                .expect("known family");
            if err > f.max_relative_error || err.is_nan() {
                f.max_relative_error = err;
                f.worst_trial_seed = seed.wrapping_add(t as u64);
            }
        }
    }
    Ok(GradcheckReport {
        trials,
        tolerance: GRADCHECK_TOLERANCE,
        families,
    })
}

fn gradcheck_trial(trial_seed: u64, fault: Option<GradFault>) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = RngStream::new(trial_seed, "gradcheck");
    let h = GRADCHECK_STEP;
    let mut out = Vec::new();
    let pick = |rng: &mut RngStream, lo: usize, hi: usize| lo + rng.index(hi - lo + 1);

    // Prompt objective.
    let d_tok = pick(&mut rng, 6, 12);
    let d_emb = pick(&mut rng, 3, d_tok);
    let nc = pick(&mut rng, 2, 4);
    let nd = pick(&mut rng, 1, 4);
    let batch = pick(&mut rng, 1, 6);
    let enc = TextEncoder::random(d_emb, d_tok, &mut rng.derive("text"))?;
    let template = PromptTemplate::new(
        Embedding::gaussian(d_tok, 0.5, &mut rng),
        Embedding::gaussian(d_tok, 0.5, &mut rng),
    )?;
    let cats: Vec<Embedding> = (0..nc).map(|_| Embedding::gaussian(d_tok, 1.0, &mut rng)).collect();
    let doms: Vec<Embedding> = (0..nd).map(|_| Embedding::gaussian(d_tok, 1.0, &mut rng)).collect();
    let feats: Vec<Embedding> = (0..batch).map(|_| Embedding::gaussian(d_emb, 1.0, &mut rng)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.index(nc)).collect();
    let weights = LossWeights::full(0.3);
    let loss = |v1: &[f64], v2: &[f64]| -> f64 {
        let t = PromptTemplate::new(Embedding::from_raw(v1.to_vec()), Embedding::from_raw(v2.to_vec()))
            .expect("valid template");
        prompt_loss_and_grads_weighted(&t, &enc, &feats, &labels, &cats, &doms, weights)
            .map(|l| l.total)
            .unwrap_or(f64::NAN)
    };
    let analytic = prompt_loss_and_grads_weighted(&template, &enc, &feats, &labels, &cats, &doms, weights)?;
    let (mut g1, mut g2) = (analytic.grad_v1.into_vec(), analytic.grad_v2.into_vec());
    inject(fault, "prompt.v1", &mut g1);
    inject(fault, "prompt.v2", &mut g2);
    let n1 = central_difference_gradient(|x| loss(x, &template.v2), &template.v1, h)?;
    let n2 = central_difference_gradient(|x| loss(&template.v1, x), &template.v2, h)?;
    out.push(("prompt.v1", relative_error(&g1, &n1)));
    out.push(("prompt.v2", relative_error(&g2, &n2)));

    // Cross-entropy through both classifiers.
    let n_cls = pick(&mut rng, 2, 6);
    let dim = pick(&mut rng, 2, 8);
    let label = rng.index(n_cls);
    let logits0 = rng.gaussian_vec(n_cls, 2.0);
    let ce = |logits: &[f64]| -Prediction::from_logits(logits.to_vec()).log_probability(label);
    let mut g_logits = Prediction::from_logits(logits0.clone()).probabilities;
    g_logits[label] -= 1.0;
    inject(fault, "ce.logits", &mut g_logits);
    let n_logits = central_difference_gradient(ce, &logits0, h)?;
    out.push(("ce.logits", relative_error(&g_logits, &n_logits)));

    let scale = 1.0 + 9.0 * rng.uniform();
    let norm = NormalizedClassifier::random(n_cls, dim, scale, &mut rng.derive("norm"))?;
    let z = Embedding::gaussian(dim, 1.0, &mut rng);
    let g = norm.backward(&z, label)?;
    let (mut gh, mut gz) = (g.heads.data().to_vec(), g.feature.into_vec());
    inject(fault, "normalized.heads", &mut gh);
    inject(fault, "normalized.feature", &mut gz);
    let nh = central_difference_gradient(
        |w| {
            let heads = Matrix::from_rows(n_cls, dim, w.to_vec()).expect("shape");
            NormalizedClassifier::new(heads, scale)
                .and_then(|c| c.backward(&z, label))
                .map(|g| g.loss)
                .unwrap_or(f64::NAN)
        },
        norm.heads.data(),
        h,
    )?;
    let nz = central_difference_gradient(
        |x| norm.backward(x, label).map(|g| g.loss).unwrap_or(f64::NAN),
        &z,
        h,
    )?;
    out.push(("normalized.heads", relative_error(&gh, &nh)));
    out.push(("normalized.feature", relative_error(&gz, &nz)));

    let lin = LinearClassifier::new(
        Matrix::gaussian(n_cls, dim, 1.0, &mut rng),
        rng.gaussian_vec(n_cls, 1.0),
    )?;
    let g = lin.backward(&z, label)?;
    let mut gh = g.heads.data().to_vec();
    let mut gb = g.biases.clone().unwrap_or_default();
    let mut gz = g.feature.into_vec();
    inject(fault, "linear.heads", &mut gh);
    inject(fault, "linear.biases", &mut gb);
    inject(fault, "linear.feature", &mut gz);
    let lin_loss = |w: &[f64], b: &[f64], x: &[f64]| {
        LinearClassifier::new(Matrix::from_rows(n_cls, dim, w.to_vec()).expect("shape"), b.to_vec())
            .and_then(|c| c.backward(x, label))
            .map(|g| g.loss)
            .unwrap_or(f64::NAN)
    };
    let nh = central_difference_gradient(|w| lin_loss(w, &lin.biases, &z), lin.heads.data(), h)?;
    let nb = central_difference_gradient(|b| lin_loss(lin.heads.data(), b, &z), &lin.biases, h)?;
    let nz = central_difference_gradient(|x| lin_loss(lin.heads.data(), &lin.biases, x), &z, h)?;
    out.push(("linear.heads", relative_error(&gh, &nh)));
    out.push(("linear.biases", relative_error(&gb, &nb)));
    out.push(("linear.feature", relative_error(&gz, &nz)));

    // Image encoder under the normalized classifier's loss.
    let raw = pick(&mut rng, 2, 10);
    let img = ImageEncoder::new(
        Matrix::gaussian(dim, raw, 1.0, &mut rng),
        Embedding::gaussian(dim, 0.5, &mut rng),
    )?;
    let x = rng.gaussian_vec(raw, 1.0);
    let feature_grad = norm.backward(&img.encode_image(&x)?, label)?.feature;
    let g = img.encode_image_grads(&x, &feature_grad)?;
    let (mut gw, mut gb) = (g.weight.data().to_vec(), g.bias.into_vec());
    inject(fault, "image_encoder.weight", &mut gw);
    inject(fault, "image_encoder.bias", &mut gb);
    let enc_loss = |w: &[f64], b: &[f64]| {
        ImageEncoder::new(
            Matrix::from_rows(dim, raw, w.to_vec()).expect("shape"),
            Embedding::from_raw(b.to_vec()),
        )
        .and_then(|e| e.encode_image(&x))
        .and_then(|z| norm.backward(&z, label))
        .map(|g| g.loss)
        .unwrap_or(f64::NAN)
    };
    let nw = central_difference_gradient(|w| enc_loss(w, &img.bias), img.weight.data(), h)?;
    let nb = central_difference_gradient(|b| enc_loss(img.weight.data(), b), &img.bias, h)?;
    out.push(("image_encoder.weight", relative_error(&gw, &nw)));
    out.push(("image_encoder.bias", relative_error(&gb, &nb)));
    Ok(out)
}
