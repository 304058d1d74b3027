//! Evaluation harness: runs attribution methods over a dataset of images,
//! feeds the explanation maps back through the model, aggregates relative
//! performance as geometric means of score ratios, and collects alpha
//! distribution statistics. Reports serialize to JSON or CSV with floats at
//! 17 significant digits so every numeric field round-trips bit-exactly.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Map, Number, Value};

use crate::cam::{attribute_from_trace, AttributionRequest, Method};
use crate::error::{Error, Result};
use crate::float::Real;
use crate::nn::{Model, ScoreMode, ScoreSpec};
use crate::postproc::netpbm::read_image;
use crate::postproc::{bilinear_upsample, explanation_map, min_max_normalize, Image};
use crate::tensor::Tensor;

/// Post-softmax scores are floored at this value before any logarithm;
/// explanation maps can drive class probabilities into underflow.
pub const SCORE_FLOOR: f64 = 1e-12;

/// How the target class is chosen per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSelect {
    /// Index-file label when present, otherwise the base-image argmax.
    LabelOrArgmax,
    /// A fixed class for every image.
    Fixed(usize),
}

/// One attribution method entry in an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalMethod<T> {
    pub label: String,
    pub method: Method,
    pub lambda: T,
    pub alpha_epsilon: T,
    /// Optional constant replacing every nonzero alpha (Grad-CAM++ only).
    pub alpha_override: Option<T>,
}

impl<T: Real> EvalMethod<T> {
    pub fn new(method: Method) -> Self {
        EvalMethod {
            label: method.name().to_string(),
            method,
            lambda: T::one(),
            alpha_epsilon: T::zero(),
            alpha_override: None,
        }
    }
}

/// Shared knobs for an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub layer_index: usize,
    pub score_mode: ScoreMode,
    /// Keep only images whose base post-softmax score for the target class
    /// strictly exceeds this threshold.
    pub confidence: f64,
    pub class_select: ClassSelect,
}

/// Outcome of one method on one image.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub label: String,
    /// Post-softmax score of the target class on the re-fed explanation map.
    pub score: f64,
    /// The heatmap was constant and normalized to all zeros.
    pub degenerate: bool,
}

/// Per-image evaluation record.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub image_id: String,
    pub class_index: usize,
    /// Post-softmax score of the target class on the original image.
    pub base_score: f64,
    pub methods: Vec<MethodOutcome>,
}

/// Records plus bookkeeping from one dataset pass.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    /// Images that could not be read or did not fit the model.
    pub skipped: usize,
    pub warnings: Vec<String>,
    /// Images below the confidence threshold.
    pub filtered_out: usize,
}

/// Relative performance of method `method_prime` against `method`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPerfReport {
    pub method_prime: String,
    pub method: String,
    /// Geometric mean of per-image score ratios, `exp(log_mean)`.
    pub relative_performance: f64,
    pub log_mean: f64,
    pub log_std: f64,
    pub sample_count: usize,
    pub confidence_threshold: f64,
}

/// Quartiles of a distribution (linear-interpolation convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Alpha distribution statistics across a dataset.
///
/// Quartiles are computed on nonzero alphas after Tukey 1.5 IQR outlier
/// removal; the raw extremes keep the outliers. The histogram squeezes all
/// nonzero alphas through `tanh(alpha - 0.5)` into 64 equal bins over
/// [-1, 1], outliers included.
#[derive(Debug, Clone)]
pub struct AlphaStats {
    pub quartiles: Option<Quartiles>,
    pub raw_nonzero_min: Option<f64>,
    pub raw_nonzero_max: Option<f64>,
    pub zero_count: usize,
    pub nonzero_count: usize,
    pub clamped_count: usize,
    pub non_finite_count: usize,
    pub tanh_histogram: Vec<usize>,
    /// Distribution of the denominator term `g * sum(A_k)` at units with a
    /// nonzero gradient, same outlier treatment as the alphas.
    pub denom_quartiles: Option<Quartiles>,
    pub denom_min: Option<f64>,
    pub denom_max: Option<f64>,
}

pub const TANH_HISTOGRAM_BINS: usize = 64;

/// Full evaluation report: per-image records plus pair aggregates.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub layer_index: usize,
    pub score_mode: ScoreMode,
    pub confidence: f64,
    pub methods: Vec<String>,
    pub sample_count: usize,
    pub skipped: usize,
    pub filtered_out: usize,
    pub records: Vec<EvalRecord>,
    pub pairs: Vec<RelPerfReport>,
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// Parses `index.csv` in a dataset directory: one `filename[,label]` row per
/// image, `#` comments allowed, an optional `filename,label` header skipped.
pub fn load_dataset_index(dir: &Path) -> Result<Vec<(String, Option<usize>)>> {
    let path = dir.join("index.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(2, ',');
        let name = fields.next().unwrap().trim();
        let label_field = fields.next().map(str::trim).filter(|s| !s.is_empty());
        if lineno == 0 && name.eq_ignore_ascii_case("filename") {
            continue; // header row
        }
        let label = match label_field {
            Some(s) => Some(s.parse::<usize>().map_err(|_| {
                Error::Dataset(format!("bad label `{s}` on line {} of index.csv", lineno + 1))
            })?),
            None => None,
        };
        entries.push((name.to_string(), label));
    }
    if entries.is_empty() {
        return Err(Error::Dataset("index.csv lists no images".into()));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Worker fan-out
// ---------------------------------------------------------------------------

/// Worker count for per-image fan-out: `CAMFORGE_THREADS`, where 0 or unset
/// means the machine's available parallelism.
pub fn worker_count() -> usize {
    let configured = std::env::var("CAMFORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    match configured {
        Some(n) if n > 0 => n,
        _ => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

/// Applies `f` to every item on a small thread pool, preserving input order.
/// Outputs land in per-index slots, so scheduling cannot reorder results.
fn parallel_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync,
{
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.into_iter().map(f).collect();
    }
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let inputs: Vec<Mutex<Option<I>>> = items.into_iter().map(|i| Mutex::new(Some(i))).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= inputs.len() {
                    break;
                }
                let item = inputs[i].lock().unwrap().take().unwrap();
                *slots[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().unwrap()).collect()
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

fn pick_class<T: Real>(
    select: ClassSelect,
    label: Option<usize>,
    trace: &crate::nn::ForwardTrace<T>,
) -> usize {
    match select {
        ClassSelect::Fixed(c) => c,
        ClassSelect::LabelOrArgmax => label.unwrap_or_else(|| trace.argmax()),
    }
}

/// Evaluates every listed image: attribution per method, explanation map,
/// and the post-softmax score of the re-fed explanation map. Only images
/// whose base score exceeds the confidence threshold produce records.
pub fn evaluate_dataset<T: Real>(
    model: &Model<T>,
    dataset_dir: &Path,
    methods: &[EvalMethod<T>],
    config: &EvalConfig,
) -> Result<EvalOutcome> {
    if methods.is_empty() {
        return Err(Error::Empty("no methods requested".into()));
    }
    let entries = load_dataset_index(dataset_dir)?;
    let results = parallel_map(entries, |(name, label)| {
        let path = dataset_dir.join(&name);
        match evaluate_one(model, &path, &name, label, methods, config) {
            Ok(Some(record)) => ImageResult::Done(record),
            Ok(None) => ImageResult::Filtered,
            Err(e) => ImageResult::Skipped(format!("{name}: {e}")),
        }
    });

    let mut outcome = EvalOutcome { records: Vec::new(), skipped: 0, warnings: Vec::new(), filtered_out: 0 };
    for r in results {
        match r {
            ImageResult::Done(rec) => outcome.records.push(rec),
            ImageResult::Filtered => outcome.filtered_out += 1,
            ImageResult::Skipped(w) => {
                eprintln!("warning: skipping {w}");
                outcome.warnings.push(w);
                outcome.skipped += 1;
            }
        }
    }
    // Deterministic aggregation order regardless of scheduling.
    outcome.records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if outcome.records.is_empty() {
        return Err(Error::Empty(format!(
            "no image passed the confidence threshold {}",
            config.confidence
        )));
    }
    Ok(outcome)
}

enum ImageResult {
    Done(EvalRecord),
    Filtered,
    Skipped(String),
}

/// `Ok(None)` means the image fell below the confidence threshold.
fn evaluate_one<T: Real>(
    model: &Model<T>,
    path: &Path,
    name: &str,
    label: Option<usize>,
    methods: &[EvalMethod<T>],
    config: &EvalConfig,
) -> Result<Option<EvalRecord>> {
    let image: Image<T> = read_image(path)?;
    let input = image.to_tensor();
    let trace = model.forward(&input)?;
    let class = pick_class(config.class_select, label, &trace);
    model.check_class(class)?;
    let base_score = trace.post_softmax[class].as_f64();
    if base_score <= config.confidence {
        return Ok(None);
    }

    let mut outcomes = Vec::with_capacity(methods.len());
    for m in methods {
        let mut request = AttributionRequest::new(
            m.method,
            config.layer_index,
            ScoreSpec { class_index: class, mode: config.score_mode },
        );
        request.lambda = m.lambda;
        request.alpha_epsilon = m.alpha_epsilon;
        request.alpha_override = m.alpha_override;
        let attribution = attribute_from_trace(model, &trace, &request)?;
        let normalized = min_max_normalize(&attribution.heatmap.values);
        let upsampled = bilinear_upsample(&normalized, image.height, image.width)?;
        let emap = explanation_map(&upsampled, &image)?;
        let etrace = model.forward(&emap.to_tensor())?;
        outcomes.push(MethodOutcome {
            label: m.label.clone(),
            score: etrace.post_softmax[class].as_f64(),
            degenerate: normalized.degenerate,
        });
    }
    Ok(Some(EvalRecord { image_id: name.to_string(), class_index: class, base_score, methods: outcomes }))
}

// ---------------------------------------------------------------------------
// Relative performance
// ---------------------------------------------------------------------------

fn method_score(record: &EvalRecord, label: &str) -> Result<f64> {
    record
        .methods
        .iter()
        .find(|m| m.label == label)
        .map(|m| m.score)
        .ok_or_else(|| Error::Dataset(format!("record {} has no method `{label}`", record.image_id)))
}

/// Relative performance of `method_prime` vs `method` across the records:
/// the geometric mean of per-image score ratios, computed as the exponential
/// of the mean log ratio. Scores are floored at [`SCORE_FLOOR`] before the
/// logarithm.
pub fn relative_performance(
    records: &[EvalRecord],
    method_prime: &str,
    method: &str,
    confidence_threshold: f64,
) -> Result<RelPerfReport> {
    if records.is_empty() {
        return Err(Error::Empty("relative performance of zero records".into()));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut logs = Vec::with_capacity(sorted.len());
    for record in &sorted {
        let prime = method_score(record, method_prime)?.max(SCORE_FLOOR);
        let base = method_score(record, method)?.max(SCORE_FLOOR);
        logs.push(prime.ln() - base.ln());
    }
    let n = logs.len() as f64;
    let log_mean = logs.iter().sum::<f64>() / n;
    let variance = logs.iter().map(|l| (l - log_mean) * (l - log_mean)).sum::<f64>() / n;
    Ok(RelPerfReport {
        method_prime: method_prime.to_string(),
        method: method.to_string(),
        relative_performance: log_mean.exp(),
        log_mean,
        log_std: variance.sqrt(),
        sample_count: logs.len(),
        confidence_threshold,
    })
}

/// Runs the full harness: records plus one relative-performance entry per
/// ordered method pair (each later method against each earlier one).
pub fn evaluate_and_report<T: Real>(
    model: &Model<T>,
    dataset_dir: &Path,
    methods: &[EvalMethod<T>],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let outcome = evaluate_dataset(model, dataset_dir, methods, config)?;
    let mut pairs = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            pairs.push(relative_performance(
                &outcome.records,
                &methods[j].label,
                &methods[i].label,
                config.confidence,
            )?);
        }
    }
    Ok(EvalReport {
        layer_index: config.layer_index,
        score_mode: config.score_mode,
        confidence: config.confidence,
        methods: methods.iter().map(|m| m.label.clone()).collect(),
        sample_count: outcome.records.len(),
        skipped: outcome.skipped,
        filtered_out: outcome.filtered_out,
        records: outcome.records,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Alpha statistics
// ---------------------------------------------------------------------------

/// Quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn quartiles_of(sorted: &[f64]) -> Quartiles {
    Quartiles {
        q1: quantile(sorted, 0.25),
        median: quantile(sorted, 0.5),
        q3: quantile(sorted, 0.75),
    }
}

/// Quartiles after removing Tukey-fence outliers (1.5 IQR beyond Q1/Q3).
fn tukey_quartiles(values: &mut [f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let raw = quartiles_of(values);
    let iqr = raw.q3 - raw.q1;
    let lo = raw.q1 - 1.5 * iqr;
    let hi = raw.q3 + 1.5 * iqr;
    let kept: Vec<f64> = values.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
    if kept.is_empty() {
        return Some(raw);
    }
    Some(quartiles_of(&kept))
}

/// Builds [`AlphaStats`] from collected per-unit values: nonzero alphas,
/// the zero-gradient unit count, and the denominator terms.
pub fn alpha_stats_from_parts(
    mut nonzero_alphas: Vec<f64>,
    zero_count: usize,
    mut denom_terms: Vec<f64>,
    clamped_count: usize,
    non_finite_count: usize,
) -> AlphaStats {
    let mut histogram = vec![0usize; TANH_HISTOGRAM_BINS];
    for &a in &nonzero_alphas {
        let squeezed = (a - 0.5).tanh();
        let bin = (((squeezed + 1.0) / 2.0) * TANH_HISTOGRAM_BINS as f64) as usize;
        histogram[bin.min(TANH_HISTOGRAM_BINS - 1)] += 1;
    }
    let raw_min = nonzero_alphas.iter().copied().reduce(f64::min);
    let raw_max = nonzero_alphas.iter().copied().reduce(f64::max);
    let denom_min = denom_terms.iter().copied().reduce(f64::min);
    let denom_max = denom_terms.iter().copied().reduce(f64::max);
    AlphaStats {
        nonzero_count: nonzero_alphas.len(),
        quartiles: tukey_quartiles(&mut nonzero_alphas),
        raw_nonzero_min: raw_min,
        raw_nonzero_max: raw_max,
        zero_count,
        clamped_count,
        non_finite_count,
        tanh_histogram: histogram,
        denom_quartiles: tukey_quartiles(&mut denom_terms),
        denom_min,
        denom_max,
    }
}

/// Aggregated Grad-CAM++ alpha statistics over in-memory images.
pub fn alpha_statistics<T: Real>(
    model: &Model<T>,
    images: &[(String, Tensor<T>, Option<usize>)],
    layer_index: usize,
    class_select: ClassSelect,
    lambda: T,
) -> Result<AlphaStats> {
    if images.is_empty() {
        return Err(Error::Empty("alpha statistics over zero images".into()));
    }
    struct PerImage {
        id: String,
        alphas: Vec<f64>,
        zero: usize,
        denoms: Vec<f64>,
        clamped: usize,
        non_finite: usize,
    }
    let work: Vec<(&String, &Tensor<T>, Option<usize>)> =
        images.iter().map(|(id, t, l)| (id, t, *l)).collect();
    let results: Vec<Result<PerImage>> = parallel_map(work, |(id, input, label)| {
        let trace = model.forward(input)?;
        let class = pick_class(class_select, label, &trace);
        model.check_class(class)?;
        let score = ScoreSpec { class_index: class, mode: ScoreMode::PreSoftmax };
        let grads = model.backward_to_layer(&trace, score, layer_index)?;
        let acts = &trace.activations[layer_index];
        let field = crate::cam::alpha_stable(&grads, acts, lambda, T::zero())?;

        let mut alphas = Vec::new();
        let mut denoms = Vec::new();
        let maps = acts.shape()[0];
        let per_map = acts.shape()[1] * acts.shape()[2];
        for k in 0..maps {
            let sum_a: T = acts.data()[k * per_map..(k + 1) * per_map].iter().copied().sum();
            for off in k * per_map..(k + 1) * per_map {
                let g = grads.data()[off];
                if g != T::zero() {
                    denoms.push((g * sum_a).as_f64());
                    let a = field.values.data()[off];
                    if a != T::zero() {
                        alphas.push(a.as_f64());
                    }
                }
            }
        }
        Ok(PerImage {
            id: id.clone(),
            alphas,
            zero: field.zero_gradient_count,
            denoms,
            clamped: field.clamped_count,
            non_finite: field.non_finite_units.len(),
        })
    });

    let mut per_image = Vec::with_capacity(results.len());
    for r in results {
        per_image.push(r?);
    }
    per_image.sort_by(|a, b| a.id.cmp(&b.id));

    let mut nonzero = Vec::new();
    let mut denoms = Vec::new();
    let mut zero = 0;
    let mut clamped = 0;
    let mut non_finite = 0;
    for p in per_image {
        nonzero.extend(p.alphas);
        denoms.extend(p.denoms);
        zero += p.zero;
        clamped += p.clamped;
        non_finite += p.non_finite;
    }
    Ok(alpha_stats_from_parts(nonzero, zero, denoms, clamped, non_finite))
}

/// Alpha statistics over a dataset directory (same index format as
/// [`evaluate_dataset`]).
pub fn alpha_statistics_dir<T: Real>(
    model: &Model<T>,
    dataset_dir: &Path,
    layer_index: usize,
    class_select: ClassSelect,
    lambda: T,
) -> Result<AlphaStats> {
    let entries = load_dataset_index(dataset_dir)?;
    let mut images = Vec::new();
    for (name, label) in entries {
        let image: Image<T> = read_image(&dataset_dir.join(&name))?;
        images.push((name, image.to_tensor(), label));
    }
    alpha_statistics(model, &images, layer_index, class_select, lambda)
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

/// Report output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::ReportFormat(other.into())),
        }
    }
}

/// Anything the harness can serialize to a report file.
pub trait Report {
    fn to_json(&self) -> Value;
    fn to_csv(&self) -> String;
}

/// JSON number from an f64; non-finite values become `null`.
pub(crate) fn num(v: f64) -> Value {
    Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

fn opt_num(v: Option<f64>) -> Value {
    v.map(num).unwrap_or(Value::Null)
}

/// Formats a float with 17 significant digits (bit-exact round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{}", fmt_f64(value))
    }
}

/// Serializes a JSON value with 17-significant-digit floats.
pub fn render_json(value: &Value) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter);
    serde::Serialize::serialize(value, &mut ser)?;
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

pub fn render_report<R: Report + ?Sized>(report: &R, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => render_json(&report.to_json()),
        ReportFormat::Csv => Ok(report.to_csv()),
    }
}

pub fn write_report<R: Report + ?Sized>(report: &R, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

fn score_mode_name(mode: ScoreMode) -> &'static str {
    match mode {
        ScoreMode::PreSoftmax => "pre",
        ScoreMode::PostSoftmax => "post",
    }
}

const PAIR_CSV_HEADER: &str =
    "method_prime,method,relative_performance,log_mean,log_std,sample_count,confidence_threshold";

fn pair_csv_row(p: &RelPerfReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        p.method_prime,
        p.method,
        fmt_f64(p.relative_performance),
        fmt_f64(p.log_mean),
        fmt_f64(p.log_std),
        p.sample_count,
        fmt_f64(p.confidence_threshold)
    )
}

impl Report for RelPerfReport {
    fn to_json(&self) -> Value {
        json!({
            "method_prime": self.method_prime,
            "method": self.method,
            "relative_performance": num(self.relative_performance),
            "log_mean": num(self.log_mean),
            "log_std": num(self.log_std),
            "sample_count": self.sample_count,
            "confidence_threshold": num(self.confidence_threshold),
        })
    }

    fn to_csv(&self) -> String {
        format!("{PAIR_CSV_HEADER}\n{}\n", pair_csv_row(self))
    }
}

impl Report for EvalReport {
    fn to_json(&self) -> Value {
        let records: Vec<Value> = self
            .records
            .iter()
            .map(|r| {
                let methods: Vec<Value> = r
                    .methods
                    .iter()
                    .map(|m| {
                        json!({
                            "label": m.label,
                            "score": num(m.score),
                            "degenerate": m.degenerate,
                        })
                    })
                    .collect();
                json!({
                    "image_id": r.image_id,
                    "class_index": r.class_index,
                    "base_score": num(r.base_score),
                    "methods": methods,
                })
            })
            .collect();
        let pairs: Vec<Value> = self.pairs.iter().map(|p| p.to_json()).collect();
        let mut map = Map::new();
        map.insert("layer_index".into(), self.layer_index.into());
        map.insert("score_mode".into(), score_mode_name(self.score_mode).into());
        map.insert("confidence".into(), num(self.confidence));
        map.insert("methods".into(), self.methods.clone().into());
        map.insert("sample_count".into(), self.sample_count.into());
        map.insert("skipped".into(), self.skipped.into());
        map.insert("filtered_out".into(), self.filtered_out.into());
        map.insert("records".into(), Value::Array(records));
        map.insert("pairs".into(), Value::Array(pairs));
        Value::Object(map)
    }

    fn to_csv(&self) -> String {
        let mut out = String::from(PAIR_CSV_HEADER);
        out.push('\n');
        for p in &self.pairs {
            out.push_str(&pair_csv_row(p));
            out.push('\n');
        }
        out
    }
}

impl Report for AlphaStats {
    fn to_json(&self) -> Value {
        let q = |qt: &Option<Quartiles>| match qt {
            Some(q) => json!({ "q1": num(q.q1), "median": num(q.median), "q3": num(q.q3) }),
            None => Value::Null,
        };
        json!({
            "quartiles": q(&self.quartiles),
            "raw_nonzero_min": opt_num(self.raw_nonzero_min),
            "raw_nonzero_max": opt_num(self.raw_nonzero_max),
            "zero_count": self.zero_count,
            "nonzero_count": self.nonzero_count,
            "clamped_count": self.clamped_count,
            "non_finite_count": self.non_finite_count,
            "tanh_histogram_bins": TANH_HISTOGRAM_BINS,
            "tanh_histogram": self.tanh_histogram,
            "denom_quartiles": q(&self.denom_quartiles),
            "denom_min": opt_num(self.denom_min),
            "denom_max": opt_num(self.denom_max),
        })
    }

    fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut header = String::from(
            "q1,median,q3,raw_nonzero_min,raw_nonzero_max,zero_count,nonzero_count,clamped_count,non_finite_count,denom_q1,denom_median,denom_q3,denom_min,denom_max",
        );
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(self.quartiles.map(|q| q.q1)),
            f(self.quartiles.map(|q| q.median)),
            f(self.quartiles.map(|q| q.q3)),
            f(self.raw_nonzero_min),
            f(self.raw_nonzero_max),
            self.zero_count,
            self.nonzero_count,
            self.clamped_count,
            self.non_finite_count,
            f(self.denom_quartiles.map(|q| q.q1)),
            f(self.denom_quartiles.map(|q| q.median)),
            f(self.denom_quartiles.map(|q| q.q3)),
            f(self.denom_min),
            f(self.denom_max),
        );
        for (i, count) in self.tanh_histogram.iter().enumerate() {
            header.push_str(&format!(",tanh_bin_{i:02}"));
            row.push_str(&format!(",{count}"));
        }
        format!("{header}\n{row}\n")
    }
}
