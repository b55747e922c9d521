//! Mixed-precision plan generation and costing.
//!
//! Two plan families are produced, labeled distinctly because they coincide
//! only in the single-width case:
//!
//! * **Threshold family** (`p01`, `p02`, …): a single quantization width.
//!   Layers are ordered by a sensitivity score (default: KL student→teacher)
//!   and plan `p_k` quantizes the `⌈k·L/num_points⌉` least-sensitive layers,
//!   i.e. the score quantiles serve as cutoffs κ. A layer stays at full
//!   precision iff its score clears the cutoff, so the family traces a
//!   compression–accuracy curve controlled entirely by the scores.
//! * **Merged-list family** (`m01`, `m02`, …): the per-layer INT4 and INT8
//!   scores are merged into one list with *two entries per layer*, sorted
//!   ascending by score, and cut at evenly spaced positions. Entries below
//!   the cut are selected; when both of a layer's entries fall below the
//!   cut, the later (higher-score) entry wins — "last-wins" — so each layer
//!   resolves to exactly one width.
//!
//! Plan size is analytic: FP16 accounting (2 bytes/param) for everything
//! kept — including the embedding table and the non-matrix auxiliaries —
//! 1 byte/param for INT8 and 0.5 bytes/param for INT4. Latency and
//! throughput are out of scope; they are hardware-bound, size is not.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, DEFAULT_CHUNK_LEN};
use crate::model::{LayerDescriptor, Model, Subtype};
use crate::quant::{apply_plan, QuantSpec};
use crate::sensitivity::{Metric, SensitivityRecord, SENSITIVITY_METRIC};

// ── Precision classes ──────────────────────────────────────────────────────

/// Per-layer precision assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Precision {
    /// Full precision (FP16 for size accounting).
    Keep,
    Int8,
    Int4,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Keep => "keep",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        }
    }

    /// Storage cost under the deployment accounting model.
    pub fn bytes_per_param(self) -> f64 {
        match self {
            Precision::Keep => 2.0,
            Precision::Int8 => 1.0,
            Precision::Int4 => 0.5,
        }
    }

    /// The quantization spec realizing this precision; `None` for KEEP.
    pub fn quant_spec(self) -> Option<QuantSpec> {
        match self {
            Precision::Keep => None,
            Precision::Int8 => Some(QuantSpec::INT8),
            Precision::Int4 => Some(QuantSpec::INT4),
        }
    }

    fn from_quant_spec(spec: QuantSpec) -> Precision {
        match spec.bits {
            8 => Precision::Int8,
            _ => Precision::Int4,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Precision::Keep, Precision::Int8, Precision::Int4]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::invalid("Precision::from_str", format!("unknown width {s:?}"))
            })
    }
}

impl serde::Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Precision::from_str(&s).map_err(serde::de::Error::custom)
    }
}

// ── Plans ──────────────────────────────────────────────────────────────────

/// A per-layer precision assignment with a name and, for threshold-derived
/// plans, the cutoff κ that reproduces it.
///
/// Layers absent from `assignment` are implicitly KEEP; generated plans only
/// list quantized layers, but explicit `keep` entries loaded from a plan
/// file are preserved verbatim (they change nothing semantically).
///
/// `threshold` is the sensitivity score of the *least-sensitive kept* layer:
/// exactly the cutoff at which "full precision iff score ≥ κ" reproduces the
/// assignment (for the default descending-sensitivity metrics; the
/// comparison flips with SQNR's direction). A plan that quantizes every
/// layer has no finite cutoff and records none, as do merged-list plans.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPrecisionPlan {
    pub name: String,
    pub threshold: Option<f64>,
    pub assignment: BTreeMap<LayerDescriptor, Precision>,
}

impl MixedPrecisionPlan {
    /// An all-KEEP plan (the full-precision baseline).
    pub fn empty(name: &str) -> Self {
        MixedPrecisionPlan { name: name.to_string(), threshold: None, assignment: BTreeMap::new() }
    }

    /// Effective precision of a layer under this plan.
    pub fn precision_of(&self, layer: &LayerDescriptor) -> Precision {
        self.assignment.get(layer).copied().unwrap_or(Precision::Keep)
    }

    /// Layers actually quantized (KEEP entries excluded), canonical order.
    pub fn quantized_layers(&self) -> Vec<LayerDescriptor> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p != Precision::Keep)
            .map(|(l, _)| *l)
            .collect()
    }
}

// ── Threshold family ───────────────────────────────────────────────────────

/// Threshold plans from the default sensitivity score (KL student→teacher).
pub fn make_threshold_plans(
    records: &[SensitivityRecord],
    num_points: usize,
) -> Result<Vec<MixedPrecisionPlan>> {
    make_threshold_plans_by(records, SENSITIVITY_METRIC, num_points)
}

/// Threshold plans scored by an arbitrary metric (for comparison studies).
///
/// Plan `p_k` (k = 1..=num_points) quantizes the `⌈k·L/num_points⌉`
/// least-sensitive layers at the width the records were swept with, so the
/// family is nested and `p_num_points` quantizes every recorded layer.
/// Ties are broken by layer enumeration order.
pub fn make_threshold_plans_by(
    records: &[SensitivityRecord],
    metric: Metric,
    num_points: usize,
) -> Result<Vec<MixedPrecisionPlan>> {
    if records.is_empty() {
        return Err(Error::invalid("make_threshold_plans", "no records given".to_string()));
    }
    if num_points == 0 {
        return Err(Error::invalid("make_threshold_plans", "num_points must be >= 1".to_string()));
    }
    let spec = records[0].spec;
    if records.iter().any(|r| r.spec != spec) {
        return Err(Error::invalid(
            "make_threshold_plans",
            "records mix quantization widths; sweep each width separately".to_string(),
        ));
    }
    let precision = Precision::from_quant_spec(spec);
    let order = least_sensitive_order(records, metric)?;

    let l = records.len();
    let mut plans = Vec::with_capacity(num_points);
    for k in 1..=num_points {
        let m = (k * l).div_ceil(num_points);
        let assignment: BTreeMap<_, _> =
            order[..m].iter().map(|&i| (records[i].layer, precision)).collect();
        // κ is the first kept layer's score; absent when everything is cut.
        let threshold = (m < l).then(|| metric.value(&records[order[m]]));
        plans.push(MixedPrecisionPlan { name: format!("p{k:02}"), threshold, assignment });
    }
    Ok(plans)
}

/// Record indices sorted least-sensitive-first (the reverse direction of
/// [`rank_by_metric`](crate::sensitivity::rank_by_metric), with ties still
/// resolved by enumeration order).
fn least_sensitive_order(records: &[SensitivityRecord], metric: Metric) -> Result<Vec<usize>> {
    if let Some(r) = records.iter().find(|r| metric.value(r).is_nan()) {
        return Err(Error::invalid(
            "least_sensitive_order",
            format!("metric {metric} is NaN for layer {}", r.layer),
        ));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| {
        let (va, vb) = (metric.value(&records[a]), metric.value(&records[b]));
        // Least sensitive first: lowest score for descending metrics,
        // highest SQNR for the ascending one.
        if metric.ascending() {
            vb.partial_cmp(&va).expect("NaN checked above")
        } else {
            va.partial_cmp(&vb).expect("NaN checked above")
        }
    });
    Ok(idx)
}

// ── Merged-list family ─────────────────────────────────────────────────────

/// One (layer, width, score) entry of the merged list, pre-sort.
struct MergedEntry {
    layer: LayerDescriptor,
    width: Precision,
    score: f64,
}

/// Builds the merged list: two entries per layer — the INT8 one emitted
/// first, so equal scores resolve to INT4 under last-wins — scored by
/// KL(student‖teacher), sorted ascending (stable).
fn merged_entries(
    records_int4: &[SensitivityRecord],
    records_int8: &[SensitivityRecord],
) -> Result<Vec<MergedEntry>> {
    let by_layer: BTreeMap<LayerDescriptor, &SensitivityRecord> =
        records_int8.iter().map(|r| (r.layer, r)).collect();
    if by_layer.len() != records_int4.len() || records_int4.len() != records_int8.len() {
        return Err(Error::invalid(
            "make_merged_two_pass_plans",
            format!(
                "layer sets differ: {} int4 records vs {} int8 records",
                records_int4.len(),
                records_int8.len()
            ),
        ));
    }
    let mut entries = Vec::with_capacity(2 * records_int4.len());
    for r4 in records_int4 {
        let r8 = by_layer.get(&r4.layer).ok_or_else(|| {
            Error::invalid(
                "make_merged_two_pass_plans",
                format!("layer {} has no int8 record", r4.layer),
            )
        })?;
        for (rec, width) in [(*r8, Precision::Int8), (r4, Precision::Int4)] {
            let score = SENSITIVITY_METRIC.value(rec);
            if score.is_nan() {
                return Err(Error::invalid(
                    "make_merged_two_pass_plans",
                    format!("score is NaN for layer {}", rec.layer),
                ));
            }
            entries.push(MergedEntry { layer: rec.layer, width, score });
        }
    }
    entries.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("NaN checked above"));
    Ok(entries)
}

/// One merged-list plan: select the `cut` lowest-score entries (clamped to
/// the list length) and resolve layers appearing twice by last-wins.
pub fn merged_plan_at_cut(
    records_int4: &[SensitivityRecord],
    records_int8: &[SensitivityRecord],
    cut: usize,
    name: &str,
) -> Result<MixedPrecisionPlan> {
    let entries = merged_entries(records_int4, records_int8)?;
    let cut = cut.min(entries.len());
    let mut assignment = BTreeMap::new();
    for e in &entries[..cut] {
        // Later (higher-score) entries overwrite earlier ones.
        assignment.insert(e.layer, e.width);
    }
    Ok(MixedPrecisionPlan { name: name.to_string(), threshold: None, assignment })
}

/// The merged-list two-pass family: cuts at `⌈k·2L/num_points⌉` entries for
/// k = 1..=num_points, named `m01`, `m02`, …
pub fn make_merged_two_pass_plans(
    records_int4: &[SensitivityRecord],
    records_int8: &[SensitivityRecord],
    num_points: usize,
) -> Result<Vec<MixedPrecisionPlan>> {
    if num_points == 0 {
        return Err(Error::invalid(
            "make_merged_two_pass_plans",
            "num_points must be >= 1".to_string(),
        ));
    }
    let total = 2 * records_int4.len();
    (1..=num_points)
        .map(|k| {
            let cut = (k * total).div_ceil(num_points);
            merged_plan_at_cut(records_int4, records_int8, cut, &format!("m{k:02}"))
        })
        .collect()
}

// ── Size accounting ────────────────────────────────────────────────────────

/// Analytic storage cost of a plan.
///
/// Byte counts are exact rationals with denominator 2 (INT4 stores two
/// params per byte), so per-layer values are `f64` and only the grand total
/// rounds — upward, to whole bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    /// Whole-file size: `ceil(Σ per_layer + aux)`.
    pub total_bytes: u64,
    /// Per weight-matrix cost, embedding included (always at KEEP width).
    pub per_layer_bytes: BTreeMap<LayerDescriptor, f64>,
    /// Non-matrix parameters (norm gains, state matrices, biases), always
    /// at KEEP width.
    pub aux_bytes: f64,
    /// Totals grouped by precision class; aux counts toward KEEP.
    pub breakdown: BTreeMap<Precision, f64>,
}

impl SizeReport {
    /// Exact (un-rounded) total in bytes.
    pub fn exact_bytes(&self) -> f64 {
        self.per_layer_bytes.values().sum::<f64>() + self.aux_bytes
    }
}

/// Sizes a plan against a model. Layers not mentioned by the plan — and the
/// embedding table, unconditionally — are costed at KEEP width.
pub fn estimate_size(model: &Model, plan: &MixedPrecisionPlan) -> SizeReport {
    let mut per_layer_bytes = BTreeMap::new();
    let mut breakdown: BTreeMap<Precision, f64> = BTreeMap::new();
    for desc in model.descriptors() {
        let precision = if desc.subtype == Subtype::Embedding {
            Precision::Keep
        } else {
            plan.precision_of(desc)
        };
        let params = model.weight(desc).map(|w| w.len()).unwrap_or(0);
        let bytes = params as f64 * precision.bytes_per_param();
        per_layer_bytes.insert(*desc, bytes);
        *breakdown.entry(precision).or_insert(0.0) += bytes;
    }
    let aux_bytes = model.aux_num_params() as f64 * Precision::Keep.bytes_per_param();
    *breakdown.entry(Precision::Keep).or_insert(0.0) += aux_bytes;
    let exact = per_layer_bytes.values().sum::<f64>() + aux_bytes;
    SizeReport { total_bytes: exact.ceil() as u64, per_layer_bytes, aux_bytes, breakdown }
}

// ── Plan evaluation ────────────────────────────────────────────────────────

/// A point on the compression–accuracy curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEvaluation {
    pub ppl: f64,
    pub size_report: SizeReport,
}

/// Applies the plan and measures dataset perplexity plus analytic size.
pub fn evaluate_plan(
    model: &Model,
    plan: &MixedPrecisionPlan,
    stream: &TokenStream,
) -> Result<PlanEvaluation> {
    evaluate_plan_with(model, plan, stream, DEFAULT_CHUNK_LEN)
}

/// [`evaluate_plan`] with an explicit evaluation chunk length.
pub fn evaluate_plan_with(
    model: &Model,
    plan: &MixedPrecisionPlan,
    stream: &TokenStream,
    chunk_len: usize,
) -> Result<PlanEvaluation> {
    let student = apply_plan(model, plan)?;
    let eval = evaluate_model(&student, stream, chunk_len)?;
    Ok(PlanEvaluation { ppl: eval.result.perplexity, size_report: estimate_size(model, plan) })
}

// ── Plan files ─────────────────────────────────────────────────────────────

/// Serialized form: `{name, threshold, assignments: [{block, subtype, width}]}`.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    name: String,
    threshold: Option<f64>,
    assignments: Vec<PlanFileEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFileEntry {
    block: usize,
    subtype: Subtype,
    width: Precision,
}

/// Serializes a plan to its JSON schema, assignments in canonical layer
/// order. Rejects non-finite thresholds (JSON cannot round-trip them).
pub fn plan_to_json(plan: &MixedPrecisionPlan) -> Result<String> {
    if let Some(t) = plan.threshold {
        if !t.is_finite() {
            return Err(Error::NonFinite {
                op: "plan_to_json",
                detail: format!("threshold {t} of plan {:?}", plan.name),
            });
        }
    }
    let file = PlanFile {
        name: plan.name.clone(),
        threshold: plan.threshold,
        assignments: plan
            .assignment
            .iter()
            .map(|(l, &p)| PlanFileEntry { block: l.block, subtype: l.subtype, width: p })
            .collect(),
    };
    let mut out = serde_json::to_string_pretty(&file)?;
    out.push('\n');
    Ok(out)
}

/// Parses a plan from its JSON schema. Duplicate layers are rejected;
/// explicit `keep` entries are preserved.
pub fn plan_from_json(json: &str) -> Result<MixedPrecisionPlan> {
    let file: PlanFile = serde_json::from_str(json)?;
    let mut assignment = BTreeMap::new();
    for e in file.assignments {
        let layer = LayerDescriptor::new(e.block, e.subtype);
        if assignment.insert(layer, e.width).is_some() {
            return Err(Error::malformed(
                "plan JSON",
                format!("layer {layer} assigned more than once"),
            ));
        }
    }
    Ok(MixedPrecisionPlan { name: file.name, threshold: file.threshold, assignment })
}
