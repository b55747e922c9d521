//! The per-layer sensitivity sweep and everything computed from it:
//! direction-aware metric rankings, Kendall's τ with p-values, proxy-metric
//! correlation against the ΔPPL ground truth, and the subtype / per-block
//! aggregations.
//!
//! The sweep itself is the heart of the toolkit: quantize exactly one layer,
//! run the forward pass, compare against the unmodified teacher, repeat for
//! every quantizable layer. No gradients, no training — which is also why
//! the per-layer evaluations are embarrassingly parallel. The concurrency
//! contract is strict: results must be *bit-identical* to sequential
//! execution, which holds because each student's evaluation is internally
//! sequential and records are assembled in canonical layer order regardless
//! of completion order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, Evaluation, DEFAULT_CHUNK_LEN};
use crate::metrics::{
    analytic_cross_entropy, delta_ce, kl_divergence, mean_entropy, sqnr_db, EvalMode, KlDirection,
};
use crate::model::{
    build_model, list_quantizable_layers_with, LayerDescriptor, Model, ModelConfig, Subtype,
};
use crate::quant::{quantize_layer, QuantSpec};

/// The default per-layer sensitivity score used by the planner:
/// KL(student ‖ teacher), the direction that penalizes probability mass the
/// student invents on tokens the teacher considers unlikely.
pub const SENSITIVITY_METRIC: Metric = Metric::KlStudentToTeacher;

// ── Metrics and records ────────────────────────────────────────────────────

/// The rankable per-layer metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    DeltaPpl,
    SqnrDb,
    KlTeacherToStudent,
    KlStudentToTeacher,
    DeltaCe,
}

impl Metric {
    /// All metrics, ground truth first, then the proxies in reporting order.
    pub const ALL: [Metric; 5] = [
        Metric::DeltaPpl,
        Metric::SqnrDb,
        Metric::KlTeacherToStudent,
        Metric::KlStudentToTeacher,
        Metric::DeltaCe,
    ];

    /// The four forward proxies compared against the ΔPPL ground truth.
    pub const PROXIES: [Metric; 4] = [
        Metric::SqnrDb,
        Metric::KlTeacherToStudent,
        Metric::KlStudentToTeacher,
        Metric::DeltaCe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::DeltaPpl => "delta_ppl",
            Metric::SqnrDb => "sqnr_db",
            Metric::KlTeacherToStudent => "kl_teacher_to_student",
            Metric::KlStudentToTeacher => "kl_student_to_teacher",
            Metric::DeltaCe => "delta_ce",
        }
    }

    /// Extracts this metric's value from a record.
    pub fn value(self, r: &SensitivityRecord) -> f64 {
        match self {
            Metric::DeltaPpl => r.delta_ppl,
            Metric::SqnrDb => r.sqnr_db,
            Metric::KlTeacherToStudent => r.kl_teacher_to_student,
            Metric::KlStudentToTeacher => r.kl_student_to_teacher,
            Metric::DeltaCe => r.delta_ce,
        }
    }

    /// Sort direction: every metric ranks most-sensitive-first, which means
    /// descending values — except SQNR, where *low* ratio means the layer's
    /// noise is large, so it sorts ascending.
    pub fn ascending(self) -> bool {
        matches!(self, Metric::SqnrDb)
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("Metric::from_str", format!("unknown metric {s:?}")))
    }
}

impl serde::Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything measured for one `(layer, spec)` ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRecord {
    pub layer: LayerDescriptor,
    pub teacher_ppl: f64,
    pub student_ppl: f64,
    /// `student_ppl - teacher_ppl`.
    pub delta_ppl: f64,
    pub sqnr_db: f64,
    pub kl_teacher_to_student: f64,
    pub kl_student_to_teacher: f64,
    /// `student_ce - teacher_ce`.
    pub delta_ce: f64,
    pub spec: QuantSpec,
}

/// Result of comparing two rankings.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCorrelation {
    /// Kendall's τ-a in `[-1, 1]`.
    pub tau: f64,
    /// Two-sided p-value: exact enumeration for `n <= 8`, otherwise the
    /// normal approximation with variance `2(2n+5) / (9n(n-1))`.
    pub p_value: f64,
    /// Number of ranked items.
    pub n: usize,
    /// The proxy metric this correlation describes, when produced by
    /// [`correlate_all`]; bare [`kendall_tau`] calls leave it unset.
    pub metric: Option<Metric>,
}

// ── The sweep ──────────────────────────────────────────────────────────────

/// Knobs of the sweep that have sensible defaults.
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// Evaluation chunk length in tokens.
    pub chunk_len: usize,
    /// Whether `mamba.conv1d` layers join the sweep (off by default, see
    /// [`list_quantizable_layers`](crate::model::list_quantizable_layers)).
    pub include_conv: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { chunk_len: DEFAULT_CHUNK_LEN, include_conv: false }
    }
}

/// Runs the per-layer ablation sweep with default options.
///
/// One record per quantizable layer, in canonical layer order. The teacher
/// is evaluated once and shared; every student derives from the pristine
/// teacher (never cumulative). Layer evaluations run in parallel on the
/// ambient rayon pool; results are bit-identical to sequential execution.
pub fn per_layer_sweep(
    model: &Model,
    stream: &TokenStream,
    spec: QuantSpec,
    mode: EvalMode,
) -> Result<Vec<SensitivityRecord>> {
    per_layer_sweep_with(model, stream, spec, mode, &SweepOptions::default())
}

/// [`per_layer_sweep`] with explicit options.
pub fn per_layer_sweep_with(
    model: &Model,
    stream: &TokenStream,
    spec: QuantSpec,
    mode: EvalMode,
    opts: &SweepOptions,
) -> Result<Vec<SensitivityRecord>> {
    let teacher_eval = evaluate_model(model, stream, opts.chunk_len)?;
    let layers = list_quantizable_layers_with(model, opts.include_conv);
    layers
        .par_iter()
        .map(|layer| {
            let student = quantize_layer(model, layer, spec)?;
            let student_eval = evaluate_model(&student, stream, opts.chunk_len)?;
            sensitivity_record(*layer, spec, mode, &teacher_eval, &student_eval)
        })
        .collect()
}

/// Assembles one record from a teacher and a student evaluation.
///
/// Exposed within the crate so single-layer oracle paths (tests, selftest)
/// share the exact arithmetic of the sweep.
pub(crate) fn sensitivity_record(
    layer: LayerDescriptor,
    spec: QuantSpec,
    mode: EvalMode,
    teacher: &Evaluation,
    student: &Evaluation,
) -> Result<SensitivityRecord> {
    let (teacher_ce, student_ce, n) = match mode {
        EvalMode::DatasetTargets => (
            teacher.result.ce_nats_per_token,
            student.result.ce_nats_per_token,
            teacher.result.num_tokens,
        ),
        EvalMode::TeacherAnalytic => (
            mean_entropy(&teacher.logits)?,
            analytic_cross_entropy(&teacher.logits, &student.logits)?,
            teacher.num_positions(),
        ),
    };
    let _ = n;
    let teacher_ppl = teacher_ce.exp();
    let student_ppl = student_ce.exp();
    Ok(SensitivityRecord {
        layer,
        teacher_ppl,
        student_ppl,
        delta_ppl: student_ppl - teacher_ppl,
        sqnr_db: sqnr_db(&teacher.logits, &student.logits)?,
        kl_teacher_to_student: kl_divergence(
            &teacher.logits,
            &student.logits,
            KlDirection::TeacherToStudent,
        )?,
        kl_student_to_teacher: kl_divergence(
            &teacher.logits,
            &student.logits,
            KlDirection::StudentToTeacher,
        )?,
        delta_ce: delta_ce(teacher_ce, student_ce),
        spec,
    })
}

// ── Ranking and rank correlation ───────────────────────────────────────────

/// Indices of `records` sorted most-sensitive-first under `metric`
/// (descending values; ascending for SQNR). Ties keep enumeration order
/// (stable sort), so rankings are always strict permutations.
pub fn rank_by_metric(records: &[SensitivityRecord], metric: Metric) -> Result<Vec<usize>> {
    if records.len() < 2 {
        return Err(Error::invalid(
            "rank_by_metric",
            format!("need at least 2 records, got {}", records.len()),
        ));
    }
    if let Some(r) = records.iter().find(|r| metric.value(r).is_nan()) {
        return Err(Error::invalid(
            "rank_by_metric",
            format!("metric {metric} is NaN for layer {}", r.layer),
        ));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| {
        let (va, vb) = (metric.value(&records[a]), metric.value(&records[b]));
        if metric.ascending() {
            va.partial_cmp(&vb).expect("NaN checked above")
        } else {
            vb.partial_cmp(&va).expect("NaN checked above")
        }
    });
    Ok(idx)
}

/// Kendall's τ-a between two strict rankings (permutations of `0..n`),
/// with a two-sided p-value.
///
/// τ = (C − D) / (n(n−1)/2) over all item pairs. For `n <= 8` the p-value is
/// exact: every permutation is enumerated and the fraction with
/// `|C − D| >= |observed|` reported. For larger n, the usual normal
/// approximation applies: `z = τ / sqrt(2(2n+5) / (9n(n−1)))`,
/// `p = 2(1 − Φ(|z|))`, no continuity correction.
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<RankCorrelation> {
    let n = rank_a.len();
    if rank_b.len() != n {
        return Err(Error::invalid(
            "kendall_tau",
            format!("length mismatch: {n} vs {}", rank_b.len()),
        ));
    }
    if n < 2 {
        return Err(Error::invalid("kendall_tau", "need at least 2 items".to_string()));
    }
    let pos_a = positions_of("kendall_tau", rank_a)?;
    let pos_b = positions_of("kendall_tau", rank_b)?;

    let s = s_statistic(&pos_a, &pos_b);
    let pairs = (n * (n - 1) / 2) as f64;
    let tau = s as f64 / pairs;

    let p_value = if n <= 8 {
        exact_two_sided_p(&pos_a, s)
    } else {
        let var = 2.0 * (2.0 * n as f64 + 5.0) / (9.0 * n as f64 * (n as f64 - 1.0));
        let z = tau / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0)
    };

    Ok(RankCorrelation { tau, p_value, n, metric: None })
}

/// Validates `rank` is a permutation of `0..n` and inverts it into
/// item → position form.
fn positions_of(op: &'static str, rank: &[usize]) -> Result<Vec<usize>> {
    let n = rank.len();
    let mut pos = vec![usize::MAX; n];
    for (position, &item) in rank.iter().enumerate() {
        if item >= n || pos[item] != usize::MAX {
            return Err(Error::invalid(
                op,
                format!("ranking {rank:?} is not a permutation of 0..{n}"),
            ));
        }
        pos[item] = position;
    }
    Ok(pos)
}

/// `C - D`: concordant minus discordant pairs between two position maps.
fn s_statistic(pos_a: &[usize], pos_b: &[usize]) -> i64 {
    let n = pos_a.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = pos_a[i] as i64 - pos_a[j] as i64;
            let db = pos_b[i] as i64 - pos_b[j] as i64;
            s += ((da > 0) == (db > 0)) as i64 * 2 - 1;
        }
    }
    s
}

/// Exact two-sided p-value by full enumeration of the n! equally likely
/// rankings (feasible for n <= 8: at most 40320 permutations).
fn exact_two_sided_p(pos_a: &[usize], s_obs: i64) -> f64 {
    let n = pos_a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut at_least_as_extreme = 0u64;
    let mut total = 0u64;
    // Heap's algorithm, iterative.
    let mut c = vec![0usize; n];
    let mut tally = |p: &[usize]| {
        total += 1;
        if s_statistic(pos_a, p).abs() >= s_obs.abs() {
            at_least_as_extreme += 1;
        }
    };
    tally(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            tally(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    at_least_as_extreme as f64 / total as f64
}

/// Kendall correlation of each forward proxy's ranking against the ΔPPL
/// ground-truth ranking, in reporting order: SQNR, KL(t→s), KL(s→t), ΔCE.
pub fn correlate_all(records: &[SensitivityRecord]) -> Result<Vec<RankCorrelation>> {
    let truth = rank_by_metric(records, Metric::DeltaPpl)?;
    Metric::PROXIES
        .into_iter()
        .map(|proxy| {
            let rank = rank_by_metric(records, proxy)?;
            let mut corr = kendall_tau(&rank, &truth)?;
            corr.metric = Some(proxy);
            Ok(corr)
        })
        .collect()
}

// ── Aggregations ───────────────────────────────────────────────────────────

/// Mean ΔPPL per layer subtype.
pub fn subtype_average(records: &[SensitivityRecord]) -> BTreeMap<Subtype, f64> {
    let mut sums: BTreeMap<Subtype, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.layer.subtype).or_insert((0.0, 0));
        e.0 += r.delta_ppl;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

/// One block's share of the total ΔPPL.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockShare {
    pub block: usize,
    pub delta_ppl_sum: f64,
    /// This block's ΔPPL sum divided by the total over all blocks
    /// (0.0 when the total is exactly zero).
    pub fraction: f64,
}

/// Sums ΔPPL per block index and reports each block's fraction of the
/// total, ordered by block.
pub fn layer_cumulative(records: &[SensitivityRecord]) -> Vec<BlockShare> {
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for r in records {
        *sums.entry(r.layer.block).or_insert(0.0) += r.delta_ppl;
    }
    let total: f64 = sums.values().sum();
    sums.into_iter()
        .map(|(block, delta_ppl_sum)| BlockShare {
            block,
            delta_ppl_sum,
            fraction: if total == 0.0 { 0.0 } else { delta_ppl_sum / total },
        })
        .collect()
}

// ── Multi-seed aggregation ─────────────────────────────────────────────────

/// Proxy correlations of one seed's sweep.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub correlations: Vec<RankCorrelation>,
}

/// Paired one-sided t-test over per-seed τ differences.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTTest {
    pub n: usize,
    /// Mean of the per-seed differences.
    pub mean_diff: f64,
    pub t_statistic: f64,
    /// One-sided p-value for the alternative `mean_diff > 0`.
    pub p_value: f64,
}

/// Multi-seed sweep aggregation: per-seed proxy correlations, mean τ per
/// proxy, and a paired test of KL(s→t) against SQNR.
#[derive(Debug, Clone)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    pub mean_tau: BTreeMap<Metric, f64>,
    /// Paired one-sided t-test of τ(KL student→teacher) − τ(SQNR) across
    /// seeds; `None` with fewer than two seeds. A reporting aid for
    /// cross-model proxy comparisons — it reports, it never asserts.
    pub kl_st_vs_sqnr: Option<PairedTTest>,
}

/// Rebuilds the model at each seed (all other config fields fixed), sweeps
/// it, and aggregates the proxy correlations.
pub fn multi_seed_correlations(
    config: &ModelConfig,
    stream: &TokenStream,
    spec: QuantSpec,
    mode: EvalMode,
    opts: &SweepOptions,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("multi_seed_correlations", "no seeds given".to_string()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let model = build_model(&ModelConfig { seed, ..config.clone() })?;
        let records = per_layer_sweep_with(&model, stream, spec, mode, opts)?;
        runs.push(SeedRun { seed, correlations: correlate_all(&records)? });
    }

    let mut mean_tau = BTreeMap::new();
    for (i, proxy) in Metric::PROXIES.into_iter().enumerate() {
        let mean = runs.iter().map(|r| r.correlations[i].tau).sum::<f64>() / runs.len() as f64;
        mean_tau.insert(proxy, mean);
    }

    let kl_st_vs_sqnr = if runs.len() >= 2 {
        let kl_idx = Metric::PROXIES.iter().position(|&m| m == Metric::KlStudentToTeacher).unwrap();
        let sq_idx = Metric::PROXIES.iter().position(|&m| m == Metric::SqnrDb).unwrap();
        let diffs: Vec<f64> = runs
            .iter()
            .map(|r| r.correlations[kl_idx].tau - r.correlations[sq_idx].tau)
            .collect();
        Some(paired_t_one_sided(&diffs)?)
    } else {
        None
    };

    Ok(MultiSeedReport { runs, mean_tau, kl_st_vs_sqnr })
}

/// One-sided paired t-test for `mean(diffs) > 0`.
fn paired_t_one_sided(diffs: &[f64]) -> Result<PairedTTest> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::invalid("paired_t_one_sided", "need at least 2 pairs".to_string()));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    let (t, p) = if sd == 0.0 {
        // Degenerate spread: the sign of the mean decides outright.
        match mean.partial_cmp(&0.0).expect("finite mean") {
            std::cmp::Ordering::Greater => (f64::INFINITY, 0.0),
            std::cmp::Ordering::Less => (f64::NEG_INFINITY, 1.0),
            std::cmp::Ordering::Equal => (0.0, 0.5),
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::invalid("paired_t_one_sided", e.to_string()))?;
        (t, (1.0 - dist.cdf(t)).clamp(0.0, 1.0))
    };
    Ok(PairedTTest { n, mean_diff: mean, t_statistic: t, p_value: p })
}
