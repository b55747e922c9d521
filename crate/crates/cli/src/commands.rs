//! Subcommand implementations.
//!
//! Every command follows the same shape: build the run context (model +
//! token stream) from the validated config, compute *all* artifacts in
//! memory, then commit them to disk in one pass. Nothing is written until
//! everything has been computed, and a failed write removes whatever this
//! invocation already wrote — the output directory never holds a partial
//! result set from a failed run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use quantsweep_core::corpus::TokenStream;
use quantsweep_core::model::{build_model, Model};
use quantsweep_core::planner::{
    evaluate_plan_with, make_merged_two_pass_plans, make_threshold_plans_by, plan_to_json,
    MixedPrecisionPlan, Precision,
};
use quantsweep_core::quant::QuantSpec;
use quantsweep_core::selftest::{all_passed, run_selftests};
use quantsweep_core::sensitivity::{
    correlate_all, layer_cumulative, per_layer_sweep_with, subtype_average, Metric,
    RankCorrelation, SensitivityRecord, SweepOptions,
};

use crate::config::RunConfig;

// ── Run context ─────────────────────────────────────────────────────────────

/// Everything a compute command needs: the validated config plus the model
/// and evaluation stream built from it.
pub struct RunContext {
    pub config: RunConfig,
    pub model: Model,
    pub stream: TokenStream,
}

impl RunContext {
    pub fn prepare(config: RunConfig) -> Result<RunContext> {
        config.validate()?;
        let model = build_model(&config.model).context("building model")?;
        let stream = config.build_stream()?;
        if stream.vocab_size != config.model.vocab_size {
            bail!(
                "dataset vocabulary {} does not match model vocab_size {} \
                 (byte-level files need vocab_size = 256)",
                stream.vocab_size,
                config.model.vocab_size
            );
        }
        Ok(RunContext { config, model, stream })
    }

    fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            chunk_len: self.config.sweep.chunk_len,
            include_conv: self.config.quant.include_conv,
        }
    }

    /// Runs the per-layer sweep at one width.
    fn sweep(&self, spec: QuantSpec) -> Result<Vec<SensitivityRecord>> {
        per_layer_sweep_with(
            &self.model,
            &self.stream,
            spec,
            self.config.sweep.mode,
            &self.sweep_options(),
        )
        .with_context(|| format!("per-layer sweep at {} bits", spec.bits))
    }
}

// ── Staged artifact writer ──────────────────────────────────────────────────

/// Collects artifacts in memory and commits them atomically-ish: all files
/// are written only after every byte has been computed, and any file this
/// invocation managed to write is deleted again if a later write fails.
struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Artifacts {
        Artifacts { dir, files: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, content: String) {
        self.files.push((name.into(), content));
    }

    fn write_all(self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating output directory {}", self.dir.display()))?;
        let mut written = Vec::new();
        for (name, content) in &self.files {
            let path = self.dir.join(name);
            match std::fs::write(&path, content) {
                Ok(()) => written.push(path),
                Err(e) => {
                    for p in &written {
                        let _ = std::fs::remove_file(p);
                    }
                    return Err(e).with_context(|| {
                        format!("writing {} (partial outputs removed)", path.display())
                    });
                }
            }
        }
        for path in &written {
            println!("wrote {}", path.display());
        }
        Ok(())
    }
}

// ── CSV builders ────────────────────────────────────────────────────────────
//
// Floats are rendered with Rust's shortest-round-trip `Display`, so every
// value parses back to the exact same f64 and repeated runs produce
// byte-identical files.

fn records_csv(records: &[SensitivityRecord]) -> String {
    let mut out = String::from(
        "block,subtype,teacher_ppl,student_ppl,delta_ppl,sqnr_db,\
         kl_teacher_to_student,kl_student_to_teacher,delta_ce,bits\n",
    );
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.layer.block,
            r.layer.subtype,
            r.teacher_ppl,
            r.student_ppl,
            r.delta_ppl,
            r.sqnr_db,
            r.kl_teacher_to_student,
            r.kl_student_to_teacher,
            r.delta_ce,
            r.spec.bits,
        )
        .expect("String writes are infallible");
    }
    out
}

fn correlations_csv(correlations: &[RankCorrelation]) -> String {
    let mut out = String::from("metric,tau,p_value,n\n");
    for c in correlations {
        let metric = c.metric.map(|m| m.as_str()).unwrap_or("");
        writeln!(out, "{},{},{},{}", metric, c.tau, c.p_value, c.n)
            .expect("String writes are infallible");
    }
    out
}

/// One pareto.csv row; `threshold` renders as an empty field when absent.
struct ParetoRow {
    name: String,
    threshold: Option<f64>,
    ppl: f64,
    size_bytes: u64,
}

fn pareto_csv(rows: &[ParetoRow]) -> String {
    let mut out = String::from("name,threshold,ppl,size_bytes\n");
    for r in rows {
        let threshold = r.threshold.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.name, threshold, r.ppl, r.size_bytes)
            .expect("String writes are infallible");
    }
    out
}

fn subtype_avg_csv(averages: &BTreeMap<quantsweep_core::model::Subtype, f64>) -> String {
    let mut out = String::from("subtype,mean_delta_ppl\n");
    for (subtype, mean) in averages {
        writeln!(out, "{},{}", subtype, mean).expect("String writes are infallible");
    }
    out
}

fn layer_cumulative_csv(shares: &[quantsweep_core::sensitivity::BlockShare]) -> String {
    let mut out = String::from("block,delta_ppl_sum,fraction\n");
    for s in shares {
        writeln!(out, "{},{},{}", s.block, s.delta_ppl_sum, s.fraction)
            .expect("String writes are infallible");
    }
    out
}

/// Restricts [`correlate_all`]'s output to the configured proxies, in the
/// order the config lists them.
fn filtered_correlations(
    records: &[SensitivityRecord],
    metrics: &[Metric],
) -> Result<Vec<RankCorrelation>> {
    let all = correlate_all(records).context("correlating proxy rankings")?;
    metrics
        .iter()
        .map(|m| {
            all.iter()
                .find(|c| c.metric == Some(*m))
                .cloned()
                .with_context(|| format!("metric {m} missing from correlation set"))
        })
        .collect()
}

// ── Commands ────────────────────────────────────────────────────────────────

/// `sweep`: per-layer records plus rank-agreement statistics, one file pair
/// per configured width. The primary width (first `bits` entry) owns
/// `records.csv` / `correlations.csv`; additional widths get suffixed names
/// (`records_int8.csv`, ...).
pub fn cmd_sweep(config: RunConfig) -> Result<()> {
    let ctx = RunContext::prepare(config)?;
    let mut artifacts = Artifacts::new(ctx.config.output_dir.clone());
    for (i, spec) in ctx.config.specs().into_iter().enumerate() {
        let records = ctx.sweep(spec)?;
        let correlations = filtered_correlations(&records, &ctx.config.sweep.metrics)?;
        let (records_name, correlations_name) = if i == 0 {
            ("records.csv".to_string(), "correlations.csv".to_string())
        } else {
            (
                format!("records_int{}.csv", spec.bits),
                format!("correlations_int{}.csv", spec.bits),
            )
        };
        artifacts.push(records_name, records_csv(&records));
        artifacts.push(correlations_name, correlations_csv(&correlations));
    }
    artifacts.write_all()
}

/// `plan`: the threshold family (`p01..pNN.json`) from the primary-width
/// sweep, the merged two-pass family (`m01..mNN.json`) when both 4- and
/// 8-bit sweeps are configured, and `pareto.csv` placing every plan — plus
/// the FP baseline and the uniform INT8/INT4 references — on the
/// size/perplexity plane.
pub fn cmd_plan(config: RunConfig) -> Result<()> {
    let ctx = RunContext::prepare(config)?;
    let primary = ctx.config.primary_spec();
    let records = ctx.sweep(primary)?;
    let plans = make_threshold_plans_by(
        &records,
        ctx.config.plan.score_metric,
        ctx.config.plan.num_points,
    )
    .context("building threshold plan family")?;

    let bits = &ctx.config.quant.bits;
    let merged = if bits.contains(&4) && bits.contains(&8) {
        let other = |spec: QuantSpec| -> Result<Vec<SensitivityRecord>> {
            if primary == spec {
                Ok(records.clone())
            } else {
                ctx.sweep(spec)
            }
        };
        let records_int4 = other(QuantSpec::INT4)?;
        let records_int8 = other(QuantSpec::INT8)?;
        make_merged_two_pass_plans(&records_int4, &records_int8, ctx.config.plan.num_points)
            .context("building merged two-pass plan family")?
    } else {
        Vec::new()
    };

    // Reference plans span the same layer universe as the families (the
    // swept layers), so the densest threshold plan and the matching uniform
    // reference land on identical points.
    let references = [
        MixedPrecisionPlan::empty("fp_baseline"),
        uniform_over_records(&records, Precision::Int8, "uniform_int8"),
        uniform_over_records(&records, Precision::Int4, "uniform_int4"),
    ];

    let mut artifacts = Artifacts::new(ctx.config.output_dir.clone());
    let mut rows = Vec::new();
    for plan in references.iter().chain(plans.iter()).chain(merged.iter()) {
        let eval = evaluate_plan_with(&ctx.model, plan, &ctx.stream, ctx.config.sweep.chunk_len)
            .with_context(|| format!("evaluating plan {}", plan.name))?;
        rows.push(ParetoRow {
            name: plan.name.clone(),
            threshold: plan.threshold,
            ppl: eval.ppl,
            size_bytes: eval.size_report.total_bytes,
        });
    }
    for plan in plans.iter().chain(merged.iter()) {
        let json = plan_to_json(plan).with_context(|| format!("serializing plan {}", plan.name))?;
        artifacts.push(format!("{}.json", plan.name), json);
    }
    artifacts.push("pareto.csv", pareto_csv(&rows));
    artifacts.write_all()
}

fn uniform_over_records(
    records: &[SensitivityRecord],
    precision: Precision,
    name: &str,
) -> MixedPrecisionPlan {
    MixedPrecisionPlan {
        name: name.to_string(),
        threshold: None,
        assignment: records.iter().map(|r| (r.layer, precision)).collect(),
    }
}

/// `ablate`: aggregate views of the primary-width sweep — mean ΔPPL per
/// layer subtype and the per-block share of total ΔPPL.
pub fn cmd_ablate(config: RunConfig) -> Result<()> {
    let ctx = RunContext::prepare(config)?;
    let records = ctx.sweep(ctx.config.primary_spec())?;
    let mut artifacts = Artifacts::new(ctx.config.output_dir.clone());
    artifacts.push("subtype_avg.csv", subtype_avg_csv(&subtype_average(&records)));
    artifacts.push("layer_cumulative.csv", layer_cumulative_csv(&layer_cumulative(&records)));
    artifacts.write_all()
}

/// `selftest`: runs the built-in identity checks, printing one line per
/// check. Exits nonzero (via the returned error) if any check fails.
pub fn cmd_selftest() -> Result<()> {
    let checks = run_selftests();
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status} {} — {}", check.name, check.detail);
    }
    if all_passed(&checks) {
        println!("all {} selftests passed", checks.len());
        Ok(())
    } else {
        let failed = checks.iter().filter(|c| !c.passed).count();
        bail!("{failed} of {} selftests failed", checks.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use quantsweep_core::model::{LayerDescriptor, Subtype};

    fn record(block: usize, subtype: Subtype, delta_ppl: f64) -> SensitivityRecord {
        SensitivityRecord {
            layer: LayerDescriptor::new(block, subtype),
            teacher_ppl: 10.0,
            student_ppl: 10.0 + delta_ppl,
            delta_ppl,
            sqnr_db: 30.0 - delta_ppl,
            kl_teacher_to_student: delta_ppl / 10.0,
            kl_student_to_teacher: delta_ppl / 9.0,
            delta_ce: delta_ppl / 11.0,
            spec: QuantSpec::INT4,
        }
    }

    #[test]
    fn records_csv_shape_and_determinism() {
        let records =
            vec![record(0, Subtype::MambaXProj, 2.0), record(1, Subtype::AttnQkvProj, 0.5)];
        let csv = records_csv(&records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("block,subtype,teacher_ppl"));
        assert!(lines[1].starts_with("0,mamba.x_proj,10,12,2,28,"));
        assert!(lines[1].ends_with(",4"));
        assert_eq!(csv, records_csv(&records));
    }

    #[test]
    fn pareto_csv_renders_missing_threshold_as_empty_field() {
        let rows = vec![
            ParetoRow { name: "fp_baseline".into(), threshold: None, ppl: 9.5, size_bytes: 100 },
            ParetoRow { name: "p01".into(), threshold: Some(0.25), ppl: 9.75, size_bytes: 90 },
        ];
        let csv = pareto_csv(&rows);
        assert_eq!(csv, "name,threshold,ppl,size_bytes\nfp_baseline,,9.5,100\np01,0.25,9.75,90\n");
    }

    #[test]
    fn filtered_correlations_follow_config_order() {
        // Anti-correlated SQNR (lower = more sensitive) and perfectly
        // aligned KL: both should come back under the requested order.
        let records = vec![
            record(0, Subtype::MambaInProj, 3.0),
            record(0, Subtype::MambaXProj, 2.0),
            record(0, Subtype::MambaDtProj, 1.0),
            record(0, Subtype::MambaOutProj, 0.5),
        ];
        let picked = filtered_correlations(
            &records,
            &[Metric::KlStudentToTeacher, Metric::SqnrDb],
        )
        .unwrap();
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].metric, Some(Metric::KlStudentToTeacher));
        assert_eq!(picked[1].metric, Some(Metric::SqnrDb));
        assert_eq!(picked[0].tau, 1.0);
        assert_eq!(picked[1].tau, 1.0);
    }

    #[test]
    fn uniform_reference_covers_exactly_the_swept_layers() {
        let records =
            vec![record(0, Subtype::MambaXProj, 2.0), record(1, Subtype::AttnOProj, 0.1)];
        let plan = uniform_over_records(&records, Precision::Int4, "uniform_int4");
        assert_eq!(plan.assignment.len(), 2);
        assert!(plan
            .assignment
            .values()
            .all(|&p| p == Precision::Int4));
        assert_eq!(plan.threshold, None);
    }
}
