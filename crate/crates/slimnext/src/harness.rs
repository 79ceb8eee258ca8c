//! Profile → compress → profile → compare, as one runnable pipeline.
//!
//! A pipeline is an ordered list of compression stages applied to a working
//! copy of the model, profiled before the first stage and after every
//! stage. The report embeds all profiles; every reduction number in it is
//! recomputed from those profiles, never stored independently, so emitted
//! tables cannot drift from their inputs.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, synthetic, Dataset};
use crate::error::{Error, Result};
use crate::ir::{ConvNeXtConfig, Model};
use crate::profile::{
    count_macs, count_nonzero, count_params, profile_with_batch, Convention, Profile,
    DEFAULT_EVAL_BATCH,
};
use crate::prune::{
    analyze_dependencies, apply_masks, dhspg_train, extract_subnetwork, l1_mask, partition_pzigs,
    random_mask, DhspgConfig,
};
use crate::quant::quantize_model;
use crate::tensor::{seeded_rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    DhspgPrune { config: DhspgConfig },
    Extract,
    L1Unstructured { frac_linear: f64, frac_conv: f64 },
    RandomUnstructured { frac_linear: f64, frac_conv: f64, seed: u64 },
    DynamicQuantize,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::DhspgPrune { .. } => "dhspg_prune",
            Stage::Extract => "extract",
            Stage::L1Unstructured { .. } => "l1_unstructured",
            Stage::RandomUnstructured { .. } => "random_unstructured",
            Stage::DynamicQuantize => "dynamic_quantize",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic { n: usize, num_classes: usize, seed: u64 },
    Cifar10 { dir: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic { n: 1000, num_classes: 10, seed: 0 }
    }
}

pub fn resolve_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic { n, num_classes, seed } => synthetic(*n, *num_classes, *seed),
        DatasetSpec::Cifar10 { dir } => Ok(load_cifar10(dir)?.1),
    }
}

fn default_eval_batch() -> usize {
    DEFAULT_EVAL_BATCH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// Architecture to build when the caller does not supply a saved model.
    #[serde(default)]
    pub model: Option<ConvNeXtConfig>,
    /// Seed for that fresh build.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Usage("a pipeline needs at least one stage".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Usage("eval batch size must be positive".into()));
        }
        let quantizes =
            self.stages.iter().filter(|s| matches!(s, Stage::DynamicQuantize)).count();
        if quantizes > 1 {
            return Err(Error::Usage(format!(
                "dynamic_quantize appears {quantizes} times; once is the most that makes sense"
            )));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if matches!(stage, Stage::Extract)
                && !matches!(
                    i.checked_sub(1).map(|p| &self.stages[p]),
                    Some(Stage::DhspgPrune { .. })
                )
            {
                return Err(Error::Usage(
                    "extract must directly follow dhspg_prune; it removes the groups that \
                     stage zeroed"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub size_pct: f64,
    pub params_pct: f64,
    pub macs_pct: f64,
    pub accuracy_delta_points: f64,
}

/// Percent reductions from `before` to `after`, and the accuracy movement
/// in points (positive when the compressed model is more accurate).
pub fn compare(before: &Profile, after: &Profile) -> Reductions {
    let pct = |b: f64, a: f64| if b == 0.0 { 0.0 } else { 100.0 * (1.0 - a / b) };
    Reductions {
        size_pct: pct(before.size_bytes as f64, after.size_bytes as f64),
        params_pct: pct(before.params_m, after.params_m),
        macs_pct: pct(before.macs_m, after.macs_m),
        accuracy_delta_points: after.accuracy_pct - before.accuracy_pct,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub profile: Profile,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub spec: PipelineSpec,
    pub profile_before: Profile,
    pub stages: Vec<StageRecord>,
    pub profile_after: Profile,
    /// Same endpoints under the all-parameters counting convention, kept
    /// in the JSON so quantization cannot hide weight mass from audit.
    pub profile_before_all: Profile,
    pub profile_after_all: Profile,
    pub reductions: Reductions,
    pub complete: bool,
    pub error: Option<String>,
}

impl CompressionReport {
    /// The report with stage timings zeroed, for comparing two runs that
    /// should agree on everything except the clock.
    pub fn without_timing(&self) -> CompressionReport {
        let mut out = self.clone();
        for s in &mut out.stages {
            s.wall_ms = 0.0;
        }
        out
    }
}

/// All-convention counterpart of a profile already computed on `model`.
/// Accuracy and size do not depend on the convention, so only the three
/// counts are redone.
fn recount_all(model: &Model, base: &Profile, input_shape: &[usize]) -> Result<Profile> {
    Ok(Profile {
        accuracy_pct: base.accuracy_pct,
        size_bytes: base.size_bytes,
        params_m: count_params(model, Convention::All) as f64 / 1e6,
        macs_m: count_macs(model, input_shape, Convention::All)? as f64 / 1e6,
        nonzero_params_m: count_nonzero(model, Convention::All)? as f64 / 1e6,
        counting_convention: Convention::All,
    })
}

fn apply_stage(model: &mut Model, stage: &Stage, ds: &Dataset) -> Result<()> {
    match stage {
        Stage::DhspgPrune { config } => {
            let dg = analyze_dependencies(model)?;
            let groups = partition_pzigs(&dg, model)?;
            dhspg_train(model, &groups, ds, config)?;
        }
        Stage::Extract => {
            let dg = analyze_dependencies(model)?;
            let groups = partition_pzigs(&dg, model)?;
            let (extracted, _) = extract_subnetwork(model, &groups)?;
            *model = extracted;
        }
        Stage::L1Unstructured { frac_linear, frac_conv } => {
            let masks = l1_mask(model, *frac_linear, *frac_conv)?;
            apply_masks(model, &masks)?;
        }
        Stage::RandomUnstructured { frac_linear, frac_conv, seed } => {
            let masks = random_mask(model, *frac_linear, *frac_conv, *seed)?;
            apply_masks(model, &masks)?;
        }
        Stage::DynamicQuantize => {
            quantize_model(model)?;
        }
    }
    Ok(())
}

/// Runs the stages in order on a working copy and hands back that copy
/// next to the report. A stage failure ends the run early: the report
/// keeps every profile gathered up to that point and comes back flagged
/// incomplete, with the failure message embedded; the model is as far as
/// the completed stages took it.
pub fn run_pipeline(
    model: &Model,
    ds: &Dataset,
    spec: &PipelineSpec,
) -> Result<(CompressionReport, Model)> {
    spec.validate()?;
    let (c, h, w) = model.metadata.input;
    let input_shape = [1usize, c, h, w];
    let snapshot = |m: &Model| {
        profile_with_batch(m, ds, &input_shape, Convention::Fp32Only, spec.eval_batch_size)
    };

    let mut work = model.clone();
    let profile_before = snapshot(&work)?;
    let profile_before_all = recount_all(&work, &profile_before, &input_shape)?;

    let mut stages = Vec::new();
    let mut error = None;
    for stage in &spec.stages {
        let started = Instant::now();
        if let Err(e) = apply_stage(&mut work, stage, ds) {
            error = Some(format!("{stage}: {e}"));
            break;
        }
        stages.push(StageRecord {
            stage: stage.clone(),
            profile: snapshot(&work)?,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let profile_after =
        stages.last().map_or_else(|| profile_before.clone(), |s| s.profile.clone());
    let profile_after_all = recount_all(&work, &profile_after, &input_shape)?;
    let report = CompressionReport {
        spec: spec.clone(),
        reductions: compare(&profile_before, &profile_after),
        profile_before,
        stages,
        profile_after,
        profile_before_all,
        profile_after_all,
        complete: error.is_none(),
        error,
    };
    Ok((report, work))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Single-input forward latency after warmup. Numbers are for reporting
/// only; they depend on the machine and the moment.
pub fn measure_latency(
    model: &Model,
    input_shape: &[usize],
    warmup_iters: usize,
    timed_iters: usize,
) -> Result<LatencyStats> {
    if timed_iters == 0 {
        return Err(Error::Usage("latency needs at least one timed iteration".into()));
    }
    use rand::Rng;
    let mut rng = seeded_rng(0);
    let numel: usize = input_shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let x = Tensor::from_vec(input_shape, data)?;

    for _ in 0..warmup_iters {
        model.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(timed_iters);
    for _ in 0..timed_iters {
        let started = Instant::now();
        model.forward(&x)?;
        samples.push(started.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut sorted = samples;
    sorted.sort_by(f64::total_cmp);
    let percentile = |p: f64| {
        let idx = (p / 100.0 * (sorted.len() - 1) as f64).round() as usize;
        sorted[idx]
    };
    Ok(LatencyStats { mean_ms: mean, p50_ms: percentile(50.0), p95_ms: percentile(95.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

fn profile_cells(p: &Profile) -> String {
    format!(
        "{:.2} | {:.2} | {:.4} | {:.4} | {:.4}",
        p.accuracy_pct,
        p.size_mb(),
        p.params_m,
        p.macs_m,
        p.nonzero_params_m
    )
}

pub fn emit_report(report: &CompressionReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| Error::internal(format!("report serialization failed: {e}")))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Markdown => {
            let mut out = String::from("# compression report\n\n");
            out.push_str("| model | accuracy (%) | size (MB) | params (M) | MACs (M) | nonzero (M) |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            out.push_str(&format!("| full | {} |\n", profile_cells(&report.profile_before)));
            for s in &report.stages {
                out.push_str(&format!("| after {} | {} |\n", s.stage, profile_cells(&s.profile)));
            }
            let r = &report.reductions;
            out.push_str(&format!(
                "\nreductions: size {:.2}%, params {:.2}%, MACs {:.2}%, accuracy {:+.2} points\n",
                r.size_pct, r.params_pct, r.macs_pct, r.accuracy_delta_points
            ));
            if let Some(err) = &report.error {
                out.push_str(&format!("\nincomplete: {err}\n"));
            }
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "label,accuracy_pct,size_bytes,params_m,macs_m,nonzero_params_m,wall_ms\n",
            );
            let row = |label: &str, p: &Profile, wall: f64| {
                format!(
                    "{label},{},{},{},{},{},{}\n",
                    p.accuracy_pct, p.size_bytes, p.params_m, p.macs_m, p.nonzero_params_m, wall
                )
            };
            out.push_str(&row("full", &report.profile_before, 0.0));
            for s in &report.stages {
                out.push_str(&row(&s.stage.to_string(), &s.profile, s.wall_ms));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_convnext, model_size_bytes};
    use crate::trainer::TrainConfig;

    fn narrow() -> ConvNeXtConfig {
        ConvNeXtConfig {
            name: "narrow".into(),
            depths: [1, 1, 1, 1],
            widths: [4, 8, 16, 32],
            num_classes: 4,
            input: (3, 32, 32),
        }
    }

    fn tiny_ds() -> Dataset {
        synthetic(32, 4, 2).unwrap()
    }

    fn spec_of(stages: Vec<Stage>) -> PipelineSpec {
        PipelineSpec {
            stages,
            dataset: DatasetSpec::Synthetic { n: 32, num_classes: 4, seed: 2 },
            model: None,
            seed: 0,
            eval_batch_size: 32,
        }
    }

    fn quick_dhspg(target: f64) -> Stage {
        Stage::DhspgPrune {
            config: DhspgConfig {
                target_group_sparsity: target,
                train: TrainConfig {
                    epochs: 1,
                    batch_size: 16,
                    seed: 3,
                    ..TrainConfig::default()
                },
                ..DhspgConfig::default()
            },
        }
    }

    #[test]
    fn compare_reproduces_the_published_reduction_arithmetic() {
        let template = Profile {
            accuracy_pct: 0.0,
            size_bytes: 0,
            params_m: 0.0,
            macs_m: 0.0,
            nonzero_params_m: 0.0,
            counting_convention: Convention::Fp32Only,
        };
        let before =
            Profile { size_bytes: 188_890_000, params_m: 47.16, ..template.clone() };
        let after = Profile { size_bytes: 19_390_000, params_m: 2.15, ..template };
        let r = compare(&before, &after);
        assert!((r.size_pct - 89.74).abs() < 0.01, "size reduction {}", r.size_pct);
        assert_eq!((r.params_pct * 100.0).round() / 100.0, 95.44);

        let same = compare(&before, &before);
        assert_eq!(same.size_pct, 0.0);
        assert_eq!(same.params_pct, 0.0);
        assert_eq!(same.macs_pct, 0.0);
        assert_eq!(same.accuracy_delta_points, 0.0);
    }

    #[test]
    fn spec_validation_enforces_stage_order() {
        assert_eq!(spec_of(vec![]).validate().unwrap_err().exit_code(), 1);
        assert_eq!(
            spec_of(vec![Stage::Extract]).validate().unwrap_err().exit_code(),
            1
        );
        assert_eq!(
            spec_of(vec![
                quick_dhspg(0.2),
                Stage::L1Unstructured { frac_linear: 0.1, frac_conv: 0.1 },
                Stage::Extract
            ])
            .validate()
            .unwrap_err()
            .exit_code(),
            1
        );
        assert_eq!(
            spec_of(vec![Stage::DynamicQuantize, Stage::DynamicQuantize])
                .validate()
                .unwrap_err()
                .exit_code(),
            1
        );
        spec_of(vec![quick_dhspg(0.2), Stage::Extract, Stage::DynamicQuantize])
            .validate()
            .unwrap();
    }

    #[test]
    fn a_no_effect_stage_leaves_the_profile_untouched() {
        let model = build_convnext(&narrow(), 1).unwrap();
        let ds = tiny_ds();
        let spec = spec_of(vec![Stage::L1Unstructured { frac_linear: 0.0, frac_conv: 0.0 }]);
        let (report, unchanged) = run_pipeline(&model, &ds, &spec).unwrap();
        assert!(report.complete);
        assert_eq!(unchanged.params, model.params);
        assert_eq!(report.profile_before, report.profile_after);
        assert_eq!(report.reductions.size_pct, 0.0);
        assert_eq!(report.reductions.accuracy_delta_points, 0.0);
    }

    #[test]
    fn a_full_pipeline_shrinks_size_at_extract_and_quantize() {
        let model = build_convnext(&narrow(), 1).unwrap();
        let ds = tiny_ds();
        let spec = spec_of(vec![
            quick_dhspg(0.2),
            Stage::Extract,
            Stage::L1Unstructured { frac_linear: 0.1, frac_conv: 0.1 },
            Stage::DynamicQuantize,
        ]);
        let (report, compressed) = run_pipeline(&model, &ds, &spec).unwrap();
        assert!(report.complete, "pipeline failed: {:?}", report.error);
        assert_eq!(report.stages.len(), 4);
        assert_eq!(model_size_bytes(&compressed).unwrap(), report.profile_after.size_bytes);
        assert!(report.stages[1].profile.size_bytes < report.stages[0].profile.size_bytes);
        assert!(report.stages[3].profile.size_bytes < report.stages[2].profile.size_bytes);
        assert_eq!(report.reductions, compare(&report.profile_before, &report.profile_after));
        assert_eq!(report.profile_after_all.counting_convention, Convention::All);
        assert!(report.profile_after_all.params_m > report.profile_after.params_m);

        let json = emit_report(&report, ReportFormat::Json).unwrap();
        let parsed: CompressionReport = serde_json::from_str(&json).unwrap();
        let reemitted = emit_report(&parsed, ReportFormat::Json).unwrap();
        assert_eq!(json, reemitted);
    }

    #[test]
    fn a_failing_stage_flags_the_report_incomplete() {
        let model = build_convnext(&narrow(), 1).unwrap();
        let ds = tiny_ds();
        let spec = spec_of(vec![Stage::DynamicQuantize, quick_dhspg(0.2)]);
        let (report, _) = run_pipeline(&model, &ds, &spec).unwrap();
        assert!(!report.complete);
        assert_eq!(report.stages.len(), 1);
        assert!(report.error.as_deref().unwrap().starts_with("dhspg_prune:"));
        assert_eq!(report.profile_after, report.stages[0].profile);
        let md = emit_report(&report, ReportFormat::Markdown).unwrap();
        assert!(md.contains("incomplete:"));
    }

    #[test]
    fn markdown_prints_one_profile_row_per_stage_plus_baseline() {
        let model = build_convnext(&narrow(), 1).unwrap();
        let ds = tiny_ds();
        let spec = spec_of(vec![
            Stage::L1Unstructured { frac_linear: 0.0, frac_conv: 0.0 },
            Stage::DynamicQuantize,
        ]);
        let (report, _) = run_pipeline(&model, &ds, &spec).unwrap();
        let md = emit_report(&report, ReportFormat::Markdown).unwrap();
        let profile_rows = md
            .lines()
            .filter(|l| l.starts_with("| full") || l.starts_with("| after"))
            .count();
        assert_eq!(profile_rows, 3);

        let csv = emit_report(&report, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 1 + report.stages.len());
    }

    #[test]
    fn identical_specs_reproduce_the_report_except_timings() {
        let model = build_convnext(&narrow(), 1).unwrap();
        let ds = tiny_ds();
        let spec = spec_of(vec![quick_dhspg(0.3), Stage::Extract, Stage::DynamicQuantize]);
        let (a, _) = run_pipeline(&model, &ds, &spec).unwrap();
        let (b, _) = run_pipeline(&model, &ds, &spec).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(
            emit_report(&a.without_timing(), ReportFormat::Json).unwrap(),
            emit_report(&b.without_timing(), ReportFormat::Json).unwrap()
        );
    }

    #[test]
    fn latency_statistics_are_ordered_and_positive() {
        let model = build_convnext(&narrow(), 1).unwrap();
        let stats = measure_latency(&model, &[1, 3, 32, 32], 2, 9).unwrap();
        assert!(stats.mean_ms > 0.0);
        assert!(stats.p50_ms > 0.0);
        assert!(stats.p50_ms <= stats.p95_ms);
        let err = measure_latency(&model, &[1, 3, 32, 32], 0, 0).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn pipeline_specs_roundtrip_through_json() {
        let spec = spec_of(vec![
            quick_dhspg(0.4),
            Stage::Extract,
            Stage::RandomUnstructured { frac_linear: 0.2, frac_conv: 0.1, seed: 9 },
            Stage::DynamicQuantize,
        ]);
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let parsed: PipelineSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, spec);

        let minimal: PipelineSpec =
            serde_json::from_str(r#"{"stages": [{"stage": "dynamic_quantize"}]}"#).unwrap();
        assert_eq!(minimal.stages, vec![Stage::DynamicQuantize]);
        assert_eq!(minimal.eval_batch_size, DEFAULT_EVAL_BATCH);
        assert_eq!(minimal.dataset, DatasetSpec::default());
    }
}
