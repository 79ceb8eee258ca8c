//! Command-line front end: train, profile, compress, sweep, eval, latency,
//! and compare, over .cxm model files.
//!
//! Datasets are given as either a CIFAR-10 binary directory or the token
//! `synthetic[:n[:classes[:seed]]]`. Exit codes: 0 success, 1 usage,
//! 2 data/input, 3 internal invariant.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slimnext::data::{load_cifar10, synthetic, Dataset};
use slimnext::error::{Error, Result};
use slimnext::harness::{
    compare, emit_report, measure_latency, run_pipeline, PipelineSpec, ReportFormat, Stage,
};
use slimnext::ir::{build_convnext, load, save, ConvNeXtConfig, Model};
use slimnext::profile::{profile_with_batch, Convention, Profile, DEFAULT_EVAL_BATCH};
use slimnext::prune::{sweep, sweep_csv, DhspgConfig, MaskMethod, Saliency};
use slimnext::trainer::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "slimnext", version, about = "ConvNeXt compression toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a model from a config and train it.
    Train(TrainArgs),
    /// Print the five metrics of a saved model.
    Profile(ProfileArgs),
    /// Run a compression pipeline and write the report.
    Compress(CompressArgs),
    /// Grid of mask fractions against accuracy, as CSV.
    Sweep(SweepArgs),
    /// Top-1 accuracy of a saved model on a dataset.
    Eval(EvalArgs),
    /// Single-image forward latency statistics.
    Latency(LatencyArgs),
    /// Reductions between two saved profile JSON files.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name (micro|tiny|small|base|large) or a ConvNeXtConfig JSON file.
    #[arg(long)]
    config: String,
    /// CIFAR-10 directory or synthetic[:n[:classes[:seed]]].
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class count used when --config names a preset.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "fp32_only")]
    convention: String,
    /// Also write the profile as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Saved model to compress; omit when the pipeline spec names an
    /// architecture to build fresh.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Pipeline spec JSON file; omit to assemble stages from the flags below.
    #[arg(long)]
    pipeline: Option<PathBuf>,
    /// Sparse-train at this group sparsity, then extract the subnetwork.
    #[arg(long)]
    oto_target: Option<f64>,
    /// L1-mask with frac_linear,frac_conv.
    #[arg(long)]
    l1: Option<String>,
    /// Random-mask with frac_linear,frac_conv.
    #[arg(long)]
    random: Option<String>,
    /// Quantize linear weights to int8 as the last stage.
    #[arg(long)]
    quantize: bool,
    /// Dataset for stage training and evaluation (overrides the spec file).
    #[arg(long)]
    data: Option<String>,
    /// Training epochs for the sparse-training stage.
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Saliency for --oto-target: group_l2 or group_rms.
    #[arg(long, default_value = "group_rms")]
    saliency: String,
    /// Write the compressed model here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the full JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
    /// l1 or random.
    #[arg(long)]
    method: String,
    /// start:end:step range (inclusive) or a comma list, applied to both axes.
    #[arg(long, default_value = "0.1:0.9:0.1")]
    fracs: String,
    /// Mask position seed for --method random.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_dataset(spec: &str, default_classes: usize) -> Result<Dataset> {
    if spec == "synthetic" || spec.starts_with("synthetic:") {
        let mut parts = spec.split(':').skip(1);
        let field = |p: Option<&str>, name: &str| -> Result<Option<u64>> {
            match p {
                None | Some("") => Ok(None),
                Some(v) => v
                    .parse::<u64>()
                    .map(Some)
                    .map_err(|_| Error::Usage(format!("bad synthetic {name} {v:?}"))),
            }
        };
        let n = field(parts.next(), "sample count")?.unwrap_or(1000) as usize;
        let classes =
            field(parts.next(), "class count")?.map_or(default_classes, |v| v as usize);
        let seed = field(parts.next(), "seed")?.unwrap_or(0);
        if let Some(extra) = parts.next() {
            return Err(Error::Usage(format!("unexpected synthetic field {extra:?}")));
        }
        return synthetic(n, classes, seed);
    }
    Ok(load_cifar10(spec)?.1)
}

fn parse_config(spec: &str, classes: usize) -> Result<ConvNeXtConfig> {
    let path = std::path::Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(spec.to_string(), e))?;
        return serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{spec}: not a model config: {e}")));
    }
    ConvNeXtConfig::by_name(spec, classes)
}

fn parse_convention(s: &str) -> Result<Convention> {
    match s {
        "fp32_only" => Ok(Convention::Fp32Only),
        "all" => Ok(Convention::All),
        other => Err(Error::Usage(format!(
            "unknown convention {other:?}; use fp32_only or all"
        ))),
    }
}

fn parse_fraction_pair(s: &str, flag: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    let [fl, fc] = parts.as_slice() else {
        return Err(Error::Usage(format!(
            "--{flag} wants frac_linear,frac_conv, got {s:?}"
        )));
    };
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::Usage(format!("--{flag}: bad fraction {v:?}")))
    };
    Ok((parse(fl)?, parse(fc)?))
}

fn parse_fracs(s: &str) -> Result<Vec<f64>> {
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::Usage(format!("bad fraction {v:?} in {s:?}")))
    };
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, end, step] = parts.as_slice() else {
            return Err(Error::Usage(format!("fraction range wants start:end:step, got {s:?}")));
        };
        let (start, end, step) = (parse(start)?, parse(end)?, parse(step)?);
        if step <= 0.0 || end < start {
            return Err(Error::Usage(format!("empty fraction range {s:?}")));
        }
        let count = ((end - start) / step).round() as usize + 1;
        return Ok((0..count).map(|i| start + i as f64 * step).collect());
    }
    s.split(',').map(parse).collect()
}

fn input_shape(model: &Model) -> [usize; 4] {
    let (c, h, w) = model.metadata.input;
    [1, c, h, w]
}

fn print_profile(p: &Profile) {
    println!("accuracy: {:.2}%", p.accuracy_pct);
    println!("size:     {:.2} MB ({} bytes)", p.size_mb(), p.size_bytes);
    println!("params:   {:.4} M", p.params_m);
    println!("MACs:     {:.4} M", p.macs_m);
    println!("nonzero:  {:.4} M", p.nonzero_params_m);
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train(a) => {
            let cfg = parse_config(&a.config, a.classes)?;
            let ds = parse_dataset(&a.data, cfg.num_classes)?;
            let mut model = build_convnext(&cfg, a.seed)?;
            let tc = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                lr: a.lr,
                seed: a.seed,
                augment: a.augment,
                ..TrainConfig::default()
            };
            let report = train(&mut model, &ds, &tc)?;
            for (i, loss) in report.epoch_loss.iter().enumerate() {
                println!("epoch {i}: loss {loss:.4}");
            }
            save(&model, &a.out)?;
            println!("saved {} ({} steps)", a.out.display(), report.steps);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Profile(a) => {
            let model = load(&a.model)?;
            let ds = parse_dataset(&a.data, model.metadata.num_classes)?;
            let convention = parse_convention(&a.convention)?;
            let p = profile_with_batch(
                &model,
                &ds,
                &input_shape(&model),
                convention,
                DEFAULT_EVAL_BATCH,
            )?;
            print_profile(&p);
            if let Some(path) = a.json {
                let text = serde_json::to_string_pretty(&p)
                    .map_err(|e| Error::internal(format!("profile serialization: {e}")))?;
                std::fs::write(&path, text + "\n")
                    .map_err(|e| Error::Io(path.display().to_string(), e))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compress(a) => {
            let spec = match &a.pipeline {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::Io(path.display().to_string(), e))?;
                    serde_json::from_str::<PipelineSpec>(&text)
                        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
                }
                None => {
                    let mut stages = Vec::new();
                    if let Some(target) = a.oto_target {
                        let saliency = match a.saliency.as_str() {
                            "group_l2" => Saliency::GroupL2,
                            "group_rms" => Saliency::GroupRms,
                            other => {
                                return Err(Error::Usage(format!(
                                    "unknown saliency {other:?}; use group_l2 or group_rms"
                                )))
                            }
                        };
                        stages.push(Stage::DhspgPrune {
                            config: DhspgConfig {
                                target_group_sparsity: target,
                                saliency,
                                train: TrainConfig {
                                    epochs: a.epochs,
                                    batch_size: a.batch_size,
                                    seed: a.seed,
                                    ..TrainConfig::default()
                                },
                                ..DhspgConfig::default()
                            },
                        });
                        stages.push(Stage::Extract);
                    }
                    if let Some(pair) = &a.l1 {
                        let (frac_linear, frac_conv) = parse_fraction_pair(pair, "l1")?;
                        stages.push(Stage::L1Unstructured { frac_linear, frac_conv });
                    }
                    if let Some(pair) = &a.random {
                        let (frac_linear, frac_conv) = parse_fraction_pair(pair, "random")?;
                        stages.push(Stage::RandomUnstructured {
                            frac_linear,
                            frac_conv,
                            seed: a.seed,
                        });
                    }
                    if a.quantize {
                        stages.push(Stage::DynamicQuantize);
                    }
                    PipelineSpec {
                        stages,
                        dataset: slimnext::harness::DatasetSpec::default(),
                        model: None,
                        seed: a.seed,
                        eval_batch_size: DEFAULT_EVAL_BATCH,
                    }
                }
            };
            spec.validate()?;
            let model = match &a.model {
                Some(path) => load(path)?,
                None => {
                    let cfg = spec.model.clone().ok_or_else(|| {
                        Error::Usage(
                            "no --model file and the pipeline spec names no architecture to build"
                                .into(),
                        )
                    })?;
                    build_convnext(&cfg, spec.seed)?
                }
            };
            let ds = match &a.data {
                Some(d) => parse_dataset(d, model.metadata.num_classes)?,
                None => slimnext::harness::resolve_dataset(&spec.dataset)?,
            };
            let (report, compressed) = run_pipeline(&model, &ds, &spec)?;
            print!("{}", emit_report(&report, ReportFormat::Markdown)?);
            if let Some(path) = &a.report {
                std::fs::write(path, emit_report(&report, ReportFormat::Json)?)
                    .map_err(|e| Error::Io(path.display().to_string(), e))?;
            }
            if let Some(err) = &report.error {
                eprintln!("pipeline stopped early: {err}");
                return Ok(ExitCode::from(2));
            }
            if let Some(out) = &a.out {
                save(&compressed, out)?;
                println!("saved {}", out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep(a) => {
            let model = load(&a.model)?;
            let ds = parse_dataset(&a.data, model.metadata.num_classes)?;
            let method = match a.method.as_str() {
                "l1" => MaskMethod::L1,
                "random" => MaskMethod::Random { seed: a.seed },
                other => {
                    return Err(Error::Usage(format!(
                        "unknown method {other:?}; use l1 or random"
                    )))
                }
            };
            let fracs = parse_fracs(&a.fracs)?;
            let points = sweep(&model, &ds, &fracs, &fracs, method)?;
            std::fs::write(&a.out, sweep_csv(&points))
                .map_err(|e| Error::Io(a.out.display().to_string(), e))?;
            println!("wrote {} rows to {}", points.len(), a.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval(a) => {
            let model = load(&a.model)?;
            let ds = parse_dataset(&a.data, model.metadata.num_classes)?;
            let acc = slimnext::profile::evaluate(&model, &ds, DEFAULT_EVAL_BATCH)?;
            println!("accuracy: {acc:.2}% over {} samples", ds.len());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Latency(a) => {
            let model = load(&a.model)?;
            let stats = measure_latency(&model, &input_shape(&model), a.warmup, a.iters)?;
            println!("mean: {:.3} ms", stats.mean_ms);
            println!("p50:  {:.3} ms", stats.p50_ms);
            println!("p95:  {:.3} ms", stats.p95_ms);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare(a) => {
            let read_profile = |path: &PathBuf| -> Result<Profile> {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Io(path.display().to_string(), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: not a profile: {e}", path.display())))
            };
            let before = read_profile(&a.before)?;
            let after = read_profile(&a.after)?;
            let r = compare(&before, &after);
            println!("size reduction:   {:.2}%", r.size_pct);
            println!("params reduction: {:.2}%", r.params_pct);
            println!("MACs reduction:   {:.2}%", r.macs_pct);
            println!("accuracy change:  {:+.2} points", r.accuracy_delta_points);
            Ok(ExitCode::SUCCESS)
        }
    }
}
