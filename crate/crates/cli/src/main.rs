//! `camforge`: reproducible command-line workflows for Grad-CAM style
//! attribution on CAMF models — model generation, heatmaps and overlays,
//! explanation maps, dataset evaluation, alpha statistics, and the numerical
//! derivation audits.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or file-format error,
//! 3 check failure (an audited residual exceeded its tolerance).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use camforge_core::audit::{gradient_check, run_audit, AuditConfig};
use camforge_core::cam::{attribute, AttributionRequest, Method};
use camforge_core::error::Error;
use camforge_core::eval::{
    alpha_statistics_dir, evaluate_and_report, fmt_f64, write_report, ClassSelect, EvalConfig,
    EvalMethod, ReportFormat,
};
use camforge_core::nn::{generate_toy_model, load_model, save_model, Model, ScoreMode, ScoreSpec, ToyArch};
use camforge_core::postproc::netpbm::{read_image, write_image};
use camforge_core::postproc::{
    bilinear_upsample, explanation_map, min_max_normalize, overlay, Image, Provenance,
};
use camforge_core::rng::SplitMix64;

#[derive(Parser)]
#[command(name = "camforge", version, about = "Grad-CAM family attribution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy model and write it as a CAMF file.
    GenModel {
        #[arg(long)]
        seed: u64,
        /// Architecture: tiny or small.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a heatmap for one image and write it as a PGM file.
    Attribute(AttributeArgs),
    /// Attribute, write the explanation map, and print the score of the
    /// re-fed explanation map.
    Explain {
        #[command(flatten)]
        attr: AttributeArgs,
        /// Output path for the explanation map image.
        #[arg(long)]
        explanation: PathBuf,
    },
    /// Run attribution methods over a dataset and report relative
    /// performance for every method pair.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory containing images plus index.csv.
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated list: gradcam,gradcam-plus,gradcam-pp.
        #[arg(long)]
        methods: String,
        #[arg(long, default_value_t = 0.5)]
        confidence: f64,
        /// Gradient score mode: pre or post.
        #[arg(long, default_value = "post")]
        score: String,
        /// Report path; format inferred from the .json or .csv extension.
        #[arg(long)]
        report: PathBuf,
        /// Attribution layer; defaults to the last spatial layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long = "alpha-eps", default_value_t = 0.0)]
        alpha_eps: f64,
    },
    /// Aggregate Grad-CAM++ alpha statistics over a dataset.
    AlphaStats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
        /// Target class: an index, or argmax (per-image label/argmax).
        #[arg(long, default_value = "argmax")]
        class: String,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Output path; format inferred from the .json or .csv extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare backprop gradients against central finite differences.
    CheckGrad {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
    },
    /// Run the full derivation audit and write the JSON report.
    CheckDerivation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Audited layer; defaults to the last spatial layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Audited class; defaults to the argmax on the audit image.
        #[arg(long)]
        class: Option<usize>,
    },
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input image (PGM or PPM).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Target class: an index, or argmax.
    #[arg(long, default_value = "argmax")]
    class: String,
    /// gradcam, gradcam-plus, or gradcam-pp.
    #[arg(long)]
    method: String,
    /// Gradient score mode: pre or post.
    #[arg(long, default_value = "post")]
    score: String,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long = "alpha-eps", default_value_t = 0.0)]
    alpha_eps: f64,
    /// Output heatmap (PGM, normalized and upsampled to image size).
    #[arg(long)]
    out: PathBuf,
    /// Optional colormap overlay output (PPM).
    #[arg(long)]
    overlay: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; anything else is usage.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Usage errors exit 1; I/O and file-format errors exit 2.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::Json(_)
        | Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_)
        | Error::ManifestInvalid(_)
        | Error::ImageFormat(_)
        | Error::NonFinite(_)
        | Error::Dataset(_) => 2,
        _ => 1,
    }
}

fn parse_score_mode(s: &str) -> Result<ScoreMode, Error> {
    match s {
        "pre" => Ok(ScoreMode::PreSoftmax),
        "post" => Ok(ScoreMode::PostSoftmax),
        other => Err(Error::InvalidRequest(format!("unknown score mode `{other}` (pre|post)"))),
    }
}

enum ClassArg {
    Argmax,
    Index(usize),
}

fn parse_class(s: &str) -> Result<ClassArg, Error> {
    if s == "argmax" {
        return Ok(ClassArg::Argmax);
    }
    s.parse::<usize>()
        .map(ClassArg::Index)
        .map_err(|_| Error::InvalidRequest(format!("class must be an index or `argmax`, got `{s}`")))
}

fn report_format_for(path: &Path) -> Result<ReportFormat, Error> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(ReportFormat::Json),
        Some("csv") => Ok(ReportFormat::Csv),
        other => Err(Error::ReportFormat(other.unwrap_or("<none>").to_string())),
    }
}

fn resolve_layer(model: &Model<f64>, layer: Option<usize>) -> Result<usize, Error> {
    match layer {
        Some(l) => Ok(l),
        None => model
            .last_spatial_layer()
            .ok_or_else(|| Error::InvalidRequest("model has no spatial layer".into())),
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenModel { seed, arch, out } => {
            let arch = ToyArch::from_str(&arch)?;
            let model = generate_toy_model::<f64>(seed, arch);
            save_model(&model, &out)?;
            println!("wrote {} ({} arch, seed {})", out.display(), arch.name(), seed);
            Ok(ExitCode::SUCCESS)
        }
        Command::Attribute(args) => {
            run_attribute(&args)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Explain { attr, explanation } => {
            let (image, heatmap, class) = run_attribute(&attr)?;
            let model: Model<f64> = load_model(&attr.model)?;
            let emap = explanation_map(&heatmap, &image)?;
            write_image(&emap, &explanation)?;
            let trace = model.forward(&emap.to_tensor())?;
            println!("re-fed post-softmax score (class {class}): {}", fmt_f64(trace.post_softmax[class]));
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            model,
            dataset,
            methods,
            confidence,
            score,
            report,
            layer,
            lambda,
            alpha_eps,
        } => {
            let format = report_format_for(&report)?;
            let model: Model<f64> = load_model(&model)?;
            let layer = resolve_layer(&model, layer)?;
            let score_mode = parse_score_mode(&score)?;
            let mut method_list = Vec::new();
            for name in methods.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let mut m = EvalMethod::new(Method::from_str(name)?);
                m.lambda = lambda;
                m.alpha_epsilon = alpha_eps;
                method_list.push(m);
            }
            let config = EvalConfig {
                layer_index: layer,
                score_mode,
                confidence,
                class_select: ClassSelect::LabelOrArgmax,
            };
            let eval_report = evaluate_and_report(&model, &dataset, &method_list, &config)?;
            write_report(&eval_report, &report, format)?;
            println!(
                "evaluated {} images ({} filtered, {} skipped)",
                eval_report.sample_count, eval_report.filtered_out, eval_report.skipped
            );
            for pair in &eval_report.pairs {
                println!(
                    "  {} vs {}: relative performance {:.4} (log mean {:.4}, log std {:.4}, n={})",
                    pair.method_prime,
                    pair.method,
                    pair.relative_performance,
                    pair.log_mean,
                    pair.log_std,
                    pair.sample_count
                );
            }
            println!("wrote {}", report.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::AlphaStats { model, dataset, layer, class, lambda, out } => {
            let format = report_format_for(&out)?;
            let model: Model<f64> = load_model(&model)?;
            let layer = resolve_layer(&model, layer)?;
            let select = match parse_class(&class)? {
                ClassArg::Argmax => ClassSelect::LabelOrArgmax,
                ClassArg::Index(c) => ClassSelect::Fixed(c),
            };
            let stats = alpha_statistics_dir(&model, &dataset, layer, select, lambda)?;
            write_report(&stats, &out, format)?;
            println!(
                "alpha stats: {} nonzero, {} zero-gradient units, raw extremes [{}, {}]",
                stats.nonzero_count,
                stats.zero_count,
                stats.raw_nonzero_min.map(fmt_f64).unwrap_or_else(|| "-".into()),
                stats.raw_nonzero_max.map(fmt_f64).unwrap_or_else(|| "-".into()),
            );
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckGrad { model, tol, probes, seed, step } => {
            let model: Model<f64> = load_model(&model)?;
            let mut rng = SplitMix64::new(seed);
            let image_seed = rng.next_u64();
            let probe_seed = rng.next_u64();
            let image = camforge_core::nn::synth_image::<f64>(image_seed, model.input_shape());
            let class = model.forward(&image)?.argmax();
            let score = ScoreSpec { class_index: class, mode: ScoreMode::PreSoftmax };
            let report = gradient_check(&model, &image, score, probes, probe_seed, step, tol)?;
            println!(
                "check-grad: probes={} max_rel_err={} mean_rel_err={} tol={} ... {}",
                report.probes,
                fmt_f64(report.max_rel_error),
                fmt_f64(report.mean_rel_error),
                fmt_f64(report.tolerance),
                if report.pass { "PASS" } else { "FAIL" }
            );
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::CheckDerivation { model, seed, out, layer, class } => {
            let model: Model<f64> = load_model(&model)?;
            let layer = resolve_layer(&model, layer)?;
            let report = run_audit(&model, layer, class, seed, &AuditConfig::default())?;
            write_report(&report, &out, ReportFormat::Json)?;
            let line = |name: &str, pass: bool| {
                println!("check-derivation: {name} ... {}", if pass { "PASS" } else { "FAIL" });
            };
            line("corrected-identity", report.identity_pass);
            line("beta-families", report.beta_pass);
            line("pooled-score-residual", report.eq5_pass);
            line("lambda-sweep", report.lambda_pass);
            line("linearity-shift", report.linearity_pass);
            println!("wrote {}", out.display());
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
    }
}

/// Shared attribute pipeline: returns the source image, the normalized
/// heatmap upsampled to image size, and the resolved class.
fn run_attribute(
    args: &AttributeArgs,
) -> Result<(Image<f64>, camforge_core::postproc::NormalizedHeatmap<f64>, usize), Error> {
    let model: Model<f64> = load_model(&args.model)?;
    let image: Image<f64> = read_image(&args.image)?;
    let input = image.to_tensor();
    let mode = parse_score_mode(&args.score)?;
    let class = match parse_class(&args.class)? {
        ClassArg::Index(c) => c,
        ClassArg::Argmax => model.forward(&input)?.argmax(),
    };
    let mut request = AttributionRequest::new(
        Method::from_str(&args.method)?,
        args.layer,
        ScoreSpec { class_index: class, mode },
    );
    request.lambda = args.lambda;
    request.alpha_epsilon = args.alpha_eps;

    let attribution = attribute(&model, &input, &request)?;
    let normalized = min_max_normalize(&attribution.heatmap.values);
    let upsampled = bilinear_upsample(&normalized, image.height, image.width)?;

    let heat_image = Image::new(
        1,
        image.height,
        image.width,
        upsampled.values.data().to_vec(),
        Provenance::Derived,
    )?;
    write_image(&heat_image, &args.out)?;
    if let Some(overlay_path) = &args.overlay {
        let blended = overlay(&image, &upsampled)?;
        write_image(&blended, overlay_path)?;
    }
    if upsampled.degenerate {
        eprintln!("note: heatmap was constant; normalized output is all zeros");
    }
    Ok((image, upsampled, class))
}
