//! Command-line entry point: analyze, infer, dump-spec, verify, init-random.
//!
//! Machine-readable output goes to stdout; diagnostics go to stderr. The
//! exit code is zero iff the requested operation fully succeeded.
//! `LEYOLO_THREADS` caps intra-op parallelism (default 1 for determinism).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use leyolo_core::analyzer;
use leyolo_core::arch::{self, AblationConfig, AblationToggle, Variant};
use leyolo_core::engine;
use leyolo_core::io;
use leyolo_core::postprocess;
use leyolo_core::tensor::ExecContext;

#[derive(Parser)]
#[command(name = "leyolo", version, about = "LeYOLO inference engine and FLOP/parameter analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Nano,
    Small,
    Medium,
    Large,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Nano => Variant::Nano,
            VariantArg::Small => Variant::Small,
            VariantArg::Medium => Variant::Medium,
            VariantArg::Large => Variant::Large,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, value_enum, default_value = "nano")]
    variant: VariantArg,
    #[arg(long, default_value_t = 80)]
    num_classes: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Static parameter/MACC/FLOP report for a variant.
    Analyze {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        /// Ablation toggles (repeatable): kernels_3x3_only, kernels_5x5_only,
        /// k5_after_p4_only, downsample_3x3_only, no_pw_backbone_and_neck,
        /// neck_expansion_2, neck_expansion_3.
        #[arg(long = "ablate")]
        ablate: Vec<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Write per-layer rows as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also print the variant comparison rows.
        #[arg(long, default_value_t = false)]
        compare: bool,
    },
    /// Run detection on a binary PPM image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long, default_value_t = 0.25)]
        conf: f32,
        #[arg(long, default_value_t = 0.65)]
        iou: f32,
        #[arg(long, default_value_t = 300)]
        max_det: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Emit the architecture graph as JSON.
    DumpSpec {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Validate a variant's architecture constraints.
    Verify {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Write a deterministic random weight store for a variant.
    InitRandom {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn env_threads() -> usize {
    std::env::var("LEYOLO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v >= 1)
        .unwrap_or(1)
}

fn parse_ablation(toggles: &[String]) -> Result<AblationConfig, leyolo_core::Error> {
    let toggles = toggles
        .iter()
        .map(|t| t.parse::<AblationToggle>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AblationConfig { toggles })
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Analyze { spec, imgsz, ablate, format, csv, compare } => {
            let mut arch_spec = arch::build(spec.variant.into(), spec.num_classes);
            let ab = parse_ablation(&ablate).map_err(|e| e.to_string())?;
            if !ab.toggles.is_empty() {
                arch_spec = arch::apply_ablation(&arch_spec, &ab).map_err(|e| e.to_string())?;
            }
            let report = analyzer::count(&arch_spec, imgsz).map_err(|e| e.to_string())?;
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            match format {
                Format::Table => {
                    print!("{}", report.to_table());
                    if compare {
                        println!("\nvariant  size  GFLOP    MParams");
                        for row in analyzer::compare_variants(spec.num_classes).map_err(|e| e.to_string())? {
                            println!(
                                "{:<8} {:>4}  {:<7.3} {:.3}",
                                row.variant.name(),
                                row.input_size,
                                row.gflops,
                                row.mparams
                            );
                        }
                    }
                }
                Format::Json => {
                    if compare {
                        let rows = analyzer::compare_variants(spec.num_classes).map_err(|e| e.to_string())?;
                        let doc = serde_json::json!({ "report": report, "variants": rows });
                        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
                    } else {
                        println!("{}", serde_json::to_string_pretty(&report).unwrap());
                    }
                }
            }
            Ok(())
        }
        Command::Infer { weights, image, spec, imgsz, conf, iou, max_det, output } => {
            if imgsz == 0 || imgsz % 32 != 0 {
                return Err(format!("imgsz must be a positive multiple of 32, got {imgsz}"));
            }
            let store = io::read_store(&weights).map_err(|e| format!("weights {}: {e}", weights.display()))?;
            let img = io::read_ppm(&image).map_err(|e| format!("image {}: {e}", image.display()))?;
            let arch_spec = arch::build(spec.variant.into(), spec.num_classes);
            let model = engine::bind(&arch_spec, &store).map_err(|e| e.to_string())?;
            let ctx = ExecContext::new(env_threads());

            let (orig_h, orig_w) = (img.height(), img.width());
            let (boxed, meta) = postprocess::letterbox(&img, imgsz).map_err(|e| e.to_string())?;
            let heads = model.forward(&ctx, &boxed).map_err(|e| e.to_string())?;
            let mut dets = postprocess::decode(&heads, conf).map_err(|e| e.to_string())?;
            postprocess::clip_detections(&mut dets, imgsz, imgsz);
            let mut kept = postprocess::nms(&dets, iou, max_det);
            for d in &mut kept {
                d.bbox = postprocess::unletterbox(d.bbox, &meta);
            }
            postprocess::clip_detections(&mut kept, orig_w, orig_h);

            let json = serde_json::to_string_pretty(&kept).unwrap();
            match output {
                Some(path) => std::fs::write(&path, json).map_err(|e| format!("{}: {e}", path.display()))?,
                None => println!("{json}"),
            }
            eprintln!("{} detection(s)", kept.len());
            Ok(())
        }
        Command::DumpSpec { spec, output } => {
            let arch_spec = arch::build(spec.variant.into(), spec.num_classes);
            let json = serde_json::to_string_pretty(&arch_spec).unwrap();
            match output {
                Some(path) => std::fs::write(&path, json).map_err(|e| format!("{}: {e}", path.display()))?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Verify { spec } => {
            let arch_spec = arch::build(spec.variant.into(), spec.num_classes);
            let report = analyzer::verify_constraints(&arch_spec).map_err(|e| e.to_string())?;
            for v in &report.violations {
                eprintln!("violation: {} [{}] {}", v.layer, v.rule, v.message);
            }
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            if report.all_pass() {
                Ok(())
            } else {
                Err("constraint verification failed".into())
            }
        }
        Command::InitRandom { spec, seed, output } => {
            let arch_spec = arch::build(spec.variant.into(), spec.num_classes);
            let store = io::init_random(&arch_spec, seed);
            io::write_store(&store, &output).map_err(|e| format!("{}: {e}", output.display()))?;
            eprintln!("wrote {} tensors to {}", store.len(), output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
