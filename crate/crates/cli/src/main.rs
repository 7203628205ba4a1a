use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use emf_cli::commands::{self, VerificationFailed};
use emf_cli::config::ConfigArgs;
use emf_core::evaluation::EvalProtocol;
use emf_core::event_io::LabelAlignment;

#[derive(Parser)]
#[command(name = "emf", version, about = "Event-camera object detection runtime")]
struct Cli {
    /// Worker threads for tensor kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded training-form weights.
    Init {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Record the sensor size so `infer` can reject other geometries.
        #[arg(long, requires = "height")]
        width: Option<u16>,
        #[arg(long, requires = "width")]
        height: Option<u16>,
    },
    /// Encode an event stream into one stacked-histogram tensor per window.
    Encode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Labels JSONL; per-window counts go into the index.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Sensor width, required for CSV input.
        #[arg(long)]
        width: Option<u16>,
        #[arg(long)]
        height: Option<u16>,
    },
    /// Run the detector over an event stream and write detections JSONL.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the fused form, fusing training-form weights on load.
        #[arg(long)]
        fused: bool,
        #[arg(long)]
        score_thr: Option<f64>,
        #[arg(long)]
        iou_thr: Option<f64>,
        #[arg(long)]
        max_dets: Option<usize>,
        #[arg(long)]
        width: Option<u16>,
        #[arg(long)]
        height: Option<u16>,
    },
    /// Fuse training-form weights into single-convolution blocks.
    Fuse {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Compare both forms on random inputs before writing.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 10)]
        verify_inputs: usize,
        /// Verification input as C,H,W.
        #[arg(long, default_value = "20,64,64", value_parser = parse_shape)]
        verify_shape: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the verification report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score detections against labels with mAP[50:95].
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "gen1")]
        protocol: String,
        #[arg(long, default_value_t = 50)]
        dt_ms: u64,
        /// Assign labels at t to the window [t0, t0 + dt) instead of (t0, t0 + dt].
        #[arg(long)]
        window_start: bool,
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward passes of the backbone and head.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Weights to time; a seeded model is used otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 304)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long)]
        fused: bool,
        /// Include encoding, decoding and NMS in each timed iteration.
        #[arg(long)]
        end_to_end: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected C,H,W, got {s:?}"))
}

fn sensor(width: Option<u16>, height: Option<u16>) -> Option<(u16, u16)> {
    width.zip(height)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Init {
            config,
            out,
            width,
            height,
        } => {
            let n = commands::run_init(&commands::InitArgs {
                config,
                out: out.clone(),
                sensor: sensor(width, height),
            })?;
            println!("wrote {} ({n} parameters)", out.display());
        }
        Command::Encode {
            config,
            events,
            out_dir,
            labels,
            width,
            height,
        } => {
            let index = commands::run_encode(&commands::EncodeArgs {
                config,
                events,
                sensor: sensor(width, height),
                labels,
                out_dir: out_dir.clone(),
            })?;
            println!(
                "wrote {} windows of shape {:?} to {}",
                index.windows.len(),
                index.tensor_shape,
                out_dir.display()
            );
        }
        Command::Infer {
            config,
            weights,
            events,
            out,
            fused,
            score_thr,
            iou_thr,
            max_dets,
            width,
            height,
        } => {
            let summary = commands::run_infer(&commands::InferArgs {
                config,
                weights,
                events,
                sensor: sensor(width, height),
                out,
                fused,
                score_thr,
                iou_thr,
                max_dets,
            })?;
            eprintln!("{}", serde_json::to_string(&summary)?);
        }
        Command::Fuse {
            weights,
            out,
            verify,
            tol,
            verify_inputs,
            verify_shape,
            seed,
            report,
        } => {
            let r = commands::run_fuse(&commands::FuseArgs {
                weights,
                out: out.clone(),
                verify,
                tol,
                inputs: verify_inputs,
                shape: verify_shape,
                seed,
                report,
            })?;
            match r {
                Some(r) => println!(
                    "wrote {}; max deviation {:.3e} over {} inputs (tolerance {:.1e})",
                    out.display(),
                    r.global,
                    r.inputs,
                    r.tolerance
                ),
                None => println!("wrote {}", out.display()),
            }
        }
        Command::Eval {
            detections,
            labels,
            protocol,
            dt_ms,
            window_start,
            num_classes,
            out,
        } => {
            let protocol: EvalProtocol = protocol.parse()?;
            let report = commands::run_eval(&commands::EvalArgs {
                detections,
                labels,
                protocol,
                dt_us: dt_ms * 1000,
                alignment: if window_start {
                    LabelAlignment::WindowStart
                } else {
                    LabelAlignment::WindowEnd
                },
                num_classes,
                out,
            })?;
            print!("{}", report.result.table());
        }
        Command::Bench {
            config,
            weights,
            width,
            height,
            iters,
            warmup,
            fused,
            end_to_end,
            out,
        } => {
            let b = commands::run_bench(&commands::BenchArgs {
                config,
                weights,
                width,
                height,
                iters,
                warmup,
                fused,
                end_to_end,
                out,
            })?;
            println!("{}", serde_json::to_string_pretty(&b.report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<VerificationFailed>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
