use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use yolo12::checks::{gradient_suite, Suite, TOLERANCE};
use yolo12::model::{decode, load_weights, nms, save_weights, Detection, Model, ModelConfig, Scale};
use yolo12::nn::Ctx;
use yolo12::pipeline::{
    gen_toy_dataset, letterbox, load_image, load_toy_dataset, train_toy, write_toy_dataset, TrainConfig, NUM_CLASSES,
};
use yolo12::profiler::{
    bench_attention, bench_model, emit_report, flop_report, write_bench_csv, AttentionPoint, KernelKind, ReportFormat,
};

#[derive(Parser)]
#[command(name = "yolo12", version, about = "Desk-scale area-attention detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Attention,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModule {
    All,
    Ops,
    Attention,
    Blocks,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detector on a PPM image
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// must match the scale stored in the weight file
        #[arg(long)]
        scale: Option<Scale>,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
        /// letterbox size (multiple of 32)
        #[arg(long, default_value_t = 640)]
        size: usize,
        #[arg(long)]
        json: bool,
    },
    /// Per-layer parameter and MAC report
    Flops {
        #[arg(long, default_value = "n")]
        scale: Scale,
        #[arg(long, default_value_t = 640)]
        size: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Latency benchmarks
    Bench {
        #[arg(long, value_enum)]
        kind: BenchKind,
        /// token counts (attention)
        #[arg(long, value_delimiter = ',', default_value = "1024,4096")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        head_dim: usize,
        /// area counts (attention)
        #[arg(long, value_delimiter = ',', default_value = "4")]
        areas: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "naive,area,tiled")]
        kernels: Vec<KernelKind>,
        /// model scale (model)
        #[arg(long, default_value = "n")]
        scale: Scale,
        /// input size (model)
        #[arg(long, default_value_t = 640)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks (fp64)
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: GradModule,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic shapes dataset (PPM + label files)
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 160)]
        size: usize,
    },
    /// Train a fresh model on a toy dataset
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "n")]
        scale: Scale,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// write the per-iteration loss as CSV
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn detect(
    image: &Path,
    weights: &Path,
    scale: Option<Scale>,
    conf: f64,
    iou: f64,
    size: usize,
    as_json: bool,
) -> yolo12::Result<()> {
    if !(iou > 0.0 && iou < 1.0) {
        return Err(yolo12::Error::Config(format!("IoU threshold {iou} outside (0, 1)")));
    }
    let model: Model<f32> = load_weights(weights)?;
    if let Some(s) = scale {
        if s != model.cfg.scale {
            return Err(yolo12::Error::Config(format!(
                "weights are scale {}, requested {s}",
                model.cfg.scale
            )));
        }
    }
    let raw = load_image(image)?;
    let lb = letterbox::<f32>(&raw, size)?;
    let out = model.forward(&lb.tensor, &Ctx::eval())?;
    let (w, h) = (raw.width as f64, raw.height as f64);
    let dets: Vec<Detection> = nms(&decode(&out, conf, size, size)?, iou)
        .into_iter()
        .map(|d| {
            let (x1, y1) = lb.to_original(d.x1, d.y1);
            let (x2, y2) = lb.to_original(d.x2, d.y2);
            Detection {
                x1: x1.clamp(0.0, w),
                y1: y1.clamp(0.0, h),
                x2: x2.clamp(0.0, w),
                y2: y2.clamp(0.0, h),
                ..d
            }
        })
        .collect();
    if as_json {
        let v: Vec<_> = dets
            .iter()
            .map(|d| json!({"x1": d.x1, "y1": d.y1, "x2": d.x2, "y2": d.y2, "class_id": d.class_id, "score": d.score}))
            .collect();
        println!("{}", serde_json::to_string_pretty(&v).expect("plain values"));
    } else {
        for d in &dets {
            println!(
                "class {} score {:.4} box {:.1} {:.1} {:.1} {:.1}",
                d.class_id, d.score, d.x1, d.y1, d.x2, d.y2
            );
        }
        println!("{} detections", dets.len());
    }
    Ok(())
}

fn flops(scale: Scale, size: usize, csv: Option<&Path>, json_path: Option<&Path>) -> yolo12::Result<()> {
    let model: Model<f32> = Model::new(ModelConfig::new(scale), 0)?;
    let r = flop_report(&model, size)?;
    println!("{:>5}  {:<28} {:<34} {:>10} {:>14}", "layer", "kind", "output", "params", "MACs");
    for row in &r.rows {
        println!(
            "{:>5}  {:<28} {:<34} {:>10} {:>14}",
            row.layer_id, row.kind, row.output_shape, row.params, row.macs
        );
    }
    println!(
        "scale {scale} size {size}: params {} ({:.3} M), MACs {}, GFLOPs {:.3}",
        r.total_params,
        r.total_params as f64 / 1e6,
        r.total_macs,
        r.gflops
    );
    if let Some(p) = csv {
        emit_report(&r, ReportFormat::Csv, p)?;
    }
    if let Some(p) = json_path {
        emit_report(&r, ReportFormat::Json, p)?;
    }
    Ok(())
}

fn run(cli: Cli) -> yolo12::Result<bool> {
    match cli.command {
        Command::Detect {
            image,
            weights,
            scale,
            conf,
            iou,
            size,
            json,
        } => detect(&image, &weights, scale, conf, iou, size, json)?,
        Command::Flops { scale, size, csv, json } => flops(scale, size, csv.as_deref(), json.as_deref())?,
        Command::Bench {
            kind,
            n,
            heads,
            head_dim,
            areas,
            kernels,
            scale,
            size,
            reps,
            warmup,
            seed,
            out,
        } => {
            let rows = match kind {
                BenchKind::Attention => {
                    let mut grid = Vec::new();
                    for &n in &n {
                        for &kernel in &kernels {
                            let ls: &[usize] = if kernel == KernelKind::Area { &areas } else { &[1] };
                            for &l in ls {
                                grid.push(AttentionPoint {
                                    n,
                                    h: heads,
                                    d: head_dim,
                                    l,
                                    kernel,
                                });
                            }
                        }
                    }
                    bench_attention(&grid, reps, warmup, seed)?
                }
                BenchKind::Model => vec![bench_model(scale, size, reps, warmup, seed)?],
            };
            for r in &rows {
                match r.median_ms {
                    Some(m) => println!(
                        "{:<18} n={:<6} L={:<3} median {m:.3} ms  p5 {:.3}  p95 {:.3}",
                        r.label,
                        r.n.map_or("-".into(), |v| v.to_string()),
                        r.l.map_or("-".into(), |v| v.to_string()),
                        r.p5_ms.unwrap_or(f64::NAN),
                        r.p95_ms.unwrap_or(f64::NAN),
                    ),
                    None => println!("{:<18} {}", r.label, r.status),
                }
            }
            write_bench_csv(&rows, &out)?;
        }
        Command::Gradcheck { module, seed } => {
            let suite = match module {
                GradModule::All => Suite::All,
                GradModule::Ops => Suite::Ops,
                GradModule::Attention => Suite::Attention,
                GradModule::Blocks => Suite::Blocks,
            };
            let results = gradient_suite(suite, seed)?;
            let mut worst: f64 = 0.0;
            for c in &results {
                println!(
                    "{} {:<44} {:.3e} ({} coords)",
                    if c.passed() { "ok  " } else { "FAIL" },
                    c.name,
                    c.max_rel_error,
                    c.coords
                );
                worst = worst.max(c.max_rel_error);
            }
            println!("{} checks, max relative error {worst:.3e} (tolerance {TOLERANCE:e})", results.len());
            return Ok(results.iter().all(|c| c.passed()));
        }
        Command::GenData { count, seed, out, size } => {
            let data = gen_toy_dataset(count, seed, size)?;
            write_toy_dataset(&data, &out)?;
            let objects: usize = data.iter().map(|s| s.objects.len()).sum();
            println!("wrote {count} images ({objects} objects) to {}", out.display());
        }
        Command::TrainToy {
            data,
            iters,
            lr,
            out,
            scale,
            batch,
            seed,
            trace,
        } => {
            let samples = load_toy_dataset(&data)?;
            let mut model: Model<f32> = Model::new(ModelConfig::new(scale).with_nc(NUM_CLASSES), seed)?;
            let cfg = TrainConfig {
                iters,
                lr,
                batch_size: batch,
                seed,
                ..Default::default()
            };
            let losses = train_toy(&mut model, &samples, &cfg)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("{} iterations: loss {first:.4} -> {last:.4}", losses.len());
            }
            save_weights(&model, &out)?;
            if let Some(p) = trace {
                let text: String = std::iter::once("iteration,loss\n".to_string())
                    .chain(losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
                    .collect();
                std::fs::write(&p, text).map_err(|e| yolo12::Error::Io { path: p.clone(), source: e })?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
