//! Command-line entry point: generate / train / eval / infer / sweep.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use opensd::classifiers::Vocabulary;
use opensd::harness::{
    evaluate, evaluate_oracle, export_dataset, load_dataset, predict_scene, synthesize_dataset,
    train, EvalOptions, Pipeline, RunConfig, Scene,
};
use opensd::inference::{EnsembleParams, TaskOutputs};
use opensd::metrics::EvalReport;
use opensd::tensor::ParamStore;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "opensd",
    version,
    about = "Open-vocabulary segmentation and detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigOpts {
    /// Configuration file (key = value lines); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Train/evaluate the shared-decoder baseline instead of the decoupled
    /// model.
    #[arg(long)]
    shared_decoder: bool,
    /// Override any config key, e.g. `--set scene_size=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigOpts {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).context("loading config file")?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(alpha) = self.alpha {
            cfg.alpha = alpha;
        }
        if let Some(beta) = self.beta {
            cfg.beta = beta;
        }
        if self.shared_decoder {
            cfg.shared_decoder = true;
        }
        for kv in &self.set {
            let Some((key, value)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset directory (COCO-panoptic layout).
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Which synthetic split to export.
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        config: ConfigOpts,
    },
    /// Train a model and persist checkpoint, loss curve and final report.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigOpts,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; the synthetic split is used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Score the ground truth against itself (all metrics must be 1).
        #[arg(long)]
        oracle: bool,
        /// Restrict scoring to the training vocabulary (closed-vocabulary
        /// evaluation).
        #[arg(long)]
        seen_only: bool,
        /// Write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigOpts,
    },
    /// Run inference and write per-image task outputs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigOpts,
    },
    /// Evaluate a checkpoint across a grid of ensemble exponents.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated alpha values.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4")]
        alphas: String,
        /// Comma-separated beta values.
        #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9")]
        betas: String,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigOpts,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn scenes_for(
    cfg: &RunConfig,
    data: Option<&Path>,
    split: &str,
) -> anyhow::Result<(Vec<Scene>, Vocabulary)> {
    match data {
        Some(dir) => {
            let (scenes, vocab) = load_dataset(dir)?;
            Ok((scenes, vocab))
        }
        None => {
            let dataset = synthesize_dataset(cfg)?;
            let scenes = match split {
                "train" => dataset.train,
                "eval" => dataset.eval,
                other => bail!("unknown split `{other}` (expected train or eval)"),
            };
            Ok((scenes, dataset.vocab))
        }
    }
}

fn load_checkpoint(path: &Path, cfg: &RunConfig, vocab: &Vocabulary) -> anyhow::Result<ParamStore> {
    let mut store = ParamStore::load(path).context("loading checkpoint")?;
    // Registers anything missing; existing entries keep their values.
    Pipeline::init(&mut store, cfg, vocab);
    Ok(store)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Generate { out, split, config } => {
            let cfg = config.resolve()?;
            let (scenes, vocab) = scenes_for(&cfg, None, &split)?;
            export_dataset(&out, &scenes, &vocab)?;
            println!("wrote {} `{split}` scenes to {}", scenes.len(), out.display());
        }
        Cmd::Train { out, config } => {
            let cfg = config.resolve()?;
            let outcome = train(&cfg, None)?;
            opensd::harness::train::persist_run(&outcome, &cfg, &out)?;
            let first = outcome.loss_curve.first().map(|p| p.loss).unwrap_or(0.0);
            let last = outcome.loss_curve.last().map(|p| p.loss).unwrap_or(0.0);
            println!("trained {} steps: loss {first:.4} -> {last:.4}", cfg.steps);
            println!("{}", outcome.final_report().to_table());
            println!("run artifacts in {}", out.display());
        }
        Cmd::Eval { checkpoint, data, split, oracle, seen_only, out, config } => {
            let cfg = config.resolve()?;
            let (scenes, vocab) = scenes_for(&cfg, data.as_deref(), &split)?;
            let report = if oracle {
                evaluate_oracle(&vocab, &scenes)?
            } else {
                let ckpt = checkpoint
                    .as_deref()
                    .context("--checkpoint is required unless --oracle is set")?;
                let store = load_checkpoint(ckpt, &cfg, &vocab)?;
                let mut opts = EvalOptions::from_config(&cfg)?;
                opts.seen_only = seen_only;
                evaluate(&store, &cfg, &vocab, &scenes, &opts)?
            };
            print!("{}", report.to_table());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report written to {}", path.display());
            }
        }
        Cmd::Infer { checkpoint, data, split, out, config } => {
            let cfg = config.resolve()?;
            let (scenes, vocab) = scenes_for(&cfg, data.as_deref(), &split)?;
            let store = load_checkpoint(&checkpoint, &cfg, &vocab)?;
            let opts = EvalOptions::from_config(&cfg)?;
            let pipe = Pipeline::bind(&store, &cfg, false)?;
            std::fs::create_dir_all(&out)?;
            let mut all_detections = Vec::new();
            let mut all_instances = Vec::new();
            for (i, scene) in scenes.iter().enumerate() {
                let outputs = predict_scene(&pipe, scene, &vocab, &opts)?;
                write_task_outputs(&out, i, &outputs)?;
                collect_coco_results(i as u64 + 1, &outputs, &mut all_detections, &mut all_instances);
            }
            std::fs::write(
                out.join("detections.json"),
                serde_json::to_string_pretty(&all_detections)?,
            )?;
            std::fs::write(
                out.join("instances.json"),
                serde_json::to_string_pretty(&all_instances)?,
            )?;
            println!("wrote task outputs for {} images to {}", scenes.len(), out.display());
        }
        Cmd::Sweep { checkpoint, alphas, betas, split, out, config } => {
            let cfg = config.resolve()?;
            let (scenes, vocab) = scenes_for(&cfg, None, &split)?;
            let store = load_checkpoint(&checkpoint, &cfg, &vocab)?;
            let alphas = parse_grid(&alphas)?;
            let betas = parse_grid(&betas)?;
            let sweep = run_sweep(&store, &cfg, &vocab, &scenes, &alphas, &betas)?;
            print!("{}", sweep.to_table());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&sweep)?)?;
                println!("sweep written to {}", path.display());
            }
        }
    }
    Ok(())
}

fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow::anyhow!("bad grid value `{s}`")))
        .collect()
}

#[derive(Serialize)]
struct SweepCell {
    alpha: f64,
    beta: f64,
    miou: f64,
    pq: f64,
    box_map: f64,
    mask_map: f64,
}

#[derive(Serialize)]
struct SweepResult {
    alphas: Vec<f64>,
    betas: Vec<f64>,
    /// Row-major [alpha][beta].
    cells: Vec<Vec<SweepCell>>,
}

impl SweepResult {
    fn to_table(&self) -> String {
        let mut outp = String::new();
        outp.push_str("cells are: mIoU, PQ, box mAP, mask mAP\n");
        outp.push_str(&format!("{:>6}", "a\\b"));
        for b in &self.betas {
            outp.push_str(&format!(" | {b:^27}"));
        }
        outp.push('\n');
        for (i, a) in self.alphas.iter().enumerate() {
            outp.push_str(&format!("{a:>6}"));
            for cell in &self.cells[i] {
                outp.push_str(&format!(
                    " | {:.3} {:.3} {:.3} {:.3}      ",
                    cell.miou, cell.pq, cell.box_map, cell.mask_map
                ));
            }
            outp.push('\n');
        }
        outp
    }
}

fn run_sweep(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    scenes: &[Scene],
    alphas: &[f64],
    betas: &[f64],
) -> anyhow::Result<SweepResult> {
    let mut cells = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut row = Vec::with_capacity(betas.len());
        for &beta in betas {
            let opts = EvalOptions {
                ensemble: EnsembleParams::new(alpha, beta)?,
                use_out_classifier: alpha > 0.0 || beta > 0.0,
                seen_only: false,
                assembly: EvalOptions::from_config(cfg)?.assembly,
            };
            let report: EvalReport = evaluate(store, cfg, vocab, scenes, &opts)?;
            row.push(SweepCell {
                alpha,
                beta,
                miou: report.miou,
                pq: report.pq,
                box_map: report.map_box,
                mask_map: report.map_mask,
            });
        }
        cells.push(row);
    }
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Task-output serialization
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CocoResult {
    image_id: u64,
    category_id: u32,
    score: f64,
    /// Pixel-space [x, y, w, h].
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    segmentation: Option<Rle>,
}

#[derive(Serialize)]
struct Rle {
    /// [height, width]
    size: [usize; 2],
    /// Column-major run lengths, starting with a run of zeros.
    counts: Vec<usize>,
}

fn mask_to_rle(mask: &[bool], h: usize, w: usize) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = mask[y * w + x];
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    Rle { size: [h, w], counts }
}

fn save_gray16(path: &Path, data: &[u32], h: usize, w: usize) -> anyhow::Result<()> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = data[y * w + x].min(u16::MAX as u32) as u16;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn write_task_outputs(dir: &Path, index: usize, outputs: &TaskOutputs) -> anyhow::Result<()> {
    let stem = format!("scene_{index:04}");
    let (h, w) = (outputs.height, outputs.width);
    save_gray16(&dir.join(format!("{stem}_panoptic.png")), &outputs.panoptic, h, w)?;
    save_gray16(&dir.join(format!("{stem}_semantic.png")), &outputs.semantic, h, w)?;
    #[derive(Serialize)]
    struct SegmentRow {
        id: u32,
        category_id: u32,
        isthing: bool,
    }
    let table: Vec<SegmentRow> = outputs
        .panoptic_table
        .iter()
        .map(|s| SegmentRow {
            id: s.id,
            category_id: s.category,
            isthing: s.isthing,
        })
        .collect();
    std::fs::write(
        dir.join(format!("{stem}_segments.json")),
        serde_json::to_string_pretty(&table)?,
    )?;
    Ok(())
}

fn collect_coco_results(
    image_id: u64,
    outputs: &TaskOutputs,
    detections: &mut Vec<CocoResult>,
    instances: &mut Vec<CocoResult>,
) {
    let (h, w) = (outputs.height as f64, outputs.width as f64);
    for det in &outputs.detections {
        let bw = det.bbox[2] * w;
        let bh = det.bbox[3] * h;
        detections.push(CocoResult {
            image_id,
            category_id: det.category,
            score: det.score,
            bbox: [det.bbox[0] * w - bw / 2.0, det.bbox[1] * h - bh / 2.0, bw, bh],
            segmentation: None,
        });
    }
    for inst in &outputs.instances {
        let xs: Vec<usize> = (0..outputs.width)
            .filter(|&x| (0..outputs.height).any(|y| inst.mask[y * outputs.width + x]))
            .collect();
        let ys: Vec<usize> = (0..outputs.height)
            .filter(|&y| (0..outputs.width).any(|x| inst.mask[y * outputs.width + x]))
            .collect();
        let bbox = match (xs.first(), xs.last(), ys.first(), ys.last()) {
            (Some(&x0), Some(&x1), Some(&y0), Some(&y1)) => {
                [x0 as f64, y0 as f64, (x1 + 1 - x0) as f64, (y1 + 1 - y0) as f64]
            }
            _ => [0.0, 0.0, 0.0, 0.0],
        };
        instances.push(CocoResult {
            image_id,
            category_id: inst.category,
            score: inst.score,
            bbox,
            segmentation: Some(mask_to_rle(&inst.mask, outputs.height, outputs.width)),
        });
    }
}
