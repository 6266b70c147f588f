//! Command-line pipeline: synthetic data generation, structural-branch
//! pretraining, detector training, evaluation, inference, saliency export,
//! and the four-way ablation sweep.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use carident::autograd::AdamW;
use carident::data::{gen_synthetic, load_coco, SyntheticSpec};
use carident::detector::{
    ablation_table, evaluate_model, load_model, loss_csv, pretrain_spb, run_ablation, save_model,
    AblationFlags, Model, ModelConfig, ModelMeta, TrainConfig,
};
use carident::imgproc::{GrayMap, RgbImage};
use carident::ldlr::{FocalConfig, SensitivityConfig};
use carident::spb::{PretrainConfig, PretrainCorpus};

#[derive(Parser)]
#[command(name = "carident", version, about = "Structure-aware caries detector pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Serialize)]
struct TrainArgs {
    /// Dataset root (expects train/, val/, test/, pretrain/ subdirectories)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, CSVs, and the run manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 18)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Number of queries selected from the score map
    #[arg(long, default_value_t = 12)]
    topk: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_init: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_cls: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_bbox: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_iou: f64,
    #[arg(long, default_value_t = 0.25)]
    focal_alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    focal_gamma: f64,
    #[arg(long, default_value_t = 0.3)]
    score_thr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initialize queries from the semantic map only (ablation)
    #[arg(long, default_value_t = false)]
    no_tsqi: bool,
    /// Disable dynamic loss weighting (ablation)
    #[arg(long, default_value_t = false)]
    no_ldlr: bool,
    /// Keep the structural branch frozen during detector training
    #[arg(long, default_value_t = false)]
    freeze_spb: bool,
    /// Disable horizontal-flip augmentation
    #[arg(long, default_value_t = false)]
    no_flip: bool,
    /// Warm-start from a pretraining checkpoint (loads every stored tensor)
    #[arg(long)]
    spb_ckpt: Option<PathBuf>,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            topk: self.topk,
            lambda_init: self.lambda_init,
            sens: SensitivityConfig {
                eta_cls: self.eta_cls,
                eta_bbox: self.eta_bbox,
                eta_iou: self.eta_iou,
            },
            focal: FocalConfig {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
            },
            score_thr: self.score_thr,
            seed: self.seed,
            flags: AblationFlags {
                no_tsqi: self.no_tsqi,
                no_ldlr: self.no_ldlr,
                freeze_spb: self.freeze_spb,
            },
            flip: !self.no_flip,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train/val/test/pretrain splits)
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        train_count: usize,
        #[arg(long, default_value_t = 60)]
        val_count: usize,
        #[arg(long, default_value_t = 60)]
        test_count: usize,
        #[arg(long, default_value_t = 220)]
        pretrain_count: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Pretrain the structural branch on the unlabeled pretrain split
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the detector on the train split
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference on a single image
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        score_thr: Option<f64>,
        /// Also write an overlay PNG with the predicted boxes
        #[arg(long, default_value_t = false)]
        overlay: bool,
    },
    /// Export the structural saliency and hybrid score maps for an image
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the 2x2 mechanism ablation over several seeds
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Number of seeds (seed, seed+1, ...)
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 20)]
        pretrain_epochs: usize,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    version: String,
    started_unix: u64,
    finished_unix: Option<u64>,
    duration_secs: Option<f64>,
    outputs: Vec<String>,
    status: String,
}

impl RunManifest {
    fn start(command: &str, config: serde_json::Value, seed: u64, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            duration_secs: None,
            outputs: Vec::new(),
            status: "running".to_string(),
        };
        manifest.write(out_dir)?;
        Ok(manifest)
    }

    fn finish(mut self, out_dir: &Path, started: Instant, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished_unix = Some(unix_now());
        self.duration_secs = Some(started.elapsed().as_secs_f64());
        self.outputs = outputs
            .into_iter()
            .map(|p| p.display().to_string())
            .collect();
        self.status = "complete".to_string();
        self.write(out_dir)
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::write(
            out_dir.join("manifest.json"),
            serde_json::to_vec_pretty(self)?,
        )?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::GenData {
            out,
            seed,
            train_count,
            val_count,
            test_count,
            pretrain_count,
            image_size,
        } => {
            let spec = SyntheticSpec {
                image_size,
                train: train_count,
                val: val_count,
                test: test_count,
                pretrain: pretrain_count,
                seed,
                ..SyntheticSpec::default()
            };
            let manifest =
                RunManifest::start("gen-data", serde_json::to_value(&spec)?, seed, &out)?;
            let summary = gen_synthetic(&spec, &out)?;
            let outputs = summary.splits.iter().map(|s| s.dir.clone()).collect();
            for split in &summary.splits {
                println!(
                    "{}: {} images, {} annotations -> {}",
                    split.name,
                    split.images,
                    split.annotations,
                    split.dir.display()
                );
            }
            manifest.finish(&out, started, outputs)?;
        }
        Command::Pretrain {
            data,
            out,
            epochs,
            batch,
            lr,
            weight_decay,
            seed,
        } => {
            let config = serde_json::json!({
                "data": data, "epochs": epochs, "batch": batch,
                "lr": lr, "weight_decay": weight_decay, "seed": seed,
            });
            let manifest = RunManifest::start("pretrain", config, seed, &out)?;
            let corpus = PretrainCorpus::from_split_dir(&data.join("pretrain"), seed)?;
            let train_ds = load_coco(&data.join("train")).ok();
            let num_classes = train_ds.map(|d| d.class_names.len()).unwrap_or(3);
            let mut model = Model::new(ModelConfig {
                seed,
                ..ModelConfig::toy(num_classes, seed)
            })?;
            let cfg = PretrainConfig {
                epochs,
                batch,
                lr,
                weight_decay,
                flip: true,
            };
            let outcome = pretrain_spb(&mut model, &corpus, &cfg)?;
            println!(
                "pretraining: initial L1 {:.5} -> final {:.5} over {} epochs ({} skipped images)",
                outcome.initial_loss, outcome.final_loss, epochs, outcome.skipped_images
            );
            let mut csv = String::from("epoch,mean_l1\n");
            for (epoch, loss) in &outcome.loss_trace {
                csv.push_str(&format!("{epoch},{loss}\n"));
            }
            let csv_path = out.join("pretrain_loss.csv");
            std::fs::write(&csv_path, csv)?;
            let ckpt = out.join("spb.ckpt");
            let meta = ModelMeta {
                model: model.cfg.clone(),
                train: TrainConfig {
                    seed,
                    ..TrainConfig::default()
                },
                class_names: class_names_or_default(&data),
            };
            save_model(&ckpt, &model, &meta, &AdamW::new(lr, weight_decay))?;
            manifest.finish(&out, started, vec![ckpt, csv_path])?;
        }
        Command::Train(args) => {
            let cfg = args.train_config();
            let manifest =
                RunManifest::start("train", serde_json::to_value(&args)?, args.seed, &args.out)?;
            let dataset = load_coco(&args.data.join("train"))?;
            let max_gts = dataset.max_objects_per_image();
            if cfg.topk < max_gts {
                bail!(
                    "validation: --topk {} is below the dataset maximum of {max_gts} objects per image",
                    cfg.topk
                );
            }
            let mut model = Model::new(ModelConfig {
                seed: args.seed,
                ..ModelConfig::toy(dataset.class_names.len(), args.seed)
            })?;
            if let Some(spb_ckpt) = &args.spb_ckpt {
                let ck = carident::autograd::Checkpoint::read(spb_ckpt)?;
                ck.apply(&mut model.params, false)?;
                println!("warm-started from {}", spb_ckpt.display());
            }
            let outcome = carident::detector::train_detector(&mut model, &dataset, &cfg)?;
            let csv_path = args.out.join("loss.csv");
            std::fs::write(&csv_path, loss_csv(&outcome.records))?;
            let ckpt = args.out.join("model.ckpt");
            let meta = ModelMeta {
                model: model.cfg.clone(),
                train: cfg.clone(),
                class_names: dataset.class_names.clone(),
            };
            save_model(&ckpt, &model, &meta, &AdamW::new(cfg.lr, cfg.weight_decay))?;
            if let Some(last) = outcome.records.last() {
                println!(
                    "trained {} iterations; final loss {:.5}",
                    outcome.records.len(),
                    last.breakdown.total
                );
            }
            manifest.finish(&args.out, started, vec![ckpt, csv_path])?;
        }
        Command::Eval {
            data,
            ckpt,
            split,
            out,
        } => {
            let config = serde_json::json!({"data": data, "ckpt": ckpt, "split": split});
            let (model, meta) = load_model(&ckpt)?;
            let manifest = RunManifest::start("eval", config, meta.train.seed, &out)?;
            let dataset = load_coco(&data.join(&split))?;
            if dataset.class_names != meta.class_names {
                bail!(
                    "class list mismatch: dataset {:?} vs checkpoint {:?}",
                    dataset.class_names,
                    meta.class_names
                );
            }
            let result = evaluate_model(&model, &dataset, meta.train.topk, &meta.train.flags)?;
            print!("{}", result.table());
            let report = out.join("eval_report.json");
            std::fs::write(&report, serde_json::to_vec_pretty(&result.report_json())?)?;
            manifest.finish(&out, started, vec![report])?;
        }
        Command::Infer {
            ckpt,
            image,
            out,
            score_thr,
            overlay,
        } => {
            let (model, meta) = load_model(&ckpt)?;
            let thr = score_thr.unwrap_or(meta.train.score_thr);
            let config = serde_json::json!({"ckpt": ckpt, "image": image, "score_thr": thr});
            let manifest = RunManifest::start("infer", config, meta.train.seed, &out)?;
            let rgb = RgbImage::load_png(&image)?;
            let dets = model.infer(&rgb, meta.train.topk, &meta.train.flags, thr)?;
            let mut jsonl = String::new();
            for d in &dets {
                jsonl.push_str(&serde_json::to_string(&serde_json::json!({
                    "image_id": 0,
                    "class": d.class,
                    "cx": d.bbox.cx,
                    "cy": d.bbox.cy,
                    "w": d.bbox.w,
                    "h": d.bbox.h,
                    "score": d.score,
                }))?);
                jsonl.push('\n');
            }
            let dets_path = out.join("detections.jsonl");
            std::fs::write(&dets_path, jsonl)?;
            println!("{} detections at threshold {thr}", dets.len());
            let mut outputs = vec![dets_path];
            if overlay {
                let overlay_path = out.join("overlay.png");
                draw_overlay(&rgb, &dets)?.save_png(&overlay_path)?;
                outputs.push(overlay_path);
            }
            manifest.finish(&out, started, outputs)?;
        }
        Command::Saliency { ckpt, image, out } => {
            let (model, meta) = load_model(&ckpt)?;
            let config = serde_json::json!({"ckpt": ckpt, "image": image});
            let manifest = RunManifest::start("saliency", config, meta.train.seed, &out)?;
            let rgb = RgbImage::load_png(&image)?;
            let tensor = model.image_to_tensor(&rgb)?;
            let mut tape = carident::autograd::Tape::no_grad();
            let fwd = model.forward(
                &mut tape,
                &tensor,
                meta.train.topk,
                &AblationFlags::default(),
                false,
            )?;
            let mut outputs = Vec::new();
            if let Some(sal) = &fwd.saliency_map {
                let (h, w) = (sal.shape()[0], sal.shape()[1]);
                let map = GrayMap::new(h, w, sal.data().to_vec())?;
                let path = out.join("saliency.png");
                map.save_png(&path)?;
                outputs.push(path);
            }
            if let Some(hybrid) = &fwd.hybrid_map {
                // min-max scaled for display only
                let lo = hybrid.data().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = hybrid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let scaled: Vec<f64> = hybrid
                    .data()
                    .iter()
                    .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                    .collect();
                let map = GrayMap::new(hybrid.shape()[0], hybrid.shape()[1], scaled)?;
                let path = out.join("hybrid.png");
                map.save_png(&path)?;
                outputs.push(path);
            }
            println!("wrote {} map(s) to {}", outputs.len(), out.display());
            manifest.finish(&out, started, outputs)?;
        }
        Command::Ablate {
            train,
            seeds,
            pretrain_epochs,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let cfg = train.train_config();
            let config = serde_json::json!({
                "train": serde_json::to_value(&train)?,
                "seeds": seeds,
                "pretrain_epochs": pretrain_epochs,
            });
            let manifest = RunManifest::start("ablate", config, train.seed, &train.out)?;
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| train.seed + i).collect();
            let pretrain_cfg = PretrainConfig {
                epochs: pretrain_epochs,
                ..PretrainConfig::default()
            };
            let rows = run_ablation(&train.data, &cfg, &pretrain_cfg, &seed_list, |msg| {
                eprintln!("[ablate] {msg}");
            })?;
            print!("{}", ablation_table(&rows));
            let report = train.out.join("ablation.json");
            std::fs::write(&report, serde_json::to_vec_pretty(&rows)?)?;
            manifest.finish(&train.out, started, vec![report])?;
        }
    }
    Ok(())
}

fn class_names_or_default(data_root: &Path) -> Vec<String> {
    load_coco(&data_root.join("train"))
        .map(|d| d.class_names)
        .unwrap_or_else(|_| {
            carident::data::CLASS_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect()
        })
}

/// Box outlines on a copy of the image, one color per class.
fn draw_overlay(
    img: &RgbImage,
    dets: &[carident::detector::Detection],
) -> Result<RgbImage> {
    const COLORS: [[u8; 3]; 3] = [[255, 64, 64], [64, 255, 64], [64, 128, 255]];
    let (h, w) = (img.height, img.width);
    let mut data = img.data().to_vec();
    let mut put = |y: usize, x: usize, color: [u8; 3]| {
        let i = 3 * (y * w + x);
        data[i..i + 3].copy_from_slice(&color);
    };
    for d in dets {
        let color = COLORS[d.class % COLORS.len()];
        let c = d.bbox.to_xyxy();
        let x1 = ((c[0] * w as f64).round().max(0.0) as usize).min(w - 1);
        let x2 = ((c[2] * w as f64).round().max(0.0) as usize).min(w - 1);
        let y1 = ((c[1] * h as f64).round().max(0.0) as usize).min(h - 1);
        let y2 = ((c[3] * h as f64).round().max(0.0) as usize).min(h - 1);
        for x in x1..=x2 {
            put(y1, x, color);
            put(y2, x, color);
        }
        for y in y1..=y2 {
            put(y, x1, color);
            put(y, x2, color);
        }
    }
    Ok(RgbImage::new(h, w, data)?)
}
