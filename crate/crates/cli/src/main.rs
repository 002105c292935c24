use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sbsr_core::backbone::{open_backbone, Backbone};
use sbsr_core::dataset::{
    apply_split, load_manifest, make_split_with, CameraRig, DatasetManifest, Projection, SplitOptions,
    SplitProtocol, SplitSpec,
};
use sbsr_core::encoders::{open_captioner, open_clip, Captioner, ClipEncoder};
use sbsr_core::eval::{
    build_index, compute_metrics, emit_report, evaluate, read_rankings, thumbnail_for, zero_shot_sets, EvalOptions,
    ReportOptions,
};
use sbsr_core::pipeline::{caption_all, render_all, select_all};
use sbsr_core::synthetic::{self, SynthConfig};
use sbsr_core::train::{fit, Checkpoint, TrainConfig};
use sbsr_core::ModelDims;
use sbsr_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "sbsr", version, about = "Zero-shot sketch-based 3D shape retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan `<root>/<dataset>/{sketches,shapes}` into a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render candidate views of every shape.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        views: usize,
        #[arg(long, default_value_t = 20.0)]
        elevation: f64,
        #[arg(long, default_value_t = 224)]
        size: u32,
        #[arg(long, default_value_t = false)]
        orthographic: bool,
    },
    /// Keep the top-k candidate views per shape.
    SelectViews {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = sbsr_core::select::DEFAULT_TOP_K)]
        k: usize,
        #[arg(long, default_value = "full")]
        profile: String,
        #[arg(long, default_value_t = 224)]
        size: u32,
        #[arg(long, default_value = "mock")]
        clip: String,
    },
    /// Caption selected views and sketches.
    Caption {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: u32,
        #[arg(long, default_value = "stub")]
        captioner: String,
    },
    /// Partition categories into seen and unseen; unseen sketches become queries.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "split2")]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        /// Split-II threshold: categories with at most this many shapes are unseen.
        #[arg(long, default_value_t = 5)]
        max_shapes: usize,
        /// Split-I seen-category count for non-official manifests.
        #[arg(long)]
        seen: Option<usize>,
    },
    /// Train adapters and prompts with the frozen backbone.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// TOML training config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        image_size: Option<u32>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        classes_per_batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed gallery shapes into an index file.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the gallery to unseen categories of this split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Zero-shot evaluation: unseen sketches against unseen shapes.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        montage_k: usize,
    },
    /// Recompute a report, heatmap, and montage from saved rankings.
    Report {
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Manifest used to resolve thumbnails for the montage.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        heatmap: bool,
        #[arg(long)]
        montage: Option<usize>,
    },
    /// Serve retrieval over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the procedural six-category corpus, rendered, selected, captioned, and split.
    Synth {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
}

fn dims(profile: &str) -> Result<ModelDims> {
    ModelDims::by_name(profile).with_context(|| format!("unknown profile {profile:?} (full|desk)"))
}

struct Runtime {
    backbone: Box<dyn Backbone>,
    clip: Box<dyn ClipEncoder>,
    captioner: Box<dyn Captioner>,
}

fn runtime(cfg: &TrainConfig) -> Result<Runtime> {
    let d = cfg.model.dims()?;
    Ok(Runtime {
        backbone: open_backbone(&cfg.backbone, d.clone())?,
        clip: open_clip(&cfg.clip, d.vision_dim, d.patch_grid)?,
        captioner: open_captioner(&cfg.captioner)?,
    })
}

fn update_manifest(path: &Path, f: impl FnOnce(&mut DatasetManifest) -> Result<()>) -> Result<()> {
    let mut m = DatasetManifest::load(path)?;
    f(&mut m)?;
    m.save(path)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { root, dataset, out } => {
            let m = load_manifest(&root, dataset.parse()?)?;
            m.save(&out)?;
            println!("{} sketches, {} shapes, {} categories", m.sketches.len(), m.shapes.len(), m.categories.len());
        }
        Command::Render {
            manifest,
            out,
            views,
            elevation,
            size,
            orthographic,
        } => {
            let projection = if orthographic { Projection::Orthographic } else { Projection::Perspective };
            let rig = CameraRig::ring(views, elevation, size, projection);
            update_manifest(&manifest, |m| {
                let n = render_all(m, &rig, &out)?;
                println!("rendered {n} views");
                Ok(())
            })?;
        }
        Command::SelectViews {
            manifest,
            k,
            profile,
            size,
            clip,
        } => {
            let d = dims(&profile)?;
            let clip = open_clip(&clip, d.vision_dim, d.patch_grid)?;
            update_manifest(&manifest, |m| {
                let sel = select_all(m, clip.as_ref(), k, size)?;
                println!("selected views for {} shapes", sel.len());
                Ok(())
            })?;
        }
        Command::Caption { manifest, size, captioner } => {
            let captioner = open_captioner(&captioner)?;
            update_manifest(&manifest, |m| Ok(caption_all(m, captioner.as_ref(), size)?))?;
        }
        Command::Split {
            manifest,
            protocol,
            out,
            max_shapes,
            seen,
        } => {
            let protocol: SplitProtocol = protocol.parse()?;
            let opts = SplitOptions {
                split1_seen: seen,
                split2_max_shapes: max_shapes,
            };
            update_manifest(&manifest, |m| {
                let split = make_split_with(m, protocol, &opts)?;
                let changed = apply_split(m, &split);
                split.save(&out)?;
                println!(
                    "{protocol}: {} seen, {} unseen categories; {changed} sketches moved to test",
                    split.seen_categories.len(),
                    split.unseen_categories.len()
                );
                Ok(())
            })?;
        }
        Command::Train {
            manifest,
            split,
            config,
            profile,
            image_size,
            steps,
            lr,
            batch,
            classes_per_batch,
            seed,
            run_dir,
            name,
            resume,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = profile {
                cfg.model.profile = v;
            }
            if let Some(v) = image_size {
                cfg.model.image_size = v;
            }
            if steps.is_some() {
                cfg.max_steps = steps;
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = batch {
                cfg.batch_size = v;
            }
            if let Some(v) = classes_per_batch {
                cfg.classes_per_batch = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = run_dir {
                cfg.run_dir = v;
            }
            if let Some(v) = name {
                cfg.name = v;
            }
            let m = DatasetManifest::load(&manifest)?;
            let s = SplitSpec::load(&split)?;
            let rt = runtime(&cfg)?;
            let out = fit(&m, &s, &cfg, rt.backbone.as_ref(), rt.clip.as_ref(), rt.captioner.as_ref(), resume.as_deref())?;
            if out.backbone_checksum_before != out.backbone_checksum_after {
                bail!("backbone weights changed during training");
            }
            if let (Some(a), Some(b)) = (out.trace.first(), out.trace.last()) {
                println!("loss {:.4} -> {:.4} over {} steps", a.total, b.total, out.trace.len());
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Embed {
            ckpt,
            manifest,
            out,
            split,
            cache,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let m = DatasetManifest::load(&manifest)?;
            let shapes: Vec<usize> = match split {
                Some(p) => zero_shot_sets(&m, &SplitSpec::load(&p)?).0,
                None => (0..m.shapes.len()).collect(),
            };
            let rt = runtime(&ck.meta.config)?;
            let opts = EvalOptions {
                chunk: 8,
                cache_dir: cache,
                ..Default::default()
            };
            let (index, meta) = build_index(&ck, &m, &shapes, rt.backbone.as_ref(), rt.clip.as_ref(), rt.captioner.as_ref(), &opts)?;
            index.to_set().save(&out, meta)?;
            println!("indexed {} shapes into {}", index.len(), out.display());
        }
        Command::Evaluate {
            ckpt,
            manifest,
            split,
            report,
            cache,
            montage_k,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let m = DatasetManifest::load(&manifest)?;
            let s = SplitSpec::load(&split)?;
            let rt = runtime(&ck.meta.config)?;
            let opts = EvalOptions {
                chunk: 8,
                cache_dir: cache,
                report_dir: Some(report.clone()),
                report: ReportOptions {
                    montage_k: Some(montage_k),
                    ..Default::default()
                },
            };
            let ev = evaluate(&ck, &m, &s, rt.backbone.as_ref(), rt.clip.as_ref(), rt.captioner.as_ref(), &opts)?;
            let r = &ev.report;
            println!(
                "NN {:.3} FT {:.3} ST {:.3} E {:.3} DCG {:.3} MRR {:.3} mAP {:.3} ({} queries)",
                r.nn, r.ft, r.st, r.e, r.dcg, r.mrr, r.map, r.query_count
            );
            println!("report {}", report.join("report.json").display());
        }
        Command::Report {
            rankings,
            out,
            manifest,
            heatmap,
            montage,
        } => {
            let (lists, labels) = read_rankings(&rankings)?;
            let report = compute_metrics(&lists, &labels)?;
            let m = manifest.map(|p| DatasetManifest::load(&p)).transpose()?;
            let lookup = |id: &str| m.as_ref().and_then(|m| thumbnail_for(m, id));
            let opts = ReportOptions {
                heatmap,
                montage_k: montage,
                ..Default::default()
            };
            let files = emit_report(&out, &report, &lists, &labels, &opts, &lookup)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("report {}", files.report.display());
        }
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(&config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(sbsr_service::serve(cfg))?;
        }
        Command::Synth { root, seed, size } => {
            let cfg = SynthConfig {
                seed,
                image_size: size,
                ..Default::default()
            };
            let d = ModelDims::desk();
            let clip = open_clip("mock", d.vision_dim, d.patch_grid)?;
            let captioner = open_captioner("stub")?;
            let (m, split) = synthetic::build(&root, &cfg, clip.as_ref(), captioner.as_ref(), 3)?;
            let base = root.join(synthetic::DATASET_DIR);
            println!(
                "{} shapes, {} sketches; unseen {:?}",
                m.shapes.len(),
                m.sketches.len(),
                split.unseen_categories
            );
            println!("manifest {}", base.join("manifest.jsonl").display());
            println!("split {}", base.join("split.json").display());
        }
    }
    Ok(())
}
