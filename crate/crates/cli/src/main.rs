//! `agsp` — one binary exposing every pipeline stage: synthetic data,
//! dataset statistics, training, evaluation, an augmentation round-trip
//! demo, and a sampler audit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, bail};
use clap::{Parser, Subcommand};
use ndarray::Array3;

use agsp_core::datamodel::{Dataset, Stats, generate_synthetic, load_taxonomy, scan_index};
use agsp_core::model::checkpoint;
use agsp_core::sampler::{ConfidenceTracker, SamplerState};
use agsp_core::trainer::{self, TrainConfig};
use agsp_core::{AugRecord, Error, augment};

#[derive(Parser)]
#[command(
    name = "agsp",
    version,
    about = "Desk-scale semantic-segmentation training toolkit",
    after_help = "Set AGSP_LOG=error|info|debug to control verbosity."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset with controlled class frequencies.
    Synth {
        /// Output dataset directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Square image side in pixels (multiple of 4).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Comma-separated target pixel frequencies per class, summing to 1;
        /// the first entry is the background class.
        #[arg(long, value_delimiter = ',', required = true)]
        freqs: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Scan a dataset and write its class statistics file.
    Stats {
        /// Dataset root directory.
        root: PathBuf,
        /// Where to write the statistics (default: <root>/stats.json).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        /// JSON config file with training hyperparameters.
        #[arg(long)]
        config: PathBuf,
        /// Training dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, metrics log, and eval snapshots.
        #[arg(long)]
        out: PathBuf,
        /// Evaluation dataset root for periodic and final scoring.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Continue the run already stored in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint against a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Write the JSON report here as well as printing the summary.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Count classes that never appear as zeros instead of skipping them.
        #[arg(long)]
        strict_mean: bool,
    },
    /// Apply a seeded augmentation to one image, undo its geometric part, and
    /// report whether the round trip is bit-exact.
    AugmentDemo {
        /// Input RGB PNG.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for original/augmented/inverted PNGs and the record.
        #[arg(long)]
        out: PathBuf,
        /// Per-transform application probability.
        #[arg(long, default_value_t = 0.5)]
        p_apply: f64,
        /// Photometric jitter strength.
        #[arg(long, default_value_t = 0.1)]
        sigma_p: f64,
    },
    /// Print the adaptive sampler's scores and probabilities for a stats
    /// file, plus empirical draw frequencies.
    SamplerAudit {
        /// Dataset statistics file (from `agsp stats`).
        #[arg(long)]
        stats: PathBuf,
        /// Comma-separated per-class confidence override (default: all 1.0).
        #[arg(long, value_delimiter = ',')]
        conf: Option<Vec<f64>>,
        #[arg(long, default_value_t = 4.0)]
        gamma: f64,
        /// Probability floor added to every included class's score.
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
        /// Number of Monte-Carlo draws for the empirical check.
        #[arg(long, default_value_t = 100_000)]
        draws: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave the background class out of selection.
        #[arg(long)]
        exclude_background: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AGSP_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
        std::process::exit(if usage { 2 } else { 1 });
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth {
            out,
            n,
            size,
            freqs,
            seed,
        } => {
            let report = generate_synthetic(&out, n, size, &freqs, seed)?;
            println!(
                "wrote {} images of {size}x{size} px, {} classes, to {}",
                report.ids.len(),
                freqs.len(),
                out.display()
            );
            Ok(())
        }
        Command::Stats { root, out } => {
            let taxonomy = load_taxonomy(&root)?;
            let index = scan_index(&root, &taxonomy, 1)?;
            let stats = Stats::from_index(&index);
            let path = out.unwrap_or_else(|| root.join("stats.json"));
            stats.write(&path)?;
            println!(
                "scanned {} images, {} classes; statistics in {}",
                index.samples.len(),
                taxonomy.num_classes(),
                path.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            eval_data,
            resume,
        } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("cannot read config {}", config.display()))?;
            let cfg = TrainConfig::from_json(&text)?;
            let summary = trainer::fit(&cfg, &data, &out, eval_data.as_deref(), resume)?;
            match summary.final_miou {
                Some(miou) => println!(
                    "ran {} steps; final mIoU {:.4} (best {:.4}); artifacts in {}",
                    summary.steps_run,
                    miou,
                    summary.best_miou.unwrap_or(miou),
                    summary.out_dir.display()
                ),
                None => println!(
                    "ran {} steps; artifacts in {}",
                    summary.steps_run,
                    summary.out_dir.display()
                ),
            }
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            out,
            strict_mean,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = Dataset::load(&data, model.arch().stride())?;
            let report = trainer::evaluate(&model, &dataset, strict_mean)?;
            let body = serde_json::to_string_pretty(&report).expect("plain json");
            if let Some(path) = &out {
                std::fs::write(path, &body)
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            println!("mIoU {:.4} over {} images", report.miou, report.num_images);
            for (c, iou) in report.per_class_iou.iter().enumerate() {
                let name = dataset.taxonomy.name(c as u8).unwrap_or("?");
                match iou {
                    Some(v) => println!("  class {c} ({name}): IoU {v:.4}"),
                    None => println!("  class {c} ({name}): not present"),
                }
            }
            Ok(())
        }
        Command::AugmentDemo {
            image,
            seed,
            out,
            p_apply,
            sigma_p,
        } => augment_demo(&image, seed, &out, p_apply, sigma_p),
        Command::SamplerAudit {
            stats,
            conf,
            gamma,
            eps,
            draws,
            seed,
            exclude_background,
        } => sampler_audit(&stats, conf, gamma, eps, draws, seed, !exclude_background),
    }
}

fn read_rgb(path: &Path) -> anyhow::Result<Array3<f64>> {
    let img = image::open(path)
        .with_context(|| format!("cannot read image {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn write_rgb(path: &Path, x: &Array3<f64>) -> anyhow::Result<()> {
    let (c, h, w) = x.dim();
    anyhow::ensure!(c == 3, "expected 3 channels, got {c}");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (px_x, px_y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = x[[ch, px_y as usize, px_x as usize]];
            px.0[ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    img.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn augment_demo(
    image: &Path,
    seed: u64,
    out: &Path,
    p_apply: f64,
    sigma_p: f64,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))?;
    let x = read_rgb(image)?;
    let rec = AugRecord::from_seed(seed, p_apply, sigma_p)?;

    let geometric = augment::apply_geometric(&x, &rec.geometric)?;
    let mut augmented = geometric.clone();
    if let Some(p) = &rec.photometric {
        augmented = augment::apply_photometric(&augmented, p)?;
    }
    let inverted = augment::invert_geometric(&geometric, &rec.geometric)?;

    write_rgb(&out.join("original.png"), &x)?;
    write_rgb(&out.join("augmented.png"), &augmented)?;
    write_rgb(&out.join("inverted.png"), &inverted)?;
    let record_path = out.join("record.json");
    std::fs::write(
        &record_path,
        serde_json::to_string_pretty(&rec).expect("plain json"),
    )
    .with_context(|| format!("cannot write {}", record_path.display()))?;

    let exact = inverted == x;
    println!(
        "applied {} geometric op(s), photometric jitter: {}",
        rec.geometric.len(),
        if rec.photometric.is_some() { "yes" } else { "no" },
    );
    println!("round-trip: {}", if exact { "EXACT" } else { "MISMATCH" });
    if !exact {
        bail!("geometric round trip failed to reproduce the input bit for bit");
    }
    Ok(())
}

fn sampler_audit(
    stats_path: &Path,
    conf: Option<Vec<f64>>,
    gamma: f64,
    eps: f64,
    draws: u64,
    seed: u64,
    include_background: bool,
) -> anyhow::Result<()> {
    let stats = Stats::read(stats_path)?;
    let nc = stats.dist.len();
    let conf = conf.unwrap_or_else(|| vec![1.0; nc]);
    if conf.len() != nc {
        bail!(Error::Config(format!(
            "--conf lists {} values but the stats file has {nc} classes",
            conf.len()
        )));
    }

    // The stats file stores member image ids; give each unique id an index so
    // the sampler can draw over them.
    let mut ids = BTreeMap::new();
    for members in &stats.per_class_members {
        for id in members {
            let next = ids.len();
            ids.entry(id.clone()).or_insert(next);
        }
    }
    let members: Vec<Vec<usize>> = stats
        .per_class_members
        .iter()
        .map(|m| m.iter().map(|id| ids[id]).collect())
        .collect();

    let mut state = SamplerState::new(
        stats.dist.clone(),
        members,
        gamma,
        0.968,
        eps,
        include_background,
        seed,
    )?;
    *state.tracker_mut() = ConfidenceTracker::with_conf(conf.clone(), 0.968, 0)?;

    let raw: Vec<f64> = stats
        .dist
        .iter()
        .zip(&conf)
        .map(|(d, c)| (1.0 - d * c).powf(gamma))
        .collect();
    let scores = state.scores();
    let probabilities = state.class_probabilities()?;

    let mut counts = vec![0u64; nc];
    for _ in 0..draws {
        let (class, _) = state.sample()?;
        counts[class] += 1;
    }
    let empirical: Vec<f64> = counts
        .iter()
        .map(|k| *k as f64 / draws.max(1) as f64)
        .collect();
    let tv = probabilities
        .iter()
        .zip(&empirical)
        .map(|(p, e)| (p - e).abs())
        .sum::<f64>()
        / 2.0;

    let body = serde_json::json!({
        "dist": stats.dist,
        "conf": conf,
        "raw_scores": raw,
        "scores": scores,
        "probabilities": probabilities,
        "draws": draws,
        "empirical": empirical,
        "tv_distance": tv,
    });
    println!("{}", serde_json::to_string_pretty(&body).expect("plain json"));
    Ok(())
}
