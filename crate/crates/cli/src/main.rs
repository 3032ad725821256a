//! `mixsup`: data generation, training ladders, ablations and figures.

mod config;
mod render;
mod runs;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mixsup::data::{load_dataset, make_synthetic, save_dataset};
use mixsup::metrics::{evaluate, Branch};
use mixsup::model::load_checkpoint;
use mixsup::trainer::{ablation_csv, summary_csv, ModelKind};

use config::ExperimentConfig;
use runs::{Job, LadderRow, Workspace};

#[derive(Parser)]
#[command(name = "mixsup", version, about = "Mixed-supervision segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images/, masks/, manifest.txt).
    GenData {
        /// Number of images.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Side length in pixels.
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(32..))]
        grid: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing dataset in `out`.
        #[arg(long)]
        force: bool,
    },
    /// Train one model kind over the configured seeds.
    Run {
        config: PathBuf,
        /// Overrides `train.model_kind`.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Train the baseline ladder on one split and tabulate both branches.
    Ladder { config: PathBuf },
    /// Sweep the distillation weight of the full method.
    AblateKd { config: PathBuf },
    /// Plot Shannon entropy and min-entropy of a two-class distribution.
    PlotEntropy {
        #[arg(long, default_value = "figures")]
        out: PathBuf,
        #[arg(long, default_value_t = 1001, value_parser = clap::value_parser!(u64).range(2..))]
        samples: u64,
    },
    /// Probability heatmaps and contour overlays for each branch.
    Overlay {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (with images/) or a directory of PNGs.
        #[arg(long)]
        images: PathBuf,
        /// Comma-separated image ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=32))]
        scale: u32,
    },
    /// Score a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            n,
            grid,
            seed,
            out,
            force,
        } => gen_data(n as usize, grid as usize, seed, &out, force),
        Command::Run { config, kind } => run(&config, kind.as_deref()),
        Command::Ladder { config } => ladder(&config),
        Command::AblateKd { config } => ablate_kd(&config),
        Command::PlotEntropy { out, samples } => plot_entropy(&out, samples as usize),
        Command::Overlay {
            checkpoint,
            images,
            ids,
            out,
            scale,
        } => overlay(&checkpoint, &images, &ids, &out, scale),
        Command::Eval { checkpoint, data, out } => eval(&checkpoint, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(n: usize, grid: usize, seed: u64, out: &Path, force: bool) -> Result<()> {
    let occupied = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if occupied {
        if !force {
            bail!("{} is not empty; pass --force to replace the dataset", out.display());
        }
        for dir in ["images", "masks"] {
            if out.join(dir).is_dir() {
                fs::remove_dir_all(out.join(dir))?;
            }
        }
    }
    let samples = make_synthetic::<f32>(n, grid, seed)?;
    save_dataset(&samples, out)?;
    let mut manifest = format!("n={n}\ngrid={grid}\nseed={seed}\n");
    for s in &samples {
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

/// Loads the experiment and records the resolved config in its output dir.
fn prepare(path: &Path) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::load(path)?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("experiment.toml"), config.to_toml())?;
    Ok(config)
}

fn run(path: &Path, kind: Option<&str>) -> Result<()> {
    let mut config = prepare(path)?;
    if let Some(k) = kind {
        config.train.model_kind = k.to_string();
        config.validate()?;
    }
    let train = config.train_config()?;
    let dataset = config.dataset()?;
    let ws = Workspace::new(&dataset, &config.output_dir)?;
    let summary = ws.run_job(&train, Job::Plain(train.model_kind))?;
    print!("{}", summary_csv(&[summary]));
    Ok(())
}

fn ladder(path: &Path) -> Result<()> {
    let config = prepare(path)?;
    let train = config.train_config()?;
    let dataset = config.dataset()?;
    let ws = Workspace::new(&dataset, &config.output_dir)?;
    let mut jobs = Vec::new();
    if config.ladder.include_upper {
        jobs.push(Job::Plain(ModelKind::Upper));
    }
    jobs.extend(
        [
            ModelKind::Lower,
            ModelKind::Single,
            ModelKind::Decoupled,
            ModelKind::Kl,
            ModelKind::KlEnt,
        ]
        .map(Job::Plain),
    );
    for base in &config.ladder.proposal_bases {
        jobs.push(Job::Proposals(ModelKind::parse(base)?));
    }
    let rows: Vec<LadderRow> = jobs
        .into_iter()
        .map(|job| {
            let result = ws.run_job(&train, job).map_err(|e| {
                log::error!("{} failed: {e:#}", job.label());
                format!("{e:#}")
            });
            LadderRow {
                setting: dataset.setting.label(),
                model: job.label(),
                result,
            }
        })
        .collect();
    let summaries: Vec<_> = rows.iter().filter_map(|r| r.result.as_ref().ok().cloned()).collect();
    fs::write(ws.root.join("ladder.csv"), runs::ladder_csv(&rows))?;
    fs::write(ws.root.join("summary.csv"), summary_csv(&summaries))?;
    let table = runs::ladder_table(&rows);
    fs::write(ws.root.join("ladder.txt"), &table)?;
    print!("{table}");
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        bail!("{failed} ladder row(s) failed; see ladder.csv");
    }
    Ok(())
}

fn ablate_kd(path: &Path) -> Result<()> {
    let config = prepare(path)?;
    if config.ablation.lambda_kd.is_empty() {
        bail!("ablation.lambda_kd is empty");
    }
    let base = config.train_config()?.with_kind(ModelKind::KlEnt);
    let dataset = config.dataset()?;
    let ws = Workspace::new(&dataset, &config.output_dir)?;
    let mut rows = Vec::new();
    for &kd in &config.ablation.lambda_kd {
        let mut c = base.clone();
        c.weights.lambda_kd = kd;
        // Each weight gets its own run directories.
        let sub = Workspace {
            dataset: &dataset,
            root: ws.root.join(format!("lambda_kd_{kd}")),
        };
        rows.push((kd, sub.run_job(&c, Job::Plain(ModelKind::KlEnt))?));
    }
    let csv = ablation_csv(&rows);
    fs::write(ws.root.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn plot_entropy(out: &Path, samples: usize) -> Result<()> {
    let curves = render::entropy_curves(samples);
    fs::create_dir_all(out)?;
    fs::write(out.join("entropy.csv"), render::entropy_csv(&curves))?;
    fs::write(out.join("entropy.svg"), render::entropy_svg(&curves))?;
    println!("wrote {}", out.join("entropy.svg").display());
    Ok(())
}

fn branches(dual: bool) -> Vec<Branch> {
    if dual {
        vec![Branch::Top, Branch::Bottom]
    } else {
        vec![Branch::Top]
    }
}

fn overlay(checkpoint: &Path, images: &Path, ids: &[String], out: &Path, scale: u32) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .model;
    let dir = if images.join("images").is_dir() {
        images.join("images")
    } else {
        images.to_path_buf()
    };
    fs::create_dir_all(out)?;
    let mut stats = format!("{}\n", render::OVERLAY_CSV_HEADER);
    let mut unknown = Vec::new();
    for id in ids {
        let path = dir.join(format!("{id}.png"));
        if !path.is_file() {
            unknown.push(id.as_str());
            continue;
        }
        let gray = image::open(&path)
            .with_context(|| format!("reading {}", path.display()))?
            .into_luma8();
        let grid = render::gray_to_grid(&gray)?;
        for branch in branches(model.is_dual()) {
            let maps = render::branch_maps(&model, branch, &grid, scale)?;
            let b = branch.name();
            maps.heatmap.save(out.join(format!("{id}_{b}_heatmap.png")))?;
            maps.overlay.save(out.join(format!("{id}_{b}_overlay.png")))?;
            let [mean, lo, hi, ent] = maps.stats;
            stats.push_str(&format!("{id},{b},{mean:.6},{lo:.6},{hi:.6},{ent:.6}\n"));
        }
    }
    fs::write(out.join("overlay_stats.csv"), stats)?;
    if !unknown.is_empty() {
        bail!("unknown image ids in {}: {}", dir.display(), unknown.join(", "));
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .model;
    let samples = load_dataset::<f32>(data, model.config().num_classes)?;
    if samples.is_empty() {
        bail!("no labeled samples under {}", data.display());
    }
    fs::create_dir_all(out)?;
    for branch in branches(model.is_dual()) {
        let e = evaluate(&model, branch, &samples)?;
        fs::write(out.join(format!("metrics_{}.csv", branch.name())), e.to_csv())?;
        println!("{}: dsc {:.2} hd95 {:.2}", branch.name(), e.mean_dsc, e.mean_hd95);
    }
    Ok(())
}
