use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hpformer::config::{load_run, run_training, save_run, RunConfig};
use hpformer::fuse_io::{
    attach_spectra, fill_nodata, load_raster, load_raster_bands, project_labels_3d_to_2d,
    save_raster, transfer_labels_2d_to_3d, GridSpec, GroundClassMap, PointCloud, RasterGrid,
    DEFAULT_NODATA,
};
use hpformer::metrics::{evaluate_2d, scores, ConfusionMatrix, Scores};
use hpformer::synth::{self, SynthVariant};
use hpformer::train::{infer_cloud, log_csv};
use hpformer::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hpformer",
    version,
    about = "Lidar/spectral point-cloud fusion and segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attach raster spectra (and optionally raster labels) to a point cloud.
    Fuse {
        #[arg(long)]
        cloud: PathBuf,
        /// Repeatable; a raster written as `<stem>_<band>.asc` files may be named by `<stem>.asc`.
        #[arg(long, required = true, num_args = 1..)]
        raster: Vec<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Label a cloud with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-class coloured PLY.
        #[arg(long)]
        color: Option<PathBuf>,
    },
    /// Render a labelled cloud into a 2D label raster (ground first, then non-ground).
    Project {
        #[arg(long)]
        pred_cloud: PathBuf,
        /// `x0,y0,cell,width,height`, or a raster file whose grid is reused.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        ground_map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth (clouds, or label rasters with --raster).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        raster: bool,
        /// Metrics CSV; defaults to `<pred>.metrics.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the penultimate-layer features of every point as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic labelled scene and a matching run configuration.
    Synth {
        #[arg(long)]
        variant: SynthVariant,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// A raster path, or the band files `<stem>_<i>.asc` it stands for.
fn load_raster_arg(path: &Path) -> Result<RasterGrid> {
    if path.exists() {
        return load_raster(path);
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let paths: Vec<PathBuf> = (0..)
        .map(|b| path.with_file_name(format!("{stem}_{b}.asc")))
        .take_while(|p| p.exists())
        .collect();
    if paths.is_empty() {
        return load_raster(path);
    }
    load_raster_bands(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())
}

fn cmd_fuse(cloud: &Path, rasters: &[PathBuf], labels: Option<&Path>, out: &Path) -> Result<()> {
    let mut c = PointCloud::load(cloud)?;
    println!("cloud: {} points, {} bands", c.len(), c.bands());
    for (j, path) in rasters.iter().enumerate() {
        let r = load_raster_arg(path)?;
        let first = c.bands();
        let attached = attach_spectra(&c, &r, "band_")?;
        c = attached.cloud;
        let filled = fill_nodata(&mut c, first, |v| r.is_nodata(v))?;
        println!(
            "raster {}: {} bands -> columns {}..{} ({} points on nodata, {} values filled with band means)",
            j + 1,
            r.bands,
            first,
            c.bands(),
            attached.nodata_points.len(),
            filled
        );
    }
    match labels {
        Some(p) => {
            c = transfer_labels_2d_to_3d(&c, &load_raster(p)?)?;
            let ignored = c
                .labels
                .as_ref()
                .map_or(0, |l| l.iter().filter(|&&v| v == c.ignore_label).count());
            println!(
                "labels: transferred ({ignored} points on nodata pixels set to {})",
                c.ignore_label
            );
        }
        None => eprintln!("warning: no label raster given; output cloud is unlabelled"),
    }
    c.save(out)?;
    println!(
        "wrote {} ({} points, {} bands)",
        out.display(),
        c.len(),
        c.bands()
    );
    Ok(())
}

fn labelled(c: PointCloud, what: &Path) -> Result<PointCloud> {
    if c.labels.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{} has no labels",
            what.display()
        )));
    }
    Ok(c)
}

fn cloud_scores(pred: &PointCloud, gt: &PointCloud) -> Result<Scores> {
    let (p, t) = (pred.labels.as_ref().unwrap(), gt.labels.as_ref().unwrap());
    let c = p.iter().chain(t).copied().max().unwrap_or(0) as usize + 1;
    scores(&ConfusionMatrix::from_labels(
        p,
        t,
        c,
        Some(gt.ignore_label),
    )?)
}

fn cmd_train(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let paths = cfg.resolved(base);
    let cloud = labelled(PointCloud::load(&paths.data.cloud)?, &paths.data.cloud)?;
    let val = match &paths.data.val_cloud {
        Some(p) => Some(labelled(PointCloud::load(p)?, p)?),
        None => None,
    };
    mkdir(out_dir)?;
    let outcome = run_training(&cfg, &cloud, val.as_ref(), |r| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  train acc {:.4}  val miou {:.4}",
            r.epoch, r.loss, r.train_accuracy, r.val_miou
        )
    })?;
    let report = &outcome.report;
    let checkpoint = out_dir.join("model.hpf");
    save_run(&checkpoint, &cfg, &outcome.model, &outcome.norm)?;
    let log = out_dir.join("train_log.csv");
    write(&log, &log_csv(&cfg.to_toml(), &report.records))?;
    if let Some(epoch) = report.diverged {
        eprintln!(
            "warning: training diverged in epoch {epoch}; kept the best checkpoint before it"
        );
    }
    println!(
        "{} parameters, {} steps; best val mIoU {:.4} at epoch {}",
        outcome.model.num_parameters(),
        report.steps,
        report.best_val_miou,
        report.best_epoch
    );
    println!("wrote {} and {}", checkpoint.display(), log.display());
    if let Some(p) = &paths.eval.cloud {
        let held = labelled(PointCloud::load(p)?, p)?;
        let inf = infer_cloud(
            &outcome.model,
            &outcome.norm,
            &held,
            &cfg.blocks,
            cfg.train.seed,
        )?;
        let mut pred = held.clone();
        pred.labels = Some(inf.labels);
        let s = cloud_scores(&pred, &held)?;
        let metrics = out_dir.join("eval_metrics.csv");
        write(&metrics, &s.to_csv())?;
        print!("held-out scores for {}\n{}", p.display(), s.to_table());
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, cloud: &Path, out: &Path, color: Option<&Path>) -> Result<()> {
    let (cfg, model, norm) = load_run(checkpoint)?;
    let c = PointCloud::load(cloud)?;
    let inf = infer_cloud(&model, &norm, &c, &cfg.blocks, cfg.train.seed)?;
    let mut pred = c;
    pred.labels = Some(inf.labels);
    pred.save(out)?;
    if let Some(p) = color {
        pred.save_colorized_ply(p)?;
    }
    println!(
        "wrote {} ({} points, {} filled from nearest sampled point)",
        out.display(),
        pred.len(),
        inf.filled
    );
    Ok(())
}

fn cmd_project(pred_cloud: &Path, grid: &str, ground_map: &Path, out: &Path) -> Result<()> {
    let grid = if Path::new(grid).is_file() {
        load_raster(Path::new(grid))?.grid
    } else {
        GridSpec::parse(grid)?
    };
    let cloud = labelled(PointCloud::load(pred_cloud)?, pred_cloud)?;
    let map = GroundClassMap::load(ground_map)?;
    let raster = project_labels_3d_to_2d(&cloud, grid, &map, DEFAULT_NODATA)?;
    save_raster(out, &raster)?;
    let covered = raster
        .values
        .iter()
        .filter(|v| !raster.is_nodata(**v))
        .count();
    println!(
        "wrote {} ({covered} of {} pixels labelled)",
        out.display(),
        grid.pixels()
    );
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, raster: bool, out: Option<&Path>) -> Result<()> {
    let s = if raster {
        evaluate_2d(&load_raster(pred)?, &load_raster(gt)?)?
    } else {
        let p = labelled(PointCloud::load(pred)?, pred)?;
        let t = labelled(PointCloud::load(gt)?, gt)?;
        if p.len() != t.len() {
            return Err(Error::InvalidArgument(format!(
                "{} has {} points, {} has {}",
                pred.display(),
                p.len(),
                gt.display(),
                t.len()
            )));
        }
        cloud_scores(&p, &t)?
    };
    let out = out.map_or_else(|| pred.with_extension("metrics.csv"), Path::to_path_buf);
    write(&out, &s.to_csv())?;
    print!("{}", s.to_table());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_export_features(checkpoint: &Path, cloud: &Path, out: &Path) -> Result<()> {
    let (cfg, model, norm) = load_run(checkpoint)?;
    let c = PointCloud::load(cloud)?;
    let inf = infer_cloud(&model, &norm, &c, &cfg.blocks, cfg.train.seed)?;
    let w = inf.width;
    let mut text = (0..w)
        .map(|j| format!("f{j}"))
        .collect::<Vec<_>>()
        .join(",");
    text.push('\n');
    for row in inf.features.chunks_exact(w) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                text.push(',');
            }
            let _ = write!(text, "{v}");
        }
        text.push('\n');
    }
    write(out, &text)?;
    println!("wrote {} ({} rows x {w})", out.display(), c.len());
    Ok(())
}

fn cmd_synth(variant: SynthVariant, out_dir: &Path, seed: u64) -> Result<()> {
    mkdir(out_dir)?;
    let scene = synth::generate(variant, seed);
    scene.cloud.save(&out_dir.join("scene.csv"))?;
    if variant == SynthVariant::Xor {
        let (val, held) = synth::xor_companion_seeds(seed);
        synth::generate(variant, val)
            .cloud
            .save(&out_dir.join("val.csv"))?;
        synth::generate(variant, held)
            .cloud
            .save(&out_dir.join("heldout.csv"))?;
    }
    let cfg = synth::run_config(variant, seed);
    write(&out_dir.join("config.toml"), &cfg.to_toml())?;
    println!(
        "wrote {} points ({} classes incl. unlabelled) and config.toml to {}",
        scene.cloud.len(),
        scene.num_classes,
        out_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fuse {
            cloud,
            raster,
            labels,
            out,
        } => cmd_fuse(&cloud, &raster, labels.as_deref(), &out),
        Command::Train { config, out_dir } => cmd_train(&config, &out_dir),
        Command::Predict {
            checkpoint,
            cloud,
            out,
            color,
        } => cmd_predict(&checkpoint, &cloud, &out, color.as_deref()),
        Command::Project {
            pred_cloud,
            grid,
            ground_map,
            out,
        } => cmd_project(&pred_cloud, &grid, &ground_map, &out),
        Command::Eval {
            pred,
            gt,
            raster,
            out,
        } => cmd_eval(&pred, &gt, raster, out.as_deref()),
        Command::ExportFeatures {
            checkpoint,
            cloud,
            out,
        } => cmd_export_features(&checkpoint, &cloud, &out),
        Command::Synth {
            variant,
            out_dir,
            seed,
        } => cmd_synth(variant, &out_dir, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
