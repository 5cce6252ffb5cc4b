//! `casp`: scene generation, training, prediction, trajectory extraction,
//! evaluation, and heatmap rendering from one binary.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use caspnet::config::RunConfig;
use caspnet::error::{Error, Result};
use caspnet::extraction::{ExtractionConfig, TrajectoryFile};
use caspnet::griddump::{load_grid, save_grid};
use caspnet::metrics::{aggregate, EvalTrack, MetricsReport, MISS_RADIUS};
use caspnet::network::{checkpoint_dtype, CaspNet};
use caspnet::pipeline::{
    eval_track_from_grid, eval_track_from_modes, extract_for_anchor, predict, prepare_scene,
    stack_prediction, unstack_prediction,
};
use caspnet::raster::{rasterize_map, scene_frame, PredictionMode, RasterConfig};
use caspnet::render::{render_composite, render_step};
use caspnet::scene::{Manifest, Scene};
use caspnet::scenegen::{write_dataset, ScenarioKind};
use caspnet::tensor::{Dtype, Element, GridTensor};
use caspnet::train::{LogRow, TrainOptions, Trainer};

#[derive(Parser)]
#[command(
    name = "casp",
    version,
    about = "Grid-based multi-agent motion prediction pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes and a manifest.
    Scenegen {
        /// Output directory for scene files and manifest.json
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Comma-separated scenario kinds (default: all)
        #[arg(long)]
        kinds: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network on a scene manifest.
    Train {
        /// Manifest of training scenes
        #[arg(long)]
        data: Option<PathBuf>,
        /// key = value run configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint and training log
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prediction mode override: single_target or scene
        #[arg(long)]
        mode: Option<String>,
        /// Total optimizer steps override
        #[arg(long)]
        max_steps: Option<usize>,
        /// Resume from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a checkpoint on one scene and dump the predicted grids.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Output grid dump: (steps, classes + 2, U, V)
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract trajectory modes for the anchor agent from a grid dump.
    Extract {
        /// Prediction grid dump from `casp predict`
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of modes to keep
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Probability threshold for grid peaks
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score predictions (trajectory file or grid dump) against a scene.
    Eval {
        /// Trajectory JSON or grid dump; the format is detected
        #[arg(long)]
        pred: PathBuf,
        /// Scene with ground-truth future tracks
        #[arg(long)]
        gt: PathBuf,
        /// Output path prefix: writes <prefix>.json and <prefix>.csv
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated K values for top-K metrics
        #[arg(long, default_value = "1,5,10")]
        k: String,
        /// Probability threshold for grid-point candidates
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
    },
    /// Render a grid dump as PPM images.
    Render {
        #[arg(long)]
        pred: PathBuf,
        /// Output directory for step_*.ppm and composite.ppm
        #[arg(long)]
        out: PathBuf,
        /// Optional scene whose map is drawn under the heatmaps
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// 2 for bad input or I/O, 3 for inconsistent configuration.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Config(_) | Error::Shape(_) => 3,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Scenegen {
            out,
            count,
            kinds,
            seed,
        } => cmd_scenegen(&out, count, kinds.as_deref(), seed),
        Cmd::Train {
            data,
            config,
            out,
            mode,
            max_steps,
            resume,
        } => cmd_train(
            data.as_deref(),
            config.as_deref(),
            out.as_deref(),
            mode.as_deref(),
            max_steps,
            resume.as_deref(),
        ),
        Cmd::Predict { ckpt, scene, out } => cmd_predict(&ckpt, &scene, &out),
        Cmd::Extract {
            pred,
            scene,
            out,
            k,
            threshold,
        } => cmd_extract(&pred, &scene, &out, k, threshold),
        Cmd::Eval {
            pred,
            gt,
            out,
            k,
            threshold,
        } => cmd_eval(&pred, &gt, &out, &k, threshold),
        Cmd::Render { pred, out, scene } => cmd_render(&pred, &out, scene.as_deref()),
    }
}

fn cmd_scenegen(out: &Path, count: usize, kinds: Option<&str>, seed: u64) -> Result<()> {
    let kinds: Vec<ScenarioKind> = match kinds {
        None => ScenarioKind::ALL.to_vec(),
        Some(s) => s
            .split(',')
            .map(|k| ScenarioKind::parse(k.trim()))
            .collect::<Result<_>>()?,
    };
    let manifest = write_dataset(out, count, &kinds, seed)?;
    println!("wrote {count} scenes, manifest {}", manifest.display());
    Ok(())
}

fn cmd_train(
    data: Option<&Path>,
    config: Option<&Path>,
    out: Option<&Path>,
    mode: Option<&str>,
    max_steps: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = PredictionMode::parse(m)?;
    }
    if let Some(s) = max_steps {
        cfg.max_steps = s;
    }
    match std::env::var("CASP_SEED") {
        Ok(v) => {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("CASP_SEED must be an integer, got {v:?}")))?;
            log::info!("seed {} from CASP_SEED", cfg.seed);
        }
        Err(std::env::VarError::NotPresent) => {}
        Err(e) => return Err(Error::input(format!("CASP_SEED: {e}"))),
    }
    cfg.validate()?;

    let data_path = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::input("no training data: pass --data or set data= in the config"))?;
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.checkpoints.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::input("no output dir: pass --out or set checkpoints= in the config"))?;

    let manifest = Manifest::load(&data_path)?;
    let scenes = manifest.load_scenes(&data_path)?;
    log::info!(
        "training on {} scenes, mode {}, {} steps",
        scenes.len(),
        cfg.mode.as_str(),
        cfg.max_steps
    );

    std::fs::create_dir_all(&out_dir)?;
    let ckpt_path = out_dir.join("model.ckpt");
    let log_path = out_dir.join("train_log.csv");

    let opts = TrainOptions {
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        augment: cfg.augment,
        seed: cfg.seed,
    };
    let mut trainer: Trainer<f32> = match resume {
        Some(p) => Trainer::from_checkpoint(p, cfg.raster_config(), cfg.kernel_params(), opts)?,
        None => Trainer::new(
            CaspNet::new(cfg.network_config())?,
            cfg.raster_config(),
            cfg.kernel_params(),
            opts,
        )?,
    };

    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log_file, "{}", LogRow::CSV_HEADER)?;
    while trainer.step < cfg.max_steps {
        let chunk = cfg.save_interval.min(cfg.max_steps - trainer.step);
        let rows = trainer.run(&scenes, chunk)?;
        for r in &rows {
            writeln!(log_file, "{}", r.csv_row())?;
        }
        log_file.flush()?;
        trainer.save(&ckpt_path)?;
    }
    trainer.save(&ckpt_path)?;
    println!(
        "trained to step {}, checkpoint {}",
        trainer.step,
        ckpt_path.display()
    );
    Ok(())
}

fn predict_to_grid<T: Element>(ckpt: &Path, scene_path: &Path) -> Result<GridTensor<f32>> {
    let (net, _) = CaspNet::<T>::load(ckpt)?;
    let mut raster = RasterConfig::with_extents(net.cfg.u_extent, net.cfg.v_extent);
    raster.input_steps = net.cfg.input_steps;
    raster.output_steps = net.cfg.output_steps;
    let scene = prepare_scene(&Scene::load(scene_path)?, net.cfg.mode)?;
    let (_, steps) = predict(&net, &scene, &raster)?;
    Ok(stack_prediction(&steps)?.cast::<f32>())
}

fn cmd_predict(ckpt: &Path, scene: &Path, out: &Path) -> Result<()> {
    let grid = match checkpoint_dtype(ckpt)? {
        Dtype::F32 => predict_to_grid::<f32>(ckpt, scene)?,
        Dtype::F64 => predict_to_grid::<f64>(ckpt, scene)?,
    };
    save_grid(out, &grid)?;
    println!("wrote prediction {:?} to {}", grid.shape(), out.display());
    Ok(())
}

fn cmd_extract(
    pred: &Path,
    scene_path: &Path,
    out: &Path,
    k: usize,
    threshold: Option<f64>,
) -> Result<()> {
    if !matches!(k, 1 | 5 | 10) {
        log::warn!("k = {k} is unusual; mode counts are typically 1, 5 or 10");
    }
    let grid = load_grid(pred)?;
    let steps = unstack_prediction(&grid)?;
    let shape = grid.shape();
    let mut raster = RasterConfig::with_extents(shape[2], shape[3]);
    raster.output_steps = shape[0];
    let scene = Scene::load(scene_path)?;
    let mut excfg = ExtractionConfig::default();
    if let Some(t) = threshold {
        excfg.threshold = t;
    }
    excfg.validate()?;
    let file = extract_for_anchor(&steps, &scene, &raster, &excfg, k)?;
    file.save(out)?;
    println!("wrote {} modes to {}", file.modes.len(), out.display());
    Ok(())
}

/// A prediction file is a grid dump when it starts with the grid magic,
/// otherwise it is parsed as trajectory JSON.
fn is_grid_dump(path: &Path) -> Result<bool> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    let n = f.read(&mut magic)?;
    Ok(n == 8 && &magic == b"CASPGRID")
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::input(format!("bad K value {p:?}")))
        })
        .collect()
}

fn cmd_eval(pred: &Path, gt: &Path, out: &Path, k: &str, threshold: f64) -> Result<()> {
    let ks = parse_ks(k)?;
    let scene = Scene::load(gt)?;
    let report = if is_grid_dump(pred)? {
        eval_grid(pred, &scene, &ks, threshold)?
    } else {
        eval_trajectories(pred, &scene, &ks)?
    };

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let json_path = out.with_extension("json");
    let csv_path = out.with_extension("csv");
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&json_path, json + "\n")?;
    std::fs::write(
        &csv_path,
        format!("{}{}", MetricsReport::csv_header(), report.csv_row()),
    )?;
    println!(
        "evaluated {} tracks: track miss rate {:.3}; wrote {} and {}",
        report.tracks,
        report.mr_track,
        json_path.display(),
        csv_path.display()
    );
    Ok(())
}

fn eval_trajectories(pred: &Path, scene: &Scene, ks: &[usize]) -> Result<MetricsReport> {
    let tf = TrajectoryFile::load(pred)?;
    let n_steps = tf
        .modes
        .first()
        .map(|m| m.points.len())
        .ok_or_else(|| Error::input("trajectory file has no modes"))?;
    let mut raster = RasterConfig::default();
    raster.output_steps = n_steps;
    let agent = scene.anchor_agent()?;
    let track = eval_track_from_modes(
        agent,
        &tf.modes,
        &tf.frame,
        &raster,
        scene.map.drivable.clone(),
        n_steps,
    )
    .ok_or_else(|| {
        Error::shape(format!(
            "agent {:?} does not cover the {n_steps}-step horizon",
            agent.id
        ))
    })?;
    aggregate(&[track], ks, MISS_RADIUS)
}

fn eval_grid(pred: &Path, scene: &Scene, ks: &[usize], threshold: f64) -> Result<MetricsReport> {
    let grid = load_grid(pred)?;
    let steps = unstack_prediction(&grid)?;
    let shape = grid.shape();
    let mode = match shape[1] - 2 {
        1 => PredictionMode::SingleTarget,
        3 => PredictionMode::Scene,
        n => {
            return Err(Error::shape(format!(
                "prediction has {n} class channels; expected 1 or 3"
            )))
        }
    };
    let mut raster = RasterConfig::with_extents(shape[2], shape[3]);
    raster.output_steps = shape[0];
    let prepped = prepare_scene(scene, mode)?;
    let frame = scene_frame(&prepped, &raster)?;
    let mut tracks: Vec<EvalTrack> = Vec::new();
    for agent in &prepped.agents {
        if let Some(t) =
            eval_track_from_grid(agent, &steps, &frame, &raster, mode, threshold)?
        {
            tracks.push(t);
        }
    }
    if tracks.is_empty() {
        return Err(Error::shape(format!(
            "no agent track covers the {}-step horizon",
            shape[0]
        )));
    }
    aggregate(&tracks, ks, MISS_RADIUS)
}

fn cmd_render(pred: &Path, out: &Path, scene: Option<&Path>) -> Result<()> {
    let grid = load_grid(pred)?;
    let steps = unstack_prediction(&grid)?;
    let shape = grid.shape();
    let map = match scene {
        Some(p) => {
            let scene = Scene::load(p)?;
            let mut raster = RasterConfig::with_extents(shape[2], shape[3]);
            raster.output_steps = shape[0];
            let frame = scene_frame(&scene, &raster)?;
            Some(rasterize_map::<f32>(&scene, &raster, &frame)?)
        }
        None => None,
    };
    std::fs::create_dir_all(out)?;
    for (i, step) in steps.iter().enumerate() {
        let img = render_step(step, map.as_ref())?;
        img.save_ppm(&out.join(format!("step_{:02}.ppm", i + 1)))?;
    }
    let composite = render_composite(&steps, map.as_ref())?;
    composite.save_ppm(&out.join("composite.ppm"))?;
    println!("wrote {} step images and composite to {}", steps.len(), out.display());
    Ok(())
}
