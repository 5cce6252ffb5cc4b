//! Glue between scenes, the network, extraction, and metrics: sample
//! preparation, batched prediction, grid-dump packing, and evaluation-track
//! assembly shared by the command-line tools and the integration tests.

use rand::Rng;

use crate::error::{Error, Result};
use crate::extraction::{
    extract_k_trajectories, grid_to_points, ExtractedTrajectory, ExtractionConfig, PredictedStep,
    TrajectoryFile,
};
use crate::geom::Vec2;
use crate::metrics::{constant_velocity_baseline, EvalTrack, ModeTraj};
use crate::network::CaspNet;
use crate::raster::{
    augment, make_ground_truth, rasterize_map, rasterize_trajectories, scene_frame, Frame,
    GroundTruthSeq, InputGridSeq, KernelParams, PredictionMode, RasterConfig,
};
use crate::scene::{Agent, Scene};
use crate::tensor::{Element, GridTensor, NormMode, Tape};

/// A fully rasterized training sample.
pub struct Sample<T: Element> {
    pub inputs: InputGridSeq<T>,
    pub map: GridTensor<T>,
    pub gt: GroundTruthSeq<T>,
}

/// Returns a scene ready for the requested prediction mode. In single-target
/// mode a scene without an explicit target gets its anchor agent promoted.
pub fn prepare_scene(scene: &Scene, mode: PredictionMode) -> Result<Scene> {
    let mut out = scene.clone();
    if mode == PredictionMode::SingleTarget && out.target().is_none() {
        let id = out.anchor_agent()?.id.clone();
        out.promote_to_target(&id)?;
    }
    Ok(out)
}

/// Rasterizes one (optionally augmented) sample. The grid frame is always
/// derived from the un-augmented scene so that augmentation shifts content
/// relative to a fixed viewport.
pub fn build_sample<T: Element, R: Rng>(
    scene: &Scene,
    raster: &RasterConfig,
    kernel: &KernelParams,
    mode: PredictionMode,
    augment_rng: Option<&mut R>,
) -> Result<Sample<T>> {
    let frame = scene_frame(scene, raster)?;
    let effective;
    let used: &Scene = match augment_rng {
        Some(rng) => {
            effective = augment(scene, rng)?;
            &effective
        }
        None => scene,
    };
    let inputs = rasterize_trajectories::<T>(used, raster, &frame)?;
    let map = rasterize_map::<T>(used, raster, &frame)?;
    let gt = make_ground_truth::<T>(used, raster, kernel, &frame, mode)?;
    Ok(Sample { inputs, map, gt })
}

/// Runs the network in inference mode on one scene and returns the grid
/// frame together with the per-step class probabilities and offsets.
pub fn predict<T: Element>(
    net: &CaspNet<T>,
    scene: &Scene,
    raster: &RasterConfig,
) -> Result<(Frame, Vec<PredictedStep<T>>)> {
    let frame = scene_frame(scene, raster)?;
    let inputs = rasterize_trajectories::<T>(scene, raster, &frame)?;
    let map = rasterize_map::<T>(scene, raster, &frame)?;
    let mut tape = Tape::new();
    let trace = net.forward(&mut tape, &inputs, &map, NormMode::Eval)?;
    let steps = trace
        .steps
        .iter()
        .map(|s| PredictedStep {
            class_probs: tape.value(s.class_probs).clone(),
            offsets: tape.value(s.offsets).clone(),
        })
        .collect();
    Ok((frame, steps))
}

/// Packs per-step predictions into one rank-4 grid (steps, classes + 2, U, V)
/// for serialization.
pub fn stack_prediction<T: Element>(steps: &[PredictedStep<T>]) -> Result<GridTensor<T>> {
    let mut frames = Vec::with_capacity(steps.len());
    for s in steps {
        let (c, u, v) = s.class_probs.dims3()?;
        let (c_off, u2, v2) = s.offsets.dims3()?;
        if (u2, v2) != (u, v) {
            return Err(Error::shape(format!(
                "class and offset grids disagree: {u}x{v} vs {u2}x{v2}"
            )));
        }
        let mut data = Vec::with_capacity((c + c_off) * u * v);
        data.extend_from_slice(s.class_probs.data());
        data.extend_from_slice(s.offsets.data());
        frames.push(GridTensor::new(vec![c + c_off, u, v], data)?);
    }
    GridTensor::stack(&frames)
}

/// Splits a rank-4 grid dump back into per-step predictions. The class count
/// is inferred from the channel extent (channels = classes + 2).
pub fn unstack_prediction<T: Element>(grid: &GridTensor<T>) -> Result<Vec<PredictedStep<T>>> {
    let shape = grid.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "expected a rank-4 prediction dump, got rank {}",
            shape.len()
        )));
    }
    let channels = shape[1];
    if channels < 3 {
        return Err(Error::shape(format!(
            "prediction dump needs at least 3 channels, got {channels}"
        )));
    }
    let n_classes = channels - 2;
    let mut steps = Vec::with_capacity(shape[0]);
    for frame in grid.unstack()? {
        steps.push(PredictedStep {
            class_probs: frame.slice_channels(0, n_classes)?,
            offsets: frame.slice_channels(n_classes, channels)?,
        });
    }
    Ok(steps)
}

/// Maps an agent kind to its class channel under the given mode, or None if
/// the kind is not supervised in that mode.
pub fn class_channel(mode: PredictionMode, agent: &Agent) -> Option<usize> {
    mode.classes().iter().position(|k| *k == agent.kind)
}

/// Future ground-truth world positions for one agent (steps 1..=n). Returns
/// None when the track does not cover the full horizon.
pub fn future_positions(agent: &Agent, n: usize) -> Option<Vec<Vec2>> {
    (1..=n as i32)
        .map(|t| agent.point_at(t).map(|p| Vec2::new(p.x, p.y)))
        .collect()
}

/// The anchor agent's position and velocity at the current step.
pub fn anchor_state(scene: &Scene) -> Result<(Vec2, Vec2)> {
    let agent = scene.anchor_agent()?;
    let p = agent
        .point_at(0)
        .ok_or_else(|| Error::input(format!("agent {} has no current-step point", agent.id)))?;
    Ok((Vec2::new(p.x, p.y), Vec2::new(p.vx, p.vy)))
}

/// Extracts top-k trajectory modes for the scene's anchor agent from a
/// prediction and wraps them in a serializable trajectory file.
pub fn extract_for_anchor<T: Element>(
    steps: &[PredictedStep<T>],
    scene: &Scene,
    raster: &RasterConfig,
    excfg: &ExtractionConfig,
    k: usize,
) -> Result<TrajectoryFile> {
    let frame = scene_frame(scene, raster)?;
    let n_classes = steps
        .first()
        .ok_or_else(|| Error::input("prediction has no steps"))?
        .class_probs
        .shape()[0];
    let mode = match n_classes {
        1 => PredictionMode::SingleTarget,
        3 => PredictionMode::Scene,
        n => {
            return Err(Error::shape(format!(
                "prediction has {n} class channels; expected 1 or 3"
            )))
        }
    };
    let agent = scene.anchor_agent()?;
    let channel = class_channel(mode, agent).unwrap_or(0);
    let (p0, v0) = anchor_state(scene)?;
    let modes = extract_k_trajectories(steps, channel, &frame, raster, excfg, p0, v0, k)?;
    Ok(TrajectoryFile { frame, modes })
}

/// Builds an evaluation track for one agent from extracted trajectory modes
/// (world coordinates throughout).
pub fn eval_track_from_modes(
    agent: &Agent,
    modes: &[ExtractedTrajectory],
    frame: &Frame,
    raster: &RasterConfig,
    drivable: Vec<Vec<Vec2>>,
    n_steps: usize,
) -> Option<EvalTrack> {
    let gt = future_positions(agent, n_steps)?;
    let in_roi = gt
        .iter()
        .map(|p| raster.contains(frame.to_grid(*p)))
        .collect();
    let mode_trajs = modes
        .iter()
        .map(|m| ModeTraj {
            prob: m.prob,
            points: m.world_points(frame),
        })
        .collect();
    Some(EvalTrack {
        gt,
        in_roi,
        modes: mode_trajs,
        step_points: Vec::new(),
        drivable,
    })
}

/// Builds an evaluation track for one agent from raw per-step grid peaks of
/// its class channel: every super-threshold cell counts as a candidate.
/// Returns Ok(None) when the agent is unsupervised in this mode or its track
/// does not cover the horizon.
pub fn eval_track_from_grid<T: Element>(
    agent: &Agent,
    steps: &[PredictedStep<T>],
    frame: &Frame,
    raster: &RasterConfig,
    mode: PredictionMode,
    threshold: f64,
) -> Result<Option<EvalTrack>> {
    let Some(channel) = class_channel(mode, agent) else {
        return Ok(None);
    };
    let Some(gt) = future_positions(agent, raster.output_steps) else {
        return Ok(None);
    };
    let in_roi: Vec<bool> = gt
        .iter()
        .map(|p| raster.contains(frame.to_grid(*p)))
        .collect();
    let mut step_points = Vec::with_capacity(steps.len());
    for s in steps {
        let pts = grid_to_points(&s.class_probs, channel, &s.offsets, threshold)?;
        step_points.push(pts.into_iter().map(|pt| frame.to_world(pt.pos)).collect());
    }
    Ok(Some(EvalTrack {
        gt,
        in_roi,
        modes: Vec::new(),
        step_points,
        drivable: Vec::new(),
    }))
}

/// Constant-velocity evaluation track for one agent: a single mode that
/// coasts from the current state.
pub fn cv_track(
    agent: &Agent,
    frame: &Frame,
    raster: &RasterConfig,
    dt: f64,
    n_steps: usize,
) -> Option<EvalTrack> {
    let gt = future_positions(agent, n_steps)?;
    let in_roi = gt
        .iter()
        .map(|p| raster.contains(frame.to_grid(*p)))
        .collect();
    let p = agent.point_at(0)?;
    let cv = constant_velocity_baseline(p.pos(), p.vel(), n_steps, dt);
    Some(EvalTrack {
        gt,
        in_roi,
        modes: vec![cv],
        step_points: Vec::new(),
        drivable: Vec::new(),
    })
}
