//! Turning predicted occupancy grids into K parametric trajectories: pixels
//! over a threshold become points, modes are picked at the final step by
//! non-maximum suppression plus farthest-point sampling, each endpoint seeds
//! a constant-acceleration trajectory that is refined against the per-step
//! points and smoothed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::raster::{Frame, RasterConfig, OFFSET_CHANNELS};
use crate::tensor::{Element, GridTensor};

/// A super-threshold grid cell lifted to a continuous position
/// (pixel center + predicted sub-pixel offset), in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupiedPoint {
    pub pos: Vec2,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSource {
    Nms,
    Fps,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajPoint {
    /// future step index, 1-based
    pub t: i32,
    /// grid-frame coordinates (see the stored frame for world recovery)
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractedTrajectory {
    pub mode: usize,
    pub prob: f64,
    pub source: ModeSource,
    pub points: Vec<TrajPoint>,
}

impl ExtractedTrajectory {
    /// Trajectory positions mapped back to world coordinates.
    pub fn world_points(&self, frame: &Frame) -> Vec<Vec2> {
        self.points
            .iter()
            .map(|p| frame.to_world(Vec2::new(p.x, p.y)))
            .collect()
    }

    pub fn grid_points(&self) -> Vec<Vec2> {
        self.points.iter().map(|p| Vec2::new(p.x, p.y)).collect()
    }
}

/// Extraction output: modes in grid coordinates plus the transform that
/// recovers world coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub frame: Frame,
    pub modes: Vec<ExtractedTrajectory>,
}

impl TrajectoryFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionConfig {
    /// minimum class probability for a pixel to become a point
    pub threshold: f64,
    /// modes picked by non-maximum suppression
    pub nms_modes: usize,
    /// additional diversity modes from farthest-point sampling
    pub fps_modes: usize,
    /// meters: a trajectory step snaps to the nearest extracted point within
    /// this gate
    pub refine_radius: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            threshold: 0.05,
            nms_modes: 5,
            fps_modes: 5,
            refine_radius: 3.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "extraction threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if self.refine_radius < 0.0 {
            return Err(Error::config("refinement gate must be non-negative"));
        }
        Ok(())
    }
}

/// Lift one class channel of a step grid into points: every pixel with
/// probability >= threshold becomes `pixel + offset` (scan order: u-major).
pub fn grid_to_points<T: Element>(
    class_probs: &GridTensor<T>,
    channel: usize,
    offsets: &GridTensor<T>,
    threshold: f64,
) -> Result<Vec<OccupiedPoint>> {
    let (c, h, w) = class_probs.dims3()?;
    if channel >= c {
        return Err(Error::shape(format!(
            "class channel {channel} out of range for {c} channels"
        )));
    }
    let (oc, oh, ow) = offsets.dims3()?;
    if oc != OFFSET_CHANNELS || (oh, ow) != (h, w) {
        return Err(Error::shape(format!(
            "offsets shape {:?} does not match (2, {h}, {w})",
            offsets.shape()
        )));
    }
    let plane = h * w;
    let pd = class_probs.data();
    let od = offsets.data();
    let mut out = Vec::new();
    for u in 0..h {
        for v in 0..w {
            let idx = u * w + v;
            let p = pd[channel * plane + idx].to_f64();
            if p >= threshold {
                out.push(OccupiedPoint {
                    pos: Vec2::new(
                        u as f64 + od[idx].to_f64(),
                        v as f64 + od[plane + idx].to_f64(),
                    ),
                    prob: p,
                });
            }
        }
    }
    Ok(out)
}

fn by_prob_then_pos(a: &OccupiedPoint, b: &OccupiedPoint) -> std::cmp::Ordering {
    b.prob
        .partial_cmp(&a.prob)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.pos.x.partial_cmp(&b.pos.x).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.pos.y.partial_cmp(&b.pos.y).unwrap_or(std::cmp::Ordering::Equal))
}

/// Greedy non-maximum suppression: repeatedly keep the highest-probability
/// remaining point (ties broken by position) and drop everything strictly
/// within `rho` of it, until `k` modes are kept or the pool is empty.
pub fn nms_modes(points: &[OccupiedPoint], rho: f64, k: usize) -> Vec<OccupiedPoint> {
    let mut pool: Vec<OccupiedPoint> = points.to_vec();
    pool.sort_by(by_prob_then_pos);
    let mut kept: Vec<OccupiedPoint> = Vec::new();
    for p in pool {
        if kept.len() == k {
            break;
        }
        if kept.iter().all(|q| q.pos.dist(p.pos) >= rho) {
            kept.push(p);
        }
    }
    kept
}

/// Farthest-point sampling: starting from `selected`, repeatedly add the
/// pool point with the largest minimum distance to everything selected so
/// far. Stops early when the best remaining distance is zero (duplicates
/// only) or the pool is exhausted.
pub fn farthest_point_sampling(
    pool: &[OccupiedPoint],
    selected: &[OccupiedPoint],
    extra: usize,
) -> Vec<OccupiedPoint> {
    let mut anchors: Vec<Vec2> = selected.iter().map(|p| p.pos).collect();
    let mut added: Vec<OccupiedPoint> = Vec::new();
    let mut used = vec![false; pool.len()];
    for _ in 0..extra {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in pool.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = anchors
                .iter()
                .map(|a| a.dist(p.pos))
                .fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((bi, bd)) => {
                    d > bd
                        || (d == bd
                            && by_prob_then_pos(p, &pool[bi]) == std::cmp::Ordering::Less)
                }
            };
            if better {
                best = Some((i, d));
            }
        }
        let Some((i, d)) = best else { break };
        if d <= 0.0 || !d.is_finite() {
            break;
        }
        used[i] = true;
        anchors.push(pool[i].pos);
        added.push(pool[i]);
    }
    added
}

/// Positions at steps `1..=n` of a constant-acceleration motion that starts
/// at `p0` with velocity `v0` and lands exactly on `end` at `T = n * dt`.
pub fn const_accel_trajectory(p0: Vec2, v0: Vec2, end: Vec2, n: usize, dt: f64) -> Vec<Vec2> {
    let t_total = n as f64 * dt;
    let a = end
        .sub(p0)
        .sub(v0.scale(t_total))
        .scale(2.0 / (t_total * t_total));
    (1..=n)
        .map(|k| {
            let t = k as f64 * dt;
            p0.add(v0.scale(t)).add(a.scale(0.5 * t * t))
        })
        .collect()
}

/// Snap each step to the nearest extracted point of that step when one lies
/// within `radius`; otherwise the seeded position is kept.
pub fn refine_trajectory(traj: &mut [Vec2], step_points: &[Vec<OccupiedPoint>], radius: f64) {
    for (k, pos) in traj.iter_mut().enumerate() {
        let Some(points) = step_points.get(k) else {
            continue;
        };
        let mut best: Option<(f64, Vec2)> = None;
        for p in points {
            let d = p.pos.dist(*pos);
            if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, p.pos));
            }
        }
        if let Some((_, bp)) = best {
            *pos = bp;
        }
    }
}

/// Centered moving average with window 3; the first and last points are
/// kept as they are.
pub fn smooth_trajectory(traj: &mut Vec<Vec2>) {
    if traj.len() < 3 {
        return;
    }
    let orig = traj.clone();
    for i in 1..traj.len() - 1 {
        traj[i] = orig[i - 1]
            .add(orig[i])
            .add(orig[i + 1])
            .scale(1.0 / 3.0);
    }
}

/// One future step of a prediction, as plain tensors.
#[derive(Debug, Clone)]
pub struct PredictedStep<T: Element> {
    /// `(n_classes, U, V)` class probabilities
    pub class_probs: GridTensor<T>,
    /// `(2, U, V)` sub-pixel offsets
    pub offsets: GridTensor<T>,
}

/// Full extraction pipeline for one agent's class channel. `p0_world` and
/// `v0_world` are the agent's position and velocity at the last observed
/// step; up to `k` modes come back sorted by probability.
#[allow(clippy::too_many_arguments)]
pub fn extract_k_trajectories<T: Element>(
    steps: &[PredictedStep<T>],
    channel: usize,
    frame: &Frame,
    cfg: &RasterConfig,
    ex: &ExtractionConfig,
    p0_world: Vec2,
    v0_world: Vec2,
    k: usize,
) -> Result<Vec<ExtractedTrajectory>> {
    ex.validate()?;
    if steps.is_empty() {
        return Err(Error::input("extraction needs at least one step grid"));
    }
    let res = cfg.resolution;
    let step_points: Vec<Vec<OccupiedPoint>> = steps
        .iter()
        .map(|s| grid_to_points(&s.class_probs, channel, &s.offsets, ex.threshold))
        .collect::<Result<_>>()?;
    let last = step_points.last().unwrap();
    if last.is_empty() {
        log::warn!(
            "no pixel above threshold {} at the final step; no modes extracted",
            ex.threshold
        );
        return Ok(Vec::new());
    }

    let speed = v0_world.norm();
    let rho_px = f64::max(2.0, 0.5 * speed) / res;
    let nms = nms_modes(last, rho_px, ex.nms_modes);
    let fps = farthest_point_sampling(last, &nms, ex.fps_modes);

    let p0 = frame.to_grid(p0_world);
    let v0 = frame.vec_to_grid(v0_world).scale(1.0 / res);
    let gate_px = ex.refine_radius / res;
    let n = steps.len();

    let mut modes: Vec<ExtractedTrajectory> = Vec::new();
    for (endpoint, source) in nms
        .iter()
        .map(|p| (p, ModeSource::Nms))
        .chain(fps.iter().map(|p| (p, ModeSource::Fps)))
    {
        let mut traj = const_accel_trajectory(p0, v0, endpoint.pos, n, cfg.dt);
        refine_trajectory(&mut traj, &step_points, gate_px);
        smooth_trajectory(&mut traj);
        let points = traj
            .iter()
            .enumerate()
            .map(|(i, g)| TrajPoint {
                t: i as i32 + 1,
                x: g.x.clamp(0.0, cfg.u_extent as f64 - 1.0),
                y: g.y.clamp(0.0, cfg.v_extent as f64 - 1.0),
            })
            .collect();
        modes.push(ExtractedTrajectory {
            mode: 0,
            prob: endpoint.prob,
            source,
            points,
        });
    }
    modes.sort_by(|a, b| {
        b.prob
            .partial_cmp(&a.prob)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    modes.truncate(k);
    for (i, m) in modes.iter_mut().enumerate() {
        m.mode = i;
    }
    Ok(modes)
}
