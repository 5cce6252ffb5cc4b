//! Forecasting metrics: miss rate per step and per track against a 2 m
//! radius, minimum average / final displacement error over the top-K modes,
//! off-road rate against the drivable area, and the constant-velocity
//! reference predictor.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{point_in_polygon, Vec2};

/// Radius of the miss test, meters.
pub const MISS_RADIUS: f64 = 2.0;

/// One predicted mode: a probability and one position per future step.
#[derive(Debug, Clone)]
pub struct ModeTraj {
    pub prob: f64,
    pub points: Vec<Vec2>,
}

/// One evaluation unit: ground-truth future positions of one agent, which
/// of them lie inside the region of interest, the predicted candidates, and
/// the drivable polygons of its scene.
#[derive(Debug, Clone)]
pub struct EvalTrack {
    pub gt: Vec<Vec2>,
    pub in_roi: Vec<bool>,
    /// trajectory modes (track evaluation); empty when evaluating raw grid
    /// points
    pub modes: Vec<ModeTraj>,
    /// per-step candidate point sets (grid-point evaluation); empty when
    /// evaluating trajectory modes
    pub step_points: Vec<Vec<Vec2>>,
    pub drivable: Vec<Vec<Vec2>>,
}

/// A ground-truth point is missed when no candidate lies within the radius
/// (a candidate at exactly the radius still covers it). No candidates at
/// all is a miss.
pub fn miss_per_step(gt: Vec2, candidates: &[Vec2], radius: f64) -> bool {
    !candidates.iter().any(|c| c.dist(gt) <= radius)
}

/// Candidate positions the miss test sees at one step.
fn candidates_at(track: &EvalTrack, step: usize, k: usize) -> Vec<Vec2> {
    if !track.modes.is_empty() {
        top_k(&track.modes, k)
            .iter()
            .filter_map(|m| m.points.get(step).copied())
            .collect()
    } else {
        track.step_points.get(step).cloned().unwrap_or_default()
    }
}

/// A track is missed when any of its in-ROI ground-truth steps is missed.
/// Returns `None` when no step lies inside the region of interest (the
/// track does not count toward the rate).
pub fn track_missed(track: &EvalTrack, k: usize, radius: f64) -> Option<bool> {
    let mut any_in_roi = false;
    let mut missed = false;
    for (step, (&gt, &in_roi)) in track.gt.iter().zip(&track.in_roi).enumerate() {
        if !in_roi {
            continue;
        }
        any_in_roi = true;
        if miss_per_step(gt, &candidates_at(track, step, k), radius) {
            missed = true;
        }
    }
    any_in_roi.then_some(missed)
}

/// Modes sorted by probability descending (stable), first `k`.
pub fn top_k(modes: &[ModeTraj], k: usize) -> Vec<&ModeTraj> {
    let mut order: Vec<&ModeTraj> = modes.iter().collect();
    order.sort_by(|a, b| {
        b.prob
            .partial_cmp(&a.prob)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    order
}

/// Mean pointwise displacement between two equally long trajectories.
pub fn ade(pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape(format!(
            "displacement error needs equal non-empty lengths, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| p.dist(*g)).sum();
    Ok(sum / gt.len() as f64)
}

/// Final-step displacement between two equally long trajectories.
pub fn fde(pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape(format!(
            "displacement error needs equal non-empty lengths, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.last().unwrap().dist(*gt.last().unwrap()))
}

/// Minimum ADE over the top-`k` modes; `None` without modes.
pub fn min_ade(track: &EvalTrack, k: usize) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for m in top_k(&track.modes, k) {
        let e = ade(&m.points, &track.gt)?;
        best = Some(best.map_or(e, |b| b.min(e)));
    }
    Ok(best)
}

/// Minimum FDE over the top-`k` modes; `None` without modes.
pub fn min_fde(track: &EvalTrack, k: usize) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for m in top_k(&track.modes, k) {
        let e = fde(&m.points, &track.gt)?;
        best = Some(best.map_or(e, |b| b.min(e)));
    }
    Ok(best)
}

/// A mode leaves the road when any point lies outside every drivable
/// polygon; points exactly on a boundary count as inside.
pub fn mode_off_road(points: &[Vec2], drivable: &[Vec<Vec2>]) -> bool {
    points
        .iter()
        .any(|p| !drivable.iter().any(|poly| point_in_polygon(*p, poly)))
}

/// Straight-line reference prediction: `p(t) = p0 + v0 t`.
pub fn constant_velocity_baseline(p0: Vec2, v0: Vec2, n: usize, dt: f64) -> ModeTraj {
    ModeTraj {
        prob: 1.0,
        points: (1..=n)
            .map(|k| p0.add(v0.scale(k as f64 * dt)))
            .collect(),
    }
}

/// Aggregated metrics over a set of evaluation tracks.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// tracks with at least one in-ROI step (miss-rate denominator)
    pub tracks: usize,
    /// tracks entering the displacement averages
    pub ade_tracks: usize,
    /// modes entering the off-road rate
    pub mode_count: usize,
    /// per-step miss fractions over the in-ROI population of each step
    pub mr_per_step: Vec<f64>,
    /// fraction of tracks with any in-ROI step missed
    pub mr_track: f64,
    /// the K values the displacement columns refer to
    pub ks: Vec<usize>,
    /// `min_ade` averaged over tracks, per K (empty in grid-point mode)
    pub min_ade: Vec<f64>,
    /// `min_fde` averaged over tracks, per K (empty in grid-point mode)
    pub min_fde: Vec<f64>,
    /// fraction of modes leaving the drivable area (absent without modes)
    pub off_road_rate: Option<f64>,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "tracks,ade_tracks,mode_count,mr_track,ks,min_ade,min_fde,off_road_rate\n"
    }

    pub fn csv_row(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        let ks = self
            .ks
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{:.6},{},{},{},{}\n",
            self.tracks,
            self.ade_tracks,
            self.mode_count,
            self.mr_track,
            ks,
            join(&self.min_ade),
            join(&self.min_fde),
            self.off_road_rate
                .map(|r| format!("{r:.6}"))
                .unwrap_or_default()
        )
    }
}

/// Evaluate a set of tracks. Miss rates use all provided candidates
/// (`mr_k = usize::MAX` evaluates every mode); displacement errors are
/// reported for each K in `ks` when trajectory modes are present.
pub fn aggregate(tracks: &[EvalTrack], ks: &[usize], radius: f64) -> Result<MetricsReport> {
    let n_steps = tracks.iter().map(|t| t.gt.len()).max().unwrap_or(0);
    let mut step_hits = vec![0usize; n_steps];
    let mut step_total = vec![0usize; n_steps];
    let mut mr_tracks = 0usize;
    let mut mr_missed = 0usize;
    let mut ade_tracks = 0usize;
    let mut ade_sums = vec![0.0; ks.len()];
    let mut fde_sums = vec![0.0; ks.len()];
    let mut mode_count = 0usize;
    let mut off_road = 0usize;
    let mut any_modes = false;

    for track in tracks {
        if track.gt.len() != track.in_roi.len() {
            return Err(Error::shape(format!(
                "{} ground-truth steps but {} ROI flags",
                track.gt.len(),
                track.in_roi.len()
            )));
        }
        match track_missed(track, usize::MAX, radius) {
            Some(missed) => {
                mr_tracks += 1;
                if missed {
                    mr_missed += 1;
                }
            }
            None => continue,
        }
        for (step, (&gt, &in_roi)) in track.gt.iter().zip(&track.in_roi).enumerate() {
            if !in_roi {
                continue;
            }
            step_total[step] += 1;
            if miss_per_step(gt, &candidates_at(track, step, usize::MAX), radius) {
                step_hits[step] += 1;
            }
        }
        if !track.modes.is_empty() {
            any_modes = true;
            ade_tracks += 1;
            for (i, &k) in ks.iter().enumerate() {
                ade_sums[i] += min_ade(track, k)?.unwrap();
                fde_sums[i] += min_fde(track, k)?.unwrap();
            }
            let top = top_k(&track.modes, ks.iter().copied().max().unwrap_or(usize::MAX));
            if track.drivable.is_empty() {
                log::warn!("no drivable polygons; off-road rate counts nothing off-road");
            }
            for m in top {
                mode_count += 1;
                if !track.drivable.is_empty() && mode_off_road(&m.points, &track.drivable) {
                    off_road += 1;
                }
            }
        }
    }

    let mr_per_step = step_hits
        .iter()
        .zip(&step_total)
        .map(|(&m, &n)| if n == 0 { 0.0 } else { m as f64 / n as f64 })
        .collect();
    Ok(MetricsReport {
        tracks: mr_tracks,
        ade_tracks,
        mode_count,
        mr_per_step,
        mr_track: if mr_tracks == 0 {
            0.0
        } else {
            mr_missed as f64 / mr_tracks as f64
        },
        ks: ks.to_vec(),
        min_ade: if ade_tracks == 0 {
            vec![0.0; ks.len()]
        } else {
            ade_sums.iter().map(|s| s / ade_tracks as f64).collect()
        },
        min_fde: if ade_tracks == 0 {
            vec![0.0; ks.len()]
        } else {
            fde_sums.iter().map(|s| s / ade_tracks as f64).collect()
        },
        off_road_rate: any_modes.then(|| {
            if mode_count == 0 {
                0.0
            } else {
                off_road as f64 / mode_count as f64
            }
        }),
    })
}
