//! Traffic scene model and its JSON on-disk schema.
//!
//! A scene holds agents with timestamped states plus a vector map. Time is
//! discrete: step `t = 0` is "now", negative steps are observed history,
//! positive steps are ground-truth future. World coordinates are meters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{polygon_self_intersects, wrap_angle, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Target,
    Vehicle,
    Pedestrian,
}

impl AgentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Target => "target",
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrackPoint {
    /// discrete step index (multiples of `meta.dt` seconds)
    pub t: i32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// radians in `[-pi, pi)`
    pub heading: f64,
}

impl TrackPoint {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn vel(&self) -> Vec2 {
        Vec2::new(self.vx, self.vy)
    }

    pub fn speed(&self) -> f64 {
        self.vel().norm()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub id: String,
    pub kind: AgentKind,
    pub track: Vec<TrackPoint>,
}

impl Agent {
    pub fn point_at(&self, t: i32) -> Option<&TrackPoint> {
        self.track.iter().find(|p| p.t == t)
    }

    /// Heading to use at step `t`. Below 0.1 m/s the instantaneous heading
    /// is unreliable, so fall back to the most recent step at which the
    /// agent was moving, and finally to the stored heading.
    pub fn heading_at(&self, t: i32) -> Option<f64> {
        let p = self.point_at(t)?;
        if p.speed() >= 0.1 {
            return Some(p.heading);
        }
        let mut fallback = p.heading;
        for q in self.track.iter().rev() {
            if q.t <= t && q.speed() >= 0.1 {
                fallback = q.heading;
                break;
            }
        }
        Some(fallback)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lane {
    /// centerline polyline, world meters
    pub pts: Vec<Vec2>,
    /// tangent direction (radians) at each vertex
    pub dirs: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VectorMap {
    pub drivable: Vec<Vec<Vec2>>,
    pub crossings: Vec<Vec<Vec2>>,
    pub lanes: Vec<Lane>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneMeta {
    /// seconds between consecutive steps
    pub dt: f64,
    /// speed cap for every agent in the dataset, m/s
    pub v_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub meta: SceneMeta,
    pub agents: Vec<Agent>,
    pub map: VectorMap,
}

impl Scene {
    pub fn target(&self) -> Option<&Agent> {
        self.agents.iter().find(|a| a.kind == AgentKind::Target)
    }

    /// Agent the grid is anchored on: the target when one exists, otherwise
    /// the first vehicle in file order (the ego vehicle by convention).
    pub fn anchor_agent(&self) -> Result<&Agent> {
        if let Some(t) = self.target() {
            return Ok(t);
        }
        self.agents
            .iter()
            .find(|a| a.kind == AgentKind::Vehicle)
            .ok_or_else(|| Error::input("scene has no target and no vehicle to anchor on"))
    }

    /// Re-type one agent as the prediction target (single-target training on
    /// scenes that ship without an explicit target).
    pub fn promote_to_target(&mut self, id: &str) -> Result<()> {
        if self.target().is_some() {
            return Err(Error::input("scene already has a target agent"));
        }
        let agent = self
            .agents
            .iter_mut()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::input(format!("no agent with id {id:?}")))?;
        agent.kind = AgentKind::Target;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.meta.dt <= 0.0 || !self.meta.dt.is_finite() {
            return Err(Error::input(format!("invalid dt {}", self.meta.dt)));
        }
        if self.meta.v_max <= 0.0 || !self.meta.v_max.is_finite() {
            return Err(Error::input(format!("invalid v_max {}", self.meta.v_max)));
        }
        let n_targets = self
            .agents
            .iter()
            .filter(|a| a.kind == AgentKind::Target)
            .count();
        if n_targets > 1 {
            return Err(Error::input(format!(
                "scene has {n_targets} target agents, at most one allowed"
            )));
        }
        for agent in &self.agents {
            if agent.track.is_empty() {
                return Err(Error::input(format!("agent {:?} has an empty track", agent.id)));
            }
            for pair in agent.track.windows(2) {
                if pair[1].t <= pair[0].t {
                    return Err(Error::input(format!(
                        "agent {:?} track times not strictly increasing at t={}",
                        agent.id, pair[1].t
                    )));
                }
            }
            for p in &agent.track {
                if !(p.x.is_finite() && p.y.is_finite() && p.vx.is_finite() && p.vy.is_finite()) {
                    return Err(Error::input(format!(
                        "agent {:?} has a non-finite state at t={}",
                        agent.id, p.t
                    )));
                }
                if p.speed() > self.meta.v_max + 1e-6 {
                    return Err(Error::input(format!(
                        "agent {:?} exceeds v_max at t={}: {:.3} > {:.3} m/s",
                        agent.id,
                        p.t,
                        p.speed(),
                        self.meta.v_max
                    )));
                }
                if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&p.heading) {
                    return Err(Error::input(format!(
                        "agent {:?} heading {} at t={} outside [-pi, pi)",
                        agent.id, p.heading, p.t
                    )));
                }
            }
        }
        for (what, polys) in [
            ("drivable", &self.map.drivable),
            ("crossing", &self.map.crossings),
        ] {
            for (i, poly) in polys.iter().enumerate() {
                if poly.len() < 3 {
                    return Err(Error::input(format!(
                        "{what} polygon {i} has {} vertices, need at least 3",
                        poly.len()
                    )));
                }
                if polygon_self_intersects(poly) {
                    return Err(Error::input(format!("{what} polygon {i} self-intersects")));
                }
            }
        }
        for (i, lane) in self.map.lanes.iter().enumerate() {
            if lane.pts.len() < 2 {
                return Err(Error::input(format!(
                    "lane {i} has {} points, need at least 2",
                    lane.pts.len()
                )));
            }
            if lane.dirs.len() != lane.pts.len() {
                return Err(Error::input(format!(
                    "lane {i} has {} directions for {} points",
                    lane.dirs.len(),
                    lane.pts.len()
                )));
            }
        }
        Ok(())
    }

    /// Parse and validate a scene. Headings are wrapped into `[-pi, pi)`
    /// before validation; a duplicated closing polygon vertex is dropped.
    pub fn from_json(json: &str) -> Result<Scene> {
        let mut scene: Scene =
            serde_json::from_str(json).map_err(|e| Error::input(format!("scene parse: {e}")))?;
        for agent in &mut scene.agents {
            for p in &mut agent.track {
                p.heading = wrap_angle(p.heading);
            }
        }
        for polys in [&mut scene.map.drivable, &mut scene.map.crossings] {
            for poly in polys.iter_mut() {
                if poly.len() >= 2 {
                    let (first, last) = (poly[0], *poly.last().unwrap());
                    if first.dist(last) < 1e-12 {
                        poly.pop();
                    }
                }
            }
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read scene {}: {e}", path.display())))?;
        Scene::from_json(&json)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Scene file listing written by the dataset generator and consumed by
/// training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
    pub seed: u64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&json).map_err(|e| Error::input(format!("manifest parse: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Load every referenced scene, resolving relative paths against the
    /// manifest's directory.
    pub fn load_scenes(&self, manifest_path: &Path) -> Result<Vec<Scene>> {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.scenes
            .iter()
            .map(|e| {
                let p = Path::new(&e.path);
                let full = if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                };
                Scene::load(&full)
            })
            .collect()
    }
}

/// Deterministically shuffle scene indices and split them by `ratios`
/// (which must sum to 1). Returns one index list per ratio.
pub fn split_dataset(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if ratios.is_empty() {
        return Err(Error::input("split needs at least one ratio"));
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::input(format!("split ratios out of range: {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!(
            "split ratios sum to {total}, expected 1"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut out = Vec::with_capacity(ratios.len());
    let mut taken = 0usize;
    for (i, &r) in ratios.iter().enumerate() {
        let count = if i + 1 == ratios.len() {
            n - taken
        } else {
            ((n as f64) * r).round() as usize
        };
        let count = count.min(n - taken);
        out.push(idx[taken..taken + count].to_vec());
        taken += count;
    }
    Ok(out)
}
