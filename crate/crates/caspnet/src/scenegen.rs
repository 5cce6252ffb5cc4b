//! Deterministic synthetic scene generation: scripted traffic scenarios on
//! simple road geometries, emitted in the scene file format. Speeds are kept
//! low enough that a 6-second future stays inside the forward part of the
//! region of interest.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Vec2};
use crate::scene::{Agent, AgentKind, Lane, Manifest, ManifestEntry, Scene, SceneMeta, TrackPoint, VectorMap};

/// Hard limit on per-step speed change, m/s^2.
pub const A_MAX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Straight,
    Turn,
    LeadStopLaneChange,
    PedestrianCrossing,
    BimodalIntersection,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::Turn,
        ScenarioKind::LeadStopLaneChange,
        ScenarioKind::PedestrianCrossing,
        ScenarioKind::BimodalIntersection,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Turn => "turn",
            ScenarioKind::LeadStopLaneChange => "lead_stop_lane_change",
            ScenarioKind::PedestrianCrossing => "pedestrian_crossing",
            ScenarioKind::BimodalIntersection => "bimodal_intersection",
        }
    }

    pub fn parse(s: &str) -> Result<ScenarioKind> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown scenario kind {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// observed steps including step 0
    pub past_steps: usize,
    /// future steps
    pub future_steps: usize,
    /// seconds per step
    pub dt: f64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            seed,
            past_steps: 3,
            future_steps: 12,
            dt: 0.5,
        }
    }

    fn steps(&self) -> usize {
        self.past_steps + self.future_steps
    }
}

/// Build an agent from positions sampled at the scenario cadence.
/// Velocities are central differences (one-sided at the ends); headings
/// follow the velocity, falling back to `rest_heading` while stationary.
fn agent_from_positions(
    id: &str,
    kind: AgentKind,
    positions: &[Vec2],
    past_steps: usize,
    dt: f64,
    rest_heading: f64,
) -> Agent {
    let n = positions.len();
    let mut track = Vec::with_capacity(n);
    let mut last_heading = wrap_angle(rest_heading);
    for i in 0..n {
        let v = if n == 1 {
            Vec2::new(0.0, 0.0)
        } else if i == 0 {
            positions[1].sub(positions[0]).scale(1.0 / dt)
        } else if i == n - 1 {
            positions[n - 1].sub(positions[n - 2]).scale(1.0 / dt)
        } else {
            positions[i + 1].sub(positions[i - 1]).scale(1.0 / (2.0 * dt))
        };
        let heading = if v.norm() >= 0.1 {
            last_heading = wrap_angle(v.angle());
            last_heading
        } else {
            last_heading
        };
        track.push(TrackPoint {
            t: i as i32 - (past_steps as i32 - 1),
            x: positions[i].x,
            y: positions[i].y,
            vx: v.x,
            vy: v.y,
            heading,
        });
    }
    Agent {
        id: id.to_string(),
        kind,
        track,
    }
}

fn assert_continuity(scene: &Scene, dt: f64) -> Result<()> {
    for agent in &scene.agents {
        for w in agent.track.windows(2) {
            let dv = Vec2::new(w[1].vx - w[0].vx, w[1].vy - w[0].vy).norm();
            if dv > A_MAX * dt + 1e-9 {
                return Err(Error::input(format!(
                    "agent {:?} accelerates at {:.2} m/s^2, above the {A_MAX} cap",
                    agent.id,
                    dv / dt
                )));
            }
        }
    }
    Ok(())
}

// -- map helpers -------------------------------------------------------------

fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Vec2> {
    vec![
        Vec2::new(x0, y0),
        Vec2::new(x1, y0),
        Vec2::new(x1, y1),
        Vec2::new(x0, y1),
    ]
}

/// Straight lane centerline along +x (or -x when `dir` is reversed),
/// sampled every ~4 m.
fn straight_lane(x0: f64, x1: f64, y: f64, dir: f64) -> Lane {
    let n = (((x1 - x0).abs() / 4.0).ceil() as usize).max(1);
    let pts: Vec<Vec2> = (0..=n)
        .map(|i| Vec2::new(x0 + (x1 - x0) * i as f64 / n as f64, y))
        .collect();
    let dirs = vec![wrap_angle(dir); pts.len()];
    Lane { pts, dirs }
}

fn vertical_lane(y0: f64, y1: f64, x: f64, dir: f64) -> Lane {
    let n = (((y1 - y0).abs() / 4.0).ceil() as usize).max(1);
    let pts: Vec<Vec2> = (0..=n)
        .map(|i| Vec2::new(x, y0 + (y1 - y0) * i as f64 / n as f64))
        .collect();
    let dirs = vec![wrap_angle(dir); pts.len()];
    Lane { pts, dirs }
}

/// Lane that follows a sampled path, with tangent directions.
fn path_lane(positions: &[Vec2]) -> Lane {
    let mut dirs = Vec::with_capacity(positions.len());
    for i in 0..positions.len() {
        let d = if i == 0 {
            positions[1].sub(positions[0])
        } else if i == positions.len() - 1 {
            positions[i].sub(positions[i - 1])
        } else {
            positions[i + 1].sub(positions[i - 1])
        };
        dirs.push(wrap_angle(d.angle()));
    }
    Lane {
        pts: positions.to_vec(),
        dirs,
    }
}

const LANE_HALF: f64 = 1.75;
const ROAD_HALF: f64 = 4.0;

fn straight_road_map(x0: f64, x1: f64) -> VectorMap {
    VectorMap {
        drivable: vec![rect(x0, x1, -ROAD_HALF, ROAD_HALF)],
        crossings: vec![],
        lanes: vec![
            straight_lane(x0, x1, -LANE_HALF, 0.0),
            straight_lane(x1, x0, LANE_HALF, std::f64::consts::PI),
        ],
    }
}

fn cross_road_map(cx: f64) -> VectorMap {
    let mut map = straight_road_map(-60.0, cx + 30.0);
    map.drivable
        .push(rect(cx - ROAD_HALF, cx + ROAD_HALF, -40.0, 40.0));
    map.lanes.push(vertical_lane(
        -40.0,
        40.0,
        cx + LANE_HALF,
        std::f64::consts::FRAC_PI_2,
    ));
    map.lanes.push(vertical_lane(
        40.0,
        -40.0,
        cx - LANE_HALF,
        -std::f64::consts::FRAC_PI_2,
    ));
    map
}

// -- scenario scripts --------------------------------------------------------

/// Positions along: straight along +x in lane `y`, then (optionally) a
/// quarter-circle turn of radius `r` starting `d0` past the origin,
/// continuing straight after the arc. `turn` is +1 for left, -1 for right,
/// 0 for straight through.
fn turning_path(s: f64, y: f64, d0: f64, r: f64, turn: f64) -> Vec2 {
    if turn == 0.0 || s <= d0 {
        return Vec2::new(s, y);
    }
    let arc = std::f64::consts::FRAC_PI_2 * r;
    if s <= d0 + arc {
        let theta = (s - d0) / r;
        Vec2::new(d0 + r * theta.sin(), y + turn * r * (1.0 - theta.cos()))
    } else {
        Vec2::new(d0 + r, y + turn * (r + (s - d0 - arc)))
    }
}

fn sample_arc_positions(
    spec: &ScenarioSpec,
    v: f64,
    y: f64,
    d0: f64,
    r: f64,
    turn: f64,
) -> Vec<Vec2> {
    (0..spec.steps())
        .map(|i| {
            let s = v * spec.dt * (i as f64 - (spec.past_steps as f64 - 1.0));
            turning_path(s, y, d0, r, turn)
        })
        .collect()
}

fn gen_straight(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Scene {
    let v = rng.gen_range(2.5..4.2);
    let ego = sample_arc_positions(spec, v, -LANE_HALF, 0.0, 1.0, 0.0);
    let mut agents = vec![agent_from_positions(
        "ego",
        AgentKind::Vehicle,
        &ego,
        spec.past_steps,
        spec.dt,
        0.0,
    )];
    if rng.gen_bool(0.7) {
        let v2 = rng.gen_range(2.0..4.0);
        let x0 = rng.gen_range(10.0..20.0);
        let oncoming: Vec<Vec2> = (0..spec.steps())
            .map(|i| {
                let t = spec.dt * (i as f64 - (spec.past_steps as f64 - 1.0));
                Vec2::new(x0 - v2 * t, LANE_HALF)
            })
            .collect();
        agents.push(agent_from_positions(
            "oncoming",
            AgentKind::Vehicle,
            &oncoming,
            spec.past_steps,
            spec.dt,
            std::f64::consts::PI,
        ));
    }
    Scene {
        meta: SceneMeta { dt: spec.dt, v_max: 15.0 },
        agents,
        map: straight_road_map(-60.0, 32.0),
    }
}

fn gen_turn(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Scene {
    let v = rng.gen_range(2.5..4.0);
    let turn = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let r = rng.gen_range(6.0..10.0);
    let d0 = rng.gen_range(4.0..8.0);
    let ego = sample_arc_positions(spec, v, -LANE_HALF, d0, r, turn);
    let mut map = cross_road_map(d0 + r);
    map.lanes.push(path_lane(&sample_path_dense(v, d0, r, turn)));
    Scene {
        meta: SceneMeta { dt: spec.dt, v_max: 15.0 },
        agents: vec![agent_from_positions(
            "ego",
            AgentKind::Vehicle,
            &ego,
            spec.past_steps,
            spec.dt,
            0.0,
        )],
        map,
    }
}

/// Dense samples of the ego turning path for the lane layer.
fn sample_path_dense(v: f64, d0: f64, r: f64, turn: f64) -> Vec<Vec2> {
    let total = 6.0 * v + 4.0;
    let n = ((total + 10.0) / 2.0).ceil() as usize;
    (0..=n)
        .map(|i| {
            let s = -10.0 + (total + 10.0) * i as f64 / n as f64;
            turning_path(s, -LANE_HALF, d0, r, turn)
        })
        .collect()
}

fn gen_lead_stop(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Scene {
    let v0 = rng.gen_range(3.0..4.5);
    let lead_x = rng.gen_range(14.0..18.0);
    let lead_pos = vec![Vec2::new(lead_x, -LANE_HALF); spec.steps()];
    let mut ego = Vec::with_capacity(spec.steps());
    let mut x;
    let mut y = -LANE_HALF;
    let mut change_steps_left = -1i32;
    for i in 0..spec.steps() {
        let t = spec.dt * (i as f64 - (spec.past_steps as f64 - 1.0));
        x = v0 * t;
        if change_steps_left < 0 && t >= 0.0 && lead_x - x < 15.0 {
            change_steps_left = 4;
        }
        if change_steps_left > 0 {
            y += 2.0 * LANE_HALF / 4.0;
            change_steps_left -= 1;
        }
        ego.push(Vec2::new(x, y));
    }
    Scene {
        meta: SceneMeta { dt: spec.dt, v_max: 15.0 },
        agents: vec![
            agent_from_positions("ego", AgentKind::Vehicle, &ego, spec.past_steps, spec.dt, 0.0),
            agent_from_positions(
                "lead",
                AgentKind::Vehicle,
                &lead_pos,
                spec.past_steps,
                spec.dt,
                0.0,
            ),
        ],
        map: straight_road_map(-60.0, 32.0),
    }
}

fn gen_pedestrian(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Scene {
    let xc = rng.gen_range(8.0..14.0);
    let vp = rng.gen_range(1.0..1.5);
    let up = rng.gen_bool(0.5);
    let y0 = rng.gen_range(-5.0..-2.0) * if up { 1.0 } else { -1.0 };
    let px = xc + rng.gen_range(-0.5..0.5);
    let ped: Vec<Vec2> = (0..spec.steps())
        .map(|i| {
            let t = spec.dt * (i as f64 - (spec.past_steps as f64 - 1.0));
            let dir = if up { 1.0 } else { -1.0 };
            Vec2::new(px, y0 + dir * vp * t)
        })
        .collect();

    // the vehicle slows toward the crossing and creeps once slow
    let v0 = rng.gen_range(3.0..4.0);
    let mut ego = Vec::with_capacity(spec.steps());
    let mut x = -v0 * spec.dt * (spec.past_steps as f64 - 1.0);
    let mut v = v0;
    for i in 0..spec.steps() {
        if i > 0 {
            if i >= spec.past_steps {
                v = (v - 1.0 * spec.dt).max(0.8);
            }
            x += v * spec.dt;
        }
        ego.push(Vec2::new(x, -LANE_HALF));
    }

    let mut map = straight_road_map(-60.0, 32.0);
    map.crossings.push(rect(xc - 1.5, xc + 1.5, -6.0, 6.0));
    Scene {
        meta: SceneMeta { dt: spec.dt, v_max: 15.0 },
        agents: vec![
            agent_from_positions("ego", AgentKind::Vehicle, &ego, spec.past_steps, spec.dt, 0.0),
            agent_from_positions(
                "ped",
                AgentKind::Pedestrian,
                &ped,
                spec.past_steps,
                spec.dt,
                if up {
                    std::f64::consts::FRAC_PI_2
                } else {
                    -std::f64::consts::FRAC_PI_2
                },
            ),
        ],
        map,
    }
}

fn gen_bimodal(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Scene {
    let v = rng.gen_range(2.5..3.5);
    let d0 = rng.gen_range(6.0..9.0);
    let r = 6.0;
    // identical approach, future branches across seeds
    let turn = match rng.gen_range(0..3) {
        0 => 0.0,
        1 => 1.0,
        _ => -1.0,
    };
    let ego = sample_arc_positions(spec, v, -LANE_HALF, d0, r, turn);
    let mut map = cross_road_map(d0 + r);
    if turn != 0.0 {
        map.lanes.push(path_lane(&sample_path_dense(v, d0, r, turn)));
    }
    Scene {
        meta: SceneMeta { dt: spec.dt, v_max: 15.0 },
        agents: vec![agent_from_positions(
            "ego",
            AgentKind::Vehicle,
            &ego,
            spec.past_steps,
            spec.dt,
            0.0,
        )],
        map,
    }
}

/// Generate one scene. The same spec always produces the same scene.
pub fn generate(spec: &ScenarioSpec) -> Result<Scene> {
    if spec.past_steps == 0 || spec.future_steps == 0 {
        return Err(Error::input("scenario needs past and future steps"));
    }
    if spec.dt <= 0.0 {
        return Err(Error::input("scenario dt must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = match spec.kind {
        ScenarioKind::Straight => gen_straight(spec, &mut rng),
        ScenarioKind::Turn => gen_turn(spec, &mut rng),
        ScenarioKind::LeadStopLaneChange => gen_lead_stop(spec, &mut rng),
        ScenarioKind::PedestrianCrossing => gen_pedestrian(spec, &mut rng),
        ScenarioKind::BimodalIntersection => gen_bimodal(spec, &mut rng),
    };
    scene.validate()?;
    assert_continuity(&scene, spec.dt)?;
    Ok(scene)
}

/// Generate `count` scenes cycling through `kinds`, write them plus a
/// manifest into `dir`, and return the manifest path.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    kinds: &[ScenarioKind],
    seed: u64,
) -> Result<PathBuf> {
    if kinds.is_empty() {
        return Err(Error::input("no scenario kinds given"));
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let scene_seed = seed
            .wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
            .wrapping_add(1);
        let scene = generate(&ScenarioSpec::new(kind, scene_seed))?;
        let name = format!("scene_{i:04}.json");
        scene.save(&dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            kind: kind.as_str().to_string(),
            seed: scene_seed,
        });
    }
    let manifest_path = dir.join("manifest.json");
    Manifest { scenes: entries }.save(&manifest_path)?;
    Ok(manifest_path)
}
