//! Bird's-eye-view rasterization.
//!
//! The grid frame is anchored on one agent: its position at step 0 maps to a
//! fixed anchor pixel and its heading points along +u. Pixel `(u, v)` is
//! centered at continuous grid coordinate `(u, v)`; continuous positions are
//! assigned to the nearest pixel and the sub-pixel remainder in `[-0.5, 0.5)`
//! goes into the offset channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{point_in_polygon, wrap_angle, Vec2};
use crate::scene::{Agent, AgentKind, Scene};
use crate::tensor::{Element, GridTensor};

/// Number of input feature channels per step:
/// (target, vehicle, pedestrian, du, dv, vu, vv).
pub const INPUT_CHANNELS: usize = 7;

/// Offset channels appended after the class channels in outputs and ground
/// truth.
pub const OFFSET_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    SingleTarget,
    Scene,
}

impl PredictionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictionMode::SingleTarget => "single_target",
            PredictionMode::Scene => "scene",
        }
    }

    pub fn parse(s: &str) -> Result<PredictionMode> {
        match s {
            "single_target" => Ok(PredictionMode::SingleTarget),
            "scene" => Ok(PredictionMode::Scene),
            other => Err(Error::input(format!(
                "unknown mode {other:?}, expected single_target or scene"
            ))),
        }
    }

    /// Output class channels for this mode, in channel order.
    pub fn classes(&self) -> Vec<AgentKind> {
        match self {
            PredictionMode::SingleTarget => vec![AgentKind::Target],
            PredictionMode::Scene => {
                vec![AgentKind::Target, AgentKind::Vehicle, AgentKind::Pedestrian]
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RasterConfig {
    /// longitudinal grid extent in pixels (rows)
    pub u_extent: usize,
    /// lateral grid extent in pixels (columns)
    pub v_extent: usize,
    /// meters per pixel
    pub resolution: f64,
    /// anchor pixel along u; +u is the anchor heading, so 122 of 152 leaves
    /// 29 px ahead and 122 px behind at 1 m/px
    pub anchor_u: f64,
    /// anchor pixel along v (grid mid-line)
    pub anchor_v: f64,
    /// observed input steps M (including step 0)
    pub input_steps: usize,
    /// predicted future steps N
    pub output_steps: usize,
    /// seconds per step
    pub dt: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            u_extent: 152,
            v_extent: 80,
            resolution: 1.0,
            anchor_u: 122.0,
            anchor_v: 40.0,
            input_steps: 3,
            output_steps: 12,
            dt: 0.5,
        }
    }
}

impl RasterConfig {
    /// Same proportions at different extents (anchor 80% along u, centered
    /// along v). Used by small test configurations.
    pub fn with_extents(u: usize, v: usize) -> Self {
        RasterConfig {
            u_extent: u,
            v_extent: v,
            anchor_u: (u as f64 * 0.8).round(),
            anchor_v: (v as f64 / 2.0).floor(),
            ..RasterConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_extent == 0 || self.v_extent == 0 {
            return Err(Error::config("grid extents must be positive"));
        }
        if self.resolution <= 0.0 {
            return Err(Error::config("resolution must be positive"));
        }
        if self.anchor_u < 0.0
            || self.anchor_u >= self.u_extent as f64
            || self.anchor_v < 0.0
            || self.anchor_v >= self.v_extent as f64
        {
            return Err(Error::config(format!(
                "anchor ({}, {}) outside {}x{} grid",
                self.anchor_u, self.anchor_v, self.u_extent, self.v_extent
            )));
        }
        if self.input_steps == 0 || self.output_steps == 0 {
            return Err(Error::config("step counts must be positive"));
        }
        if self.dt <= 0.0 {
            return Err(Error::config("dt must be positive"));
        }
        Ok(())
    }

    /// Nearest pixel for a continuous grid coordinate.
    pub fn round_px(x: f64) -> i64 {
        (x + 0.5).floor() as i64
    }

    pub fn pixel_of(&self, g: Vec2) -> (i64, i64) {
        (Self::round_px(g.x), Self::round_px(g.y))
    }

    pub fn in_bounds(&self, pu: i64, pv: i64) -> bool {
        pu >= 0 && (pu as usize) < self.u_extent && pv >= 0 && (pv as usize) < self.v_extent
    }

    /// A continuous grid point is inside the region of interest when its
    /// nearest pixel is on the grid.
    pub fn contains(&self, g: Vec2) -> bool {
        let (pu, pv) = self.pixel_of(g);
        self.in_bounds(pu, pv)
    }
}

/// World-to-grid transform of one sample.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Frame {
    /// anchor world position at step 0
    pub origin: Vec2,
    /// anchor world heading at step 0 (maps to +u)
    pub rotation: f64,
    /// grid coordinates the origin maps to
    pub anchor_px: Vec2,
    /// meters per pixel
    pub resolution: f64,
}

impl Frame {
    pub fn to_grid(&self, p: Vec2) -> Vec2 {
        let d = p.sub(self.origin).rotate(-self.rotation);
        self.anchor_px.add(d.scale(1.0 / self.resolution))
    }

    pub fn to_world(&self, g: Vec2) -> Vec2 {
        let d = g.sub(self.anchor_px).scale(self.resolution);
        self.origin.add(d.rotate(self.rotation))
    }

    /// Rotate a world-frame vector (velocity) into grid axes; magnitude is
    /// preserved (m/s stays m/s).
    pub fn vec_to_grid(&self, v: Vec2) -> Vec2 {
        v.rotate(-self.rotation)
    }

    pub fn heading_to_grid(&self, h: f64) -> f64 {
        wrap_angle(h - self.rotation)
    }
}

/// Frame anchored on the scene's anchor agent at step 0.
pub fn scene_frame(scene: &Scene, cfg: &RasterConfig) -> Result<Frame> {
    let anchor = scene.anchor_agent()?;
    let state = anchor.point_at(0).ok_or_else(|| {
        Error::input(format!("anchor agent {:?} has no state at step 0", anchor.id))
    })?;
    Ok(Frame {
        origin: state.pos(),
        rotation: state.heading,
        anchor_px: Vec2::new(cfg.anchor_u, cfg.anchor_v),
        resolution: cfg.resolution,
    })
}

/// Input rasters for the M observed steps, each `(7, U, V)`.
#[derive(Debug, Clone)]
pub struct InputGridSeq<T: Element> {
    pub steps: Vec<GridTensor<T>>,
}

fn input_class_channel(kind: AgentKind) -> usize {
    match kind {
        AgentKind::Target => 0,
        AgentKind::Vehicle => 1,
        AgentKind::Pedestrian => 2,
    }
}

/// Rasterize the observed trajectories of every agent into per-step input
/// grids. When two agents land on the same pixel the earlier agent in file
/// order keeps it.
pub fn rasterize_trajectories<T: Element>(
    scene: &Scene,
    cfg: &RasterConfig,
    frame: &Frame,
) -> Result<InputGridSeq<T>> {
    cfg.validate()?;
    let (u_ext, v_ext) = (cfg.u_extent, cfg.v_extent);
    let plane = u_ext * v_ext;
    let mut steps = Vec::with_capacity(cfg.input_steps);
    for m in 0..cfg.input_steps {
        let t = m as i32 - (cfg.input_steps as i32 - 1);
        let mut grid = GridTensor::<T>::zeros(&[INPUT_CHANNELS, u_ext, v_ext]);
        for agent in &scene.agents {
            let Some(p) = agent.point_at(t) else {
                continue;
            };
            let g = frame.to_grid(p.pos());
            let (pu, pv) = cfg.pixel_of(g);
            if !cfg.in_bounds(pu, pv) {
                continue;
            }
            let idx = pu as usize * v_ext + pv as usize;
            let data = grid.data_mut();
            let occupied = (0..3).any(|c| data[c * plane + idx] != T::zero());
            if occupied {
                continue;
            }
            let v_grid = frame.vec_to_grid(p.vel());
            data[input_class_channel(agent.kind) * plane + idx] = T::one();
            data[3 * plane + idx] = T::from_f64(g.x - pu as f64);
            data[4 * plane + idx] = T::from_f64(g.y - pv as f64);
            data[5 * plane + idx] = T::from_f64(v_grid.x);
            data[6 * plane + idx] = T::from_f64(v_grid.y);
        }
        steps.push(grid);
    }
    Ok(InputGridSeq { steps })
}

// ---------------------------------------------------------------------------
// map rasterization
// ---------------------------------------------------------------------------

const DRIVABLE_COLOR: [f64; 3] = [0.3, 0.3, 0.3];
const CROSSING_COLOR: [f64; 3] = [0.8, 0.8, 0.2];

/// Standard HSV to RGB, all components in [0, 1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color encoding a lane direction: the angle (wrapped to `[0, 2pi)`) is the
/// hue at full saturation and value, so 0 rad is red and the hue runs once
/// around the color circle.
pub fn lane_direction_color(angle: f64) -> [f64; 3] {
    let hue = angle.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
    hsv_to_rgb(hue, 1.0, 1.0)
}

fn paint_polygons<T: Element>(
    grid: &mut GridTensor<T>,
    polys: &[Vec<Vec2>],
    frame: &Frame,
    cfg: &RasterConfig,
    color: [f64; 3],
) {
    let (u_ext, v_ext) = (cfg.u_extent, cfg.v_extent);
    let plane = u_ext * v_ext;
    for poly in polys {
        let gpoly: Vec<Vec2> = poly.iter().map(|&p| frame.to_grid(p)).collect();
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &gpoly {
            lo_u = lo_u.min(p.x);
            hi_u = hi_u.max(p.x);
            lo_v = lo_v.min(p.y);
            hi_v = hi_v.max(p.y);
        }
        let u0 = (lo_u.floor().max(0.0)) as usize;
        let u1 = (hi_u.ceil().min(u_ext as f64 - 1.0)).max(0.0) as usize;
        let v0 = (lo_v.floor().max(0.0)) as usize;
        let v1 = (hi_v.ceil().min(v_ext as f64 - 1.0)).max(0.0) as usize;
        if lo_u > u_ext as f64 - 1.0 || hi_u < 0.0 || lo_v > v_ext as f64 - 1.0 || hi_v < 0.0 {
            continue;
        }
        let data = grid.data_mut();
        for u in u0..=u1 {
            for v in v0..=v1 {
                if point_in_polygon(Vec2::new(u as f64, v as f64), &gpoly) {
                    let idx = u * v_ext + v;
                    for (c, &col) in color.iter().enumerate() {
                        data[c * plane + idx] = T::from_f64(col);
                    }
                }
            }
        }
    }
}

/// Rasterize the vector map into a `(3, U, V)` RGB image: drivable areas,
/// then crossings, then lane centerlines colored by their on-grid direction
/// (painted in that order so smaller elements stay visible).
pub fn rasterize_map<T: Element>(
    scene: &Scene,
    cfg: &RasterConfig,
    frame: &Frame,
) -> Result<GridTensor<T>> {
    cfg.validate()?;
    let (u_ext, v_ext) = (cfg.u_extent, cfg.v_extent);
    let plane = u_ext * v_ext;
    let mut grid = GridTensor::<T>::zeros(&[3, u_ext, v_ext]);
    paint_polygons(&mut grid, &scene.map.drivable, frame, cfg, DRIVABLE_COLOR);
    paint_polygons(&mut grid, &scene.map.crossings, frame, cfg, CROSSING_COLOR);
    for lane in &scene.map.lanes {
        for i in 0..lane.pts.len() - 1 {
            let a = frame.to_grid(lane.pts[i]);
            let b = frame.to_grid(lane.pts[i + 1]);
            let da = frame.heading_to_grid(lane.dirs[i]);
            let db = frame.heading_to_grid(lane.dirs[i + 1]);
            let (sa, ca) = (da.sin(), da.cos());
            let (sb, cb) = (db.sin(), db.cos());
            let len = a.dist(b);
            let samples = (len / 0.25).ceil().max(1.0) as usize;
            for s in 0..=samples {
                let f = s as f64 / samples as f64;
                let p = a.add(b.sub(a).scale(f));
                let (pu, pv) = cfg.pixel_of(p);
                if !cfg.in_bounds(pu, pv) {
                    continue;
                }
                // interpolate direction through unit vectors to avoid the wrap seam
                let dir = (sa + f * (sb - sa)).atan2(ca + f * (cb - ca));
                let rgb = lane_direction_color(dir);
                let idx = pu as usize * v_ext + pv as usize;
                let data = grid.data_mut();
                for (c, &col) in rgb.iter().enumerate() {
                    data[c * plane + idx] = T::from_f64(col);
                }
            }
        }
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// ground truth
// ---------------------------------------------------------------------------

/// Per-step standard deviation schedules for the ground-truth kernels.
#[derive(Debug, Clone)]
pub struct KernelParams {
    /// base lateral std-dev per future step, meters
    pub sigma_initial_lat: Vec<f64>,
    /// base longitudinal std-dev per future step, meters
    pub sigma_initial_long: Vec<f64>,
    /// lateral std-dev reached at v_max, meters
    pub sigma_max_lat: f64,
    /// longitudinal std-dev reached at v_max, meters
    pub sigma_max_long: f64,
    /// speed at which the velocity-dependent term saturates, m/s
    pub v_max: f64,
}

impl KernelParams {
    /// Default schedules for `n` future steps: the base std-devs grow
    /// linearly with the step index (0.5 + 0.1 t lateral, 1.0 + 0.2 t
    /// longitudinal, t = 1..n).
    pub fn defaults_for(n: usize) -> Self {
        KernelParams {
            sigma_initial_lat: (1..=n).map(|t| 0.5 + 0.1 * t as f64).collect(),
            sigma_initial_long: (1..=n).map(|t| 1.0 + 0.2 * t as f64).collect(),
            sigma_max_lat: 2.0,
            sigma_max_long: 4.0,
            v_max: 15.0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.sigma_initial_lat.len() != n || self.sigma_initial_long.len() != n {
            return Err(Error::config(format!(
                "kernel schedules cover {} / {} steps, expected {n}",
                self.sigma_initial_lat.len(),
                self.sigma_initial_long.len()
            )));
        }
        if self.v_max <= 0.0 || self.sigma_max_lat <= 0.0 || self.sigma_max_long <= 0.0 {
            return Err(Error::config("kernel parameters must be positive"));
        }
        for t in 0..n {
            let (lat, long) = (self.sigma_initial_lat[t], self.sigma_initial_long[t]);
            if lat <= 0.0 || long <= 0.0 {
                return Err(Error::config(format!(
                    "kernel std-devs must be positive at step {}",
                    t + 1
                )));
            }
            if long < lat {
                return Err(Error::config(format!(
                    "longitudinal std-dev {long} below lateral {lat} at step {}",
                    t + 1
                )));
            }
        }
        if self.sigma_max_long < self.sigma_max_lat {
            return Err(Error::config(
                "longitudinal max std-dev below lateral max",
            ));
        }
        Ok(())
    }

    /// Speed-scaled std-devs `(longitudinal, lateral)` for future step
    /// `t_idx` (1-based). Speeds beyond `v_max` are clamped.
    pub fn sigma_for(&self, speed: f64, t_idx: usize) -> (f64, f64) {
        let v = if speed > self.v_max {
            log::warn!("speed {speed:.2} m/s above kernel v_max {}; clamping", self.v_max);
            self.v_max
        } else {
            speed.max(0.0)
        };
        let long = self.sigma_max_long / self.v_max * v + self.sigma_initial_long[t_idx - 1];
        let lat = self.sigma_max_lat / self.v_max * v + self.sigma_initial_lat[t_idx - 1];
        (long, lat)
    }
}

/// Ground-truth grids for the N future steps, each `(|C| + 2, U, V)` with
/// class heat maps followed by the two offset channels, plus per-step
/// per-class counts of agents inside the region of interest.
#[derive(Debug, Clone)]
pub struct GroundTruthSeq<T: Element> {
    pub steps: Vec<GridTensor<T>>,
    pub counts: Vec<Vec<usize>>,
    pub n_classes: usize,
}

/// Write one rotated anisotropic Gaussian (peak exactly 1 at the peak pixel,
/// truncated at Mahalanobis distance 3) into `channel`, combining with the
/// existing values by per-pixel maximum.
#[allow(clippy::too_many_arguments)]
fn splat_kernel<T: Element>(
    data: &mut [T],
    channel: usize,
    plane: usize,
    cfg: &RasterConfig,
    peak: (i64, i64),
    heading: f64,
    sigma_long: f64,
    sigma_lat: f64,
) {
    let (s, c) = heading.sin_cos();
    let radius = (3.0 * sigma_long.max(sigma_lat)).ceil() as i64;
    let (pu, pv) = peak;
    for du in -radius..=radius {
        let u = pu + du;
        if u < 0 || u as usize >= cfg.u_extent {
            continue;
        }
        for dv in -radius..=radius {
            let v = pv + dv;
            if v < 0 || v as usize >= cfg.v_extent {
                continue;
            }
            let long = du as f64 * c + dv as f64 * s;
            let lat = -(du as f64) * s + dv as f64 * c;
            let m2 = (long / sigma_long).powi(2) + (lat / sigma_lat).powi(2);
            if m2 > 9.0 {
                continue;
            }
            let val = T::from_f64((-0.5 * m2).exp());
            let idx = channel * plane + u as usize * cfg.v_extent + v as usize;
            if val > data[idx] {
                data[idx] = val;
            }
        }
    }
}

/// Build ground-truth heat maps for the supervised agents: every agent in
/// scene mode, only the target in single-target mode. Offsets are written at
/// peak pixels (first agent in file order wins a contested pixel).
pub fn make_ground_truth<T: Element>(
    scene: &Scene,
    cfg: &RasterConfig,
    kp: &KernelParams,
    frame: &Frame,
    mode: PredictionMode,
) -> Result<GroundTruthSeq<T>> {
    cfg.validate()?;
    kp.validate(cfg.output_steps)?;
    let classes = mode.classes();
    let n_classes = classes.len();
    let (u_ext, v_ext) = (cfg.u_extent, cfg.v_extent);
    let plane = u_ext * v_ext;
    let mut steps = Vec::with_capacity(cfg.output_steps);
    let mut counts = Vec::with_capacity(cfg.output_steps);

    let supervised: Vec<&Agent> = match mode {
        PredictionMode::SingleTarget => {
            let t = scene
                .target()
                .ok_or_else(|| Error::input("single-target mode needs a target agent"))?;
            vec![t]
        }
        PredictionMode::Scene => scene.agents.iter().collect(),
    };

    for k in 1..=cfg.output_steps {
        let mut grid = GridTensor::<T>::zeros(&[n_classes + OFFSET_CHANNELS, u_ext, v_ext]);
        let mut step_counts = vec![0usize; n_classes];
        let mut peak_taken = vec![false; plane];
        let data = grid.data_mut();
        for agent in &supervised {
            let Some(class) = classes.iter().position(|&c| c == agent.kind) else {
                continue;
            };
            let Some(p) = agent.point_at(k as i32) else {
                continue;
            };
            let g = frame.to_grid(p.pos());
            let (pu, pv) = cfg.pixel_of(g);
            if !cfg.in_bounds(pu, pv) {
                continue;
            }
            step_counts[class] += 1;
            let heading = frame.heading_to_grid(agent.heading_at(k as i32).unwrap());
            let (sigma_long, sigma_lat) = kp.sigma_for(p.speed(), k);
            splat_kernel(
                data,
                class,
                plane,
                cfg,
                (pu, pv),
                heading,
                sigma_long / cfg.resolution,
                sigma_lat / cfg.resolution,
            );
            let idx = pu as usize * v_ext + pv as usize;
            if !peak_taken[idx] {
                peak_taken[idx] = true;
                data[n_classes * plane + idx] = T::from_f64(g.x - pu as f64);
                data[(n_classes + 1) * plane + idx] = T::from_f64(g.y - pv as f64);
            }
        }
        steps.push(grid);
        counts.push(step_counts);
    }
    Ok(GroundTruthSeq {
        steps,
        counts,
        n_classes,
    })
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Random rigid transform of the whole scene: rotation `U[0, 2pi)` about the
/// anchor agent's step-0 position, then a translation with components
/// `U[-3, 3]` meters. Applied to every agent state and all map geometry;
/// headings and velocities co-rotate. The grid frame is computed from the
/// un-augmented scene, so augmentation moves agents on the grid.
pub fn augment<R: Rng>(scene: &Scene, rng: &mut R) -> Result<Scene> {
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let tx = rng.gen_range(-3.0..=3.0);
    let ty = rng.gen_range(-3.0..=3.0);
    let anchor = scene.anchor_agent()?;
    let pivot = anchor
        .point_at(0)
        .ok_or_else(|| Error::input("anchor agent has no state at step 0"))?
        .pos();
    let shift = Vec2::new(tx, ty);
    let xf_point = |p: Vec2| p.sub(pivot).rotate(phi).add(pivot).add(shift);

    let mut out = scene.clone();
    for agent in &mut out.agents {
        for p in &mut agent.track {
            let np = xf_point(p.pos());
            let nv = p.vel().rotate(phi);
            p.x = np.x;
            p.y = np.y;
            p.vx = nv.x;
            p.vy = nv.y;
            p.heading = wrap_angle(p.heading + phi);
        }
    }
    for polys in [&mut out.map.drivable, &mut out.map.crossings] {
        for poly in polys.iter_mut() {
            for p in poly.iter_mut() {
                *p = xf_point(*p);
            }
        }
    }
    for lane in &mut out.map.lanes {
        for p in &mut lane.pts {
            *p = xf_point(*p);
        }
        for d in &mut lane.dirs {
            *d = wrap_angle(*d + phi);
        }
    }
    Ok(out)
}
