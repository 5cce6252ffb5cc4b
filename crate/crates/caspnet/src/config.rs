//! Run configuration: a flat `key = value` text file covering the model,
//! training, kernel, and extraction settings, with optional default paths.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::CaspNetConfig;
use crate::raster::{KernelParams, PredictionMode, RasterConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    // model
    pub levels: usize,
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub gabor_enabled: bool,
    pub gabor_orientations: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    pub u_extent: usize,
    pub v_extent: usize,
    pub seed: u64,
    pub mode: PredictionMode,
    // training
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub save_interval: usize,
    pub augment: bool,
    // ground-truth kernel
    pub sigma_max_lat: f64,
    pub sigma_max_long: f64,
    pub kernel_v_max: f64,
    // extraction
    pub threshold: f64,
    // optional default paths, overridable on the command line
    pub data: Option<String>,
    pub checkpoints: Option<String>,
    pub reports: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            levels: 3,
            channels: vec![16, 32, 64],
            dilations: vec![1, 2],
            gabor_enabled: true,
            gabor_orientations: 4,
            input_steps: 3,
            output_steps: 12,
            u_extent: 152,
            v_extent: 80,
            seed: 7,
            mode: PredictionMode::Scene,
            batch_size: 16,
            lr: 1e-4,
            max_steps: 200,
            save_interval: 100,
            augment: true,
            sigma_max_lat: 2.0,
            sigma_max_long: 4.0,
            kernel_v_max: 15.0,
            threshold: 0.05,
            data: None,
            checkpoints: None,
            reports: None,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect()
}

fn parse_classes(v: &str) -> Result<PredictionMode> {
    let names: Vec<&str> = v.split(',').map(str::trim).collect();
    match names.as_slice() {
        ["target"] => Ok(PredictionMode::SingleTarget),
        ["target", "vehicle", "pedestrian"] => Ok(PredictionMode::Scene),
        _ => Err(Error::config(format!(
            "classes: expected \"target\" or \"target,vehicle,pedestrian\", got {v:?}"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_ascii_lowercase();
            let v = value.trim();
            match key.as_str() {
                "pyramid_levels" => cfg.levels = parse_usize(&key, v)?,
                "channels" => cfg.channels = parse_usize_list(&key, v)?,
                "dilations" => cfg.dilations = parse_usize_list(&key, v)?,
                "classes" => cfg.mode = parse_classes(v)?,
                "mode" => {
                    cfg.mode = PredictionMode::parse(v).map_err(|_| {
                        Error::config(format!(
                            "mode: expected single_target or scene, got {v:?}"
                        ))
                    })?
                }
                "gabor_enabled" => cfg.gabor_enabled = parse_bool(&key, v)?,
                "gabor_orientations" => cfg.gabor_orientations = parse_usize(&key, v)?,
                "m" => cfg.input_steps = parse_usize(&key, v)?,
                "n" => cfg.output_steps = parse_usize(&key, v)?,
                "u" => cfg.u_extent = parse_usize(&key, v)?,
                "v" => cfg.v_extent = parse_usize(&key, v)?,
                "seed" => cfg.seed = parse_u64(&key, v)?,
                "batch_size" => cfg.batch_size = parse_usize(&key, v)?,
                "lr" => cfg.lr = parse_f64(&key, v)?,
                "max_steps" => cfg.max_steps = parse_usize(&key, v)?,
                "save_interval" => cfg.save_interval = parse_usize(&key, v)?,
                "augment" => cfg.augment = parse_bool(&key, v)?,
                "sigma_max_lat" => cfg.sigma_max_lat = parse_f64(&key, v)?,
                "sigma_max_long" => cfg.sigma_max_long = parse_f64(&key, v)?,
                "kernel_v_max" => cfg.kernel_v_max = parse_f64(&key, v)?,
                "threshold" => cfg.threshold = parse_f64(&key, v)?,
                "data" => cfg.data = Some(v.to_string()),
                "checkpoints" => cfg.checkpoints = Some(v.to_string()),
                "reports" => cfg.reports = Some(v.to_string()),
                _ => {
                    return Err(Error::config(format!(
                        "line {}: unknown configuration key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        if self.save_interval == 0 {
            return Err(Error::config("save_interval must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must be in (0, 1)"));
        }
        self.network_config().validate()?;
        self.raster_config().validate()?;
        self.kernel_params().validate(self.output_steps)?;
        Ok(())
    }

    pub fn network_config(&self) -> CaspNetConfig {
        CaspNetConfig {
            levels: self.levels,
            channels: self.channels.clone(),
            dilations: self.dilations.clone(),
            gabor_enabled: self.gabor_enabled,
            gabor_orientations: self.gabor_orientations,
            mode: self.mode,
            input_steps: self.input_steps,
            output_steps: self.output_steps,
            u_extent: self.u_extent,
            v_extent: self.v_extent,
            seed: self.seed,
        }
    }

    pub fn raster_config(&self) -> RasterConfig {
        let mut r = RasterConfig::with_extents(self.u_extent, self.v_extent);
        r.input_steps = self.input_steps;
        r.output_steps = self.output_steps;
        r
    }

    pub fn kernel_params(&self) -> KernelParams {
        let mut kp = KernelParams::defaults_for(self.output_steps);
        kp.sigma_max_lat = self.sigma_max_lat;
        kp.sigma_max_long = self.sigma_max_long;
        kp.v_max = self.kernel_v_max;
        kp
    }
}
