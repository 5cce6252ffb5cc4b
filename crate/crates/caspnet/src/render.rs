//! Binary PPM renderings of predicted heatmaps: one image per future step
//! plus a composite where step index maps to hue (red for the first step
//! through magenta for the last).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::extraction::PredictedStep;
use crate::raster::hsv_to_rgb;
use crate::tensor::{Element, GridTensor};

/// Fraction of the map rendering kept as the image base layer.
const MAP_DIM: f64 = 0.35;
/// Hue of the final step in the composite, in turns (300 degrees = magenta).
const HUE_SPAN: f64 = 300.0 / 360.0;

/// Simple 8-bit RGB raster. Rows run top to bottom, columns left to right.
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; 3 * width * height],
        }
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let at = 3 * (row * self.width + col);
        for (i, c) in rgb.iter().enumerate() {
            self.pixels[at + i] = (c.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let at = 3 * (row * self.width + col);
        [
            self.pixels[at] as f64 / 255.0,
            self.pixels[at + 1] as f64 / 255.0,
            self.pixels[at + 2] as f64 / 255.0,
        ]
    }

    /// Write as binary PPM (P6, maxval 255).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.extend_from_slice(&self.pixels);
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Grid cell (u, v) -> image (row, col). +u points ahead of the anchor, so
/// it runs up the image; +v runs right.
fn cell_to_pixel(u: usize, v: usize, u_extent: usize) -> (usize, usize) {
    (u_extent - 1 - u, v)
}

/// Dimmed map base layer, or black when no map grid is given.
fn base_image<T: Element>(
    u_extent: usize,
    v_extent: usize,
    map: Option<&GridTensor<T>>,
) -> Result<RgbImage> {
    let mut img = RgbImage::new(v_extent, u_extent);
    let Some(map) = map else { return Ok(img) };
    let (c, mu, mv) = map.dims3()?;
    if c != 3 || mu != u_extent || mv != v_extent {
        return Err(Error::shape(format!(
            "map grid has shape {:?}, expected (3, {u_extent}, {v_extent})",
            map.shape()
        )));
    }
    for u in 0..u_extent {
        for v in 0..v_extent {
            let rgb = [
                map.at3(0, u, v).to_f64() * MAP_DIM,
                map.at3(1, u, v).to_f64() * MAP_DIM,
                map.at3(2, u, v).to_f64() * MAP_DIM,
            ];
            let (row, col) = cell_to_pixel(u, v, u_extent);
            img.set(row, col, rgb);
        }
    }
    Ok(img)
}

/// Per-class display colors: red, green, cyan-blue.
fn class_color(class: usize) -> [f64; 3] {
    match class % 3 {
        0 => [1.0, 0.15, 0.15],
        1 => [0.15, 1.0, 0.15],
        _ => [0.2, 0.5, 1.0],
    }
}

/// Render one step's class probabilities over an optional map base. Each
/// cell blends the dominant class's color by its probability.
pub fn render_step<T: Element>(
    step: &PredictedStep<T>,
    map: Option<&GridTensor<T>>,
) -> Result<RgbImage> {
    let (n_classes, u_extent, v_extent) = step.class_probs.dims3()?;
    let mut img = base_image(u_extent, v_extent, map)?;
    for u in 0..u_extent {
        for v in 0..v_extent {
            let mut best = 0.0;
            let mut best_class = 0;
            for c in 0..n_classes {
                let p = step.class_probs.at3(c, u, v).to_f64();
                if p > best {
                    best = p;
                    best_class = c;
                }
            }
            if best <= 0.0 {
                continue;
            }
            let (row, col) = cell_to_pixel(u, v, u_extent);
            let base = img.get(row, col);
            let color = class_color(best_class);
            let rgb = [
                base[0] * (1.0 - best) + color[0] * best,
                base[1] * (1.0 - best) + color[1] * best,
                base[2] * (1.0 - best) + color[2] * best,
            ];
            img.set(row, col, rgb);
        }
    }
    Ok(img)
}

/// Render all steps into one image: each cell takes the hue of the step with
/// the highest probability there, ramping red (first step) to magenta (last).
pub fn render_composite<T: Element>(
    steps: &[PredictedStep<T>],
    map: Option<&GridTensor<T>>,
) -> Result<RgbImage> {
    let first = steps
        .first()
        .ok_or_else(|| Error::input("no steps to render"))?;
    let (n_classes, u_extent, v_extent) = first.class_probs.dims3()?;
    let mut img = base_image(u_extent, v_extent, map)?;
    let denom = (steps.len().max(2) - 1) as f64;
    for u in 0..u_extent {
        for v in 0..v_extent {
            let mut best = 0.0;
            let mut best_step = 0;
            for (k, s) in steps.iter().enumerate() {
                for c in 0..n_classes {
                    let p = s.class_probs.at3(c, u, v).to_f64();
                    if p > best {
                        best = p;
                        best_step = k;
                    }
                }
            }
            if best <= 0.0 {
                continue;
            }
            let hue = HUE_SPAN * best_step as f64 / denom;
            let color = hsv_to_rgb(hue, 1.0, 1.0);
            let (row, col) = cell_to_pixel(u, v, u_extent);
            let base = img.get(row, col);
            let rgb = [
                base[0] * (1.0 - best) + color[0] * best,
                base[1] * (1.0 - best) + color[1] * best,
                base[2] * (1.0 - best) + color[2] * best,
            ];
            img.set(row, col, rgb);
        }
    }
    Ok(img)
}
