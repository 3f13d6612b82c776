//! Depth-error statistics against a ground-truth inverse-depth map.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Per-pixel ground-truth inverse depth; `None` where the ray hits nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    width: u32,
    height: u32,
    values: Vec<Option<f64>>,
}

impl GroundTruthMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![None; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(Pixel) -> Option<f64>) -> Self {
        let values = (0..height)
            .flat_map(|v| (0..width).map(move |u| Pixel::new(u, v)))
            .map(f)
            .collect();
        Self { width, height, values }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, p: Pixel) -> Option<f64> {
        if p.u >= self.width || p.v >= self.height {
            return None;
        }
        self.values[p.v as usize * self.width as usize + p.u as usize]
    }

    pub fn set(&mut self, p: Pixel, rho: Option<f64>) {
        let i = p.v as usize * self.width as usize + p.u as usize;
        self.values[i] = rho;
    }

    /// `max z - min z` over every covered pixel.
    pub fn depth_range(&self) -> Option<f64> {
        let depths = self.values.iter().flatten().map(|rho| 1.0 / rho);
        let (lo, hi) = depths.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
            (lo.min(z), hi.max(z))
        });
        (lo <= hi).then_some(hi - lo)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# {} {}", self.width, self.height)?;
        writeln!(out, "u,v,rho")?;
        for v in 0..self.height {
            for u in 0..self.width {
                if let Some(rho) = self.get(Pixel::new(u, v)) {
                    writeln!(out, "{u},{v},{rho}")?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let size = lines.next().transpose()?.unwrap_or_default();
        let dims: Vec<u32> = size
            .trim_start_matches('#')
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, 1, "expected '# width height'"))?;
        let [width, height] = dims[..] else {
            return Err(Error::parse(path, 1, "expected '# width height'"));
        };
        let mut map = Self::new(width, height);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if lineno == 2 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = match f[..] {
                [u, v, rho] => u.parse::<u32>().ok().zip(v.parse::<u32>().ok()).zip(rho.parse::<f64>().ok()),
                _ => None,
            };
            let Some(((u, v), rho)) = parsed else {
                return Err(Error::parse(path, lineno, "expected 'u,v,rho'"));
            };
            if u >= width || v >= height {
                return Err(Error::parse(path, lineno, "pixel outside the map"));
            }
            map.set(Pixel::new(u, v), Some(rho));
        }
        Ok(map)
    }
}

/// Accuracy summary, depths in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub mean_error: f64,
    pub median_error: f64,
    /// `100 * mean_error / depth_range`.
    pub relative_error_pct: f64,
    pub depth_range: f64,
    pub pixel_count: usize,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Absolute depth errors of the estimates that have ground truth.
pub fn depth_errors(estimates: &[(Pixel, f64)], gt: &GroundTruthMap) -> Vec<f64> {
    estimates
        .iter()
        .filter_map(|(p, rho)| gt.get(*p).map(|g| (1.0 / rho - 1.0 / g).abs()))
        .collect()
}

/// Errors over the estimates with ground truth, normalized by the scene's
/// depth range taken from the whole ground-truth map.
pub fn compute_metrics(estimates: &[(Pixel, f64)], gt: &GroundTruthMap) -> Result<ErrorReport> {
    let range = gt.depth_range().ok_or(Error::NoCoverage)?;
    metrics_with_range(estimates, gt, range)
}

pub fn metrics_with_range(estimates: &[(Pixel, f64)], gt: &GroundTruthMap, depth_range: f64) -> Result<ErrorReport> {
    let mut errors = depth_errors(estimates, gt);
    if errors.is_empty() {
        return Err(Error::NoCoverage);
    }
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let median_error = median(&mut errors).unwrap_or(0.0);
    let relative_error_pct = if depth_range > 0.0 {
        100.0 * mean_error / depth_range
    } else {
        0.0
    };
    Ok(ErrorReport {
        mean_error,
        median_error,
        relative_error_pct,
        depth_range,
        pixel_count: errors.len(),
    })
}
