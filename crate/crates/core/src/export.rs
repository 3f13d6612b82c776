//! On-disk artifacts: depth maps as CSV and PGM, point clouds as ASCII PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{FusionGrid, GaussianInverseDepth, ScenePoint};
use crate::geometry::Pixel;

pub const DEPTH_CSV_HEADER: &str = "u,v,rho,sigma2";

/// Writes a binary 8-bit PGM.
pub fn write_pgm(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width as usize * height as usize {
        return Err(Error::Config(format!(
            "pgm buffer has {} pixels, expected {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Writes one row per entry. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_depth_csv(path: &Path, entries: &[(Pixel, GaussianInverseDepth)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{DEPTH_CSV_HEADER}")?;
    for (p, g) in entries {
        writeln!(out, "{},{},{},{}", p.u, p.v, g.rho, g.sigma2)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_depth_csv(path: &Path) -> Result<Vec<(Pixel, GaussianInverseDepth)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != DEPTH_CSV_HEADER {
                return Err(Error::parse(path, lineno, "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::parse(path, lineno, "expected 4 fields"));
        }
        let bad = |what: &str| Error::parse(path, lineno, format!("invalid {what}"));
        let u = f[0].parse().map_err(|_| bad("u"))?;
        let v = f[1].parse().map_err(|_| bad("v"))?;
        let rho = f[2].parse().map_err(|_| bad("rho"))?;
        let sigma2 = f[3].parse().map_err(|_| bad("sigma2"))?;
        out.push((Pixel::new(u, v), GaussianInverseDepth { rho, sigma2 }));
    }
    Ok(out)
}

/// Maps `value` in `[lo, hi]` to gray levels `1..=255`; 0 is kept for empty pixels.
fn gray(value: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (1.0 + 254.0 * ((value - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
    } else {
        255
    }
}

fn render_assigned(grid: &FusionGrid, value: impl Fn(&GaussianInverseDepth) -> f64) -> Vec<u8> {
    let (w, h) = (grid.width() as usize, grid.height() as usize);
    let mut pixels = vec![0u8; w * h];
    let values: Vec<_> = grid.assigned().map(|(p, g)| (p, value(&g))).collect();
    let lo = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    for (p, v) in values {
        pixels[p.v as usize * w + p.u as usize] = gray(v, lo, hi);
    }
    pixels
}

/// Depth (1/rho) of assigned cells, normalized over their range. Near is dark.
pub fn depth_pgm(grid: &FusionGrid) -> Vec<u8> {
    render_assigned(grid, |g| 1.0 / g.rho)
}

/// Standard deviation of assigned cells, normalized over their range.
pub fn uncertainty_pgm(grid: &FusionGrid) -> Vec<u8> {
    render_assigned(grid, |g| g.sigma2.sqrt())
}

/// Writes the CSV and the depth PGM for a grid.
pub fn export_depth_map(grid: &FusionGrid, csv_path: &Path, pgm_path: &Path) -> Result<()> {
    let entries: Vec<_> = grid.assigned().collect();
    write_depth_csv(csv_path, &entries)?;
    write_pgm(pgm_path, grid.width(), grid.height(), &depth_pgm(grid))
}

/// ASCII PLY with double coordinates and a confidence byte (255 for the
/// smallest variance in the set, 0 for the largest).
pub fn write_ply(path: &Path, points: &[ScenePoint]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", points.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property double {axis}")?;
    }
    writeln!(out, "property uchar confidence")?;
    writeln!(out, "end_header")?;
    let lo = points.iter().map(|p| p.sigma2).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.sigma2).fold(f64::NEG_INFINITY, f64::max);
    for p in points {
        let confidence = if hi > lo {
            (255.0 * (hi - p.sigma2) / (hi - lo)).round() as u8
        } else {
            255
        };
        writeln!(
            out,
            "{} {} {} {}",
            p.position.x, p.position.y, p.position.z, confidence
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::InverseDepthEstimate;
    use crate::geometry::{RectifiedCamera, SE3Transform};
    use nalgebra::Vector3;

    fn grid_with(entries: &[(u32, u32, f64, f64)]) -> FusionGrid {
        let cam = RectifiedCamera::new(100.0, 100.0, 20.0, 15.0, 40, 30);
        let mut grid = FusionGrid::new(cam, SE3Transform::identity());
        for &(u, v, rho, sigma2) in entries {
            grid.set(Pixel::new(u, v), Some(GaussianInverseDepth { rho, sigma2 }));
        }
        grid
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");

        export_depth_map(&grid_with(&[]), &path, &dir.path().join("d.pgm")).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "u,v,rho,sigma2\n");

        let grid = grid_with(&[(3, 4, 0.1 + 0.2, 1.0 / 3.0)]);
        export_depth_map(&grid, &path, &dir.path().join("d.pgm")).unwrap();
        let back = read_depth_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back, grid.assigned().collect::<Vec<_>>());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, 3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 1, 2, 3, 4, 5]);
        assert!(write_pgm(&path, 3, 3, &[0; 6]).is_err());
    }

    #[test]
    fn depth_image_normalization() {
        let grid = grid_with(&[(0, 0, 1.0, 0.1), (1, 0, 0.5, 0.1), (2, 0, 0.25, 0.1)]);
        let img = depth_pgm(&grid);
        assert_eq!(&img[..4], &[1, 86, 255, 0]);
    }

    #[test]
    fn ply_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        write_ply(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(text.ends_with("end_header\n"));

        let point = |x: f64, s: f64| ScenePoint {
            position: Vector3::new(x, -0.25, 1.0 / 3.0),
            pixel: Pixel::new(0, 0),
            rho: 3.0,
            sigma2: s,
        };
        write_ply(&path, &[point(0.125, 0.01), point(2.0, 0.02)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 2\n"));
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 2);
        assert_eq!(body[0], format!("0.125 -0.25 {} 255", 1.0 / 3.0));
        let z: f64 = body[0].split(' ').nth(2).unwrap().parse().unwrap();
        assert_eq!(z, 1.0 / 3.0);
        assert!(body[1].ends_with(" 0"));
    }

    #[test]
    fn estimates_convert() {
        let e = InverseDepthEstimate {
            pixel: Pixel::new(1, 2),
            rho: 0.5,
            sigma2: 0.01,
            gamma: 4.0,
            n_obs: 3,
        };
        assert_eq!(GaussianInverseDepth::from(&e), GaussianInverseDepth { rho: 0.5, sigma2: 0.01 });
    }
}
