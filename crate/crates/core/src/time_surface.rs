//! Last-spike maps, exponentially decaying time surfaces and stereo observations.

use std::path::Path;

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::geometry::{Pixel, SE3Transform};
use crate::ingest::{Event, Timestamp};

/// Default decay constant, 30 ms.
pub const DEFAULT_DECAY_US: f64 = 30_000.0;

/// Default event-map window for reference-view masks, 10 ms.
pub const DEFAULT_WINDOW_US: Timestamp = 10_000;

/// Peak value of a rendered surface.
pub const SURFACE_SCALE: f64 = 255.0;

/// Last spiking time per rectified pixel.
#[derive(Debug, Clone)]
pub struct LastSpikeMap {
    width: u32,
    height: u32,
    t_last: Vec<Option<Timestamp>>,
    strict: bool,
}

impl LastSpikeMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            t_last: vec![None; width as usize * height as usize],
            strict: true,
        }
    }

    /// In lenient mode a stale event never lowers a pixel's last spike time
    /// instead of failing.
    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, u: u32, v: u32) -> Option<Timestamp> {
        self.t_last[(v * self.width + u) as usize]
    }

    pub fn set_count(&self) -> usize {
        self.t_last.iter().filter(|t| t.is_some()).count()
    }

    pub fn latest(&self) -> Option<Timestamp> {
        self.t_last.iter().flatten().copied().max()
    }

    /// Records a rectified event.
    pub fn consume(&mut self, e: &Event) -> Result<()> {
        if e.x >= self.width || e.y >= self.height {
            return Err(Error::OutOfBounds);
        }
        let slot = &mut self.t_last[(e.y * self.width + e.x) as usize];
        match *slot {
            Some(last) if e.t < last => {
                if self.strict {
                    return Err(Error::EventOrder { t: e.t, last });
                }
            }
            _ => *slot = Some(e.t),
        }
        Ok(())
    }

    pub fn render(&self, t: Timestamp, decay_us: f64) -> Result<TimeSurface> {
        TimeSurface::render(self, t, decay_us)
    }
}

/// `255 * exp(-(t - t_last) / decay)` per pixel, 0 where no event was seen.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSurface {
    width: u32,
    height: u32,
    t: Timestamp,
    decay_us: f64,
    values: Vec<f64>,
}

impl TimeSurface {
    pub fn render(map: &LastSpikeMap, t: Timestamp, decay_us: f64) -> Result<Self> {
        if !(decay_us > 0.0) {
            return Err(Error::Config(format!("decay must be positive, got {decay_us}")));
        }
        let mut values = Vec::with_capacity(map.t_last.len());
        for last in &map.t_last {
            values.push(match *last {
                None => 0.0,
                Some(last) if last > t => return Err(Error::NegativeAge { t, last }),
                Some(last) => SURFACE_SCALE * (-((t - last) as f64) / decay_us).exp(),
            });
        }
        Ok(Self {
            width: map.width,
            height: map.height,
            t,
            decay_us,
            values,
        })
    }

    /// Wraps raw values, mostly for tests and tooling.
    pub fn from_values(width: u32, height: u32, t: Timestamp, decay_us: f64, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width as usize * height as usize);
        Self {
            width,
            height,
            t,
            decay_us,
            values,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn timestamp(&self) -> Timestamp {
        self.t
    }

    pub fn decay_us(&self) -> f64 {
        self.decay_us
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.values[(v * self.width + u) as usize]
    }

    /// Bilinear value at a subpixel location, `None` outside the interpolation domain.
    pub fn interpolate(&self, p: &Point2<f64>) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0) {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(self.width as usize - 2);
        let y0 = (p.y.floor() as usize).min(self.height as usize - 2);
        let (fx, fy) = (p.x - x0 as f64, p.y - y0 as f64);
        let stride = self.width as usize;
        let i = y0 * stride + x0;
        let v = &self.values;
        Some(
            (1.0 - fy) * ((1.0 - fx) * v[i] + fx * v[i + 1])
                + fy * ((1.0 - fx) * v[i + stride] + fx * v[i + stride + 1]),
        )
    }

    /// Bilinear weights and top-left base index of a `w x w` patch centred
    /// at `center`. Every sample keeps a one-pixel margin to the border.
    fn patch_layout(&self, center: &Point2<f64>, w: usize) -> Option<PatchLayout> {
        let half = (w / 2) as f64;
        let (cx, cy) = (center.x, center.y);
        if !(cx - half >= 1.0
            && cy - half >= 1.0
            && cx + half <= self.width as f64 - 2.0
            && cy + half <= self.height as f64 - 2.0)
        {
            return None;
        }
        let (x0, y0) = (cx.floor(), cy.floor());
        let base_x = x0 as usize - w / 2;
        let base_y = y0 as usize - w / 2;
        Some(PatchLayout {
            base: base_y * self.width as usize + base_x,
            stride: self.width as usize,
            fx: cx - x0,
            fy: cy - y0,
        })
    }

    /// Bilinearly sampled `w x w` patch around `center`, row-major.
    pub fn sample_patch(&self, center: &Point2<f64>, w: usize) -> Result<Vec<f64>> {
        let layout = self.patch_layout(center, w).ok_or(Error::OutOfBounds)?;
        let mut out = Vec::with_capacity(w * w);
        layout.for_each(w, &self.values, |_, value, _, _| out.push(value));
        Ok(out)
    }

    /// Derivatives of the bilinear surface along `u` and `v` at every patch sample.
    pub fn sample_patch_gradient(&self, center: &Point2<f64>, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let layout = self.patch_layout(center, w).ok_or(Error::OutOfBounds)?;
        let mut gu = Vec::with_capacity(w * w);
        let mut gv = Vec::with_capacity(w * w);
        layout.for_each(w, &self.values, |_, _, du, dv| {
            gu.push(du);
            gv.push(dv);
        });
        Ok((gu, gv))
    }

    /// Writes an 8-bit PGM for inspection; values are rounded for display only.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u8> = self
            .values
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        crate::export::write_pgm(path, self.width, self.height, &pixels)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchLayout {
    base: usize,
    stride: usize,
    fx: f64,
    fy: f64,
}

impl PatchLayout {
    /// Calls `f(k, value, d/du, d/dv)` for each of the `w * w` samples.
    #[inline]
    pub(crate) fn for_each(&self, w: usize, v: &[f64], mut f: impl FnMut(usize, f64, f64, f64)) {
        let (fx, fy) = (self.fx, self.fy);
        let (gx, gy) = (1.0 - fx, 1.0 - fy);
        let mut k = 0;
        for i in 0..w {
            let row0 = self.base + i * self.stride;
            let top = &v[row0..row0 + w + 1];
            let bottom = &v[row0 + self.stride..row0 + self.stride + w + 1];
            for j in 0..w {
                let (a, b, c, d) = (top[j], top[j + 1], bottom[j], bottom[j + 1]);
                let value = gy * (gx * a + fx * b) + fy * (gx * c + fx * d);
                let du = gy * (b - a) + fy * (d - c);
                let dv = gx * (c - a) + fx * (d - b);
                f(k, value, du, dv);
                k += 1;
            }
        }
    }
}

/// Squared distance between two bilinearly sampled `w x w` patches.
pub(crate) fn patch_distance_sq(a: &PatchLayout, va: &[f64], b: &PatchLayout, vb: &[f64], w: usize) -> f64 {
    let weights = |l: &PatchLayout| {
        let (fx, fy) = (l.fx, l.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    };
    let [a00, a01, a10, a11] = weights(a);
    let [b00, b01, b10, b11] = weights(b);
    // independent lanes so the reduction can vectorise
    let mut acc = [0.0f64; 4];
    for i in 0..w {
        let ra = a.base + i * a.stride;
        let rb = b.base + i * b.stride;
        let (at, ab) = (&va[ra..ra + w + 1], &va[ra + a.stride..ra + a.stride + w + 1]);
        let (bt, bb) = (&vb[rb..rb + w + 1], &vb[rb + b.stride..rb + b.stride + w + 1]);
        for j in 0..w {
            let x = a00 * at[j] + a01 * at[j + 1] + a10 * ab[j] + a11 * ab[j + 1];
            let y = b00 * bt[j] + b01 * bt[j + 1] + b10 * bb[j] + b11 * bb[j + 1];
            let d = x - y;
            acc[j % 4] += d * d;
        }
    }
    acc.iter().sum()
}

/// `(sum d^2, sum d * (grad_a . da - grad_b . db))` over the patch samples,
/// with `d` the patch difference `a - b` and `da`, `db` the image-plane
/// motions of the two patch centres.
pub(crate) fn patch_distance_and_slope(
    a: &PatchLayout,
    va: &[f64],
    da: (f64, f64),
    b: &PatchLayout,
    vb: &[f64],
    db: (f64, f64),
    w: usize,
) -> (f64, f64) {
    let (afx, afy, bfx, bfy) = (a.fx, a.fy, b.fx, b.fy);
    let (agx, agy, bgx, bgy) = (1.0 - afx, 1.0 - afy, 1.0 - bfx, 1.0 - bfy);
    let mut sq = [0.0f64; 4];
    let mut dot = [0.0f64; 4];
    for i in 0..w {
        let ra = a.base + i * a.stride;
        let rb = b.base + i * b.stride;
        let (at, ab) = (&va[ra..ra + w + 1], &va[ra + a.stride..ra + a.stride + w + 1]);
        let (bt, bb) = (&vb[rb..rb + w + 1], &vb[rb + b.stride..rb + b.stride + w + 1]);
        for j in 0..w {
            let (p, q, r, s) = (at[j], at[j + 1], ab[j], ab[j + 1]);
            let x = agy * (agx * p + afx * q) + afy * (agx * r + afx * s);
            let xu = agy * (q - p) + afy * (s - r);
            let xv = agx * (r - p) + afx * (s - q);
            let (p, q, r, s) = (bt[j], bt[j + 1], bb[j], bb[j + 1]);
            let y = bgy * (bgx * p + bfx * q) + bfy * (bgx * r + bfx * s);
            let yu = bgy * (q - p) + bfy * (s - r);
            let yv = bgx * (r - p) + bfx * (s - q);
            let d = x - y;
            sq[j % 4] += d * d;
            dot[j % 4] += d * ((xu * da.0 + xv * da.1) - (yu * db.0 + yv * db.1));
        }
    }
    (sq.iter().sum(), dot.iter().sum())
}

impl TimeSurface {
    pub(crate) fn layout(&self, center: &Point2<f64>, w: usize) -> Option<PatchLayout> {
        self.patch_layout(center, w)
    }
}

/// Left/right time surfaces rendered at the same instant, with the left camera pose.
#[derive(Debug, Clone)]
pub struct StereoObservation {
    pub left: TimeSurface,
    pub right: TimeSurface,
    pub t: Timestamp,
    /// world_from_camera of the left camera.
    pub pose: SE3Transform,
}

pub fn make_observation(
    left_map: &LastSpikeMap,
    right_map: &LastSpikeMap,
    t: Timestamp,
    decay_us: f64,
    pose: SE3Transform,
) -> Result<StereoObservation> {
    Ok(StereoObservation {
        left: left_map.render(t, decay_us)?,
        right: right_map.render(t, decay_us)?,
        t,
        pose,
    })
}

/// Pixels of the left camera that fired recently; depth is estimated only there.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceView {
    /// Sorted row-major, without duplicates.
    pub mask: Vec<Pixel>,
    pub t: Timestamp,
    pub pose: SE3Transform,
    pub width: u32,
    pub height: u32,
}

/// Collects pixels with at least one event in `(t - window, t]`. `events`
/// must be rectified and time-ordered.
pub fn make_reference_view(
    events: &[Event],
    t: Timestamp,
    window_us: Timestamp,
    pose: SE3Transform,
    width: u32,
    height: u32,
) -> ReferenceView {
    let start = events.partition_point(|e| e.t <= t - window_us);
    let end = events.partition_point(|e| e.t <= t);
    let mut hit = vec![false; width as usize * height as usize];
    for e in events.get(start..end).unwrap_or(&[]) {
        if e.x < width && e.y < height {
            hit[(e.y * width + e.x) as usize] = true;
        }
    }
    let mask = hit
        .iter()
        .enumerate()
        .filter(|(_, h)| **h)
        .map(|(i, _)| Pixel::new(i as u32 % width, i as u32 / width))
        .collect();
    ReferenceView {
        mask,
        t,
        pose,
        width,
        height,
    }
}
