//! Reading event streams, pose trajectories, calibration and rectification maps.
//!
//! File formats (all UTF-8 text, `#` starts a comment line):
//!
//! * events: one event per line, `t x y p`, `t` in seconds with up to
//!   microsecond precision, `p` either `1` or `0`/`-1`.
//! * poses: `t tx ty tz qx qy qz qw`, the pose of the left camera in the
//!   world frame (world_from_camera), unit quaternion.
//! * calibration: `key = value` lines, see [`Calibration`].
//! * rectification map: see [`RectificationMap::load`].

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Point2, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{RectifiedCamera, SE3Transform};

/// Microseconds.
pub type Timestamp = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: Timestamp,
    pub x: u32,
    pub y: u32,
    /// +1 or -1. Carried through but never used by the estimator.
    pub polarity: i8,
}

impl Event {
    pub fn new(t: Timestamp, x: u32, y: u32, polarity: i8) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderPolicy {
    /// Fail on the first decreasing timestamp.
    #[default]
    Reject,
    /// Stable-sort the stream by timestamp.
    Sort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Parses a decimal seconds string into integer microseconds, rounding
/// anything below a microsecond to nearest.
pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if s.contains(['e', 'E']) {
        let secs: f64 = s.parse().ok()?;
        return secs.is_finite().then(|| (secs * 1e6).round() as Timestamp);
    }
    let (negative, body) = match s.as_bytes()[0] {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let whole: i64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let mut micros: i64 = 0;
    for (i, b) in frac_part.bytes().take(6).enumerate() {
        micros += i64::from(b - b'0') * 10_i64.pow(5 - i as u32);
    }
    if frac_part.len() > 6 && frac_part.as_bytes()[6] >= b'5' {
        micros += 1;
    }
    let value = whole.checked_mul(1_000_000)?.checked_add(micros)?;
    Some(if negative { -value } else { value })
}

pub fn format_timestamp(t: Timestamp) -> String {
    let sign = if t < 0 { "-" } else { "" };
    let a = t.unsigned_abs();
    format!("{sign}{}.{:06}", a / 1_000_000, a % 1_000_000)
}

fn data_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>>> {
    let file = fs::File::open(path)?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Ok(l) => {
                let trimmed = l.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    None
                } else {
                    Some(Ok((i + 1, trimmed.to_string())))
                }
            }
            Err(e) => Some(Err(Error::Io(e))),
        }))
}

/// Loads an event file. Timestamps are non-decreasing in the result.
pub fn load_events(path: &Path, order: OrderPolicy) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut prev: Option<Timestamp> = None;
    let mut sorted = true;
    for item in data_lines(path)? {
        let (line_no, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected `t x y p`, found {} fields", fields.len()),
            ));
        }
        let t = parse_timestamp(fields[0])
            .ok_or_else(|| Error::parse(path, line_no, format!("bad timestamp `{}`", fields[0])))?;
        let x: u32 = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad x `{}`", fields[1])))?;
        let y: u32 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad y `{}`", fields[2])))?;
        let polarity = match fields[3] {
            "1" | "+1" => 1,
            "0" | "-1" => -1,
            other => {
                return Err(Error::parse(path, line_no, format!("bad polarity `{other}`")));
            }
        };
        if let Some(p) = prev {
            if t < p {
                match order {
                    OrderPolicy::Reject => {
                        return Err(Error::OutOfOrder {
                            path: path.to_path_buf(),
                            line: line_no,
                            t,
                            prev: p,
                        })
                    }
                    OrderPolicy::Sort => sorted = false,
                }
            }
        }
        prev = Some(t);
        events.push(Event::new(t, x, y, polarity));
    }
    if events.is_empty() {
        return Err(Error::EmptyStream(path.to_path_buf()));
    }
    if !sorted {
        events.sort_by_key(|e| e.t);
    }
    log::info!("loaded {} events from {}", events.len(), path.display());
    Ok(events)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for e in events {
        let p = if e.polarity > 0 { 1 } else { 0 };
        writeln!(out, "{} {} {} {}", format_timestamp(e.t), e.x, e.y, p)?;
    }
    out.flush()?;
    Ok(())
}

/// Per raw pixel lookup into rectified, undistorted coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RectificationMap {
    raw_width: u32,
    raw_height: u32,
    width: u32,
    height: u32,
    entries: Vec<Option<Point2<f64>>>,
}

impl RectificationMap {
    /// Builds a map from a closure evaluated at every raw pixel. Results
    /// outside `[0, width) x [0, height)` or non-finite are marked invalid.
    pub fn from_fn(
        raw_width: u32,
        raw_height: u32,
        width: u32,
        height: u32,
        f: impl Fn(u32, u32) -> Option<Point2<f64>>,
    ) -> Self {
        let mut entries = Vec::with_capacity(raw_width as usize * raw_height as usize);
        for y in 0..raw_height {
            for x in 0..raw_width {
                let mapped = f(x, y).filter(|p| {
                    p.x.is_finite()
                        && p.y.is_finite()
                        && p.x >= 0.0
                        && p.y >= 0.0
                        && p.x < width as f64
                        && p.y < height as f64
                });
                entries.push(mapped);
            }
        }
        Self {
            raw_width,
            raw_height,
            width,
            height,
            entries,
        }
    }

    pub fn identity(width: u32, height: u32) -> Self {
        Self::from_fn(width, height, width, height, |x, y| {
            Some(Point2::new(x as f64, y as f64))
        })
    }

    pub fn raw_size(&self) -> (u32, u32) {
        (self.raw_width, self.raw_height)
    }

    pub fn rectified_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn lookup(&self, x: u32, y: u32) -> Option<Point2<f64>> {
        if x >= self.raw_width || y >= self.raw_height {
            return None;
        }
        self.entries[(y * self.raw_width + x) as usize]
    }

    /// Carries `e` to its rectified location rounded to the nearest pixel, or
    /// `None` when it leaves the rectified image.
    pub fn rectify(&self, e: &Event) -> Option<Event> {
        let p = self.lookup(e.x, e.y)?;
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(Event::new(e.t, x as u32, y as u32, e.polarity))
    }

    pub fn rectify_all(&self, events: &[Event]) -> RectifiedStream {
        let mut out = Vec::with_capacity(events.len());
        let mut dropped = 0;
        for e in events {
            match self.rectify(e) {
                Some(r) => out.push(r),
                None => dropped += 1,
            }
        }
        RectifiedStream {
            events: out,
            dropped,
        }
    }

    /// Text format: a header line `raw_width raw_height width height`
    /// followed by one `x y` line per raw pixel in row-major order. Invalid
    /// pixels are written as `nan nan`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = data_lines(path)?;
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header"))??;
        let dims: Vec<u32> = header
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, line_no, "bad header"))?;
        let [raw_width, raw_height, width, height] = dims[..] else {
            return Err(Error::parse(path, line_no, "header needs 4 integers"));
        };
        let n = raw_width as usize * raw_height as usize;
        let mut coords = Vec::with_capacity(n);
        for item in lines {
            let (line_no, line) = item?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, line_no, "bad coordinate"))?;
            if vals.len() != 2 {
                return Err(Error::parse(path, line_no, "expected `x y`"));
            }
            coords.push(Point2::new(vals[0], vals[1]));
        }
        if coords.len() != n {
            return Err(Error::parse(
                path,
                0,
                format!("expected {n} entries, found {}", coords.len()),
            ));
        }
        Ok(Self::from_fn(raw_width, raw_height, width, height, |x, y| {
            let p = coords[(y * raw_width + x) as usize];
            (p.x.is_finite() && p.y.is_finite()).then_some(p)
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(
            out,
            "{} {} {} {}",
            self.raw_width, self.raw_height, self.width, self.height
        )?;
        for e in &self.entries {
            match e {
                Some(p) => writeln!(out, "{} {}", p.x, p.y)?,
                None => writeln!(out, "nan nan")?,
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RectifiedStream {
    pub events: Vec<Event>,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: Timestamp,
    /// world_from_camera of the left camera.
    pub pose: SE3Transform,
}

/// Time-ordered left-camera poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<PoseSample>,
}

impl Trajectory {
    pub fn new(samples: Vec<PoseSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("trajectory has no samples".into()));
        }
        if let Some(w) = samples.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Config(format!(
                "trajectory timestamps must strictly increase ({} then {})",
                w[0].t, w[1].t
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[PoseSample] {
        &self.samples
    }

    pub fn start(&self) -> Timestamp {
        self.samples[0].t
    }

    pub fn end(&self) -> Timestamp {
        self.samples[self.samples.len() - 1].t
    }

    /// Pose at `t`: linear interpolation of translation and slerp of rotation
    /// between the bracketing samples.
    pub fn pose_at(&self, t: Timestamp) -> Result<SE3Transform> {
        if t < self.start() || t > self.end() {
            return Err(Error::OutOfRange {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let idx = match self.samples.binary_search_by_key(&t, |s| s.t) {
            Ok(i) => return Ok(self.samples[i].pose),
            Err(i) => i,
        };
        let (a, b) = (&self.samples[idx - 1], &self.samples[idx]);
        let s = (t - a.t) as f64 / (b.t - a.t) as f64;
        let translation = a.pose.translation().lerp(b.pose.translation(), s);
        let rotation = a.pose.quaternion().slerp(&b.pose.quaternion(), s);
        Ok(SE3Transform::from_quaternion(rotation, translation))
    }
}

pub fn load_poses(path: &Path) -> Result<Trajectory> {
    let mut samples = Vec::new();
    for item in data_lines(path)? {
        let (line_no, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected `t tx ty tz qx qy qz qw`, found {} fields", fields.len()),
            ));
        }
        let t = parse_timestamp(fields[0])
            .ok_or_else(|| Error::parse(path, line_no, format!("bad timestamp `{}`", fields[0])))?;
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, line_no, "bad number"))?;
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
            return Err(Error::parse(
                path,
                line_no,
                format!("quaternion is not unit (norm {norm})"),
            ));
        }
        let pose = SE3Transform::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(v[0], v[1], v[2]),
        );
        samples.push(PoseSample { t, pose });
    }
    Trajectory::new(samples).map_err(|e| match e {
        Error::Config(msg) => Error::parse(path, 0, msg),
        other => other,
    })
}

pub fn write_poses(path: &Path, trajectory: &Trajectory) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in trajectory.samples() {
        let t = s.pose.translation();
        let q = s.pose.quaternion();
        writeln!(
            out,
            "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            format_timestamp(s.t),
            t.x,
            t.y,
            t.z,
            q.i,
            q.j,
            q.k,
            q.w
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Stereo rig calibration.
///
/// ```text
/// # comment
/// resolution = 240 180
/// P_left  = fx 0 cx 0   0 fy cy 0   0 0 1 0
/// P_right = fx 0 cx p14 0 fy cy p24 0 0 1 p34
/// T_E     = r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz
/// rect_map_left  = left.map     # optional, relative to this file
/// rect_map_right = right.map    # optional
/// ```
///
/// Matrices are row-major. `T_E` maps left-camera coordinates into the
/// right camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub left: RectifiedCamera,
    pub right: RectifiedCamera,
    pub t_e: SE3Transform,
    pub rect_map_left: Option<PathBuf>,
    pub rect_map_right: Option<PathBuf>,
}

impl Calibration {
    pub fn width(&self) -> u32 {
        self.left.width
    }

    pub fn height(&self) -> u32 {
        self.left.height
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut resolution = None;
        let mut p_left = None;
        let mut p_right = None;
        let mut t_e = None;
        let mut rect_left = None;
        let mut rect_right = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, line_no, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let numbers = || -> Result<Vec<f64>> {
                value
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(path, line_no, format!("bad number in `{key}`")))
            };
            let twelve = || -> Result<Matrix3x4<f64>> {
                let v = numbers()?;
                if v.len() != 12 {
                    return Err(Error::parse(path, line_no, format!("`{key}` needs 12 numbers")));
                }
                Ok(Matrix3x4::from_row_slice(&v))
            };
            match key {
                "resolution" => {
                    let v = numbers()?;
                    if v.len() != 2 || v.iter().any(|x| *x < 1.0 || x.fract() != 0.0) {
                        return Err(Error::parse(path, line_no, "resolution needs 2 positive integers"));
                    }
                    resolution = Some((v[0] as u32, v[1] as u32));
                }
                "P_left" => p_left = Some(twelve()?),
                "P_right" => p_right = Some(twelve()?),
                "T_E" => {
                    let m = twelve()?;
                    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
                    let t: Vector3<f64> = m.column(3).into_owned();
                    t_e = Some(
                        SE3Transform::new(r, t)
                            .map_err(|e| Error::parse(path, line_no, e.to_string()))?,
                    );
                }
                "rect_map_left" => rect_left = Some(base.join(value)),
                "rect_map_right" => rect_right = Some(base.join(value)),
                other => {
                    return Err(Error::parse(path, line_no, format!("unknown key `{other}`")));
                }
            }
        }
        let missing = |k: &str| Error::parse(path, 0, format!("missing key `{k}`"));
        let (w, h) = resolution.ok_or_else(|| missing("resolution"))?;
        let left = RectifiedCamera::from_projection(&p_left.ok_or_else(|| missing("P_left"))?, w, h)
            .map_err(|e| Error::parse(path, 0, format!("P_left: {e}")))?;
        if !left.has_zero_offset() {
            return Err(Error::parse(path, 0, "P_left must have a zero fourth column"));
        }
        let right =
            RectifiedCamera::from_projection(&p_right.ok_or_else(|| missing("P_right"))?, w, h)
                .map_err(|e| Error::parse(path, 0, format!("P_right: {e}")))?;
        Ok(Self {
            left,
            right,
            t_e: t_e.ok_or_else(|| missing("T_E"))?,
            rect_map_left: rect_left,
            rect_map_right: rect_right,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let row = |m: &Matrix3x4<f64>| {
            m.transpose()
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(s, "resolution = {} {}", self.width(), self.height()).unwrap();
        writeln!(s, "P_left = {}", row(&self.left.projection_matrix())).unwrap();
        writeln!(s, "P_right = {}", row(&self.right.projection_matrix())).unwrap();
        let mut te = Matrix3x4::zeros();
        te.fixed_view_mut::<3, 3>(0, 0).copy_from(self.t_e.rotation());
        te.set_column(3, self.t_e.translation());
        writeln!(s, "T_E = {}", row(&te)).unwrap();
        for (key, p) in [
            ("rect_map_left", &self.rect_map_left),
            ("rect_map_right", &self.rect_map_right),
        ] {
            if let Some(p) = p {
                writeln!(s, "{key} = {}", p.display()).unwrap();
            }
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Loads the configured rectification map for `side`, or the identity.
    pub fn rectification_map(&self, side: Side) -> Result<RectificationMap> {
        let path = match side {
            Side::Left => &self.rect_map_left,
            Side::Right => &self.rect_map_right,
        };
        match path {
            Some(p) => {
                let map = RectificationMap::load(p)?;
                if map.rectified_size() != (self.width(), self.height()) {
                    return Err(Error::Config(format!(
                        "rectification map {} targets {:?}, calibration is {}x{}",
                        p.display(),
                        map.rectified_size(),
                        self.width(),
                        self.height()
                    )));
                }
                Ok(map)
            }
            None => Ok(RectificationMap::identity(self.width(), self.height())),
        }
    }
}
