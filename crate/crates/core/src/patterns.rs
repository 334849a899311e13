//! Parametric topography designs and their rasterization onto a μm-scaled
//! pixel frame. Raster value 1 marks laser-machined area, 0 smooth glass.
//!
//! Line and ring strokes are snapped to whole pixels: a stroke of width `w`
//! is `round(w / scale)` pixels thick and the edge-to-edge gap `s` between
//! neighbouring strokes is `round(s / scale)` pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum PatternError {
    #[error("invalid frame: {0}")]
    Frame(String),
    #[error("stroke width {width_um} µm is below half a pixel ({half_px_um:.3} µm) and cannot be represented")]
    SubPixel { width_um: f64, half_px_um: f64 },
    #[error("invalid topography spec: {0}")]
    Spec(String),
}

/// Pixel grid geometry: `resolution` pixels per side, `scale_um` μm per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub resolution: usize,
    pub scale_um: f64,
    pub box_side_um: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            scale_um: 500.0 / 256.0,
            box_side_um: 500.0,
        }
    }
}

impl FrameConfig {
    /// 64-pixel frame at the same μm-per-pixel as the default frame.
    pub fn desk() -> Self {
        Self::with_scale(64, 500.0 / 256.0)
    }

    pub fn with_scale(resolution: usize, scale_um: f64) -> Self {
        Self {
            resolution,
            scale_um,
            box_side_um: resolution as f64 * scale_um,
        }
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        if !self.resolution.is_power_of_two() || self.resolution < 2 {
            return Err(PatternError::Frame(format!(
                "resolution {} is not a power of two",
                self.resolution
            )));
        }
        if !(self.scale_um > 0.0 && self.scale_um.is_finite() && self.box_side_um > 0.0) {
            return Err(PatternError::Frame("scale and box side must be positive".into()));
        }
        let span = self.resolution as f64 * self.scale_um;
        if (span - self.box_side_um).abs() > 0.005 * self.box_side_um {
            return Err(PatternError::Frame(format!(
                "resolution × scale = {span:.3} µm disagrees with box side {} µm",
                self.box_side_um
            )));
        }
        Ok(())
    }

    pub fn pixel_area_um2(&self) -> f64 {
        self.scale_um * self.scale_um
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Blank,
    ParallelLines,
    CrossedLines,
    ConcentricCircles,
    FilledCircles,
    Curves,
    Glyphs,
    BorderBox,
}

/// Parametric description of a machined pattern. Unused fields are ignored by
/// kinds that do not need them; `compose` entries are unioned in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopographySpec {
    pub kind: PatternKind,
    #[serde(default)]
    pub width_um: f64,
    #[serde(default)]
    pub separation_um: f64,
    #[serde(default)]
    pub angle_deg: f64,
    /// Ring radii for `concentric_circles`; empty means periodic rings.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub radii_um: Vec<f64>,
    /// Bezier control points for `curves`, disc centers for `filled_circles`
    /// (μm from the frame center, x right, y down).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points_um: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub text: String,
    /// Outer side of a `border_box`; defaults to the frame's box side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_um: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compose: Vec<TopographySpec>,
}

impl TopographySpec {
    fn base(kind: PatternKind, width_um: f64) -> Self {
        Self {
            kind,
            width_um,
            separation_um: 0.0,
            angle_deg: 0.0,
            radii_um: Vec::new(),
            points_um: Vec::new(),
            text: String::new(),
            size_um: None,
            compose: Vec::new(),
        }
    }

    pub fn blank() -> Self {
        Self::base(PatternKind::Blank, 0.0)
    }

    pub fn parallel_lines(width_um: f64, separation_um: f64, angle_deg: f64) -> Self {
        Self {
            separation_um,
            angle_deg,
            ..Self::base(PatternKind::ParallelLines, width_um)
        }
    }

    pub fn crossed_lines(width_um: f64, separation_um: f64, angle_deg: f64) -> Self {
        Self {
            separation_um,
            angle_deg,
            ..Self::base(PatternKind::CrossedLines, width_um)
        }
    }

    pub fn concentric_circles(width_um: f64, separation_um: f64) -> Self {
        Self {
            separation_um,
            ..Self::base(PatternKind::ConcentricCircles, width_um)
        }
    }

    pub fn rings(width_um: f64, radii_um: Vec<f64>) -> Self {
        Self {
            radii_um,
            ..Self::base(PatternKind::ConcentricCircles, width_um)
        }
    }

    /// Square lattice of discs of diameter `diameter_um` with edge-to-edge gap.
    pub fn filled_circles(diameter_um: f64, separation_um: f64) -> Self {
        Self {
            separation_um,
            ..Self::base(PatternKind::FilledCircles, diameter_um)
        }
    }

    pub fn curve(width_um: f64, points_um: Vec<[f64; 2]>) -> Self {
        Self {
            points_um,
            ..Self::base(PatternKind::Curves, width_um)
        }
    }

    pub fn glyphs(width_um: f64, text: &str) -> Self {
        Self {
            text: text.to_string(),
            ..Self::base(PatternKind::Glyphs, width_um)
        }
    }

    pub fn border_box(width_um: f64, size_um: Option<f64>) -> Self {
        Self {
            size_um,
            ..Self::base(PatternKind::BorderBox, width_um)
        }
    }

    pub fn with_angle(mut self, angle_deg: f64) -> Self {
        self.angle_deg = angle_deg;
        self
    }

    /// Union of several specs.
    pub fn union(parts: Vec<TopographySpec>) -> Self {
        Self {
            compose: parts,
            ..Self::blank()
        }
    }

    pub fn validate(&self, frame: &FrameConfig) -> Result<(), PatternError> {
        let finite = [self.width_um, self.separation_um, self.angle_deg]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(PatternError::Spec("non-finite parameter".into()));
        }
        if self.kind != PatternKind::Blank {
            if self.width_um <= 0.0 {
                return Err(PatternError::Spec(format!(
                    "{:?} needs a positive width, got {}",
                    self.kind, self.width_um
                )));
            }
            if self.width_um < 0.5 * frame.scale_um {
                return Err(PatternError::SubPixel {
                    width_um: self.width_um,
                    half_px_um: 0.5 * frame.scale_um,
                });
            }
        }
        if self.separation_um < 0.0 {
            return Err(PatternError::Spec(format!("negative separation {}", self.separation_um)));
        }
        match self.kind {
            PatternKind::Curves if self.points_um.len() < 2 => {
                return Err(PatternError::Spec("curves need at least two control points".into()))
            }
            PatternKind::Glyphs => {
                if let Some(c) = self.text.chars().find(|c| glyph(*c).is_none()) {
                    return Err(PatternError::Spec(format!("no glyph for {c:?}")));
                }
            }
            PatternKind::ConcentricCircles if self.radii_um.iter().any(|r| *r < 0.0) => {
                return Err(PatternError::Spec("negative ring radius".into()))
            }
            _ => {}
        }
        self.compose.iter().try_for_each(|s| s.validate(frame))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RenderMode {
    /// Pixel is machined iff its center lies inside a stroke.
    #[default]
    Binary,
    /// Fractional coverage from 4×4 supersampling.
    AntiAliased,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopographyRaster {
    pub frame: FrameConfig,
    /// 1×R×R, values in [0, 1].
    pub values: Grid,
}

impl TopographyRaster {
    pub fn from_grid(frame: FrameConfig, values: Grid) -> Result<Self, PatternError> {
        let r = frame.resolution;
        let (c, h, w) = values
            .chw()
            .map_err(|e| PatternError::Frame(e.to_string()))?;
        if (c, h, w) != (1, r, r) {
            return Err(PatternError::Frame(format!("raster is {c}x{h}x{w}, frame wants 1x{r}x{r}")));
        }
        let values = values.reshape(&[1, r, r]).expect("same element count");
        Ok(Self { frame, values })
    }

    pub fn resolution(&self) -> usize {
        self.frame.resolution
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * self.frame.resolution + col]
    }
}

pub fn rasterize(spec: &TopographySpec, frame: &FrameConfig) -> Result<TopographyRaster, PatternError> {
    rasterize_with(spec, frame, RenderMode::Binary)
}

pub fn rasterize_with(
    spec: &TopographySpec,
    frame: &FrameConfig,
    mode: RenderMode,
) -> Result<TopographyRaster, PatternError> {
    frame.validate()?;
    spec.validate(frame)?;
    let r = frame.resolution;
    let half = r as f64 / 2.0;
    let shape = Shape::compile(spec, frame);
    let mut data = Vec::with_capacity(r * r);
    for row in 0..r {
        for col in 0..r {
            let v = match mode {
                RenderMode::Binary => {
                    let (x, y) = (col as f64 + 0.5 - half, row as f64 + 0.5 - half);
                    f64::from(u8::from(shape.covers(x, y)))
                }
                RenderMode::AntiAliased => {
                    let mut hits = 0u32;
                    for sy in 0..4 {
                        for sx in 0..4 {
                            let x = col as f64 + (sx as f64 + 0.5) / 4.0 - half;
                            let y = row as f64 + (sy as f64 + 0.5) / 4.0 - half;
                            hits += u32::from(shape.covers(x, y));
                        }
                    }
                    f64::from(hits) / 16.0
                }
            };
            data.push(v);
        }
    }
    let values = Grid::from_vec(&[1, r, r], data).expect("r*r values");
    Ok(TopographyRaster { frame: *frame, values })
}

/// Fraction of the frame that is machined (mean raster value).
pub fn machined_fraction(raster: &TopographyRaster) -> f64 {
    raster.values.mean()
}

/// A spec compiled to pixel units, evaluated at coordinates relative to the
/// frame center (x right, y down, in pixels).
enum Shape {
    Empty,
    Lines { sin: f64, cos: f64, width: f64, period: f64 },
    Rings { width: f64, period: f64 },
    RingList { width: f64, radii: Vec<f64> },
    Discs { sin: f64, cos: f64, diameter: f64, period: f64 },
    DiscList { diameter: f64, centers: Vec<(f64, f64)> },
    Polyline { half_width: f64, pts: Vec<(f64, f64)> },
    Cells { sin: f64, cos: f64, cell: f64, origin: (f64, f64), lit: Vec<(usize, usize)> },
    Frame { sin: f64, cos: f64, outer: f64, inner: f64 },
    Union(Vec<Shape>),
}

fn snap(um: f64, scale: f64) -> f64 {
    (um / scale).round()
}

/// Sine and cosine of an angle in degrees, exact at multiples of 90°.
pub(crate) fn exact_sin_cos(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    if d == 0.0 {
        (0.0, 1.0)
    } else if d == 90.0 {
        (1.0, 0.0)
    } else if d == 180.0 {
        (0.0, -1.0)
    } else if d == 270.0 {
        (-1.0, 0.0)
    } else {
        d.to_radians().sin_cos()
    }
}

impl Shape {
    fn compile(spec: &TopographySpec, frame: &FrameConfig) -> Shape {
        let s = frame.scale_um;
        let (sin, cos) = exact_sin_cos(spec.angle_deg);
        let width = snap(spec.width_um, s).max(1.0);
        let period = width + snap(spec.separation_um, s);
        let own = match spec.kind {
            PatternKind::Blank => Shape::Empty,
            PatternKind::ParallelLines => Shape::Lines { sin, cos, width, period },
            PatternKind::CrossedLines => Shape::Union(vec![
                Shape::Lines { sin, cos, width, period },
                Shape::Lines { sin: cos, cos: -sin, width, period },
            ]),
            PatternKind::ConcentricCircles if spec.radii_um.is_empty() => Shape::Rings { width, period },
            PatternKind::ConcentricCircles => Shape::RingList {
                width,
                radii: spec.radii_um.iter().map(|r| r / s).collect(),
            },
            PatternKind::FilledCircles if spec.points_um.is_empty() => Shape::Discs {
                sin,
                cos,
                diameter: spec.width_um / s,
                period: (spec.width_um + spec.separation_um) / s,
            },
            PatternKind::FilledCircles => Shape::DiscList {
                diameter: spec.width_um / s,
                centers: spec.points_um.iter().map(|p| (p[0] / s, p[1] / s)).collect(),
            },
            PatternKind::Curves => {
                let ctrl: Vec<(f64, f64)> = spec.points_um.iter().map(|p| (p[0] / s, p[1] / s)).collect();
                Shape::Polyline {
                    half_width: spec.width_um / s / 2.0,
                    pts: bezier_polyline(&ctrl, 128),
                }
            }
            PatternKind::Glyphs => {
                let cell = width;
                let n = spec.text.chars().count();
                let cols = if n == 0 { 0 } else { 6 * n - 1 };
                let origin = (-(cols as f64) * cell / 2.0, -7.0 * cell / 2.0);
                let mut lit = Vec::new();
                for (i, ch) in spec.text.chars().enumerate() {
                    let rows = glyph(ch).expect("validated");
                    for (r, bits) in rows.iter().enumerate() {
                        for c in 0..5 {
                            if bits & (0x10 >> c) != 0 {
                                lit.push((6 * i + c, r));
                            }
                        }
                    }
                }
                Shape::Cells { sin, cos, cell, origin, lit }
            }
            PatternKind::BorderBox => {
                let outer = spec.size_um.unwrap_or(frame.box_side_um) / s / 2.0;
                Shape::Frame {
                    sin,
                    cos,
                    outer,
                    inner: outer - spec.width_um / s,
                }
            }
        };
        if spec.compose.is_empty() {
            own
        } else {
            let mut parts = vec![own];
            parts.extend(spec.compose.iter().map(|c| Shape::compile(c, frame)));
            Shape::Union(parts)
        }
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Empty => false,
            Shape::Lines { sin, cos, width, period } => {
                // Normal coordinate; angle 0 gives horizontal lines (t = y) and
                // 90° vertical lines (t = x), so the two are transposes.
                let t = x * sin + y * cos;
                (t + width / 2.0).rem_euclid(*period) < *width
            }
            Shape::Rings { width, period } => {
                let d = x.hypot(y);
                (d + width / 2.0).rem_euclid(*period) < *width
            }
            Shape::RingList { width, radii } => {
                let d = x.hypot(y);
                radii.iter().any(|r| (d - r).abs() < width / 2.0)
            }
            Shape::Discs { sin, cos, diameter, period } => {
                let (u, v) = rotate(x, y, *sin, *cos);
                let du = u - (u / period).round() * period;
                let dv = v - (v / period).round() * period;
                du.hypot(dv) < diameter / 2.0
            }
            Shape::DiscList { diameter, centers } => centers
                .iter()
                .any(|(cx, cy)| (x - cx).hypot(y - cy) < diameter / 2.0),
            Shape::Polyline { half_width, pts } => pts
                .windows(2)
                .any(|seg| segment_distance((x, y), seg[0], seg[1]) <= *half_width),
            Shape::Cells { sin, cos, cell, origin, lit } => {
                let (u, v) = rotate(x, y, *sin, *cos);
                let cu = (u - origin.0) / cell;
                let cv = (v - origin.1) / cell;
                if cu < 0.0 || cv < 0.0 {
                    return false;
                }
                let key = (cu.floor() as usize, cv.floor() as usize);
                lit.contains(&key)
            }
            Shape::Frame { sin, cos, outer, inner } => {
                let (u, v) = rotate(x, y, *sin, *cos);
                let m = u.abs().max(v.abs());
                m < *outer && m >= *inner
            }
            Shape::Union(parts) => parts.iter().any(|p| p.covers(x, y)),
        }
    }
}

/// Rotates frame coordinates into the pattern's own axes.
fn rotate(x: f64, y: f64, sin: f64, cos: f64) -> (f64, f64) {
    (x * cos - y * sin, x * sin + y * cos)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Samples the Bezier curve of the given control polygon (de Casteljau).
fn bezier_polyline(ctrl: &[(f64, f64)], segments: usize) -> Vec<(f64, f64)> {
    (0..=segments)
        .map(|i| {
            let t = i as f64 / segments as f64;
            let mut pts = ctrl.to_vec();
            while pts.len() > 1 {
                pts = pts
                    .windows(2)
                    .map(|w| (w[0].0 + t * (w[1].0 - w[0].0), w[0].1 + t * (w[1].1 - w[0].1)))
                    .collect();
            }
            pts[0]
        })
        .collect()
}

/// 5×7 bitmap glyph rows, most significant of the low five bits leftmost.
pub(crate) fn glyph(c: char) -> Option<[u8; 7]> {
    let rows = match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        ' ' => [0; 7],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        _ => return None,
    };
    Some(rows)
}
