//! Rule-based synthetic cell-response simulator.
//!
//! Cells are placed on a topography raster and rendered as anisotropic
//! Gaussian blobs. Machined features only act on a cell when the cell can
//! resolve them: a line whose perpendicular gap to its neighbour is below
//! `theta_align_um` behaves like untextured glass. Resolved lines attract
//! cells (`adhesion_bias`) and orient them along the local line direction.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::io::{self, IoError};
use crate::par;
use crate::patterns::{self, FrameConfig, PatternError, TopographyRaster, TopographySpec};
use crate::rng::{item_rng, stream_rng, Stream};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("day {0} is not one of 0, 1, 8, 30")]
    Day(u32),
    #[error("density {0} outside [0, 1]")]
    Density(f64),
    #[error("invalid oracle rules: {0}")]
    Rules(String),
    #[error("invalid dataset request: {0}")]
    Dataset(String),
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<OracleError>,
    },
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Culture time point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Day {
    D0,
    D1,
    D8,
    D30,
}

impl Day {
    pub const ALL: [Day; 4] = [Day::D0, Day::D1, Day::D8, Day::D30];

    pub fn days(self) -> u32 {
        match self {
            Day::D0 => 0,
            Day::D1 => 1,
            Day::D8 => 8,
            Day::D30 => 30,
        }
    }

    /// Value of the constant time plane: day / 30.
    pub fn time_value(self) -> f64 {
        f64::from(self.days()) / 30.0
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u32> for Day {
    type Error = OracleError;
    fn try_from(d: u32) -> Result<Self, OracleError> {
        match d {
            0 => Ok(Day::D0),
            1 => Ok(Day::D1),
            8 => Ok(Day::D8),
            30 => Ok(Day::D30),
            other => Err(OracleError::Day(other)),
        }
    }
}

impl From<Day> for u32 {
    fn from(d: Day) -> u32 {
        d.days()
    }
}

impl std::fmt::Display for Day {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.days())
    }
}

impl std::str::FromStr for Day {
    type Err = OracleError;
    fn from_str(s: &str) -> Result<Self, OracleError> {
        let d: u32 = s.trim().parse().map_err(|_| OracleError::Day(u32::MAX))?;
        Day::try_from(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Experimental,
    Predicted,
}

/// Single-channel image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FluorescenceImage {
    pub values: Grid,
    pub frame: FrameConfig,
    pub provenance: Provenance,
}

/// Cell morphology for one day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayProfile {
    /// Radius of the disc with the same area as the cell.
    pub radius_um: f64,
    /// Major/minor axis ratio.
    pub elongation: f64,
    pub brightness: f64,
    /// Cells per mm² at density 1.
    pub capacity_per_mm2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRules {
    pub theta_align_um: f64,
    pub adhesion_bias: f64,
    /// Profiles for days 0, 1, 8, 30 in that order.
    pub day_profiles: [DayProfile; 4],
    pub parallel_influence: f64,
    /// Off-line cells within this distance of a resolved line may align.
    pub influence_um: f64,
    /// Aligned cells deviate from the line direction by at most this much.
    pub orientation_jitter_deg: f64,
    /// Relative brightness spread: each cell is scaled by U(1 − j, 1).
    pub brightness_jitter: f64,
    /// How far along a feature the direction probe looks.
    pub cue_window_um: f64,
    /// Intensity of fluorescent debris along machined pixels (0 = off).
    pub line_glow: f64,
    /// Camera background level added to every pixel.
    pub background: f64,
}

impl Default for OracleRules {
    fn default() -> Self {
        Self {
            theta_align_um: 12.0,
            adhesion_bias: 4.0,
            day_profiles: [
                DayProfile {
                    radius_um: 6.0,
                    elongation: 1.0,
                    brightness: 1.0,
                    capacity_per_mm2: 2600.0,
                },
                DayProfile {
                    radius_um: 7.0,
                    elongation: 2.5,
                    brightness: 0.85,
                    capacity_per_mm2: 3000.0,
                },
                DayProfile {
                    radius_um: 9.0,
                    elongation: 4.0,
                    brightness: 0.8,
                    capacity_per_mm2: 3150.0,
                },
                DayProfile {
                    radius_um: 10.0,
                    elongation: 5.0,
                    brightness: 0.8,
                    capacity_per_mm2: 3200.0,
                },
            ],
            parallel_influence: 0.5,
            influence_um: 20.0,
            orientation_jitter_deg: 10.0,
            brightness_jitter: 0.2,
            cue_window_um: 60.0,
            line_glow: 0.0,
            background: 0.04,
        }
    }
}

impl OracleRules {
    pub fn profile(&self, day: Day) -> &DayProfile {
        &self.day_profiles[day.index()]
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::Rules(m));
        if !(self.theta_align_um > 0.0) {
            return bad(format!("theta_align_um must be positive, got {}", self.theta_align_um));
        }
        if !(self.adhesion_bias >= 1.0) {
            return bad(format!("adhesion_bias must be at least 1, got {}", self.adhesion_bias));
        }
        for (name, p) in [
            ("parallel_influence", self.parallel_influence),
            ("brightness_jitter", self.brightness_jitter),
            ("line_glow", self.line_glow),
            ("background", self.background),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.influence_um >= 0.0 && self.orientation_jitter_deg >= 0.0 && self.cue_window_um > 0.0) {
            return bad("influence, jitter and cue window must be non-negative".into());
        }
        for (day, p) in Day::ALL.iter().zip(&self.day_profiles) {
            let ok = p.radius_um > 0.0
                && p.elongation >= 1.0
                && p.brightness > 0.0
                && p.brightness <= 1.0
                && p.capacity_per_mm2 >= 0.0;
            if !ok {
                return bad(format!("day {day} profile out of range: {p:?}"));
            }
        }
        Ok(())
    }

    /// Expected cell count at density 1.
    pub fn capacity(&self, frame: &FrameConfig, day: Day) -> f64 {
        let side_mm = frame.resolution as f64 * frame.scale_um / 1000.0;
        self.profile(day).capacity_per_mm2 * side_mm * side_mm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub x_um: f64,
    pub y_um: f64,
    /// Major-axis direction in [0, 180), counter-clockwise from +x with y up.
    pub angle_deg: f64,
    pub elongation: f64,
    pub radius_um: f64,
    pub brightness: f64,
    pub aligned: bool,
}

impl Cell {
    pub fn semi_axes_um(&self) -> (f64, f64) {
        let s = self.elongation.sqrt();
        (self.radius_um * s, self.radius_um / s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellSet {
    pub cells: Vec<Cell>,
}

impl CellSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), IoError> {
        io::write_csv(path, &self.cells)
    }

    pub fn load_csv(path: &Path) -> Result<Self, IoError> {
        Ok(Self {
            cells: io::read_csv(path)?,
        })
    }
}

const PROBE_ANGLES: usize = 36;
const PROBE_STEP: f64 = 0.25;

/// Per-pixel topographical cues as a cell would sense them.
#[derive(Clone, Debug)]
pub struct TopographyCues {
    pub resolution: usize,
    /// Local line direction (degrees in [0, 180)) at oriented machined pixels.
    pub direction: Vec<Option<f64>>,
    /// Perpendicular gap to the neighbouring feature in pixels; infinite for
    /// isolated features.
    pub gap_px: Vec<f64>,
    /// Machined pixels whose feature the cell resolves.
    pub resolved: Vec<bool>,
    /// Direction of the nearest resolved line within the influence radius,
    /// for pixels that are not themselves resolved.
    pub nearby: Vec<Option<f64>>,
}

/// Machined test with mirror extension past the frame edge.
fn machined_at(raster: &TopographyRaster, x: f64, y: f64) -> bool {
    let r = raster.resolution() as isize;
    let reflect = |v: f64| {
        let i = (v.floor() as isize).rem_euclid(2 * r);
        (if i < r { i } else { 2 * r - 1 - i }) as usize
    };
    raster.at(reflect(y), reflect(x)) >= 0.5
}

/// Unit step for a direction in degrees, in (col, row) pixel coordinates.
fn step_of(deg: f64) -> (f64, f64) {
    let (s, c) = patterns::exact_sin_cos(deg);
    (c, -s)
}

/// Distance travelled from the pixel center along `dir` before leaving the
/// machined region, capped at `cap`.
fn run_length(raster: &TopographyRaster, row: usize, col: usize, dir: (f64, f64), cap: f64) -> f64 {
    let (x0, y0) = (col as f64 + 0.5, row as f64 + 0.5);
    let mut t = 0.0;
    while t < cap {
        let next = t + PROBE_STEP;
        if !machined_at(raster, x0 + dir.0 * next, y0 + dir.1 * next) {
            return t;
        }
        t = next;
    }
    cap
}

/// Width of the smooth strip crossed after leaving the feature along `dir`;
/// infinite beyond `cap` or when the frame edge is reached first, since the
/// glass past the edge is unseen.
fn gap_along(raster: &TopographyRaster, row: usize, col: usize, dir: (f64, f64), cap: f64) -> f64 {
    let r = raster.resolution() as f64;
    let (x0, y0) = (col as f64 + 0.5, row as f64 + 0.5);
    let mut t = 0.0;
    let mut exit = None;
    loop {
        t += PROBE_STEP;
        let (x, y) = (x0 + dir.0 * t, y0 + dir.1 * t);
        if x < 0.0 || y < 0.0 || x >= r || y >= r {
            return f64::INFINITY;
        }
        match (machined_at(raster, x, y), exit) {
            (false, None) => exit = Some(t),
            (true, Some(e)) => return t - e,
            _ => {}
        }
        if let Some(e) = exit {
            if t - e > cap {
                return f64::INFINITY;
            }
        }
    }
}

impl TopographyCues {
    pub fn analyze(raster: &TopographyRaster, rules: &OracleRules) -> Self {
        let r = raster.resolution();
        let scale = raster.frame.scale_um;
        let cap = (rules.cue_window_um / scale).max(4.0);
        let theta_px = (rules.theta_align_um / scale).round();
        let gap_cap = 4.0 * theta_px.max(cap);
        let n = r * r;
        let analyzed: Vec<(Option<f64>, f64)> = par::map_range(n, |i| {
            let (row, col) = (i / r, i % r);
            if raster.at(row, col) < 0.5 {
                return (None, f64::INFINITY);
            }
            let runs: Vec<f64> = (0..PROBE_ANGLES)
                .map(|k| {
                    let a = 180.0 * k as f64 / PROBE_ANGLES as f64;
                    let (dx, dy) = step_of(a);
                    run_length(raster, row, col, (dx, dy), cap) + run_length(raster, row, col, (-dx, -dy), cap)
                })
                .collect();
            let best = runs.iter().cloned().fold(0.0, f64::max);
            // Among the longest probes, the true direction has the narrowest
            // cross-section.
            let half = PROBE_ANGLES / 2;
            let k = (0..PROBE_ANGLES)
                .filter(|&k| runs[k] >= best - 1e-9)
                .min_by(|&a, &b| runs[(a + half) % PROBE_ANGLES].total_cmp(&runs[(b + half) % PROBE_ANGLES]))
                .expect("at least one probe");
            let across = runs[(k + half) % PROBE_ANGLES];
            if best < 3.0 || best < 2.0 * across.max(1.0) {
                return (None, f64::INFINITY);
            }
            let dir = 180.0 * k as f64 / PROBE_ANGLES as f64;
            let (px, py) = step_of(dir + 90.0);
            let gap = gap_along(raster, row, col, (px, py), gap_cap).min(gap_along(raster, row, col, (-px, -py), gap_cap));
            (Some(dir), gap)
        });
        let (direction, gap_px): (Vec<_>, Vec<_>) = analyzed.into_iter().unzip();
        let resolved: Vec<bool> = direction
            .iter()
            .zip(&gap_px)
            .map(|(d, g)| d.is_some() && *g >= theta_px - 0.5)
            .collect();
        let reach = rules.influence_um / scale;
        let ri = reach.floor() as isize;
        let nearby = par::map_range(n, |i| {
            if resolved[i] {
                return None;
            }
            let (row, col) = ((i / r) as isize, (i % r) as isize);
            let mut best: Option<(f64, f64)> = None;
            for dr in -ri..=ri {
                for dc in -ri..=ri {
                    let (rr, cc) = (row + dr, col + dc);
                    if rr < 0 || cc < 0 || rr >= r as isize || cc >= r as isize {
                        continue;
                    }
                    let j = rr as usize * r + cc as usize;
                    let d = ((dr * dr + dc * dc) as f64).sqrt();
                    if resolved[j] && d <= reach && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, direction[j].unwrap_or(0.0)));
                    }
                }
            }
            best.map(|(_, a)| a)
        });
        Self {
            resolution: r,
            direction,
            gap_px,
            resolved,
            nearby,
        }
    }
}

/// Smallest absolute difference between two axial angles, in [0, 90].
pub fn axial_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

pub fn check_density(density: f64) -> Result<(), OracleError> {
    if !(0.0..=1.0).contains(&density) {
        return Err(OracleError::Density(density));
    }
    Ok(())
}

/// Places cells on `raster` and renders their fluorescence.
pub fn simulate(
    raster: &TopographyRaster,
    day: Day,
    density: f64,
    rules: &OracleRules,
    seed: u64,
) -> Result<(FluorescenceImage, CellSet), OracleError> {
    check_density(density)?;
    rules.validate()?;
    let cues = TopographyCues::analyze(raster, rules);
    Ok(simulate_with_cues(raster, &cues, day, density, rules, seed))
}

/// [`simulate`] with precomputed cues, for repeated draws on one raster.
pub fn simulate_with_cues(
    raster: &TopographyRaster,
    cues: &TopographyCues,
    day: Day,
    density: f64,
    rules: &OracleRules,
    seed: u64,
) -> (FluorescenceImage, CellSet) {
    let frame = raster.frame;
    let r = frame.resolution;
    let mut rng = stream_rng(seed, Stream::Dataset);
    let lambda = density * rules.capacity(&frame, day);
    let count = if lambda > 0.0 {
        Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let profile = *rules.profile(day);
    let weights: Vec<f64> = cues
        .resolved
        .iter()
        .map(|&res| if res { rules.adhesion_bias } else { 1.0 })
        .collect();
    let picker = WeightedIndex::new(&weights).expect("weights are positive");
    let oriented = profile.elongation >= 1.5;
    let mut cells = Vec::with_capacity(count);
    for _ in 0..count {
        let i = picker.sample(&mut rng);
        let (row, col) = (i / r, i % r);
        let x_um = (col as f64 + rng.random::<f64>()) * frame.scale_um;
        let y_um = (row as f64 + rng.random::<f64>()) * frame.scale_um;
        let jitter = rules.orientation_jitter_deg * (2.0 * rng.random::<f64>() - 1.0);
        let random_angle = 180.0 * rng.random::<f64>();
        let follows = match (cues.resolved[i], cues.nearby[i]) {
            (true, _) => cues.direction[i],
            (false, Some(a)) if rng.random::<f64>() < rules.parallel_influence => Some(a),
            _ => None,
        };
        let angle_deg = match follows {
            Some(a) if oriented => (a + jitter).rem_euclid(180.0),
            _ => random_angle,
        };
        let brightness = profile.brightness * (1.0 - rules.brightness_jitter * rng.random::<f64>());
        cells.push(Cell {
            x_um,
            y_um,
            angle_deg,
            elongation: profile.elongation,
            radius_um: profile.radius_um,
            brightness,
            aligned: oriented && follows.is_some(),
        });
    }
    let mut values = render(&cells, raster, rules.line_glow);
    for v in values.data_mut() {
        *v = (*v + rules.background).min(1.0);
    }
    (
        FluorescenceImage {
            values,
            frame,
            provenance: Provenance::Oracle,
        },
        CellSet { cells },
    )
}

/// Gaussian width per semi-axis, so the nominal outline is the half-maximum
/// contour: 1/sqrt(2 ln 2).
const SIGMA_PER_AXIS: f64 = 0.849_321_800_288_019;

/// Sums one anisotropic Gaussian per cell, adds optional line glow, clips to [0, 1].
pub fn render(cells: &[Cell], raster: &TopographyRaster, line_glow: f64) -> Grid {
    let frame = raster.frame;
    let r = frame.resolution;
    let s = frame.scale_um;
    let mut acc = vec![0.0; r * r];
    for c in cells {
        let (a, b) = c.semi_axes_um();
        let (sa, sb) = (SIGMA_PER_AXIS * a, SIGMA_PER_AXIS * b);
        let (sin, cos) = patterns::exact_sin_cos(c.angle_deg);
        let reach = 3.5 * sa;
        let lo = |v: f64| (((v - reach) / s).floor().max(0.0)) as usize;
        let hi = |v: f64| ((((v + reach) / s).ceil()) as usize).min(r);
        for row in lo(c.y_um)..hi(c.y_um) {
            let dy = (row as f64 + 0.5) * s - c.y_um;
            for col in lo(c.x_um)..hi(c.x_um) {
                let dx = (col as f64 + 0.5) * s - c.x_um;
                // y grows downward, so the major axis is (cos, −sin).
                let u = dx * cos - dy * sin;
                let v = dx * sin + dy * cos;
                acc[row * r + col] += c.brightness * (-0.5 * (u * u / (sa * sa) + v * v / (sb * sb))).exp();
            }
        }
    }
    if line_glow > 0.0 {
        for (a, m) in acc.iter_mut().zip(raster.values.data()) {
            *a += line_glow * m;
        }
    }
    for a in &mut acc {
        *a = a.clamp(0.0, 1.0);
    }
    Grid::from_vec(&[1, r, r], acc).expect("square frame")
}

/// One dataset record; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub spec: TopographySpec,
    pub day: Day,
    pub density: f64,
    pub seed: u64,
    pub topography: String,
    pub fluorescence: String,
    pub cells: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let records: Vec<ManifestRecord> = io::read_jsonl(path)?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        Ok(io::write_jsonl(path, &self.records)?)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// The default training mix: mostly parallel lines spanning the alignment
/// threshold, plus blank glass and other shapes.
pub fn default_spec_mix() -> Vec<TopographySpec> {
    let mut specs = Vec::new();
    for &w in &[7.5, 10.0, 12.0, 25.0] {
        for s in (2..=40).step_by(2) {
            for &a in &[0.0, 90.0] {
                specs.push(TopographySpec::parallel_lines(w, f64::from(s), a));
            }
        }
        for &s in &[6.0, 14.0, 24.0] {
            for &a in &[45.0, 135.0] {
                specs.push(TopographySpec::parallel_lines(w, s, a));
            }
        }
    }
    specs.extend(std::iter::repeat_n(TopographySpec::blank(), 20));
    for &s in &[20.0, 40.0] {
        specs.push(TopographySpec::crossed_lines(10.0, s, 0.0));
        specs.push(TopographySpec::crossed_lines(10.0, s, 45.0));
        specs.push(TopographySpec::concentric_circles(10.0, s));
        specs.push(TopographySpec::filled_circles(20.0, s));
    }
    specs.push(TopographySpec::rings(8.0, vec![20.0, 45.0]));
    specs.push(TopographySpec::curve(10.0, vec![[5.0, 100.0], [60.0, 0.0], [120.0, 110.0]]));
    specs.push(TopographySpec::glyphs(4.0, "SSC"));
    specs.push(TopographySpec::border_box(10.0, None));
    specs
}

/// Samples `count` records from `specs`, simulates each and writes images,
/// cell tables and `manifest.jsonl` under `out_dir`. Record `i` uses seed
/// `base_seed ^ i`.
pub fn build_dataset(
    specs: &[TopographySpec],
    rules: &OracleRules,
    count: usize,
    frame: &FrameConfig,
    base_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, OracleError> {
    if count == 0 || specs.is_empty() {
        return Err(OracleError::Dataset(format!(
            "need at least one record and one spec, got count {count} and {} specs",
            specs.len()
        )));
    }
    rules.validate()?;
    frame.validate()?;
    for s in specs {
        s.validate(frame)?;
    }
    // Fails here, before any record is produced, if the directory is unusable.
    io::write_text(&out_dir.join(".probe"), "")?;
    let _ = std::fs::remove_file(out_dir.join(".probe"));

    let results = par::map_range(count, |i| -> Result<ManifestRecord, OracleError> {
        let seed = base_seed ^ i as u64;
        let mut pick = item_rng(seed, Stream::Dataset, 1);
        let spec = specs[pick.random_range(0..specs.len())].clone();
        let day = Day::ALL[pick.random_range(0..4)];
        let density = pick.random_range(0.05..=0.9);
        let raster = patterns::rasterize(&spec, frame)?;
        let (image, cells) = simulate(&raster, day, density, rules, seed)?;
        let rec = ManifestRecord {
            index: i,
            spec,
            day,
            density,
            seed,
            topography: format!("topo_{i:04}.png"),
            fluorescence: format!("fluo_{i:04}.png"),
            cells: format!("cells_{i:04}.csv"),
        };
        io::write_gray_png(&out_dir.join(&rec.topography), &raster.values)?;
        io::write_gray_png(&out_dir.join(&rec.fluorescence), &image.values)?;
        cells.save_csv(&out_dir.join(&rec.cells))?;
        Ok(rec)
    });
    let records = results
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| OracleError::Record { index, source: Box::new(e) }))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::rasterize;

    fn desk_lines(w: f64, s: f64, a: f64) -> TopographyRaster {
        rasterize(&TopographySpec::parallel_lines(w, s, a), &FrameConfig::desk()).unwrap()
    }

    #[test]
    fn day_parsing() {
        assert_eq!(Day::try_from(8).unwrap(), Day::D8);
        assert!(matches!(Day::try_from(7), Err(OracleError::Day(7))));
        assert_eq!(serde_json::to_string(&Day::D30).unwrap(), "30");
        assert!(serde_json::from_str::<Day>("2").is_err());
    }

    #[test]
    fn zero_density_is_empty_and_dark() {
        let raster = desk_lines(10.0, 20.0, 0.0);
        for day in Day::ALL {
            let (img, cells) = simulate(&raster, day, 0.0, &OracleRules::default(), 5).unwrap();
            assert!(cells.is_empty());
            assert!(img.values.data().iter().all(|v| *v == OracleRules::default().background));
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let raster = desk_lines(10.0, 20.0, 0.0);
        let rules = OracleRules::default();
        assert!(matches!(simulate(&raster, Day::D1, 1.5, &rules, 0), Err(OracleError::Density(_))));
        let bad = OracleRules {
            adhesion_bias: 0.5,
            ..OracleRules::default()
        };
        assert!(matches!(simulate(&raster, Day::D1, 0.5, &bad, 0), Err(OracleError::Rules(_))));
    }

    #[test]
    fn cues_on_axis_aligned_lines() {
        let rules = OracleRules::default();
        let frame = FrameConfig::desk();
        for (s, resolved) in [(10.0, false), (12.0, true), (14.0, true), (4.0, false)] {
            let raster = desk_lines(10.0, s, 0.0);
            let cues = TopographyCues::analyze(&raster, &rules);
            let g = (s / frame.scale_um).round();
            let interior: Vec<usize> = (0..64 * 64)
                .filter(|&i| raster.values.data()[i] >= 0.5 && (8..56).contains(&(i / 64)))
                .collect();
            assert!(!interior.is_empty());
            for &i in &interior {
                assert_eq!(cues.direction[i], Some(0.0), "s {s} px {i}");
                assert!(cues.gap_px[i] == g || cues.gap_px[i].is_infinite(), "{} vs {g}", cues.gap_px[i]);
                assert_eq!(cues.resolved[i], resolved || cues.gap_px[i].is_infinite());
            }
        }
        let vertical = TopographyCues::analyze(&desk_lines(10.0, 20.0, 90.0), &rules);
        assert!(vertical.direction.iter().flatten().all(|&a| a == 90.0));
    }

    #[test]
    fn blank_day0_positions_are_random_and_unaligned() {
        let raster = rasterize(&TopographySpec::blank(), &FrameConfig::desk()).unwrap();
        let (_, cells) = simulate(&raster, Day::D0, 0.5, &OracleRules::default(), 3).unwrap();
        assert!(cells.len() > 3);
        assert!(cells.cells.iter().all(|c| !c.aligned));
        let (_, later) = simulate(&raster, Day::D8, 0.5, &OracleRules::default(), 3).unwrap();
        assert!(later.cells.iter().all(|c| !c.aligned));
    }

    #[test]
    fn resolved_lines_align_cells() {
        let raster = desk_lines(10.0, 14.0, 0.0);
        let rules = OracleRules::default();
        let (_, cells) = simulate(&raster, Day::D8, 0.6, &rules, 9).unwrap();
        let on_line: Vec<&Cell> = cells
            .cells
            .iter()
            .filter(|c| {
                let (row, col) = ((c.y_um / raster.frame.scale_um) as usize, (c.x_um / raster.frame.scale_um) as usize);
                raster.at(row, col) >= 0.5
            })
            .collect();
        assert!(on_line.len() >= 5);
        for c in on_line {
            assert!(c.aligned);
            assert!(axial_difference(c.angle_deg, 0.0) <= 10.0 + 1e-9);
        }
    }

    #[test]
    fn aligned_flag_implies_within_cone() {
        let rules = OracleRules::default();
        for (s, a) in [(20.0, 0.0), (16.0, 90.0), (24.0, 45.0)] {
            let raster = desk_lines(10.0, s, a);
            let (_, cells) = simulate(&raster, Day::D30, 0.7, &rules, 1).unwrap();
            assert!(cells.cells.iter().any(|c| c.aligned));
            for c in cells.cells.iter().filter(|c| c.aligned) {
                assert!(axial_difference(c.angle_deg, a) <= rules.orientation_jitter_deg + 180.0 / PROBE_ANGLES as f64 + 1e-9, "{c:?}");
            }
        }
    }

    #[test]
    fn cells_stay_inside_frame() {
        let raster = desk_lines(25.0, 8.0, 0.0);
        let (_, cells) = simulate(&raster, Day::D30, 1.0, &OracleRules::default(), 4).unwrap();
        let side = raster.frame.resolution as f64 * raster.frame.scale_um;
        for c in &cells.cells {
            assert!((0.0..side).contains(&c.x_um) && (0.0..side).contains(&c.y_um));
            assert!((0.0..180.0).contains(&c.angle_deg));
            assert!(c.brightness > 0.0 && c.brightness <= 1.0);
        }
    }

    #[test]
    fn single_cell_render_peaks_at_center() {
        let frame = FrameConfig::desk();
        let raster = rasterize(&TopographySpec::blank(), &frame).unwrap();
        let cell = Cell {
            x_um: 32.5 * frame.scale_um,
            y_um: 20.5 * frame.scale_um,
            angle_deg: 0.0,
            elongation: 4.0,
            radius_um: 9.0,
            brightness: 0.8,
            aligned: false,
        };
        let img = render(&[cell], &raster, 0.0);
        let d = img.data();
        assert!((d[20 * 64 + 32] - 0.8).abs() < 1e-12);
        // Elongated along +x: falls off slower horizontally.
        assert!(d[20 * 64 + 36] > d[24 * 64 + 32]);
    }

    #[test]
    fn seeds_reproduce() {
        let raster = desk_lines(7.5, 18.0, 90.0);
        let rules = OracleRules::default();
        let a = simulate(&raster, Day::D1, 0.4, &rules, 77).unwrap();
        let b = simulate(&raster, Day::D1, 0.4, &rules, 77).unwrap();
        let c = simulate(&raster, Day::D1, 0.4, &rules, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn cellset_csv_columns() {
        let dir = std::env::temp_dir().join(format!("topocell-cells-{}", std::process::id()));
        let raster = desk_lines(10.0, 20.0, 0.0);
        let (_, cells) = simulate(&raster, Day::D8, 0.3, &OracleRules::default(), 2).unwrap();
        let path = dir.join("cells.csv");
        cells.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x_um,y_um,angle_deg,elongation,radius_um,brightness,aligned\n"));
        assert_eq!(CellSet::load_csv(&path).unwrap(), cells);
    }

    #[test]
    fn build_rejects_bad_requests() {
        let dir = std::env::temp_dir().join(format!("topocell-ds-bad-{}", std::process::id()));
        let frame = FrameConfig::desk();
        let rules = OracleRules::default();
        assert!(build_dataset(&[], &rules, 1, &frame, 0, &dir).is_err());
        assert!(build_dataset(&default_spec_mix(), &rules, 0, &frame, 0, &dir).is_err());
    }
}
