//! Alignment sweeps over parallel-line patterns: score how many cells follow
//! the lines, find the smallest separation that aligns them, and fit that
//! separation against line width.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::oracle::{self, Cell, Day, FluorescenceImage, OracleError, OracleRules, TopographyCues};
use crate::par;
use crate::patterns::{self, FrameConfig, PatternError, TopographyRaster, TopographySpec};
use crate::rng::mix;
use crate::stats::{self, BitMask, MaskConfig, StatsError};
use crate::wnet::{self, Model, WnetError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("no cells to score")]
    NoCells,
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error("line fit needs at least 3 distinct widths, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Wnet(#[from] WnetError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Half-width of the acceptance cone around the line direction.
    pub cone_deg: f64,
    /// Axis ratio at or above which a component counts as oriented.
    pub min_elongation: f64,
    pub fraction_threshold: f64,
    /// Oriented components needed before a point can count as aligned.
    pub min_oriented: usize,
    pub mask: MaskConfig,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            cone_deg: 20.0,
            min_elongation: 1.5,
            fraction_threshold: 0.6,
            min_oriented: 3,
            mask: MaskConfig::default(),
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        let ok = (0.0..=90.0).contains(&self.cone_deg)
            && self.min_elongation >= 1.0
            && (0.0..=1.0).contains(&self.fraction_threshold);
        if !ok {
            return Err(SweepError::Config(format!("alignment settings out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Orientation summary of one scored image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentScore {
    /// Aligned share of oriented components; 0 when none are oriented.
    pub aligned_fraction: f64,
    pub components: usize,
    pub oriented: usize,
    pub aligned: usize,
}

impl AlignmentScore {
    fn from_counts(components: usize, oriented: usize, aligned: usize) -> Self {
        let aligned_fraction = if oriented == 0 {
            0.0
        } else {
            aligned as f64 / oriented as f64
        };
        Self {
            aligned_fraction,
            components,
            oriented,
            aligned,
        }
    }

    /// True when nothing was oriented and the fraction is a placeholder.
    pub fn undefined(&self) -> bool {
        self.oriented == 0
    }

    pub fn is_aligned(&self, cfg: &AlignmentConfig) -> bool {
        self.oriented >= cfg.min_oriented && self.aligned_fraction >= cfg.fraction_threshold
    }

    /// Pools counts across replicate images.
    pub fn merge(&self, other: &AlignmentScore) -> AlignmentScore {
        Self::from_counts(
            self.components + other.components,
            self.oriented + other.oriented,
            self.aligned + other.aligned,
        )
    }
}

/// Major-axis direction in [0, 180) (counter-clockwise from +x, y up) and
/// axis ratio of a pixel set, from its second central moments. `None` for
/// fewer than two pixels.
pub fn component_orientation(pixels: &[usize], width: usize) -> Option<(f64, f64)> {
    if pixels.len() < 2 {
        return None;
    }
    let n = pixels.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &i in pixels {
        sx += (i % width) as f64;
        sy += (i / width) as f64;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for &i in pixels {
        let dx = (i % width) as f64 - mx;
        let dy = (i / width) as f64 - my;
        xx += dx * dx;
        yy += dy * dy;
        xy += dx * dy;
    }
    let (xx, yy, xy) = (xx / n, yy / n, xy / n);
    // Rows grow downward, so flip the cross moment's sign for y-up angles.
    let angle = 0.5 * (-2.0 * xy).atan2(xx - yy);
    let half_trace = 0.5 * (xx + yy);
    let disc = (0.25 * (xx - yy).powi(2) + xy * xy).sqrt();
    let (major, minor) = (half_trace + disc, (half_trace - disc).max(0.0));
    let ratio = if minor > 0.0 { (major / minor).sqrt() } else { f64::INFINITY };
    Some((angle.to_degrees().rem_euclid(180.0), ratio))
}

fn within_cone(angle_deg: f64, line_angle_deg: f64, cone_deg: f64) -> bool {
    oracle::axial_difference(angle_deg, line_angle_deg) <= cone_deg
}

/// Scores the connected components of `mask` against `line_angle_deg`.
pub fn alignment_score(mask: &BitMask, line_angle_deg: f64, cfg: &AlignmentConfig) -> Result<AlignmentScore, SweepError> {
    let comps = stats::connected_components(mask);
    if comps.is_empty() {
        return Err(SweepError::NoCells);
    }
    let (mut oriented, mut aligned) = (0, 0);
    for comp in &comps {
        let Some((angle, ratio)) = component_orientation(comp, mask.width) else {
            continue;
        };
        if ratio >= cfg.min_elongation {
            oriented += 1;
            if within_cone(angle, line_angle_deg, cfg.cone_deg) {
                aligned += 1;
            }
        }
    }
    Ok(AlignmentScore::from_counts(comps.len(), oriented, aligned))
}

/// Scores ground-truth cells directly from their recorded shape and angle.
pub fn alignment_score_cells(cells: &[Cell], line_angle_deg: f64, cfg: &AlignmentConfig) -> Result<AlignmentScore, SweepError> {
    if cells.is_empty() {
        return Err(SweepError::NoCells);
    }
    let oriented: Vec<&Cell> = cells.iter().filter(|c| c.elongation >= cfg.min_elongation).collect();
    let aligned = oriented
        .iter()
        .filter(|c| within_cone(c.angle_deg, line_angle_deg, cfg.cone_deg))
        .count();
    Ok(AlignmentScore::from_counts(cells.len(), oriented.len(), aligned))
}

/// One image to produce on a given raster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageRequest {
    pub day: Day,
    pub density: f64,
    pub seed: u64,
}

/// Produces fluorescence images for the sweep: a trained generator, or the
/// oracle itself for calibration. All requests share one raster.
pub trait ImageSource: Sync {
    fn images(&self, raster: &TopographyRaster, requests: &[ImageRequest]) -> Result<Vec<FluorescenceImage>, SweepError>;
}

pub struct ModelSource<'a> {
    pub generator: &'a Model,
}

impl ImageSource for ModelSource<'_> {
    fn images(&self, raster: &TopographyRaster, requests: &[ImageRequest]) -> Result<Vec<FluorescenceImage>, SweepError> {
        requests
            .iter()
            .map(|q| {
                let input = wnet::assemble_input(raster, q.day, q.density, q.seed)?;
                Ok(wnet::generate(self.generator, &input)?)
            })
            .collect()
    }
}

pub struct OracleSource {
    pub rules: OracleRules,
}

impl ImageSource for OracleSource {
    fn images(&self, raster: &TopographyRaster, requests: &[ImageRequest]) -> Result<Vec<FluorescenceImage>, SweepError> {
        self.rules.validate()?;
        let cues = TopographyCues::analyze(raster, &self.rules);
        requests
            .iter()
            .map(|q| {
                oracle::check_density(q.density)?;
                Ok(oracle::simulate_with_cues(raster, &cues, q.day, q.density, &self.rules, q.seed).0)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub widths_um: Vec<f64>,
    /// Edge-to-edge gaps, strictly increasing.
    pub separations_um: Vec<f64>,
    pub days: Vec<Day>,
    pub densities: Vec<f64>,
    pub line_angle_deg: f64,
    /// Images pooled per grid point.
    pub replicates: usize,
    pub seed: u64,
    pub alignment: AlignmentConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            widths_um: vec![7.5, 10.0, 12.0, 25.0],
            separations_um: (1..=15).map(|i| 2.0 * f64::from(i)).collect(),
            days: Day::ALL.to_vec(),
            densities: vec![0.2, 0.4, 0.6],
            line_angle_deg: 0.0,
            replicates: 8,
            seed: 0,
            alignment: AlignmentConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        self.alignment.validate()?;
        let bad = |m: &str| Err(SweepError::Config(m.to_string()));
        if self.widths_um.is_empty() || self.separations_um.is_empty() || self.days.is_empty() || self.densities.is_empty() {
            return bad("widths, separations, days and densities must be non-empty");
        }
        if self.separations_um.windows(2).any(|w| w[1] <= w[0]) {
            return bad("separation ladder must be strictly increasing");
        }
        if self.widths_um.iter().chain(&self.separations_um).any(|v| !(*v > 0.0)) {
            return bad("widths and separations must be positive");
        }
        if self.densities.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("densities must lie in [0, 1]");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        Ok(())
    }
}

/// One sweep grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub width_um: f64,
    pub separation_um: f64,
    pub day: Day,
    pub density: f64,
    pub aligned_fraction: f64,
    pub is_aligned: bool,
    /// Oriented components pooled over replicates; 0 marks an unscored point.
    #[serde(skip)]
    pub oriented: usize,
}

/// Pools replicate scores; empty images contribute nothing.
fn pooled_score(images: &[FluorescenceImage], cfg: &SweepConfig) -> Result<AlignmentScore, SweepError> {
    let mut pooled = AlignmentScore::from_counts(0, 0, 0);
    for image in images {
        let mask = stats::mask_of(image, &cfg.alignment.mask)?;
        match alignment_score(&mask, cfg.line_angle_deg, &cfg.alignment) {
            Ok(s) => pooled = pooled.merge(&s),
            Err(SweepError::NoCells) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(pooled)
}

/// Scores every (day, density) point on one line pattern.
fn score_pattern(
    source: &dyn ImageSource,
    frame: &FrameConfig,
    width_um: f64,
    separation_um: f64,
    cfg: &SweepConfig,
    pattern_seed: u64,
) -> Result<Vec<AlignmentRecord>, SweepError> {
    let spec = TopographySpec::parallel_lines(width_um, separation_um, cfg.line_angle_deg);
    let raster = patterns::rasterize(&spec, frame)?;
    let mut keys = Vec::new();
    let mut requests = Vec::new();
    for &day in &cfg.days {
        for &density in &cfg.densities {
            let point_seed = mix(pattern_seed, keys.len() as u64);
            keys.push((day, density));
            requests.extend((0..cfg.replicates).map(|rep| ImageRequest {
                day,
                density,
                seed: mix(point_seed, rep as u64),
            }));
        }
    }
    let images = source.images(&raster, &requests)?;
    keys.iter()
        .zip(images.chunks(cfg.replicates))
        .map(|(&(day, density), reps)| {
            let score = pooled_score(reps, cfg)?;
            Ok(AlignmentRecord {
                width_um,
                separation_um,
                day,
                density,
                aligned_fraction: score.aligned_fraction,
                is_aligned: score.is_aligned(&cfg.alignment),
                oriented: score.oriented,
            })
        })
        .collect()
}

/// Evaluates the full width × separation × day × density grid. Patterns are
/// independent and evaluated in parallel. Records are ordered by width,
/// day, density, then separation.
pub fn run_sweep(source: &dyn ImageSource, frame: &FrameConfig, cfg: &SweepConfig) -> Result<Vec<AlignmentRecord>, SweepError> {
    cfg.validate()?;
    let patterns: Vec<(f64, f64)> = cfg
        .widths_um
        .iter()
        .flat_map(|&w| cfg.separations_um.iter().map(move |&s| (w, s)))
        .collect();
    let scored = par::map_range(patterns.len(), |i| {
        let (w, s) = patterns[i];
        score_pattern(source, frame, w, s, cfg, mix(cfg.seed, i as u64))
    });
    let mut records = Vec::with_capacity(patterns.len() * cfg.days.len() * cfg.densities.len());
    for batch in scored {
        records.extend(batch?);
    }
    let day_rank = |d: Day| cfg.days.iter().position(|x| *x == d);
    let density_rank = |p: f64| cfg.densities.iter().position(|x| *x == p);
    records.sort_by(|a, b| {
        a.width_um
            .total_cmp(&b.width_um)
            .then(day_rank(a.day).cmp(&day_rank(b.day)))
            .then(density_rank(a.density).cmp(&density_rank(b.density)))
            .then(a.separation_um.total_cmp(&b.separation_um))
    });
    Ok(records)
}

/// Where the alignment threshold sits on one separation ladder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Crossing {
    /// Smallest separation from which every larger one aligns.
    At { separation_um: f64, monotone: bool },
    /// The largest separation does not align.
    AboveLadder,
    /// No oriented component anywhere on the ladder.
    Unscored,
}

/// Finds the crossing on a ladder sorted by separation. A ladder that
/// aligns, fails, then aligns again is not monotone; the last upward
/// crossing is used.
pub fn crossing(ladder: &[AlignmentRecord]) -> Crossing {
    if ladder.iter().all(|r| r.oriented == 0) {
        return Crossing::Unscored;
    }
    match ladder.iter().rposition(|r| !r.is_aligned) {
        None => Crossing::At {
            separation_um: ladder[0].separation_um,
            monotone: true,
        },
        Some(last) if last + 1 == ladder.len() => Crossing::AboveLadder,
        Some(last) => Crossing::At {
            separation_um: ladder[last + 1].separation_um,
            monotone: !ladder[..last].iter().any(|r| r.is_aligned),
        },
    }
}

/// Per-width minimum separation summary across (day, density) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MinSeparation {
    pub width_um: f64,
    /// Crossing for each (day, density) pair, in sweep order.
    pub pairs: Vec<(Day, f64, Crossing)>,
    /// Mean and standard deviation over pairs with a numeric crossing.
    pub mean_um: Option<f64>,
    pub std_um: Option<f64>,
}

impl MinSeparation {
    pub fn above_ladder(&self) -> usize {
        self.pairs.iter().filter(|p| p.2 == Crossing::AboveLadder).count()
    }

    pub fn non_monotone(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| matches!(p.2, Crossing::At { monotone: false, .. }))
            .count()
    }
}

/// Groups sweep records of one width by (day, density) and summarizes the
/// crossings. Unscored pairs are left out of the mean.
pub fn summarize_width(records: &[AlignmentRecord], width_um: f64) -> MinSeparation {
    let mut keys: Vec<(Day, f64)> = Vec::new();
    for r in records.iter().filter(|r| r.width_um == width_um) {
        if !keys.iter().any(|k| *k == (r.day, r.density)) {
            keys.push((r.day, r.density));
        }
    }
    let pairs: Vec<(Day, f64, Crossing)> = keys
        .into_iter()
        .map(|(day, rho)| {
            let mut ladder: Vec<AlignmentRecord> = records
                .iter()
                .filter(|r| r.width_um == width_um && r.day == day && r.density == rho)
                .cloned()
                .collect();
            ladder.sort_by(|a, b| a.separation_um.total_cmp(&b.separation_um));
            (day, rho, crossing(&ladder))
        })
        .collect();
    let values: Vec<f64> = pairs
        .iter()
        .filter_map(|p| match p.2 {
            Crossing::At { separation_um, .. } => Some(separation_um),
            _ => None,
        })
        .collect();
    let (mean_um, std_um) = match values.len() {
        0 => (None, None),
        n => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()))
        }
    };
    MinSeparation {
        width_um,
        pairs,
        mean_um,
        std_um,
    }
}

/// Sweeps one width over the configured days, densities and ladder.
pub fn min_separation(source: &dyn ImageSource, frame: &FrameConfig, width_um: f64, cfg: &SweepConfig) -> Result<MinSeparation, SweepError> {
    let one = SweepConfig {
        widths_um: vec![width_um],
        ..cfg.clone()
    };
    let records = run_sweep(source, frame, &one)?;
    Ok(summarize_width(&records, width_um))
}

/// Least-squares line through (width, minimum separation) points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentFit {
    /// (width, mean minimum separation, spread) per width.
    pub points: Vec<(f64, f64, f64)>,
    pub slope: f64,
    pub slope_err: f64,
    pub intercept: f64,
    pub intercept_err: f64,
}

impl AlignmentFit {
    pub fn predict(&self, width_um: f64) -> f64 {
        self.intercept + self.slope * width_um
    }

    /// Standard error of the fitted mean at `width_um`.
    pub fn band(&self, width_um: f64) -> f64 {
        let n = self.points.len() as f64;
        let mx = self.points.iter().map(|p| p.0).sum::<f64>() / n;
        let sxx: f64 = self.points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let s2 = self.slope_err.powi(2) * sxx;
        (s2 * (1.0 / n + (width_um - mx).powi(2) / sxx)).sqrt()
    }
}

/// Ordinary least squares with standard errors from the residual variance
/// on n − 2 degrees of freedom.
pub fn fit_line(points: &[(f64, f64, f64)]) -> Result<AlignmentFit, SweepError> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(SweepError::TooFewPoints(xs.len()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let s2 = rss / (n - 2.0);
    let slope_err = (s2 / sxx).sqrt();
    let intercept_err = (s2 * (1.0 / n + mx * mx / sxx)).sqrt();
    Ok(AlignmentFit {
        points: points.to_vec(),
        slope,
        slope_err,
        intercept,
        intercept_err,
    })
}

/// Fit points from per-width summaries; widths without a numeric crossing
/// are skipped.
pub fn fit_points(summaries: &[MinSeparation]) -> Vec<(f64, f64, f64)> {
    summaries
        .iter()
        .filter_map(|s| Some((s.width_um, s.mean_um?, s.std_um.unwrap_or(0.0))))
        .collect()
}

pub fn save_sweep_csv(path: &Path, records: &[AlignmentRecord]) -> Result<(), SweepError> {
    Ok(io::write_csv(path, records)?)
}

/// Plain-text report: one line per width, then the fit.
pub fn fit_report(summaries: &[MinSeparation], fit: Option<&AlignmentFit>) -> String {
    let mut out = String::new();
    for s in summaries {
        let value = match (s.mean_um, s.std_um) {
            (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2} um"),
            _ => "above ladder".to_string(),
        };
        let scored = s.pairs.iter().filter(|p| p.2 != Crossing::Unscored).count();
        let _ = writeln!(
            out,
            "width {:.1} um: minimum separation {value} ({scored} of {} day/density pairs scored, {} above ladder, {} non-monotone)",
            s.width_um,
            s.pairs.len(),
            s.above_ladder(),
            s.non_monotone()
        );
    }
    match fit {
        Some(f) => {
            let _ = writeln!(out, "slope {:.3} ± {:.3} um/um", f.slope, f.slope_err);
            let _ = writeln!(out, "intercept {:.2} ± {:.2} um", f.intercept, f.intercept_err);
        }
        None => {
            let _ = writeln!(out, "fit unavailable: fewer than 3 widths with a crossing");
        }
    }
    out
}

#[derive(Serialize)]
struct FitRow {
    width_um: f64,
    min_separation_um: f64,
    std_um: f64,
    slope: f64,
    slope_err: f64,
    intercept: f64,
    intercept_err: f64,
}

pub fn save_fit_csv(path: &Path, fit: &AlignmentFit) -> Result<(), SweepError> {
    let rows: Vec<FitRow> = fit
        .points
        .iter()
        .map(|&(w, m, sd)| FitRow {
            width_um: w,
            min_separation_um: m,
            std_um: sd,
            slope: fit.slope,
            slope_err: fit.slope_err,
            intercept: fit.intercept,
            intercept_err: fit.intercept_err,
        })
        .collect();
    Ok(io::write_csv(path, &rows)?)
}

/// RGB raster canvas for the fit plot.
struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![255; 3 * width * height],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.set((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: [u8; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let Some(rows) = patterns::glyph(ch) else { continue };
            let ox = x + k as i64 * 6 * scale;
            for (r, bits) in rows.iter().enumerate() {
                for b in 0..5 {
                    if bits & (0x10 >> b) != 0 {
                        let (px, py) = (ox + b * scale, y + r as i64 * scale);
                        self.rect(px, py, px + scale - 1, py + scale - 1, c);
                    }
                }
            }
        }
    }
}

pub const PLOT_WIDTH: usize = 640;
pub const PLOT_HEIGHT: usize = 480;

/// Scatter of minimum separation against width with error bars, the fitted
/// trend line and its standard-error band, as RGB8 pixels.
pub fn render_plot(fit: &AlignmentFit) -> Vec<u8> {
    const AXIS: [u8; 3] = [0, 0, 0];
    const POINT: [u8; 3] = [20, 60, 200];
    const TREND: [u8; 3] = [210, 30, 30];
    const BAND: [u8; 3] = [250, 205, 205];
    let mut cv = Canvas::new(PLOT_WIDTH, PLOT_HEIGHT);
    let (left, right, top, bottom) = (70.0, 610.0, 30.0, 420.0);
    let x_max = fit.points.iter().map(|p| p.0).fold(0.0, f64::max).max(1.0) * 1.2;
    let y_max = fit
        .points
        .iter()
        .map(|p| p.1 + p.2)
        .chain((0..=20).map(|i| fit.predict(x_max * f64::from(i) / 20.0) + fit.band(x_max * f64::from(i) / 20.0)))
        .fold(0.0, f64::max)
        .max(1.0)
        * 1.15;
    let px = |x: f64| left + (right - left) * x / x_max;
    let py = |y: f64| bottom - (bottom - top) * (y / y_max).clamp(-0.05, 1.05);
    for col in left as i64..=right as i64 {
        let x = (col as f64 - left) / (right - left) * x_max;
        let (m, b) = (fit.predict(x), fit.band(x));
        let (ya, yb) = (py(m + b), py(m - b));
        cv.rect(col, ya.round() as i64, col, yb.round() as i64, BAND);
    }
    cv.line((px(0.0), py(fit.predict(0.0))), (px(x_max), py(fit.predict(x_max))), TREND);
    cv.line((left, bottom), (right, bottom), AXIS);
    cv.line((left, bottom), (left, top), AXIS);
    for i in 0..=5 {
        let xv = x_max * f64::from(i) / 5.0;
        let x = px(xv).round() as i64;
        cv.rect(x, bottom as i64, x, bottom as i64 + 5, AXIS);
        cv.text(x - 9, bottom as i64 + 10, &format!("{xv:.0}"), 2, AXIS);
        let yv = y_max * f64::from(i) / 5.0;
        let y = py(yv).round() as i64;
        cv.rect(left as i64 - 5, y, left as i64, y, AXIS);
        cv.text(8, y - 7, &format!("{yv:.0}"), 2, AXIS);
    }
    for &(w, m, sd) in &fit.points {
        let (x, y) = (px(w).round() as i64, py(m).round() as i64);
        let (ya, yb) = (py(m + sd).round() as i64, py(m - sd).round() as i64);
        cv.rect(x, ya, x, yb, POINT);
        cv.rect(x - 4, ya, x + 4, ya, POINT);
        cv.rect(x - 4, yb, x + 4, yb, POINT);
        cv.rect(x - 3, y - 3, x + 3, y + 3, POINT);
    }
    cv.text(250, 450, "WIDTH UM", 2, AXIS);
    cv.text(90, 6, &format!("SLOPE {:.2} +- {:.2}", fit.slope, fit.slope_err), 2, TREND);
    cv.rgb
}

pub fn save_plot(path: &Path, fit: &AlignmentFit) -> Result<(), SweepError> {
    Ok(io::write_rgb_png(path, &render_plot(fit), PLOT_WIDTH, PLOT_HEIGHT)?)
}
