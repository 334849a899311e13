//! Image preprocessing, cell masks, section occupancy and the hypergeometric
//! overlap test used to judge predictions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, GridError};
use crate::oracle::FluorescenceImage;
use crate::patterns::FrameConfig;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("invalid hypergeometric arguments: N={n_total}, K={marked}, n={drawn}")]
    Hypergeom { n_total: u64, marked: u64, drawn: u64 },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Maps the 1st/99th percentiles to 0/1 and clips. When those percentiles
/// coincide the full range is used instead, and a constant image maps to
/// zeros.
pub fn normalize_image(image: &Grid) -> Grid {
    let mut sorted = image.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (percentile(&sorted, 0.01), percentile(&sorted, 0.99));
    if hi <= lo {
        lo = sorted[0];
        hi = sorted[sorted.len() - 1];
    }
    if hi <= lo {
        return Grid::zeros(image.shape());
    }
    let span = hi - lo;
    image.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Seeded uniform `window`×`window` crop, then area averaging down to
/// `output`×`output`. `window / output` must be a whole factor.
pub fn crop_resize(image: &Grid, window: usize, output: usize, seed: u64) -> Result<Grid, StatsError> {
    let (c, h, w) = image.chw()?;
    if output == 0 || window % output != 0 {
        return Err(StatsError::Config(format!("window {window} is not a multiple of output {output}")));
    }
    if h < window || w < window {
        return Err(StatsError::Size(format!("{w}x{h} image is smaller than the {window}x{window} window")));
    }
    let mut rng = stream_rng(seed, Stream::Cropping);
    let top = rng.random_range(0..=h - window);
    let left = rng.random_range(0..=w - window);
    let f = window / output;
    let norm = (f * f) as f64;
    let mut out = Vec::with_capacity(c * output * output);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..output {
            for ox in 0..output {
                let mut s = 0.0;
                for y in top + oy * f..top + (oy + 1) * f {
                    s += plane[y * w + left + ox * f..y * w + left + (ox + 1) * f].iter().sum::<f64>();
                }
                out.push(s / norm);
            }
        }
    }
    Ok(Grid::from_vec(&[c, output, output], out)?)
}

/// Row-major boolean image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BitMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    fn same_size(&self, other: &BitMask) -> Result<(), StatsError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(StatsError::Size(format!(
                "masks are {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Occupied when the normalized value is at least this.
    pub threshold: f64,
    /// Components smaller than a disc of this diameter are dropped.
    pub min_diameter_um: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            min_diameter_um: 5.0,
        }
    }
}

impl MaskConfig {
    pub fn min_area_px(&self, frame: &FrameConfig) -> usize {
        let r = self.min_diameter_um / 2.0;
        (std::f64::consts::PI * r * r / frame.pixel_area_um2()).ceil() as usize
    }
}

/// 8-connected components of the set pixels, each as a list of indices in
/// scan order. Components are ordered by their first pixel.
pub fn connected_components(mask: &BitMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![false; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] {
            continue;
        }
        let mut comp = Vec::new();
        label[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if mask.bits[j] && !label[j] {
                        label[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Thresholds an already normalized image and removes small components.
pub fn cell_mask(image: &FluorescenceImage, cfg: &MaskConfig) -> Result<BitMask, StatsError> {
    let (c, h, w) = image.values.chw()?;
    if c != 1 {
        return Err(StatsError::Size(format!("cell_mask needs one channel, got {c}")));
    }
    let raw = BitMask {
        width: w,
        height: h,
        bits: image.values.data().iter().map(|&v| v >= cfg.threshold).collect(),
    };
    let min_area = cfg.min_area_px(&image.frame);
    let mut out = BitMask::empty(w, h);
    for comp in connected_components(&raw) {
        if comp.len() >= min_area {
            for i in comp {
                out.bits[i] = true;
            }
        }
    }
    Ok(out)
}

/// Normalizes `image` and extracts its cell mask.
pub fn mask_of(image: &FluorescenceImage, cfg: &MaskConfig) -> Result<BitMask, StatsError> {
    let normalized = FluorescenceImage {
        values: normalize_image(&image.values),
        ..image.clone()
    };
    cell_mask(&normalized, cfg)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionOccupancy {
    pub sections_per_side: usize,
    pub counts: Vec<usize>,
    pub occupied: Vec<bool>,
    pub min_pixels: usize,
}

impl SectionOccupancy {
    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|b| **b).count()
    }
}

/// Splits the mask into `g`×`g` equal blocks; a block is occupied when it
/// holds at least `min_pixels` set pixels.
pub fn section_occupancy(mask: &BitMask, g: usize, min_pixels: usize) -> Result<SectionOccupancy, StatsError> {
    if g == 0 || mask.width % g != 0 || mask.height % g != 0 {
        return Err(StatsError::Config(format!(
            "{g} sections per side do not divide {}x{}",
            mask.width, mask.height
        )));
    }
    let (bw, bh) = (mask.width / g, mask.height / g);
    let mut counts = vec![0; g * g];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                counts[(r / bh) * g + c / bw] += 1;
            }
        }
    }
    let occupied = counts.iter().map(|&n| n >= min_pixels.max(1)).collect();
    Ok(SectionOccupancy {
        sections_per_side: g,
        counts,
        occupied,
        min_pixels: min_pixels.max(1),
    })
}

/// Support of the hypergeometric distribution as (lowest, highest) overlap.
fn support(n_total: u64, marked: u64, drawn: u64) -> Result<(u64, u64), StatsError> {
    if marked > n_total || drawn > n_total || n_total == 0 {
        return Err(StatsError::Hypergeom {
            n_total,
            marked,
            drawn,
        });
    }
    Ok(((marked + drawn).saturating_sub(n_total), marked.min(drawn)))
}

/// Unnormalized log-weights over the support, built by the ratio
/// recurrence outward from the mode, plus their log-sum.
fn log_weights(n_total: u64, marked: u64, drawn: u64) -> Result<(u64, Vec<f64>, f64), StatsError> {
    let (lo, hi) = support(n_total, marked, drawn)?;
    let (nn, kk, n) = (n_total as f64, marked as f64, drawn as f64);
    let mode = (((n + 1.0) * (kk + 1.0) / (nn + 2.0)).floor() as u64).clamp(lo, hi);
    let len = (hi - lo + 1) as usize;
    let mut lw = vec![0.0; len];
    let m = (mode - lo) as usize;
    // ln pmf(k+1) − ln pmf(k) = ln[(K−k)(n−k)] − ln[(k+1)(N−K−n+k+1)]
    let step = |k: f64| ((kk - k) * (n - k)).ln() - ((k + 1.0) * (nn - kk - n + k + 1.0)).ln();
    for i in m + 1..len {
        let k = (lo as usize + i - 1) as f64;
        lw[i] = lw[i - 1] + step(k);
    }
    for i in (0..m).rev() {
        let k = (lo as usize + i) as f64;
        lw[i] = lw[i + 1] - step(k);
    }
    let total = log_sum_exp(&lw);
    Ok((lo, lw, total))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    // Summing the smallest terms first keeps rounding error minimal.
    let mut terms: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    terms.sort_by(f64::total_cmp);
    max + terms.iter().sum::<f64>().ln()
}

/// Natural log of P(X = k) for X ~ Hypergeometric(N, K, n); −∞ outside the
/// support.
pub fn hypergeom_log_pmf(n_total: u64, marked: u64, drawn: u64, k: u64) -> Result<f64, StatsError> {
    let (lo, lw, total) = log_weights(n_total, marked, drawn)?;
    if k < lo || k >= lo + lw.len() as u64 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(lw[(k - lo) as usize] - total)
}

/// C(K,k)·C(N−K,n−k)/C(N,n); zero outside the support.
pub fn hypergeom_pmf(n_total: u64, marked: u64, drawn: u64, k: u64) -> Result<f64, StatsError> {
    Ok(hypergeom_log_pmf(n_total, marked, drawn, k)?.exp())
}

/// Natural log of P(X ≥ k_obs).
pub fn hypergeom_log_tail(n_total: u64, marked: u64, drawn: u64, k_obs: u64) -> Result<f64, StatsError> {
    let (lo, lw, total) = log_weights(n_total, marked, drawn)?;
    if k_obs <= lo {
        return Ok(0.0);
    }
    let from = (k_obs - lo) as usize;
    if from >= lw.len() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((log_sum_exp(&lw[from..]) - total).min(0.0))
}

/// P(X ≥ k_obs): the chance that random placement overlaps at least as much.
pub fn hypergeom_tail(n_total: u64, marked: u64, drawn: u64, k_obs: u64) -> Result<f64, StatsError> {
    Ok(hypergeom_log_tail(n_total, marked, drawn, k_obs)?.exp())
}

/// Natural log of P(Y ≥ k) for Y ~ Binomial(n, p).
pub fn binomial_log_tail(n: u64, p: f64, k: u64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if k > n || p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let nf = n as f64;
    let mode = (((nf + 1.0) * p).floor() as u64).min(n);
    let len = n as usize + 1;
    let mut lw = vec![0.0; len];
    let ratio = (p / (1.0 - p)).ln();
    // ln pmf(j+1) − ln pmf(j) = ln((n−j)/(j+1)) + ln(p/(1−p))
    for j in mode as usize + 1..len {
        let jf = (j - 1) as f64;
        lw[j] = lw[j - 1] + ((nf - jf) / (jf + 1.0)).ln() + ratio;
    }
    for j in (0..mode as usize).rev() {
        let jf = j as f64;
        lw[j] = lw[j + 1] - ((nf - jf) / (jf + 1.0)).ln() - ratio;
    }
    (log_sum_exp(&lw[k as usize..]) - log_sum_exp(&lw)).min(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SectionComparison {
    pub sections: u64,
    pub experiment_occupied: u64,
    pub prediction_occupied: u64,
    pub overlap: u64,
    pub p_value: f64,
    pub log_p: f64,
    /// RGB8: prediction only blue, experiment only red, both green.
    pub composite: Vec<u8>,
    pub width: usize,
    pub height: usize,
}

impl SectionComparison {
    pub fn composite_counts(&self) -> (usize, usize, usize) {
        let (mut red, mut green, mut blue) = (0, 0, 0);
        for px in self.composite.chunks(3) {
            match px {
                [255, 0, 0] => red += 1,
                [0, 255, 0] => green += 1,
                [0, 0, 255] => blue += 1,
                _ => {}
            }
        }
        (red, green, blue)
    }
}

pub fn composite(pred: &BitMask, exp: &BitMask) -> Result<Vec<u8>, StatsError> {
    pred.same_size(exp)?;
    Ok(pred
        .bits
        .iter()
        .zip(&exp.bits)
        .flat_map(|(&p, &e)| match (p, e) {
            (true, true) => [0, 255, 0],
            (true, false) => [0, 0, 255],
            (false, true) => [255, 0, 0],
            (false, false) => [0, 0, 0],
        })
        .collect())
}

/// Section-level overlap test of a predicted mask against an experimental one.
pub fn compare(pred: &BitMask, exp: &BitMask, g: usize, min_pixels: usize) -> Result<SectionComparison, StatsError> {
    pred.same_size(exp)?;
    let sp = section_occupancy(pred, g, min_pixels)?;
    let se = section_occupancy(exp, g, min_pixels)?;
    let n_sections = (g * g) as u64;
    let big_k = se.occupied_count() as u64;
    let n = sp.occupied_count() as u64;
    let k = sp.occupied.iter().zip(&se.occupied).filter(|(a, b)| **a && **b).count() as u64;
    let log_p = hypergeom_log_tail(n_sections, big_k, n, k)?;
    Ok(SectionComparison {
        sections: n_sections,
        experiment_occupied: big_k,
        prediction_occupied: n,
        overlap: k,
        p_value: p_from_log(log_p),
        log_p,
        composite: composite(pred, exp)?,
        width: pred.width,
        height: pred.height,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelComparison {
    pub pixels: u64,
    pub experiment_occupied: u64,
    pub prediction_occupied: u64,
    pub overlap: u64,
    pub p_value: f64,
    pub log_p: f64,
    /// Binomial approximation with success probability K/N.
    pub p_binomial: f64,
    pub log_p_binomial: f64,
}

/// The same tail test with individual pixels in place of sections.
pub fn pixel_level_p(pred: &BitMask, exp: &BitMask) -> Result<PixelComparison, StatsError> {
    pred.same_size(exp)?;
    let n_px = pred.bits.len() as u64;
    let big_k = exp.count() as u64;
    let n = pred.count() as u64;
    let k = pred.bits.iter().zip(&exp.bits).filter(|(a, b)| **a && **b).count() as u64;
    let log_p = hypergeom_log_tail(n_px, big_k, n, k)?;
    let log_b = binomial_log_tail(n, big_k as f64 / n_px as f64, k);
    Ok(PixelComparison {
        pixels: n_px,
        experiment_occupied: big_k,
        prediction_occupied: n,
        overlap: k,
        p_value: p_from_log(log_p),
        log_p,
        p_binomial: p_from_log(log_b),
        log_p_binomial: log_b,
    })
}

/// Randomly permutes the `g`×`g` blocks of a mask, destroying positional
/// information while keeping the occupied-section count.
pub fn shuffle_sections(mask: &BitMask, g: usize, seed: u64) -> Result<BitMask, StatsError> {
    section_occupancy(mask, g, 1)?;
    let (bw, bh) = (mask.width / g, mask.height / g);
    let mut order: Vec<usize> = (0..g * g).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Evaluation));
    let mut out = BitMask::empty(mask.width, mask.height);
    for (dst, &src) in order.iter().enumerate() {
        let (dr, dc) = (dst / g, dst % g);
        let (sr, sc) = (src / g, src % g);
        for y in 0..bh {
            for x in 0..bw {
                out.bits[(dr * bh + y) * mask.width + dc * bw + x] = mask.get(sr * bh + y, sc * bw + x);
            }
        }
    }
    Ok(out)
}

/// Reported P-value: exp(log_p), floored at the smallest positive normal
/// double so extreme overlaps stay strictly positive.
pub fn p_from_log(log_p: f64) -> f64 {
    log_p.exp().clamp(f64::MIN_POSITIVE, 1.0)
}

/// Significance stars: `***` below 0.001, `**` below 0.01.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else {
        ""
    }
}

/// One line of a comparison report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: String,
    #[serde(rename = "N")]
    pub sections: u64,
    #[serde(rename = "K")]
    pub experiment_occupied: u64,
    pub n: u64,
    pub k: u64,
    pub p_section: f64,
    pub p_pixel: f64,
}

impl ReportRow {
    pub fn new(image_id: &str, s: &SectionComparison, p: &PixelComparison) -> Self {
        Self {
            image_id: image_id.to_string(),
            sections: s.sections,
            experiment_occupied: s.experiment_occupied,
            n: s.prediction_occupied,
            k: s.overlap,
            p_section: s.p_value,
            p_pixel: p.p_value,
        }
    }

    pub fn text(&self, p_binomial: f64) -> String {
        format!(
            "{}: N={} K={} n={} k={} P_section={:.3e}{} P_pixel={:.3e}{} P_pixel_binomial={:.3e}",
            self.image_id,
            self.sections,
            self.experiment_occupied,
            self.n,
            self.k,
            self.p_section,
            stars(self.p_section),
            self.p_pixel,
            stars(self.p_pixel),
            p_binomial
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Provenance;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Grid {
        Grid::from_vec(&[1, h, w], (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    fn mask_from(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> BitMask {
        BitMask {
            width: w,
            height: h,
            bits: (0..w * h).map(|i| f(i / w, i % w)).collect(),
        }
    }

    #[test]
    fn normalize_cases() {
        let c = Grid::full(&[1, 8, 8], 0.7);
        assert!(normalize_image(&c).data().iter().all(|v| *v == 0.0));
        let ramp = img(10, 10, |r, c| (r * 10 + c) as f64 / 99.0);
        let a = normalize_image(&ramp);
        let b = normalize_image(&ramp.map(|v| 0.5 * v));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(a.data()[99], 1.0);
        // Sparse image: percentiles coincide, full range takes over.
        let sparse = img(16, 16, |r, c| if (r, c) == (3, 3) { 0.4 } else { 0.0 });
        assert_eq!(normalize_image(&sparse).data()[3 * 16 + 3], 1.0);
    }

    #[test]
    fn crop_resize_cases() {
        let flat = Grid::full(&[1, 600, 700], 0.3);
        let out = crop_resize(&flat, 512, 256, 1).unwrap();
        assert_eq!(out.shape(), &[1, 256, 256]);
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let checker = img(512, 512, |r, c| ((r + c) % 2) as f64);
        let out = crop_resize(&checker, 512, 256, 9).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.5));
        let ramp = img(512, 512, |r, c| (r * 512 + c) as f64);
        let whole = crop_resize(&ramp, 512, 256, 3).unwrap();
        assert_eq!(whole.data()[0], (0.0 + 1.0 + 512.0 + 513.0) / 4.0);
        assert!(crop_resize(&Grid::zeros(&[1, 500, 600]), 512, 256, 0).is_err());
        let big = img(1024, 1280, |r, c| ((r * 31 + c * 17) % 97) as f64);
        assert_eq!(crop_resize(&big, 512, 256, 5).unwrap(), crop_resize(&big, 512, 256, 5).unwrap());
    }

    #[test]
    fn mask_cases() {
        let frame = FrameConfig::desk();
        let zero = FluorescenceImage {
            values: Grid::zeros(&[1, 64, 64]),
            frame,
            provenance: Provenance::Oracle,
        };
        assert_eq!(cell_mask(&zero, &MaskConfig::default()).unwrap().count(), 0);
        let all = MaskConfig {
            threshold: 0.0,
            ..MaskConfig::default()
        };
        assert_eq!(cell_mask(&zero, &all).unwrap().count(), 64 * 64);
        // A speck below the minimum area disappears, a blob survives.
        let values = img(64, 64, |r, c| {
            let blob = (r as f64 - 20.0).powi(2) + (c as f64 - 20.0).powi(2) <= 9.0;
            if blob || (r, c) == (50, 50) {
                1.0
            } else {
                0.0
            }
        });
        let m = cell_mask(
            &FluorescenceImage {
                values,
                frame,
                provenance: Provenance::Oracle,
            },
            &MaskConfig::default(),
        )
        .unwrap();
        assert!(m.get(20, 20));
        assert!(!m.get(50, 50));
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn eight_connectivity() {
        let diag = mask_from(4, 4, |r, c| r == c);
        assert_eq!(connected_components(&diag).len(), 1);
        let split = mask_from(4, 4, |r, c| (r, c) == (0, 0) || (r, c) == (0, 2));
        assert_eq!(connected_components(&split).len(), 2);
    }

    #[test]
    fn occupancy_cases() {
        let empty = BitMask::empty(64, 64);
        assert_eq!(section_occupancy(&empty, 16, 1).unwrap().occupied_count(), 0);
        let full = mask_from(64, 64, |_, _| true);
        assert_eq!(section_occupancy(&full, 16, 1).unwrap().occupied_count(), 256);
        assert!(section_occupancy(&full, 15, 1).is_err());
        let one = mask_from(64, 64, |r, c| r == 5 && c == 9);
        let occ = section_occupancy(&one, 16, 1).unwrap();
        assert_eq!(occ.occupied_count(), 1);
        assert!(occ.occupied[16 + 2]);
    }

    #[test]
    fn hypergeom_known_values() {
        let p = hypergeom_pmf(10, 4, 5, 2).unwrap();
        assert!((p - 120.0 / 252.0).abs() < 1e-15);
        let t = hypergeom_tail(10, 4, 5, 2).unwrap();
        assert!((t - 186.0 / 252.0).abs() < 1e-15);
        assert_eq!(hypergeom_pmf(7, 7, 7, 7).unwrap(), 1.0);
        assert_eq!(hypergeom_tail(10, 4, 5, 0).unwrap(), 1.0);
        assert_eq!(hypergeom_pmf(10, 4, 5, 5).unwrap(), 0.0);
        assert!(hypergeom_pmf(10, 11, 5, 1).is_err());
        let extreme = hypergeom_tail(256, 40, 40, 40).unwrap();
        assert!(extreme > 0.0 && extreme < 1e-30);
    }

    #[test]
    fn pmf_sums_to_one() {
        for &(nn, kk, n) in &[(256u64, 40u64, 60u64), (300, 150, 150), (12, 0, 5), (50, 50, 3), (1, 1, 0)] {
            let s: f64 = (0..=n).map(|k| hypergeom_pmf(nn, kk, n, k).unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12, "{nn} {kk} {n}: {s}");
        }
    }

    #[test]
    fn compare_cases() {
        let a = mask_from(64, 64, |r, c| r < 20 && c < 30);
        let same = compare(&a, &a, 16, 1).unwrap();
        assert_eq!(same.overlap, same.experiment_occupied);
        assert_eq!(same.overlap, same.prediction_occupied);
        let (nn, kk) = (same.sections, same.experiment_occupied);
        assert!((same.p_value - hypergeom_pmf(nn, kk, kk, kk).unwrap()).abs() <= 1e-12 * same.p_value);
        let b = mask_from(64, 64, |r, c| r >= 40 && c >= 40);
        let disjoint = compare(&a, &b, 16, 1).unwrap();
        assert_eq!(disjoint.overlap, 0);
        assert_eq!(disjoint.p_value, 1.0);
        let (red, green, blue) = disjoint.composite_counts();
        assert_eq!(blue + green, a.count());
        assert_eq!(red + green, b.count());
        let ba = compare(&b, &a, 16, 1).unwrap();
        assert_eq!(ba.p_value, disjoint.p_value);
        assert!(compare(&a, &BitMask::empty(32, 32), 16, 1).is_err());
    }

    #[test]
    fn pixel_level_cases() {
        let a = mask_from(64, 64, |r, c| (r * 7 + c * 3) % 11 == 0);
        let b = mask_from(64, 64, |r, c| (r * 7 + c * 3) % 11 == 5);
        assert_eq!(pixel_level_p(&a, &b).unwrap().p_value, 1.0);
        let same = pixel_level_p(&a, &a).unwrap();
        assert!(same.p_value < 1e-10 && same.p_value > 0.0);
        assert!(same.p_binomial < 1e-10);
    }

    #[test]
    fn binomial_tail_matches_direct_sum() {
        let (n, p) = (20u64, 0.3f64);
        let pmf = |j: u64| {
            let mut c = 1.0;
            for i in 0..j {
                c *= (n - i) as f64 / (i + 1) as f64;
            }
            c * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32)
        };
        for k in 0..=n {
            let direct: f64 = (k..=n).map(pmf).sum();
            assert!((binomial_log_tail(n, p, k).exp() - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn shuffle_keeps_section_count() {
        let a = mask_from(64, 64, |r, c| r < 12 && c % 9 < 3);
        let s = shuffle_sections(&a, 16, 4).unwrap();
        assert_eq!(s.count(), a.count());
        assert_eq!(
            section_occupancy(&s, 16, 1).unwrap().occupied_count(),
            section_occupancy(&a, 16, 1).unwrap().occupied_count()
        );
        assert_ne!(s, a);
    }

    #[test]
    fn stars_follow_thresholds() {
        assert_eq!(stars(0.0005), "***");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.05), "");
    }
}
