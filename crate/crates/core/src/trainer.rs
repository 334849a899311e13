//! Conditional-adversarial training: scheduled loss weighting, the `WNT1`
//! checkpoint format and per-iteration loss telemetry.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{optim_step, Grid, GridError, OptimState, Tape, Var, DEFAULT_LEARNING_RATE};
use crate::io::{self, IoError};
use crate::oracle::{DatasetManifest, Day};
use crate::patterns::{FrameConfig, TopographyRaster};
use crate::rng::{mix, stream_rng, Stream};
use crate::stats;
use crate::wnet::{self, Model, NetConfig, WnetError};

/// Probabilities are clamped to [EPS, 1 − EPS] before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("checkpoint magic mismatch: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("checkpoint truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Wnet(#[from] WnetError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_rec: f64,
    /// Adversarial weight reached at the end of the ramp.
    pub lambda_adv: f64,
    /// Fraction of iterations trained on reconstruction only.
    pub warmup_fraction: f64,
    /// Fraction of iterations at which the adversarial weight reaches its maximum.
    pub ramp_end_fraction: f64,
    pub seed: u64,
    /// Side of the random crop window used when images are larger than the
    /// network resolution; the crop is then box-averaged down to it.
    pub crop_window: Option<usize>,
    /// Write a checkpoint every this many iterations (and at the end).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            learning_rate: DEFAULT_LEARNING_RATE,
            lambda_rec: 100.0,
            lambda_adv: 1.0,
            warmup_fraction: 0.1,
            ramp_end_fraction: 0.5,
            seed: 0,
            crop_window: None,
            checkpoint_every: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_adv >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        let (w, e) = (self.warmup_fraction, self.ramp_end_fraction);
        if !(0.0..=1.0).contains(&w) || !(0.0..=1.0).contains(&e) || e < w {
            return bad(format!("schedule fractions need 0 <= warmup {w} <= ramp end {e} <= 1"));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint cadence must be positive".into());
        }
        Ok(())
    }

    /// Adversarial weight at `iteration` of `total`: zero during warmup, then
    /// a linear ramp to `lambda_adv`, constant afterwards.
    pub fn lambda_adv_at(&self, iteration: usize, total: usize) -> f64 {
        let t = iteration as f64 / total.max(1) as f64;
        let (w, e) = (self.warmup_fraction, self.ramp_end_fraction);
        if t < w {
            0.0
        } else if t >= e {
            self.lambda_adv
        } else {
            self.lambda_adv * (t - w) / (e - w)
        }
    }
}

/// λ_rec · mean|pred − target| + λ_adv · (−ln disc_score).
pub fn loss_generator(pred: &Grid, target: &Grid, disc_score: f64, lambda_rec: f64, lambda_adv: f64) -> Result<f64, TrainError> {
    if pred.shape() != target.shape() {
        return Err(GridError::Shape {
            op: "loss_generator",
            expected: format!("{:?}", target.shape()),
            found: format!("{:?}", pred.shape()),
        }
        .into());
    }
    if !pred.is_finite() || !target.is_finite() || !disc_score.is_finite() {
        return Err(TrainError::NonFinite {
            iteration: 0,
            detail: "loss_generator input".into(),
        });
    }
    let l1 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
    Ok(lambda_rec * l1 - lambda_adv * disc_score.clamp(EPS, 1.0 - EPS).ln())
}

/// Binary cross-entropy with real = 1, fake = 0. The flag reports whether
/// either score had to be clamped.
pub fn loss_discriminator(score_real: f64, score_fake: f64) -> (f64, bool) {
    let r = score_real.clamp(EPS, 1.0 - EPS);
    let f = score_fake.clamp(EPS, 1.0 - EPS);
    let clamped = r != score_real || f != score_fake;
    (-r.ln() - (1.0 - f).ln(), clamped)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l_rec: f64,
    pub l_adv_gen: f64,
    pub l_disc: f64,
    pub lambda_adv: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn save_csv(&self, path: &Path) -> Result<(), IoError> {
        io::write_csv(path, &self.records)
    }

    pub fn load_csv(path: &Path) -> Result<Self, IoError> {
        Ok(Self {
            records: io::read_csv(path)?,
        })
    }

    /// Mean reconstruction loss over iterations `[start, end)`.
    pub fn mean_l_rec(&self, start: usize, end: usize) -> f64 {
        let slice = &self.records[start.min(self.records.len())..end.min(self.records.len())];
        slice.iter().map(|r| r.l_rec).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Compact loss summary stored in checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSummary {
    pub iterations: u64,
    pub first_epoch_l_rec: f64,
    pub last_epoch_l_rec: f64,
    pub last_l_disc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub generator: Model,
    pub discriminator: Model,
    pub gen_optim: OptimState,
    pub disc_optim: OptimState,
    pub iteration: u64,
    pub seed: u64,
    pub summary: LossSummary,
}

pub const MAGIC: [u8; 4] = *b"WNT1";
pub const FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    /// Fresh models and zeroed optimizer state.
    pub fn initial(net: &NetConfig, seed: u64, learning_rate: f64) -> Result<Self, TrainError> {
        let generator = wnet::build_generator(net, seed)?;
        let discriminator = wnet::build_discriminator(net, seed)?;
        let gen_optim = OptimState::new(generator.params(), learning_rate);
        let disc_optim = OptimState::new(discriminator.params(), learning_rate);
        Ok(Self {
            net: *net,
            generator,
            discriminator,
            gen_optim,
            disc_optim,
            iteration: 0,
            seed,
            summary: LossSummary::default(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.generator.parameter_count() + self.discriminator.parameter_count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(&MAGIC);
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.net.resolution, self.net.base_channels, self.net.channel_cap, self.net.disc_layers] {
            head.extend_from_slice(&(v as u32).to_le_bytes());
        }
        head.extend_from_slice(&(self.parameter_count() as u64).to_le_bytes());
        head.extend_from_slice(&self.iteration.to_le_bytes());
        head.extend_from_slice(&self.seed.to_le_bytes());
        head.extend_from_slice(&self.summary.iterations.to_le_bytes());
        for v in [self.summary.first_epoch_l_rec, self.summary.last_epoch_l_rec, self.summary.last_l_disc] {
            head.extend_from_slice(&v.to_le_bytes());
        }

        let mut body = Vec::with_capacity(8 * 3 * self.parameter_count() + 256);
        let put = |body: &mut Vec<u8>, g: &Grid| {
            for v in g.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.generator.params().chain(self.discriminator.params()) {
            put(&mut body, p);
        }
        for st in [&self.gen_optim, &self.disc_optim] {
            body.extend_from_slice(&st.step.to_le_bytes());
            for v in [st.lr, st.beta1, st.beta2, st.eps] {
                body.extend_from_slice(&v.to_le_bytes());
            }
            for g in st.first.iter().chain(&st.second) {
                put(&mut body, g);
            }
        }
        let sum = fnv64(&body);
        head.extend_from_slice(&body);
        head.extend_from_slice(&sum.to_le_bytes());
        head
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(TrainError::Magic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TrainError::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let net = NetConfig {
            resolution: r.u32()? as usize,
            base_channels: r.u32()? as usize,
            channel_cap: r.u32()? as usize,
            disc_layers: r.u32()? as usize,
        };
        net.validate()?;
        let count = r.u64()? as usize;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let summary = LossSummary {
            iterations: r.u64()?,
            first_epoch_l_rec: r.f64()?,
            last_epoch_l_rec: r.f64()?,
            last_l_disc: r.f64()?,
        };
        let body_start = r.pos;
        let mut ck = Self::initial(&net, 0, DEFAULT_LEARNING_RATE)?;
        if ck.parameter_count() != count {
            return Err(TrainError::Corrupt(format!(
                "header lists {count} parameters, config implies {}",
                ck.parameter_count()
            )));
        }
        for p in ck.generator.params_mut().into_iter().chain(ck.discriminator.params_mut()) {
            r.fill(p)?;
        }
        for st in [&mut ck.gen_optim, &mut ck.disc_optim] {
            st.step = r.u64()?;
            st.lr = r.f64()?;
            st.beta1 = r.f64()?;
            st.beta2 = r.f64()?;
            st.eps = r.f64()?;
            for g in st.first.iter_mut().chain(st.second.iter_mut()) {
                r.fill(g)?;
            }
        }
        let body_end = r.pos;
        let stored = r.u64()?;
        let computed = fnv64(&bytes[body_start..body_end]);
        if stored != computed {
            return Err(TrainError::Checksum { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        ck.iteration = iteration;
        ck.seed = seed;
        ck.summary = summary;
        Ok(ck)
    }
}

fn fnv64(bytes: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(TrainError::Truncated {
                offset: self.pos,
                needed: end - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn fill(&mut self, g: &mut Grid) -> Result<(), TrainError> {
        let raw = self.take(8 * g.len())?;
        for (v, b) in g.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("eight bytes"));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    Ok(io::write_bytes(path, &ck.to_bytes())?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// One training pair held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub topography: Grid,
    pub target: Grid,
    pub day: Day,
    pub density: f64,
    /// Record seed from the manifest.
    pub seed: u64,
}

fn boxed<E: std::error::Error + Send + Sync + 'static>(index: usize) -> impl FnOnce(E) -> TrainError {
    move |e| TrainError::Record {
        index,
        source: Box::new(e),
    }
}

/// Reads every record of `manifest` into memory.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>, TrainError> {
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let topography = io::read_gray_png(&manifest.resolve(&rec.topography)).map_err(boxed(i))?;
            let target = io::read_gray_png(&manifest.resolve(&rec.fluorescence)).map_err(boxed(i))?;
            if topography.shape() != target.shape() {
                return Err(TrainError::Record {
                    index: i,
                    source: format!(
                        "topography {:?} and fluorescence {:?} differ in size",
                        topography.shape(),
                        target.shape()
                    )
                    .into(),
                });
            }
            Ok(Sample {
                topography,
                target,
                day: rec.day,
                density: rec.density,
                seed: rec.seed,
            })
        })
        .collect()
}

/// Brings a sample to the network resolution: identity when sizes match,
/// otherwise a seeded random crop followed by area averaging.
fn fit_sample(s: &Sample, net: &NetConfig, cfg: &TrainConfig, seed: u64, index: usize) -> Result<(Grid, Grid), TrainError> {
    let (_, h, w) = s.topography.chw()?;
    let r = net.resolution;
    if h == r && w == r {
        return Ok((s.topography.clone(), s.target.clone()));
    }
    let window = cfg.crop_window.unwrap_or(2 * r);
    let topo = stats::crop_resize(&s.topography, window, r, seed).map_err(boxed(index))?;
    let target = stats::crop_resize(&s.target, window, r, seed).map_err(boxed(index))?;
    Ok((topo, target))
}

fn detail_err(iteration: usize) -> impl Fn(GridError) -> TrainError {
    move |e| match e {
        GridError::NonFiniteGradient(name) => TrainError::NonFinite {
            iteration,
            detail: format!("gradient of {name}"),
        },
        other => other.into(),
    }
}

/// −ln(clamp(p)) on the tape, with the clamp folded into the log floor.
fn neg_log(tape: &mut Tape, p: Var) -> Var {
    let l = tape.log(p, EPS);
    let m = tape.mean(l);
    tape.affine(m, -1.0, 0.0)
}

/// One iteration's losses.
pub struct StepLosses {
    pub l_rec: f64,
    pub l_adv_gen: f64,
    pub l_disc: f64,
}

/// One alternating update: discriminator on (real, detached fake), then the
/// generator on the weighted loss through the updated discriminator.
pub fn train_step(
    ck: &mut Checkpoint,
    input: &Grid,
    target: &Grid,
    lambda_rec: f64,
    lambda_adv: f64,
    iteration: usize,
) -> Result<StepLosses, TrainError> {
    let mut gtape = Tape::new();
    let gparams = ck.generator.register(&mut gtape, true);
    let x = gtape.leaf(input.clone(), false);
    let fake = ck.generator.forward_tape(&mut gtape, x, &gparams)?;

    // Discriminator step.
    let mut dtape = Tape::new();
    let dparams = ck.discriminator.register(&mut dtape, true);
    let real_in = dtape.leaf(target.clone(), false);
    let fake_in = dtape.leaf(gtape.value(fake).clone(), false);
    let s_real = ck.discriminator.forward_tape(&mut dtape, real_in, &dparams)?;
    let s_fake = ck.discriminator.forward_tape(&mut dtape, fake_in, &dparams)?;
    let l_real = neg_log(&mut dtape, s_real);
    let one_minus = dtape.affine(s_fake, -1.0, 1.0);
    let l_fake = neg_log(&mut dtape, one_minus);
    let l_disc_var = dtape.add(l_real, l_fake)?;
    let l_disc = dtape.value(l_disc_var).data()[0];
    if !l_disc.is_finite() {
        return Err(TrainError::NonFinite {
            iteration,
            detail: "discriminator loss".into(),
        });
    }
    let mut dgrads = dtape.backward(l_disc_var)?;
    let dg: Vec<Grid> = dparams.iter().flat_map(|&(w, b)| [dgrads.take(w), dgrads.take(b)]).collect();
    let dnames = ck.discriminator.param_names();
    optim_step(&mut ck.discriminator.params_mut(), &dg, &dnames, &mut ck.disc_optim).map_err(detail_err(iteration))?;

    // Generator step through the updated, frozen discriminator.
    let frozen = ck.discriminator.register(&mut gtape, false);
    let score = ck.discriminator.forward_tape(&mut gtape, fake, &frozen)?;
    let l_adv = neg_log(&mut gtape, score);
    let y = gtape.leaf(target.clone(), false);
    let diff = gtape.sub(fake, y)?;
    let abs = gtape.abs(diff);
    let l_rec = gtape.mean(abs);
    let rec_w = gtape.affine(l_rec, lambda_rec, 0.0);
    let adv_w = gtape.affine(l_adv, lambda_adv, 0.0);
    let total = gtape.add(rec_w, adv_w)?;
    let (l_rec_v, l_adv_v) = (gtape.value(l_rec).data()[0], gtape.value(l_adv).data()[0]);
    if !l_rec_v.is_finite() || !l_adv_v.is_finite() {
        return Err(TrainError::NonFinite {
            iteration,
            detail: "generator loss".into(),
        });
    }
    let mut ggrads = gtape.backward(total)?;
    let gg: Vec<Grid> = gparams.iter().flat_map(|&(w, b)| [ggrads.take(w), ggrads.take(b)]).collect();
    let gnames = ck.generator.param_names();
    optim_step(&mut ck.generator.params_mut(), &gg, &gnames, &mut ck.gen_optim).map_err(detail_err(iteration))?;
    Ok(StepLosses {
        l_rec: l_rec_v,
        l_adv_gen: l_adv_v,
        l_disc,
    })
}

/// Trains from scratch on `manifest`.
pub fn train(manifest: &DatasetManifest, net: &NetConfig, cfg: &TrainConfig) -> Result<(Checkpoint, LossTrace), TrainError> {
    let samples = load_samples(manifest)?;
    train_samples(&samples, net, cfg, |_, _| {})
}

/// Trains on in-memory samples; `progress` sees every loss record.
pub fn train_samples(
    samples: &[Sample],
    net: &NetConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord, usize),
) -> Result<(Checkpoint, LossTrace), TrainError> {
    cfg.validate()?;
    net.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("manifest has no records".into()));
    }
    let mut ck = Checkpoint::initial(net, cfg.seed, cfg.learning_rate)?;
    let n = samples.len();
    let total = cfg.epochs * n;
    let mut order_rng = stream_rng(cfg.seed, Stream::Training);
    let mut trace = LossTrace::default();
    let frame = FrameConfig::with_scale(net.resolution, 1.0);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        for (pos, &idx) in order.iter().enumerate() {
            let it = epoch * n + pos;
            let s = &samples[idx];
            let (topo, target) = fit_sample(s, net, cfg, mix(cfg.seed ^ 0xC0, it as u64), idx)?;
            let raster = TopographyRaster { frame, values: topo };
            let input = wnet::assemble_input(&raster, s.day, s.density, mix(cfg.seed, it as u64))?;
            let lambda_adv = cfg.lambda_adv_at(it, total);
            let losses = train_step(&mut ck, &input.planes, &target, cfg.lambda_rec, lambda_adv, it)?;
            let rec = LossRecord {
                iter: it,
                l_rec: losses.l_rec,
                l_adv_gen: losses.l_adv_gen,
                l_disc: losses.l_disc,
                lambda_adv,
            };
            progress(&rec, total);
            trace.records.push(rec);
            ck.iteration = it as u64 + 1;
            if let (Some(every), Some(path)) = (cfg.checkpoint_every, &cfg.checkpoint_path) {
                if (it + 1) % every == 0 && it + 1 < total {
                    ck.summary = summarize(&trace, n);
                    save_checkpoint(&ck, path)?;
                }
            }
        }
    }
    ck.summary = summarize(&trace, n);
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&ck, path)?;
    }
    Ok((ck, trace))
}

fn summarize(trace: &LossTrace, per_epoch: usize) -> LossSummary {
    let len = trace.records.len();
    let last_start = len.saturating_sub(per_epoch);
    LossSummary {
        iterations: len as u64,
        first_epoch_l_rec: trace.mean_l_rec(0, per_epoch),
        last_epoch_l_rec: trace.mean_l_rec(last_start, len),
        last_l_disc: trace.records.last().map_or(0.0, |r| r.l_disc),
    }
}

/// Writes a human-readable line per iteration, used by the command line.
pub fn write_progress<W: Write>(out: &mut W, rec: &LossRecord, total: usize) {
    let _ = writeln!(
        out,
        "iter {}/{} l_rec {:.5} l_adv_gen {:.4} l_disc {:.4} lambda_adv {:.3}",
        rec.iter + 1,
        total,
        rec.l_rec,
        rec.l_adv_gen,
        rec.l_disc,
        rec.lambda_adv
    );
}
