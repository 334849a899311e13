//! Subcommand implementations. Each one validates the whole configuration
//! before touching the filesystem and writes every output atomically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args};
use topocell::io;
use topocell::oracle::{self, Day, DatasetManifest, FluorescenceImage, Provenance, MANIFEST_FILE};
use topocell::par;
use topocell::patterns::{self, FrameConfig, RenderMode, TopographyRaster, TopographySpec};
use topocell::stats::{self, ReportRow};
use topocell::sweep::{self, ImageSource, ModelSource, OracleSource};
use topocell::trainer::{self, Sample};
use topocell::wnet;

use crate::config::{RunConfig, ECHO_FILE};
use crate::{selftest as checks, CliError};

/// Pattern selection shared by `pattern` and `predict`.
#[derive(Args, Debug)]
#[command(group(ArgGroup::new("shape").args(["spec", "lines", "crossed", "rings", "discs", "text", "border", "blank"])))]
pub struct ShapeArgs {
    /// JSON file holding one topography spec.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Parallel lines.
    #[arg(long)]
    lines: bool,
    /// Two perpendicular line families.
    #[arg(long)]
    crossed: bool,
    /// Concentric rings around the frame center.
    #[arg(long)]
    rings: bool,
    /// Hexagonal array of filled discs; `--width-um` is the diameter.
    #[arg(long)]
    discs: bool,
    /// Block-letter text.
    #[arg(long, value_name = "TEXT")]
    text: Option<String>,
    /// Square outline.
    #[arg(long)]
    border: bool,
    /// Unmachined glass.
    #[arg(long)]
    blank: bool,
    /// Stroke width.
    #[arg(long, allow_negative_numbers = true, default_value_t = 10.0)]
    width_um: f64,
    /// Edge-to-edge gap between neighbouring strokes.
    #[arg(long, allow_negative_numbers = true, default_value_t = 20.0)]
    sep_um: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
    angle_deg: f64,
}

impl ShapeArgs {
    fn chosen(&self) -> bool {
        self.spec.is_some() || self.lines || self.crossed || self.rings || self.discs || self.text.is_some() || self.border || self.blank
    }

    fn to_spec(&self, frame: &FrameConfig) -> Result<TopographySpec> {
        let (w, s, a) = (self.width_um, self.sep_um, self.angle_deg);
        let spec = if let Some(path) = &self.spec {
            let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str(text.trim())
                .map_err(|e| CliError::Config(format!("malformed spec {}: {e}", path.display())))?
        } else if self.lines {
            TopographySpec::parallel_lines(w, s, a)
        } else if self.crossed {
            TopographySpec::crossed_lines(w, s, a)
        } else if self.rings {
            TopographySpec::concentric_circles(w, s)
        } else if self.discs {
            TopographySpec::filled_circles(w, s)
        } else if let Some(t) = &self.text {
            TopographySpec::glyphs(w, t).with_angle(a)
        } else if self.border {
            TopographySpec::border_box(w, None)
        } else if self.blank {
            TopographySpec::blank()
        } else {
            return Err(CliError::Usage(
                "choose a pattern: --spec, --lines, --crossed, --rings, --discs, --text, --border or --blank".into(),
            )
            .into());
        };
        spec.validate(frame).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args, Debug)]
pub struct PatternArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Fractional edge coverage instead of binary pixels.
    #[arg(long)]
    antialias: bool,
    #[arg(long, short, default_value = "pattern.png")]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Output directory for images, cell tables and the manifest.
    #[arg(long, short)]
    out: PathBuf,
    /// Number of records (overrides `dataset.count`).
    #[arg(long)]
    count: Option<usize>,
    /// JSONL file of specs to sample from instead of the built-in mix.
    #[arg(long, value_name = "JSONL")]
    specs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest, or the directory holding it.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the checkpoint and loss trace.
    #[arg(long, short)]
    out: PathBuf,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Progress lines per run on stderr (0 silences them).
    #[arg(long, default_value_t = 100)]
    progress_lines: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Grayscale topography PNG to use instead of a spec.
    #[arg(long, value_name = "PNG")]
    topography: Option<PathBuf>,
    /// Culture day: 0, 1, 8 or 30.
    #[arg(long)]
    day: Day,
    /// Target confluency in [0, 1].
    #[arg(long, allow_negative_numbers = true)]
    density: f64,
    #[arg(long, short, default_value = "prediction.png")]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Predicted image (PNG).
    prediction: PathBuf,
    /// Experimental image (PNG).
    experiment: PathBuf,
    /// Output directory for the composite and the report.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
    /// Image identifier used in the report.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").args(["checkpoint", "oracle_direct"]).required(true)))]
pub struct SweepArgs {
    /// Trained checkpoint supplying the predicted images.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score oracle images directly, bypassing the network.
    #[arg(long)]
    oracle_direct: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {}

/// Validates the configuration and applies the threading mode.
fn prepare(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    par::set_sequential(cfg.deterministic);
    Ok(())
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    io::write_text(&dir.join(ECHO_FILE), &cfg.echo()).context("writing effective config")?;
    Ok(())
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn pattern(cfg: RunConfig, args: PatternArgs) -> Result<()> {
    prepare(&cfg)?;
    let frame = cfg.frame();
    let spec = args.shape.to_spec(&frame)?;
    let mode = if args.antialias { RenderMode::AntiAliased } else { RenderMode::Binary };
    let raster = patterns::rasterize_with(&spec, &frame, mode)?;
    io::write_gray_png(&args.out, &raster.values)?;
    echo_config(&cfg, &parent_dir(&args.out))?;
    println!(
        "wrote {} ({r}x{r}, machined fraction {:.4})",
        args.out.display(),
        patterns::machined_fraction(&raster),
        r = frame.resolution
    );
    Ok(())
}

pub fn oracle(mut cfg: RunConfig, args: OracleArgs) -> Result<()> {
    if let Some(n) = args.count {
        cfg.dataset.count = n;
    }
    prepare(&cfg)?;
    let specs = match &args.specs {
        Some(path) => {
            let specs: Vec<TopographySpec> =
                io::read_jsonl(path).map_err(|e| CliError::Config(format!("spec list {}: {e}", path.display())))?;
            if specs.is_empty() {
                bail!(CliError::Config(format!("spec list {} is empty", path.display())));
            }
            specs
        }
        None => oracle::default_spec_mix(),
    };
    let frame = cfg.frame();
    for s in &specs {
        s.validate(&frame).map_err(|e| CliError::Config(e.to_string()))?;
    }
    ensure_dir(&args.out)?;
    // Records are built in a scratch directory and moved in only once all
    // of them succeeded.
    let staging = args.out.join(".partial");
    let _ = fs::remove_dir_all(&staging);
    ensure_dir(&staging)?;
    let built = oracle::build_dataset(&specs, &cfg.oracle, cfg.dataset.count, &frame, cfg.seed, &staging);
    let manifest = match built {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e.into());
        }
    };
    for entry in fs::read_dir(&staging)? {
        let entry = entry?;
        fs::rename(entry.path(), args.out.join(entry.file_name()))?;
    }
    fs::remove_dir(&staging)?;
    echo_config(&cfg, &args.out)?;
    println!("wrote {} records to {}", manifest.len(), args.out.display());
    Ok(())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    prepare(&cfg)?;
    let path = manifest_path(&args.manifest);
    let manifest = DatasetManifest::load(&path).with_context(|| format!("loading manifest {}", path.display()))?;
    let samples: Vec<Sample> = trainer::load_samples(&manifest)?;
    ensure_dir(&args.out)?;
    let ck_path = args.out.join("model.wnt");
    let mut tc = cfg.train();
    tc.checkpoint_path = Some(ck_path.clone());
    let total = tc.epochs * samples.len();
    let every = if args.progress_lines == 0 { usize::MAX } else { (total / args.progress_lines).max(1) };
    let stderr = std::io::stderr();
    let (ck, trace) = trainer::train_samples(&samples, &cfg.net(), &tc, |rec, total| {
        if (rec.iter + 1) % every == 0 || rec.iter + 1 == total {
            trainer::write_progress(&mut stderr.lock(), rec, total);
        }
    })?;
    trace.save_csv(&args.out.join("loss.csv"))?;
    echo_config(&cfg, &args.out)?;
    let s = &ck.summary;
    println!(
        "trained {} iterations; mean l_rec first epoch {:.5}, last epoch {:.5}; checkpoint {}",
        s.iterations,
        s.first_epoch_l_rec,
        s.last_epoch_l_rec,
        ck_path.display()
    );
    Ok(())
}

fn load_generator(path: &Path) -> Result<trainer::Checkpoint> {
    trainer::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn predict(cfg: RunConfig, args: PredictArgs) -> Result<()> {
    prepare(&cfg)?;
    oracle::check_density(args.density).map_err(|e| CliError::Usage(e.to_string()))?;
    let ck = load_generator(&args.checkpoint)?;
    let frame = FrameConfig::with_scale(ck.generator.config.resolution, cfg.frame.scale_um);
    let raster = match (&args.topography, args.shape.chosen()) {
        (Some(_), true) => bail!(CliError::Usage("give either --topography or a pattern, not both".into())),
        (Some(png), false) => {
            let values = io::read_gray_png(png)?;
            TopographyRaster::from_grid(frame, values).map_err(|e| CliError::Usage(format!("{}: {e}", png.display())))?
        }
        (None, _) => patterns::rasterize(&args.shape.to_spec(&frame)?, &frame)?,
    };
    let input = wnet::assemble_input(&raster, args.day, args.density, cfg.seed)?;
    let image = wnet::generate(&ck.generator, &input)?;
    io::write_gray_png(&args.out, &image.values)?;
    echo_config(&cfg, &parent_dir(&args.out))?;
    println!("wrote {} (mean intensity {:.4})", args.out.display(), image.values.mean());
    Ok(())
}

fn read_image(path: &Path, scale_um: f64, provenance: Provenance) -> Result<FluorescenceImage> {
    let values = io::read_gray_png(path)?;
    let (_, _, w) = values.chw()?;
    Ok(FluorescenceImage {
        values,
        frame: FrameConfig::with_scale(w, scale_um),
        provenance,
    })
}

pub fn compare(cfg: RunConfig, args: CompareArgs) -> Result<()> {
    cfg.validate()?;
    par::set_sequential(cfg.deterministic);
    let pred = read_image(&args.prediction, cfg.frame.scale_um, Provenance::Predicted)?;
    let exp = read_image(&args.experiment, cfg.frame.scale_um, Provenance::Experimental)?;
    if pred.values.shape() != exp.values.shape() {
        let dims = |s: &[usize]| format!("{}x{}", s[2], s[1]);
        bail!(CliError::Usage(format!(
            "image sizes differ: {} is {}, {} is {}",
            args.prediction.display(),
            dims(pred.values.shape()),
            args.experiment.display(),
            dims(exp.values.shape())
        )));
    }
    let (_, h, w) = pred.values.chw()?;
    let g = cfg.stats.sections_per_side;
    if h % g != 0 || w % g != 0 {
        bail!(CliError::Config(format!("stats.sections_per_side {g} does not divide {w}x{h}")));
    }
    let pm = stats::mask_of(&pred, &cfg.stats.mask)?;
    let em = stats::mask_of(&exp, &cfg.stats.mask)?;
    let section = stats::compare(&pm, &em, g, cfg.stats.min_pixels)?;
    let pixel = stats::pixel_level_p(&pm, &em)?;
    let id = args.id.unwrap_or_else(|| {
        args.prediction
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
    });
    let row = ReportRow::new(&id, &section, &pixel);
    let text = row.text(pixel.p_binomial);
    ensure_dir(&args.out)?;
    io::write_rgb_png(&args.out.join("composite.png"), &section.composite, section.width, section.height)?;
    io::write_csv(&args.out.join("report.csv"), std::slice::from_ref(&row))?;
    io::write_text(&args.out.join("report.txt"), &format!("{text}\n"))?;
    echo_config(&cfg, &args.out)?;
    println!("{text}");
    Ok(())
}

pub fn sweep(cfg: RunConfig, args: SweepArgs) -> Result<()> {
    prepare(&cfg)?;
    let sc = cfg.sweep();
    let ck;
    let model_source;
    let oracle_source;
    let (source, frame): (&dyn ImageSource, FrameConfig) = match &args.checkpoint {
        Some(path) => {
            ck = load_generator(path)?;
            model_source = ModelSource { generator: &ck.generator };
            (&model_source, FrameConfig::with_scale(ck.generator.config.resolution, cfg.frame.scale_um))
        }
        None => {
            oracle_source = OracleSource { rules: cfg.oracle.clone() };
            (&oracle_source, cfg.frame())
        }
    };
    let records = sweep::run_sweep(source, &frame, &sc)?;
    let summaries: Vec<_> = sc.widths_um.iter().map(|&w| sweep::summarize_width(&records, w)).collect();
    let fit = sweep::fit_line(&sweep::fit_points(&summaries));
    ensure_dir(&args.out)?;
    sweep::save_sweep_csv(&args.out.join("sweep.csv"), &records)?;
    let report = sweep::fit_report(&summaries, fit.as_ref().ok());
    io::write_text(&args.out.join("fit.txt"), &report)?;
    match &fit {
        Ok(f) => {
            sweep::save_fit_csv(&args.out.join("fit.csv"), f)?;
            sweep::save_plot(&args.out.join("plot.png"), f)?;
        }
        Err(e) => eprintln!("warning: no trend fitted: {e}"),
    }
    echo_config(&cfg, &args.out)?;
    print!("{report}");
    Ok(())
}

pub fn selftest(cfg: RunConfig, _args: SelftestArgs) -> Result<()> {
    prepare(&cfg)?;
    let results = checks::run_all(cfg.seed);
    let mut out = std::io::stdout().lock();
    for r in &results {
        writeln!(out, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} self-checks failed", results.len());
    }
    Ok(())
}
