//! W-Net generator (two cascaded U-Nets with mirrored skips) and the
//! convolutional discriminator.
//!
//! Generator layout for resolution `R = 2^m`:
//!
//! ```text
//! embed (stride 1) → U-Net #1 (m down, m up) → U-Net #2 (m down, m up) → projection (stride 1, sigmoid)
//! ```
//!
//! giving `4m + 2` convolution layers (34 at R = 256). U-Net #2 takes
//! U-Net #1's full-resolution feature map as its only input. The
//! discriminator is four 4×4 convolutions with strides (2, 2, 2, 1), a global
//! average, an affine map and a sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, GridError, Padding, Tape, Var};
use crate::oracle::{Day, FluorescenceImage, Provenance};
use crate::patterns::{FrameConfig, TopographyRaster};
use crate::rng::{stream_rng, Stream};

pub const KERNEL: usize = 4;
pub const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum WnetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("resolution mismatch: model expects {expected}, input has {found}")]
    Resolution { expected: usize, found: usize },
    #[error("{op} needs a {expected:?} model")]
    Role { op: &'static str, expected: Role },
    #[error("invalid condition input: {0}")]
    Input(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub disc_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            base_channels: 16,
            channel_cap: 256,
            disc_layers: 4,
        }
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            ..Self::default()
        }
    }

    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    /// Number of stride-2 halvings from R down to 1×1.
    pub fn depth(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    pub fn generator_layer_count(&self) -> usize {
        4 * self.depth() + 2
    }

    pub fn validate(&self) -> Result<(), WnetError> {
        let r = self.resolution;
        if !r.is_power_of_two() {
            return Err(WnetError::Config(format!("resolution {r} is not a power of two")));
        }
        if r < 8 {
            return Err(WnetError::Config(format!("resolution {r} below the minimum of 8")));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(WnetError::Config(format!(
                "channels: base {} must be positive and not exceed cap {}",
                self.base_channels, self.channel_cap
            )));
        }
        if self.disc_layers < 2 || r >> (self.disc_layers - 1) == 0 {
            return Err(WnetError::Config(format!(
                "{} discriminator layers do not fit resolution {r}",
                self.disc_layers
            )));
        }
        Ok(())
    }

    /// Encoder width at halving level `i` (level 0 is full resolution).
    fn width(&self, level: usize) -> usize {
        (self.base_channels << level.min(30)).min(self.channel_cap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    /// Global average pool followed by an affine map to one logit.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Conv: O×C×k×k; ConvTranspose: C×O×k×k; Head: 1×C×1×1.
    pub weight: Grid,
    pub bias: Grid,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
    /// Pixel-wise channel normalization between the convolution and the
    /// activation.
    pub norm: bool,
    /// Index of the earlier layer whose output is concatenated onto this
    /// layer's input.
    pub skip: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: usize,
    pub out_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub role: Role,
    pub config: NetConfig,
    pub layers: Vec<Layer>,
}

/// He-normal scale: N(0, 2 / fan_in).
pub fn init_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

struct Builder<'r, R: Rng> {
    rng: &'r mut R,
    norm: bool,
    layers: Vec<Layer>,
}

impl<R: Rng> Builder<'_, R> {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: String,
        kind: LayerKind,
        (in_channels, out_channels): (usize, usize),
        (in_size, out_size): (usize, usize),
        stride: usize,
        activation: Activation,
        skip: Option<usize>,
    ) -> usize {
        let (shape, padding) = match kind {
            LayerKind::Conv if stride == 1 => ([out_channels, in_channels, KERNEL, KERNEL], Padding::same(KERNEL)),
            LayerKind::Conv => ([out_channels, in_channels, KERNEL, KERNEL], Padding::symmetric(1)),
            LayerKind::ConvTranspose => ([in_channels, out_channels, KERNEL, KERNEL], Padding::symmetric(1)),
            LayerKind::Head => ([out_channels, in_channels, 1, 1], Padding::symmetric(0)),
        };
        if let Some(s) = skip {
            let src = &self.layers[s];
            assert_eq!(src.out_size, in_size, "skip from {} into {name} changes spatial size", src.name);
        }
        // Fan-in per output value; a stride-2 transposed 4×4 kernel touches
        // each output with a quarter of its taps.
        let fan_in = match kind {
            LayerKind::ConvTranspose => in_channels * (KERNEL / stride).pow(2),
            _ => shape[1] * shape[2] * shape[3],
        };
        self.layers.push(Layer {
            name,
            kind,
            weight: Grid::randn(&shape, init_std(fan_in), self.rng),
            bias: Grid::zeros(&[out_channels]),
            stride,
            padding,
            activation,
            norm: self.norm && activation == Activation::Relu,
            skip,
            in_channels,
            out_channels,
            in_size,
            out_size,
        });
        self.layers.len() - 1
    }

    /// Appends one U-Net taking `base` channels at full resolution.
    fn unet(&mut self, cfg: &NetConfig, tag: &str) {
        let m = cfg.depth();
        let r = cfg.resolution;
        let mut down = vec![usize::MAX; m + 1];
        for i in 1..=m {
            down[i] = self.push(
                format!("{tag}.down{i}"),
                LayerKind::Conv,
                (cfg.width(i - 1), cfg.width(i)),
                (r >> (i - 1), r >> i),
                2,
                Activation::Relu,
                None,
            );
        }
        for j in (1..=m).rev() {
            let (cin, skip) = if j == m {
                (cfg.width(m), None)
            } else {
                (2 * cfg.width(j), Some(down[j]))
            };
            self.push(
                format!("{tag}.up{j}"),
                LayerKind::ConvTranspose,
                (cin, cfg.width(j - 1)),
                (r >> j, r >> (j - 1)),
                2,
                Activation::Relu,
                skip,
            );
        }
    }
}

/// Builds the W-Net generator with He-normal kernels and zero biases drawn
/// from `seed`.
pub fn build_generator(cfg: &NetConfig, seed: u64) -> Result<Model, WnetError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::InitGenerator);
    let mut b = Builder {
        rng: &mut rng,
        norm: true,
        layers: Vec::new(),
    };
    let r = cfg.resolution;
    b.push("embed".into(), LayerKind::Conv, (3, cfg.base_channels), (r, r), 1, Activation::Relu, None);
    b.unet(cfg, "unet1");
    b.unet(cfg, "unet2");
    b.push("project".into(), LayerKind::Conv, (cfg.base_channels, 1), (r, r), 1, Activation::Sigmoid, None);
    let layers = b.layers;
    assert_eq!(layers.len(), cfg.generator_layer_count());
    Ok(Model {
        role: Role::Generator,
        config: *cfg,
        layers,
    })
}

pub fn build_discriminator(cfg: &NetConfig, seed: u64) -> Result<Model, WnetError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::InitDiscriminator);
    let mut b = Builder {
        rng: &mut rng,
        norm: false,
        layers: Vec::new(),
    };
    let mut size = cfg.resolution;
    let mut cin = 1;
    for i in 0..cfg.disc_layers {
        let stride = if i + 1 == cfg.disc_layers { 1 } else { 2 };
        let cout = cfg.width(i);
        b.push(
            format!("disc.conv{}", i + 1),
            LayerKind::Conv,
            (cin, cout),
            (size, size / stride),
            stride,
            Activation::Relu,
            None,
        );
        size /= stride;
        cin = cout;
    }
    b.push("disc.head".into(), LayerKind::Head, (cin, 1), (size, 1), 1, Activation::Sigmoid, None);
    Ok(Model {
        role: Role::Discriminator,
        config: *cfg,
        layers: b.layers,
    })
}

impl Model {
    /// Convolution layers (excludes the discriminator head).
    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind != LayerKind::Head).count()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in construction order: each layer's kernel then bias.
    pub fn params(&self) -> impl Iterator<Item = &Grid> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Grid> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    /// Records every parameter as a tape leaf; returns (kernel, bias) per layer.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), requires_grad),
                    tape.leaf(l.bias.clone(), requires_grad),
                )
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), WnetError> {
        let want_c = match self.role {
            Role::Generator => 3,
            Role::Discriminator => 1,
        };
        let r = self.config.resolution;
        match *shape {
            [c, h, w] if c == want_c && h == r && w == r => Ok(()),
            [_, h, _] if h != r => Err(WnetError::Resolution { expected: r, found: h }),
            _ => Err(WnetError::Input(format!("expected {want_c}x{r}x{r}, got {shape:?}"))),
        }
    }

    /// Differentiable forward pass on `tape` using parameters from
    /// [`Model::register`].
    pub fn forward_tape(&self, tape: &mut Tape, input: Var, params: &[(Var, Var)]) -> Result<Var, WnetError> {
        let outs = self.forward_all(tape, input, params)?;
        Ok(*outs.last().expect("model has layers"))
    }

    fn forward_all(&self, tape: &mut Tape, input: Var, params: &[(Var, Var)]) -> Result<Vec<Var>, WnetError> {
        self.check_input(tape.value(input).shape())?;
        let mut acts: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (layer, &(w, b)) in self.layers.iter().zip(params) {
            let inp = match layer.skip {
                Some(s) => tape.concat(x, acts[s])?,
                None => x,
            };
            let pre = match layer.kind {
                LayerKind::Conv => tape.conv2d(inp, w, b, layer.stride, layer.padding)?,
                LayerKind::ConvTranspose => tape.conv2d_transpose(inp, w, b, layer.stride, layer.padding)?,
                LayerKind::Head => {
                    let pooled = tape.global_avg_pool(inp)?;
                    tape.conv2d(pooled, w, b, 1, layer.padding)?
                }
            };
            let pre = if layer.norm { tape.pixel_norm(pre, PIXEL_NORM_EPS)? } else { pre };
            x = match layer.activation {
                Activation::Relu => tape.relu(pre),
                Activation::Sigmoid => tape.sigmoid(pre),
            };
            acts.push(x);
        }
        Ok(acts)
    }

    /// Every layer's post-activation output for `input`, in layer order.
    pub fn activations(&self, input: &Grid) -> Result<Vec<Grid>, WnetError> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = tape.leaf(input.clone(), false);
        let outs = self.forward_all(&mut tape, x, &params)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Inference forward pass.
    pub fn forward(&self, input: &Grid) -> Result<Grid, WnetError> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = tape.leaf(input.clone(), false);
        let out = self.forward_tape(&mut tape, x, &params)?;
        Ok(tape.value(out).clone())
    }

    /// Spatial size of every layer's output, for shape contracts.
    pub fn output_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_size).collect()
    }
}

/// The three-plane network input: topography, time, density noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInput {
    pub planes: Grid,
    pub frame: FrameConfig,
    pub day: Day,
    pub density: f64,
}

/// Builds plane A from the raster, plane B as the constant day/30, and plane
/// C as uniform noise with mean `density`: U(0, 2ρ) for ρ ≤ 0.5 and
/// U(2ρ − 1, 1) above.
pub fn assemble_input(raster: &TopographyRaster, day: Day, density: f64, seed: u64) -> Result<ConditionInput, WnetError> {
    if !(0.0..=1.0).contains(&density) {
        return Err(WnetError::Input(format!("density {density} outside [0, 1]")));
    }
    let r = raster.resolution();
    let n = r * r;
    let mut rng = stream_rng(seed, Stream::PlaneC);
    let (lo, hi) = if density <= 0.5 {
        (0.0, 2.0 * density)
    } else {
        (2.0 * density - 1.0, 1.0)
    };
    let mut data = Vec::with_capacity(3 * n);
    data.extend_from_slice(raster.values.data());
    data.extend(std::iter::repeat_n(day.time_value(), n));
    data.extend((0..n).map(|_| (lo + (hi - lo) * rng.random::<f64>()).clamp(0.0, 1.0)));
    Ok(ConditionInput {
        planes: Grid::from_vec(&[3, r, r], data)?,
        frame: raster.frame,
        day,
        density,
    })
}

/// Predicted fluorescence image for `input`.
pub fn generate(gen: &Model, input: &ConditionInput) -> Result<FluorescenceImage, WnetError> {
    if gen.role != Role::Generator {
        return Err(WnetError::Role {
            op: "generate",
            expected: Role::Generator,
        });
    }
    let (_, h, _) = input.planes.chw()?;
    if h != gen.config.resolution {
        return Err(WnetError::Resolution {
            expected: gen.config.resolution,
            found: h,
        });
    }
    let values = gen.forward(&input.planes)?;
    Ok(FluorescenceImage {
        values,
        frame: input.frame,
        provenance: Provenance::Predicted,
    })
}

/// Realism score in (0, 1) for a 1×R×R image.
pub fn discriminate(disc: &Model, image: &Grid) -> Result<f64, WnetError> {
    if disc.role != Role::Discriminator {
        return Err(WnetError::Role {
            op: "discriminate",
            expected: Role::Discriminator,
        });
    }
    Ok(disc.forward(image)?.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{rasterize, TopographySpec};

    fn tiny() -> NetConfig {
        NetConfig {
            resolution: 16,
            base_channels: 2,
            channel_cap: 8,
            disc_layers: 4,
        }
    }

    #[test]
    fn layer_count_formula() {
        for r in [8usize, 16, 32, 64, 128, 256] {
            let cfg = NetConfig {
                resolution: r,
                base_channels: 1,
                channel_cap: 4,
                disc_layers: 4,
            };
            let g = build_generator(&cfg, 0).unwrap();
            assert_eq!(g.conv_layer_count(), 4 * cfg.depth() + 2);
        }
        assert_eq!(NetConfig::default().generator_layer_count(), 34);
        assert_eq!(NetConfig::desk().generator_layer_count(), 26);
    }

    #[test]
    fn bottlenecks_reach_one_pixel() {
        let g = build_generator(&NetConfig::with_resolution(256), 1).unwrap();
        let ones: Vec<&Layer> = g.layers.iter().filter(|l| l.out_size == 1).collect();
        assert_eq!(ones.len(), 2);
        assert!(ones.iter().all(|l| l.name.ends_with("down8")));
    }

    #[test]
    fn discriminator_final_map() {
        for (r, fin) in [(256usize, 32usize), (64, 8)] {
            let d = build_discriminator(&NetConfig::with_resolution(r), 0).unwrap();
            let convs: Vec<&Layer> = d.layers.iter().filter(|l| l.kind == LayerKind::Conv).collect();
            assert_eq!(convs.len(), 4);
            assert_eq!(convs[3].out_size, fin);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let cfg = NetConfig::with_resolution(48);
        assert!(matches!(build_generator(&cfg, 0), Err(WnetError::Config(_))));
        assert!(build_discriminator(&cfg, 0).is_err());
    }

    #[test]
    fn forward_ranges_and_shapes() {
        let cfg = tiny();
        let g = build_generator(&cfg, 3).unwrap();
        let d = build_discriminator(&cfg, 3).unwrap();
        let out = g.forward(&Grid::zeros(&[3, 16, 16])).unwrap();
        assert_eq!(out.shape(), &[1, 16, 16]);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let score = discriminate(&d, &out).unwrap();
        assert!(score > 0.0 && score < 1.0);
    }

    #[test]
    fn skips_match_spatial_size() {
        let g = build_generator(&tiny(), 0).unwrap();
        for l in &g.layers {
            if let Some(s) = l.skip {
                assert_eq!(g.layers[s].out_size, l.in_size);
                assert_eq!(g.layers[s].out_channels * 2, l.in_channels);
            }
        }
    }

    #[test]
    fn input_planes() {
        let frame = FrameConfig::desk();
        let raster = rasterize(&TopographySpec::parallel_lines(10.0, 20.0, 0.0), &frame).unwrap();
        let a = assemble_input(&raster, Day::D30, 0.3, 11).unwrap();
        let n = 64 * 64;
        assert!(a.planes.data()[n..2 * n].iter().all(|v| *v == 1.0));
        assert_eq!(&a.planes.data()[..n], raster.values.data());
        let mean_c = a.planes.data()[2 * n..].iter().sum::<f64>() / n as f64;
        assert!((0.28..=0.32).contains(&mean_c), "{mean_c}");
        let z = assemble_input(&raster, Day::D0, 0.8, 11).unwrap();
        assert!(z.planes.data()[n..2 * n].iter().all(|v| *v == 0.0));
        assert!(z.planes.data()[2 * n..].iter().all(|v| (0.6..=1.0).contains(v)));
        assert!(assemble_input(&raster, Day::D1, 1.2, 0).is_err());
        assert_eq!(assemble_input(&raster, Day::D1, 0.3, 5).unwrap(), assemble_input(&raster, Day::D1, 0.3, 5).unwrap());
    }

    #[test]
    fn generate_checks_resolution_and_role() {
        let g = build_generator(&tiny(), 0).unwrap();
        let raster = rasterize(&TopographySpec::blank(), &FrameConfig::desk()).unwrap();
        let input = assemble_input(&raster, Day::D1, 0.5, 0).unwrap();
        assert!(matches!(generate(&g, &input), Err(WnetError::Resolution { .. })));
        let d = build_discriminator(&tiny(), 0).unwrap();
        assert!(matches!(generate(&d, &input), Err(WnetError::Role { .. })));
    }

    #[test]
    fn generate_is_deterministic() {
        let cfg = tiny();
        let frame = FrameConfig::with_scale(16, 500.0 / 256.0);
        let raster = rasterize(&TopographySpec::parallel_lines(4.0, 4.0, 0.0), &frame).unwrap();
        let input = assemble_input(&raster, Day::D8, 0.4, 2).unwrap();
        let a = generate(&build_generator(&cfg, 9).unwrap(), &input).unwrap();
        let b = generate(&build_generator(&cfg, 9).unwrap(), &input).unwrap();
        let bits = |g: &Grid| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.values), bits(&b.values));
    }
}
