//! The seven networks: pose recognizer, appearance/scene/primitive encoders,
//! image/pose generators, and the mask estimator.
//!
//! Every network is a deterministic pure function of (parameters, input); all
//! stochasticity lives in the explicit noise tensors passed to the
//! objectives. Mean and log-variance heads are zero-initialized so the
//! initial posteriors sit at their priors.

mod layers;
mod store;

pub use store::{Binder, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::gaussian::{DiagonalGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::graph::{Graph, Scalar, Var};
use layers::{Conv2d, ConvTranspose2d, ResStack};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Variance of the pose recognizer's output Gaussian, fixed for stability.
pub const POSE_RECOGNIZER_VARIANCE: f64 = 0.01;
/// Variance of the image generator's output Gaussian, fixed for stability.
pub const IMAGE_GENERATOR_VARIANCE: f64 = 1.0;
/// Variance of the pose generator's output Gaussian, fixed for stability.
pub const POSE_GENERATOR_VARIANCE: f64 = 1.0;

/// Backbone choice for the pose recognizer. Paper-capacity backbones
/// (stacked hourglass, ResNet-50, HRNet) plug in behind the same
/// image-in / heatmap-Gaussian-out contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    SmallConv,
    HourglassLite,
}

/// Shared size/width configuration for all networks.
///
/// The heatmap grid is `image_size / 4` and the latent spatial grid is
/// `heatmap / 4`, so image height/width must be divisible by 16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Channel count of each latent (appearance, scene, primitive).
    pub latent_channels: usize,
    /// Stride-2 stages between the heatmap grid and the latent grid
    /// (latent spatial = heatmap / 2^stages).
    pub latent_down_stages: usize,
    /// Width of the first stage; deeper stages scale from it.
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub backbone: Backbone,
    /// When set, the recognizer emits a learned log-variance instead of the
    /// fixed `POSE_RECOGNIZER_VARIANCE`.
    pub learned_recognizer_variance: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::toy()
    }
}

impl NetConfig {
    /// Desk-scale default: the full curriculum runs in minutes on a CPU.
    pub fn toy() -> Self {
        NetConfig {
            image_height: 64,
            image_width: 64,
            latent_channels: 32,
            latent_down_stages: 2,
            base_channels: 16,
            residual_blocks: 2,
            backbone: Backbone::SmallConv,
            learned_recognizer_variance: false,
        }
    }

    /// Minimal configuration (< 2k parameters over all seven networks) for
    /// double-precision finite-difference checks of the objectives.
    pub fn tiny() -> Self {
        NetConfig {
            image_height: 16,
            image_width: 16,
            latent_channels: 1,
            latent_down_stages: 1,
            base_channels: 1,
            residual_blocks: 1,
            backbone: Backbone::SmallConv,
            learned_recognizer_variance: false,
        }
    }

    /// Published-scale geometry (256×256 images, 64×64 heatmaps, 256×8×8
    /// latents). Provided for parameter-count reporting and as an extension
    /// point; training at this scale needs accelerator hardware.
    pub fn paper() -> Self {
        NetConfig {
            image_height: 256,
            image_width: 256,
            latent_channels: 256,
            latent_down_stages: 3,
            base_channels: 64,
            residual_blocks: 4,
            backbone: Backbone::SmallConv,
            learned_recognizer_variance: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height % 4 != 0 || self.image_width % 4 != 0 {
            return Err(Error::config(
                "image dimensions must be divisible by 4 (heatmap = image/4)",
            ));
        }
        if self.image_height < 16 || self.image_width < 16 {
            return Err(Error::config("image dimensions must be at least 16"));
        }
        if self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.latent_down_stages == 0 {
            return Err(Error::config("latent_down_stages must be at least 1"));
        }
        let (hh, hw) = self.heatmap_size();
        let div = 1 << self.latent_down_stages;
        if hh % div != 0 || hw % div != 0 {
            return Err(Error::config(format!(
                "heatmap size {hh}x{hw} is not divisible by 2^latent_down_stages = {div}"
            )));
        }
        Ok(())
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    /// Reduced image size fed to the mask estimator and foreground/background
    /// encoders; matches the heatmap grid so channels concatenate directly.
    pub fn reduced_size(&self) -> (usize, usize) {
        self.heatmap_size()
    }

    pub fn latent_spatial(&self) -> (usize, usize) {
        let (h, w) = self.heatmap_size();
        let div = 1 << self.latent_down_stages;
        (h / div, w / div)
    }

    /// Channel width after `i` stride-2 stages.
    fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let (h, w) = self.latent_spatial();
        [self.latent_channels, h, w]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_height, self.image_width]
    }

    pub fn pose_shape(&self) -> [usize; 3] {
        let (h, w) = self.heatmap_size();
        [crate::heatmap::NUM_JOINTS, h, w]
    }
}

/// A Gaussian whose parameters live on the tape. The variance is either a
/// frozen constant (kept outside the parameter set) or a clamped
/// log-variance node.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars<F: Scalar> {
    pub mean: Var,
    pub variance: VarianceSpec<F>,
}

#[derive(Debug, Clone, Copy)]
pub enum VarianceSpec<F: Scalar> {
    Frozen(F),
    /// Log-variance node, already clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    LogVar(Var),
}

impl<F: Scalar> GaussianVars<F> {
    /// Reparameterized sample `μ + ε ⊙ σ` with caller-provided noise.
    pub fn sample(&self, g: &Graph<F>, noise: &ArrayD<F>) -> Var {
        assert_eq!(
            g.shape(self.mean),
            noise.shape(),
            "sample: noise shape mismatch"
        );
        let eps = g.constant(noise.clone());
        match self.variance {
            VarianceSpec::Frozen(c) => g.add(self.mean, g.scale(eps, c.sqrt())),
            VarianceSpec::LogVar(lv) => {
                let sd = g.exp(g.scale(lv, F::from_f64(0.5)));
                g.add(self.mean, g.mul(eps, sd))
            }
        }
    }

    /// Closed-form KL to the standard normal as a scalar node.
    pub fn kl_to_standard(&self, g: &Graph<F>) -> Var {
        let half = F::from_f64(0.5);
        match self.variance {
            VarianceSpec::Frozen(c) => {
                let d = g.value(self.mean).len() as f64;
                let sum_sq = g.sum(g.square(self.mean));
                let constant = -0.5 * d * (1.0 + c.to_f64().ln() - c.to_f64());
                g.add(g.scale(sum_sq, half), g.scalar_constant(F::from_f64(constant)))
            }
            VarianceSpec::LogVar(lv) => {
                let inner = g.add_scalar(
                    g.sub(lv, g.add(g.square(self.mean), g.exp(lv))),
                    F::one(),
                );
                g.scale(g.sum(inner), -half)
            }
        }
    }

    /// Log-density of `x` under this Gaussian as a scalar node, optionally
    /// restricted by a constant 0/1 mask (invisible-joint exclusion).
    pub fn log_prob(&self, g: &Graph<F>, x: Var, mask: Option<&ArrayD<F>>) -> Var {
        let half = F::from_f64(0.5);
        let two_pi = 2.0 * std::f64::consts::PI;
        let diff_sq = g.square(g.sub(x, self.mean));
        let n_active = match mask {
            Some(m) => m.iter().fold(F::zero(), |acc, &v| acc + v).to_f64(),
            None => g.value(self.mean).len() as f64,
        };
        match self.variance {
            VarianceSpec::Frozen(c) => {
                let quad_sum = match mask {
                    Some(m) => g.mul_sum(diff_sq, g.constant(m.clone())),
                    None => g.sum(diff_sq),
                };
                let quad = g.scale(quad_sum, -half / c);
                let norm = -0.5 * n_active * (two_pi * c.to_f64()).ln();
                g.add(quad, g.scalar_constant(F::from_f64(norm)))
            }
            VarianceSpec::LogVar(lv) => {
                // -1/2 Σ_mask [ ln 2π + lv + (x-μ)² e^{-lv} ]
                let inv_var = g.exp(g.neg(lv));
                let quad = g.mul(diff_sq, inv_var);
                let per_cell = g.add_scalar(g.add(lv, quad), F::from_f64(two_pi.ln()));
                let total = match mask {
                    Some(m) => g.mul_sum(per_cell, g.constant(m.clone())),
                    None => g.sum(per_cell),
                };
                g.scale(total, -half)
            }
        }
    }

    /// Detaches tape values into a plain [`DiagonalGaussian`].
    pub fn detach(&self, g: &Graph<F>) -> Result<DiagonalGaussian<F>> {
        let mean = g.value(self.mean).to_owned();
        match self.variance {
            VarianceSpec::Frozen(c) => DiagonalGaussian::with_fixed_variance(mean, c),
            VarianceSpec::LogVar(lv) => {
                let variance = g.value(lv).mapv(F::exp);
                DiagonalGaussian::new(mean, variance)
            }
        }
    }
}

/// One latent draw: the reparameterized sample plus the Gaussian it came from.
#[derive(Debug, Clone)]
pub struct LatentDraw<F: Scalar> {
    pub sample: ArrayD<F>,
    pub distribution: DiagonalGaussian<F>,
}

/// Appearance, scene, and primitive draws for one sample.
#[derive(Debug, Clone)]
pub struct LatentTriple<F: Scalar> {
    pub appearance: LatentDraw<F>,
    pub scene: LatentDraw<F>,
    pub primitive: LatentDraw<F>,
}

fn clamped_log_var<F: Scalar>(g: &Graph<F>, raw: Var) -> Var {
    g.clamp(raw, F::from_f64(LOG_VAR_MIN), F::from_f64(LOG_VAR_MAX))
}

/// Image-to-pose recognizer: RGB image in, Gaussian over heatmap space out.
#[derive(Debug, Clone)]
pub struct PoseRecognizer<F: Scalar> {
    pub store: ParamStore<F>,
    backbone: RecognizerBackbone,
    mean_head: Conv2d,
    log_var_head: Option<Conv2d>,
}

#[derive(Debug, Clone)]
enum RecognizerBackbone {
    SmallConv {
        stem: Conv2d,
        down1: Conv2d,
        down2: Conv2d,
        trunk: ResStack,
    },
    HourglassLite {
        stem1: Conv2d,
        stem2: Conv2d,
        pre: ResStack,
        down: Conv2d,
        bottom: ResStack,
        up: ConvTranspose2d,
        skip: ResStack,
        post: ResStack,
    },
}

impl<F: Scalar> PoseRecognizer<F> {
    pub fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let b = config.base_channels;
        let joints = crate::heatmap::NUM_JOINTS;
        let backbone = match config.backbone {
            Backbone::SmallConv => RecognizerBackbone::SmallConv {
                stem: Conv2d::init(&mut store, "stem", 3, b, 3, 1, 1, rng),
                down1: Conv2d::init(&mut store, "down1", b, 2 * b, 3, 2, 1, rng),
                down2: Conv2d::init(&mut store, "down2", 2 * b, 4 * b, 3, 2, 1, rng),
                trunk: ResStack::init(&mut store, "trunk", 4 * b, config.residual_blocks, rng),
            },
            Backbone::HourglassLite => RecognizerBackbone::HourglassLite {
                stem1: Conv2d::init(&mut store, "stem1", 3, b, 3, 2, 1, rng),
                stem2: Conv2d::init(&mut store, "stem2", b, 2 * b, 3, 2, 1, rng),
                pre: ResStack::init(&mut store, "pre", 2 * b, 1, rng),
                down: Conv2d::init(&mut store, "down", 2 * b, 2 * b, 3, 2, 1, rng),
                bottom: ResStack::init(&mut store, "bottom", 2 * b, 1, rng),
                up: ConvTranspose2d::init(&mut store, "up", 2 * b, 2 * b, 4, 2, 1, rng),
                skip: ResStack::init(&mut store, "skip", 2 * b, 1, rng),
                post: ResStack::init(&mut store, "post", 2 * b, config.residual_blocks, rng),
            },
        };
        let trunk_out = match config.backbone {
            Backbone::SmallConv => 4 * b,
            Backbone::HourglassLite => 2 * b,
        };
        let mean_head = Conv2d::init_zero(&mut store, "mean_head", trunk_out, joints, 1, 1, 0);
        let log_var_head = config
            .learned_recognizer_variance
            .then(|| Conv2d::init_zero(&mut store, "log_var_head", trunk_out, joints, 1, 1, 0));
        PoseRecognizer {
            store,
            backbone,
            mean_head,
            log_var_head,
        }
    }

    pub fn forward(&self, bind: &mut Binder<'_, F>, image: Var) -> GaussianVars<F> {
        let g = bind.graph();
        let features = match &self.backbone {
            RecognizerBackbone::SmallConv {
                stem,
                down1,
                down2,
                trunk,
            } => {
                let x = g.relu(stem.apply(bind, image));
                let x = g.relu(down1.apply(bind, x));
                let x = g.relu(down2.apply(bind, x));
                trunk.apply(bind, x)
            }
            RecognizerBackbone::HourglassLite {
                stem1,
                stem2,
                pre,
                down,
                bottom,
                up,
                skip,
                post,
            } => {
                let x = g.relu(stem1.apply(bind, image));
                let x = g.relu(stem2.apply(bind, x));
                let x = pre.apply(bind, x);
                let low = g.relu(down.apply(bind, x));
                let low = bottom.apply(bind, low);
                let high = up.apply(bind, low);
                let lateral = skip.apply(bind, x);
                let merged = g.relu(g.add(high, lateral));
                post.apply(bind, merged)
            }
        };
        let mean = self.mean_head.apply(bind, features);
        let variance = match &self.log_var_head {
            Some(head) => VarianceSpec::LogVar(clamped_log_var(g, head.apply(bind, features))),
            None => VarianceSpec::Frozen(F::from_f64(POSE_RECOGNIZER_VARIANCE)),
        };
        GaussianVars { mean, variance }
    }

    /// Plain evaluation: runs a throwaway tape and detaches the output.
    pub fn recognize(&self, image: &ArrayD<F>, config: &NetConfig) -> Result<DiagonalGaussian<F>> {
        if image.shape() != config.image_shape() {
            return Err(Error::contract(format!(
                "recognize: image shape {:?}, expected {:?}",
                image.shape(),
                config.image_shape()
            )));
        }
        let g = Graph::new();
        let mut bind = Binder::frozen(&g, &self.store);
        let out = self.forward(&mut bind, g.constant(image.clone()));
        out.detach(&g)
    }
}

/// Shared architecture of the appearance, scene, and primitive encoders:
/// a residual stack followed by two stride-2 stages and branching mean /
/// log-variance heads over the latent grid.
#[derive(Debug, Clone)]
pub struct LatentEncoder<F: Scalar> {
    pub store: ParamStore<F>,
    stem: Conv2d,
    trunk: ResStack,
    downs: Vec<Conv2d>,
    mean_head: Conv2d,
    log_var_head: Conv2d,
}

impl<F: Scalar> LatentEncoder<F> {
    pub fn init(config: &NetConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let b = config.base_channels;
        let c_lat = config.latent_channels;
        let stem = Conv2d::init(&mut store, "stem", in_channels, b, 3, 1, 1, rng);
        let trunk = ResStack::init(&mut store, "trunk", b, config.residual_blocks, rng);
        let downs = (0..config.latent_down_stages)
            .map(|i| {
                Conv2d::init(
                    &mut store,
                    &format!("down{i}"),
                    config.stage_channels(i),
                    config.stage_channels(i + 1),
                    3,
                    2,
                    1,
                    rng,
                )
            })
            .collect();
        let top = config.stage_channels(config.latent_down_stages);
        LatentEncoder {
            stem,
            trunk,
            downs,
            mean_head: Conv2d::init_zero(&mut store, "mean_head", top, c_lat, 1, 1, 0),
            log_var_head: Conv2d::init_zero(&mut store, "log_var_head", top, c_lat, 1, 1, 0),
            store,
        }
    }

    pub fn forward(&self, bind: &mut Binder<'_, F>, input: Var) -> GaussianVars<F> {
        let g = bind.graph();
        let mut x = g.relu(self.stem.apply(bind, input));
        x = self.trunk.apply(bind, x);
        for down in &self.downs {
            x = g.relu(down.apply(bind, x));
        }
        let mean = self.mean_head.apply(bind, x);
        let log_var = clamped_log_var(g, self.log_var_head.apply(bind, x));
        GaussianVars {
            mean,
            variance: VarianceSpec::LogVar(log_var),
        }
    }

    /// Plain evaluation on a pre-concatenated input tensor.
    pub fn encode(&self, input: &ArrayD<F>) -> Result<DiagonalGaussian<F>> {
        let g = Graph::new();
        let mut bind = Binder::frozen(&g, &self.store);
        let out = self.forward(&mut bind, g.constant(input.clone()));
        out.detach(&g)
    }
}

/// Pose- and latent-conditioned image generator: a U-Net over the heatmap
/// grid with the appearance and scene latents concatenated at the
/// bottleneck, then upsampled ×4 to image resolution. Output variance is
/// frozen to `IMAGE_GENERATOR_VARIANCE`.
#[derive(Debug, Clone)]
pub struct ImageGenerator<F: Scalar> {
    pub store: ParamStore<F>,
    enc0: Conv2d,
    downs: Vec<Conv2d>,
    bottleneck: Conv2d,
    ups: Vec<(ConvTranspose2d, Conv2d)>,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    mean_head: Conv2d,
}

impl<F: Scalar> ImageGenerator<F> {
    pub fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let b = config.base_channels;
        let c_lat = config.latent_channels;
        let stages = config.latent_down_stages;
        let joints = crate::heatmap::NUM_JOINTS;
        let enc0 = Conv2d::init(&mut store, "enc0", joints, b, 3, 1, 1, rng);
        let downs: Vec<Conv2d> = (0..stages)
            .map(|i| {
                Conv2d::init(
                    &mut store,
                    &format!("enc{}", i + 1),
                    config.stage_channels(i),
                    config.stage_channels(i + 1),
                    3,
                    2,
                    1,
                    rng,
                )
            })
            .collect();
        let top = config.stage_channels(stages);
        let bottleneck = Conv2d::init(&mut store, "bottleneck", top + 2 * c_lat, top, 3, 1, 1, rng);
        // Decoder stages mirror the encoder; each gets the matching skip.
        let ups: Vec<(ConvTranspose2d, Conv2d)> = (0..stages)
            .rev()
            .map(|i| {
                let dec = ConvTranspose2d::init(
                    &mut store,
                    &format!("dec{}", i + 1),
                    config.stage_channels(i + 1),
                    config.stage_channels(i),
                    4,
                    2,
                    1,
                    rng,
                );
                let fuse = Conv2d::init(
                    &mut store,
                    &format!("fuse{}", i + 1),
                    2 * config.stage_channels(i),
                    config.stage_channels(i),
                    3,
                    1,
                    1,
                    rng,
                );
                (dec, fuse)
            })
            .collect();
        ImageGenerator {
            enc0,
            downs,
            bottleneck,
            ups,
            up1: ConvTranspose2d::init(&mut store, "up1", b, b, 4, 2, 1, rng),
            up2: ConvTranspose2d::init(&mut store, "up2", b, b, 4, 2, 1, rng),
            mean_head: Conv2d::init_zero(&mut store, "mean_head", b, 3, 1, 1, 0),
            store,
        }
    }

    /// `pose` is a heatmap-grid stack; `appearance`/`scene` are latent-grid
    /// tensors whose spatial size equals the bottleneck's, so they
    /// concatenate along channels without broadcasting.
    pub fn forward(
        &self,
        bind: &mut Binder<'_, F>,
        pose: Var,
        appearance: Var,
        scene: Var,
    ) -> GaussianVars<F> {
        let g = bind.graph();
        let mut skips = Vec::with_capacity(self.downs.len() + 1);
        let mut x = g.relu(self.enc0.apply(bind, pose));
        skips.push(x);
        for down in &self.downs {
            x = g.relu(down.apply(bind, x));
            skips.push(x);
        }
        skips.pop(); // the deepest activation feeds the bottleneck directly
        let merged = g.concat_channels(&[x, appearance, scene]);
        let mut h = g.relu(self.bottleneck.apply(bind, merged));
        for (dec, fuse) in &self.ups {
            let up = dec.apply(bind, h);
            let skip = skips.pop().expect("skip stack underflow");
            h = g.relu(fuse.apply(bind, g.concat_channels(&[up, skip])));
        }
        let u1 = g.relu(self.up1.apply(bind, h));
        let u2 = g.relu(self.up2.apply(bind, u1));
        let mean = self.mean_head.apply(bind, u2);
        GaussianVars {
            mean,
            variance: VarianceSpec::Frozen(F::from_f64(IMAGE_GENERATOR_VARIANCE)),
        }
    }

    /// Plain evaluation.
    pub fn generate(
        &self,
        pose: &ArrayD<F>,
        appearance: &ArrayD<F>,
        scene: &ArrayD<F>,
    ) -> Result<DiagonalGaussian<F>> {
        let g = Graph::new();
        let mut bind = Binder::frozen(&g, &self.store);
        let out = self.forward(
            &mut bind,
            g.constant(pose.clone()),
            g.constant(appearance.clone()),
            g.constant(scene.clone()),
        );
        out.detach(&g)
    }
}

/// Primitive-to-pose generator: transposed convolutions from the latent grid
/// up to the heatmap grid with a branching head. Output variance is frozen
/// to `POSE_GENERATOR_VARIANCE`.
#[derive(Debug, Clone)]
pub struct PoseGenerator<F: Scalar> {
    pub store: ParamStore<F>,
    ups: Vec<ConvTranspose2d>,
    mean_head: Conv2d,
}

impl<F: Scalar> PoseGenerator<F> {
    pub fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let b = config.base_channels;
        let joints = crate::heatmap::NUM_JOINTS;
        let ups = (0..config.latent_down_stages)
            .map(|i| {
                let in_c = if i == 0 {
                    config.latent_channels
                } else {
                    2 * b
                };
                ConvTranspose2d::init(&mut store, &format!("up{i}"), in_c, 2 * b, 4, 2, 1, rng)
            })
            .collect();
        PoseGenerator {
            ups,
            mean_head: Conv2d::init_zero(&mut store, "mean_head", 2 * b, joints, 1, 1, 0),
            store,
        }
    }

    pub fn forward(&self, bind: &mut Binder<'_, F>, primitive: Var) -> GaussianVars<F> {
        let g = bind.graph();
        let mut x = primitive;
        for up in &self.ups {
            x = g.relu(up.apply(bind, x));
        }
        let mean = self.mean_head.apply(bind, x);
        GaussianVars {
            mean,
            variance: VarianceSpec::Frozen(F::from_f64(POSE_GENERATOR_VARIANCE)),
        }
    }

    /// Plain evaluation.
    pub fn generate(&self, primitive: &ArrayD<F>) -> Result<DiagonalGaussian<F>> {
        let g = Graph::new();
        let mut bind = Binder::frozen(&g, &self.store);
        let out = self.forward(&mut bind, g.constant(primitive.clone()));
        out.detach(&g)
    }
}

/// U-Net mask estimator over the reduced image grid. The raw output is
/// sigmoid-activated into `(0, 1)`; the masking module recenters and
/// sharpens it.
#[derive(Debug, Clone)]
pub struct MaskEstimator<F: Scalar> {
    pub store: ParamStore<F>,
    stem: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    up: ConvTranspose2d,
    fuse: Conv2d,
    head: Conv2d,
}

impl<F: Scalar> MaskEstimator<F> {
    pub fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let b = config.base_channels;
        let in_c = 3 + crate::heatmap::NUM_JOINTS;
        MaskEstimator {
            stem: Conv2d::init(&mut store, "stem", in_c, b, 3, 1, 1, rng),
            down: Conv2d::init(&mut store, "down", b, 2 * b, 3, 2, 1, rng),
            mid: Conv2d::init(&mut store, "mid", 2 * b, 2 * b, 3, 1, 1, rng),
            up: ConvTranspose2d::init(&mut store, "up", 2 * b, b, 4, 2, 1, rng),
            fuse: Conv2d::init(&mut store, "fuse", 2 * b, b, 3, 1, 1, rng),
            head: Conv2d::init_zero(&mut store, "head", b, 1, 1, 1, 0),
            store,
        }
    }

    /// Returns the raw mask in `(0, 1)` with shape `[H*, W*]`.
    pub fn forward(&self, bind: &mut Binder<'_, F>, reduced_image: Var, pose: Var) -> Var {
        let g = bind.graph();
        let input = g.concat_channels(&[reduced_image, pose]);
        let e0 = g.relu(self.stem.apply(bind, input));
        let e1 = g.relu(self.down.apply(bind, e0));
        let m = g.relu(self.mid.apply(bind, e1));
        let d = self.up.apply(bind, m);
        let f = g.relu(self.fuse.apply(bind, g.concat_channels(&[d, e0])));
        let raw = g.sigmoid(self.head.apply(bind, f));
        let shape = g.shape(raw);
        g.reshape(raw, &shape[1..])
    }

    /// Plain evaluation: raw mask in `(0, 1)`.
    pub fn estimate(&self, reduced_image: &ArrayD<F>, pose: &ArrayD<F>) -> ArrayD<F> {
        let g = Graph::new();
        let mut bind = Binder::frozen(&g, &self.store);
        let out = self.forward(
            &mut bind,
            g.constant(reduced_image.clone()),
            g.constant(pose.clone()),
        );
        let value = g.value(out).to_owned();
        value
    }
}

/// All seven networks plus the shared configuration.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub config: NetConfig,
    pub pose_recognizer: PoseRecognizer<F>,
    pub appearance_encoder: LatentEncoder<F>,
    pub scene_encoder: LatentEncoder<F>,
    pub primitive_encoder: LatentEncoder<F>,
    pub image_generator: ImageGenerator<F>,
    pub pose_generator: PoseGenerator<F>,
    pub mask_estimator: MaskEstimator<F>,
}

/// Stable network names used for checkpoints, optimizer state, and logs.
pub const NET_NAMES: [&str; 7] = [
    "pose_recognizer",
    "appearance_encoder",
    "scene_encoder",
    "primitive_encoder",
    "image_generator",
    "pose_generator",
    "mask_estimator",
];

impl<F: Scalar> Model<F> {
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let joints = crate::heatmap::NUM_JOINTS;
        let rng_for = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Ok(Model {
            config: config.clone(),
            pose_recognizer: PoseRecognizer::init(config, &mut rng_for(1)),
            appearance_encoder: LatentEncoder::init(config, 3 + joints, &mut rng_for(2)),
            scene_encoder: LatentEncoder::init(config, 3 + joints, &mut rng_for(3)),
            primitive_encoder: LatentEncoder::init(config, joints, &mut rng_for(4)),
            image_generator: ImageGenerator::init(config, &mut rng_for(5)),
            pose_generator: PoseGenerator::init(config, &mut rng_for(6)),
            mask_estimator: MaskEstimator::init(config, &mut rng_for(7)),
        })
    }

    pub fn stores(&self) -> [&ParamStore<F>; 7] {
        [
            &self.pose_recognizer.store,
            &self.appearance_encoder.store,
            &self.scene_encoder.store,
            &self.primitive_encoder.store,
            &self.image_generator.store,
            &self.pose_generator.store,
            &self.mask_estimator.store,
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<F>; 7] {
        [
            &mut self.pose_recognizer.store,
            &mut self.appearance_encoder.store,
            &mut self.scene_encoder.store,
            &mut self.primitive_encoder.store,
            &mut self.image_generator.store,
            &mut self.pose_generator.store,
            &mut self.mask_estimator.store,
        ]
    }

    /// Per-network parameter counts, in `NET_NAMES` order.
    pub fn parameter_counts(&self) -> Vec<(String, usize)> {
        NET_NAMES
            .iter()
            .zip(self.stores())
            .map(|(name, store)| (name.to_string(), store.param_count()))
            .collect()
    }
}
