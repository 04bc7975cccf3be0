//! Every training objective, reported term by term.
//!
//! All objectives are maximization targets built on the autodiff tape; the
//! trainer negates them into losses. Each evaluation returns an
//! [`ElboBreakdown`] whose `total` equals the signed sum of its populated
//! terms, which makes the identities between objectives testable:
//!
//! - unsupervised bound over an image alone: reconstruction + pose
//!   likelihood at the recognizer's sample + recognizer entropy − three KLs;
//! - supervised bound over an (image, pose) pair: the same without the
//!   recognizer terms, with exact KLs at the given pose;
//! - the λ-augmented supervised bound adds `λ · log q(pose | image)`;
//! - the semi-supervised objective sums the two over a mixed batch;
//! - the standalone image-VAE and pose-VAE bounds and the recognizer
//!   log-likelihood drive independent pretraining.
//!
//! Sampling uses one reparameterized draw per latent; the pose sample is
//! drawn first and the appearance/scene/primitive draws condition on it.
//! Invisible joints are masked out of every sum against an annotated pose
//! (absent supervision must not inject gradients).

use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::graph::{Graph, Scalar, Var};
use crate::heatmap::PoseHeatmaps;
use crate::masking::build_masked_pair;
use crate::nets::{Binder, GaussianVars, LatentDraw, LatentTriple, Model, VarianceSpec};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Balance between generative and discriminative learning in the
/// λ-augmented supervised objective; 0.01 in every published experiment.
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Named per-term values whose signed sum is the objective:
/// `total = recon_image + pose_likelihood − recognizer_entropy
///          − kl_appearance − kl_scene − kl_primitive + lambda_term`.
///
/// `recognizer_entropy` stores the expected log-density of the pose
/// recognizer at its own sample (the negative differential entropy,
/// `−½ Σ (1 + log 2πσ²)`), hence the minus sign in the total. Terms an
/// objective does not have are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_image: f64,
    pub pose_likelihood: f64,
    pub recognizer_entropy: f64,
    pub kl_appearance: f64,
    pub kl_scene: f64,
    pub kl_primitive: f64,
    pub lambda_term: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn zero() -> Self {
        ElboBreakdown {
            recon_image: 0.0,
            pose_likelihood: 0.0,
            recognizer_entropy: 0.0,
            kl_appearance: 0.0,
            kl_scene: 0.0,
            kl_primitive: 0.0,
            lambda_term: 0.0,
            total: 0.0,
        }
    }

    /// The defining signed sum of the populated terms.
    pub fn signed_sum(&self) -> f64 {
        self.recon_image + self.pose_likelihood - self.recognizer_entropy - self.kl_appearance
            - self.kl_scene
            - self.kl_primitive
            + self.lambda_term
    }

    /// Checks `total == signed_sum` within a relative tolerance.
    pub fn is_consistent(&self, rel_tol: f64) -> bool {
        let denom = self.total.abs().max(1.0);
        (self.total - self.signed_sum()).abs() <= rel_tol * denom
    }

    /// Name of the first non-finite term, if any.
    pub fn nonfinite_term(&self) -> Option<&'static str> {
        let checks = [
            (self.recon_image, "recon_image"),
            (self.pose_likelihood, "pose_likelihood"),
            (self.recognizer_entropy, "recognizer_entropy"),
            (self.kl_appearance, "kl_appearance"),
            (self.kl_scene, "kl_scene"),
            (self.kl_primitive, "kl_primitive"),
            (self.lambda_term, "lambda_term"),
            (self.total, "total"),
        ];
        checks.iter().find(|(v, _)| !v.is_finite()).map(|(_, n)| *n)
    }
}

/// Standard-normal noise for one sample's four reparameterized draws.
#[derive(Debug, Clone)]
pub struct SampleNoise<F: Scalar> {
    pub pose: ArrayD<F>,
    pub appearance: ArrayD<F>,
    pub scene: ArrayD<F>,
    pub primitive: ArrayD<F>,
}

impl<F: Scalar> SampleNoise<F> {
    pub fn zeros(config: &crate::nets::NetConfig) -> Self {
        SampleNoise {
            pose: ArrayD::zeros(IxDyn(&config.pose_shape())),
            appearance: ArrayD::zeros(IxDyn(&config.latent_shape())),
            scene: ArrayD::zeros(IxDyn(&config.latent_shape())),
            primitive: ArrayD::zeros(IxDyn(&config.latent_shape())),
        }
    }

    pub fn draw(config: &crate::nets::NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut fill = |shape: &[usize]| {
            ArrayD::from_shape_fn(IxDyn(shape), |_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z)
            })
        };
        SampleNoise {
            pose: fill(&config.pose_shape()),
            appearance: fill(&config.latent_shape()),
            scene: fill(&config.latent_shape()),
            primitive: fill(&config.latent_shape()),
        }
    }
}

/// Which objective graph to build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    /// `log q(pose | image)` under the recognizer, invisible joints masked.
    RecognizerLoss,
    /// Pose-VAE bound: pose likelihood − primitive KL.
    PoseVae,
    /// Image-VAE bound at a given pose: reconstruction − appearance/scene KLs.
    ImageVae,
    /// Full bound over an image alone (pose sampled from the recognizer).
    Unsupervised,
    /// Full bound over an (image, pose) pair, no recognizer terms.
    Supervised,
    /// Supervised plus `lambda · log q(pose | image)`.
    SupervisedLambda(f64),
}

/// Which networks bind as trainable parameters (in [`crate::nets::NET_NAMES`]
/// order); the rest enter the tape as constants.
pub type Trainable = [bool; 7];

pub const TRAIN_NONE: Trainable = [false; 7];

/// One objective evaluation: the term breakdown, optionally gradients per
/// network, and optionally detached artifacts for reconstruction output.
pub struct Evaluated<F: Scalar> {
    pub breakdown: ElboBreakdown,
    /// Per-network dense gradient lists (store order), present when requested.
    pub grads: Option<Vec<Vec<ArrayD<F>>>>,
    pub latents: Option<LatentTriple<F>>,
    /// Generated image mean (reconstruction), when the graph has one.
    pub image_mean: Option<ArrayD<F>>,
    /// Generated pose mean, when the graph has one.
    pub pose_mean: Option<ArrayD<F>>,
    /// Sharpened mask, when the graph has one.
    pub mask: Option<ArrayD<F>>,
    /// Pose sample drawn from the recognizer (unsupervised only).
    pub pose_sample: Option<ArrayD<F>>,
}

struct TermVars {
    recon_image: Option<Var>,
    pose_likelihood: Option<Var>,
    recognizer_entropy: Option<Var>,
    kl_appearance: Option<Var>,
    kl_scene: Option<Var>,
    kl_primitive: Option<Var>,
    lambda_term: Option<Var>,
    total: Var,
    image_mean: Option<Var>,
    pose_mean: Option<Var>,
    mask: Option<Var>,
    pose_sample: Option<Var>,
    latent_pairs: Option<LatentVarTriple>,
}

struct LatentVarTriple {
    appearance: (Var, GaussianVarsBox),
    scene: (Var, GaussianVarsBox),
    primitive: (Var, GaussianVarsBox),
}

// GaussianVars is Copy; boxed alias keeps the struct readable.
type GaussianVarsBox = (Var, Option<Var>);

fn pack_gaussian<F: Scalar>(q: &GaussianVars<F>) -> GaussianVarsBox {
    match q.variance {
        VarianceSpec::Frozen(_) => (q.mean, None),
        VarianceSpec::LogVar(lv) => (q.mean, Some(lv)),
    }
}

fn unpack_gaussian<F: Scalar>(
    g: &Graph<F>,
    packed: &GaussianVarsBox,
    frozen: F,
) -> Result<DiagonalGaussian<F>> {
    let mean = g.value(packed.0).to_owned();
    match packed.1 {
        Some(lv) => DiagonalGaussian::new(mean, g.value(lv).mapv(F::exp)),
        None => DiagonalGaussian::with_fixed_variance(mean, frozen),
    }
}

/// Converts an `f32` heatmap stack into the tape element type.
fn pose_to_elem<F: Scalar>(pose: &PoseHeatmaps) -> ArrayD<F> {
    pose.to_dyn().mapv(|v| F::from_f64(v as f64))
}

fn visibility_mask_elem<F: Scalar>(pose: &PoseHeatmaps) -> ArrayD<F> {
    pose.visibility_mask().mapv(|v| F::from_f64(v as f64))
}

/// The negative-entropy term `E[log q] = −½ Σ (1 + log 2πσ²)` of the
/// recognizer output as a scalar node.
fn neg_entropy_term<F: Scalar>(g: &Graph<F>, q: &GaussianVars<F>) -> Var {
    let half = F::from_f64(0.5);
    let ln_two_pi = (2.0 * std::f64::consts::PI).ln();
    match q.variance {
        VarianceSpec::Frozen(c) => {
            let d = g.value(q.mean).len() as f64;
            let value = -0.5 * d * (1.0 + ln_two_pi + c.to_f64().ln());
            g.scalar_constant(F::from_f64(value))
        }
        VarianceSpec::LogVar(lv) => {
            let inner = g.add_scalar(lv, F::from_f64(1.0 + ln_two_pi));
            g.scale(g.sum(inner), -half)
        }
    }
}

fn input_shape_check<F: Scalar>(model: &Model<F>, image: Option<&ArrayD<F>>) -> Result<()> {
    if let Some(image) = image {
        if image.shape() != model.config.image_shape() {
            return Err(Error::contract(format!(
                "objective: image shape {:?}, expected {:?}",
                image.shape(),
                model.config.image_shape()
            )));
        }
    }
    Ok(())
}

fn pose_shape_check<F: Scalar>(model: &Model<F>, pose: &PoseHeatmaps) -> Result<()> {
    let (hs, ws) = model.config.heatmap_size();
    if (pose.height(), pose.width()) != (hs, ws) {
        return Err(Error::contract(format!(
            "objective: pose grid {}x{}, expected {hs}x{ws}",
            pose.height(),
            pose.width()
        )));
    }
    Ok(())
}

/// Evaluates one objective for one sample. `trainable` controls which
/// networks bind as parameters; gradients (of the *maximization* objective)
/// are collected for those networks when `want_grads` is set.
pub fn evaluate_objective<F: Scalar>(
    model: &Model<F>,
    kind: ObjectiveKind,
    image: Option<&ArrayD<F>>,
    pose: Option<&PoseHeatmaps>,
    noise: &SampleNoise<F>,
    trainable: Trainable,
    want_grads: bool,
    want_artifacts: bool,
) -> Result<Evaluated<F>> {
    input_shape_check(model, image)?;
    if let Some(p) = pose {
        pose_shape_check(model, p)?;
    }

    let g: Graph<F> = Graph::new();
    let stores = model.stores();
    let mut binders: Vec<Binder<'_, F>> = stores
        .iter()
        .zip(trainable.iter())
        .map(|(store, &t)| {
            if t {
                Binder::new(&g, store)
            } else {
                Binder::frozen(&g, store)
            }
        })
        .collect();

    let terms = build_objective(model, &g, &mut binders, kind, image, pose, noise)?;

    let read = |v: Option<Var>| v.map(|v| g.scalar(v).to_f64()).unwrap_or(0.0);
    let breakdown = ElboBreakdown {
        recon_image: read(terms.recon_image),
        pose_likelihood: read(terms.pose_likelihood),
        recognizer_entropy: read(terms.recognizer_entropy),
        kl_appearance: read(terms.kl_appearance),
        kl_scene: read(terms.kl_scene),
        kl_primitive: read(terms.kl_primitive),
        lambda_term: read(terms.lambda_term),
        total: g.scalar(terms.total).to_f64(),
    };

    let grads = if want_grads {
        let mut all = g.backward(terms.total);
        Some(
            binders
                .iter()
                .map(|b| b.collect_grads(&mut all))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let latents = if want_artifacts {
        terms
            .latent_pairs
            .as_ref()
            .map(|lv| -> Result<LatentTriple<F>> {
                Ok(LatentTriple {
                    appearance: LatentDraw {
                        sample: g.value(lv.appearance.0).to_owned(),
                        distribution: unpack_gaussian(&g, &lv.appearance.1, F::one())?,
                    },
                    scene: LatentDraw {
                        sample: g.value(lv.scene.0).to_owned(),
                        distribution: unpack_gaussian(&g, &lv.scene.1, F::one())?,
                    },
                    primitive: LatentDraw {
                        sample: g.value(lv.primitive.0).to_owned(),
                        distribution: unpack_gaussian(&g, &lv.primitive.1, F::one())?,
                    },
                })
            })
            .transpose()?
    } else {
        None
    };

    let take_value = |v: Option<Var>| v.map(|v| g.value(v).to_owned());
    let out = Evaluated {
        breakdown,
        grads,
        latents,
        image_mean: if want_artifacts {
            take_value(terms.image_mean)
        } else {
            None
        },
        pose_mean: if want_artifacts {
            take_value(terms.pose_mean)
        } else {
            None
        },
        mask: if want_artifacts {
            take_value(terms.mask)
        } else {
            None
        },
        pose_sample: if want_artifacts {
            take_value(terms.pose_sample)
        } else {
            None
        },
    };
    Ok(out)
}

/// Builds the requested objective graph and returns its term nodes.
fn build_objective<F: Scalar>(
    model: &Model<F>,
    g: &Graph<F>,
    binders: &mut [Binder<'_, F>],
    kind: ObjectiveKind,
    image: Option<&ArrayD<F>>,
    pose: Option<&PoseHeatmaps>,
    noise: &SampleNoise<F>,
) -> Result<TermVars> {
    let need_image = !matches!(kind, ObjectiveKind::PoseVae);
    let need_pose = !matches!(kind, ObjectiveKind::Unsupervised);
    if need_image && image.is_none() {
        return Err(Error::contract("objective requires an image"));
    }
    if need_pose && pose.is_none() {
        return Err(Error::contract("objective requires an annotated pose"));
    }

    let image_var = image.map(|im| g.constant(im.clone()));
    let pose_const = pose.map(|p| g.constant(pose_to_elem::<F>(p)));
    let vis_mask = pose.map(visibility_mask_elem::<F>);

    let mut terms = TermVars {
        recon_image: None,
        pose_likelihood: None,
        recognizer_entropy: None,
        kl_appearance: None,
        kl_scene: None,
        kl_primitive: None,
        lambda_term: None,
        total: g.scalar_constant(F::zero()),
        image_mean: None,
        pose_mean: None,
        mask: None,
        pose_sample: None,
        latent_pairs: None,
    };

    // Recognizer branch: sample the pose (unsupervised) or score the
    // annotation (recognizer loss / lambda term).
    let (pose_var, pose_target, target_mask): (Var, Var, Option<&ArrayD<F>>) = match kind {
        ObjectiveKind::Unsupervised => {
            let q_pose = model
                .pose_recognizer
                .forward(&mut binders[0], image_var.unwrap());
            let sample = q_pose.sample(g, &noise.pose);
            terms.recognizer_entropy = Some(neg_entropy_term(g, &q_pose));
            terms.pose_sample = Some(sample);
            (sample, sample, None)
        }
        _ => {
            let p = pose_const.expect("checked above");
            (p, p, vis_mask.as_ref())
        }
    };

    match kind {
        ObjectiveKind::RecognizerLoss => {
            let q_pose = model
                .pose_recognizer
                .forward(&mut binders[0], image_var.unwrap());
            let ll = q_pose.log_prob(g, pose_target, target_mask);
            terms.pose_likelihood = Some(ll);
            terms.total = ll;
            return Ok(terms);
        }
        ObjectiveKind::PoseVae => {
            let (lik, kl, pose_mean, z_pair) =
                pose_branch(model, g, binders, pose_var, pose_target, target_mask, noise);
            terms.pose_likelihood = Some(lik);
            terms.kl_primitive = Some(kl);
            terms.pose_mean = Some(pose_mean);
            let _ = z_pair;
            terms.total = g.sub(lik, kl);
            return Ok(terms);
        }
        _ => {}
    }

    // Image branch (ImageVae, Unsupervised, Supervised, SupervisedLambda).
    let image_var = image_var.unwrap();
    let (recon, kl_a, kl_g, image_mean, mask, a_pair, g_pair) =
        image_branch(model, g, binders, image_var, pose_var, noise);
    terms.recon_image = Some(recon);
    terms.kl_appearance = Some(kl_a);
    terms.kl_scene = Some(kl_g);
    terms.image_mean = Some(image_mean);
    terms.mask = Some(mask);

    if matches!(kind, ObjectiveKind::ImageVae) {
        // No primitive draw in the image bound, so the triple stays empty.
        terms.total = g.sub(recon, g.add(kl_a, kl_g));
        return Ok(terms);
    }

    let (lik, kl_z, pose_mean, z_pair) =
        pose_branch(model, g, binders, pose_var, pose_target, target_mask, noise);
    terms.pose_likelihood = Some(lik);
    terms.kl_primitive = Some(kl_z);
    terms.pose_mean = Some(pose_mean);
    terms.latent_pairs = Some(LatentVarTriple {
        appearance: a_pair,
        scene: g_pair,
        primitive: z_pair,
    });

    // total = recon + pose_lik [+ entropy-of-recognizer] − kl_a − kl_g − kl_z
    let mut total = g.add(recon, lik);
    if let Some(neg_ent) = terms.recognizer_entropy {
        total = g.sub(total, neg_ent);
    }
    total = g.sub(total, g.sum_scalars(&[kl_a, kl_g, kl_z]));

    if let ObjectiveKind::SupervisedLambda(lambda) = kind {
        if lambda < 0.0 {
            return Err(Error::contract("lambda must be nonnegative"));
        }
        let q_pose = model
            .pose_recognizer
            .forward(&mut binders[0], image_var);
        let ll = q_pose.log_prob(g, pose_target, target_mask);
        let lam = g.scale(ll, F::from_f64(lambda));
        terms.lambda_term = Some(lam);
        total = g.add(total, lam);
    }

    terms.total = total;
    Ok(terms)
}

/// Pose VAE branch: encode the pose to a primitive, decode, score.
/// Returns (likelihood, KL, decoded mean, (sample, q) pair).
fn pose_branch<F: Scalar>(
    model: &Model<F>,
    g: &Graph<F>,
    binders: &mut [Binder<'_, F>],
    pose_input: Var,
    pose_target: Var,
    target_mask: Option<&ArrayD<F>>,
    noise: &SampleNoise<F>,
) -> (Var, Var, Var, (Var, GaussianVarsBox)) {
    let q_z = model
        .primitive_encoder
        .forward(&mut binders[3], pose_input);
    let z = q_z.sample(g, &noise.primitive);
    let p_s = model.pose_generator.forward(&mut binders[5], z);
    let lik = p_s.log_prob(g, pose_target, target_mask);
    let kl = q_z.kl_to_standard(g);
    (lik, kl, p_s.mean, (z, pack_gaussian(&q_z)))
}

/// Image branch: mask-split the reduced image, encode appearance and scene,
/// decode the image, score. Returns (reconstruction, KL_a, KL_g, decoded
/// mean, mask, appearance pair, scene pair).
#[allow(clippy::type_complexity)]
fn image_branch<F: Scalar>(
    model: &Model<F>,
    g: &Graph<F>,
    binders: &mut [Binder<'_, F>],
    image: Var,
    pose_var: Var,
    noise: &SampleNoise<F>,
) -> (
    Var,
    Var,
    Var,
    Var,
    Var,
    (Var, GaussianVarsBox),
    (Var, GaussianVarsBox),
) {
    let masked = build_masked_pair(&mut binders[6], image, pose_var, model);
    let fg_input = g.concat_channels(&[masked.foreground, pose_var]);
    let q_a = model.appearance_encoder.forward(&mut binders[1], fg_input);
    let a = q_a.sample(g, &noise.appearance);
    let bg_input = g.concat_channels(&[masked.background, pose_var]);
    let q_g = model.scene_encoder.forward(&mut binders[2], bg_input);
    let g_lat = q_g.sample(g, &noise.scene);
    let p_x = model
        .image_generator
        .forward(&mut binders[4], pose_var, a, g_lat);
    let recon = p_x.log_prob(g, image, None);
    let kl_a = q_a.kl_to_standard(g);
    let kl_g = q_g.kl_to_standard(g);
    (
        recon,
        kl_a,
        kl_g,
        p_x.mean,
        masked.mask,
        (a, pack_gaussian(&q_a)),
        (g_lat, pack_gaussian(&q_g)),
    )
}

// ---------------------------------------------------------------------------
// Spec-shaped convenience wrappers (breakdown-only, nothing trainable).
// ---------------------------------------------------------------------------

/// Value of `log q(pose | image)` summed over visible-joint cells, from a
/// detached recognizer output. The flag is set when no joint is visible (the
/// value is then 0).
pub fn recognizer_loss<F: Scalar>(
    pose_gt: &PoseHeatmaps,
    q_pose: &DiagonalGaussian<F>,
) -> Result<(F, bool)> {
    let grid_shape = [
        crate::heatmap::NUM_JOINTS,
        pose_gt.height(),
        pose_gt.width(),
    ];
    if q_pose.shape() != grid_shape {
        return Err(Error::contract(format!(
            "recognizer_loss: distribution shape {:?}, expected {grid_shape:?}",
            q_pose.shape()
        )));
    }
    if pose_gt.visibility.iter().all(|v| !v) {
        return Ok((F::zero(), true));
    }
    let target = pose_to_elem::<F>(pose_gt);
    let mask = visibility_mask_elem::<F>(pose_gt);
    let half = F::from_f64(0.5);
    let ln_two_pi = F::from_f64((2.0 * std::f64::consts::PI).ln());
    let mut acc = F::zero();
    for (((&m, &x), &mu), &var) in mask
        .iter()
        .zip(target.iter())
        .zip(q_pose.mean().iter())
        .zip(q_pose.variance().iter())
    {
        if m > F::zero() {
            let diff = x - mu;
            acc += ln_two_pi + var.ln() + diff * diff / var;
        }
    }
    Ok((-half * acc, false))
}

/// Pose-VAE bound for one pose: likelihood − primitive KL.
pub fn pose_vae_elbo<F: Scalar>(
    model: &Model<F>,
    pose: &PoseHeatmaps,
    noise_primitive: &ArrayD<F>,
) -> Result<ElboBreakdown> {
    let mut noise = SampleNoise::zeros(&model.config);
    noise.primitive = noise_primitive.clone();
    Ok(evaluate_objective(
        model,
        ObjectiveKind::PoseVae,
        None,
        Some(pose),
        &noise,
        TRAIN_NONE,
        false,
        false,
    )?
    .breakdown)
}

/// Image-VAE bound for one (image, pose) pair: reconstruction − two KLs.
pub fn image_vae_elbo<F: Scalar>(
    model: &Model<F>,
    image: &ArrayD<F>,
    pose: &PoseHeatmaps,
    noise_appearance: &ArrayD<F>,
    noise_scene: &ArrayD<F>,
) -> Result<ElboBreakdown> {
    let mut noise = SampleNoise::zeros(&model.config);
    noise.appearance = noise_appearance.clone();
    noise.scene = noise_scene.clone();
    Ok(evaluate_objective(
        model,
        ObjectiveKind::ImageVae,
        Some(image),
        Some(pose),
        &noise,
        TRAIN_NONE,
        false,
        false,
    )?
    .breakdown)
}

/// Full bound over an image without annotation.
pub fn unsupervised_elbo<F: Scalar>(
    model: &Model<F>,
    image: &ArrayD<F>,
    noise: &SampleNoise<F>,
) -> Result<ElboBreakdown> {
    Ok(evaluate_objective(
        model,
        ObjectiveKind::Unsupervised,
        Some(image),
        None,
        noise,
        TRAIN_NONE,
        false,
        false,
    )?
    .breakdown)
}

/// Full bound over an annotated (image, pose) pair.
pub fn supervised_elbo<F: Scalar>(
    model: &Model<F>,
    image: &ArrayD<F>,
    pose_gt: &PoseHeatmaps,
    noise: &SampleNoise<F>,
) -> Result<ElboBreakdown> {
    Ok(evaluate_objective(
        model,
        ObjectiveKind::Supervised,
        Some(image),
        Some(pose_gt),
        noise,
        TRAIN_NONE,
        false,
        false,
    )?
    .breakdown)
}

/// Supervised bound plus `lambda · log q(pose | image)`.
pub fn supervised_elbo_lambda<F: Scalar>(
    model: &Model<F>,
    image: &ArrayD<F>,
    pose_gt: &PoseHeatmaps,
    noise: &SampleNoise<F>,
    lambda: f64,
) -> Result<ElboBreakdown> {
    Ok(evaluate_objective(
        model,
        ObjectiveKind::SupervisedLambda(lambda),
        Some(image),
        Some(pose_gt),
        noise,
        TRAIN_NONE,
        false,
        false,
    )?
    .breakdown)
}

/// One batch item for the semi-supervised objective.
pub struct BatchItem<'a, F: Scalar> {
    pub image: &'a ArrayD<F>,
    /// Present iff the sample is annotated.
    pub pose: Option<&'a PoseHeatmaps>,
}

/// Semi-supervised objective over a mixed batch: the unsupervised bound for
/// unannotated samples plus the λ-augmented supervised bound for annotated
/// ones. Returns the scalar sum and the per-sample breakdowns.
pub fn semisupervised_objective<F: Scalar>(
    model: &Model<F>,
    batch: &[BatchItem<'_, F>],
    noises: &[SampleNoise<F>],
    lambda: f64,
) -> Result<(f64, Vec<ElboBreakdown>)> {
    if batch.is_empty() {
        return Err(Error::contract("semisupervised objective: empty batch"));
    }
    if batch.len() != noises.len() {
        return Err(Error::contract(
            "semisupervised objective: one noise bundle per sample required",
        ));
    }
    let mut breakdowns = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for (item, noise) in batch.iter().zip(noises) {
        let b = match item.pose {
            Some(pose) => supervised_elbo_lambda(model, item.image, pose, noise, lambda)?,
            None => unsupervised_elbo(model, item.image, noise)?,
        };
        total += b.total;
        breakdowns.push(b);
    }
    Ok((total, breakdowns))
}

/// Mask-estimator pretraining loss: mean squared error between the raw mask
/// and a ground-truth mask on the reduced grid. Returns the MSE and, when
/// requested, its gradient for the mask estimator (minimization direction).
pub fn mask_mse<F: Scalar>(
    model: &Model<F>,
    image: &ArrayD<F>,
    pose: &PoseHeatmaps,
    mask_gt_reduced: &ArrayD<F>,
    want_grads: bool,
) -> Result<(f64, Option<Vec<ArrayD<F>>>)> {
    input_shape_check(model, Some(image))?;
    pose_shape_check(model, pose)?;
    let (hs, ws) = model.config.reduced_size();
    if mask_gt_reduced.shape() != [hs, ws] {
        return Err(Error::contract(format!(
            "mask_mse: ground-truth mask shape {:?}, expected [{hs}, {ws}]",
            mask_gt_reduced.shape()
        )));
    }
    let g: Graph<F> = Graph::new();
    let mut bind = if want_grads {
        Binder::new(&g, &model.mask_estimator.store)
    } else {
        Binder::frozen(&g, &model.mask_estimator.store)
    };
    let image_var = g.constant(image.clone());
    let pose_var = g.constant(pose_to_elem::<F>(pose));
    let reduced = g.avg_pool(image_var, crate::masking::REDUCE_FACTOR);
    let raw = model.mask_estimator.forward(&mut bind, reduced, pose_var);
    let diff = g.sub(raw, g.constant(mask_gt_reduced.clone()));
    let mse = g.mean(g.square(diff));
    let value = g.scalar(mse).to_f64();
    let grads = if want_grads {
        let mut all = g.backward(mse);
        Some(bind.collect_grads(&mut all))
    } else {
        None
    };
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{kl_to_standard_normal, log_prob_diag, sample_reparam};
    use crate::heatmap::{encode_pose, JointCoords, NUM_JOINTS};
    use crate::masking::{reduce_image, sharpen_mask};
    use crate::nets::{Model, NetConfig, IMAGE_GENERATOR_VARIANCE, POSE_GENERATOR_VARIANCE,
                      POSE_RECOGNIZER_VARIANCE};
    use ndarray::{ArrayD, Axis, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny_model(seed: u64) -> Model<f64> {
        Model::init(&NetConfig::tiny(), seed).unwrap()
    }

    /// Adds noise to every parameter so zero-initialized heads produce
    /// nonzero outputs and gradients.
    fn randomize(model: &mut Model<f64>, rng: &mut ChaCha8Rng, scale: f64) {
        for store in model.stores_mut() {
            for idx in 0..store.len() {
                let v = store.value_mut(idx);
                for x in v.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += z * scale;
                }
            }
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng, h: usize, w: usize, vis_p: f64) -> PoseHeatmaps {
        loop {
            let mut c = JointCoords::invisible();
            let mut any = false;
            for j in 0..NUM_JOINTS {
                c.visibility[j] = rng.random_bool(vis_p);
                any |= c.visibility[j];
                c.coords[j] = (
                    rng.random_range(0..w) as f32,
                    rng.random_range(0..h) as f32,
                );
            }
            if any {
                return encode_pose(&c, h, w).unwrap();
            }
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, config: &NetConfig) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&config.image_shape()), |_| rng.random_range(0.0..1.0))
    }

    /// Concatenates `[C1,H,W]` and `[C2,H,W]` along channels (oracle-side).
    fn concat_c(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
        let (c1, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let c2 = b.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[c1 + c2, h, w]));
        out.slice_axis_mut(Axis(0), ndarray::Slice::from(0..c1))
            .assign(a);
        out.slice_axis_mut(Axis(0), ndarray::Slice::from(c1..c1 + c2))
            .assign(b);
        out
    }

    /// Masked log-density under an isotropic Gaussian, as a naive cell loop.
    fn masked_log_prob(
        x: &ArrayD<f64>,
        mean: &ArrayD<f64>,
        variance: f64,
        mask: Option<&ArrayD<f64>>,
    ) -> f64 {
        let ln_term = (2.0 * std::f64::consts::PI * variance).ln();
        let mut acc = 0.0;
        for (i, (&xv, &mu)) in x.iter().zip(mean.iter()).enumerate() {
            let keep = mask.map_or(true, |m| m.as_slice().unwrap()[i] > 0.0);
            if keep {
                let d = xv - mu;
                acc += ln_term + d * d / variance;
            }
        }
        -0.5 * acc
    }

    #[test]
    fn recognizer_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&mut rng, 4, 4, 0.8);
        let n_vis_cells = pose.visibility.iter().filter(|&&v| v).count() * 16;

        // Mean equal to the target: only the normalizer remains.
        let q = DiagonalGaussian::with_fixed_variance(
            pose.to_dyn().mapv(|v| v as f64),
            POSE_RECOGNIZER_VARIANCE,
        )
        .unwrap();
        let (value, warn) = recognizer_loss(&pose, &q).unwrap();
        assert!(!warn);
        let expected =
            -0.5 * (2.0 * std::f64::consts::PI * POSE_RECOGNIZER_VARIANCE).ln() * n_vis_cells as f64;
        assert!((value - expected).abs() < 1e-9, "{value} vs {expected}");

        // Quadratic penalty: doubling one residual from d to 2d changes the
        // value by -3d^2 / (2 sigma^2).
        let mut mean = pose.to_dyn().mapv(|v| v as f64);
        let vis_joint = pose.visibility.iter().position(|&v| v).unwrap();
        let flat = vis_joint * 16; // first cell of a visible channel
        let d = 0.3;
        mean.as_slice_mut().unwrap()[flat] += d;
        let q1 = DiagonalGaussian::with_fixed_variance(mean.clone(), POSE_RECOGNIZER_VARIANCE)
            .unwrap();
        let (v1, _) = recognizer_loss(&pose, &q1).unwrap();
        mean.as_slice_mut().unwrap()[flat] += d;
        let q2 = DiagonalGaussian::with_fixed_variance(mean, POSE_RECOGNIZER_VARIANCE).unwrap();
        let (v2, _) = recognizer_loss(&pose, &q2).unwrap();
        let expected_delta = -3.0 * d * d / (2.0 * POSE_RECOGNIZER_VARIANCE);
        assert!(((v2 - v1) - expected_delta).abs() < 1e-9);

        // No visible joints: zero with the warning flag.
        let empty = encode_pose(&JointCoords::invisible(), 4, 4).unwrap();
        let q = DiagonalGaussian::with_fixed_variance(
            ArrayD::zeros(IxDyn(&[16, 4, 4])),
            POSE_RECOGNIZER_VARIANCE,
        )
        .unwrap();
        let (v, warn) = recognizer_loss(&empty, &q).unwrap();
        assert_eq!(v, 0.0);
        assert!(warn);

        // Scalar-loop oracle on a random case.
        let mut model = tiny_model(3);
        randomize(&mut model, &mut rng, 0.05);
        let image = random_image(&mut rng, &model.config);
        let q = model.pose_recognizer.recognize(&image, &model.config).unwrap();
        let (v, _) = recognizer_loss(&pose, &q).unwrap();
        let oracle = masked_log_prob(
            &pose.to_dyn().mapv(|v| v as f64),
            q.mean(),
            POSE_RECOGNIZER_VARIANCE,
            Some(&pose.visibility_mask().mapv(|v| v as f64)),
        );
        assert!((v - oracle).abs() < 1e-9, "{v} vs {oracle}");
    }

    #[test]
    fn pose_vae_elbo_matches_compositional_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = tiny_model(7);
        randomize(&mut model, &mut rng, 0.05);
        let (hs, ws) = model.config.heatmap_size();
        let pose = random_pose(&mut rng, hs, ws, 0.85);
        let noise = ArrayD::from_shape_fn(IxDyn(&model.config.latent_shape()), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });

        let b = pose_vae_elbo(&model, &pose, &noise).unwrap();

        // Oracle: compose the plain network evaluations with gaussian ops.
        let pose_dyn = pose.to_dyn().mapv(|v| v as f64);
        let q_z = model.primitive_encoder.encode(&pose_dyn).unwrap();
        let z = sample_reparam(&q_z, &noise).unwrap();
        let p_s = model.pose_generator.generate(&z).unwrap();
        let lik = masked_log_prob(
            &pose_dyn,
            p_s.mean(),
            POSE_GENERATOR_VARIANCE,
            Some(&pose.visibility_mask().mapv(|v| v as f64)),
        );
        let kl = kl_to_standard_normal(&q_z);

        assert!((b.pose_likelihood - lik).abs() < 1e-9, "{} vs {lik}", b.pose_likelihood);
        assert!((b.kl_primitive - kl).abs() < 1e-9);
        assert!((b.total - (lik - kl)).abs() < 1e-9);
        assert!(b.is_consistent(1e-9));
        assert!(b.kl_primitive >= 0.0);
    }

    #[test]
    fn pose_vae_zero_cases() {
        // Zero-initialized heads put the posterior at the prior: KL = 0.
        let model = tiny_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (hs, ws) = model.config.heatmap_size();
        let pose = random_pose(&mut rng, hs, ws, 1.0);
        let zeros = ArrayD::zeros(IxDyn(&model.config.latent_shape()));
        let b = pose_vae_elbo(&model, &pose, &zeros).unwrap();
        assert!(b.kl_primitive.abs() < 1e-12);
        assert!((b.total - b.pose_likelihood).abs() < 1e-12);

        // Zero noise scores the decoder at the posterior mean.
        let mut model = tiny_model(17);
        randomize(&mut model, &mut rng, 0.05);
        let b = pose_vae_elbo(&model, &pose, &zeros).unwrap();
        let pose_dyn = pose.to_dyn().mapv(|v| v as f64);
        let q_z = model.primitive_encoder.encode(&pose_dyn).unwrap();
        let p_s = model.pose_generator.generate(q_z.mean()).unwrap();
        let lik = masked_log_prob(
            &pose_dyn,
            p_s.mean(),
            POSE_GENERATOR_VARIANCE,
            Some(&pose.visibility_mask().mapv(|v| v as f64)),
        );
        assert!((b.pose_likelihood - lik).abs() < 1e-9);
    }

    #[test]
    fn image_vae_elbo_matches_compositional_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut model = tiny_model(23);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let (hs, ws) = config.heatmap_size();
        let pose = random_pose(&mut rng, hs, ws, 0.9);
        let image = random_image(&mut rng, &config);
        let noise_a = ArrayD::from_shape_fn(IxDyn(&config.latent_shape()), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let noise_g = ArrayD::from_shape_fn(IxDyn(&config.latent_shape()), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });

        let b = image_vae_elbo(&model, &image, &pose, &noise_a, &noise_g).unwrap();

        // Oracle route: plain masking + encoders + generator + gaussian ops.
        let pose_dyn = pose.to_dyn().mapv(|v| v as f64);
        let xstar = reduce_image(&image).unwrap();
        let raw = model.mask_estimator.estimate(&xstar, &pose_dyn);
        let w = sharpen_mask(&raw.mapv(|v| v - 0.5));
        let mut fg = xstar.clone();
        for mut plane in fg.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&w, |p, &m| *p *= m);
        }
        let bg = &xstar - &fg;
        let q_a = model.appearance_encoder.encode(&concat_c(&fg, &pose_dyn)).unwrap();
        let q_g = model.scene_encoder.encode(&concat_c(&bg, &pose_dyn)).unwrap();
        let a = sample_reparam(&q_a, &noise_a).unwrap();
        let g_lat = sample_reparam(&q_g, &noise_g).unwrap();
        let p_x = model.image_generator.generate(&pose_dyn, &a, &g_lat).unwrap();
        let recon = masked_log_prob(&image, p_x.mean(), IMAGE_GENERATOR_VARIANCE, None);
        let kl_a = kl_to_standard_normal(&q_a);
        let kl_g = kl_to_standard_normal(&q_g);

        assert!((b.recon_image - recon).abs() < 1e-9, "{} vs {recon}", b.recon_image);
        assert!((b.kl_appearance - kl_a).abs() < 1e-9);
        assert!((b.kl_scene - kl_g).abs() < 1e-9);
        assert!((b.total - (recon - kl_a - kl_g)).abs() < 1e-9);
        assert!(b.is_consistent(1e-9));
    }

    #[test]
    fn unsupervised_elbo_matches_expansion_oracle() {
        // Straight-line expansion with the same fixed noise: sample the pose
        // from the recognizer, then appearance/scene/primitive given it,
        // then sum the six terms.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut model = tiny_model(31);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let image = random_image(&mut rng, &config);
        let mut noise = SampleNoise::<f64>::zeros(&config);
        for field in [
            &mut noise.pose,
            &mut noise.appearance,
            &mut noise.scene,
            &mut noise.primitive,
        ] {
            for v in field.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
        }

        let b = unsupervised_elbo(&model, &image, &noise).unwrap();

        let q_s = model.pose_recognizer.recognize(&image, &config).unwrap();
        let s_hat = sample_reparam(&q_s, &noise.pose).unwrap();
        let d_s = s_hat.len() as f64;
        let neg_entropy = -0.5
            * d_s
            * (1.0 + (2.0 * std::f64::consts::PI * POSE_RECOGNIZER_VARIANCE).ln());

        let xstar = reduce_image(&image).unwrap();
        let raw = model.mask_estimator.estimate(&xstar, &s_hat);
        let w = sharpen_mask(&raw.mapv(|v| v - 0.5));
        let mut fg = xstar.clone();
        for mut plane in fg.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&w, |p, &m| *p *= m);
        }
        let bg = &xstar - &fg;
        let q_a = model.appearance_encoder.encode(&concat_c(&fg, &s_hat)).unwrap();
        let q_g = model.scene_encoder.encode(&concat_c(&bg, &s_hat)).unwrap();
        let q_z = model.primitive_encoder.encode(&s_hat).unwrap();
        let a = sample_reparam(&q_a, &noise.appearance).unwrap();
        let g_lat = sample_reparam(&q_g, &noise.scene).unwrap();
        let z = sample_reparam(&q_z, &noise.primitive).unwrap();
        let p_x = model.image_generator.generate(&s_hat, &a, &g_lat).unwrap();
        let p_s = model.pose_generator.generate(&z).unwrap();
        let recon = log_prob_diag(&image, &p_x).unwrap();
        let pose_lik = log_prob_diag(&s_hat, &p_s).unwrap();
        let kl_a = kl_to_standard_normal(&q_a);
        let kl_g = kl_to_standard_normal(&q_g);
        let kl_z = kl_to_standard_normal(&q_z);
        let total = recon + pose_lik - neg_entropy - kl_a - kl_g - kl_z;

        assert!((b.recon_image - recon).abs() < 1e-8, "{} vs {recon}", b.recon_image);
        assert!((b.pose_likelihood - pose_lik).abs() < 1e-8);
        assert!((b.recognizer_entropy - neg_entropy).abs() < 1e-8);
        assert!((b.kl_appearance - kl_a).abs() < 1e-8);
        assert!((b.kl_scene - kl_g).abs() < 1e-8);
        assert!((b.kl_primitive - kl_z).abs() < 1e-8);
        assert!((b.total - total).abs() < 1e-8, "{} vs {total}", b.total);
        assert!(b.is_consistent(1e-8));
    }

    #[test]
    fn supervised_matches_expansion_and_lambda_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut model = tiny_model(41);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let (hs, ws) = config.heatmap_size();
        let pose = random_pose(&mut rng, hs, ws, 0.8);
        let image = random_image(&mut rng, &config);
        let mut noise = SampleNoise::<f64>::zeros(&config);
        for field in [&mut noise.appearance, &mut noise.scene, &mut noise.primitive] {
            for v in field.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
        }

        let plain = supervised_elbo(&model, &image, &pose, &noise).unwrap();
        assert_eq!(plain.recognizer_entropy, 0.0);
        assert_eq!(plain.lambda_term, 0.0);
        assert!(plain.is_consistent(1e-9));

        // lambda = 0 degenerates to the plain supervised bound, term by term.
        let zero = supervised_elbo_lambda(&model, &image, &pose, &noise, 0.0).unwrap();
        assert!((zero.total - plain.total).abs() < 1e-12);
        assert_eq!(zero.recon_image, plain.recon_image);
        assert_eq!(zero.pose_likelihood, plain.pose_likelihood);
        assert_eq!(zero.kl_appearance, plain.kl_appearance);

        // Shared-noise identity: L_lambda - L = lambda * log q(pose | image),
        // and the lambda term itself is exactly lambda * recognizer_loss.
        let q = model.pose_recognizer.recognize(&image, &config).unwrap();
        let (rec_loss, _) = recognizer_loss(&pose, &q).unwrap();
        for lambda in [DEFAULT_LAMBDA, 0.3] {
            let lb = supervised_elbo_lambda(&model, &image, &pose, &noise, lambda).unwrap();
            assert!(
                ((lb.total - plain.total) - lambda * rec_loss).abs() < 1e-9,
                "identity violated at lambda={lambda}"
            );
            assert!((lb.lambda_term - lambda * rec_loss).abs() < 1e-9);
            assert!(lb.is_consistent(1e-9));
        }

        // Expansion oracle for the supervised bound itself.
        let pose_dyn = pose.to_dyn().mapv(|v| v as f64);
        let vis = pose.visibility_mask().mapv(|v| v as f64);
        let xstar = reduce_image(&image).unwrap();
        let raw = model.mask_estimator.estimate(&xstar, &pose_dyn);
        let w = sharpen_mask(&raw.mapv(|v| v - 0.5));
        let mut fg = xstar.clone();
        for mut plane in fg.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&w, |p, &m| *p *= m);
        }
        let bg = &xstar - &fg;
        let q_a = model.appearance_encoder.encode(&concat_c(&fg, &pose_dyn)).unwrap();
        let q_g = model.scene_encoder.encode(&concat_c(&bg, &pose_dyn)).unwrap();
        let q_z = model.primitive_encoder.encode(&pose_dyn).unwrap();
        let a = sample_reparam(&q_a, &noise.appearance).unwrap();
        let g_lat = sample_reparam(&q_g, &noise.scene).unwrap();
        let z = sample_reparam(&q_z, &noise.primitive).unwrap();
        let p_x = model.image_generator.generate(&pose_dyn, &a, &g_lat).unwrap();
        let p_s = model.pose_generator.generate(&z).unwrap();
        let recon = log_prob_diag(&image, &p_x).unwrap();
        let pose_lik = masked_log_prob(&pose_dyn, p_s.mean(), POSE_GENERATOR_VARIANCE, Some(&vis));
        let total = recon + pose_lik
            - kl_to_standard_normal(&q_a)
            - kl_to_standard_normal(&q_g)
            - kl_to_standard_normal(&q_z);
        assert!((plain.total - total).abs() < 1e-8, "{} vs {total}", plain.total);
    }

    #[test]
    fn semisupervised_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut model = tiny_model(47);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let (hs, ws) = config.heatmap_size();

        let images: Vec<ArrayD<f64>> = (0..8).map(|_| random_image(&mut rng, &config)).collect();
        let poses: Vec<PoseHeatmaps> = (0..8).map(|_| random_pose(&mut rng, hs, ws, 0.9)).collect();
        let noises: Vec<SampleNoise<f64>> = (0..8)
            .map(|_| SampleNoise::draw(&config, &mut rng))
            .collect();

        // Mixed batch: 3 annotated + 5 unannotated matches per-sample sums.
        let batch: Vec<BatchItem<'_, f64>> = images
            .iter()
            .enumerate()
            .map(|(i, image)| BatchItem {
                image,
                pose: (i < 3).then(|| &poses[i]),
            })
            .collect();
        let (total, per) = semisupervised_objective(&model, &batch, &noises, DEFAULT_LAMBDA).unwrap();
        assert_eq!(per.len(), 8);
        let mut oracle = 0.0;
        for i in 0..8 {
            let b = if i < 3 {
                supervised_elbo_lambda(&model, &images[i], &poses[i], &noises[i], DEFAULT_LAMBDA)
                    .unwrap()
            } else {
                unsupervised_elbo(&model, &images[i], &noises[i]).unwrap()
            };
            assert!((per[i].total - b.total).abs() < 1e-9);
            oracle += b.total;
        }
        assert!((total - oracle).abs() < 1e-9);

        // Degenerate compositions.
        let all_ann: Vec<BatchItem<'_, f64>> = images
            .iter()
            .zip(&poses)
            .map(|(image, pose)| BatchItem { image, pose: Some(pose) })
            .collect();
        let (t_ann, _) = semisupervised_objective(&model, &all_ann, &noises, DEFAULT_LAMBDA).unwrap();
        let sum_ann: f64 = (0..8)
            .map(|i| {
                supervised_elbo_lambda(&model, &images[i], &poses[i], &noises[i], DEFAULT_LAMBDA)
                    .unwrap()
                    .total
            })
            .sum();
        assert!((t_ann - sum_ann).abs() < 1e-9);

        let all_un: Vec<BatchItem<'_, f64>> = images
            .iter()
            .map(|image| BatchItem { image, pose: None })
            .collect();
        let (t_un, _) = semisupervised_objective(&model, &all_un, &noises, DEFAULT_LAMBDA).unwrap();
        let sum_un: f64 = (0..8)
            .map(|i| unsupervised_elbo(&model, &images[i], &noises[i]).unwrap().total)
            .sum();
        assert!((t_un - sum_un).abs() < 1e-9);

        // Empty batch is a contract violation.
        assert!(semisupervised_objective(&model, &[], &[], DEFAULT_LAMBDA).is_err());
    }

    #[test]
    fn objectives_are_deterministic_given_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut model = tiny_model(59);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let image = random_image(&mut rng, &config);
        let noise = SampleNoise::draw(&config, &mut rng);
        let a = unsupervised_elbo(&model, &image, &noise).unwrap();
        let b = unsupervised_elbo(&model, &image, &noise).unwrap();
        assert_eq!(a, b);
    }

    /// Central-difference spot check of every objective's parameter
    /// gradient; the full 100-coordinate sweep lives in the acceptance
    /// suite.
    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut model = tiny_model(67);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let (hs, ws) = config.heatmap_size();
        let pose = random_pose(&mut rng, hs, ws, 0.9);
        let image = random_image(&mut rng, &config);
        let noise = SampleNoise::draw(&config, &mut rng);

        let kinds = [
            ObjectiveKind::RecognizerLoss,
            ObjectiveKind::PoseVae,
            ObjectiveKind::ImageVae,
            ObjectiveKind::Unsupervised,
            ObjectiveKind::Supervised,
            ObjectiveKind::SupervisedLambda(DEFAULT_LAMBDA),
        ];
        let trainable: Trainable = [true; 7];
        let h = 1e-5;
        for kind in kinds {
            let image_opt = Some(&image);
            let pose_opt = (!matches!(kind, ObjectiveKind::Unsupervised)).then_some(&pose);
            let eval = evaluate_objective(
                &model, kind, image_opt, pose_opt, &noise, trainable, true, false,
            )
            .unwrap();
            let grads = eval.grads.unwrap();

            // Probe 3 random coordinates per network with a five-point
            // stencil; near-zero gradients get an absolute floor since the
            // relative error is dominated by cancellation noise there.
            for net in 0..7 {
                let store_len = model.stores()[net].len();
                for _ in 0..3 {
                    let pidx = rng.random_range(0..store_len);
                    let plen = model.stores()[net].get(crate::nets::ParamId(pidx)).len();
                    let flat = rng.random_range(0..plen);
                    let analytic = grads[net][pidx].as_slice().unwrap()[flat];

                    let probe = |delta: f64| {
                        let mut m = model.clone();
                        m.stores_mut()[net].value_mut(pidx).as_slice_mut().unwrap()[flat] += delta;
                        evaluate_objective(
                            &m, kind, image_opt, pose_opt, &noise, TRAIN_NONE, false, false,
                        )
                        .unwrap()
                        .breakdown
                        .total
                    };
                    let fd = (probe(-2.0 * h) - 8.0 * probe(-h) + 8.0 * probe(h)
                        - probe(2.0 * h))
                        / (12.0 * h);
                    let denom = analytic.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        (analytic - fd).abs() / denom < 1e-4,
                        "{kind:?} net {net} param {pidx}[{flat}]: {analytic} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn frozen_networks_receive_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut model = tiny_model(73);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let image = random_image(&mut rng, &config);
        let noise = SampleNoise::draw(&config, &mut rng);
        // Freeze the mask estimator; train the rest.
        let mut trainable = [true; 7];
        trainable[6] = false;
        let eval = evaluate_objective(
            &model,
            ObjectiveKind::Unsupervised,
            Some(&image),
            None,
            &noise,
            trainable,
            true,
            false,
        )
        .unwrap();
        let grads = eval.grads.unwrap();
        assert!(grads[6].iter().all(|g| g.iter().all(|&v| v == 0.0)));
        // The recognizer is upstream of everything and must receive signal.
        assert!(grads[0].iter().any(|g| g.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn mask_mse_value_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut model = tiny_model(83);
        randomize(&mut model, &mut rng, 0.05);
        let config = model.config.clone();
        let (hs, ws) = config.reduced_size();
        let image = random_image(&mut rng, &config);
        let pose = random_pose(&mut rng, hs, ws, 1.0);
        let gt = ArrayD::from_shape_fn(IxDyn(&[hs, ws]), |_| rng.random_range(0.0..1.0));

        let (value, grads) = mask_mse(&model, &image, &pose, &gt, true).unwrap();
        let grads = grads.unwrap();

        // Value oracle.
        let xstar = reduce_image(&image).unwrap();
        let raw = model
            .mask_estimator
            .estimate(&xstar, &pose.to_dyn().mapv(|v| v as f64));
        let mse: f64 = raw
            .iter()
            .zip(gt.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / (hs * ws) as f64;
        assert!((value - mse).abs() < 1e-12);

        // Gradient spot-check by central differences (minimization sign).
        let h = 1e-6;
        for _ in 0..5 {
            let pidx = rng.random_range(0..model.mask_estimator.store.len());
            let plen = model
                .mask_estimator
                .store
                .get(crate::nets::ParamId(pidx))
                .len();
            let flat = rng.random_range(0..plen);
            let analytic = grads[pidx].as_slice().unwrap()[flat];
            let mut probe = |delta: f64| {
                let mut m = model.clone();
                m.stores_mut()[6].value_mut(pidx).as_slice_mut().unwrap()[flat] += delta;
                mask_mse(&m, &image, &pose, &gt, false).unwrap().0
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!((analytic - fd).abs() / denom < 1e-3, "{analytic} vs {fd}");
        }
    }

    #[test]
    fn kl_terms_are_nonnegative_in_every_breakdown() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        for trial in 0..10 {
            let mut model = tiny_model(100 + trial);
            randomize(&mut model, &mut rng, 0.2);
            let config = model.config.clone();
            let (hs, ws) = config.heatmap_size();
            let image = random_image(&mut rng, &config);
            let pose = random_pose(&mut rng, hs, ws, 0.8);
            let noise = SampleNoise::draw(&config, &mut rng);
            for b in [
                unsupervised_elbo(&model, &image, &noise).unwrap(),
                supervised_elbo(&model, &image, &pose, &noise).unwrap(),
                image_vae_elbo(&model, &image, &pose, &noise.appearance, &noise.scene).unwrap(),
                pose_vae_elbo(&model, &pose, &noise.primitive).unwrap(),
            ] {
                assert!(b.kl_appearance >= 0.0);
                assert!(b.kl_scene >= 0.0);
                assert!(b.kl_primitive >= 0.0);
                assert!(b.is_consistent(1e-6));
                assert!(b.nonfinite_term().is_none());
            }
        }
    }
}
