//! Foreground/background disentanglement: image reduction, mask sharpening,
//! and the split that feeds the appearance and scene encoders.
//!
//! The reduced image `x*` is the full image area-downsampled to the heatmap
//! grid. The mask estimator's raw output lives in `(0, 1)`; it is recentered
//! by −0.5 (so the sharpening sigmoid's zero crossing sits at the decision
//! boundary) and pushed through a slope-10 sigmoid. Then
//! `fg = x* ⊙ w` and `bg = x* − fg`, which makes `fg + bg = x*` exact.
//!
//! Whether the sharpening applies to a (0,1) output or to a logit is an
//! interpretation; it is isolated in [`build_masked_pair`] so it can be
//! swapped.

use crate::error::{Error, Result};
use crate::graph::{Graph, Scalar, Var};
use crate::heatmap::PoseHeatmaps;
use crate::nets::{Binder, Model};
use ndarray::ArrayD;

/// Slope of the sharpening sigmoid `ς(x) = (1 + exp(−10x))⁻¹`.
pub const SHARPEN_SLOPE: f64 = 10.0;

/// Downsampling factor between the full image and the reduced image.
pub const REDUCE_FACTOR: usize = 4;

/// Elementwise sharpening sigmoid with slope 10; output strictly in (0, 1).
pub fn sharpen_mask<F: Scalar>(raw: &ArrayD<F>) -> ArrayD<F> {
    let slope = F::from_f64(SHARPEN_SLOPE);
    raw.mapv(|x| {
        let z = x * slope;
        if z >= F::zero() {
            F::one() / (F::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (F::one() + e)
        }
    })
}

/// Area-downsamples a `[C, H, W]` image by [`REDUCE_FACTOR`].
pub fn reduce_image<F: Scalar>(image: &ArrayD<F>) -> Result<ArrayD<F>> {
    if image.ndim() != 3 {
        return Err(Error::contract("reduce_image: expected [C,H,W]"));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % REDUCE_FACTOR != 0 || w % REDUCE_FACTOR != 0 {
        return Err(Error::contract(
            "reduce_image: dimensions not divisible by the reduction factor",
        ));
    }
    let g = Graph::new();
    let v = g.avg_pool(g.constant(image.clone()), REDUCE_FACTOR);
    let reduced = g.value(v).to_owned();
    Ok(reduced)
}

/// The split as seen by the encoders, with `fg + bg = x*` by construction.
#[derive(Debug, Clone)]
pub struct MaskedPair<F: Scalar> {
    pub foreground: ArrayD<F>,
    pub background: ArrayD<F>,
    pub mask: ArrayD<F>,
}

/// Tape nodes of the masking subgraph.
pub struct MaskedVars {
    pub reduced: Var,
    pub mask: Var,
    pub foreground: Var,
    pub background: Var,
}

/// Builds the masking subgraph: reduce, estimate, recenter, sharpen, split.
pub fn build_masked_pair<F: Scalar>(
    bind_mask: &mut Binder<'_, F>,
    image: Var,
    pose: Var,
    model: &Model<F>,
) -> MaskedVars {
    let g = bind_mask.graph();
    let reduced = g.avg_pool(image, REDUCE_FACTOR);
    let raw = model.mask_estimator.forward(bind_mask, reduced, pose);
    let recentered = g.add_scalar(raw, F::from_f64(-0.5));
    let mask = g.sigmoid(g.scale(recentered, F::from_f64(SHARPEN_SLOPE)));
    let foreground = g.mul_spatial(reduced, mask);
    let background = g.sub(reduced, foreground);
    MaskedVars {
        reduced,
        mask,
        foreground,
        background,
    }
}

/// Plain evaluation of the split for a full-size image and its pose.
pub fn split_foreground_background<F: Scalar>(
    image: &ArrayD<F>,
    pose: &PoseHeatmaps,
    model: &Model<F>,
) -> Result<MaskedPair<F>> {
    if image.shape() != model.config.image_shape() {
        return Err(Error::contract(format!(
            "split: image shape {:?}, expected {:?}",
            image.shape(),
            model.config.image_shape()
        )));
    }
    let (hs, ws) = model.config.heatmap_size();
    if (pose.height(), pose.width()) != (hs, ws) {
        return Err(Error::contract("split: pose grid does not match config"));
    }
    let g = Graph::new();
    let image_var = g.constant(image.clone());
    let pose_var = g.constant(pose.to_dyn().mapv(|v| F::from_f64(v as f64)));
    let mut bind = Binder::frozen(&g, &model.mask_estimator.store);
    let vars = build_masked_pair(&mut bind, image_var, pose_var, model);
    let pair = MaskedPair {
        foreground: g.value(vars.foreground).to_owned(),
        background: g.value(vars.background).to_owned(),
        mask: g.value(vars.mask).to_owned(),
    };
    Ok(pair)
}
