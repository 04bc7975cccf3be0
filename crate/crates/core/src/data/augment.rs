//! Training-time augmentation: random scaling, rotation, and horizontal
//! flipping, applied identically to the image, the mask, the joint
//! coordinates, and the bounding boxes.

use super::Sample;
use crate::heatmap::{flip_pose, JointCoords, NUM_JOINTS};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f32,
    /// Rotation in radians about the image center.
    pub rotation: f32,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            rotation: 0.0,
            flip: false,
        }
    }
}

/// Scale in `[0.75, 1.25]`, rotation in `[−30°, +30°]`, flip with p = ½
/// (the conventional keypoint-training ranges).
pub fn draw_augment_params(rng: &mut ChaCha8Rng) -> AugmentParams {
    AugmentParams {
        scale: rng.random_range(0.75..=1.25),
        rotation: rng.random_range(-30.0f32.to_radians()..=30.0f32.to_radians()),
        flip: rng.random_bool(0.5),
    }
}

pub fn augment_sample(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    apply_augment(sample, &draw_augment_params(rng))
}

/// Applies a fixed augmentation. Joints leaving the frame are marked
/// invisible; the image is resampled bilinearly with border clamping and the
/// mask with nearest-neighbor. Bounding boxes become the axis-aligned
/// envelope of the transformed box.
pub fn apply_augment(sample: &Sample, params: &AugmentParams) -> Sample {
    let (_, h, w) = sample.image.dim();
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let (sin, cos) = params.rotation.sin_cos();
    let s = params.scale;

    // Forward map: p' = R S (p - c) + c after the optional flip.
    let fwd = |x: f32, y: f32| -> (f32, f32) {
        let (dx, dy) = (x - cx, y - cy);
        (
            cx + s * (cos * dx - sin * dy),
            cy + s * (sin * dx + cos * dy),
        )
    };
    // Inverse map for resampling: p = Sᵀ-scaled reverse rotation.
    let inv = |x: f32, y: f32| -> (f32, f32) {
        let (dx, dy) = ((x - cx) / s, (y - cy) / s);
        (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
    };

    let flip_x = |x: f32| (w as f32 - 1.0) - x;

    let mut image = Array3::zeros(sample.image.dim());
    for y in 0..h {
        for x in 0..w {
            let xq = if params.flip { flip_x(x as f32) } else { x as f32 };
            let (sx, sy) = inv(xq, y as f32);
            for c in 0..3 {
                image[(c, y, x)] = bilinear(&sample.image, c, sx, sy);
            }
        }
    }

    let mask = sample.mask.as_ref().map(|m| {
        let mut out = Array2::zeros(m.dim());
        for y in 0..h {
            for x in 0..w {
                let xq = if params.flip { flip_x(x as f32) } else { x as f32 };
                let (sx, sy) = inv(xq, y as f32);
                let nx = sx.round().clamp(0.0, w as f32 - 1.0) as usize;
                let ny = sy.round().clamp(0.0, h as f32 - 1.0) as usize;
                out[(y, x)] = if m[(ny, nx)] > 0.5 { 1.0 } else { 0.0 };
            }
        }
        out
    });

    let pose = sample.pose.as_ref().map(|p| {
        let base: JointCoords = if params.flip { flip_pose(p, w) } else { p.clone() };
        let mut out = base.clone();
        for j in 0..NUM_JOINTS {
            if !base.visibility[j] {
                continue;
            }
            let (x, y) = base.coords[j];
            let (nx, ny) = fwd(x, y);
            out.coords[j] = (nx, ny);
            if nx < 0.0 || ny < 0.0 || nx > w as f32 - 1.0 || ny > h as f32 - 1.0 {
                out.visibility[j] = false;
            }
        }
        out
    });

    let envelope = |(bh, bw): (f32, f32)| -> (f32, f32) {
        (
            s * (bh * cos.abs() + bw * sin.abs()),
            s * (bw * cos.abs() + bh * sin.abs()),
        )
    };

    Sample {
        image,
        pose,
        mask,
        person_bbox: envelope(sample.person_bbox),
        head_bbox: sample.head_bbox.map(envelope),
        annotated: sample.annotated,
    }
}

fn bilinear(image: &Array3<f32>, c: usize, x: f32, y: f32) -> f32 {
    let (_, h, w) = image.dim();
    let xc = x.clamp(0.0, w as f32 - 1.0);
    let yc = y.clamp(0.0, h as f32 - 1.0);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f32;
    let fy = yc - y0 as f32;
    image[(c, y0, x0)] * (1.0 - fx) * (1.0 - fy)
        + image[(c, y0, x1)] * fx * (1.0 - fy)
        + image[(c, y1, x0)] * (1.0 - fx) * fy
        + image[(c, y1, x1)] * fx * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_sample, SynthConfig};
    use crate::heatmap::{decode_pose, encode_pose};
    use rand::SeedableRng;

    fn sample() -> Sample {
        generate_synthetic_sample(11, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn identity_params_change_nothing() {
        let s = sample();
        let out = apply_augment(&s, &AugmentParams::identity());
        let max_err = out
            .image
            .iter()
            .zip(s.image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-6);
        let (a, b) = (out.pose.as_ref().unwrap(), s.pose.as_ref().unwrap());
        assert_eq!(a.visibility, b.visibility);
        for j in 0..NUM_JOINTS {
            assert!((a.coords[j].0 - b.coords[j].0).abs() < 1e-4);
            assert!((a.coords[j].1 - b.coords[j].1).abs() < 1e-4);
        }
        assert_eq!(out.mask, s.mask);
        assert_eq!(out.person_bbox, s.person_bbox);
    }

    #[test]
    fn pure_flip_matches_flip_pose() {
        let s = sample();
        let params = AugmentParams {
            scale: 1.0,
            rotation: 0.0,
            flip: true,
        };
        let out = apply_augment(&s, &params);
        let expected = flip_pose(s.pose.as_ref().unwrap(), 64);
        let got = out.pose.as_ref().unwrap();
        for j in 0..NUM_JOINTS {
            assert!((got.coords[j].0 - expected.coords[j].0).abs() < 1e-4);
            assert!((got.coords[j].1 - expected.coords[j].1).abs() < 1e-4);
        }
    }

    #[test]
    fn center_is_a_rotation_fixed_point() {
        let s = sample();
        let params = AugmentParams {
            scale: 1.0,
            rotation: std::f32::consts::FRAC_PI_2,
            flip: false,
        };
        let mut with_center = s.clone();
        let center = ((64.0 - 1.0) / 2.0, (64.0 - 1.0) / 2.0);
        with_center.pose.as_mut().unwrap().coords[0] = center;
        let out = apply_augment(&with_center, &params);
        let got = out.pose.as_ref().unwrap().coords[0];
        assert!((got.0 - center.0).abs() < 1e-4);
        assert!((got.1 - center.1).abs() < 1e-4);
    }

    #[test]
    fn out_of_frame_joints_become_invisible() {
        let s = sample();
        let params = AugmentParams {
            scale: 1.6,
            rotation: 0.5,
            flip: false,
        };
        // A large zoom pushes extremities out; they must be flagged, never
        // clamped.
        let out = apply_augment(&s, &params);
        let pose = out.pose.as_ref().unwrap();
        for j in 0..NUM_JOINTS {
            if pose.visibility[j] {
                let (x, y) = pose.coords[j];
                assert!(x >= 0.0 && x <= 63.0 && y >= 0.0 && y <= 63.0);
            }
        }
    }

    #[test]
    fn augmentation_commutes_with_encoding_statistically() {
        // encode(transform(coords)) vs warp(encode(coords)): argmaxes agree
        // within 1 px for nearly all joints.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut total = 0usize;
        let mut close = 0usize;
        for seed in 0..20u64 {
            let s = generate_synthetic_sample(seed, &SynthConfig::default()).unwrap();
            let params = draw_augment_params(&mut rng);
            let out = apply_augment(&s, &params);
            let direct = out.pose.as_ref().unwrap();
            let direct_hm = encode_pose(&direct.rescale(0.25), 16, 16);
            let Ok(direct_hm) = direct_hm else { continue };

            // Warp the pre-augmentation heatmap through the same affine by
            // transforming each one-hot argmax coordinate.
            let pre = s.pose.as_ref().unwrap().rescale(0.25);
            let pre_hm = encode_pose(&pre, 16, 16).unwrap();
            let decoded = decode_pose(&pre_hm);
            // back to image frame, transform, then to heatmap frame
            let img_coords = decoded.rescale(4.0);
            let mut carrier = s.clone();
            carrier.pose = Some(img_coords);
            let warped = apply_augment(&carrier, &params);
            let warped_hm = encode_pose(&warped.pose.as_ref().unwrap().rescale(0.25), 16, 16);
            let Ok(warped_hm) = warped_hm else { continue };
            let a = decode_pose(&direct_hm);
            let b = decode_pose(&warped_hm);
            for j in 0..NUM_JOINTS {
                if a.visibility[j] && b.visibility[j] {
                    total += 1;
                    let d = ((a.coords[j].0 - b.coords[j].0).powi(2)
                        + (a.coords[j].1 - b.coords[j].1).powi(2))
                    .sqrt();
                    if d <= 1.0 + 1e-6 {
                        close += 1;
                    }
                }
            }
        }
        assert!(total > 100, "not enough comparable joints: {total}");
        let frac = close as f64 / total as f64;
        assert!(frac >= 0.95, "only {frac:.3} of joints within 1 px");
    }

    #[test]
    fn draw_is_within_documented_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut saw_flip = false;
        let mut saw_noflip = false;
        for _ in 0..200 {
            let p = draw_augment_params(&mut rng);
            assert!((0.75..=1.25).contains(&p.scale));
            assert!(p.rotation.abs() <= 30.0f32.to_radians() + 1e-6);
            saw_flip |= p.flip;
            saw_noflip |= !p.flip;
        }
        assert!(saw_flip && saw_noflip);
    }
}
