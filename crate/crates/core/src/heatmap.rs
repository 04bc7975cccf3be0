//! The 16-joint schema and the coordinate ⇄ heatmap codec.
//!
//! A pose is carried through training as a stack of 16 per-joint grids
//! ("heatmaps"). Annotation targets are one-hot: a single cell set to 1 at the
//! rounded joint coordinate. Decoding takes the argmax per channel, so
//! `decode(encode(c))` is the identity on in-bounds integer coordinates.

use crate::error::{Error, Result};
use ndarray::{Array3, ArrayD, IxDyn};

/// Number of joints.
pub const NUM_JOINTS: usize = 16;

/// Joint order used throughout the crate.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "right_ankle",
    "right_knee",
    "right_hip",
    "left_hip",
    "left_knee",
    "left_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "right_wrist",
    "right_elbow",
    "right_shoulder",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
];

/// Index pairs swapped under horizontal mirroring. Joints 6–9 (pelvis,
/// thorax, upper neck, head top) are self-paired.
pub const FLIP_PAIRS: [(usize, usize); 6] = [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)];

/// Bones connecting schema-adjacent joints; used by the synthetic renderer
/// and reconstruction overlays.
pub const BONES: [(usize, usize); 15] = [
    (0, 1),   // right ankle - right knee
    (1, 2),   // right knee - right hip
    (2, 6),   // right hip - pelvis
    (3, 6),   // left hip - pelvis
    (4, 3),   // left knee - left hip
    (5, 4),   // left ankle - left knee
    (6, 7),   // pelvis - thorax
    (7, 8),   // thorax - upper neck
    (8, 9),   // upper neck - head top
    (10, 11), // right wrist - right elbow
    (11, 12), // right elbow - right shoulder
    (12, 7),  // right shoulder - thorax
    (13, 7),  // left shoulder - thorax
    (14, 13), // left elbow - left shoulder
    (15, 14), // left wrist - left elbow
];

/// The joint schema: names plus the horizontal-flip permutation.
#[derive(Debug, Clone)]
pub struct JointSchema {
    pub names: [&'static str; NUM_JOINTS],
    pub flip_pairs: [(usize, usize); 6],
}

impl Default for JointSchema {
    fn default() -> Self {
        JointSchema {
            names: JOINT_NAMES,
            flip_pairs: FLIP_PAIRS,
        }
    }
}

impl JointSchema {
    /// The full 16-element permutation induced by `flip_pairs`.
    pub fn flip_permutation(&self) -> [usize; NUM_JOINTS] {
        let mut perm = [0usize; NUM_JOINTS];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i;
        }
        for &(a, b) in &self.flip_pairs {
            perm[a] = b;
            perm[b] = a;
        }
        perm
    }
}

/// Joint positions in grid units: `(x, y)` pairs plus per-joint visibility.
/// Invisible joints carry no usable coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCoords {
    pub coords: [(f32, f32); NUM_JOINTS],
    pub visibility: [bool; NUM_JOINTS],
}

impl JointCoords {
    pub fn all_visible(coords: [(f32, f32); NUM_JOINTS]) -> Self {
        JointCoords {
            coords,
            visibility: [true; NUM_JOINTS],
        }
    }

    pub fn invisible() -> Self {
        JointCoords {
            coords: [(0.0, 0.0); NUM_JOINTS],
            visibility: [false; NUM_JOINTS],
        }
    }

    pub fn num_visible(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }

    /// Rescales coordinates between pixel frames with aligned pixel centers:
    /// `x' = (x + ½)·factor − ½`. Used to move between heatmap-grid and
    /// image-pixel coordinates (`factor = image/heatmap` or its inverse).
    pub fn rescale(&self, factor: f32) -> JointCoords {
        let mut out = self.clone();
        for (x, y) in out.coords.iter_mut() {
            *x = (*x + 0.5) * factor - 0.5;
            *y = (*y + 0.5) * factor - 0.5;
        }
        out
    }
}

/// Stack of per-joint grids with shape `[16, H, W]`. Targets produced by
/// [`encode_pose`] are one-hot per visible channel and all-zero for invisible
/// joints; recognizer outputs are real-valued.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHeatmaps {
    pub grid: Array3<f32>,
    pub visibility: [bool; NUM_JOINTS],
}

impl PoseHeatmaps {
    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    /// Dynamic-dim copy for the tape.
    pub fn to_dyn(&self) -> ArrayD<f32> {
        self.grid.clone().into_dyn()
    }

    /// Per-cell 0/1 mask that zeroes invisible joints' channels.
    pub fn visibility_mask(&self) -> ArrayD<f32> {
        let (j, h, w) = self.grid.dim();
        let mut mask = ArrayD::zeros(IxDyn(&[j, h, w]));
        for (ji, &vis) in self.visibility.iter().enumerate() {
            if vis {
                mask.index_axis_mut(ndarray::Axis(0), ji).fill(1.0);
            }
        }
        mask
    }
}

/// Rounds half away from zero, the codec's rounding convention.
pub fn round_half_away(v: f32) -> i64 {
    if v >= 0.0 {
        (v + 0.5).floor() as i64
    } else {
        (v - 0.5).ceil() as i64
    }
}

/// Encodes joint coordinates into one-hot heatmaps of size `height`×`width`.
///
/// Visible coordinates must round into bounds; offenders are rejected with a
/// diagnostic naming the joint.
pub fn encode_pose(coords: &JointCoords, height: usize, width: usize) -> Result<PoseHeatmaps> {
    let mut grid = Array3::zeros((NUM_JOINTS, height, width));
    for j in 0..NUM_JOINTS {
        if !coords.visibility[j] {
            continue;
        }
        let (x, y) = coords.coords[j];
        let col = round_half_away(x);
        let row = round_half_away(y);
        if col < 0 || col >= width as i64 || row < 0 || row >= height as i64 {
            return Err(Error::contract(format!(
                "joint `{}` at ({x}, {y}) rounds outside the {width}x{height} grid",
                JOINT_NAMES[j]
            )));
        }
        grid[(j, row as usize, col as usize)] = 1.0;
    }
    Ok(PoseHeatmaps {
        grid,
        visibility: coords.visibility,
    })
}

/// Optional soft-target encoder: a Gaussian blob of standard deviation
/// `sigma` (in grid cells) around each visible joint, peak-normalized to 1.
/// Off by default everywhere; one-hot targets are the reference behavior.
pub fn encode_pose_gaussian(
    coords: &JointCoords,
    height: usize,
    width: usize,
    sigma: f32,
) -> Result<PoseHeatmaps> {
    if sigma <= 0.0 {
        return Err(Error::contract("sigma must be positive"));
    }
    let onehot = encode_pose(coords, height, width)?;
    let mut grid = Array3::zeros((NUM_JOINTS, height, width));
    for j in 0..NUM_JOINTS {
        if !coords.visibility[j] {
            continue;
        }
        let (x, y) = coords.coords[j];
        for r in 0..height {
            for c in 0..width {
                let dx = c as f32 - x;
                let dy = r as f32 - y;
                grid[(j, r, c)] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Ok(PoseHeatmaps {
        grid,
        visibility: onehot.visibility,
    })
}

/// Decodes heatmaps to coordinates by per-channel argmax. Ties break toward
/// the smallest row-major linear index; invisible channels stay invisible.
pub fn decode_pose(heatmaps: &PoseHeatmaps) -> JointCoords {
    let (j_count, height, width) = heatmaps.grid.dim();
    debug_assert_eq!(j_count, NUM_JOINTS);
    let mut coords = [(0.0f32, 0.0f32); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let mut best = f32::NEG_INFINITY;
        let mut best_rc = (0usize, 0usize);
        for r in 0..height {
            for c in 0..width {
                let v = heatmaps.grid[(j, r, c)];
                if v > best {
                    best = v;
                    best_rc = (r, c);
                }
            }
        }
        coords[j] = (best_rc.1 as f32, best_rc.0 as f32);
    }
    JointCoords {
        coords,
        visibility: heatmaps.visibility,
    }
}

/// Horizontal flip: `x ↦ (width − 1) − x` plus the left/right joint
/// relabeling from [`FLIP_PAIRS`]. An involution.
pub fn flip_pose(coords: &JointCoords, width: usize) -> JointCoords {
    let perm = JointSchema::default().flip_permutation();
    let mut out = JointCoords::invisible();
    for j in 0..NUM_JOINTS {
        let src = perm[j];
        let (x, y) = coords.coords[src];
        out.coords[j] = ((width as f32 - 1.0) - x, y);
        out.visibility[j] = coords.visibility[src];
    }
    out
}

/// Heatmap-space flip: reverses columns and permutes channels. Matches
/// `encode_pose ∘ flip_pose` on encoded poses.
pub fn flip_heatmaps(heatmaps: &PoseHeatmaps) -> PoseHeatmaps {
    let perm = JointSchema::default().flip_permutation();
    let (_, height, width) = heatmaps.grid.dim();
    let mut grid = Array3::zeros((NUM_JOINTS, height, width));
    let mut visibility = [false; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let src = perm[j];
        visibility[j] = heatmaps.visibility[src];
        for r in 0..height {
            for c in 0..width {
                grid[(j, r, c)] = heatmaps.grid[(src, r, width - 1 - c)];
            }
        }
    }
    PoseHeatmaps { grid, visibility }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schema_matches_expected_order() {
        let schema = JointSchema::default();
        assert_eq!(schema.names[0], "right_ankle");
        assert_eq!(schema.names[6], "pelvis");
        assert_eq!(schema.names[9], "head_top");
        assert_eq!(schema.names[15], "left_wrist");
        let perm = schema.flip_permutation();
        for j in 6..=9 {
            assert_eq!(perm[j], j, "joints 6-9 are self-paired");
        }
        assert_eq!(perm[0], 5);
        assert_eq!(perm[12], 13);
    }

    #[test]
    fn encode_basics() {
        let mut c = JointCoords::invisible();
        c.coords[0] = (10.0, 20.0);
        c.visibility[0] = true;
        let hm = encode_pose(&c, 64, 64).unwrap();
        assert_eq!(hm.grid[(0, 20, 10)], 1.0);
        assert_eq!(hm.grid.sum(), 1.0);

        let empty = encode_pose(&JointCoords::invisible(), 64, 64).unwrap();
        assert_eq!(empty.grid.shape(), &[16, 64, 64]);
        assert_eq!(empty.grid.sum(), 0.0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // Boundary-coordinate table checked against round-half-away-from-zero.
        let table = [
            (63.4f32, 0.6f32, 63i64, 1i64),
            (0.5, 0.5, 1, 1),
            (0.49, 1.5, 0, 2),
            (62.5, 62.49, 63, 62),
            (0.0, 63.0, 0, 63),
        ];
        for &(x, y, col, row) in &table {
            assert_eq!(round_half_away(x), col, "x={x}");
            assert_eq!(round_half_away(y), row, "y={y}");
            let mut c = JointCoords::invisible();
            c.coords[3] = (x, y);
            c.visibility[3] = true;
            let hm = encode_pose(&c, 64, 64).unwrap();
            assert_eq!(hm.grid[(3, row as usize, col as usize)], 1.0);
        }
        assert_eq!(round_half_away(-0.5), -1);
        assert_eq!(round_half_away(-0.4), 0);
    }

    #[test]
    fn out_of_bounds_visible_coordinate_names_joint() {
        let mut c = JointCoords::invisible();
        c.coords[4] = (63.6, 10.0); // rounds to 64
        c.visibility[4] = true;
        let err = encode_pose(&c, 64, 64).unwrap_err();
        assert!(err.to_string().contains("left_knee"), "{err}");
    }

    #[test]
    fn decode_tie_break_and_bump() {
        let uniform = PoseHeatmaps {
            grid: Array3::from_elem((16, 8, 8), 0.25),
            visibility: [true; 16],
        };
        let c = decode_pose(&uniform);
        assert_eq!(c.coords[7], (0.0, 0.0));

        // A smooth bump centered at (x=30, y=40) decodes to its center;
        // checked against an exhaustive argmax oracle.
        let mut grid = Array3::zeros((16, 64, 64));
        for r in 0..64 {
            for c in 0..64 {
                let dx = c as f32 - 30.0;
                let dy = r as f32 - 40.0;
                grid[(2, r, c)] = (-(dx * dx + dy * dy) / 18.0).exp();
            }
        }
        let hm = PoseHeatmaps {
            grid: grid.clone(),
            visibility: [true; 16],
        };
        let decoded = decode_pose(&hm);
        assert_eq!(decoded.coords[2], (30.0, 40.0));

        let mut best = f32::NEG_INFINITY;
        let mut arg = (0, 0);
        for r in 0..64 {
            for c in 0..64 {
                if grid[(2, r, c)] > best {
                    best = grid[(2, r, c)];
                    arg = (c, r);
                }
            }
        }
        assert_eq!(
            (decoded.coords[2].0 as usize, decoded.coords[2].1 as usize),
            arg
        );
    }

    #[test]
    fn exhaustive_roundtrip_64x64_all_joints() {
        // decode(encode(·)) is the identity for every integer cell and joint.
        for j in 0..NUM_JOINTS {
            for r in 0..64 {
                for c in 0..64 {
                    let mut coords = JointCoords::invisible();
                    coords.coords[j] = (c as f32, r as f32);
                    coords.visibility[j] = true;
                    let decoded = decode_pose(&encode_pose(&coords, 64, 64).unwrap());
                    assert_eq!(decoded.coords[j], (c as f32, r as f32));
                    assert!(decoded.visibility[j]);
                }
            }
        }
    }

    #[test]
    fn flip_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut c = JointCoords::invisible();
            for j in 0..NUM_JOINTS {
                c.coords[j] = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                c.visibility[j] = rng.random_bool(0.9);
            }
            let back = flip_pose(&flip_pose(&c, 64), 64);
            for j in 0..NUM_JOINTS {
                assert_eq!(back.visibility[j], c.visibility[j]);
                if c.visibility[j] {
                    assert!((back.coords[j].0 - c.coords[j].0).abs() < 1e-5);
                    assert!((back.coords[j].1 - c.coords[j].1).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn flip_moves_right_ankle_to_left() {
        let mut c = JointCoords::invisible();
        c.coords[0] = (10.0, 50.0);
        c.visibility[0] = true;
        let flipped = flip_pose(&c, 64);
        assert!(flipped.visibility[5]);
        assert!(!flipped.visibility[0]);
        assert_eq!(flipped.coords[5], (53.0, 50.0));
    }

    #[test]
    fn symmetric_pose_is_fixed_by_flip() {
        // A pose mirror-symmetric about the vertical midline, with left/right
        // labels swapped, is geometrically unchanged by flip_pose.
        let w = 64usize;
        let mid = (w as f32 - 1.0) / 2.0;
        let mut c = JointCoords::invisible();
        for j in 0..NUM_JOINTS {
            c.visibility[j] = true;
            c.coords[j] = (mid, 10.0 + j as f32);
        }
        for &(a, b) in &FLIP_PAIRS {
            c.coords[a] = (mid - 5.0, 20.0 + a as f32);
            c.coords[b] = (mid + 5.0, 20.0 + a as f32);
        }
        let flipped = flip_pose(&c, w);
        for j in 0..NUM_JOINTS {
            assert!((flipped.coords[j].0 - c.coords[j].0).abs() < 1e-4, "joint {j}");
            assert!((flipped.coords[j].1 - c.coords[j].1).abs() < 1e-4, "joint {j}");
        }
    }

    #[test]
    fn encode_flip_commutes_with_heatmap_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut c = JointCoords::invisible();
            for j in 0..NUM_JOINTS {
                c.coords[j] = (
                    rng.random_range(0..64) as f32,
                    rng.random_range(0..64) as f32,
                );
                c.visibility[j] = rng.random_bool(0.8);
            }
            let a = encode_pose(&flip_pose(&c, 64), 64, 64).unwrap();
            let b = flip_heatmaps(&encode_pose(&c, 64, 64).unwrap());
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.visibility, b.visibility);
        }
    }

    #[test]
    fn visible_channel_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let mut c = JointCoords::invisible();
            for j in 0..NUM_JOINTS {
                c.coords[j] = (rng.random_range(0.0..63.49), rng.random_range(0.0..63.49));
                c.visibility[j] = rng.random_bool(0.7);
            }
            let hm = encode_pose(&c, 64, 64).unwrap();
            for j in 0..NUM_JOINTS {
                let s: f32 = hm.grid.index_axis(ndarray::Axis(0), j).sum();
                assert_eq!(s, if c.visibility[j] { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rescale_roundtrips_between_frames() {
        let mut c = JointCoords::invisible();
        c.coords[0] = (13.0, 7.0);
        c.visibility[0] = true;
        let img = c.rescale(4.0);
        assert_eq!(img.coords[0], (13.5 * 4.0 - 0.5, 7.5 * 4.0 - 0.5));
        let back = img.rescale(0.25);
        assert!((back.coords[0].0 - 13.0).abs() < 1e-5);
        assert!((back.coords[0].1 - 7.0).abs() < 1e-5);
    }

    #[test]
    fn gaussian_blob_encoder_peaks_at_joint() {
        let mut c = JointCoords::invisible();
        c.coords[8] = (12.0, 9.0);
        c.visibility[8] = true;
        let hm = encode_pose_gaussian(&c, 16, 16, 1.5).unwrap();
        let decoded = decode_pose(&hm);
        assert_eq!(decoded.coords[8], (12.0, 9.0));
        assert_eq!(hm.grid[(8, 9, 12)], 1.0);
    }
}
