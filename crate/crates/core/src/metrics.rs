//! Keypoint accuracy: PCK (person-box normalized) and PCKh (head-segment
//! normalized), plus table-style aggregation.
//!
//! Both predictions and ground truth must live in the same pixel frame;
//! recognizer outputs decoded in heatmap cells are rescaled to image pixels
//! (factor `image_size / heatmap_size`, pixel centers aligned) before any
//! metric is computed, since bounding boxes are given in image pixels.

use crate::error::{Error, Result};
use crate::heatmap::{JointCoords, JOINT_NAMES, NUM_JOINTS};
use serde::{Deserialize, Serialize};

/// Per-joint outcome of one pose: `None` where the ground-truth joint is
/// invisible (excluded from every tally).
pub type JointOutcomes = [Option<bool>; NUM_JOINTS];

/// A joint is correct iff its Euclidean distance to the ground truth is
/// within (inclusive) `tau * max(h, w)` of the person bounding box.
pub fn pck(
    pred: &JointCoords,
    gt: &JointCoords,
    person_hw: (f32, f32),
    tau: f32,
) -> Result<JointOutcomes> {
    let (h, w) = person_hw;
    if !(h > 0.0 && w > 0.0) {
        return Err(Error::contract("person bbox dimensions must be positive"));
    }
    if tau <= 0.0 {
        return Err(Error::contract("tau must be positive"));
    }
    Ok(threshold_outcomes(pred, gt, tau * h.max(w)))
}

/// PCKh: the reference length is 60% of the diagonal of the ground-truth
/// head bounding box; a joint is correct iff its distance is within
/// (inclusive) `tau * l`.
pub fn pckh(
    pred: &JointCoords,
    gt: &JointCoords,
    head_hw: (f32, f32),
    tau: f32,
) -> Result<JointOutcomes> {
    let (h, w) = head_hw;
    if !(h > 0.0 && w > 0.0) {
        return Err(Error::contract("head bbox dimensions must be positive"));
    }
    if tau < 0.0 {
        return Err(Error::contract("tau must be nonnegative"));
    }
    let l = 0.6 * (h * h + w * w).sqrt();
    Ok(threshold_outcomes(pred, gt, tau * l))
}

fn threshold_outcomes(pred: &JointCoords, gt: &JointCoords, threshold: f32) -> JointOutcomes {
    let mut out = [None; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        if !gt.visibility[j] {
            continue;
        }
        let (px, py) = pred.coords[j];
        let (gx, gy) = gt.coords[j];
        let dist = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
        out[j] = Some(dist <= threshold);
    }
    out
}

/// Joint groups matching the usual table columns. Pelvis and thorax belong
/// to no group but still count toward the joint-average total.
pub const DEFAULT_GROUPS: [(&str, [usize; 2]); 7] = [
    ("Head", [8, 9]),
    ("Shoulder", [12, 13]),
    ("Elbow", [11, 14]),
    ("Wrist", [10, 15]),
    ("Hip", [2, 3]),
    ("Knee", [1, 4]),
    ("Ankle", [0, 5]),
];

/// Aggregated accuracy over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    /// Fraction correct per joint (0 where nothing was evaluated).
    pub per_joint_pck: [f64; NUM_JOINTS],
    /// Evaluated count per joint.
    pub n_evaluated: [u64; NUM_JOINTS],
    /// Mean over all evaluated joints (visibility-weighted).
    pub total: f64,
    /// Grouped columns: mean of the member joints' fractions.
    pub groups: Vec<(String, f64)>,
    /// Mean of the group columns. Whether published totals average joints or
    /// groups is convention-dependent, so both are reported.
    pub total_group_mean: f64,
}

/// Tallies per-pose outcomes into per-joint fractions and grouped columns.
pub fn aggregate<I>(outcomes: I, groups: &[(&str, [usize; 2])]) -> Result<EvalResult>
where
    I: IntoIterator<Item = JointOutcomes>,
{
    let mut correct = [0u64; NUM_JOINTS];
    let mut evaluated = [0u64; NUM_JOINTS];
    let mut any = false;
    for pose in outcomes {
        any = true;
        for (j, outcome) in pose.iter().enumerate() {
            if let Some(ok) = outcome {
                evaluated[j] += 1;
                if *ok {
                    correct[j] += 1;
                }
            }
        }
    }
    if !any {
        return Err(Error::contract("aggregate: empty result stream"));
    }

    let mut per_joint = [0.0f64; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        if evaluated[j] > 0 {
            per_joint[j] = correct[j] as f64 / evaluated[j] as f64;
        }
    }
    let total_correct: u64 = correct.iter().sum();
    let total_evaluated: u64 = evaluated.iter().sum();
    let total = if total_evaluated > 0 {
        total_correct as f64 / total_evaluated as f64
    } else {
        0.0
    };

    let mut group_cols = Vec::with_capacity(groups.len());
    for &(name, members) in groups {
        let vals: Vec<f64> = members
            .iter()
            .filter(|&&j| evaluated[j] > 0)
            .map(|&j| per_joint[j])
            .collect();
        let mean = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        group_cols.push((name.to_string(), mean));
    }
    let total_group_mean = if group_cols.is_empty() {
        0.0
    } else {
        group_cols.iter().map(|(_, v)| v).sum::<f64>() / group_cols.len() as f64
    };

    Ok(EvalResult {
        per_joint_pck: per_joint,
        n_evaluated: evaluated,
        total,
        groups: group_cols,
        total_group_mean,
    })
}

impl EvalResult {
    /// Elementwise mean of several results (used for last-window averaging).
    pub fn mean_of(results: &[EvalResult]) -> Result<EvalResult> {
        if results.is_empty() {
            return Err(Error::contract("mean_of: empty result list"));
        }
        let n = results.len() as f64;
        let mut out = results[0].clone();
        for j in 0..NUM_JOINTS {
            out.per_joint_pck[j] = results.iter().map(|r| r.per_joint_pck[j]).sum::<f64>() / n;
        }
        out.total = results.iter().map(|r| r.total).sum::<f64>() / n;
        out.total_group_mean = results.iter().map(|r| r.total_group_mean).sum::<f64>() / n;
        for (gi, col) in out.groups.iter_mut().enumerate() {
            col.1 = results.iter().map(|r| r.groups[gi].1).sum::<f64>() / n;
        }
        Ok(out)
    }

    /// Table row with the usual column layout: Head Shoulder Elbow Wrist Hip
    /// Knee Ankle Total (percentages).
    pub fn format_table(&self, label: &str) -> String {
        let mut header = format!("{:<28}", "");
        let mut row = format!("{label:<28}");
        for (name, v) in &self.groups {
            header.push_str(&format!("{name:>9}"));
            row.push_str(&format!("{:>9.2}", v * 100.0));
        }
        header.push_str(&format!("{:>9}", "Total"));
        row.push_str(&format!("{:>9.2}", self.total * 100.0));
        format!("{header}\n{row}")
    }

    /// One table row without the header.
    pub fn format_row(&self, label: &str) -> String {
        let mut row = format!("{label:<28}");
        for (_, v) in &self.groups {
            row.push_str(&format!("{:>9.2}", v * 100.0));
        }
        row.push_str(&format!("{:>9.2}", self.total * 100.0));
        row
    }

    pub fn per_joint_named(&self) -> Vec<(String, f64)> {
        JOINT_NAMES
            .iter()
            .zip(self.per_joint_pck.iter())
            .map(|(n, v)| (n.to_string(), *v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pose_at(offsets: &[(f32, f32)]) -> (JointCoords, JointCoords) {
        let mut gt = JointCoords::invisible();
        let mut pred = JointCoords::invisible();
        for j in 0..NUM_JOINTS {
            gt.coords[j] = (10.0 * j as f32, 5.0 * j as f32);
            gt.visibility[j] = true;
            let (dx, dy) = offsets[j % offsets.len()];
            pred.coords[j] = (gt.coords[j].0 + dx, gt.coords[j].1 + dy);
            pred.visibility[j] = true;
        }
        (gt, pred)
    }

    #[test]
    fn exact_predictions_are_all_correct() {
        let (gt, _) = pose_at(&[(0.0, 0.0)]);
        let out = pck(&gt, &gt, (100.0, 50.0), 0.2).unwrap();
        assert!(out.iter().all(|o| *o == Some(true)));
        let out = pckh(&gt, &gt, (30.0, 40.0), 0.5).unwrap();
        assert!(out.iter().all(|o| *o == Some(true)));
    }

    #[test]
    fn pck_threshold_is_inclusive_and_hand_checked() {
        // h=100, w=50, tau=0.2 -> threshold 20.
        // offset (12, 16): distance exactly 20 -> correct (inclusive).
        // offset (15, 16): distance ~21.93 -> incorrect.
        let (gt, _) = pose_at(&[(0.0, 0.0)]);
        let mut pred = gt.clone();
        pred.coords[3] = (gt.coords[3].0 + 12.0, gt.coords[3].1 + 16.0);
        pred.coords[4] = (gt.coords[4].0 + 15.0, gt.coords[4].1 + 16.0);
        let out = pck(&pred, &gt, (100.0, 50.0), 0.2).unwrap();
        assert_eq!(out[3], Some(true));
        assert_eq!(out[4], Some(false));
    }

    #[test]
    fn pckh_head_diagonal_definition() {
        // head bbox 30x40 -> diag 50 -> l = 30 -> threshold 15 at tau = 0.5.
        // offset (9, 12) -> distance 15 -> correct (inclusive boundary).
        let (gt, _) = pose_at(&[(0.0, 0.0)]);
        let mut pred = gt.clone();
        pred.coords[0] = (gt.coords[0].0 + 9.0, gt.coords[0].1 + 12.0);
        pred.coords[1] = (gt.coords[1].0 + 9.1, gt.coords[1].1 + 12.0);
        let out = pckh(&pred, &gt, (30.0, 40.0), 0.5).unwrap();
        assert_eq!(out[0], Some(true));
        assert_eq!(out[1], Some(false));
    }

    #[test]
    fn pckh_tau_zero_accepts_only_exact() {
        let (gt, _) = pose_at(&[(0.0, 0.0)]);
        let mut pred = gt.clone();
        pred.coords[2].0 += 1e-3;
        let out = pckh(&pred, &gt, (30.0, 40.0), 0.0).unwrap();
        assert_eq!(out[2], Some(false));
        assert_eq!(out[0], Some(true));
    }

    #[test]
    fn invisible_joints_are_excluded() {
        let (mut gt, pred) = pose_at(&[(0.0, 0.0)]);
        gt.visibility[5] = false;
        let out = pck(&pred, &gt, (64.0, 64.0), 0.2).unwrap();
        assert_eq!(out[5], None);
    }

    #[test]
    fn contract_violations() {
        let (gt, pred) = pose_at(&[(0.0, 0.0)]);
        assert!(pck(&pred, &gt, (0.0, 10.0), 0.2).is_err());
        assert!(pck(&pred, &gt, (10.0, 10.0), 0.0).is_err());
        assert!(pckh(&pred, &gt, (10.0, -1.0), 0.5).is_err());
        assert!(aggregate(std::iter::empty(), &DEFAULT_GROUPS).is_err());
    }

    #[test]
    fn monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let mut gt = JointCoords::invisible();
            let mut pred = JointCoords::invisible();
            for j in 0..NUM_JOINTS {
                gt.coords[j] = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                gt.visibility[j] = true;
                pred.coords[j] = (
                    gt.coords[j].0 + rng.random_range(-20.0..20.0),
                    gt.coords[j].1 + rng.random_range(-20.0..20.0),
                );
            }
            let mut previous = 0usize;
            for tau in [0.05, 0.1, 0.2, 0.4, 0.8] {
                let out = pck(&pred, &gt, (50.0, 40.0), tau).unwrap();
                let n = out.iter().filter(|o| **o == Some(true)).count();
                assert!(n >= previous, "correct set must grow with tau");
                previous = n;
            }
        }
    }

    #[test]
    fn scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..30 {
            let mut gt = JointCoords::invisible();
            let mut pred = JointCoords::invisible();
            for j in 0..NUM_JOINTS {
                gt.coords[j] = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                gt.visibility[j] = true;
                pred.coords[j] = (
                    gt.coords[j].0 + rng.random_range(-15.0..15.0),
                    gt.coords[j].1 + rng.random_range(-15.0..15.0),
                );
            }
            let scale = rng.random_range(0.5..3.0);
            let scale_coords = |c: &JointCoords| {
                let mut s = c.clone();
                for xy in s.coords.iter_mut() {
                    xy.0 *= scale;
                    xy.1 *= scale;
                }
                s
            };
            let a = pck(&pred, &gt, (50.0, 40.0), 0.2).unwrap();
            let b = pck(
                &scale_coords(&pred),
                &scale_coords(&gt),
                (50.0 * scale, 40.0 * scale),
                0.2,
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn aggregate_cases_match_counting_oracle() {
        // all-correct stream -> all 1.0
        let all = vec![[Some(true); NUM_JOINTS]; 10];
        let r = aggregate(all, &DEFAULT_GROUPS).unwrap();
        assert_eq!(r.total, 1.0);
        assert!(r.per_joint_pck.iter().all(|&v| v == 1.0));
        assert_eq!(r.total_group_mean, 1.0);

        // alternating correct / incorrect -> 0.5 everywhere
        let alternating: Vec<JointOutcomes> =
            (0..10).map(|i| [Some(i % 2 == 0); NUM_JOINTS]).collect();
        let r = aggregate(alternating, &DEFAULT_GROUPS).unwrap();
        assert!(r.per_joint_pck.iter().all(|&v| v == 0.5));
        assert_eq!(r.total, 0.5);

        // random stream matches a brute-force tally
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let stream: Vec<JointOutcomes> = (0..200)
            .map(|_| {
                let mut o = [None; NUM_JOINTS];
                for slot in o.iter_mut() {
                    if rng.random_bool(0.85) {
                        *slot = Some(rng.random_bool(0.6));
                    }
                }
                o
            })
            .collect();
        let r = aggregate(stream.clone(), &DEFAULT_GROUPS).unwrap();
        let mut correct = 0u64;
        let mut seen = 0u64;
        for pose in &stream {
            for o in pose.iter().flatten() {
                seen += 1;
                if *o {
                    correct += 1;
                }
            }
        }
        assert_relative_eq!(r.total, correct as f64 / seen as f64, epsilon = 1e-12);

        // invariant under reordering
        let mut shuffled = stream.clone();
        shuffled.reverse();
        let r2 = aggregate(shuffled, &DEFAULT_GROUPS).unwrap();
        assert_eq!(r, r2);
        assert!(r.total >= 0.0 && r.total <= 1.0);
    }

    #[test]
    fn mean_of_matches_flat_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let results: Vec<EvalResult> = (0..7)
            .map(|_| {
                let stream: Vec<JointOutcomes> = (0..50)
                    .map(|_| {
                        let mut o = [None; NUM_JOINTS];
                        for slot in o.iter_mut() {
                            *slot = Some(rng.random_bool(0.5));
                        }
                        o
                    })
                    .collect();
                aggregate(stream, &DEFAULT_GROUPS).unwrap()
            })
            .collect();
        let mean = EvalResult::mean_of(&results).unwrap();
        let flat: f64 = results.iter().map(|r| r.total).sum::<f64>() / results.len() as f64;
        assert_relative_eq!(mean.total, flat, epsilon = 1e-12);

        // window = 1 -> equals the single result; constant history -> constant
        let single = EvalResult::mean_of(&results[0..1]).unwrap();
        assert_eq!(single, results[0]);
        let constant = vec![results[2].clone(); 5];
        let m = EvalResult::mean_of(&constant).unwrap();
        for j in 0..NUM_JOINTS {
            assert_relative_eq!(
                m.per_joint_pck[j],
                results[2].per_joint_pck[j],
                epsilon = 1e-12
            );
        }
    }
}
