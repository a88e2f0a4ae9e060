//! Text alignment, identity consistency, background consistency and turning
//! frame on toy trajectories. All similarities are cosines mapped to `[0, 1]`
//! by `(1 + cos) / 2`; degenerate (near-zero) vectors score 0.5.
//!
//! Metrics read absolute positions, so first-view trajectories should be
//! converted with [`Trajectory::to_third_person`] first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{EventParams, Trajectory};

const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub ta1: f64,
    pub ta2: f64,
    pub ta_mean: f64,
    pub ic: f64,
    pub bc: f64,
    pub turning_frame: Option<usize>,
    pub occupancy2: f64,
}

/// `(1 + cos angle(u, v)) / 2`, or 0.5 when either vector is degenerate.
pub fn unit_similarity(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return 0.5;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    ((1.0 + dot / (nu * nv)) / 2.0).clamp(0.0, 1.0)
}

fn mean_displacement(traj: &Trajectory, from: usize, to: usize) -> [f64; 2] {
    // Average of p_{f+1} - p_f over f in [from, to - 1) telescopes.
    let (a, b) = (traj.position(from), traj.position(to - 1));
    let n = (to - 1 - from) as f64;
    [(b[0] - a[0]) / n, (b[1] - a[1]) / n]
}

/// Per-event text alignment `(ta1, ta2, ta_mean)` over the two halves.
pub fn ta_per_event(traj: &Trajectory, e1: &EventParams, e2: &EventParams) -> Result<(f64, f64, f64)> {
    let frames = traj.frames();
    if frames < 4 {
        return Err(Error::Config(format!(
            "text alignment needs at least 4 frames, got {frames}"
        )));
    }
    let split = frames / 2;
    let ta1 = unit_similarity(&mean_displacement(traj, 0, split), &e1.drift());
    let ta2 = unit_similarity(&mean_displacement(traj, split, frames), &e2.drift());
    Ok((ta1, ta2, (ta1 + ta2) / 2.0))
}

fn midpoint_frames(frames: usize) -> (usize, usize) {
    (frames / 4, 3 * frames / 4)
}

/// Identity similarity between the middle frames of the two events.
pub fn ic(traj: &Trajectory) -> f64 {
    let (m1, m2) = midpoint_frames(traj.frames());
    unit_similarity(traj.identity(m1), traj.identity(m2))
}

/// Background similarity between the middle frames of the two events.
pub fn bc(traj: &Trajectory) -> f64 {
    let (m1, m2) = midpoint_frames(traj.frames());
    unit_similarity(traj.background(m1), traj.background(m2))
}

/// Classifies the displacement into each frame `f = 1..T-1` as event 1
/// (`false`) or event 2 (`true`) by higher alignment; ties go to event 1.
fn classify(traj: &Trajectory, e1: &EventParams, e2: &EventParams) -> Vec<bool> {
    let (d1, d2) = (e1.drift(), e2.drift());
    (1..traj.frames())
        .map(|f| {
            let (p, q) = (traj.position(f - 1), traj.position(f));
            let d = [q[0] - p[0], q[1] - p[1]];
            unit_similarity(&d, &d2) > unit_similarity(&d, &d1)
        })
        .collect()
}

fn same_direction(e1: &EventParams, e2: &EventParams) -> bool {
    let (u, v) = (e1.drift(), e2.drift());
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    cross.atan2(dot).abs() < 1e-9
}

/// The frame where the trajectory flips from event 1 to event 2, and the
/// fraction of displacements that look like event 2.
///
/// The turning frame is the smallest `s` in `[0, T-1]` minimizing the number
/// of disagreements when displacements into frames `f < s` are labeled
/// event 1 and the rest event 2. `None` when the two headings coincide.
pub fn turning_frame(traj: &Trajectory, e1: &EventParams, e2: &EventParams) -> (Option<usize>, f64) {
    let labels = classify(traj, e1, e2);
    let n2 = labels.iter().filter(|&&l| l).count();
    let occupancy2 = if labels.is_empty() {
        0.0
    } else {
        n2 as f64 / labels.len() as f64
    };
    if same_direction(e1, e2) || traj.frames() < 2 {
        return (None, occupancy2);
    }
    // errors(s) = #{f < s labeled e2} + #{f >= s labeled e1}, over f = 1..T-1.
    // Start at s = 0 (everything e2) and move frames across one at a time.
    let mut errors = labels.iter().filter(|&&l| !l).count();
    let (mut best, mut best_errors) = (0, errors);
    for s in 1..traj.frames() {
        // Frame f = s - 1 moves to the e1 side; frame 0 has no displacement.
        if s >= 2 {
            if labels[s - 2] {
                errors += 1;
            } else {
                errors -= 1;
            }
        }
        if errors < best_errors {
            best = s;
            best_errors = errors;
        }
    }
    (Some(best), occupancy2)
}

pub fn compute_metrics(traj: &Trajectory, e1: &EventParams, e2: &EventParams) -> Result<MetricsRecord> {
    let (ta1, ta2, ta_mean) = ta_per_event(traj, e1, e2)?;
    let (turning, occupancy2) = turning_frame(traj, e1, e2);
    Ok(MetricsRecord {
        ta1,
        ta2,
        ta_mean,
        ic: ic(traj),
        bc: bc(traj),
        turning_frame: turning,
        occupancy2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{mean_trajectory, View};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn ev(theta: f64) -> EventParams {
        EventParams::new(theta, 1.0, vec![1.0, 0.0], vec![0.0, 1.0])
    }

    fn with_features(frames: usize, id: [[f64; 2]; 2], bg: [[f64; 2]; 2]) -> Trajectory {
        let mut t = mean_trajectory(&ev(0.0), &ev(0.0), frames, View::Third).unwrap();
        for f in 0..frames {
            let half = usize::from(f >= frames / 2);
            let row = t.frame_mut(f);
            row[2..4].copy_from_slice(&id[half]);
            row[4..6].copy_from_slice(&bg[half]);
        }
        t
    }

    #[test]
    fn noiseless_alignment_is_perfect() {
        let (e1, e2) = (ev(0.3), ev(2.5));
        let t = mean_trajectory(&e1, &e2, 16, View::Third).unwrap();
        let (a, b, m) = ta_per_event(&t, &e1, &e2).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_and_orthogonal_drift() {
        let t = mean_trajectory(&ev(0.0), &ev(FRAC_PI_2), 16, View::Third).unwrap();
        let (a, b, _) = ta_per_event(&t, &ev(PI), &ev(0.0)).unwrap();
        assert!(a.abs() < 1e-12);
        assert!((b - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_alignment() {
        let still = EventParams::new(0.0, 0.0, vec![1.0, 0.0], vec![1.0, 0.0]);
        let t = mean_trajectory(&still, &still, 8, View::Third).unwrap();
        let (a, b, m) = ta_per_event(&t, &ev(0.0), &still).unwrap();
        assert_eq!((a, b, m), (0.5, 0.5, 0.5));
    }

    #[test]
    fn ta_needs_four_frames() {
        let t = mean_trajectory(&ev(0.0), &ev(0.0), 3, View::Third).unwrap();
        assert!(matches!(ta_per_event(&t, &ev(0.0), &ev(0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn identity_consistency_cases() {
        let bg = [[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(ic(&with_features(16, [[1.0, 0.0], [1.0, 0.0]], bg)), 1.0);
        assert_eq!(ic(&with_features(16, [[1.0, 0.0], [0.0, 1.0]], bg)), 0.5);
        assert_eq!(ic(&with_features(16, [[1.0, 0.0], [-1.0, 0.0]], bg)), 0.0);
    }

    #[test]
    fn background_consistency_cases() {
        let id = [[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(bc(&with_features(16, id, [[0.6, 0.8], [0.6, 0.8]])), 1.0);
        assert_eq!(bc(&with_features(16, id, [[1.0, 0.0], [0.0, 2.0]])), 0.5);
        assert_eq!(bc(&with_features(16, id, [[0.0, 0.0], [0.0, 0.0]])), 0.5);
    }

    #[test]
    fn turning_frame_at_split() {
        let (e1, e2) = (ev(0.0), ev(FRAC_PI_2));
        let t = mean_trajectory(&e1, &e2, 16, View::Third).unwrap();
        let (s, occ) = turning_frame(&t, &e1, &e2);
        assert_eq!(s, Some(8));
        assert!((occ - 8.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn pure_first_event() {
        let (e1, e2) = (ev(0.0), ev(FRAC_PI_2));
        let t = mean_trajectory(&e1, &e1, 16, View::Third).unwrap();
        assert_eq!(turning_frame(&t, &e1, &e2), (Some(15), 0.0));
    }

    #[test]
    fn coincident_directions() {
        let e = ev(1.0);
        let t = mean_trajectory(&e, &e, 16, View::Third).unwrap();
        assert_eq!(turning_frame(&t, &e, &e).0, None);
    }

    /// Independent exhaustive search over every split.
    fn brute_force_split(t: &Trajectory, e1: &EventParams, e2: &EventParams) -> usize {
        let (d1, d2) = (e1.drift(), e2.drift());
        let frames = t.frames();
        let is_e2: Vec<bool> = (1..frames)
            .map(|f| {
                let (p, q) = (t.position(f - 1), t.position(f));
                let d = [q[0] - p[0], q[1] - p[1]];
                let c = |v: [f64; 2]| {
                    let n = (d[0] * d[0] + d[1] * d[1]).sqrt() * (v[0] * v[0] + v[1] * v[1]).sqrt();
                    if n < 1e-18 { 0.0 } else { (d[0] * v[0] + d[1] * v[1]) / n }
                };
                c(d2) > c(d1)
            })
            .collect();
        (0..frames)
            .map(|s| {
                let err: usize = (1..frames)
                    .filter(|&f| if f < s { is_e2[f - 1] } else { !is_e2[f - 1] })
                    .count();
                (err, s)
            })
            .min()
            .unwrap()
            .1
    }

    mod props {
        use super::*;
        use crate::world::sample_trajectory;
        use proptest::prelude::*;
        use std::f64::consts::TAU;

        proptest! {
            #[test]
            fn all_metrics_bounded(
                th1 in 0.0f64..TAU, th2 in 0.0f64..TAU, sigma in 0.0f64..2.0, seed in 0u64..1000,
            ) {
                let (e1, e2) = (ev(th1), ev(th2));
                let t = sample_trajectory(&e1, &e2, 16, sigma, seed, View::Third).unwrap();
                let m = compute_metrics(&t, &e1, &e2).unwrap();
                for v in [m.ta1, m.ta2, m.ta_mean, m.ic, m.bc, m.occupancy2] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert_eq!(m.ta_mean, (m.ta1 + m.ta2) / 2.0);
                if let Some(s) = m.turning_frame {
                    prop_assert!(s < 16);
                }
            }

            #[test]
            fn turning_frame_matches_exhaustive_search(
                th1 in 0.0f64..TAU, th2 in 0.0f64..TAU, sigma in 0.0f64..1.5, seed in 0u64..1000,
                frames in 4usize..24,
            ) {
                let (e1, e2) = (ev(th1), ev(th2));
                prop_assume!(!same_direction(&e1, &e2));
                let t = sample_trajectory(&e1, &e2, frames, sigma, seed, View::Third).unwrap();
                prop_assert_eq!(turning_frame(&t, &e1, &e2).0, Some(brute_force_split(&t, &e1, &e2)));
            }

            #[test]
            fn rotation_equivariance(
                th1 in 0.0f64..TAU, th2 in 0.0f64..TAU, rot in 0.0f64..TAU,
                sigma in 0.0f64..0.3, seed in 0u64..1000,
            ) {
                let (e1, e2) = (ev(th1), ev(th2));
                prop_assume!(!same_direction(&e1, &e2));
                let t = sample_trajectory(&e1, &e2, 16, sigma, seed, View::Third).unwrap();
                let mut r = t.clone();
                let (s, c) = rot.sin_cos();
                for f in 0..16 {
                    let [x, y] = t.position(f);
                    let row = r.frame_mut(f);
                    row[0] = c * x - s * y;
                    row[1] = s * x + c * y;
                }
                let (r1, r2) = (ev(th1 + rot), ev(th2 + rot));
                let a = ta_per_event(&t, &e1, &e2).unwrap();
                let b = ta_per_event(&r, &r1, &r2).unwrap();
                prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
                // Skip near-ties where a displacement sits on the decision boundary.
                let margins_ok = (1..16).all(|f| {
                    let (p, q) = (t.position(f - 1), t.position(f));
                    let d = [q[0] - p[0], q[1] - p[1]];
                    (unit_similarity(&d, &e1.drift()) - unit_similarity(&d, &e2.drift())).abs() > 1e-9
                });
                prop_assume!(margins_ok);
                prop_assert_eq!(turning_frame(&t, &e1, &e2).0, turning_frame(&r, &r1, &r2).0);
            }
        }
    }
}
