//! Physics-grounded accuracy error and the total response reward.
//!
//! The four error terms are mean squared differences, so lower is better. The
//! scalar handed to the optimizer is `r_format - r_acc`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_motion, MotionProfile, Scenario, Trajectory, VehicleState};
use crate::response::parse_response;

pub const DEFAULT_PENALTY_CAP: f64 = 100.0;

const DT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub pos: f64,
    pub ste: f64,
    pub vel: f64,
    pub tem: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl RewardWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            pos: w,
            ste: w,
            vel: w,
            tem: w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("pos", self.pos),
            ("ste", self.ste),
            ("vel", self.vel),
            ("tem", self.tem),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for RewardWeights {
    type Err = Error;

    /// Parses `pos,ste,vel,tem`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("weights '{s}': {e}")))?;
        let [pos, ste, vel, tem] = parts[..] else {
            return Err(Error::InvalidArgument(format!(
                "weights '{s}': expected 4 comma-separated values"
            )));
        };
        let w = Self { pos, ste, vel, tem };
        w.validate()?;
        Ok(w)
    }
}

/// Weights plus the fixed penalty used for malformed plans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub penalty_cap: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            penalty_cap: DEFAULT_PENALTY_CAP,
        }
    }
}

/// Per-term accuracy errors and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTerms {
    pub r_pos: f64,
    pub r_ste: f64,
    pub r_vel: f64,
    pub r_tem: f64,
    pub r_acc: f64,
}

/// Full scoring of one response.
///
/// The individual terms are `None` when the response could not be compared
/// (parse failure or waypoint-count mismatch); `r_acc` then holds the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_pos: Option<f64>,
    pub r_ste: Option<f64>,
    pub r_vel: Option<f64>,
    pub r_tem: Option<f64>,
    pub r_acc: f64,
    pub r_format: f64,
    pub total: f64,
}

fn check_lengths(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(Error::LengthMismatch { pred, gt });
    }
    if pred == 0 {
        return Err(Error::EmptyTrajectory);
    }
    Ok(())
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean squared Euclidean waypoint distance.
pub fn r_pos(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    if (pred.dt - gt.dt).abs() > DT_TOL {
        return Err(Error::DtMismatch {
            pred: pred.dt,
            gt: gt.dt,
        });
    }
    let sum: f64 = pred
        .waypoints
        .iter()
        .zip(&gt.waypoints)
        .map(|(p, g)| (*p - *g).norm_sq())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean squared heading difference over steps 1..=N.
pub fn r_ste(pred: &MotionProfile, gt: &MotionProfile) -> Result<f64> {
    check_lengths(pred.steps(), gt.steps())?;
    Ok(mean_sq_diff(&pred.headings[1..], &gt.headings[1..]))
}

/// Mean squared speed difference over steps 1..=N.
pub fn r_vel(pred: &MotionProfile, gt: &MotionProfile) -> Result<f64> {
    check_lengths(
        pred.speeds.len().saturating_sub(1),
        gt.speeds.len().saturating_sub(1),
    )?;
    Ok(mean_sq_diff(&pred.speeds[1..], &gt.speeds[1..]))
}

/// Mean squared step-to-step change of heading plus that of speed.
///
/// Heading and speed terms are added without unit conversion.
pub fn r_tem(profile: &MotionProfile) -> Result<f64> {
    let n = profile.steps();
    if n == 0 || profile.speeds.len() != n + 1 {
        return Err(Error::InvalidArgument(
            "profile must hold the anchor entry plus at least one step".into(),
        ));
    }
    let dh = mean_sq_diff(&profile.headings[1..], &profile.headings[..n]);
    let dv = mean_sq_diff(&profile.speeds[1..], &profile.speeds[..n]);
    Ok(dh + dv)
}

/// Weighted accuracy error of `pred` against `gt`, both anchored at `anchor`.
pub fn r_acc(
    pred: &Trajectory,
    gt: &Trajectory,
    anchor: &VehicleState,
    w: &RewardWeights,
) -> Result<AccuracyTerms> {
    let pos = r_pos(pred, gt)?;
    let pred_m = derive_motion(pred, anchor)?;
    let gt_m = derive_motion(gt, anchor)?;
    let ste = r_ste(&pred_m, &gt_m)?;
    let vel = r_vel(&pred_m, &gt_m)?;
    let tem = r_tem(&pred_m)?;
    Ok(AccuracyTerms {
        r_pos: pos,
        r_ste: ste,
        r_vel: vel,
        r_tem: tem,
        r_acc: w.pos * pos + w.ste * ste + w.vel * vel + w.tem * tem,
    })
}

/// Scores a response string against a scenario.
///
/// Parse failures give `r_format = 0` and the penalty; a waypoint-count
/// mismatch keeps `r_format = 1` but still takes the penalty.
pub fn total_reward(text: &str, scenario: &Scenario, cfg: &RewardConfig) -> RewardBreakdown {
    let penalized = |r_format: f64| RewardBreakdown {
        r_pos: None,
        r_ste: None,
        r_vel: None,
        r_tem: None,
        r_acc: cfg.penalty_cap,
        r_format,
        total: r_format - cfg.penalty_cap,
    };
    let Ok(resp) = parse_response(text) else {
        return penalized(0.0);
    };
    let gt = &scenario.ground_truth;
    let pred = Trajectory::new(resp.answer.waypoints, gt.dt);
    match r_acc(&pred, gt, scenario.anchor(), &cfg.weights) {
        Ok(t) => RewardBreakdown {
            r_pos: Some(t.r_pos),
            r_ste: Some(t.r_ste),
            r_vel: Some(t.r_vel),
            r_tem: Some(t.r_tem),
            r_acc: t.r_acc,
            r_format: 1.0,
            total: 1.0 - t.r_acc,
        },
        Err(_) => penalized(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_scenario, ScenarioKind, Vec2, VehicleSpec};
    use crate::response::{serialize_response, ModelResponse};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn traj(pts: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect(), 0.5)
    }

    fn profile(headings: &[f64], speeds: &[f64]) -> MotionProfile {
        let accels = speeds.windows(2).map(|w| (w[1] - w[0]) / 0.5).collect();
        MotionProfile {
            headings: headings.to_vec(),
            speeds: speeds.to_vec(),
            accels,
        }
    }

    #[test]
    fn r_pos_cases() {
        let gt = traj(&[(0.0, 0.0), (2.0, 0.0)]);
        assert_eq!(r_pos(&gt, &gt).unwrap(), 0.0);
        assert_eq!(r_pos(&traj(&[(1.0, 0.0), (2.0, 0.0)]), &gt).unwrap(), 0.5);
        let gt = traj(&[(1.0, 2.0), (3.0, -1.0), (5.5, 0.25)]);
        let shifted = gt.translated(Vec2::new(0.3, 0.4));
        assert_abs_diff_eq!(r_pos(&shifted, &gt).unwrap(), 0.25, epsilon = 1e-12);
        assert!(matches!(
            r_pos(&traj(&[(0.0, 0.0)]), &gt),
            Err(Error::LengthMismatch { pred: 1, gt: 3 })
        ));
    }

    #[test]
    fn r_ste_cases() {
        let a = profile(&[0.0, 0.3, 0.5, 0.1], &[1.0; 4]);
        assert_eq!(r_ste(&a, &a).unwrap(), 0.0);
        let b = profile(&[0.0, 0.4, 0.6, 0.2], &[1.0; 4]);
        assert_abs_diff_eq!(r_ste(&b, &a).unwrap(), 0.01, epsilon = 1e-12);
        let p = profile(&[0.0, 0.0, 0.2], &[1.0; 3]);
        let g = profile(&[0.0, 0.0, 0.0], &[1.0; 3]);
        assert_abs_diff_eq!(r_ste(&p, &g).unwrap(), 0.02, epsilon = 1e-15);
        assert!(r_ste(&p, &a).is_err());
    }

    #[test]
    fn r_vel_cases() {
        let a = profile(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r_vel(&a, &a).unwrap(), 0.0);
        let b = profile(&[0.0; 4], &[1.0, 2.5, 3.5, 4.5]);
        assert_abs_diff_eq!(r_vel(&b, &a).unwrap(), 0.25, epsilon = 1e-12);
        let p = profile(&[0.0; 3], &[2.0, 2.0, 2.0]);
        let g = profile(&[0.0; 3], &[2.0, 2.0, 3.0]);
        assert_abs_diff_eq!(r_vel(&p, &g).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn r_tem_cases() {
        assert_eq!(r_tem(&profile(&[0.2; 5], &[3.0; 5])).unwrap(), 0.0);
        let p = profile(&[0.0, 0.1, 0.1], &[2.0, 2.0, 2.0]);
        assert_abs_diff_eq!(r_tem(&p).unwrap(), 0.005, epsilon = 1e-15);
        let p = profile(&[0.0, 0.0, 0.0], &[0.0, 1.0, 2.0]);
        assert_abs_diff_eq!(r_tem(&p).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn r_acc_identity_leaves_smoothness() {
        let spec = VehicleSpec::default();
        let s = synth_scenario(4, ScenarioKind::ConstantTurn, &spec);
        let t = r_acc(
            &s.ground_truth,
            &s.ground_truth,
            s.anchor(),
            &RewardWeights::default(),
        )
        .unwrap();
        let gt_m = derive_motion(&s.ground_truth, s.anchor()).unwrap();
        assert_eq!(t.r_acc, r_tem(&gt_m).unwrap());
        assert_eq!((t.r_pos, t.r_ste, t.r_vel), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_weights_zero_error() {
        let spec = VehicleSpec::default();
        let s = synth_scenario(4, ScenarioKind::Accel, &spec);
        let pred = s.ground_truth.translated(Vec2::new(1.0, -2.0));
        let t = r_acc(
            &pred,
            &s.ground_truth,
            s.anchor(),
            &RewardWeights::uniform(0.0),
        )
        .unwrap();
        assert_eq!(t.r_acc, 0.0);
        assert!(t.r_pos > 0.0);
    }

    fn respond(t: &Trajectory) -> String {
        serialize_response(
            &ModelResponse {
                think: "plan".into(),
                answer: t.clone(),
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn total_reward_cases() {
        let spec = VehicleSpec::default();
        let cfg = RewardConfig::default();
        let s = synth_scenario(2, ScenarioKind::Straight, &spec);
        let b = total_reward(&respond(&s.ground_truth), &s, &cfg);
        assert_eq!(b.r_format, 1.0);
        assert!((b.total - 1.0).abs() < 1e-12, "{b:?}");

        let b = total_reward("no tags", &s, &cfg);
        assert_eq!(b.r_format, 0.0);
        assert_eq!(b.total, -DEFAULT_PENALTY_CAP);
        assert!(b.r_pos.is_none());

        let short = Trajectory::new(s.ground_truth.waypoints[..4].to_vec(), 0.5);
        let b = total_reward(&respond(&short), &s, &cfg);
        assert_eq!(b.r_format, 1.0);
        assert_eq!(b.r_acc, DEFAULT_PENALTY_CAP);
        assert_eq!(b.total, 1.0 - DEFAULT_PENALTY_CAP);
    }

    #[test]
    fn weights_parse() {
        let w: RewardWeights = "1,0,0.5,2".parse().unwrap();
        assert_eq!(
            w,
            RewardWeights {
                pos: 1.0,
                ste: 0.0,
                vel: 0.5,
                tem: 2.0
            }
        );
        assert!("1,2,3".parse::<RewardWeights>().is_err());
        assert!("1,2,3,-1".parse::<RewardWeights>().is_err());
        assert!("1,x,3,1".parse::<RewardWeights>().is_err());
    }

    fn arb_traj(n: usize) -> impl Strategy<Value = Trajectory> {
        prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64), n).prop_map(|v| traj(&v))
    }

    proptest! {
        #[test]
        fn r_pos_translation_invariant(
            (a, b) in (1usize..8).prop_flat_map(|n| (arb_traj(n), arb_traj(n))),
            dx in -100.0..100.0f64, dy in -100.0..100.0f64,
        ) {
            let base = r_pos(&a, &b).unwrap();
            let moved = r_pos(&a.translated(Vec2::new(dx, dy)), &b.translated(Vec2::new(dx, dy))).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
        }

        #[test]
        fn r_pos_scales_quadratically(
            (a, b) in (1usize..8).prop_flat_map(|n| (arb_traj(n), arb_traj(n))),
            c in 0.1..10.0f64,
        ) {
            let scaled = Trajectory::new(
                a.waypoints.iter().zip(&b.waypoints).map(|(p, g)| *g + (*p - *g) * c).collect(),
                0.5,
            );
            let base = r_pos(&a, &b).unwrap();
            let s = r_pos(&scaled, &b).unwrap();
            prop_assert!((s - c * c * base).abs() <= 1e-9 * (1.0 + s));
        }

        #[test]
        fn components_vanish_only_on_match(
            (a, b) in (1usize..8).prop_flat_map(|n| (arb_traj(n), arb_traj(n))),
        ) {
            let anchor = VehicleState::default();
            let t = r_acc(&a, &b, &anchor, &RewardWeights::default()).unwrap();
            prop_assert!(t.r_pos > 0.0);
            prop_assert!(t.r_ste >= 0.0 && t.r_vel >= 0.0 && t.r_tem >= 0.0);
            let same = r_acc(&a, &a, &anchor, &RewardWeights::default()).unwrap();
            prop_assert_eq!((same.r_pos, same.r_ste, same.r_vel), (0.0, 0.0, 0.0));
        }

        #[test]
        fn r_acc_linear_in_each_weight(
            (a, b) in (2usize..7).prop_flat_map(|n| (arb_traj(n), arb_traj(n))),
            w in 0.0..5.0f64,
        ) {
            let anchor = VehicleState::default();
            let base = RewardWeights::default();
            let one = r_acc(&a, &b, &anchor, &base).unwrap();
            let bumped = r_acc(&a, &b, &anchor, &RewardWeights { vel: base.vel + w, ..base }).unwrap();
            let expect = one.r_acc + w * one.r_vel;
            prop_assert!((bumped.r_acc - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}
