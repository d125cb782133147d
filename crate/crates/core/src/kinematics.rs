//! Feasibility and comfort diagnostics: turning radius, friction-limited
//! lateral acceleration, longitudinal jerk and a 1-DOF suspension model.
//!
//! None of these enter the training reward.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_motion, Trajectory, Vec2, VehicleSpec, VehicleState};

/// Relative collinearity tolerance for waypoint triples.
const COLLINEAR_TOL: f64 = 1e-12;

/// Radius of the circle through three consecutive path points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "radius", rename_all = "snake_case")]
pub enum PathRadius {
    /// Collinear or degenerate triple; the radius is unbounded.
    Straight,
    Finite(f64),
}

impl PathRadius {
    pub fn finite(self) -> Option<f64> {
        match self {
            PathRadius::Straight => None,
            PathRadius::Finite(r) => Some(r),
        }
    }
}

/// A check result with the extreme value and the step index where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub value: f64,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusCheck {
    pub ok: bool,
    /// Smallest finite radius, `None` when every triple is straight.
    pub worst: Option<Extremum>,
    pub min_allowed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateralAccelCheck {
    pub ok: bool,
    pub max: Extremum,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JerkCheck {
    pub ok: bool,
    pub max_abs: Extremum,
    pub limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub min_radius: RadiusCheck,
    pub lateral_accel: LateralAccelCheck,
    pub jerk: JerkCheck,
    pub overall: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuspensionParams {
    /// Sprung mass, kg.
    pub m: f64,
    /// Damping, N·s/m.
    pub c: f64,
    /// Stiffness, N/m.
    pub k: f64,
}

impl SuspensionParams {
    pub fn natural_frequency(&self) -> f64 {
        (self.k / self.m).sqrt()
    }

    pub fn damping_ratio(&self) -> f64 {
        self.c / (2.0 * (self.k * self.m).sqrt())
    }

    /// Kinetic plus spring energy of state `(x, v)`.
    pub fn energy(&self, x: f64, v: f64) -> f64 {
        0.5 * self.m * v * v + 0.5 * self.k * x * x
    }
}

/// `L / sin(delta_max)`.
pub fn min_turn_radius(spec: &VehicleSpec) -> Result<f64> {
    if !(spec.delta_max > 0.0 && spec.delta_max < FRAC_PI_2) {
        return Err(Error::InvalidSpec(format!(
            "delta_max must lie in (0, pi/2), got {}",
            spec.delta_max
        )));
    }
    if !(spec.wheelbase > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "wheelbase must be positive, got {}",
            spec.wheelbase
        )));
    }
    Ok(spec.wheelbase / spec.delta_max.sin())
}

/// Circumradius of `a`, `b`, `c`.
pub fn circumradius(a: Vec2, b: Vec2, c: Vec2) -> PathRadius {
    let ab = b - a;
    let bc = c - b;
    let ca = a - c;
    let cross = ab.cross(c - a);
    let scale = ab.norm() * (c - a).norm();
    if scale == 0.0 || cross.abs() <= COLLINEAR_TOL * scale {
        return PathRadius::Straight;
    }
    PathRadius::Finite(ab.norm() * bc.norm() * ca.norm() / (2.0 * cross.abs()))
}

fn path_points(traj: &Trajectory, anchor: &VehicleState) -> Vec<Vec2> {
    std::iter::once(anchor.position)
        .chain(traj.waypoints.iter().copied())
        .collect()
}

/// Radius at every interior point of anchor followed by the waypoints.
///
/// Entry `i` belongs to waypoint `i + 1` of the combined sequence, i.e. to
/// `traj.waypoints[i]`.
pub fn path_radii(traj: &Trajectory, anchor: &VehicleState) -> Result<Vec<PathRadius>> {
    let pts = path_points(traj, anchor);
    if pts.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: pts.len(),
        });
    }
    Ok(pts
        .windows(3)
        .map(|w| circumradius(w[0], w[1], w[2]))
        .collect())
}

/// `v^2 / R`, zero on straight segments.
pub fn lateral_accel(speed: f64, radius: PathRadius) -> f64 {
    match radius {
        PathRadius::Straight => 0.0,
        PathRadius::Finite(r) => speed * speed / r,
    }
}

/// Largest `v^2 / R` along the path against the friction bound `mu * g`.
///
/// The speed at an interior point is the mean of the chord speeds entering and
/// leaving it.
pub fn lateral_accel_check(
    traj: &Trajectory,
    anchor: &VehicleState,
    spec: &VehicleSpec,
) -> Result<LateralAccelCheck> {
    let radii = path_radii(traj, anchor)?;
    let motion = derive_motion(traj, anchor)?;
    let mut max = Extremum {
        value: 0.0,
        index: 0,
    };
    for (i, r) in radii.iter().enumerate() {
        let v = 0.5 * (motion.speeds[i + 1] + motion.speeds[i + 2]);
        let a = lateral_accel(v, *r);
        if a > max.value {
            max = Extremum { value: a, index: i };
        }
    }
    let bound = spec.lateral_accel_bound();
    Ok(LateralAccelCheck {
        ok: max.value <= bound,
        max,
        bound,
    })
}

/// Second finite difference of a speed series.
///
/// `a_k = (v_{k+1} - v_k) / dt`, `j_k = (a_{k+1} - a_k) / dt`.
pub fn jerk_from_speeds(speeds: &[f64], dt: f64) -> Result<Vec<f64>> {
    if speeds.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: speeds.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let accels: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    Ok(accels.windows(2).map(|w| (w[1] - w[0]) / dt).collect())
}

/// Longitudinal jerk along the planned path.
///
/// Uses the chord speeds of the waypoints only. The anchor's instantaneous
/// speed is a point sample while chord speeds are interval means, and mixing
/// them introduces a spurious half-step acceleration. Needs at least three
/// waypoints.
pub fn jerk_profile(traj: &Trajectory, anchor: &VehicleState) -> Result<Vec<f64>> {
    if traj.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: traj.len(),
        });
    }
    let motion = derive_motion(traj, anchor)?;
    jerk_from_speeds(&motion.speeds[1..], traj.dt)
}

fn jerk_check(traj: &Trajectory, anchor: &VehicleState, spec: &VehicleSpec) -> Result<JerkCheck> {
    let jerk = jerk_profile(traj, anchor)?;
    let max_abs = jerk.iter().enumerate().fold(
        Extremum {
            value: 0.0,
            index: 0,
        },
        |m, (i, j)| {
            if j.abs() > m.value {
                Extremum {
                    value: j.abs(),
                    index: i,
                }
            } else {
                m
            }
        },
    );
    Ok(JerkCheck {
        ok: max_abs.value <= spec.jerk_limit,
        max_abs,
        limit: spec.jerk_limit,
    })
}

/// Runs the turning-radius, lateral-acceleration and jerk checks.
pub fn check_feasible(
    traj: &Trajectory,
    anchor: &VehicleState,
    spec: &VehicleSpec,
) -> Result<FeasibilityReport> {
    let r_min = min_turn_radius(spec)?;
    let worst = path_radii(traj, anchor)?
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.finite().map(|value| Extremum { value, index: i }))
        .min_by(|a, b| a.value.total_cmp(&b.value));
    let min_radius = RadiusCheck {
        ok: worst.is_none_or(|w| w.value >= r_min),
        worst,
        min_allowed: r_min,
    };
    let lateral_accel = lateral_accel_check(traj, anchor, spec)?;
    let jerk = jerk_check(traj, anchor, spec)?;
    Ok(FeasibilityReport {
        overall: min_radius.ok && lateral_accel.ok && jerk.ok,
        min_radius,
        lateral_accel,
        jerk,
    })
}

/// Integrates `m x'' + c x' + k x = F(t)` with classic fourth-order
/// Runge-Kutta at a fixed step.
///
/// `forcing[i]` is F at `t = i * dt`; midpoint values are linearly
/// interpolated. `output[0] = x0` and `output.len() == forcing.len()`.
pub fn suspension_response(
    params: &SuspensionParams,
    forcing: &[f64],
    dt: f64,
    x0: f64,
    v0: f64,
) -> Result<Vec<f64>> {
    Ok(suspension_states(params, forcing, dt, x0, v0)?
        .into_iter()
        .map(|(x, _)| x)
        .collect())
}

/// Like [`suspension_response`] but returns `(displacement, velocity)` pairs.
pub fn suspension_states(
    params: &SuspensionParams,
    forcing: &[f64],
    dt: f64,
    x0: f64,
    v0: f64,
) -> Result<Vec<(f64, f64)>> {
    let SuspensionParams { m, c, k } = *params;
    if !(m > 0.0 && c > 0.0 && k > 0.0) {
        return Err(Error::InvalidArgument(
            "suspension mass, damping and stiffness must be positive".into(),
        ));
    }
    let bound = 2.0 / params.natural_frequency();
    if !(dt > 0.0 && dt < bound) {
        return Err(Error::UnstableStep { dt, bound });
    }
    let accel = |x: f64, v: f64, f: f64| (f - c * v - k * x) / m;
    let mut out = Vec::with_capacity(forcing.len());
    let (mut x, mut v) = (x0, v0);
    for (i, &f0) in forcing.iter().enumerate() {
        out.push((x, v));
        let Some(&f1) = forcing.get(i + 1) else {
            break;
        };
        let fm = 0.5 * (f0 + f1);
        let (k1x, k1v) = (v, accel(x, v, f0));
        let (k2x, k2v) = (
            v + 0.5 * dt * k1v,
            accel(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v, fm),
        );
        let (k3x, k3v) = (
            v + 0.5 * dt * k2v,
            accel(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v, fm),
        );
        let (k4x, k4v) = (v + dt * k3v, accel(x + dt * k3x, v + dt * k3v, f1));
        x += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    }
    Ok(out)
}
