//! Domain types and motion derivation.
//!
//! Coordinates live in a bird's-eye-view ego frame: `x` forward, `y` to the
//! left, origin and zero heading at the last observed history state.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default planning step in seconds.
pub const DEFAULT_DT: f64 = 0.5;
/// Default number of planned waypoints (3 s at 0.5 s).
pub const DEFAULT_STEPS: usize = 6;
/// Number of states in a synthesized history.
pub const HISTORY_LEN: usize = 4;

const STATIONARY_EPS: f64 = 1e-9;
const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// One observed ego state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub t: f64,
    pub position: Vec2,
    pub velocity: Vec2,
    pub acceleration: Vec2,
    pub heading: f64,
    pub steering: f64,
}

impl VehicleState {
    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }
}

/// Past ego states, oldest first, uniformly spaced in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub states: Vec<VehicleState>,
}

impl History {
    pub fn new(states: Vec<VehicleState>) -> Self {
        Self { states }
    }

    /// The t=0 anchor state.
    pub fn last(&self) -> Result<&VehicleState> {
        self.states.last().ok_or(Error::EmptyHistory)
    }

    /// Uniform spacing between states, if there are at least two.
    pub fn spacing(&self) -> Option<f64> {
        match self.states.as_slice() {
            [a, b, ..] => Some(b.t - a.t),
            _ => None,
        }
    }

    /// Checks ordering, spacing and steering limits.
    pub fn validate(&self, dt: f64, spec: &VehicleSpec) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::EmptyHistory);
        }
        for (i, s) in self.states.iter().enumerate() {
            let finite = s.t.is_finite()
                && s.position.is_finite()
                && s.velocity.is_finite()
                && s.acceleration.is_finite()
                && s.heading.is_finite()
                && s.steering.is_finite();
            if !finite {
                return Err(Error::NonFinite("history state"));
            }
            if s.steering.abs() > spec.delta_max + TIME_TOL {
                return Err(Error::InvalidHistory(format!(
                    "state {i}: |steering| {} exceeds delta_max {}",
                    s.steering.abs(),
                    spec.delta_max
                )));
            }
            let steps = s.t / dt;
            if (steps - steps.round()).abs() * dt > TIME_TOL {
                return Err(Error::InvalidHistory(format!(
                    "state {i}: t={} is not a multiple of dt={dt}",
                    s.t
                )));
            }
        }
        for (i, pair) in self.states.windows(2).enumerate() {
            let gap = pair[1].t - pair[0].t;
            if (gap - dt).abs() > TIME_TOL {
                return Err(Error::InvalidHistory(format!(
                    "states {i}..{}: spacing {gap} differs from dt={dt}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Planned waypoints at `dt` spacing, starting one step after t=0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vec2>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Vec2>, dt: f64) -> Self {
        Self { waypoints, dt }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.waypoints.iter().all(|p| p.is_finite())
    }

    pub fn translated(&self, by: Vec2) -> Trajectory {
        Trajectory::new(self.waypoints.iter().map(|&p| p + by).collect(), self.dt)
    }
}

/// Headings and speeds derived from a trajectory by finite differences.
///
/// `headings[0]` and `speeds[0]` are the anchor values at t=0, so both have
/// length N+1. `accels[k-1] = (speeds[k] - speeds[k-1]) / dt` for k in 1..=N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub headings: Vec<f64>,
    pub speeds: Vec<f64>,
    pub accels: Vec<f64>,
}

impl MotionProfile {
    /// Number of steps N (excludes the anchor entry).
    pub fn steps(&self) -> usize {
        self.headings.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub wheelbase: f64,
    pub delta_max: f64,
    pub mu: f64,
    pub g: f64,
    pub jerk_limit: f64,
}

impl Default for VehicleSpec {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            delta_max: 0.6,
            mu: 0.8,
            g: 9.81,
            jerk_limit: 2.5,
        }
    }
}

impl VehicleSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("wheelbase", self.wheelbase),
            ("delta_max", self.delta_max),
            ("mu", self.mu),
            ("g", self.g),
            ("jerk_limit", self.jerk_limit),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.delta_max >= PI / 2.0 {
            return Err(Error::InvalidSpec(format!(
                "delta_max must be below pi/2, got {}",
                self.delta_max
            )));
        }
        Ok(())
    }

    /// Friction-limited lateral acceleration bound `mu * g`.
    pub fn lateral_accel_bound(&self) -> f64 {
        self.mu * self.g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub history: History,
    pub ground_truth: Trajectory,
    pub spec: VehicleSpec,
}

impl Scenario {
    /// The t=0 state that anchors headings and speeds.
    pub fn anchor(&self) -> &VehicleState {
        self.history
            .states
            .last()
            .expect("scenario history is never empty")
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.ground_truth.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if !self.ground_truth.is_finite() {
            return Err(Error::NonFinite("ground truth"));
        }
        if !(self.ground_truth.dt.is_finite() && self.ground_truth.dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ground truth dt must be positive, got {}",
                self.ground_truth.dt
            )));
        }
        self.history.validate(self.ground_truth.dt, &self.spec)
    }
}

fn wrap_to_pi(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Derives headings and speeds of `traj` relative to `anchor`.
///
/// Headings are chord angles, unwrapped against the previous heading. A step
/// shorter than 1e-9 m keeps the previous heading.
pub fn derive_motion(traj: &Trajectory, anchor: &VehicleState) -> Result<MotionProfile> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if !(traj.dt.is_finite() && traj.dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {}",
            traj.dt
        )));
    }
    let n = traj.len();
    let mut headings = Vec::with_capacity(n + 1);
    let mut speeds = Vec::with_capacity(n + 1);
    let mut accels = Vec::with_capacity(n);
    headings.push(anchor.heading);
    speeds.push(anchor.speed());

    let mut prev_p = anchor.position;
    for &p in &traj.waypoints {
        let d = p - prev_p;
        let len = d.norm();
        let prev_h = *headings.last().unwrap();
        let h = if len < STATIONARY_EPS {
            prev_h
        } else {
            prev_h + wrap_to_pi(d.y.atan2(d.x) - prev_h)
        };
        let v = len / traj.dt;
        accels.push((v - speeds.last().unwrap()) / traj.dt);
        headings.push(h);
        speeds.push(v);
        prev_p = p;
    }
    Ok(MotionProfile {
        headings,
        speeds,
        accels,
    })
}

/// Component-wise mean of the recorded accelerations.
pub fn avg_acceleration(history: &History) -> Result<Vec2> {
    if history.states.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let n = history.states.len() as f64;
    let sum = history
        .states
        .iter()
        .fold(Vec2::ZERO, |acc, s| acc + s.acceleration);
    Ok(sum * (1.0 / n))
}

/// Constant-acceleration extrapolation from the last history state using the
/// mean recorded acceleration.
pub fn rollout_constant_accel(history: &History, steps: usize, dt: f64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let a = avg_acceleration(history)?;
    let last = history.last()?;
    let mut p = last.position;
    let mut v = last.velocity;
    let half_dt2 = 0.5 * dt * dt;
    let mut waypoints = Vec::with_capacity(steps);
    for _ in 0..steps {
        p = p + v * dt + a * half_dt2;
        v += a * dt;
        waypoints.push(p);
    }
    Ok(Trajectory::new(waypoints, dt))
}

/// Lateral offset `v * tan(steering)`.
pub fn lateral_offset(speed: f64, steering: f64) -> Result<f64> {
    if !(steering.abs() < PI / 2.0) {
        return Err(Error::SteeringOutOfRange(steering));
    }
    Ok(speed * steering.tan())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    ConstantTurn,
    Accel,
    Brake,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Straight,
        ScenarioKind::ConstantTurn,
        ScenarioKind::Accel,
        ScenarioKind::Brake,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::ConstantTurn => "constant_turn",
            ScenarioKind::Accel => "accel",
            ScenarioKind::Brake => "brake",
        }
    }

    fn tag(self) -> u64 {
        match self {
            ScenarioKind::Straight => 0x5354,
            ScenarioKind::ConstantTurn => 0x5455,
            ScenarioKind::Accel => 0x4143,
            ScenarioKind::Brake => 0x4252,
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario kind '{s}'")))
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exact continuous motion of a synthetic maneuver, sampled at time `t`.
#[derive(Debug, Clone, Copy)]
enum Maneuver {
    /// Motion along +x with constant longitudinal acceleration.
    Longitudinal { v0: f64, a: f64 },
    /// Circular arc through the origin tangent to +x; `sign` is +1 for left.
    Arc { speed: f64, radius: f64, sign: f64 },
}

impl Maneuver {
    fn state(self, t: f64, spec: &VehicleSpec) -> VehicleState {
        match self {
            Maneuver::Longitudinal { v0, a } => VehicleState {
                t,
                position: Vec2::new(v0 * t + 0.5 * a * t * t, 0.0),
                velocity: Vec2::new(v0 + a * t, 0.0),
                acceleration: Vec2::new(a, 0.0),
                heading: 0.0,
                steering: 0.0,
            },
            Maneuver::Arc {
                speed,
                radius,
                sign,
            } => {
                let w = speed / radius;
                let psi = sign * w * t;
                VehicleState {
                    t,
                    position: Vec2::new(
                        radius * (w * t).sin(),
                        sign * radius * (1.0 - (w * t).cos()),
                    ),
                    velocity: Vec2::new(speed * psi.cos(), speed * psi.sin()),
                    acceleration: Vec2::new(-psi.sin(), psi.cos()) * (sign * speed * w),
                    heading: psi,
                    steering: sign * (spec.wheelbase / radius).atan(),
                }
            }
        }
    }
}

/// Deterministic synthetic scenario of the given maneuver kind.
///
/// The history holds four states at t = -1.5, -1.0, -0.5, 0 s and the ground
/// truth six waypoints sampled from the same exact motion. Parameters are
/// chosen so the ground truth satisfies the turning-radius, friction and jerk
/// limits of `spec`.
pub fn synth_scenario(seed: u64, kind: ScenarioKind, spec: &VehicleSpec) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ mix_seed(kind.tag())));
    let maneuver = match kind {
        ScenarioKind::Straight => Maneuver::Longitudinal {
            v0: rng.random_range(4.0..15.0),
            a: 0.0,
        },
        ScenarioKind::Accel => Maneuver::Longitudinal {
            v0: rng.random_range(4.0..10.0),
            a: rng.random_range(0.5..1.5),
        },
        ScenarioKind::Brake => Maneuver::Longitudinal {
            v0: rng.random_range(9.0..14.0),
            a: -rng.random_range(1.0..2.0),
        },
        ScenarioKind::ConstantTurn => {
            let speed: f64 = rng.random_range(5.0..12.0);
            let r_min = spec.wheelbase / spec.delta_max.sin();
            let floor = 1.2 * r_min.max(speed * speed / (0.8 * spec.lateral_accel_bound()));
            let radius = rng.random_range(30.0..80.0f64).max(floor);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Maneuver::Arc {
                speed,
                radius,
                sign,
            }
        }
    };
    let dt = DEFAULT_DT;
    let states = (0..HISTORY_LEN)
        .map(|i| maneuver.state(-((HISTORY_LEN - 1 - i) as f64) * dt, spec))
        .collect();
    let waypoints = (1..=DEFAULT_STEPS)
        .map(|k| maneuver.state(k as f64 * dt, spec).position)
        .collect();
    Scenario {
        id: format!("{}-{seed}", kind.as_str()),
        history: History::new(states),
        ground_truth: Trajectory::new(waypoints, dt),
        spec: *spec,
    }
}
