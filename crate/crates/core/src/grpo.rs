//! Group-relative policy optimization over a diagonal-Gaussian waypoint policy.
//!
//! The policy mean is the constant-acceleration rollout of the scenario history
//! plus a linear correction of the last observed state:
//!
//! ```text
//! mean = rollout(history) + W · features + b        (2N coordinates)
//! o    ~ N(mean, diag(exp(log_std))^2)
//! ```
//!
//! Each step samples a group of G responses, scores them with the total
//! response reward, standardizes the rewards inside the group and ascends
//!
//! ```text
//! J = 1/G · Σ_i exp(log π(o_i) − log π_old(o_i)) · A_i  −  β · KL(π ‖ π_ref)
//! ```
//!
//! with the KL taken in closed form between the two Gaussians.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mix_seed, rollout_constant_accel, Scenario, Trajectory, Vec2, DEFAULT_STEPS};
use crate::response::{serialize_response, ModelResponse};
use crate::reward::{total_reward, RewardBreakdown, RewardConfig};

/// Number of per-scenario input features.
pub const FEATURE_DIM: usize = 7;
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Placeholder reasoning text emitted by the toy policy.
pub const THINK_PLACEHOLDER: &str = "toy policy rollout";

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Last-state position, velocity, acceleration and heading.
pub fn features(scenario: &Scenario) -> [f64; FEATURE_DIM] {
    let s = scenario.anchor();
    [
        s.position.x,
        s.position.y,
        s.velocity.x,
        s.velocity.y,
        s.acceleration.x,
        s.acceleration.y,
        s.heading,
    ]
}

/// Policy parameters. Also used as the shape of gradients.
///
/// Coordinates are interleaved `[x_1, y_1, x_2, y_2, …]`; `weights` is
/// row-major with one row of `FEATURE_DIM` entries per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub steps: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl PolicyParams {
    pub fn new(steps: usize, init_log_std: f64) -> Self {
        let dim = 2 * steps;
        Self {
            steps,
            weights: vec![0.0; dim * FEATURE_DIM],
            bias: vec![0.0; dim],
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            steps: self.steps,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
            log_std: vec![0.0; self.log_std.len()],
        }
    }

    /// Number of coordinates, 2N.
    pub fn dim(&self) -> usize {
        2 * self.steps
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len() + self.log_std.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.weights);
        v.extend_from_slice(&self.bias);
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn from_flat(steps: usize, flat: &[f64]) -> Result<Self> {
        let dim = 2 * steps;
        let nw = dim * FEATURE_DIM;
        if flat.len() != nw + 2 * dim {
            return Err(Error::InvalidArgument(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                nw + 2 * dim
            )));
        }
        Ok(Self {
            steps,
            weights: flat[..nw].to_vec(),
            bias: flat[nw..nw + dim].to_vec(),
            log_std: flat[nw + dim..].to_vec(),
        })
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.log_std.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn clamp_log_std(&mut self) {
        for s in &mut self.log_std {
            *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    fn check_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.steps != other.steps || self.len() != other.len() {
            return Err(Error::InvalidArgument(
                "policy parameter shapes differ".into(),
            ));
        }
        Ok(())
    }

    /// Per-coordinate mean of the response distribution for `scenario`.
    pub fn mean(&self, scenario: &Scenario) -> Result<Vec<f64>> {
        let base = rollout_constant_accel(&scenario.history, self.steps, scenario.ground_truth.dt)?;
        let f = features(scenario);
        Ok((0..self.dim())
            .map(|c| {
                let p = base.waypoints[c / 2];
                let b = if c % 2 == 0 { p.x } else { p.y };
                let row = &self.weights[c * FEATURE_DIM..(c + 1) * FEATURE_DIM];
                b + self.bias[c] + row.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect())
    }

    /// The mean as a trajectory.
    pub fn mean_trajectory(&self, scenario: &Scenario) -> Result<Trajectory> {
        Ok(coords_to_trajectory(
            &self.mean(scenario)?,
            scenario.ground_truth.dt,
        ))
    }
}

fn coords_to_trajectory(coords: &[f64], dt: f64) -> Trajectory {
    Trajectory::new(
        coords
            .chunks_exact(2)
            .map(|c| Vec2::new(c[0], c[1]))
            .collect(),
        dt,
    )
}

fn trajectory_to_coords(traj: &Trajectory) -> Vec<f64> {
    traj.waypoints.iter().flat_map(|p| [p.x, p.y]).collect()
}

/// Gaussian log-density of `traj` under `params` for `scenario`.
pub fn log_prob(params: &PolicyParams, scenario: &Scenario, traj: &Trajectory) -> Result<f64> {
    if traj.len() != params.steps {
        return Err(Error::LengthMismatch {
            pred: traj.len(),
            gt: params.steps,
        });
    }
    let mean = params.mean(scenario)?;
    let o = trajectory_to_coords(traj);
    Ok(o.iter()
        .zip(&mean)
        .zip(&params.log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum())
}

/// Draws one trajectory and returns it with its log-density.
pub fn policy_sample<R: rand::Rng + ?Sized>(
    params: &PolicyParams,
    scenario: &Scenario,
    rng: &mut R,
) -> Result<(Trajectory, f64)> {
    let mean = params.mean(scenario)?;
    let mut coords = Vec::with_capacity(mean.len());
    let mut lp = 0.0;
    for (m, ls) in mean.iter().zip(&params.log_std) {
        let z: f64 = StandardNormal.sample(rng);
        coords.push(m + ls.exp() * z);
        lp += -0.5 * z * z - ls - HALF_LN_2PI;
    }
    Ok((coords_to_trajectory(&coords, scenario.ground_truth.dt), lp))
}

/// Group-standardized advantages with population standard deviation.
///
/// Returns all zeros when the standard deviation is below `eps_std`.
pub fn advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= eps_std) {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Closed-form KL(p ‖ reference) between the two response distributions for
/// `scenario`, summed over coordinates.
pub fn kl_divergence(
    p: &PolicyParams,
    reference: &PolicyParams,
    scenario: &Scenario,
) -> Result<f64> {
    p.check_shape(reference)?;
    let mp = p.mean(scenario)?;
    let mr = reference.mean(scenario)?;
    let kl: f64 = (0..p.dim())
        .map(|c| {
            let (lp, lr) = (p.log_std[c], reference.log_std[c]);
            let ratio = (2.0 * (lp - lr)).exp();
            let d = (mp[c] - mr[c]) / lr.exp();
            lr - lp + 0.5 * (ratio + d * d) - 0.5
        })
        .sum();
    Ok(kl.max(0.0))
}

fn kl_grad(
    p: &PolicyParams,
    reference: &PolicyParams,
    scenario: &Scenario,
    scale: f64,
    out: &mut PolicyParams,
) -> Result<()> {
    let mp = p.mean(scenario)?;
    let mr = reference.mean(scenario)?;
    let f = features(scenario);
    for c in 0..p.dim() {
        let var_r = (2.0 * reference.log_std[c]).exp();
        let d_mean = (mp[c] - mr[c]) / var_r;
        let d_logstd = -1.0 + (2.0 * p.log_std[c]).exp() / var_r;
        accumulate_mean_grad(out, c, &f, scale * d_mean);
        out.log_std[c] += scale * d_logstd;
    }
    Ok(())
}

fn accumulate_mean_grad(out: &mut PolicyParams, c: usize, f: &[f64; FEATURE_DIM], g: f64) {
    out.bias[c] += g;
    for (w, x) in out.weights[c * FEATURE_DIM..(c + 1) * FEATURE_DIM]
        .iter_mut()
        .zip(f)
    {
        *w += g * x;
    }
}

/// One sampled group with its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub responses: Vec<String>,
    pub trajectories: Vec<Trajectory>,
    pub log_probs_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
}

impl GroupSample {
    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    /// Mean of a reward term over members where it was computed.
    pub fn mean_term(&self, term: impl Fn(&RewardBreakdown) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.breakdowns.iter().filter_map(term).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Settings of the surrogate objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub beta: f64,
    /// PPO-style ratio clip range; `None` evaluates the objective unclipped.
    pub clip: Option<f64>,
}

fn ratio_terms(
    params: &PolicyParams,
    group: &GroupSample,
    scenario: &Scenario,
) -> Result<Vec<f64>> {
    group
        .trajectories
        .iter()
        .zip(&group.log_probs_old)
        .map(|(t, old)| Ok((log_prob(params, scenario, t)? - old).exp()))
        .collect()
}

fn clipped(ratio: f64, adv: f64, clip: Option<f64>) -> (f64, bool) {
    let Some(eps) = clip else {
        return (ratio * adv, true);
    };
    let unclipped = ratio * adv;
    let c = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= c {
        (unclipped, true)
    } else {
        (c, false)
    }
}

/// Surrogate objective on a stored group.
///
/// The behaviour policy's log-densities are taken from
/// `group.log_probs_old`.
pub fn surrogate(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &GroupSample,
    scenario: &Scenario,
    objective: &Objective,
) -> Result<f64> {
    let ratios = ratio_terms(params, group, scenario)?;
    let g = group.size() as f64;
    let pg: f64 = ratios
        .iter()
        .zip(&group.advantages)
        .map(|(r, a)| clipped(*r, *a, objective.clip).0)
        .sum::<f64>()
        / g;
    Ok(pg - objective.beta * kl_divergence(params, reference, scenario)?)
}

/// Analytic gradient of [`surrogate`] with respect to `params`.
pub fn grad_surrogate(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &GroupSample,
    scenario: &Scenario,
    objective: &Objective,
) -> Result<PolicyParams> {
    params.check_shape(reference)?;
    let mean = params.mean(scenario)?;
    let f = features(scenario);
    let ratios = ratio_terms(params, group, scenario)?;
    let g = group.size() as f64;
    let mut grad = params.zeros_like();
    for ((traj, ratio), adv) in group
        .trajectories
        .iter()
        .zip(&ratios)
        .zip(&group.advantages)
    {
        let (_, active) = clipped(*ratio, *adv, objective.clip);
        if !active {
            continue;
        }
        let coef = ratio * adv / g;
        if coef == 0.0 {
            continue;
        }
        for (c, x) in trajectory_to_coords(traj).iter().enumerate() {
            let sigma = params.log_std[c].exp();
            let z = (x - mean[c]) / sigma;
            accumulate_mean_grad(&mut grad, c, &f, coef * z / sigma);
            grad.log_std[c] += coef * (z * z - 1.0);
        }
    }
    if objective.beta != 0.0 {
        kl_grad(params, reference, scenario, -objective.beta, &mut grad)?;
    }
    Ok(grad)
}

/// Update rule applied to the surrogate gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub eps_std: f64,
    pub seed: u64,
    pub clip: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Initial per-coordinate log standard deviation of a fresh policy.
    pub init_log_std: f64,
    /// Fractional digits used when serializing sampled responses.
    pub decimals: usize,
    pub reward: RewardConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 6,
            beta: 0.04,
            learning_rate: 1e-3,
            iterations: 500,
            eps_std: 1e-8,
            seed: 0,
            clip: None,
            optimizer: OptimizerKind::Adam,
            init_log_std: -1.0,
            decimals: 6,
            reward: RewardConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "clip must be positive, got {c}"
                )));
            }
        }
        self.reward.weights.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            beta: self.beta,
            clip: self.clip,
        }
    }
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Moves `params` uphill along `grad`.
    pub fn ascend(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        let g = grad.to_flat();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, gi) in params.iter_mut().zip(&g) {
                    *p += self.lr * gi;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - Self::BETA1.powi(self.t);
                let bc2 = 1.0 - Self::BETA2.powi(self.t);
                for (i, p) in params.iter_mut().enumerate() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p += self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
        params.clamp_log_std();
    }
}

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iteration: usize,
    pub scenario_id: String,
    pub mean_reward: f64,
    pub mean_r_pos: f64,
    pub mean_r_tem: f64,
    pub format_rate: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub mean_log_std: f64,
}

/// RNG for one group member; independent of evaluation order.
pub fn member_rng(seed: u64, iteration: u64, member: u64) -> ChaCha8Rng {
    let key = mix_seed(mix_seed(mix_seed(seed) ^ iteration) ^ member);
    ChaCha8Rng::seed_from_u64(key)
}

/// Samples and scores a group of `config.group_size` responses.
pub fn sample_group(
    params: &PolicyParams,
    scenario: &Scenario,
    config: &GrpoConfig,
    iteration: u64,
) -> Result<GroupSample> {
    let g = config.group_size;
    let mut group = GroupSample {
        responses: Vec::with_capacity(g),
        trajectories: Vec::with_capacity(g),
        log_probs_old: Vec::with_capacity(g),
        rewards: Vec::with_capacity(g),
        advantages: Vec::new(),
        breakdowns: Vec::with_capacity(g),
    };
    for member in 0..g {
        let mut rng = member_rng(config.seed, iteration, member as u64);
        let (traj, lp) = policy_sample(params, scenario, &mut rng)?;
        let text = serialize_response(
            &ModelResponse {
                think: THINK_PLACEHOLDER.to_string(),
                answer: traj.clone(),
            },
            config.decimals,
        )?;
        let b = total_reward(&text, scenario, &config.reward);
        group.rewards.push(b.total);
        group.breakdowns.push(b);
        group.responses.push(text);
        group.trajectories.push(traj);
        group.log_probs_old.push(lp);
    }
    group.advantages = advantages(&group.rewards, config.eps_std)?;
    Ok(group)
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: PolicyParams,
    pub group: GroupSample,
    pub diagnostics: Diagnostics,
}

/// Samples a group from `params`, scores it and takes one ascent step on the
/// surrogate with the sampling policy as the behaviour policy.
pub fn train_step(
    params: &PolicyParams,
    reference: &PolicyParams,
    scenario: &Scenario,
    config: &GrpoConfig,
    optimizer: &mut Optimizer,
    iteration: usize,
) -> Result<StepOutput> {
    let group = sample_group(params, scenario, config, iteration as u64)?;
    let objective = config.objective();
    let j = surrogate(params, reference, &group, scenario, &objective)?;
    let grad = grad_surrogate(params, reference, &group, scenario, &objective)?;
    let kl = kl_divergence(params, reference, scenario)?;
    let mut next = params.clone();
    optimizer.ascend(&mut next, &grad);
    let n = group.size() as f64;
    let diagnostics = Diagnostics {
        iteration,
        scenario_id: scenario.id.clone(),
        mean_reward: group.rewards.iter().sum::<f64>() / n,
        mean_r_pos: group.mean_term(|b| b.r_pos).unwrap_or(f64::NAN),
        mean_r_tem: group.mean_term(|b| b.r_tem).unwrap_or(f64::NAN),
        format_rate: group.breakdowns.iter().map(|b| b.r_format).sum::<f64>() / n,
        surrogate: j,
        kl,
        grad_norm: grad.norm(),
        mean_log_std: params.log_std.iter().sum::<f64>() / params.dim() as f64,
    };
    Ok(StepOutput {
        params: next,
        group,
        diagnostics,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<Diagnostics>,
}

/// Trains a fresh policy over `scenarios` round-robin for `config.iterations`
/// steps. The reference policy is the initial policy.
pub fn train_loop(scenarios: &[Scenario], config: &GrpoConfig) -> Result<TrainOutcome> {
    let steps = scenarios
        .first()
        .map(|s| s.ground_truth.len())
        .unwrap_or(DEFAULT_STEPS);
    train_from(
        PolicyParams::new(steps, config.init_log_std),
        scenarios,
        config,
    )
}

/// Like [`train_loop`] starting from `init`, which also serves as reference.
pub fn train_from(
    init: PolicyParams,
    scenarios: &[Scenario],
    config: &GrpoConfig,
) -> Result<TrainOutcome> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios to train on".into()));
    }
    config.validate()?;
    let reference = init.clone();
    let mut params = init;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, params.len());
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let scenario = &scenarios[it % scenarios.len()];
        let out = train_step(&params, &reference, scenario, config, &mut optimizer, it)?;
        params = out.params;
        history.push(out.diagnostics);
    }
    Ok(TrainOutcome { params, history })
}

/// Expected `r_pos` of a policy draw against the ground truth:
/// squared mean error plus the variance of every coordinate, averaged per step.
pub fn expected_r_pos(params: &PolicyParams, scenario: &Scenario) -> Result<f64> {
    let mean = params.mean(scenario)?;
    let gt = trajectory_to_coords(&scenario.ground_truth);
    if gt.len() != mean.len() {
        return Err(Error::LengthMismatch {
            pred: params.steps,
            gt: scenario.ground_truth.len(),
        });
    }
    let total: f64 = (0..mean.len())
        .map(|c| (mean[c] - gt[c]).powi(2) + (2.0 * params.log_std[c]).exp())
        .sum();
    Ok(total / params.steps as f64)
}

/// Log-density of a draw exactly at the mean, `Σ (−log_std − ½ ln 2π)`.
pub fn log_prob_at_mean(params: &PolicyParams) -> f64 {
    params
        .log_std
        .iter()
        .map(|ls| -ls - 0.5 * (2.0 * PI).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_scenario, ScenarioKind, VehicleSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn scenario(kind: ScenarioKind, seed: u64) -> Scenario {
        synth_scenario(seed, kind, &VehicleSpec::default())
    }

    fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
        let mut p = PolicyParams::new(DEFAULT_STEPS, 0.0);
        for v in p.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
        p
    }

    #[test]
    fn near_deterministic_sample_hits_mean() {
        let s = scenario(ScenarioKind::ConstantTurn, 3);
        let p = PolicyParams::new(6, -10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, _) = policy_sample(&p, &s, &mut rng).unwrap();
        let mean = p.mean_trajectory(&s).unwrap();
        for (a, b) in t.waypoints.iter().zip(&mean.waypoints) {
            assert!((a.x - b.x).abs() < 1e-3 && (a.y - b.y).abs() < 1e-3);
        }
    }

    #[test]
    fn log_prob_at_mean_matches_closed_form() {
        let s = scenario(ScenarioKind::Accel, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 0.3);
        let mean = p.mean_trajectory(&s).unwrap();
        let expect: f64 = p.log_std.iter().map(|ls| -ls - 0.5 * (2.0 * PI).ln()).sum();
        assert_abs_diff_eq!(log_prob(&p, &s, &mean).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(log_prob_at_mean(&p), expect, epsilon = 1e-12);
    }

    #[test]
    fn sample_log_prob_is_consistent() {
        let s = scenario(ScenarioKind::Brake, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 0.5);
        let (t, lp) = policy_sample(&p, &s, &mut rng).unwrap();
        assert_abs_diff_eq!(log_prob(&p, &s, &t).unwrap(), lp, epsilon = 1e-9);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = scenario(ScenarioKind::Straight, 1);
        let p = PolicyParams::new(6, 0.0);
        let a = policy_sample(&p, &s, &mut member_rng(5, 2, 1)).unwrap();
        let b = policy_sample(&p, &s, &mut member_rng(5, 2, 1)).unwrap();
        assert_eq!(a, b);
        let c = policy_sample(&p, &s, &mut member_rng(5, 2, 2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn advantage_cases() {
        let a = advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        assert_abs_diff_eq!(a[0], -1.22474, epsilon = 1e-5);
        assert_abs_diff_eq!(a[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[2], 1.22474, epsilon = 1e-5);
        assert_eq!(advantages(&[0.7; 5], 1e-8).unwrap(), vec![0.0; 5]);
        assert_eq!(advantages(&[1.0], 1e-8), Err(Error::GroupTooSmall(1)));
    }

    #[test]
    fn kl_cases() {
        let s = scenario(ScenarioKind::ConstantTurn, 1);
        let p = PolicyParams::new(6, -0.5);
        assert_eq!(kl_divergence(&p, &p, &s).unwrap(), 0.0);

        let mut r = p.clone();
        r.log_std[3] += 2f64.ln();
        assert_abs_diff_eq!(
            kl_divergence(&p, &r, &s).unwrap(),
            2f64.ln() + 0.125 - 0.5,
            epsilon = 1e-5
        );

        let mut shifted = p.clone();
        shifted.bias[4] += 0.3;
        let sigma = (-0.5f64).exp();
        assert_abs_diff_eq!(
            kl_divergence(&shifted, &p, &s).unwrap(),
            0.09 / (2.0 * sigma * sigma),
            epsilon = 1e-12
        );
    }

    fn fd_gradient(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64, h: f64) -> Vec<f64> {
        let flat = params.to_flat();
        (0..flat.len())
            .map(|i| {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[i] += h;
                dn[i] -= h;
                let fu = f(&PolicyParams::from_flat(params.steps, &up).unwrap());
                let fd = f(&PolicyParams::from_flat(params.steps, &dn).unwrap());
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn surrogate_fixed_points() {
        let s = scenario(ScenarioKind::ConstantTurn, 8);
        let cfg = GrpoConfig::default();
        let p = PolicyParams::new(6, 0.0);
        let group = sample_group(&p, &s, &cfg, 0).unwrap();
        let j0 = surrogate(
            &p,
            &p,
            &group,
            &s,
            &Objective {
                beta: 0.0,
                clip: None,
            },
        )
        .unwrap();
        assert!(j0.abs() < 1e-9);
        let j1 = surrogate(
            &p,
            &p,
            &group,
            &s,
            &Objective {
                beta: 0.5,
                clip: None,
            },
        )
        .unwrap();
        assert!(j1.abs() < 1e-9);

        let mut moved = p.clone();
        moved.bias[0] = 0.2;
        moved.log_std[5] = -0.3;
        let kl = kl_divergence(&moved, &p, &s).unwrap();
        let a = surrogate(
            &moved,
            &p,
            &group,
            &s,
            &Objective {
                beta: 0.1,
                clip: None,
            },
        )
        .unwrap();
        let b = surrogate(
            &moved,
            &p,
            &group,
            &s,
            &Objective {
                beta: 0.2,
                clip: None,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(b - a, -0.1 * kl, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = scenario(ScenarioKind::ConstantTurn, 4);
        let cfg = GrpoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let old = random_params(&mut rng, 0.05);
        let reference = random_params(&mut rng, 0.05);
        let group = sample_group(&old, &s, &cfg, 3).unwrap();
        let mut params = old.clone();
        for v in params.iter_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
        let obj = Objective {
            beta: 0.04,
            clip: None,
        };
        let g = grad_surrogate(&params, &reference, &group, &s, &obj)
            .unwrap()
            .to_flat();
        let fd = fd_gradient(
            &params,
            |p| surrogate(p, &reference, &group, &s, &obj).unwrap(),
            1e-5,
        );
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * scale.max(1e-8), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_advantage_gradient_is_kl_only() {
        let s = scenario(ScenarioKind::Accel, 4);
        let cfg = GrpoConfig::default();
        let p = PolicyParams::new(6, 0.0);
        let mut group = sample_group(&p, &s, &cfg, 0).unwrap();
        group.advantages = vec![0.0; group.size()];
        let g = grad_surrogate(
            &p,
            &p,
            &group,
            &s,
            &Objective {
                beta: 0.0,
                clip: None,
            },
        )
        .unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));

        let mut moved = p.clone();
        moved.bias[2] = 0.4;
        moved.log_std[7] = -0.6;
        let beta = 0.3;
        let g = grad_surrogate(&moved, &p, &group, &s, &Objective { beta, clip: None }).unwrap();
        // closed form: d/db KL = Δμ/σ_r², d/dlogσ KL = σ_p²/σ_r² − 1
        assert_abs_diff_eq!(g.bias[2], -beta * 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(
            g.log_std[7],
            -beta * ((-1.2f64).exp() - 1.0),
            epsilon = 1e-12
        );
        let f = features(&s);
        for (k, x) in f.iter().enumerate() {
            assert_abs_diff_eq!(
                g.weights[2 * FEATURE_DIM + k],
                -beta * 0.4 * x,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn clipped_gradient_matches_finite_differences() {
        let s = scenario(ScenarioKind::Brake, 6);
        let cfg = GrpoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let old = random_params(&mut rng, 0.05);
        let group = sample_group(&old, &s, &cfg, 1).unwrap();
        let mut params = old.clone();
        for v in params.iter_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
        let obj = Objective {
            beta: 0.04,
            clip: Some(0.2),
        };
        let g = grad_surrogate(&params, &old, &group, &s, &obj)
            .unwrap()
            .to_flat();
        let fd = fd_gradient(
            &params,
            |p| surrogate(p, &old, &group, &s, &obj).unwrap(),
            1e-6,
        );
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-3 * scale.max(1e-8), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let s = scenario(ScenarioKind::Straight, 2);
        let cfg = GrpoConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let p = PolicyParams::new(6, 0.0);
        let mut opt = Optimizer::new(cfg.optimizer, 0.0, p.len());
        let out = train_step(&p, &p, &s, &cfg, &mut opt, 0).unwrap();
        assert_eq!(out.params, p);
    }

    #[test]
    fn train_step_is_deterministic() {
        let s = scenario(ScenarioKind::ConstantTurn, 2);
        let cfg = GrpoConfig::default();
        let p = PolicyParams::new(6, 0.0);
        let run = || {
            let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, p.len());
            train_step(&p, &p, &s, &cfg, &mut opt, 4).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.group, b.group);
        assert_eq!(a.diagnostics, b.diagnostics);
        assert!(a
            .group
            .responses
            .iter()
            .all(|r| r.starts_with("<think>toy policy rollout</think>")));
    }

    #[test]
    fn one_step_reduces_expected_r_pos() {
        // one-sided sign test: P(X >= 269 | n = 500, p = 0.5) < 0.05.
        // The per-step effect is small next to sampling noise, so 50
        // replicates cannot resolve it.
        let cfg = GrpoConfig::default();
        let mut decreases = 0;
        for seed in 0..500u64 {
            let s = scenario(ScenarioKind::Straight, seed);
            let p = PolicyParams::new(6, 0.0);
            let cfg = GrpoConfig {
                seed,
                ..cfg.clone()
            };
            let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, p.len());
            let out = train_step(&p, &p, &s, &cfg, &mut opt, 0).unwrap();
            if expected_r_pos(&out.params, &s).unwrap() <= expected_r_pos(&p, &s).unwrap() {
                decreases += 1;
            }
        }
        assert!(decreases >= 269, "{decreases}/500");
    }

    #[test]
    fn train_loop_basics() {
        let scenarios: Vec<Scenario> = (0..3).map(|i| scenario(ScenarioKind::Accel, i)).collect();
        let cfg = GrpoConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train_loop(&scenarios, &cfg).unwrap();
        assert_eq!(out.params, PolicyParams::new(6, cfg.init_log_std));
        assert!(out.history.is_empty());

        let cfg = GrpoConfig {
            iterations: 7,
            ..Default::default()
        };
        let a = train_loop(&scenarios, &cfg).unwrap();
        let b = train_loop(&scenarios, &cfg).unwrap();
        assert_eq!(a.history.len(), 7);
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history[4].scenario_id, scenarios[1].id);
        assert!(train_loop(&[], &cfg).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 1.0);
        assert_eq!(PolicyParams::from_flat(6, &p.to_flat()).unwrap(), p);
        assert!(PolicyParams::from_flat(5, &p.to_flat()).is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(
            rewards in prop::collection::vec(-100.0..100.0f64, 2..9),
            a in 0.01..100.0f64, b in -50.0..50.0f64,
        ) {
            let adv = advantages(&rewards, 1e-8).unwrap();
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let std = (adv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assume!(std > 0.0);
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((std - 1.0).abs() <= 1e-9);
            let scaled: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
            let adv2 = advantages(&scaled, 1e-8).unwrap();
            for (x, y) in adv.iter().zip(&adv2) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn kl_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = scenario(ScenarioKind::ConstantTurn, seed % 16);
            let p = random_params(&mut rng, 1.0);
            let r = random_params(&mut rng, 1.0);
            prop_assert!(kl_divergence(&p, &r, &s).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p, &s).unwrap(), 0.0);
        }
    }
}
