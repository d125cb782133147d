//! Scenario files, horizon L2 evaluation, ablation runs and report output.
//!
//! # Scenario file
//!
//! UTF-8 text. The first line is a header object
//! `{"format":"drive-grpo-scenarios","version":1}`; every following non-blank
//! line is one scenario record:
//!
//! ```text
//! {"id": "...",
//!  "dt": 0.5,
//!  "history": [{"t":-1.5,"position":{"x":..,"y":..},"velocity":{..},
//!               "acceleration":{..},"heading":..,"steering":..}, ...],
//!  "ground_truth": [[x1, y1], [x2, y2], ...],
//!  "spec": {"wheelbase":2.7,"delta_max":0.6,"mu":0.8,"g":9.81,"jerk_limit":2.5}}
//! ```
//!
//! `dt` must be the same on every line. An empty file is an empty corpus.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::grpo::{member_rng, policy_sample, train_loop, GrpoConfig, PolicyParams};
use crate::model::{
    derive_motion, rollout_constant_accel, synth_scenario, History, Scenario, ScenarioKind,
    Trajectory, Vec2, VehicleSpec, VehicleState,
};
use crate::response::parse_response;
use crate::reward::{r_tem, RewardWeights};

pub const FILE_FORMAT: &str = "drive-grpo-scenarios";
pub const FILE_VERSION: u32 = 1;

/// Evaluation horizons in seconds.
pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

const REQUIRED_FIELDS: [&str; 5] = ["id", "dt", "history", "ground_truth", "spec"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: bad header: {message}")]
    Header { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    id: String,
    dt: f64,
    history: Vec<VehicleState>,
    ground_truth: Vec<[f64; 2]>,
    spec: VehicleSpec,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        Self {
            id: s.id.clone(),
            dt: s.ground_truth.dt,
            history: s.history.states.clone(),
            ground_truth: s
                .ground_truth
                .waypoints
                .iter()
                .map(|p| [p.x, p.y])
                .collect(),
            spec: s.spec,
        }
    }
}

impl From<ScenarioRecord> for Scenario {
    fn from(r: ScenarioRecord) -> Self {
        Scenario {
            id: r.id,
            history: History::new(r.history),
            ground_truth: Trajectory::new(
                r.ground_truth
                    .iter()
                    .map(|&[x, y]| Vec2::new(x, y))
                    .collect(),
                r.dt,
            ),
            spec: r.spec,
        }
    }
}

pub fn write_scenarios<W: Write>(mut w: W, scenarios: &[Scenario]) -> Result<(), DataError> {
    let header = FileHeader {
        format: FILE_FORMAT.into(),
        version: FILE_VERSION,
    };
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )?;
    for s in scenarios {
        let line = serde_json::to_string(&ScenarioRecord::from(s))
            .map_err(|e| Error::InvalidArgument(format!("scenario {}: {e}", s.id)))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_scenarios(&mut w, scenarios)?;
    w.flush()?;
    Ok(())
}

fn schema_err(line: usize, field: &str, message: impl Into<String>) -> DataError {
    DataError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_record(line_no: usize, line: &str) -> Result<Scenario, DataError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| schema_err(line_no, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err(line_no, "<record>", "expected a JSON object"))?;
    if let Some(missing) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
        return Err(schema_err(line_no, missing, "missing"));
    }
    if let Some(extra) = obj.keys().find(|k| !REQUIRED_FIELDS.contains(&k.as_str())) {
        return Err(schema_err(line_no, extra, "unknown field"));
    }
    for field in REQUIRED_FIELDS {
        let check = match field {
            "id" => serde_json::from_value::<String>(obj[field].clone()).err(),
            "dt" => serde_json::from_value::<f64>(obj[field].clone()).err(),
            "history" => serde_json::from_value::<Vec<VehicleState>>(obj[field].clone()).err(),
            "ground_truth" => serde_json::from_value::<Vec<[f64; 2]>>(obj[field].clone()).err(),
            _ => serde_json::from_value::<VehicleSpec>(obj[field].clone()).err(),
        };
        if let Some(e) = check {
            return Err(schema_err(line_no, field, e.to_string()));
        }
    }
    let record: ScenarioRecord = serde_json::from_value(value)
        .map_err(|e| schema_err(line_no, "<record>", e.to_string()))?;
    let scenario = Scenario::from(record);
    scenario.validate().map_err(|e| {
        let field = match e {
            Error::InvalidSpec(_) => "spec",
            Error::InvalidHistory(_) | Error::EmptyHistory => "history",
            Error::InvalidArgument(_) => "dt",
            _ => "ground_truth",
        };
        schema_err(line_no, field, e.to_string())
    })?;
    Ok(scenario)
}

pub fn read_scenarios<R: BufRead>(r: R) -> Result<Vec<Scenario>, DataError> {
    let mut out: Vec<Scenario> = Vec::new();
    let mut header_seen = false;
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let h: FileHeader = serde_json::from_str(&line).map_err(|e| DataError::Header {
                line: line_no,
                message: e.to_string(),
            })?;
            if h.format != FILE_FORMAT || h.version != FILE_VERSION {
                return Err(DataError::Header {
                    line: line_no,
                    message: format!(
                        "expected {FILE_FORMAT} version {FILE_VERSION}, got {} version {}",
                        h.format, h.version
                    ),
                });
            }
            header_seen = true;
            continue;
        }
        let s = parse_record(line_no, &line)?;
        if let Some(first) = out.first() {
            if (first.ground_truth.dt - s.ground_truth.dt).abs() > 1e-12 {
                return Err(schema_err(
                    line_no,
                    "dt",
                    format!(
                        "{} differs from file dt {}",
                        s.ground_truth.dt, first.ground_truth.dt
                    ),
                ));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>, DataError> {
    let file = std::fs::File::open(path)?;
    read_scenarios(BufReader::new(file))
}

/// Synthetic corpus of `count` scenarios cycling through `kinds`, seeded
/// `seed, seed + 1, …`.
pub fn synth_corpus(
    seed: u64,
    count: usize,
    kinds: &[ScenarioKind],
    spec: &VehicleSpec,
) -> Vec<Scenario> {
    (0..count)
        .map(|i| synth_scenario(seed + i as u64, kinds[i % kinds.len()], spec))
        .collect()
}

/// Shifts every ground-truth waypoint by `offset`; the history is unchanged.
pub fn perturb_positions(scenario: &Scenario, offset: Vec2) -> Scenario {
    Scenario {
        id: format!("{}+offset", scenario.id),
        ground_truth: scenario.ground_truth.translated(offset),
        ..scenario.clone()
    }
}

/// One model output keyed by scenario id: `{"id": "...", "response": "..."}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub id: String,
    pub response: String,
}

/// Reads a JSON-lines response file. Blank lines are skipped.
pub fn read_responses<R: BufRead>(r: R) -> Result<Vec<ResponseRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| schema_err(i + 1, "<record>", e.to_string()))?;
        for field in ["id", "response"] {
            match value.get(field) {
                None => return Err(schema_err(i + 1, field, "missing")),
                Some(v) if !v.is_string() => {
                    return Err(schema_err(i + 1, field, "expected a string"))
                }
                Some(_) => {}
            }
        }
        out.push(
            serde_json::from_value(value)
                .map_err(|e| schema_err(i + 1, "<record>", e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn load_responses(path: impl AsRef<Path>) -> Result<Vec<ResponseRecord>, DataError> {
    read_responses(BufReader::new(std::fs::File::open(path)?))
}

/// Predictor that answers with the parsed `<answer>` of the matching record.
pub fn response_predictor(
    records: &[ResponseRecord],
) -> impl Fn(&Scenario) -> crate::Result<Trajectory> + '_ {
    let by_id: std::collections::HashMap<&str, &str> = records
        .iter()
        .map(|r| (r.id.as_str(), r.response.as_str()))
        .collect();
    move |s| {
        let text = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no response for scenario {}", s.id)))?;
        let mut t = parse_response(text)
            .map_err(|e| Error::InvalidArgument(format!("unparseable response: {e}")))?
            .answer;
        t.dt = s.ground_truth.dt;
        Ok(t)
    }
}

/// Horizon L2 errors in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRow {
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_avg: f64,
}

impl EvalRow {
    pub fn from_horizons(l2_1s: f64, l2_2s: f64, l2_3s: f64) -> Self {
        Self {
            l2_1s,
            l2_2s,
            l2_3s,
            l2_avg: (l2_1s + l2_2s + l2_3s) / 3.0,
        }
    }
}

/// Endpoint distance at 1 s, 2 s and 3 s plus their mean.
pub fn l2_at_horizons(pred: &Trajectory, gt: &Trajectory) -> crate::Result<EvalRow> {
    let expected = (HORIZONS[2] / gt.dt).round() as usize;
    if gt.len() != expected || pred.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "horizon evaluation needs {expected} waypoints, got pred {} and gt {}",
            pred.len(),
            gt.len()
        )));
    }
    if (pred.dt - gt.dt).abs() > 1e-12 {
        return Err(Error::DtMismatch {
            pred: pred.dt,
            gt: gt.dt,
        });
    }
    let mut d = [0.0; 3];
    for (slot, h) in d.iter_mut().zip(HORIZONS) {
        let steps = h / gt.dt;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "horizon {h} s is not a multiple of dt {}",
                gt.dt
            )));
        }
        let k = steps.round() as usize - 1;
        *slot = (pred.waypoints[k] - gt.waypoints[k]).norm();
    }
    Ok(EvalRow::from_horizons(d[0], d[1], d[2]))
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub id: String,
    pub row: Option<EvalRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEval {
    /// Unweighted mean over evaluated scenarios; `None` if all were skipped.
    pub corpus: Option<EvalRow>,
    pub rows: Vec<ScenarioEval>,
    pub skipped: usize,
}

/// Evaluates `predictor` on every scenario. Predictor or metric failures are
/// recorded as skipped rows.
pub fn evaluate_corpus<F>(scenarios: &[Scenario], predictor: F) -> CorpusEval
where
    F: Fn(&Scenario) -> crate::Result<Trajectory>,
{
    let rows: Vec<ScenarioEval> = scenarios
        .iter()
        .map(
            |s| match predictor(s).and_then(|p| l2_at_horizons(&p, &s.ground_truth)) {
                Ok(row) => ScenarioEval {
                    id: s.id.clone(),
                    row: Some(row),
                    error: None,
                },
                Err(e) => ScenarioEval {
                    id: s.id.clone(),
                    row: None,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();
    let ok: Vec<EvalRow> = rows.iter().filter_map(|r| r.row).collect();
    let skipped = rows.len() - ok.len();
    let corpus = (!ok.is_empty()).then(|| EvalRow {
        l2_1s: stable_mean(ok.iter().map(|r| r.l2_1s).collect()),
        l2_2s: stable_mean(ok.iter().map(|r| r.l2_2s).collect()),
        l2_3s: stable_mean(ok.iter().map(|r| r.l2_3s).collect()),
        l2_avg: stable_mean(ok.iter().map(|r| r.l2_avg).collect()),
    });
    CorpusEval {
        corpus,
        rows,
        skipped,
    }
}

/// Constant-acceleration extrapolation matching the ground-truth length.
pub fn baseline_predictor(s: &Scenario) -> crate::Result<Trajectory> {
    rollout_constant_accel(&s.history, s.ground_truth.len(), s.ground_truth.dt)
}

pub fn echo_predictor(s: &Scenario) -> crate::Result<Trajectory> {
    Ok(s.ground_truth.clone())
}

/// Mean trajectory of a trained policy.
pub fn policy_predictor(
    params: &PolicyParams,
) -> impl Fn(&Scenario) -> crate::Result<Trajectory> + '_ {
    move |s| params.mean_trajectory(s)
}

/// Mean `r_tem` of `samples` policy draws per scenario.
pub fn output_r_tem(
    params: &PolicyParams,
    scenarios: &[Scenario],
    seed: u64,
    samples: usize,
) -> crate::Result<f64> {
    let mut vals = Vec::with_capacity(scenarios.len() * samples);
    for (i, s) in scenarios.iter().enumerate() {
        for k in 0..samples {
            let mut rng = member_rng(seed, i as u64, k as u64);
            let (t, _) = policy_sample(params, s, &mut rng)?;
            vals.push(r_tem(&derive_motion(&t, s.anchor())?)?);
        }
    }
    Ok(stable_mean(vals))
}

/// Reward component that an ablation can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Pos,
    Ste,
    Vel,
    Tem,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Pos,
        Component::Ste,
        Component::Vel,
        Component::Tem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Pos => "pos",
            Component::Ste => "ste",
            Component::Vel => "vel",
            Component::Tem => "tem",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown reward component '{s}'")))
    }
}

/// A set of reward components whose weights are zeroed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Toggle {
    pub disabled: Vec<Component>,
}

impl Toggle {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn without(components: &[Component]) -> Self {
        Self {
            disabled: components.to_vec(),
        }
    }

    /// The full run followed by one single-component removal per term.
    pub fn standard_set() -> Vec<Toggle> {
        std::iter::once(Toggle::full())
            .chain(Component::ALL.iter().map(|c| Toggle::without(&[*c])))
            .collect()
    }

    pub fn label(&self) -> String {
        if self.disabled.is_empty() {
            return "full".into();
        }
        if Component::ALL.iter().all(|c| self.disabled.contains(c)) {
            return "format only".into();
        }
        let names: Vec<&str> = self.disabled.iter().map(|c| c.as_str()).collect();
        format!("w/o {}", names.join("+"))
    }

    pub fn apply(&self, base: RewardWeights) -> RewardWeights {
        let mut w = base;
        for c in &self.disabled {
            match c {
                Component::Pos => w.pos = 0.0,
                Component::Ste => w.ste = 0.0,
                Component::Vel => w.vel = 0.0,
                Component::Tem => w.tem = 0.0,
            }
        }
        w
    }
}

impl std::str::FromStr for Toggle {
    type Err = Error;

    /// `full`, `none` (format only), or `+`-joined components to disable,
    /// e.g. `pos` or `pos+tem`.
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "full" => Ok(Toggle::full()),
            "none" => Ok(Toggle::without(&Component::ALL)),
            _ => Ok(Toggle {
                disabled: s.split('+').map(str::parse).collect::<crate::Result<_>>()?,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub weights: RewardWeights,
    pub eval: EvalRow,
    /// Mean smoothness error of sampled outputs on the evaluation corpus.
    pub output_r_tem: f64,
    pub final_mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline: EvalRow,
    pub rows: Vec<AblationRow>,
}

/// Samples per scenario when measuring output smoothness.
pub const OUTPUT_SAMPLES: usize = 4;

/// Trains one policy per toggle set with identical seeds and evaluates each
/// on `eval`.
pub fn run_ablation(
    config: &GrpoConfig,
    train: &[Scenario],
    eval: &[Scenario],
    toggles: &[Toggle],
) -> crate::Result<AblationTable> {
    let baseline = evaluate_corpus(eval, baseline_predictor)
        .corpus
        .ok_or_else(|| Error::InvalidArgument("empty evaluation corpus".into()))?;
    let mut rows = Vec::with_capacity(toggles.len());
    for t in toggles {
        let mut cfg = config.clone();
        cfg.reward.weights = t.apply(config.reward.weights);
        let out = train_loop(train, &cfg)?;
        let ev = evaluate_corpus(eval, policy_predictor(&out.params));
        let eval_row = ev
            .corpus
            .ok_or_else(|| Error::InvalidArgument("policy produced no evaluable rows".into()))?;
        let tail = out.history.len().clamp(1, 50);
        let final_mean_reward = out.history[out.history.len().saturating_sub(tail)..]
            .iter()
            .map(|d| d.mean_reward)
            .sum::<f64>()
            / tail as f64;
        rows.push(AblationRow {
            label: t.label(),
            weights: cfg.reward.weights,
            eval: eval_row,
            output_r_tem: output_r_tem(&out.params, eval, config.seed, OUTPUT_SAMPLES)?,
            final_mean_reward,
        });
    }
    Ok(AblationTable { baseline, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub group_size: usize,
    pub per_seed: Vec<EvalRow>,
    /// Median over seeds of each column.
    pub median: EvalRow,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains one policy per (group size, seed) and reports per-size medians.
pub fn run_group_sweep(
    config: &GrpoConfig,
    train: &[Scenario],
    eval: &[Scenario],
    group_sizes: &[usize],
    seeds: &[u64],
) -> crate::Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "group sweep needs at least one seed".into(),
        ));
    }
    group_sizes
        .iter()
        .map(|&g| {
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let cfg = GrpoConfig {
                        group_size: g,
                        seed,
                        ..config.clone()
                    };
                    let out = train_loop(train, &cfg)?;
                    evaluate_corpus(eval, policy_predictor(&out.params))
                        .corpus
                        .ok_or_else(|| Error::InvalidArgument("no evaluable rows".into()))
                })
                .collect::<crate::Result<Vec<EvalRow>>>()?;
            let col = |f: fn(&EvalRow) -> f64| median(per_seed.iter().map(f).collect());
            let median = EvalRow {
                l2_1s: col(|r| r.l2_1s),
                l2_2s: col(|r| r.l2_2s),
                l2_3s: col(|r| r.l2_3s),
                l2_avg: col(|r| r.l2_avg),
            };
            Ok(SweepRow {
                group_size: g,
                per_seed,
                median,
            })
        })
        .collect()
}

/// Output encoding for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

/// Renders labelled rows in `format`. JSON emits one object per line with
/// `extra` merged into the row fields.
pub fn render_rows<T: Serialize>(
    format: ReportFormat,
    headers: &[&str],
    rows: &[(Vec<String>, T)],
) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            for (_, value) in rows {
                out.push_str(&serde_json::to_string(value).expect("report rows serialize"));
                out.push('\n');
            }
        }
        ReportFormat::Csv => {
            out.push_str(&headers.join(","));
            out.push('\n');
            for (cells, _) in rows {
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Table => {
            let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
            for (cells, _) in rows {
                for (w, c) in widths.iter_mut().zip(cells) {
                    *w = (*w).max(c.len());
                }
            }
            let line = |cells: Vec<&str>, out: &mut String| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| {
                        if i == 0 {
                            format!("{c:<w$}")
                        } else {
                            format!("{c:>w$}")
                        }
                    })
                    .collect();
                let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
            };
            line(headers.to_vec(), &mut out);
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-+-"));
            for (cells, _) in rows {
                line(cells.iter().map(String::as_str).collect(), &mut out);
            }
        }
    }
    out
}

pub fn fmt_m(v: f64) -> String {
    format!("{v:.4}")
}

/// Cells for an [`EvalRow`]: 1s, 2s, 3s, avg.
pub fn eval_cells(r: &EvalRow) -> Vec<String> {
    vec![
        fmt_m(r.l2_1s),
        fmt_m(r.l2_2s),
        fmt_m(r.l2_3s),
        fmt_m(r.l2_avg),
    ]
}
