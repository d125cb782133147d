use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use drive_grpo::grpo::{train_loop, GrpoConfig, PolicyParams};
use drive_grpo::harness::{
    baseline_predictor, echo_predictor, eval_cells, evaluate_corpus, fmt_m, load_responses,
    load_scenarios, perturb_positions, policy_predictor, render_rows, response_predictor,
    run_ablation, run_group_sweep, synth_corpus, write_scenarios, CorpusEval, DataError,
    ReportFormat, Toggle,
};
use drive_grpo::kinematics::check_feasible;
use drive_grpo::response::{parse_response, validate_cot};
use drive_grpo::reward::{total_reward, RewardWeights};
use drive_grpo::{Scenario, ScenarioKind, Vec2, VehicleSpec};

#[derive(Debug, Parser)]
#[command(
    name = "drive-grpo",
    version,
    about = "Trajectory rewards and GRPO training on a toy planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PredictorKind {
    /// Constant-acceleration extrapolation of the history.
    Baseline,
    /// Ground truth itself.
    Echo,
    /// Mean of a trained policy (`--params`).
    Policy,
    /// Answers from a response file (`--responses`).
    Responses,
}

#[derive(Debug, Args)]
struct Common {
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Debug, Args)]
struct Corpus {
    /// Scenario file; a synthetic corpus is generated when omitted.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Size of the synthetic corpus.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Comma-separated scenario kinds of the synthetic corpus.
    #[arg(long, default_value = "constant_turn", value_delimiter = ',')]
    kinds: Vec<ScenarioKind>,
}

#[derive(Debug, Args)]
struct Training {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    group_size: usize,
    #[arg(long, default_value_t = 0.04)]
    beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Reward weights as `pos,ste,vel,tem`.
    #[arg(long, default_value = "1,1,1,1")]
    weights: RewardWeights,
}

impl Training {
    fn config(&self) -> GrpoConfig {
        let mut cfg = GrpoConfig {
            group_size: self.group_size,
            beta: self.beta,
            learning_rate: self.lr,
            iterations: self.iterations,
            seed: self.seed,
            ..GrpoConfig::default()
        };
        cfg.reward.weights = self.weights;
        cfg
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario file.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(
            long,
            default_value = "straight,constant_turn,accel,brake",
            value_delimiter = ','
        )]
        kinds: Vec<ScenarioKind>,
        /// Shift every ground-truth waypoint by `dx,dy` meters.
        #[arg(
            long,
            value_delimiter = ',',
            num_args = 2,
            allow_negative_numbers = true
        )]
        perturb: Option<Vec<f64>>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Horizon L2 evaluation of a predictor on a scenario file.
    Eval {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long, value_enum, default_value = "baseline")]
        predictor: PredictorKind,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Exit with status 3 unless every scenario is evaluated and the
        /// corpus average error is at most this many meters.
        #[arg(long = "assert", value_name = "MAX_AVG")]
        assert_max: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score model responses against their scenarios.
    Reward {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "1,1,1,1")]
        weights: RewardWeights,
        #[command(flatten)]
        common: Common,
    },
    /// Kinematic feasibility of ground truths, or of response answers when
    /// `--responses` is given, plus reasoning-stage coverage.
    Validate {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        responses: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy policy and print per-iteration diagnostics.
    Train {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        training: Training,
        /// Write the final policy parameters as JSON.
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one policy per reward-term toggle and compare them.
    Ablate {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        training: Training,
        /// Toggles: `full`, `none`, or `+`-joined terms to drop.
        #[arg(long, value_delimiter = ',', default_value = "full,pos,ste,vel,tem")]
        toggles: Vec<Toggle>,
        /// Ground-truth offset `dx,dy` applied to train and eval corpora.
        #[arg(
            long,
            value_delimiter = ',',
            num_args = 2,
            default_value = "0,0.5",
            allow_negative_numbers = true
        )]
        perturb: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        eval_count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Group-size sweep with per-size medians over seeds.
    SweepG {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        training: Training,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        groups: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        eval_count: usize,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Assertion(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Assertion(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Assertion(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<drive_grpo::Error> for Failure {
    fn from(e: drive_grpo::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::Data(e.to_string()))
        }
    }
}

fn corpus(c: &Corpus, seed: u64) -> CliResult<Vec<Scenario>> {
    let scenarios = match &c.scenarios {
        Some(p) => load_scenarios(p)?,
        None => {
            if c.kinds.is_empty() {
                return Err(Failure::Usage("--kinds must name at least one kind".into()));
            }
            synth_corpus(seed, c.count, &c.kinds, &VehicleSpec::default())
        }
    };
    if scenarios.is_empty() {
        return Err(Failure::Data("scenario corpus is empty".into()));
    }
    Ok(scenarios)
}

/// Held-out corpus drawn from seeds disjoint from the training corpus.
fn eval_corpus(
    c: &Corpus,
    seed: u64,
    count: usize,
    train: &[Scenario],
) -> CliResult<Vec<Scenario>> {
    match &c.scenarios {
        Some(_) => Ok(train.to_vec()),
        None => Ok(synth_corpus(
            seed.wrapping_add(1_000_000),
            count,
            &c.kinds,
            &VehicleSpec::default(),
        )),
    }
}

fn offset(v: &[f64]) -> CliResult<Vec2> {
    match v {
        [dx, dy] => Ok(Vec2::new(*dx, *dy)),
        _ => Err(Failure::Usage("offset needs two values dx,dy".into())),
    }
}

fn eval_report(ev: &CorpusEval, format: ReportFormat) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        l2_1s: Option<f64>,
        l2_2s: Option<f64>,
        l2_3s: Option<f64>,
        l2_avg: Option<f64>,
        error: Option<&'a str>,
    }
    let mut rows: Vec<(Vec<String>, Row)> = ev
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.id.clone()];
            match (&r.row, &r.error) {
                (Some(e), _) => cells.extend(eval_cells(e)),
                (None, err) => {
                    cells.extend(std::iter::repeat_n("-".to_string(), 4));
                    cells.push(format!("skipped: {}", err.as_deref().unwrap_or("")));
                }
            }
            cells.resize(6, String::new());
            let row = Row {
                id: &r.id,
                l2_1s: r.row.map(|e| e.l2_1s),
                l2_2s: r.row.map(|e| e.l2_2s),
                l2_3s: r.row.map(|e| e.l2_3s),
                l2_avg: r.row.map(|e| e.l2_avg),
                error: r.error.as_deref(),
            };
            (cells, row)
        })
        .collect();
    let mut cells = vec!["corpus".to_string()];
    match &ev.corpus {
        Some(c) => cells.extend(eval_cells(c)),
        None => cells.extend(std::iter::repeat_n("-".to_string(), 4)),
    }
    cells.push(format!("skipped {}", ev.skipped));
    rows.push((
        cells,
        Row {
            id: "corpus",
            l2_1s: ev.corpus.map(|e| e.l2_1s),
            l2_2s: ev.corpus.map(|e| e.l2_2s),
            l2_3s: ev.corpus.map(|e| e.l2_3s),
            l2_avg: ev.corpus.map(|e| e.l2_avg),
            error: None,
        },
    ));
    render_rows(
        format,
        &["id", "l2_1s", "l2_2s", "l2_3s", "l2_avg", "note"],
        &rows,
    )
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen {
            seed,
            count,
            kinds,
            perturb,
            out,
        } => {
            if kinds.is_empty() {
                return Err(Failure::Usage("--kinds must name at least one kind".into()));
            }
            let mut scenarios = synth_corpus(seed, count, &kinds, &VehicleSpec::default());
            if let Some(p) = perturb {
                let o = offset(&p)?;
                scenarios = scenarios.iter().map(|s| perturb_positions(s, o)).collect();
            }
            let mut buf = Vec::new();
            write_scenarios(&mut buf, &scenarios)?;
            emit(
                out.as_deref(),
                &String::from_utf8(buf).expect("json is utf-8"),
            )
        }
        Command::Eval {
            scenarios,
            predictor,
            params,
            responses,
            assert_max,
            common,
        } => {
            let scenarios = load_scenarios(&scenarios)?;
            let ev = match predictor {
                PredictorKind::Baseline => evaluate_corpus(&scenarios, baseline_predictor),
                PredictorKind::Echo => evaluate_corpus(&scenarios, echo_predictor),
                PredictorKind::Policy => {
                    let path = params.ok_or_else(|| {
                        Failure::Usage("--predictor policy needs --params".into())
                    })?;
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
                    let p: PolicyParams = serde_json::from_str(&text)
                        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
                    evaluate_corpus(&scenarios, policy_predictor(&p))
                }
                PredictorKind::Responses => {
                    let path = responses.ok_or_else(|| {
                        Failure::Usage("--predictor responses needs --responses".into())
                    })?;
                    let recs = load_responses(&path)?;
                    evaluate_corpus(&scenarios, response_predictor(&recs))
                }
            };
            emit(
                common.out.as_deref(),
                &eval_report(&ev, common.format.into()),
            )?;
            if let Some(max) = assert_max {
                match ev.corpus {
                    Some(c) if ev.skipped == 0 && c.l2_avg <= max => {}
                    Some(c) => return Err(Failure::Assertion(format!(
                        "corpus l2_avg {:.6} with {} skipped, required <= {max} with none skipped",
                        c.l2_avg, ev.skipped
                    ))),
                    None => {
                        return Err(Failure::Assertion("no scenario could be evaluated".into()))
                    }
                }
            }
            Ok(())
        }
        Command::Reward {
            scenarios,
            responses,
            weights,
            common,
        } => {
            weights.validate()?;
            let scenarios = load_scenarios(&scenarios)?;
            let recs = load_responses(&responses)?;
            let mut cfg = GrpoConfig::default().reward;
            cfg.weights = weights;
            let mut rows = Vec::with_capacity(recs.len());
            for r in &recs {
                let s = scenarios.iter().find(|s| s.id == r.id).ok_or_else(|| {
                    Failure::Data(format!("response id {} not in scenario file", r.id))
                })?;
                let b = total_reward(&r.response, s, &cfg);
                let cells = vec![
                    r.id.clone(),
                    format!("{:.0}", b.r_format),
                    opt_cell(b.r_pos),
                    opt_cell(b.r_ste),
                    opt_cell(b.r_vel),
                    opt_cell(b.r_tem),
                    format!("{:.6}", b.r_acc),
                    format!("{:.6}", b.total),
                ];
                #[derive(Serialize)]
                struct Row<'a> {
                    id: &'a str,
                    #[serde(flatten)]
                    breakdown: drive_grpo::reward::RewardBreakdown,
                }
                rows.push((
                    cells,
                    Row {
                        id: &r.id,
                        breakdown: b,
                    },
                ));
            }
            let headers = [
                "id", "r_format", "r_pos", "r_ste", "r_vel", "r_tem", "r_acc", "total",
            ];
            emit(
                common.out.as_deref(),
                &render_rows(common.format.into(), &headers, &rows),
            )
        }
        Command::Validate {
            scenarios,
            responses,
            common,
        } => {
            let scenarios = load_scenarios(&scenarios)?;
            let recs = responses.map(|p| load_responses(&p)).transpose()?;
            #[derive(Serialize)]
            struct Row {
                id: String,
                feasible: Option<bool>,
                min_radius: Option<f64>,
                max_lateral_accel: Option<f64>,
                max_abs_jerk: Option<f64>,
                cot_stages: Option<usize>,
                cot_ordered: Option<bool>,
                error: Option<String>,
            }
            let mut rows = Vec::new();
            for s in &scenarios {
                let (traj, cot) = match &recs {
                    None => (Ok(s.ground_truth.clone()), None),
                    Some(recs) => match recs.iter().find(|r| r.id == s.id) {
                        None => (Err("no response".to_string()), None),
                        Some(r) => {
                            let cot = validate_cot(&r.response);
                            let t = parse_response(&r.response)
                                .map(|m| m.answer)
                                .map_err(|e| e.to_string());
                            (t, Some(cot))
                        }
                    },
                };
                let report = traj.and_then(|mut t| {
                    t.dt = s.ground_truth.dt;
                    check_feasible(&t, s.anchor(), &s.spec).map_err(|e| e.to_string())
                });
                let row = match report {
                    Ok(r) => Row {
                        id: s.id.clone(),
                        feasible: Some(r.overall),
                        min_radius: r.min_radius.worst.map(|w| w.value),
                        max_lateral_accel: Some(r.lateral_accel.max.value),
                        max_abs_jerk: Some(r.jerk.max_abs.value),
                        cot_stages: cot.map(|c| c.stage_present.iter().filter(|&&p| p).count()),
                        cot_ordered: cot.map(|c| c.ordered),
                        error: None,
                    },
                    Err(e) => Row {
                        id: s.id.clone(),
                        feasible: None,
                        min_radius: None,
                        max_lateral_accel: None,
                        max_abs_jerk: None,
                        cot_stages: cot.map(|c| c.stage_present.iter().filter(|&&p| p).count()),
                        cot_ordered: cot.map(|c| c.ordered),
                        error: Some(e),
                    },
                };
                let cells = vec![
                    row.id.clone(),
                    row.feasible
                        .map_or("-".into(), |f| if f { "yes" } else { "no" }.to_string()),
                    row.min_radius.map_or("straight".into(), fmt_m),
                    row.max_lateral_accel.map_or("-".into(), fmt_m),
                    row.max_abs_jerk.map_or("-".into(), fmt_m),
                    row.cot_stages.map_or("-".into(), |n| format!("{n}/4")),
                    row.error.clone().unwrap_or_default(),
                ];
                rows.push((cells, row));
            }
            let headers = [
                "id",
                "feasible",
                "min_radius",
                "max_lat_acc",
                "max_jerk",
                "cot",
                "error",
            ];
            emit(
                common.out.as_deref(),
                &render_rows(common.format.into(), &headers, &rows),
            )
        }
        Command::Train {
            corpus: c,
            training,
            params,
            common,
        } => {
            let cfg = training.config();
            cfg.validate()?;
            let scenarios = corpus(&c, training.seed)?;
            let out = train_loop(&scenarios, &cfg)?;
            let rows: Vec<_> = out
                .history
                .iter()
                .map(|d| {
                    let cells = vec![
                        d.iteration.to_string(),
                        d.scenario_id.clone(),
                        format!("{:.6}", d.mean_reward),
                        format!("{:.6}", d.mean_r_pos),
                        format!("{:.6}", d.mean_r_tem),
                        format!("{:.3}", d.format_rate),
                        format!("{:.6}", d.surrogate),
                        format!("{:.6}", d.kl),
                        format!("{:.6}", d.grad_norm),
                        format!("{:.6}", d.mean_log_std),
                    ];
                    (cells, d)
                })
                .collect();
            let headers = [
                "iteration",
                "scenario",
                "mean_reward",
                "mean_r_pos",
                "mean_r_tem",
                "format_rate",
                "surrogate",
                "kl",
                "grad_norm",
                "mean_log_std",
            ];
            emit(
                common.out.as_deref(),
                &render_rows(common.format.into(), &headers, &rows),
            )?;
            if let Some(p) = params {
                let json = serde_json::to_string_pretty(&out.params).expect("params serialize");
                std::fs::write(&p, json + "\n")
                    .map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            }
            Ok(())
        }
        Command::Ablate {
            corpus: c,
            training,
            toggles,
            perturb,
            eval_count,
            common,
        } => {
            let cfg = training.config();
            cfg.validate()?;
            let o = offset(&perturb)?;
            let train: Vec<Scenario> = corpus(&c, training.seed)?
                .iter()
                .map(|s| perturb_positions(s, o))
                .collect();
            let eval: Vec<Scenario> = eval_corpus(&c, training.seed, eval_count, &train)?
                .iter()
                .map(|s| {
                    if c.scenarios.is_some() {
                        s.clone()
                    } else {
                        perturb_positions(s, o)
                    }
                })
                .collect();
            let table = run_ablation(&cfg, &train, &eval, &toggles)?;
            #[derive(Serialize)]
            struct Row<'a> {
                label: &'a str,
                l2_1s: f64,
                l2_2s: f64,
                l2_3s: f64,
                l2_avg: f64,
                output_r_tem: Option<f64>,
                final_mean_reward: Option<f64>,
            }
            let mut rows = vec![{
                let mut cells = vec!["baseline".to_string()];
                cells.extend(eval_cells(&table.baseline));
                cells.extend(["-".to_string(), "-".to_string()]);
                let b = &table.baseline;
                (
                    cells,
                    Row {
                        label: "baseline",
                        l2_1s: b.l2_1s,
                        l2_2s: b.l2_2s,
                        l2_3s: b.l2_3s,
                        l2_avg: b.l2_avg,
                        output_r_tem: None,
                        final_mean_reward: None,
                    },
                )
            }];
            for r in &table.rows {
                let mut cells = vec![r.label.clone()];
                cells.extend(eval_cells(&r.eval));
                cells.push(format!("{:.6}", r.output_r_tem));
                cells.push(format!("{:.4}", r.final_mean_reward));
                rows.push((
                    cells,
                    Row {
                        label: &r.label,
                        l2_1s: r.eval.l2_1s,
                        l2_2s: r.eval.l2_2s,
                        l2_3s: r.eval.l2_3s,
                        l2_avg: r.eval.l2_avg,
                        output_r_tem: Some(r.output_r_tem),
                        final_mean_reward: Some(r.final_mean_reward),
                    },
                ));
            }
            let headers = [
                "run",
                "l2_1s",
                "l2_2s",
                "l2_3s",
                "l2_avg",
                "output_r_tem",
                "final_reward",
            ];
            emit(
                common.out.as_deref(),
                &render_rows(common.format.into(), &headers, &rows),
            )
        }
        Command::SweepG {
            corpus: c,
            training,
            groups,
            seeds,
            eval_count,
            common,
        } => {
            let cfg = training.config();
            for &g in &groups {
                GrpoConfig {
                    group_size: g,
                    ..cfg.clone()
                }
                .validate()?;
            }
            let train = corpus(&c, training.seed)?;
            let eval = eval_corpus(&c, training.seed, eval_count, &train)?;
            let sweep = run_group_sweep(&cfg, &train, &eval, &groups, &seeds)?;
            let rows: Vec<_> = sweep
                .iter()
                .map(|r| {
                    let mut cells = vec![r.group_size.to_string()];
                    cells.extend(eval_cells(&r.median));
                    (cells, r)
                })
                .collect();
            let headers = ["group_size", "l2_1s", "l2_2s", "l2_3s", "l2_avg"];
            emit(
                common.out.as_deref(),
                &render_rows(common.format.into(), &headers, &rows),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
