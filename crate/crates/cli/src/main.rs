//! Command-line front end: solve, evaluate, search and simulate.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use seqopt::backward::{should_take_observations, solve_limit, solve_truncated, LimitOptions, SolveOptions};
use seqopt::lagrange::{match_constraints, SearchConfig, DEFAULT_SEARCH_TOL};
use seqopt::lattice::Engine;
use seqopt::model::{PriorSelect, Problem, ProblemConfig};
use seqopt::monte_carlo::{simulate, SimConfig, ThetaMode};
use seqopt::policy::{extract_rule, StoppingRule, TiePolicy};
use seqopt::risk::{evaluate, DecisionStrategy, DecisionTable, EvaluateOptions};
use seqopt::sprt::{match_sprt_errors, sprt_rule, MatchOptions, DEFAULT_MAX_TAIL};
use seqopt::Error;

const EXIT_GENERIC: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_BUDGET: u8 = 5;
const EXIT_CAP_HIT: u8 = 6;

#[derive(Parser, Debug)]
#[command(name = "seqopt", version, about = "Optimal sequential decision procedures")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root of the output tree; each run writes to `<out>/<command>-<hash>/`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Backward induction: value tables, optimal rule, summary.
    Solve(SolveArgs),
    /// Exact risk report of a stopping rule.
    Evaluate(EvaluateArgs),
    /// Match constraint targets by multipliers, or error targets by an SPRT.
    Search(SearchArgs),
    /// Monte Carlo estimates for a stopping rule.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum EngineArg {
    Auto,
    HistoryTree,
    CountVector,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Auto => Engine::Auto,
            EngineArg::HistoryTree => Engine::HistoryTree,
            EngineArg::CountVector => Engine::CountVector,
        }
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    config: PathBuf,
    /// Truncation horizon N.
    #[arg(long, required_unless_present = "limit", conflicts_with = "limit")]
    horizon: Option<usize>,
    /// Double N until Q_0 settles.
    #[arg(long)]
    limit: bool,
    /// Limit mode: stop when successive Q_0 differ by less than this.
    #[arg(long, default_value_t = 1e-10, requires = "limit")]
    tol: f64,
    /// Limit mode: largest horizon tried.
    #[arg(long, default_value_t = 512, requires = "limit")]
    cap: usize,
    #[arg(long, value_enum, default_value_t = EngineArg::Auto)]
    engine: EngineArg,
    /// Treatment of states with l = Q: stop, continue, or a stopping probability.
    #[arg(long, default_value = "stop")]
    tie: String,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    config: PathBuf,
    #[arg(long)]
    rule: PathBuf,
    /// Terminal decisions; Bayes decisions when absent.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Evaluation horizon for rules that are not truncated.
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Lagrange,
    Sprt,
}

#[derive(Args, Debug)]
struct SearchArgs {
    config: PathBuf,
    /// Lagrange mode: bounds on the group losses W_i. SPRT mode: alpha,beta.
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Mode::Lagrange)]
    mode: Mode,
    /// Truncation horizon (Lagrange) or evaluation cap (SPRT).
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    /// Lagrange mode: matching tolerance on each W_i.
    #[arg(long, default_value_t = DEFAULT_SEARCH_TOL)]
    tol: f64,
    /// Lagrange mode: also match an SPRT and tabulate E tau per parameter.
    #[arg(long)]
    compare: bool,
    /// SPRT hypotheses as parameter labels; defaults to the first member of
    /// each constraint group, else the first two parameters.
    #[arg(long, value_delimiter = ',')]
    hypotheses: Option<Vec<String>>,
    /// Largest unstopped SPRT mass allowed at the cap.
    #[arg(long, default_value_t = DEFAULT_MAX_TAIL)]
    max_tail: f64,
    #[arg(long, value_enum, default_value_t = EngineArg::Auto)]
    engine: EngineArg,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    config: PathBuf,
    #[arg(long)]
    rule: PathBuf,
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest stage simulated.
    #[arg(long, default_value_t = 1_000)]
    cap: usize,
    /// `pi1`, `pi2`, or a parameter label to fix.
    #[arg(long, default_value = "pi2")]
    theta: String,
    /// Cap-hit fraction above which the run fails (results are still written).
    #[arg(long, default_value_t = 0.0)]
    cap_hit_threshold: f64,
    /// Write per-replication rows.
    #[arg(long)]
    trace: bool,
}

/// Raised after outputs are written when too many replications hit the cap.
#[derive(Debug)]
struct CapHit(f64);

impl std::fmt::Display for CapHit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cap-hit fraction {} exceeds the threshold", self.0)
    }
}

impl std::error::Error for CapHit {}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: String,
    config_sha256: String,
    run_id: String,
    parameters: Value,
    version: String,
    outputs: Vec<String>,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Reads the config and prepares `<out>/<command>-<id>/`, where the id
    /// hashes the config bytes together with the command parameters.
    fn start(out: &Path, command: &str, config: &Path, parameters: Value) -> anyhow::Result<(Self, Problem)> {
        let bytes = fs::read(config).with_context(|| format!("reading {}", config.display()))?;
        let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
        let problem = ProblemConfig::from_json(text)?.into_problem()?;
        let config_sha256 = hex::encode(Sha256::digest(&bytes));
        let mut h = Sha256::new();
        h.update(&bytes);
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(&parameters)?);
        let run_id = hex::encode(h.finalize())[..12].to_string();
        let dir = out.join(format!("{command}-{run_id}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = RunManifest {
            command: command.into(),
            config_path: config.display().to_string(),
            config_sha256,
            run_id,
            parameters,
            version: env!("CARGO_PKG_VERSION").into(),
            outputs: Vec::new(),
        };
        Ok((Self { dir, manifest }, problem))
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        f(&mut w)?;
        w.flush()?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// Writes the manifest through a temporary file and a rename.
    fn finish(self) -> anyhow::Result<PathBuf> {
        let tmp = self.dir.join(".manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&tmp, text)?;
        fs::rename(&tmp, self.dir.join("manifest.json"))?;
        Ok(self.dir)
    }
}

fn parse_tie(s: &str) -> anyhow::Result<TiePolicy> {
    match s {
        "stop" => Ok(TiePolicy::Stop),
        "continue" => Ok(TiePolicy::Continue),
        g => {
            let g: f64 = g.parse().map_err(|_| anyhow!("--tie must be stop, continue or a probability"))?;
            if !(0.0..=1.0).contains(&g) {
                bail!("--tie probability {g} is outside [0, 1]");
            }
            Ok(TiePolicy::Randomize(g))
        }
    }
}

fn read_rule(path: &Path) -> anyhow::Result<StoppingRule> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(StoppingRule::read_csv(f)?)
}

fn read_strategy(path: Option<&Path>) -> anyhow::Result<DecisionStrategy> {
    match path {
        None => Ok(DecisionStrategy::Bayes),
        Some(p) => {
            let f = File::open(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(DecisionStrategy::Table(DecisionTable::read_csv(f)?))
        }
    }
}

fn cmd_solve(out: &Path, a: &SolveArgs) -> anyhow::Result<()> {
    let tie = parse_tie(&a.tie)?;
    let params = json!({
        "horizon": a.horizon,
        "limit": a.limit,
        "tol": a.limit.then_some(a.tol),
        "cap": a.limit.then_some(a.cap),
        "engine": a.engine,
        "tie": a.tie,
    });
    let (mut run, p) = Run::start(out, "solve", &a.config, params)?;
    let opts = SolveOptions::with_engine(a.engine.into());
    let tables = match a.horizon {
        Some(n) => solve_truncated(&p, n, &opts)?,
        None => solve_limit(
            &p,
            &LimitOptions {
                tol: a.tol,
                cap: a.cap,
                ..LimitOptions::default()
            },
            &opts,
        )?,
    };
    let advice = should_take_observations(&tables, tables.l0());
    let rule = extract_rule(&tables, tie);
    run.write("values.csv", |w| Ok(tables.write_csv(w)?))?;
    run.write("rule.csv", |w| Ok(rule.write_csv(w)?))?;
    let decisions = DecisionTable::from_bayes(tables.history(), tables.horizon());
    run.write("decisions.csv", |w| Ok(decisions.write_csv(w)?))?;
    let summary = json!({
        "horizon": tables.horizon(),
        "engine": tables.engine().as_str(),
        "Q0": tables.q0(),
        "V0": tables.v0(),
        "l0": tables.l0(),
        "observe": advice.worthwhile,
        "margin": advice.margin,
        "ties": rule.ties().len(),
        "convergence": tables.convergence(),
    });
    run.write_json("summary.json", &summary)?;
    let mut text = format!(
        "horizon  {}\nengine   {}\nQ0       {}\nl0       {}\nobserve  {} (margin {})\n",
        tables.horizon(),
        tables.engine().as_str(),
        tables.q0(),
        tables.l0(),
        advice.worthwhile,
        advice.margin
    );
    if let Some(c) = tables.convergence() {
        text.push_str(&format!("converged {} (last change {:e})\n", c.converged, c.achieved_tol));
    }
    run.write("summary.txt", |w| Ok(w.write_all(text.as_bytes())?))?;
    print!("{text}");
    println!("wrote {}", run.finish()?.display());
    Ok(())
}

fn cmd_evaluate(out: &Path, a: &EvaluateArgs) -> anyhow::Result<()> {
    let params = json!({
        "rule": a.rule.display().to_string(),
        "decisions": a.decisions.as_ref().map(|d| d.display().to_string()),
        "cap": a.cap,
    });
    let (mut run, p) = Run::start(out, "evaluate", &a.config, params)?;
    let rule = read_rule(&a.rule)?;
    let strategy = read_strategy(a.decisions.as_deref())?;
    let r = evaluate(
        &p,
        &rule,
        &strategy,
        &EvaluateOptions {
            cap: a.cap,
            ..EvaluateOptions::default()
        },
    )?;
    run.write_json("report.json", &r)?;
    run.write("summary.csv", |w| Ok(r.write_summary_csv(w)?))?;
    run.write("stop_dist.csv", |w| Ok(r.write_stop_dist_csv(w)?))?;
    match r.R {
        Some(risk) => println!("R = {risk}  (N = {}, W = {})", r.N_psi, r.W),
        None => println!(
            "R infinite: {} of the mass is unstopped at stage {} (N up to there {}, W = {})",
            1.0 - r.mass_stopped,
            r.horizon,
            r.N_psi,
            r.W
        ),
    }
    println!("wrote {}", run.finish()?.display());
    Ok(())
}

fn hypotheses(p: &Problem, given: Option<&[String]>) -> anyhow::Result<(usize, usize)> {
    let idx = |label: &str| {
        p.params()
            .index_of(label)
            .ok_or_else(|| Error::DimensionMismatch(format!("unknown parameter {label:?}")))
    };
    match given {
        Some([a, b]) => Ok((idx(a)?, idx(b)?)),
        Some(_) => Err(Error::DimensionMismatch("--hypotheses takes two labels".into()).into()),
        None => match p.constraints() {
            Some(c) if c.len() == 2 => Ok((c.groups[0][0], c.groups[1][0])),
            _ => Ok((0, 1)),
        },
    }
}

/// Lowest-loss decision for `theta`.
fn decision_for(p: &Problem, theta: usize) -> usize {
    let row = &p.loss().matrix[theta];
    (0..row.len()).fold(0, |best, d| if row[d] < row[best] { d } else { best })
}

fn cmd_search(out: &Path, a: &SearchArgs) -> anyhow::Result<()> {
    let params = json!({
        "targets": a.targets,
        "mode": a.mode,
        "horizon": a.horizon,
        "tol": a.tol,
        "compare": a.compare,
        "hypotheses": a.hypotheses,
        "max_tail": a.max_tail,
        "engine": a.engine,
    });
    let (mut run, p) = Run::start(out, "search", &a.config, params)?;
    let hyps = hypotheses(&p, a.hypotheses.as_deref())?;
    let sprt_opts = MatchOptions {
        max_tail: a.max_tail,
        ..MatchOptions::default()
    };
    match a.mode {
        Mode::Sprt => {
            let [alpha, beta] = a.targets[..] else {
                return Err(Error::DimensionMismatch("SPRT mode takes two targets: alpha,beta".into()).into());
            };
            let m = match_sprt_errors(&p, hyps, alpha, beta, a.horizon, &sprt_opts)?;
            let (rule, dec) = sprt_rule(&p, &m.spec)?;
            run.write_json("sprt.json", &m)?;
            run.write("rule.csv", |w| Ok(rule.write_csv(w)?))?;
            run.write("decisions.csv", |w| Ok(dec.write_csv(w)?))?;
            println!(
                "SPRT thresholds A = {}, B = {} (Wald: {}, {})",
                m.spec.upper, m.spec.lower, m.wald.0, m.wald.1
            );
            println!("alpha = {}, beta = {}, max tail {:e}", m.oc.alpha, m.oc.beta, m.oc.max_tail());
            for (t, e) in m.oc.expected_n.iter().enumerate() {
                println!("E tau [{}] = {e}", p.params().label(t));
            }
        }
        Mode::Lagrange => {
            let cfg = SearchConfig {
                tol: a.tol,
                engine: a.engine.into(),
                ..SearchConfig::new(a.horizon)
            };
            let res = match_constraints(&p, &a.targets, &cfg)?;
            run.write_json("result.json", &res)?;
            run.write("trace.csv", |w| Ok(res.write_trace_csv(w)?))?;
            run.write("rule.csv", |w| Ok(res.rule.write_csv(w)?))?;
            run.write("decisions.csv", |w| Ok(res.decisions.write_csv(w)?))?;
            run.write_json("report.json", &res.report)?;
            println!("status {:?}, converged {}", res.status, res.converged);
            println!("lambda   {:?}", res.lambda);
            println!("achieved {:?} (targets {:?})", res.achieved, res.targets);
            println!("N        {}", res.n_psi);
            if a.compare {
                let r = &res.report;
                let alpha = r.decision_probs[hyps.0][decision_for(&p, hyps.1)];
                let beta = r.decision_probs[hyps.1][decision_for(&p, hyps.0)];
                // Strictly inside the optimizer's errors, so the SPRT cut at
                // the horizon is feasible for the same problem.
                let slack = a.max_tail;
                let m = match_sprt_errors(&p, hyps, alpha - slack, beta - slack, a.horizon, &sprt_opts)?;
                run.write_json("sprt.json", &m)?;
                let mut table = String::from("parameter,optimal_e_tau,sprt_e_tau,difference\n");
                println!("\n{:<16} {:>14} {:>14} {:>12}", "parameter", "optimal E tau", "SPRT E tau", "difference");
                for t in 0..p.num_params() {
                    let (o, s) = (r.N_theta[t], m.oc.expected_n[t]);
                    let label = p.params().label(t);
                    table.push_str(&format!("{label},{o},{s},{}\n", s - o));
                    println!("{label:<16} {o:>14.6} {s:>14.6} {:>12.6}", s - o);
                }
                println!(
                    "errors optimal ({alpha:.6}, {beta:.6}), SPRT ({:.6}, {:.6})",
                    m.oc.alpha, m.oc.beta
                );
                run.write("compare.csv", |w| Ok(w.write_all(table.as_bytes())?))?;
            }
        }
    }
    println!("wrote {}", run.finish()?.display());
    Ok(())
}

fn cmd_simulate(out: &Path, a: &SimulateArgs) -> anyhow::Result<()> {
    let params = json!({
        "rule": a.rule.display().to_string(),
        "decisions": a.decisions.as_ref().map(|d| d.display().to_string()),
        "reps": a.reps,
        "seed": a.seed,
        "cap": a.cap,
        "theta": a.theta,
        "cap_hit_threshold": a.cap_hit_threshold,
        "trace": a.trace,
    });
    let (mut run, p) = Run::start(out, "simulate", &a.config, params)?;
    let rule = read_rule(&a.rule)?;
    let strategy = read_strategy(a.decisions.as_deref())?;
    let theta_mode = match a.theta.as_str() {
        "pi1" => ThetaMode::Prior(PriorSelect::Pi1),
        "pi2" => ThetaMode::Prior(PriorSelect::Pi2),
        label => ThetaMode::Fixed(
            p.params()
                .index_of(label)
                .ok_or_else(|| Error::DimensionMismatch(format!("unknown parameter {label:?}")))?,
        ),
    };
    let cfg = SimConfig {
        replications: a.reps,
        seed: a.seed,
        cap: a.cap,
        theta_mode,
        cap_hit_threshold: a.cap_hit_threshold,
        trace: a.trace,
    };
    let est = simulate(&p, &rule, &strategy, &cfg)?;
    run.write_json("estimates.json", &est)?;
    if a.trace {
        run.write("trace.csv", |w| Ok(est.write_trace_csv(w)?))?;
    }
    println!("tau  = {} +- {}", est.tau.mean, est.tau.se);
    println!("loss = {} +- {}", est.loss.mean, est.loss.se);
    if est.cap_hit_fraction > 0.0 {
        eprintln!(
            "warning: {:.2}% of the replications reached the cap {} without stopping",
            100.0 * est.cap_hit_fraction,
            a.cap
        );
    }
    println!("wrote {}", run.finish()?.display());
    if est.flagged {
        return Err(CapHit(est.cap_hit_fraction).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CapHit>().is_some() {
        return EXIT_CAP_HIT;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Validation(_)
            | Error::Parse(_)
            | Error::Json(_)
            | Error::DimensionMismatch(_)
            | Error::SymbolOutOfAlphabet { .. }
            | Error::PsiOutOfRange { .. }
            | Error::RuleTooShort { .. }
            | Error::DecisionUndefined { .. }
            | Error::NoConstraintGroups
            | Error::NotIid
            | Error::HorizonExceeded { .. }
            | Error::KernelUndefined { .. }
            | Error::ZeroProbabilityHistory(_),
        ) => EXIT_VALIDATION,
        Some(Error::InfeasibleTargets(_) | Error::TailMassExceeded { .. }) => EXIT_INFEASIBLE,
        Some(Error::BudgetExceeded { .. } | Error::SearchBudgetExhausted(_)) => EXIT_BUDGET,
        _ => EXIT_GENERIC,
    }
}

fn report(err: &anyhow::Error) {
    match err.downcast_ref::<Error>() {
        Some(Error::Validation(list)) => {
            eprintln!("error: invalid problem ({} violations)", list.len());
            for v in list {
                eprintln!("  - {v}");
            }
        }
        _ => {
            eprintln!("error: {err}");
            for cause in err.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(&cli.out, a),
        Command::Evaluate(a) => cmd_evaluate(&cli.out, a),
        Command::Search(a) => cmd_search(&cli.out, a),
        Command::Simulate(a) => cmd_simulate(&cli.out, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}
