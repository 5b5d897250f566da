//! The `run`, `solve`, `compare` and `diagnose` subcommands.

use std::path::{Path, PathBuf};

use mftq_core::oracles::{
    action_gap, error_bounds, phi_max, solve_mfc_fixed_point_best_effort, solve_mfcg_fixed_point,
    solve_mfg_fixed_point_best_effort, solve_sharp_equilibrium, BoundKind, FixedPointSolution,
    ModelConstants, SharpKind,
};
use mftq_core::schedules::validate_timescales;
use mftq_core::spaces::{l1_distance, sup_distance};
use mftq_core::trainers::{
    run_asynchronous, run_idealized, run_synchronous_stochastic, run_three_timescale,
    run_three_timescale_idealized,
};
use mftq_core::{Regime, RunTrace, TrainerConfig};
use rayon::prelude::*;

use crate::config::{ConfigError, ExperimentConfig, Tier};
use crate::model::Environment;
use crate::report::{fmt_f64, q_columns, read_trace, state_columns, write_trace, ReportError, Table, TraceRow};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("environment: {0}")]
    Environment(mftq_core::Error),
    #[error("{0}")]
    Runtime(String),
    #[error("output: {0}")]
    Output(#[from] ReportError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Environment(_) => 2,
            CliError::Runtime(_) | CliError::Output(_) => 3,
        }
    }
}

impl From<mftq_core::Error> for CliError {
    fn from(e: mftq_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.into())
    }
}

/// Files written by a command, and whether everything it solved converged.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub converged: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            3
        }
    }
}

struct Setup {
    cfg: ExperimentConfig,
    env: Environment,
    dir: PathBuf,
    quiet: bool,
}

impl Setup {
    fn load(opts: &Options) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::load(&opts.config)?;
        if let Some(seed) = opts.seed {
            cfg.override_seed(seed);
        }
        let env = Environment::build(&cfg.environment).map_err(CliError::Environment)?;
        let dir = opts.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            cfg,
            env,
            dir,
            quiet: opts.quiet,
        })
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}_{suffix}", self.cfg.output.prefix))
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn jobs(&self) -> Vec<(usize, u64)> {
        (0..self.cfg.timescales.len())
            .flat_map(|c| self.cfg.trainer.seeds.iter().map(move |&s| (c, s)))
            .collect()
    }

    fn trainer_config(&self, c: usize, seed: u64) -> TrainerConfig {
        let t = &self.cfg.trainer;
        let mut tc = TrainerConfig::new(t.gamma, t.phi, t.n_steps, self.cfg.timescales[c]).with_seed(seed);
        tc.trace_stride = t.trace_stride;
        tc.stop = t.stop;
        tc
    }

    fn train(&self, c: usize, seed: u64) -> mftq_core::Result<RunTrace> {
        let tc = self.trainer_config(c, seed);
        let x0 = self.cfg.trainer.initial_state;
        let two = || {
            self.env
                .two()
                .ok_or_else(|| mftq_core::Error::Config("this tier needs a single-population environment".into()))
        };
        match self.cfg.trainer.tier {
            Tier::Idealized => run_idealized(two()?, &tc),
            Tier::Synchronous => run_synchronous_stochastic(two()?, &tc),
            Tier::Asynchronous => run_asynchronous(two()?, &tc, x0),
            Tier::ThreeTimescale if self.cfg.trainer.idealized => {
                run_three_timescale_idealized(&*self.env.three(), &tc)
            }
            Tier::ThreeTimescale => run_three_timescale(&*self.env.three(), &tc, x0),
        }
    }

    /// Runs every (rate configuration, seed) pair on a pool of at most
    /// `MFTQ_THREADS` threads; `each` sees every finished run on its worker.
    fn train_all<F>(&self, each: F) -> Result<Vec<(usize, u64, RunTrace)>, CliError>
    where
        F: Fn(usize, u64, &RunTrace) -> Result<(), CliError> + Sync,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let results: Vec<Result<(usize, u64, RunTrace), CliError>> = pool.install(|| {
            self.jobs()
                .into_par_iter()
                .map(|(c, s)| {
                    let trace = self
                        .train(c, s)
                        .map_err(|e| CliError::Runtime(format!("config {c} seed {s}: {e}")))?;
                    each(c, s, &trace)?;
                    Ok((c, s, trace))
                })
                .collect()
        });
        results.into_iter().collect()
    }

    fn tracks_visits(&self) -> bool {
        match self.cfg.trainer.tier {
            Tier::Idealized => false,
            Tier::ThreeTimescale => !self.cfg.trainer.idealized,
            _ => true,
        }
    }

    fn has_loc(&self) -> bool {
        self.cfg.regime == Regime::Mfcg
    }

    fn state_header(&self) -> Vec<String> {
        let (nx, na) = (self.env.n_states(), self.env.n_actions());
        let mut h: Vec<String> = state_columns("mu", nx).collect();
        h.extend(q_columns(nx, na));
        if self.has_loc() {
            h.extend(state_columns("mu_loc", nx));
        }
        h
    }
}

/// `MFTQ_THREADS`, or zero (all logical processors) when unset or invalid.
fn thread_count() -> usize {
    std::env::var("MFTQ_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn state_fields(mu: &[f64], q: &[f64], loc: Option<&[f64]>) -> Vec<String> {
    mu.iter()
        .chain(q)
        .chain(loc.unwrap_or_default())
        .map(|&v| fmt_f64(v))
        .collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut m = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (acc, v) in m.iter_mut().zip(r) {
            *acc += v / n;
        }
    }
    m
}

fn flat_state(t: &RunTrace) -> Vec<f64> {
    let mut v = t.final_mu.as_slice().to_vec();
    v.extend_from_slice(t.final_q.as_slice());
    if let Some(l) = &t.final_mu_loc {
        v.extend_from_slice(l.as_slice());
    }
    v
}

fn checklist(cfg: &ExperimentConfig, c: usize) -> (String, String) {
    let report = validate_timescales(&cfg.timescales[c]);
    let list = ['a', 'b', 'c', 'd', 'e']
        .iter()
        .filter_map(|&id| report.status_of(id).map(|s| format!("{id}={}", s.as_str())))
        .collect::<Vec<_>>()
        .join(" ");
    (report.worst().as_str().to_string(), list)
}

fn run_scalars(t: &mut Table, cfg: &ExperimentConfig) {
    t.scalar("tier", cfg.trainer.tier.name());
    t.scalar("regime", cfg.regime);
    t.scalar("gamma", cfg.trainer.gamma);
    t.scalar("phi", cfg.trainer.phi);
    t.scalar("n_steps", cfg.trainer.n_steps);
    let seeds: Vec<String> = cfg.trainer.seeds.iter().map(u64::to_string).collect();
    t.scalar("seeds", seeds.join(" "));
}

pub fn cmd_run(opts: &Options) -> Result<Outcome, CliError> {
    let s = Setup::load(opts)?;
    let (nx, na) = (s.env.n_states(), s.env.n_actions());
    let trace_path = |c: usize, seed: u64| s.path(&format!("c{c}_s{seed}_trace.csv"));
    let runs = s.train_all(|c, seed, trace| {
        let rows: Vec<TraceRow> = trace.records.iter().map(TraceRow::from_record).collect();
        write_trace(&trace_path(c, seed), nx, na, &rows)?;
        Ok(())
    })?;

    let mut header: Vec<String> = [
        "config",
        "seed",
        "q_schedule",
        "mu_schedule",
        "mu_loc_schedule",
        "steps_run",
        "stopped_early",
    ]
    .map(String::from)
    .to_vec();
    header.extend(s.state_header());
    header.extend(
        ["min_visit_frequency", "unvisited_pairs", "schedule_status", "warnings"].map(String::from),
    );
    let mut table = Table::new(header);
    let mut files = Vec::new();
    for c in 0..s.cfg.timescales.len() {
        let ts = &s.cfg.timescales[c];
        let (status, _) = checklist(&s.cfg, c);
        let prefix = |seed: String, steps: String, stopped: String| {
            vec![
                c.to_string(),
                seed,
                ts.q_schedule.to_string(),
                ts.mu_schedule.to_string(),
                ts.mu_loc_schedule.map(|l| l.to_string()).unwrap_or_default(),
                steps,
                stopped,
            ]
        };
        let mine: Vec<&(usize, u64, RunTrace)> = runs.iter().filter(|r| r.0 == c).collect();
        for (_, seed, trace) in &mine {
            let mut row = prefix(seed.to_string(), trace.steps_run.to_string(), trace.stopped_early.to_string());
            row.extend(flat_state(trace).into_iter().map(fmt_f64));
            let (min_freq, unvisited) = if s.tracks_visits() {
                let f = trace.visit_frequencies().into_iter().fold(f64::INFINITY, f64::min);
                (fmt_f64(f), trace.unvisited_pairs().len().to_string())
            } else {
                (String::new(), String::new())
            };
            row.extend([min_freq, unvisited, status.clone(), trace.warnings.join("; ")]);
            table.push(row);
            files.push(trace_path(c, *seed));
            s.say(format!(
                "config {c} seed {seed}: mu = {} after {} steps",
                trace.final_mu, trace.steps_run
            ));
            for w in &trace.warnings {
                eprintln!("warning: config {c} seed {seed}: {w}");
            }
        }
        let states: Vec<Vec<f64>> = mine.iter().map(|r| flat_state(&r.2)).collect();
        let mut row = prefix("mean".into(), String::new(), String::new());
        row.extend(mean_rows(&states).into_iter().map(fmt_f64));
        row.extend([String::new(), String::new(), status, String::new()]);
        table.push(row);
    }
    run_scalars(&mut table, &s.cfg);
    for c in 0..s.cfg.timescales.len() {
        table.scalar(&format!("config_{c}_checks"), checklist(&s.cfg, c).1);
    }
    let path = s.path("summary.csv");
    table.write(&path)?;
    files.push(path);
    Ok(Outcome {
        files,
        converged: true,
    })
}

/// The regularized fixed point matching the configured regime.
fn oracle(s: &Setup) -> Result<FixedPointSolution, CliError> {
    let (g, phi) = (s.cfg.trainer.gamma, s.cfg.trainer.phi);
    let (tol, max_iter) = (s.cfg.oracle.tol, s.cfg.oracle.max_iter);
    Ok(match (s.cfg.regime, s.env.two()) {
        (Regime::Mfg, Some(e)) => solve_mfg_fixed_point_best_effort(e, g, phi, tol, max_iter)?,
        (Regime::Mfc, Some(e)) => solve_mfc_fixed_point_best_effort(e, g, phi, tol, max_iter)?,
        (Regime::Mfcg, _) => solve_mfcg_fixed_point(&*s.env.three(), g, phi, tol, max_iter)?,
        (_, None) => {
            return Err(CliError::Runtime(
                "MFG and MFC solves need a single-population environment".into(),
            ))
        }
    })
}

fn solution_scalars(t: &mut Table, prefix: &str, sol: &FixedPointSolution) {
    t.scalar(&format!("{prefix}method"), sol.method.as_str());
    t.scalar(&format!("{prefix}iterations"), sol.iterations);
    t.scalar(&format!("{prefix}p_residual"), fmt_f64(sol.p_residual));
    t.scalar(&format!("{prefix}t_residual"), fmt_f64(sol.t_residual));
    if let Some(r) = sol.loc_residual {
        t.scalar(&format!("{prefix}loc_residual"), fmt_f64(r));
    }
    t.scalar(&format!("{prefix}converged"), sol.converged);
    t.scalar(&format!("{prefix}oscillation"), sol.oscillation);
}

pub fn cmd_solve(opts: &Options) -> Result<Outcome, CliError> {
    let s = Setup::load(opts)?;
    let sol = oracle(&s)?;
    let mut table = Table::new(s.state_header());
    table.push(state_fields(
        sol.mu.as_slice(),
        sol.q.as_slice(),
        sol.mu_loc.as_ref().map(|m| m.as_slice()),
    ));
    table.scalar("regime", s.cfg.regime);
    table.scalar("gamma", s.cfg.trainer.gamma);
    table.scalar("phi", s.cfg.trainer.phi);
    table.scalar("tol", s.cfg.oracle.tol);
    solution_scalars(&mut table, "", &sol);
    let path = s.path("solve.csv");
    table.write(&path)?;
    s.say(format!(
        "{} fixed point: mu = {} ({} iterations, {}, converged = {})",
        s.cfg.regime,
        sol.mu,
        sol.iterations,
        sol.method.as_str(),
        sol.converged
    ));
    if !sol.converged {
        eprintln!(
            "solver did not reach tol {}; best iterate written (residuals {:e}, {:e})",
            s.cfg.oracle.tol, sol.p_residual, sol.t_residual
        );
    }
    Ok(Outcome {
        files: vec![path],
        converged: sol.converged,
    })
}

fn yes_no(b: Option<bool>) -> String {
    b.map_or_else(|| "n/a".to_string(), |b| b.to_string())
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), fmt_f64)
}

pub fn cmd_compare(opts: &Options) -> Result<Outcome, CliError> {
    let s = Setup::load(opts)?;
    let sol = oracle(&s)?;
    let runs = s.train_all(|_, _, _| Ok(()))?;

    let mut header: Vec<String> = ["config", "seed", "l1_mu", "sup_q"].map(String::from).to_vec();
    if s.has_loc() {
        header.push("l1_mu_loc".into());
    }
    let mut table = Table::new(header);
    for c in 0..s.cfg.timescales.len() {
        let mut gaps = Vec::new();
        for (_, seed, t) in runs.iter().filter(|r| r.0 == c) {
            let mut g = vec![
                l1_distance(&t.final_mu, &sol.mu)?,
                sup_distance(&t.final_q, &sol.q)?,
            ];
            if let (Some(a), Some(b)) = (&t.final_mu_loc, &sol.mu_loc) {
                g.push(l1_distance(a, b)?);
            }
            let mut row = vec![c.to_string(), seed.to_string()];
            row.extend(g.iter().map(|&v| fmt_f64(v)));
            table.push(row);
            s.say(format!("config {c} seed {seed}: L1(mu) = {:.3e}, sup(Q) = {:.3e}", g[0], g[1]));
            gaps.push(g);
        }
        let mut row = vec![c.to_string(), "mean".into()];
        row.extend(mean_rows(&gaps).into_iter().map(fmt_f64));
        table.push(row);
    }

    run_scalars(&mut table, &s.cfg);
    solution_scalars(&mut table, "oracle_", &sol);
    bound_scalars(&mut table, &s, &sol)?;
    let path = s.path("compare.csv");
    table.write(&path)?;
    Ok(Outcome {
        files: vec![path],
        converged: sol.converged,
    })
}

/// Action gap of the sharp equilibrium, `phi_max`, the accuracy bounds and
/// whether the regularized oracle meets them. Everything is `n/a` for the
/// three-population regime.
fn bound_scalars(t: &mut Table, s: &Setup, sol: &FixedPointSolution) -> Result<(), CliError> {
    let (g, phi) = (s.cfg.trainer.gamma, s.cfg.trainer.phi);
    let (kind, sharp_kind) = match (s.cfg.regime, s.env.two()) {
        (Regime::Mfg, Some(e)) => (BoundKind::Mfg, Some((e, SharpKind::Mfg))),
        (Regime::Mfc, Some(e)) => (BoundKind::Mfc, Some((e, SharpKind::Mfc))),
        _ => (BoundKind::Mfcg, None),
    };
    let Some((env, sharp_kind)) = sharp_kind else {
        for k in ["delta", "phi_max", "mu_bound", "q_bound", "mu_bound_satisfied", "q_bound_satisfied"] {
            t.scalar(k, "n/a");
        }
        return Ok(());
    };
    let sharp = solve_sharp_equilibrium(env, g, s.cfg.oracle.tol, s.cfg.oracle.max_iter, sharp_kind)?;
    let delta = action_gap(&sharp.q);
    let d_mu = l1_distance(&sol.mu, &sharp.mu)?;
    let d_q = sup_distance(&sol.q, &sharp.q)?;
    t.scalar("sharp_converged", sharp.converged);
    t.scalar("sharp_l1_mu", fmt_f64(d_mu));
    t.scalar("sharp_sup_q", fmt_f64(d_q));
    t.scalar("delta", fmt_f64(delta));

    let consts = ModelConstants::from_report(&s.env.constants()?);
    let pm = match phi_max(&consts, g) {
        Ok(v) => v,
        Err(e) => {
            t.scalar("phi_max", "n/a");
            t.scalar("phi_max_note", e);
            for k in ["mu_bound", "q_bound", "mu_bound_satisfied", "q_bound_satisfied"] {
                t.scalar(k, "n/a");
            }
            return Ok(());
        }
    };
    t.scalar("phi_max", fmt_f64(pm));
    let b = if delta > 0.0 {
        Some(error_bounds(kind, phi, pm, delta, &consts, g)?)
    } else {
        None
    };
    let usable = b.filter(|b| b.applicable && sharp.converged && sol.converged);
    t.scalar("mu_bound", opt_f64(usable.and_then(|b| b.mu_bound)));
    t.scalar("q_bound", opt_f64(usable.and_then(|b| b.q_bound)));
    t.scalar("mu_bound_satisfied", yes_no(usable.and_then(|b| b.mu_bound).map(|m| d_mu <= m)));
    t.scalar("q_bound_satisfied", yes_no(usable.and_then(|b| b.q_bound).map(|m| d_q <= m)));
    if b.is_some_and(|b| !b.applicable) {
        t.scalar("bound_note", format!("phi = {phi} is not below phi_max; bounds do not apply"));
    }
    Ok(())
}

/// Writes `{prefix}_diagnose.csv` and, given a trace, `{prefix}_visits.csv`.
/// Findings are advisory: only an unreadable config or environment fails.
pub fn cmd_diagnose(opts: &Options, trace: Option<&Path>) -> Result<Outcome, CliError> {
    let s = Setup::load(opts)?;
    let (g, phi) = (s.cfg.trainer.gamma, s.cfg.trainer.phi);
    let mut table = Table::new(["config", "check", "name", "status", "detail"].map(String::from).to_vec());
    for (c, ts) in s.cfg.timescales.iter().enumerate() {
        for chk in validate_timescales(ts).checks {
            table.push(vec![
                c.to_string(),
                chk.id.to_string(),
                chk.name,
                chk.status.as_str().to_string(),
                chk.detail,
            ]);
        }
        let (worst, list) = checklist(&s.cfg, c);
        s.say(format!("config {c} schedule checks: {list} ({worst})"));
    }
    table.scalar("n_states", s.env.n_states());
    table.scalar("n_actions", s.env.n_actions());
    table.scalar("gamma", g);
    table.scalar("phi", phi);
    match s.env.constants() {
        Ok(r) => {
            table.scalar("c_min", fmt_f64(r.c_min));
            table.scalar("c_max", fmt_f64(r.c_max));
            table.scalar("l_f", format!("{} ({})", fmt_f64(r.l_f), r.l_f_source.as_str()));
            table.scalar("l_p", format!("{} ({})", fmt_f64(r.l_p), r.l_p_source.as_str()));
            table.scalar("l_f_estimate", fmt_f64(r.l_f_hat));
            table.scalar("l_p_estimate", fmt_f64(r.l_p_hat));
            table.scalar("f_sup", fmt_f64(r.f_sup));
            match phi_max(&ModelConstants::from_report(&r), g) {
                Ok(pm) => {
                    table.scalar("phi_max", fmt_f64(pm));
                    s.say(format!("c_min = {:e}, L_p = {:e}, phi_max = {pm:.4e}", r.c_min, r.l_p));
                    if phi >= pm {
                        let note = format!(
                            "phi = {phi} exceeds phi_max = {pm:.4e}; the regularized map need not contract and the accuracy bounds do not apply"
                        );
                        s.say(format!("note: {note}"));
                        table.scalar("note", note);
                    }
                }
                Err(e) => {
                    table.scalar("phi_max", "n/a");
                    table.scalar("note", &e);
                    s.say(format!("phi_max: n/a ({e})"));
                }
            }
        }
        Err(e) => {
            table.scalar("constants", format!("n/a ({e})"));
            s.say(format!("constants: n/a ({e})"));
        }
    }
    let path = s.path("diagnose.csv");
    table.write(&path)?;
    let mut files = vec![path];
    if let Some(tp) = trace {
        match visit_table(&s, tp) {
            Ok(v) => {
                let p = s.path("visits.csv");
                v.write(&p)?;
                files.push(p);
            }
            Err(e) => eprintln!("warning: cannot use trace {}: {e}", tp.display()),
        }
    }
    Ok(Outcome {
        files,
        converged: true,
    })
}

/// Per-pair visit frequencies over the trace rows that record an update.
fn visit_table(s: &Setup, path: &Path) -> Result<Table, CliError> {
    let (nx, na, rows) = read_trace(path)?;
    if (nx, na) != (s.env.n_states(), s.env.n_actions()) {
        return Err(CliError::Runtime(format!(
            "trace is {nx}x{na}, environment is {}x{}",
            s.env.n_states(),
            s.env.n_actions()
        )));
    }
    let mut counts = vec![0u64; nx * na];
    let mut total = 0u64;
    for r in &rows {
        if let (Some(x), Some(a)) = (r.state, r.action) {
            if x >= nx || a >= na {
                return Err(CliError::Runtime(format!("step {}: pair ({x},{a}) out of range", r.step)));
            }
            counts[x * na + a] += 1;
            total += 1;
        }
    }
    let mut t = Table::new(["x", "a", "count", "frequency"].map(String::from).to_vec());
    let mut unvisited = Vec::new();
    let mut min_f = f64::INFINITY;
    for x in 0..nx {
        for a in 0..na {
            let c = counts[x * na + a];
            let f = c as f64 / total.max(1) as f64;
            min_f = min_f.min(f);
            if c == 0 {
                unvisited.push(format!("({x},{a})"));
            }
            t.push(vec![x.to_string(), a.to_string(), c.to_string(), fmt_f64(f)]);
        }
    }
    let stride = rows.get(1).map_or(1, |r| r.step.saturating_sub(rows[0].step).max(1));
    t.scalar("steps_observed", total);
    t.scalar("row_stride", stride);
    t.scalar("min_frequency", fmt_f64(min_f));
    if unvisited.is_empty() {
        s.say(format!("visit frequencies: min over pairs {min_f:.4e}"));
    } else {
        let w = format!("pairs never visited (x,a) {}", unvisited.join(" "));
        eprintln!("coverage warning: {w}");
        t.scalar("coverage_warning", w);
    }
    Ok(t)
}
