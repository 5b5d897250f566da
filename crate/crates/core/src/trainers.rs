//! The iterative learners: expected-update (idealized), synchronous
//! sample-based, asynchronous single-trajectory, and the three-timescale
//! variants.

use crate::error::{Error, Result};
use crate::operators::{check_gamma, check_mu, check_q, p2, p3, p3_prime, t2, t3};
use crate::policy::softmin_into;
use crate::schedules::{rate_at, RateSchedule, Regime, TimescaleConfig};
use crate::spaces::{
    l1_distance, sup_distance, MeanFieldEnv, QTable, Rng, SimplexVector, ThreePopEnv,
};

/// Early exit once one step moves `mu` by at most `tol_mu` in L¹ and `Q` by
/// at most `tol_q` in sup norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub tol_mu: f64,
    pub tol_q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub phi: f64,
    pub n_steps: u64,
    pub timescales: TimescaleConfig,
    /// Defaults to all zeros.
    pub init_q: Option<QTable>,
    /// Defaults to uniform. Ignored by single-trajectory runs, which start
    /// from the indicator of the initial state.
    pub init_mu: Option<SimplexVector>,
    /// Local distribution for the expected-update three-timescale run.
    pub init_mu_loc: Option<SimplexVector>,
    /// Store every k-th step. Defaults to `max(1, n_steps / 10^4)`.
    pub trace_stride: Option<u64>,
    pub seed: u64,
    pub stop: Option<StopRule>,
}

impl TrainerConfig {
    pub fn new(gamma: f64, phi: f64, n_steps: u64, timescales: TimescaleConfig) -> Self {
        Self {
            gamma,
            phi,
            n_steps,
            timescales,
            init_q: None,
            init_mu: None,
            init_mu_loc: None,
            trace_stride: None,
            seed: 0,
            stop: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stride(mut self, stride: u64) -> Self {
        self.trace_stride = Some(stride);
        self
    }

    pub fn stride(&self) -> u64 {
        self.trace_stride.unwrap_or((self.n_steps / 10_000).max(1))
    }

    fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.phi >= 0.0) || !self.phi.is_finite() {
            return Err(Error::Config(format!("phi must be non-negative, got {}", self.phi)));
        }
        if self.trace_stride == Some(0) {
            return Err(Error::Config("trace_stride must be at least 1".into()));
        }
        if let Some(q) = &self.init_q {
            if q.shape() != (n_states, n_actions) {
                return Err(Error::Config("initial Q-table has the wrong shape".into()));
            }
        }
        for m in [&self.init_mu, &self.init_mu_loc].into_iter().flatten() {
            if m.len() != n_states {
                return Err(Error::Config("initial distribution has the wrong length".into()));
            }
        }
        Ok(())
    }

    fn require_two(&self) -> Result<()> {
        if self.timescales.regime == Regime::Mfcg {
            return Err(Error::Config(
                "two-timescale trainers need an MFG or MFC regime".into(),
            ));
        }
        Ok(())
    }

    fn require_three(&self) -> Result<RateSchedule> {
        match (self.timescales.regime, self.timescales.mu_loc_schedule) {
            (Regime::Mfcg, Some(s)) => Ok(s),
            _ => Err(Error::Config(
                "three-timescale trainers need the MFCG regime and a local schedule".into(),
            )),
        }
    }
}

/// One stored iterate. Row `n` holds `(mu_n, Q_n)` and the pair and rates of
/// the update that produced it; the initial row has none.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: u64,
    pub mu: SimplexVector,
    pub q: QTable,
    pub mu_loc: Option<SimplexVector>,
    pub state: Option<usize>,
    pub action: Option<usize>,
    pub rho_q: Option<f64>,
    pub rho_mu: Option<f64>,
    pub rho_mu_loc: Option<f64>,
}

/// Realized martingale noise. `psi_*` are the rate-weighted running sums,
/// `*_increment_sum` the unweighted sums whose mean should vanish.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseDiagnostics {
    pub psi_mu: Vec<f64>,
    pub psi_q: Vec<f64>,
    pub mu_increment_sum: Vec<f64>,
    pub q_increment_sum: Vec<f64>,
    pub count: u64,
    /// Largest `||psi_mu||_inf` seen along the run.
    pub psi_mu_max: f64,
    /// Largest `||psi_q||_inf` seen along the run.
    pub psi_q_max: f64,
}

impl NoiseDiagnostics {
    fn new(nx: usize, na: usize) -> Self {
        Self {
            psi_mu: vec![0.0; nx],
            psi_q: vec![0.0; nx * na],
            mu_increment_sum: vec![0.0; nx],
            q_increment_sum: vec![0.0; nx * na],
            ..Self::default()
        }
    }

    /// Mean realized distribution noise per coordinate.
    pub fn mu_increment_mean(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.mu_increment_sum.iter().map(|s| s / c).collect()
    }

    /// Mean realized Q noise per pair.
    pub fn q_increment_mean(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.q_increment_sum.iter().map(|s| s / c).collect()
    }

    fn track(&mut self) {
        self.count += 1;
        let m = self.psi_mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let q = self.psi_q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.psi_mu_max = self.psi_mu_max.max(m);
        self.psi_q_max = self.psi_q_max.max(q);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub n_states: usize,
    pub n_actions: usize,
    pub records: Vec<StepRecord>,
    /// `nu(x, a, n)`, row-major.
    pub visit_counts: Vec<u64>,
    pub noise: NoiseDiagnostics,
    pub warnings: Vec<String>,
    /// Steps actually taken; below `n_steps` after an early stop.
    pub steps_run: u64,
    pub stopped_early: bool,
    pub final_mu: SimplexVector,
    pub final_q: QTable,
    pub final_mu_loc: Option<SimplexVector>,
}

impl RunTrace {
    pub fn visits(&self, x: usize, a: usize) -> u64 {
        self.visit_counts[x * self.n_actions + a]
    }

    /// `nu(x, a, n) / n` per pair, row-major.
    pub fn visit_frequencies(&self) -> Vec<f64> {
        let n = self.steps_run.max(1) as f64;
        self.visit_counts.iter().map(|&v| v as f64 / n).collect()
    }

    /// Pairs never visited.
    pub fn unvisited_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_states)
            .flat_map(|x| (0..self.n_actions).map(move |a| (x, a)))
            .filter(|&(x, a)| self.visits(x, a) == 0)
            .collect()
    }
}

/// Collects strided records and the run's diagnostics.
struct Recorder {
    stride: u64,
    last: u64,
    trace: RunTrace,
}

struct Update {
    state: Option<usize>,
    action: Option<usize>,
    rho_q: Option<f64>,
    rho_mu: Option<f64>,
    rho_mu_loc: Option<f64>,
}

impl Update {
    const NONE: Update = Update {
        state: None,
        action: None,
        rho_q: None,
        rho_mu: None,
        rho_mu_loc: None,
    };
}

impl Recorder {
    fn new(cfg: &TrainerConfig, mu: &SimplexVector, q: &QTable, loc: Option<&SimplexVector>) -> Self {
        let (nx, na) = q.shape();
        let mut r = Self {
            stride: cfg.stride(),
            last: cfg.n_steps,
            trace: RunTrace {
                n_states: nx,
                n_actions: na,
                records: Vec::new(),
                visit_counts: vec![0; nx * na],
                noise: NoiseDiagnostics::new(nx, na),
                warnings: Vec::new(),
                steps_run: 0,
                stopped_early: false,
                final_mu: mu.clone(),
                final_q: q.clone(),
                final_mu_loc: loc.cloned(),
            },
        };
        r.push(0, mu, q, loc, Update::NONE);
        r
    }

    fn wants(&self, n: u64) -> bool {
        n % self.stride == 0 || n == self.last
    }

    fn push(&mut self, n: u64, mu: &SimplexVector, q: &QTable, loc: Option<&SimplexVector>, u: Update) {
        self.trace.records.push(StepRecord {
            n,
            mu: mu.clone(),
            q: q.clone(),
            mu_loc: loc.cloned(),
            state: u.state,
            action: u.action,
            rho_q: u.rho_q,
            rho_mu: u.rho_mu,
            rho_mu_loc: u.rho_mu_loc,
        });
    }

    fn step(&mut self, n: u64, mu: &SimplexVector, q: &QTable, loc: Option<&SimplexVector>, u: Update) {
        self.trace.steps_run = n;
        if self.wants(n) {
            self.push(n, mu, q, loc, u);
        }
    }

    fn finish(
        mut self,
        mu: SimplexVector,
        q: QTable,
        loc: Option<SimplexVector>,
        stopped: bool,
    ) -> RunTrace {
        let n = self.trace.steps_run;
        if stopped && self.trace.records.last().map(|r| r.n) != Some(n) {
            self.push(n, &mu, &q, loc.as_ref(), Update::NONE);
        }
        self.trace.stopped_early = stopped;
        self.trace.final_mu = mu;
        self.trace.final_q = q;
        self.trace.final_mu_loc = loc;
        self.trace
    }
}

fn check_rate(name: &str, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "{name} = {rho} exceeds 1, the update could leave the simplex"
        )));
    }
    Ok(())
}

fn initial_state<E: MeanFieldEnv + ?Sized>(
    env: &E,
    cfg: &TrainerConfig,
) -> Result<(SimplexVector, QTable)> {
    cfg.validate(env.n_states(), env.n_actions())?;
    let mu = match &cfg.init_mu {
        Some(m) => m.clone(),
        None => SimplexVector::uniform(env.n_states())?,
    };
    let q = match &cfg.init_q {
        Some(q) => {
            check_q(env, q)?;
            q.clone()
        }
        None => QTable::zeros(env.n_states(), env.n_actions()),
    };
    check_mu(env, &mu)?;
    Ok((mu, q))
}

fn stop_now(rule: Option<StopRule>, dmu: f64, dq: f64) -> bool {
    rule.is_some_and(|s| dmu <= s.tol_mu && dq <= s.tol_q)
}

/// Expected-update iteration: `mu += rho_mu P2(Q, mu)`, `Q += rho_Q T2(Q, mu)`.
/// Deterministic; the seed is unused. Per-visit Q rates use the visit count
/// `n + 1` since every pair is updated at every step.
pub fn run_idealized<E: MeanFieldEnv + ?Sized>(env: &E, cfg: &TrainerConfig) -> Result<RunTrace> {
    cfg.require_two()?;
    let (mut mu, mut q) = initial_state(env, cfg)?;
    let ts = cfg.timescales;
    let mut rec = Recorder::new(cfg, &mu, &q, None);
    let mut stopped = false;
    for n in 0..cfg.n_steps {
        let rho_q = rate_at(&ts.q_schedule, n, n + 1);
        let rho_mu = rate_at(&ts.mu_schedule, n, n + 1);
        check_rate("rho_mu", rho_mu)?;
        let dmu = p2(env, &q, &mu, cfg.phi)?;
        let dq = t2(env, &q, &mu, cfg.gamma)?;
        let prev_mu = mu.clone();
        mu.apply_drift(&dmu, rho_mu)?;
        let vals: Vec<f64> = q
            .as_slice()
            .iter()
            .zip(dq.as_slice())
            .map(|(v, d)| v + rho_q * d)
            .collect();
        let next_q = QTable::new(q.n_states(), q.n_actions(), vals)?;
        let change_q = sup_distance(&next_q, &q)?;
        q = next_q;
        rec.step(
            n + 1,
            &mu,
            &q,
            None,
            Update {
                rho_q: Some(rho_q),
                rho_mu: Some(rho_mu),
                ..Update::NONE
            },
        );
        if stop_now(cfg.stop, l1_distance(&mu, &prev_mu)?, change_q) {
            stopped = true;
            break;
        }
    }
    Ok(rec.finish(mu, q, None, stopped))
}

/// One draw of the sampled distribution drift: `X ~ mu`,
/// `A ~ softmin Q(X, .)`, `X' ~ p(. | X, A, mu)`; returns `delta(X') - mu`.
pub fn sample_p_check<E: MeanFieldEnv + ?Sized>(
    env: &E,
    q: &QTable,
    mu: &SimplexVector,
    phi: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_q(env, q)?;
    check_mu(env, mu)?;
    let mut pi = vec![0.0; env.n_actions()];
    let mut row = vec![0.0; env.n_states()];
    let x = rng.categorical(mu.as_slice());
    softmin_into(q.row(x), phi, &mut pi)?;
    let a = rng.categorical(&pi);
    env.kernel_into(x, a, mu, &mut row);
    let y = rng.categorical(&row);
    let mut out: Vec<f64> = mu.as_slice().iter().map(|m| -m).collect();
    out[y] += 1.0;
    Ok(out)
}

/// One draw of the sampled Bellman residual: for every pair an independent
/// `X'_{x,a} ~ p(. | x, a, mu)` and `f(x,a,mu) + gamma min Q(X'_{x,a}) - Q(x,a)`.
pub fn sample_t_check<E: MeanFieldEnv + ?Sized>(
    env: &E,
    q: &QTable,
    mu: &SimplexVector,
    gamma: f64,
    rng: &mut Rng,
) -> Result<QTable> {
    check_q(env, q)?;
    check_mu(env, mu)?;
    check_gamma(gamma)?;
    let (nx, na) = q.shape();
    let v: Vec<f64> = (0..nx).map(|x| q.row_min(x)).collect();
    let mut row = vec![0.0; nx];
    let mut out = Vec::with_capacity(nx * na);
    for x in 0..nx {
        for a in 0..na {
            env.kernel_into(x, a, mu, &mut row);
            let y = rng.categorical(&row);
            out.push(env.cost(x, a, mu) + gamma * v[y] - q.get(x, a));
        }
    }
    QTable::new(nx, na, out)
}

/// Synchronous sample-based iteration. Each step draws `X ~ mu`, an action
/// and a next state for the distribution update, then one fresh next state
/// per pair for the Q update. The realized noise against the expected drifts
/// is accumulated in the trace.
pub fn run_synchronous_stochastic<E: MeanFieldEnv + ?Sized>(
    env: &E,
    cfg: &TrainerConfig,
) -> Result<RunTrace> {
    cfg.require_two()?;
    let (mut mu, mut q) = initial_state(env, cfg)?;
    let (nx, na) = (env.n_states(), env.n_actions());
    let ts = cfg.timescales;
    let mut rng = Rng::from_seed(cfg.seed);
    let mut rec = Recorder::new(cfg, &mu, &q, None);
    let mut pi = vec![0.0; nx * na];
    let mut row = vec![0.0; nx];
    let mut expected_next = vec![0.0; nx];
    let mut next_q = vec![0.0; nx * na];
    let mut stopped = false;
    for n in 0..cfg.n_steps {
        let rho_q = rate_at(&ts.q_schedule, n, n + 1);
        let rho_mu = rate_at(&ts.mu_schedule, n, n + 1);
        check_rate("rho_mu", rho_mu)?;
        for x in 0..nx {
            softmin_into(q.row(x), cfg.phi, &mut pi[x * na..(x + 1) * na])?;
        }
        let v: Vec<f64> = (0..nx).map(|x| q.row_min(x)).collect();

        let x = rng.categorical(mu.as_slice());
        let a = rng.categorical(&pi[x * na..(x + 1) * na]);
        env.kernel_into(x, a, &mu, &mut row);
        let y = rng.categorical(&row);
        rec.trace.visit_counts[x * na + a] += 1;

        expected_next.iter_mut().for_each(|e| *e = 0.0);
        let noise = &mut rec.trace.noise;
        for xx in 0..nx {
            for aa in 0..na {
                let i = xx * na + aa;
                env.kernel_into(xx, aa, &mu, &mut row);
                let w = mu.get(xx) * pi[i];
                let mut ev = 0.0;
                for (yy, p) in row.iter().enumerate() {
                    expected_next[yy] += w * p;
                    ev += p * v[yy];
                }
                let yy = rng.categorical(&row);
                let f = env.cost(xx, aa, &mu);
                let sampled = f + cfg.gamma * v[yy] - q.get(xx, aa);
                let expected = f + cfg.gamma * ev - q.get(xx, aa);
                next_q[i] = q.get(xx, aa) + rho_q * sampled;
                noise.psi_q[i] += rho_q * (sampled - expected);
                noise.q_increment_sum[i] += sampled - expected;
            }
        }
        for (k, e) in expected_next.iter().enumerate() {
            // (delta(y) - mu) - (P mu - mu)
            let d = if k == y { 1.0 } else { 0.0 } - e;
            noise.psi_mu[k] += rho_mu * d;
            noise.mu_increment_sum[k] += d;
        }
        noise.track();

        let prev_mu = mu.clone();
        mu.mix_toward_state(y, rho_mu)?;
        let new_q = QTable::new(nx, na, next_q.clone())?;
        let change_q = sup_distance(&new_q, &q)?;
        q = new_q;
        rec.step(
            n + 1,
            &mu,
            &q,
            None,
            Update {
                state: Some(x),
                action: Some(a),
                rho_q: Some(rho_q),
                rho_mu: Some(rho_mu),
                rho_mu_loc: None,
            },
        );
        if stop_now(cfg.stop, l1_distance(&mu, &prev_mu)?, change_q) {
            stopped = true;
            break;
        }
    }
    Ok(rec.finish(mu, q, None, stopped))
}

/// Single-trajectory learner. `mu_0` is the indicator of `X_0` (drawn
/// uniformly when `x0` is `None`); each step updates only the visited pair
/// with rate `rate_at(q_schedule, n, nu)`, `nu` counting the current visit.
pub fn run_asynchronous<E: MeanFieldEnv + ?Sized>(
    env: &E,
    cfg: &TrainerConfig,
    x0: Option<usize>,
) -> Result<RunTrace> {
    cfg.require_two()?;
    async_core(&Lift(env), cfg, x0, None)
}

/// Asynchronous three-timescale learner: global and local distributions are
/// both moved toward the indicator of the next state, at their own rates.
/// Draws random numbers in the same order as [`run_asynchronous`].
pub fn run_three_timescale<E: ThreePopEnv + ?Sized>(
    env3: &E,
    cfg: &TrainerConfig,
    x0: Option<usize>,
) -> Result<RunTrace> {
    let loc = cfg.require_three()?;
    async_core(env3, cfg, x0, Some(loc))
}

/// A single-population environment seen through the three-population
/// interface, ignoring the local measure.
struct Lift<'a, E: ?Sized>(&'a E);

impl<E: MeanFieldEnv + ?Sized> ThreePopEnv for Lift<'_, E> {
    fn states(&self) -> &crate::spaces::StateSpace {
        self.0.states()
    }

    fn actions(&self) -> &crate::spaces::ActionSpace {
        self.0.actions()
    }

    fn cost3(&self, x: usize, a: usize, mu: &SimplexVector, _: &SimplexVector) -> f64 {
        self.0.cost(x, a, mu)
    }

    fn kernel3_into(&self, x: usize, a: usize, mu: &SimplexVector, _: &SimplexVector, out: &mut [f64]) {
        self.0.kernel_into(x, a, mu, out)
    }
}

fn async_core<E: ThreePopEnv + ?Sized>(
    env: &E,
    cfg: &TrainerConfig,
    x0: Option<usize>,
    loc_schedule: Option<RateSchedule>,
) -> Result<RunTrace> {
    let (nx, na) = (env.n_states(), env.n_actions());
    cfg.validate(nx, na)?;
    let ts = cfg.timescales;
    if matches!(ts.q_schedule, RateSchedule::PolyStep { .. }) {
        return Err(Error::Config(
            "asynchronous Q rates must be poly_visit or constant".into(),
        ));
    }
    let mut rng = Rng::from_seed(cfg.seed);
    let x0 = match x0 {
        Some(x) if x >= nx => {
            return Err(Error::Config(format!("initial state {x} out of range")));
        }
        Some(x) => x,
        None => rng.index(nx),
    };
    let mut q = match &cfg.init_q {
        Some(q) => q.clone(),
        None => QTable::zeros(nx, na),
    };
    let mut mu = crate::spaces::dirac(x0, env.states())?;
    let mut loc = loc_schedule.map(|_| mu.clone());
    let mut rec = Recorder::new(cfg, &mu, &q, loc.as_ref());
    let mut pi = vec![0.0; na];
    let mut row = vec![0.0; nx];
    let mut x = x0;
    let mut stopped = false;
    let placeholder = SimplexVector::uniform(nx)?;
    for n in 0..cfg.n_steps {
        let loc_ref = loc.as_ref().unwrap_or(&placeholder);
        softmin_into(q.row(x), cfg.phi, &mut pi)?;
        let a = rng.categorical(&pi);
        let f = env.cost3(x, a, &mu, loc_ref);
        env.kernel3_into(x, a, &mu, loc_ref, &mut row);
        let y = rng.categorical(&row);

        let i = x * na + a;
        rec.trace.visit_counts[i] += 1;
        let rho_q = rate_at(&ts.q_schedule, n, rec.trace.visit_counts[i]);
        let rho_mu = rate_at(&ts.mu_schedule, n, n + 1);
        check_rate("rho_mu", rho_mu)?;
        let rho_loc = match loc_schedule {
            Some(s) => {
                let r = rate_at(&s, n, n + 1);
                check_rate("rho_mu_loc", r)?;
                Some(r)
            }
            None => None,
        };

        let old = q.get(x, a);
        let vy = q.row_min(y);
        let target = f + cfg.gamma * vy;
        q.set(x, a, old + rho_q * (target - old));

        // martingale noise given (X_n, A_n)
        let noise = &mut rec.trace.noise;
        let ev: f64 = row.iter().enumerate().map(|(z, p)| p * rec_min(&q, z, x, a, old)).sum();
        let dq = cfg.gamma * (vy - ev);
        noise.psi_q[i] += rho_q * dq;
        noise.q_increment_sum[i] += dq;
        for (k, p) in row.iter().enumerate() {
            let d = if k == y { 1.0 } else { 0.0 } - p;
            noise.psi_mu[k] += rho_mu * d;
            noise.mu_increment_sum[k] += d;
        }
        noise.track();

        let prev_mu = if cfg.stop.is_some() { Some(mu.clone()) } else { None };
        mu.mix_toward_state(y, rho_mu)?;
        if let (Some(l), Some(r)) = (loc.as_mut(), rho_loc) {
            l.mix_toward_state(y, r)?;
        }
        rec.step(
            n + 1,
            &mu,
            &q,
            loc.as_ref(),
            Update {
                state: Some(x),
                action: Some(a),
                rho_q: Some(rho_q),
                rho_mu: Some(rho_mu),
                rho_mu_loc: rho_loc,
            },
        );
        let dq_step = (q.get(x, a) - old).abs();
        x = y;
        if let Some(prev) = prev_mu {
            if stop_now(cfg.stop, l1_distance(&mu, &prev)?, dq_step) {
                stopped = true;
                break;
            }
        }
    }
    let unvisited = rec.trace.unvisited_pairs();
    if !unvisited.is_empty() && cfg.n_steps > 0 {
        let pairs: Vec<String> = unvisited.iter().map(|(x, a)| format!("({x},{a})")).collect();
        rec.trace.warnings.push(format!(
            "coverage: pairs never visited {}; per-pair visit frequencies cannot stay bounded below",
            pairs.join(" ")
        ));
    }
    Ok(rec.finish(mu, q, loc, stopped))
}

/// `min_a Q_n(z, a)`, reading the pre-update value at the updated pair.
fn rec_min(q: &QTable, z: usize, x: usize, a: usize, old: f64) -> f64 {
    if z != x {
        return q.row_min(z);
    }
    q.row(z)
        .iter()
        .enumerate()
        .map(|(b, v)| if b == a { old } else { *v })
        .fold(f64::INFINITY, f64::min)
}

/// Expected-update three-timescale iteration on `(mu, Q, mu')`.
pub fn run_three_timescale_idealized<E: ThreePopEnv + ?Sized>(
    env3: &E,
    cfg: &TrainerConfig,
) -> Result<RunTrace> {
    let loc_schedule = cfg.require_three()?;
    let (nx, na) = (env3.n_states(), env3.n_actions());
    cfg.validate(nx, na)?;
    let ts = cfg.timescales;
    let mut mu = cfg.init_mu.clone().unwrap_or(SimplexVector::uniform(nx)?);
    let mut loc = cfg.init_mu_loc.clone().unwrap_or(SimplexVector::uniform(nx)?);
    let mut q = cfg.init_q.clone().unwrap_or(QTable::zeros(nx, na));
    let mut rec = Recorder::new(cfg, &mu, &q, Some(&loc));
    let mut stopped = false;
    for n in 0..cfg.n_steps {
        let rho_q = rate_at(&ts.q_schedule, n, n + 1);
        let rho_mu = rate_at(&ts.mu_schedule, n, n + 1);
        let rho_loc = rate_at(&loc_schedule, n, n + 1);
        check_rate("rho_mu", rho_mu)?;
        check_rate("rho_mu_loc", rho_loc)?;
        let dmu = p3(env3, &q, &mu, &loc, cfg.phi)?;
        let dloc = p3_prime(env3, &q, &mu, &loc, cfg.phi)?;
        let dq = t3(env3, &q, &mu, &loc, cfg.gamma)?;
        let prev_mu = mu.clone();
        mu.apply_drift(&dmu, rho_mu)?;
        loc.apply_drift(&dloc, rho_loc)?;
        let vals: Vec<f64> = q
            .as_slice()
            .iter()
            .zip(dq.as_slice())
            .map(|(v, d)| v + rho_q * d)
            .collect();
        let next_q = QTable::new(nx, na, vals)?;
        let change_q = sup_distance(&next_q, &q)?;
        q = next_q;
        rec.step(
            n + 1,
            &mu,
            &q,
            Some(&loc),
            Update {
                rho_q: Some(rho_q),
                rho_mu: Some(rho_mu),
                rho_mu_loc: Some(rho_loc),
                ..Update::NONE
            },
        );
        if stop_now(cfg.stop, l1_distance(&mu, &prev_mu)?, change_q) {
            stopped = true;
            break;
        }
    }
    Ok(rec.finish(mu, q, Some(loc), stopped))
}
