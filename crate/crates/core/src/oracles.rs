//! Reference solutions: optimal Q-functions, stationary distributions, the
//! regularized and sharp equilibria, action gaps and the accuracy bounds.

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Error, Result};
use crate::operators::{
    bellman, check_gamma, check_mu, check_q, p2, p3, p3_prime, push_forward, t2, t3,
    transition_matrix, ConstantsReport, FreezeLocal,
};
use crate::policy::{argmin_e, PolicyTable};
use crate::spaces::{
    l1_distance, l1_slices, sup_distance, MeanFieldEnv, QTable, SimplexVector, ThreePopEnv,
};

/// Floor for inner Q-function tolerances.
const Q_TOL_FLOOR: f64 = 1e-11;
/// Floor for inner distribution tolerances.
const DIST_TOL_FLOOR: f64 = 1e-13;
/// Iteration budget of inner solves.
const INNER_MAX_ITER: usize = 100_000;

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

fn check_phi(phi: f64) -> Result<()> {
    if !(phi >= 0.0) || !phi.is_finite() {
        return Err(Error::Config(format!("phi must be finite and non-negative, got {phi}")));
    }
    Ok(())
}

fn not_converged(stage: &str, iterations: usize, residual: f64) -> Error {
    Error::Convergence {
        stage: stage.to_string(),
        iterations,
        residual,
    }
}

/// Value iteration output with its per-sweep sup residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct QStarSolution {
    pub q: QTable,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

/// `Q*_mu` by value iteration from zero. Stops once the sup change of a
/// sweep is at most `tol (1 - gamma) / gamma`, so the result is within
/// `tol` of the fixed point.
pub fn solve_q_star<E: MeanFieldEnv + ?Sized>(
    env: &E,
    mu: &SimplexVector,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<QTable> {
    Ok(solve_q_star_detailed(env, mu, gamma, tol, max_iter, None)?.q)
}

/// [`solve_q_star`] with an optional warm start and the residual history.
pub fn solve_q_star_detailed<E: MeanFieldEnv + ?Sized>(
    env: &E,
    mu: &SimplexVector,
    gamma: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&QTable>,
) -> Result<QStarSolution> {
    check_tol(tol)?;
    check_gamma(gamma)?;
    check_mu(env, mu)?;
    let mut q = match warm {
        Some(w) => {
            check_q(env, w)?;
            w.clone()
        }
        None => QTable::zeros(env.n_states(), env.n_actions()),
    };
    let threshold = if gamma == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - gamma) / gamma
    };
    let mut residuals = Vec::new();
    for it in 1..=max_iter {
        let next = bellman(env, &q, mu, gamma)?;
        let r = sup_distance(&next, &q)?;
        residuals.push(r);
        q = next;
        if r <= threshold {
            return Ok(QStarSolution {
                q,
                iterations: it,
                residuals,
            });
        }
    }
    Err(not_converged(
        "value iteration",
        max_iter,
        residuals.last().copied().unwrap_or(f64::NAN),
    ))
}

fn solve_linear(a: DMatrix<f64>, b: DVector<f64>) -> Option<Vec<f64>> {
    let x = a.lu().solve(&b)?;
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

/// `Q*_mu` to near machine precision: policy iteration seeded from the
/// greedy policy of `warm` (or of the cost), checked against value iteration.
pub(crate) fn q_star_precise<E: MeanFieldEnv + ?Sized>(
    env: &E,
    mu: &SimplexVector,
    gamma: f64,
    tol: f64,
    warm: Option<&QTable>,
) -> Result<QTable> {
    let (nx, na) = (env.n_states(), env.n_actions());
    let mut kernel = vec![0.0; nx * na * nx];
    let mut cost = vec![0.0; nx * na];
    for x in 0..nx {
        for a in 0..na {
            let i = x * na + a;
            env.kernel_into(x, a, mu, &mut kernel[i * nx..(i + 1) * nx]);
            cost[i] = env.cost(x, a, mu);
        }
    }
    let greedy = |q: &[f64]| -> Vec<usize> {
        (0..nx)
            .map(|x| {
                let row = &q[x * na..(x + 1) * na];
                let mut best = 0;
                for a in 1..na {
                    if row[a] < row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    };
    let mut policy = greedy(warm.map(|w| w.as_slice()).unwrap_or(&cost));
    let mut q = vec![0.0; nx * na];
    for _ in 0..200 {
        let mut a_mat = DMatrix::<f64>::identity(nx, nx);
        let mut b = DVector::<f64>::zeros(nx);
        for x in 0..nx {
            let i = x * na + policy[x];
            b[x] = cost[i];
            for y in 0..nx {
                a_mat[(x, y)] -= gamma * kernel[i * nx + y];
            }
        }
        let Some(v) = solve_linear(a_mat, b) else { break };
        for i in 0..nx * na {
            let ev: f64 = kernel[i * nx..(i + 1) * nx].iter().zip(&v).map(|(p, v)| p * v).sum();
            q[i] = cost[i] + gamma * ev;
        }
        let next = greedy(&q);
        // keep the incumbent action on ties so the loop terminates
        let improved = (0..nx).any(|x| q[x * na + next[x]] < q[x * na + policy[x]] - 1e-13);
        if !improved {
            break;
        }
        policy = next;
    }
    let candidate = QTable::new(nx, na, q)?;
    let threshold = if gamma == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - gamma) / gamma
    };
    let r = sup_distance(&bellman(env, &candidate, mu, gamma)?, &candidate)?;
    if r <= threshold {
        return Ok(candidate);
    }
    Ok(solve_q_star_detailed(env, mu, gamma, tol, INNER_MAX_ITER, Some(&candidate))?.q)
}

/// Power-iteration output.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub mu: SimplexVector,
    pub iterations: usize,
    /// `true` when every chain entry is positive, which makes the stationary
    /// distribution unique. `false` means uniqueness was not certified.
    pub unique: bool,
}

/// Stationary distribution of the chain `pi` induces with the kernel frozen
/// at `mu_in_kernel`, by power iteration from the uniform distribution.
pub fn stationary_distribution<E: MeanFieldEnv + ?Sized>(
    env: &E,
    pi: &PolicyTable,
    mu_in_kernel: &SimplexVector,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryDistribution> {
    let start = SimplexVector::uniform(env.n_states())?;
    stationary_distribution_from(env, pi, mu_in_kernel, &start, tol, max_iter)
}

pub fn stationary_distribution_from<E: MeanFieldEnv + ?Sized>(
    env: &E,
    pi: &PolicyTable,
    mu_in_kernel: &SimplexVector,
    start: &SimplexVector,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryDistribution> {
    check_tol(tol)?;
    check_mu(env, start)?;
    let m = transition_matrix(env, pi, mu_in_kernel)?;
    let unique = m.iter().flatten().all(|p| *p > 0.0);
    let mut v = start.as_slice().to_vec();
    let mut r = f64::NAN;
    for it in 1..=max_iter {
        let next = push_forward(&m, &v);
        r = l1_slices(&next, &v)?;
        v = next;
        if r <= tol {
            return Ok(StationaryDistribution {
                mu: SimplexVector::new(v)?,
                iterations: it,
                unique,
            });
        }
    }
    Err(not_converged("power iteration", max_iter, r))
}

/// Solves `v M = v`, `sum v = 1` directly. `None` when the chain has no
/// unique stationary distribution.
fn stationary_exact(m: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = m.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = m[i][j];
        }
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let v = solve_linear(a, b)?;
    if v.iter().any(|p| *p < -1e-10) {
        return None;
    }
    let v: Vec<f64> = v.into_iter().map(|p| p.max(0.0)).collect();
    let s: f64 = v.iter().sum();
    Some(v.into_iter().map(|p| p / s).collect())
}

/// Fixed point of `mu -> P^{pi, mu} mu`: each sweep replaces `mu` with the
/// stationary distribution of the chain whose kernel is frozen at `mu`.
pub(crate) fn induced_distribution<E: MeanFieldEnv + ?Sized>(
    env: &E,
    pi: &PolicyTable,
    start: &SimplexVector,
    tol: f64,
    stage: &str,
) -> Result<SimplexVector> {
    let mut mu = start.clone();
    let mut r = f64::NAN;
    for _ in 0..INNER_MAX_ITER {
        let m = transition_matrix(env, pi, &mu)?;
        let next = match stationary_exact(&m) {
            Some(v) => SimplexVector::new(v)?,
            None => SimplexVector::new(push_forward(&m, mu.as_slice()))?,
        };
        r = l1_distance(&next, &mu)?;
        mu = next;
        if r <= tol {
            return Ok(mu);
        }
    }
    Err(not_converged(stage, INNER_MAX_ITER, r))
}

/// How a fixed point was reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Plain fixed-point iteration of the defining map.
    Picard,
    /// Newton iteration on the distribution residual after Picard stalled.
    Newton,
    /// Q-iteration stalled; solved in distribution space and verified.
    DistributionSpace,
    /// Damped iteration (sharp equilibria).
    Damped,
}

impl SolveMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveMethod::Picard => "picard",
            SolveMethod::Newton => "newton",
            SolveMethod::DistributionSpace => "distribution-space",
            SolveMethod::Damped => "damped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSolution {
    pub mu: SimplexVector,
    pub q: QTable,
    pub mu_loc: Option<SimplexVector>,
    /// Outer sweeps, Newton steps included.
    pub iterations: usize,
    /// L¹ norm of the distribution drift at the solution.
    pub p_residual: f64,
    /// Sup norm of the Bellman residual at the solution.
    pub t_residual: f64,
    /// L¹ norm of the local-distribution drift, three-population solves only.
    pub loc_residual: Option<f64>,
    /// Per-sweep change of the outer iterate.
    pub history: Vec<f64>,
    pub method: SolveMethod,
    pub converged: bool,
    /// Damped iteration saw a period-two pattern and shrank its step.
    pub oscillation: bool,
}

fn require_converged(sol: FixedPointSolution, stage: &str) -> Result<FixedPointSolution> {
    if sol.converged {
        Ok(sol)
    } else {
        let r = sol.p_residual.max(sol.t_residual);
        Err(not_converged(stage, sol.iterations, r))
    }
}

/// Newton's method on a residual map `F` over the simplex, in the reduced
/// coordinates `(mu_0, .., mu_{n-2})`. Returns the iterate, its merit
/// `||F||_1` and the number of steps.
fn newton_simplex(
    start: &SimplexVector,
    tol: f64,
    max_iter: usize,
    residual: &mut dyn FnMut(&SimplexVector) -> Result<Vec<f64>>,
) -> Result<(SimplexVector, f64, usize)> {
    let n = start.len();
    let merit = |f: &[f64]| f.iter().map(|v| v.abs()).sum::<f64>();
    let mut mu = start.clone();
    let mut f = residual(&mu)?;
    let mut m = merit(&f);
    if n == 1 {
        return Ok((mu, m, 0));
    }
    let shift = |base: &SimplexVector, dir: &[f64], t: f64| -> Result<SimplexVector> {
        let v: Vec<f64> = base
            .as_slice()
            .iter()
            .zip(dir)
            .map(|(p, d)| (p + t * d).max(0.0))
            .collect();
        SimplexVector::normalized(v)
    };
    for it in 0..max_iter {
        if m <= tol {
            return Ok((mu, m, it));
        }
        let k = n - 1;
        let mut jac = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e[n - 1] = -1.0;
            let h: f64 = 1e-7;
            let up = h.min(mu.get(n - 1));
            let down = h.min(mu.get(j));
            if up + down <= 0.0 {
                return Err(not_converged("newton jacobian", it, m));
            }
            let fp = residual(&shift(&mu, &e, up)?)?;
            let fm = residual(&shift(&mu, &e, -down)?)?;
            for i in 0..k {
                jac[(i, j)] = (fp[i] - fm[i]) / (up + down);
            }
        }
        let rhs = DVector::from_iterator(k, f[..k].iter().map(|v| -v));
        let Some(d) = solve_linear(jac, rhs) else {
            return Err(not_converged("newton linear solve", it, m));
        };
        let mut dir = d.clone();
        dir.push(-d.iter().sum::<f64>());
        let mut t_max: f64 = 1.0;
        for (p, dv) in mu.as_slice().iter().zip(&dir) {
            if *dv < 0.0 {
                t_max = t_max.min(p / -dv);
            }
        }
        let mut t = t_max;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = shift(&mu, &dir, t)?;
            let fc = residual(&cand)?;
            let mc = merit(&fc);
            if mc < (1.0 - 1e-4 * t) * m {
                mu = cand;
                f = fc;
                m = mc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(not_converged("newton line search", it, m));
        }
    }
    if m <= tol {
        Ok((mu, m, max_iter))
    } else {
        Err(not_converged("newton", max_iter, m))
    }
}

const NEWTON_MAX_ITER: usize = 200;

/// Softmin-regularized equilibrium: the fixed point of
/// `mu -> P^{softmin Q*_mu, mu} mu`. Errors when it is not reached.
pub fn solve_mfg_fixed_point<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    phi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    require_converged(
        solve_mfg_fixed_point_best_effort(env, gamma, phi, tol, max_iter)?,
        "MFG fixed point",
    )
}

/// As [`solve_mfg_fixed_point`], but returns the best iterate with
/// `converged = false` instead of an error when the tolerance is missed.
///
/// Runs the fixed-point map first; if it stalls (the residual fails to
/// halve over 50 sweeps) or exhausts `max_iter`, switches to Newton's
/// method on the drift from the best iterate.
pub fn solve_mfg_fixed_point_best_effort<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    phi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    check_tol(tol)?;
    check_gamma(gamma)?;
    check_phi(phi)?;
    let q_tol = (tol / 10.0).max(Q_TOL_FLOOR);
    let mut mu = SimplexVector::uniform(env.n_states())?;
    let mut q: Option<QTable> = None;
    let mut history = Vec::new();
    let mut best: Option<(f64, SimplexVector, QTable)> = None;

    for k in 0..max_iter {
        let qk = q_star_precise(env, &mu, gamma, q_tol, q.as_ref())?;
        let pi = PolicyTable::softmin(&qk, phi)?;
        let next = crate::operators::transition_operator(env, &pi, &mu, &mu)?;
        let r = l1_distance(&next, &mu)?;
        history.push(r);
        if best.as_ref().is_none_or(|b| r < b.0) {
            best = Some((r, mu.clone(), qk.clone()));
        }
        if r <= tol {
            return finish_mfg(env, gamma, phi, mu, qk, history, SolveMethod::Picard, true);
        }
        if k >= 50 && k % 50 == 0 && r > 0.5 * history[k - 50] {
            break;
        }
        mu = next;
        q = Some(qk);
    }

    let (_, start, start_q) = match best {
        Some(b) => b,
        None => {
            let q0 = q_star_precise(env, &mu, gamma, q_tol, None)?;
            (f64::INFINITY, mu, q0)
        }
    };
    let mut warm = start_q.clone();
    let mut drift = |m: &SimplexVector| -> Result<Vec<f64>> {
        warm = q_star_precise(env, m, gamma, q_tol, Some(&warm))?;
        p2(env, &warm, m, phi)
    };
    let picard_sweeps = history.len();
    match newton_simplex(&start, tol, NEWTON_MAX_ITER, &mut drift) {
        Ok((m, merit, steps)) => {
            let qm = q_star_precise(env, &m, gamma, q_tol, None)?;
            history.push(merit);
            let mut sol = finish_mfg(env, gamma, phi, m, qm, history, SolveMethod::Newton, true)?;
            sol.iterations = picard_sweeps + steps;
            Ok(sol)
        }
        Err(_) => finish_mfg(env, gamma, phi, start, start_q, history, SolveMethod::Picard, false),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_mfg<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    phi: f64,
    mu: SimplexVector,
    q: QTable,
    history: Vec<f64>,
    method: SolveMethod,
    converged: bool,
) -> Result<FixedPointSolution> {
    let p_residual = p2(env, &q, &mu, phi)?.iter().map(|v| v.abs()).sum();
    let t_residual = t2(env, &q, &mu, gamma)?.sup_norm();
    Ok(FixedPointSolution {
        iterations: history.len(),
        mu,
        q,
        mu_loc: None,
        p_residual,
        t_residual,
        loc_residual: None,
        history,
        method,
        converged,
        oscillation: false,
    })
}

/// Regularized control optimum: the fixed point of `Q -> B_{mu_Q} Q`, where
/// `mu_Q` is the distribution induced by `softmin Q`.
pub fn solve_mfc_fixed_point<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    phi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    require_converged(
        solve_mfc_fixed_point_best_effort(env, gamma, phi, tol, max_iter)?,
        "MFC fixed point",
    )
}

/// As [`solve_mfc_fixed_point`] without the convergence error.
///
/// When the Q-iteration stalls (its sup change fails to halve over 200
/// sweeps), the fixed point is sought in distribution space instead: any `Q`
/// with `Q = B_{mu_Q} Q` is `Q*_{mu_Q}` with `mu_Q` stationary under
/// `softmin Q*_{mu_Q}`, which is the distribution-space fixed point. The
/// candidate is accepted only if its Q-residual meets `tol`.
pub fn solve_mfc_fixed_point_best_effort<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    phi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    check_tol(tol)?;
    check_gamma(gamma)?;
    check_phi(phi)?;
    let dist_tol = (tol / 10.0).max(DIST_TOL_FLOOR);
    let stage = "MFC induced distribution";
    let mut q = QTable::zeros(env.n_states(), env.n_actions());
    let mut mu_guess = SimplexVector::uniform(env.n_states())?;
    let mut history = Vec::new();
    let mut best: Option<(f64, QTable, SimplexVector)> = None;

    for k in 0..max_iter {
        let pi = PolicyTable::softmin(&q, phi)?;
        let mu_q = induced_distribution(env, &pi, &mu_guess, dist_tol, stage)?;
        let next = bellman(env, &q, &mu_q, gamma)?;
        let r = sup_distance(&next, &q)?;
        history.push(r);
        if best.as_ref().is_none_or(|b| r < b.0) {
            best = Some((r, q.clone(), mu_q.clone()));
        }
        if r <= tol {
            return finish_mfc(env, gamma, phi, q, mu_q, history, SolveMethod::Picard, true);
        }
        if k >= 200 && k % 200 == 0 && r > 0.5 * history[k - 200] {
            break;
        }
        q = next;
        mu_guess = mu_q;
    }

    let sweeps = history.len();
    let mfg = solve_mfg_fixed_point_best_effort(env, gamma, phi, (tol / 10.0).max(1e-12), max_iter)?;
    if mfg.converged {
        let pi = PolicyTable::softmin(&mfg.q, phi)?;
        let mu_q = induced_distribution(env, &pi, &mfg.mu, dist_tol, stage)?;
        let r = sup_distance(&bellman(env, &mfg.q, &mu_q, gamma)?, &mfg.q)?;
        if r <= tol {
            history.push(r);
            let mut sol = finish_mfc(
                env,
                gamma,
                phi,
                mfg.q,
                mu_q,
                history,
                SolveMethod::DistributionSpace,
                true,
            )?;
            sol.iterations = sweeps + mfg.iterations;
            return Ok(sol);
        }
    }
    let (_, bq, bmu) = best.expect("at least one sweep when max_iter > 0");
    finish_mfc(env, gamma, phi, bq, bmu, history, SolveMethod::Picard, false)
}

#[allow(clippy::too_many_arguments)]
fn finish_mfc<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    phi: f64,
    q: QTable,
    mu: SimplexVector,
    history: Vec<f64>,
    method: SolveMethod,
    converged: bool,
) -> Result<FixedPointSolution> {
    finish_mfg(env, gamma, phi, mu, q, history, method, converged)
}

const MFCG_LOCAL: &str = "MFCG local layer";
const MFCG_Q: &str = "MFCG Q layer";
const MFCG_GLOBAL: &str = "MFCG global layer";

/// Innermost layer: the local distribution consistent with `(Q, mu)`.
fn mfcg_local<E: ThreePopEnv + ?Sized>(
    env3: &E,
    pi: &PolicyTable,
    mu: &SimplexVector,
    start: &SimplexVector,
    tol: f64,
) -> Result<SimplexVector> {
    let mut loc = start.clone();
    let mut r = f64::NAN;
    for _ in 0..INNER_MAX_ITER {
        let frozen = FreezeLocal::new(env3, &loc)?;
        let m = transition_matrix(&frozen, pi, mu)?;
        let next = match stationary_exact(&m) {
            Some(v) => SimplexVector::new(v)?,
            None => SimplexVector::new(push_forward(&m, loc.as_slice()))?,
        };
        r = l1_distance(&next, &loc)?;
        loc = next;
        if r <= tol {
            return Ok(loc);
        }
    }
    Err(not_converged(MFCG_LOCAL, INNER_MAX_ITER, r))
}

/// Middle layer: `Q = B_{mu, mu'(Q, mu)} Q` for a fixed global `mu`.
#[allow(clippy::too_many_arguments)]
fn mfcg_q<E: ThreePopEnv + ?Sized>(
    env3: &E,
    mu: &SimplexVector,
    gamma: f64,
    phi: f64,
    tol: f64,
    loc_tol: f64,
    max_iter: usize,
    warm: (&QTable, &SimplexVector),
) -> Result<(QTable, SimplexVector)> {
    let (mut q, mut loc) = (warm.0.clone(), warm.1.clone());
    let mut r = f64::NAN;
    for _ in 0..max_iter {
        let pi = PolicyTable::softmin(&q, phi)?;
        loc = mfcg_local(env3, &pi, mu, &loc, loc_tol)?;
        let next = bellman(&FreezeLocal::new(env3, &loc)?, &q, mu, gamma)?;
        r = sup_distance(&next, &q)?;
        if r <= tol {
            return Ok((q, loc));
        }
        q = next;
    }
    Err(not_converged(MFCG_Q, max_iter, r))
}

/// Control-game equilibrium by three nested fixed points: local distribution
/// given `(Q, mu)`, then `Q` given `mu`, then the global `mu`. The error of a
/// failed solve names the layer that stalled.
pub fn solve_mfcg_fixed_point<E: ThreePopEnv + ?Sized>(
    env3: &E,
    gamma: f64,
    phi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    check_tol(tol)?;
    check_gamma(gamma)?;
    check_phi(phi)?;
    let q_tol = (tol / 10.0).max(Q_TOL_FLOOR);
    let loc_tol = (tol / 100.0).max(DIST_TOL_FLOOR);
    let (nx, na) = (env3.n_states(), env3.n_actions());
    let mut mu = SimplexVector::uniform(nx)?;
    let mut q = QTable::zeros(nx, na);
    let mut loc = SimplexVector::uniform(nx)?;
    let mut history = Vec::new();

    let layer = |m: &SimplexVector, q: &QTable, loc: &SimplexVector| {
        mfcg_q(env3, m, gamma, phi, q_tol, loc_tol, INNER_MAX_ITER, (q, loc))
    };

    for k in 0..max_iter {
        let (qk, lk) = layer(&mu, &q, &loc)?;
        let drift = p3(env3, &qk, &mu, &lk, phi)?;
        let r: f64 = drift.iter().map(|v| v.abs()).sum();
        history.push(r);
        if r <= tol {
            return finish_mfcg(env3, gamma, phi, mu, qk, lk, history, SolveMethod::Picard);
        }
        let stalled = k >= 50 && k % 50 == 0 && r > 0.5 * history[k - 50];
        let mut next = mu.clone();
        next.apply_drift(&drift, 1.0)?;
        mu = next;
        q = qk;
        loc = lk;
        if stalled {
            break;
        }
    }

    let mut warm = (q.clone(), loc.clone());
    let mut residual = |m: &SimplexVector| -> Result<Vec<f64>> {
        warm = layer(m, &warm.0, &warm.1)?;
        p3(env3, &warm.0, m, &warm.1, phi)
    };
    let sweeps = history.len();
    let (m, merit, steps) = newton_simplex(&mu, tol, NEWTON_MAX_ITER, &mut residual).map_err(|e| {
        match e {
            Error::Convergence { residual, .. } => not_converged(MFCG_GLOBAL, sweeps, residual),
            other => other,
        }
    })?;
    let (qm, lm) = layer(&m, &q, &loc)?;
    history.push(merit);
    let mut sol = finish_mfcg(env3, gamma, phi, m, qm, lm, history, SolveMethod::Newton)?;
    sol.iterations = sweeps + steps;
    Ok(sol)
}

#[allow(clippy::too_many_arguments)]
fn finish_mfcg<E: ThreePopEnv + ?Sized>(
    env3: &E,
    gamma: f64,
    phi: f64,
    mu: SimplexVector,
    q: QTable,
    loc: SimplexVector,
    history: Vec<f64>,
    method: SolveMethod,
) -> Result<FixedPointSolution> {
    let p_residual = p3(env3, &q, &mu, &loc, phi)?.iter().map(|v| v.abs()).sum();
    let loc_residual = p3_prime(env3, &q, &mu, &loc, phi)?.iter().map(|v| v.abs()).sum();
    let t_residual = t3(env3, &q, &mu, &loc, gamma)?.sup_norm();
    Ok(FixedPointSolution {
        iterations: history.len(),
        mu,
        q,
        mu_loc: Some(loc),
        p_residual,
        t_residual,
        loc_residual: Some(loc_residual),
        history,
        method,
        converged: true,
        oscillation: false,
    })
}

/// Smallest positive margin between a row's minimum and its next distinct
/// value. Rows without a second distinct value are skipped; infinity when
/// every row is constant.
pub fn action_gap(q: &QTable) -> f64 {
    let mut gap = f64::INFINITY;
    for x in 0..q.n_states() {
        let row = q.row(x);
        let m = q.row_min(x);
        let second = row
            .iter()
            .copied()
            .filter(|v| *v - m > crate::policy::TIE_TOLERANCE)
            .fold(f64::INFINITY, f64::min);
        gap = gap.min(second - m);
    }
    gap
}

/// `V(x) = min_a Q(x, a)`.
pub fn value_from_q(q: &QTable) -> Vec<f64> {
    (0..q.n_states()).map(|x| q.row_min(x)).collect()
}

/// Model constants entering `phi_max` and the accuracy bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConstants {
    pub n_states: usize,
    pub n_actions: usize,
    pub c_min: f64,
    pub l_f: f64,
    pub l_p: f64,
    /// `||f||_inf`
    pub f_sup: f64,
}

impl ModelConstants {
    pub fn from_report(r: &ConstantsReport) -> Self {
        Self {
            n_states: r.n_states,
            n_actions: r.n_actions,
            c_min: r.c_min,
            l_f: r.l_f,
            l_p: r.l_p,
            f_sup: r.f_sup,
        }
    }

    /// `L_f + gamma / (1 - gamma) L_p ||f||_inf`
    pub fn effective_lipschitz(&self, gamma: f64) -> f64 {
        self.l_f + gamma / (1.0 - gamma) * self.l_p * self.f_sup
    }

    /// Upper bound on the per-sweep contraction factor of the regularized
    /// equilibrium map at `phi`.
    pub fn contraction_factor(&self, gamma: f64, phi: f64) -> f64 {
        phi * self.n_actions as f64 * self.effective_lipschitz(gamma) / (1.0 - gamma) + self.l_p
            + 1.0
            - self.n_states as f64 * self.c_min
    }
}

/// Largest softmin parameter for which the equilibrium map is a contraction:
/// `(|X| c_min - L_p) / |A| * (1 - gamma) / (L_f + gamma/(1-gamma) L_p ||f||)`.
pub fn phi_max(c: &ModelConstants, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let margin = c.n_states as f64 * c.c_min - c.l_p;
    if margin <= 0.0 {
        return Err(Error::Inapplicable(format!(
            "|X| c_min = {} does not exceed L_p = {}",
            c.n_states as f64 * c.c_min,
            c.l_p
        )));
    }
    let lip = c.effective_lipschitz(gamma);
    if lip <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(margin / c.n_actions as f64 * (1.0 - gamma) / lip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Mfg,
    Mfc,
    Mfcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundForm {
    /// Evaluated at the given `phi`.
    Phi,
    /// Evaluated at `phi = phi_max - 1/delta`.
    TunedPhi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub form: BoundForm,
    pub phi: f64,
    pub phi_max: f64,
    pub delta: f64,
    /// Bound on the L¹ distance between regularized and sharp distributions.
    pub mu_bound: Option<f64>,
    /// Bound on the sup distance between regularized and sharp Q-functions.
    pub q_bound: Option<f64>,
    pub applicable: bool,
}

/// Distances between the softmin-regularized solution at `phi` and the sharp
/// one. For the three-population kind, pass total (global plus local)
/// Lipschitz constants in `c`. Inapplicable when `phi >= phi_max`.
pub fn error_bounds(
    kind: BoundKind,
    phi: f64,
    phi_max: f64,
    delta: f64,
    c: &ModelConstants,
    gamma: f64,
) -> Result<BoundReport> {
    check_gamma(gamma)?;
    if !(delta > 0.0) {
        return domain(format!("action gap must be positive, got {delta}"));
    }
    let mut report = BoundReport {
        kind,
        form: BoundForm::Phi,
        phi,
        phi_max,
        delta,
        mu_bound: None,
        q_bound: None,
        applicable: phi < phi_max,
    };
    if !report.applicable {
        return Ok(report);
    }
    let root_a = (c.n_actions as f64).sqrt();
    let decay = if delta.is_infinite() {
        0.0
    } else {
        (-phi * delta).exp()
    };
    let lip = c.effective_lipschitz(gamma);
    report.q_bound = Some(2.0 * root_a * decay / (phi_max - phi));
    report.mu_bound = Some(2.0 * root_a * (1.0 - gamma) * decay / (lip * (phi_max - phi)));
    Ok(report)
}

/// The bounds at the particular choice `phi = phi_max - 1/delta`,
/// `2 |A|^(1/2) delta (1-gamma) / L exp(1 - phi_max delta)` for the
/// distribution and `2 |A|^(1/2) delta exp(1 - phi_max delta)` for `Q`.
pub fn tuned_phi_bounds(
    kind: BoundKind,
    phi_max: f64,
    delta: f64,
    c: &ModelConstants,
    gamma: f64,
) -> Result<BoundReport> {
    check_gamma(gamma)?;
    if !(delta > 0.0) {
        return domain(format!("action gap must be positive, got {delta}"));
    }
    let phi = phi_max - 1.0 / delta;
    let mut report = BoundReport {
        kind,
        form: BoundForm::TunedPhi,
        phi,
        phi_max,
        delta,
        mu_bound: None,
        q_bound: None,
        applicable: phi > 0.0,
    };
    if !report.applicable {
        return Ok(report);
    }
    let root_a = (c.n_actions as f64).sqrt();
    if delta.is_infinite() {
        report.q_bound = Some(0.0);
        report.mu_bound = Some(0.0);
        return Ok(report);
    }
    let e = (1.0 - phi_max * delta).exp();
    report.q_bound = Some(2.0 * root_a * delta * e);
    report.mu_bound = Some(2.0 * root_a * delta * (1.0 - gamma) / c.effective_lipschitz(gamma) * e);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharpKind {
    Mfg,
    Mfc,
}

/// Damping factor of the sharp solver.
pub const SHARP_DAMPING: f64 = 0.5;

/// Equilibrium with exact greedy (`argmin_e`) policies.
///
/// No contraction is available here, so the defining map is iterated with
/// damping 0.5. A period-two pattern over the last four iterates halves the
/// damping and sets `oscillation`. The final iterate is returned with
/// `converged = false` when the residual tolerance is not met.
pub fn solve_sharp_equilibrium<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    tol: f64,
    max_iter: usize,
    kind: SharpKind,
) -> Result<FixedPointSolution> {
    check_tol(tol)?;
    check_gamma(gamma)?;
    match kind {
        SharpKind::Mfg => sharp_mfg(env, gamma, tol, max_iter),
        SharpKind::Mfc => sharp_mfc(env, gamma, tol, max_iter),
    }
}

fn argmin_policy(q: &QTable) -> Result<PolicyTable> {
    PolicyTable::new(
        (0..q.n_states())
            .map(|x| argmin_e(q.row(x)))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Four iterates `a, b, c, d` (oldest first) alternate when each is much
/// closer to the one two steps back than to its predecessor.
fn alternating(d01: f64, d12: f64, d23: f64, d02: f64, d13: f64) -> bool {
    d02 < 0.5 * d12.min(d01) && d13 < 0.5 * d23.min(d12)
}

fn sharp_mfg<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    let q_tol = (tol / 10.0).max(Q_TOL_FLOOR);
    let mut beta = SHARP_DAMPING;
    let mut oscillation = false;
    let mut mu = SimplexVector::uniform(env.n_states())?;
    let mut q = q_star_precise(env, &mu, gamma, q_tol, None)?;
    let mut recent: Vec<SimplexVector> = vec![mu.clone()];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let pi = argmin_policy(&q)?;
        let target = crate::operators::transition_operator(env, &pi, &mu, &mu)?;
        let r = l1_distance(&target, &mu)?;
        history.push(r);
        if r <= tol {
            converged = true;
            break;
        }
        let drift: Vec<f64> = target
            .as_slice()
            .iter()
            .zip(mu.as_slice())
            .map(|(t, m)| t - m)
            .collect();
        mu.apply_drift(&drift, beta)?;
        q = q_star_precise(env, &mu, gamma, q_tol, Some(&q))?;
        recent.push(mu.clone());
        if recent.len() > 4 {
            recent.remove(0);
        }
        if recent.len() == 4 {
            let d = |i: usize, j: usize| l1_distance(&recent[i], &recent[j]).unwrap_or(0.0);
            if alternating(d(0, 1), d(1, 2), d(2, 3), d(0, 2), d(1, 3)) {
                oscillation = true;
                beta *= 0.5;
                recent.drain(..3);
            }
        }
        if beta * r <= tol * 1e-3 {
            // the damped step no longer moves the iterate
            break;
        }
    }
    let pi = argmin_policy(&q)?;
    let next = crate::operators::transition_operator(env, &pi, &mu, &mu)?;
    let p_residual = l1_distance(&next, &mu)?;
    let t_residual = t2(env, &q, &mu, gamma)?.sup_norm();
    Ok(FixedPointSolution {
        iterations: history.len(),
        mu,
        q,
        mu_loc: None,
        p_residual,
        t_residual,
        loc_residual: None,
        history,
        method: SolveMethod::Damped,
        converged,
        oscillation,
    })
}

fn sharp_mfc<E: MeanFieldEnv + ?Sized>(
    env: &E,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    let dist_tol = (tol / 10.0).max(DIST_TOL_FLOOR);
    let stage = "sharp MFC induced distribution";
    let mut beta = SHARP_DAMPING;
    let mut oscillation = false;
    let mut q = QTable::zeros(env.n_states(), env.n_actions());
    let mut mu = SimplexVector::uniform(env.n_states())?;
    let mut recent: Vec<QTable> = vec![q.clone()];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        mu = induced_distribution(env, &argmin_policy(&q)?, &mu, dist_tol, stage)?;
        let target = bellman(env, &q, &mu, gamma)?;
        let r = sup_distance(&target, &q)?;
        history.push(r);
        if r <= tol {
            converged = true;
            break;
        }
        let vals: Vec<f64> = q
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| a + beta * (b - a))
            .collect();
        q = QTable::new(q.n_states(), q.n_actions(), vals)?;
        recent.push(q.clone());
        if recent.len() > 4 {
            recent.remove(0);
        }
        if recent.len() == 4 {
            let d = |i: usize, j: usize| sup_distance(&recent[i], &recent[j]).unwrap_or(0.0);
            if alternating(d(0, 1), d(1, 2), d(2, 3), d(0, 2), d(1, 3)) {
                oscillation = true;
                beta *= 0.5;
                recent.drain(..3);
            }
        }
        if beta * r <= tol * 1e-3 {
            break;
        }
    }
    mu = induced_distribution(env, &argmin_policy(&q)?, &mu, dist_tol, stage)?;
    let t_residual = sup_distance(&bellman(env, &q, &mu, gamma)?, &q)?;
    let pi = argmin_policy(&q)?;
    let next = crate::operators::transition_operator(env, &pi, &mu, &mu)?;
    let p_residual = l1_distance(&next, &mu)?;
    Ok(FixedPointSolution {
        iterations: history.len(),
        mu,
        q,
        mu_loc: None,
        p_residual,
        t_residual,
        loc_residual: None,
        history,
        method: SolveMethod::Damped,
        converged,
        oscillation,
    })
}
