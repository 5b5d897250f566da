//! Deterministic mean-field operators: population transition, Bellman
//! operator and the drift fields driving the idealized iterations.

use crate::error::{domain, Error, Result};
use crate::policy::PolicyTable;
use crate::spaces::{
    ActionSpace, DeclaredConstants, MeanFieldEnv, QTable, Rng, SimplexVector, StateSpace,
    ThreePopEnv,
};

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

pub(crate) fn check_mu<E: MeanFieldEnv + ?Sized>(env: &E, mu: &SimplexVector) -> Result<()> {
    if mu.len() != env.n_states() {
        return domain(format!(
            "distribution has {} entries, state space has {}",
            mu.len(),
            env.n_states()
        ));
    }
    Ok(())
}

pub(crate) fn check_q<E: MeanFieldEnv + ?Sized>(env: &E, q: &QTable) -> Result<()> {
    if q.shape() != (env.n_states(), env.n_actions()) {
        return domain(format!(
            "Q-table is {:?}, environment is {}x{}",
            q.shape(),
            env.n_states(),
            env.n_actions()
        ));
    }
    Ok(())
}

/// A three-population environment with its local measure held fixed, seen
/// as a single-population one in the global measure.
pub struct FreezeLocal<'a, E: ?Sized> {
    env: &'a E,
    mu_loc: &'a SimplexVector,
}

impl<'a, E: ThreePopEnv + ?Sized> FreezeLocal<'a, E> {
    pub fn new(env: &'a E, mu_loc: &'a SimplexVector) -> Result<Self> {
        if mu_loc.len() != env.n_states() {
            return domain("local distribution does not match the state space");
        }
        Ok(Self { env, mu_loc })
    }
}

impl<E: ThreePopEnv + ?Sized> MeanFieldEnv for FreezeLocal<'_, E> {
    fn states(&self) -> &StateSpace {
        self.env.states()
    }

    fn actions(&self) -> &ActionSpace {
        self.env.actions()
    }

    fn cost(&self, x: usize, a: usize, mu: &SimplexVector) -> f64 {
        self.env.cost3(x, a, mu, self.mu_loc)
    }

    fn kernel_into(&self, x: usize, a: usize, mu: &SimplexVector, out: &mut [f64]) {
        self.env.kernel3_into(x, a, mu, self.mu_loc, out)
    }

    fn declared_constants(&self) -> DeclaredConstants {
        let c = self.env.declared_constants();
        DeclaredConstants {
            l_f: c.l_f_glob,
            l_p: c.l_p_glob,
        }
    }
}

/// `M[x][y] = sum_a pi(a|x) p(y|x,a,mu)`: the state chain under `pi` with
/// the kernel frozen at `mu`.
pub fn transition_matrix<E: MeanFieldEnv + ?Sized>(
    env: &E,
    pi: &PolicyTable,
    mu: &SimplexVector,
) -> Result<Vec<Vec<f64>>> {
    check_mu(env, mu)?;
    let (nx, na) = (env.n_states(), env.n_actions());
    if pi.n_states() != nx || pi.n_actions() != na {
        return domain("policy shape does not match environment");
    }
    let mut row = vec![0.0; nx];
    let mut m = vec![vec![0.0; nx]; nx];
    for (x, mx) in m.iter_mut().enumerate() {
        for a in 0..na {
            let w = pi.prob(x, a);
            if w == 0.0 {
                continue;
            }
            env.kernel_into(x, a, mu, &mut row);
            for (t, p) in mx.iter_mut().zip(&row) {
                *t += w * p;
            }
        }
    }
    Ok(m)
}

/// `(P^{pi,mu} input)(x) = sum_{x'} input(x') sum_a pi(a|x') p(x|x',a,mu)`.
pub fn transition_operator<E: MeanFieldEnv + ?Sized>(
    env: &E,
    pi: &PolicyTable,
    mu: &SimplexVector,
    input: &SimplexVector,
) -> Result<SimplexVector> {
    check_mu(env, input)?;
    let m = transition_matrix(env, pi, mu)?;
    SimplexVector::new(push_forward(&m, input.as_slice()))
}

pub(crate) fn push_forward(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (row, &w) in m.iter().zip(v) {
        if w == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    out
}

/// `(B_mu Q)(x,a) = f(x,a,mu) + gamma sum_{x'} p(x'|x,a,mu) min_{a'} Q(x',a')`.
pub fn bellman<E: MeanFieldEnv + ?Sized>(
    env: &E,
    q: &QTable,
    mu: &SimplexVector,
    gamma: f64,
) -> Result<QTable> {
    check_gamma(gamma)?;
    check_mu(env, mu)?;
    check_q(env, q)?;
    let mut out = QTable::zeros(env.n_states(), env.n_actions());
    bellman_into(env, q, mu, gamma, &mut out);
    Ok(out)
}

pub(crate) fn bellman_into<E: MeanFieldEnv + ?Sized>(
    env: &E,
    q: &QTable,
    mu: &SimplexVector,
    gamma: f64,
    out: &mut QTable,
) {
    let (nx, na) = (env.n_states(), env.n_actions());
    let v: Vec<f64> = (0..nx).map(|x| q.row_min(x)).collect();
    let mut row = vec![0.0; nx];
    let vals = out.as_mut_slice();
    for x in 0..nx {
        for a in 0..na {
            env.kernel_into(x, a, mu, &mut row);
            let ev: f64 = row.iter().zip(&v).map(|(p, v)| p * v).sum();
            vals[x * na + a] = env.cost(x, a, mu) + gamma * ev;
        }
    }
}

/// `P^{softmin Q, mu} mu - mu`.
pub fn p2<E: MeanFieldEnv + ?Sized>(
    env: &E,
    q: &QTable,
    mu: &SimplexVector,
    phi: f64,
) -> Result<Vec<f64>> {
    check_q(env, q)?;
    let pi = PolicyTable::softmin(q, phi)?;
    let next = transition_operator(env, &pi, mu, mu)?;
    Ok(difference(next.as_slice(), mu.as_slice()))
}

/// `B_mu Q - Q`.
pub fn t2<E: MeanFieldEnv + ?Sized>(
    env: &E,
    q: &QTable,
    mu: &SimplexVector,
    gamma: f64,
) -> Result<QTable> {
    let b = bellman(env, q, mu, gamma)?;
    let vals = difference(b.as_slice(), q.as_slice());
    QTable::new(q.n_states(), q.n_actions(), vals)
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `mu P^{Q,mu,mu'} - mu`: drift of the global measure.
pub fn p3<E: ThreePopEnv + ?Sized>(
    env3: &E,
    q: &QTable,
    mu: &SimplexVector,
    mu_loc: &SimplexVector,
    phi: f64,
) -> Result<Vec<f64>> {
    p2(&FreezeLocal::new(env3, mu_loc)?, q, mu, phi)
}

/// `mu' P^{Q,mu,mu'} - mu'`: drift of the local measure under the same kernel.
pub fn p3_prime<E: ThreePopEnv + ?Sized>(
    env3: &E,
    q: &QTable,
    mu: &SimplexVector,
    mu_loc: &SimplexVector,
    phi: f64,
) -> Result<Vec<f64>> {
    let frozen = FreezeLocal::new(env3, mu_loc)?;
    check_q(&frozen, q)?;
    let pi = PolicyTable::softmin(q, phi)?;
    let next = transition_operator(&frozen, &pi, mu, mu_loc)?;
    Ok(difference(next.as_slice(), mu_loc.as_slice()))
}

/// Three-population Bellman residual.
pub fn t3<E: ThreePopEnv + ?Sized>(
    env3: &E,
    q: &QTable,
    mu: &SimplexVector,
    mu_loc: &SimplexVector,
    gamma: f64,
) -> Result<QTable> {
    t2(&FreezeLocal::new(env3, mu_loc)?, q, mu, gamma)
}

/// Whether a reported constant was declared by the environment or estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Declared,
    Estimated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Declared => "declared",
            Provenance::Estimated => "estimated",
        }
    }
}

/// Kernel extremes and Lipschitz constants of an environment.
///
/// `l_f` and `l_p` are the declared constants when available and the
/// estimates otherwise; the raw estimates are kept in `l_f_hat`, `l_p_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsReport {
    pub c_min: f64,
    pub c_max: f64,
    pub l_f_hat: f64,
    pub l_p_hat: f64,
    pub l_f: f64,
    pub l_p: f64,
    pub l_f_source: Provenance,
    pub l_p_source: Provenance,
    /// Largest `|f|` seen over all evaluated measures.
    pub f_sup: f64,
    pub n_states: usize,
    pub n_actions: usize,
}

/// Grids larger than this are replaced by the vertices and the barycenter.
const MAX_GRID_POINTS: usize = 20_000;

/// Estimates kernel extremes and Lipschitz constants of `env` from a
/// simplex grid with `grid_resolution` points per edge plus `samples`
/// random measures and measure pairs. Uses a fixed internal seed.
pub fn estimate_constants<E: MeanFieldEnv + ?Sized>(
    env: &E,
    grid_resolution: usize,
    samples: usize,
) -> Result<ConstantsReport> {
    estimate_constants_with_rng(env, grid_resolution, samples, &mut Rng::from_seed(0))
}

pub fn estimate_constants_with_rng<E: MeanFieldEnv + ?Sized>(
    env: &E,
    grid_resolution: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<ConstantsReport> {
    if grid_resolution < 2 {
        return domain("grid_resolution must be at least 2");
    }
    let (nx, na) = (env.n_states(), env.n_actions());
    let mut points = simplex_grid(nx, grid_resolution - 1);
    for _ in 0..samples {
        points.push(random_measure(nx, rng));
    }

    let mut c_min = f64::INFINITY;
    let mut c_max = f64::NEG_INFINITY;
    let mut f_sup: f64 = 0.0;
    let mut row = vec![0.0; nx];
    for mu in &points {
        for x in 0..nx {
            for a in 0..na {
                env.kernel_into(x, a, mu, &mut row);
                for &p in &row {
                    c_min = c_min.min(p);
                    c_max = c_max.max(p);
                }
                let f = env.cost(x, a, mu);
                if !f.is_finite() {
                    return domain(format!("cost at ({x}, {a}) is not finite"));
                }
                f_sup = f_sup.max(f.abs());
            }
        }
    }

    let mut l_f_hat: f64 = 0.0;
    let mut l_p_hat: f64 = 0.0;
    let mut row2 = vec![0.0; nx];
    let n_pairs = samples.max(points.len().min(1000));
    for i in 0..n_pairs {
        let mu = &points[rng.index(points.len())];
        let nu = if i % 2 == 0 {
            random_measure(nx, rng)
        } else {
            // nearby pair: move a little mass toward a random vertex
            let mut nu = mu.clone();
            nu.mix_toward_state(rng.index(nx), 1e-3 * (1.0 + rng.uniform()))?;
            nu
        };
        let d: f64 = mu
            .as_slice()
            .iter()
            .zip(nu.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        if d < 1e-12 {
            continue;
        }
        for x in 0..nx {
            for a in 0..na {
                l_f_hat = l_f_hat.max((env.cost(x, a, mu) - env.cost(x, a, &nu)).abs() / d);
                env.kernel_into(x, a, mu, &mut row);
                env.kernel_into(x, a, &nu, &mut row2);
                let dp: f64 = row.iter().zip(&row2).map(|(p, q)| (p - q).abs()).sum();
                l_p_hat = l_p_hat.max(dp / d);
            }
        }
    }

    let declared = env.declared_constants();
    let (l_f, l_f_source) = reconcile("L_f", l_f_hat, declared.l_f)?;
    let (l_p, l_p_source) = reconcile("L_p", l_p_hat, declared.l_p)?;
    Ok(ConstantsReport {
        c_min,
        c_max,
        l_f_hat,
        l_p_hat,
        l_f,
        l_p,
        l_f_source,
        l_p_source,
        f_sup,
        n_states: nx,
        n_actions: na,
    })
}

fn reconcile(name: &str, estimate: f64, declared: Option<f64>) -> Result<(f64, Provenance)> {
    match declared {
        Some(d) if estimate > d + 1e-9 => Err(Error::Inconsistent(format!(
            "estimated {name} = {estimate} exceeds declared {d}"
        ))),
        Some(d) => Ok((d, Provenance::Declared)),
        None => Ok((estimate, Provenance::Estimated)),
    }
}

/// All measures with entries in multiples of `1/steps`, or the vertices and
/// barycenter when that grid is too large.
fn simplex_grid(n: usize, steps: usize) -> Vec<SimplexVector> {
    let count = binomial(steps + n - 1, n - 1);
    if count.is_none_or(|c| c > MAX_GRID_POINTS) {
        let mut pts: Vec<SimplexVector> = (0..n)
            .map(|x| {
                let mut v = vec![0.0; n];
                v[x] = 1.0;
                SimplexVector::new(v).expect("vertex")
            })
            .collect();
        pts.push(SimplexVector::uniform(n).expect("non-empty"));
        return pts;
    }
    let mut out = Vec::new();
    let mut parts = vec![0usize; n];
    compositions(steps, 0, &mut parts, &mut |p| {
        let v = p.iter().map(|&k| k as f64 / steps as f64).collect();
        out.push(SimplexVector::new(v).expect("grid point"));
    });
    out
}

fn compositions(left: usize, i: usize, parts: &mut [usize], emit: &mut impl FnMut(&[usize])) {
    if i + 1 == parts.len() {
        parts[i] = left;
        emit(parts);
        return;
    }
    for k in 0..=left {
        parts[i] = k;
        compositions(left - k, i + 1, parts, emit);
    }
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let mut r: usize = 1;
    for i in 0..k.min(n - k) {
        r = r.checked_mul(n - i)? / (i + 1);
    }
    Some(r)
}

/// Flat Dirichlet draw.
pub(crate) fn random_measure(n: usize, rng: &mut Rng) -> SimplexVector {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    SimplexVector::normalized(w).unwrap_or_else(|_| SimplexVector::uniform(n).expect("n > 0"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{torus_env, TorusSpec};
    use crate::spaces::{ActionSpace, StateSpace, TabularMFEnvironment};

    fn uniform_env(nx: usize, na: usize) -> TabularMFEnvironment {
        TabularMFEnvironment::new(
            StateSpace::new(nx).unwrap(),
            ActionSpace::new(na).unwrap(),
            |_, _, _| 0.0,
            move |_, _, _| vec![1.0 / nx as f64; nx],
        )
    }

    fn stay_env(nx: usize, na: usize, f: f64) -> TabularMFEnvironment {
        TabularMFEnvironment::new(
            StateSpace::new(nx).unwrap(),
            ActionSpace::new(na).unwrap(),
            move |_, _, _| f,
            move |x, _, _| {
                let mut v = vec![0.0; nx];
                v[x] = 1.0;
                v
            },
        )
    }

    fn torus() -> crate::envs::TorusEnv {
        torus_env(&TorusSpec::new(2, 0.01).unwrap())
    }

    #[test]
    fn transition_trivial_kernels() {
        let env = uniform_env(3, 2);
        let pi = PolicyTable::deterministic(3, 2, 1).unwrap();
        let mu = SimplexVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let input = SimplexVector::new(vec![0.9, 0.1, 0.0]).unwrap();
        let out = transition_operator(&env, &pi, &mu, &input).unwrap();
        for p in out.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let env = stay_env(3, 2, 0.0);
        let out = transition_operator(&env, &pi, &mu, &input).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn transition_torus_hand_value() {
        let env = torus();
        // action index 1 is the move 0
        let pi = PolicyTable::deterministic(2, 3, 1).unwrap();
        let mu = SimplexVector::uniform(2).unwrap();
        let input = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let out = transition_operator(&env, &pi, &mu, &input).unwrap();
        assert!((out.get(0) - 0.995).abs() < 1e-15);
        assert!((out.get(1) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn bellman_examples() {
        let env = stay_env(2, 2, 0.0);
        let mu = SimplexVector::uniform(2).unwrap();
        let b = bellman(&env, &QTable::zeros(2, 2), &mu, 0.9).unwrap();
        assert_eq!(b, QTable::zeros(2, 2));

        let env = uniform_env(2, 2);
        let env1 = TabularMFEnvironment::new(
            StateSpace::new(2).unwrap(),
            ActionSpace::new(2).unwrap(),
            |_, _, _| 1.0,
            |_, _, _| vec![0.5, 0.5],
        );
        let q2 = QTable::constant(2, 2, 2.0);
        assert_eq!(bellman(&env1, &q2, &mu, 0.5).unwrap(), q2);
        drop(env);

        let env = torus();
        let b = bellman(&env, &QTable::zeros(2, 3), &mu, 0.99).unwrap();
        assert!((b.get(0, 1) - 0.5).abs() < 1e-15);
        for x in 0..2 {
            for a in 0..3 {
                assert_eq!(b.get(x, a), env.cost(x, a, &mu));
            }
        }
    }

    #[test]
    fn bellman_rejects_bad_gamma_and_shapes() {
        let env = torus();
        let mu = SimplexVector::uniform(2).unwrap();
        assert!(bellman(&env, &QTable::zeros(2, 3), &mu, 1.0).is_err());
        assert!(bellman(&env, &QTable::zeros(2, 2), &mu, 0.5).is_err());
        assert!(bellman(&env, &QTable::zeros(2, 3), &SimplexVector::uniform(3).unwrap(), 0.5).is_err());
    }

    #[test]
    fn p2_examples() {
        let env = uniform_env(4, 2);
        let mu = SimplexVector::uniform(4).unwrap();
        let q = QTable::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap();
        assert!(p2(&env, &q, &mu, 2.0).unwrap().iter().all(|d| d.abs() < 1e-15));

        let env = stay_env(3, 2, 0.0);
        let mu = SimplexVector::new(vec![0.1, 0.2, 0.7]).unwrap();
        let q = QTable::zeros(3, 2);
        assert!(p2(&env, &q, &mu, 2.0).unwrap().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn p2_torus_enumeration() {
        let env = torus();
        let mu = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let d = p2(&env, &QTable::zeros(2, 3), &mu, 3000.0).unwrap();
        // from x = 0: moves -1 and +1 both land on 1, move 0 stays
        let stay = 1.0 - 0.01 + 0.005;
        let expect0 = (0.005 + stay + 0.005) / 3.0 - 1.0;
        let expect1 = (stay + 0.005 + stay) / 3.0;
        assert!((d[0] - expect0).abs() < 1e-15);
        assert!((d[1] - expect1).abs() < 1e-15);
        assert!((d[0] + d[1]).abs() < 1e-12);
    }

    #[test]
    fn t2_examples() {
        let env = TabularMFEnvironment::new(
            StateSpace::new(2).unwrap(),
            ActionSpace::new(2).unwrap(),
            |_, _, _| 1.0,
            |_, _, _| vec![0.3, 0.7],
        );
        let mu = SimplexVector::uniform(2).unwrap();
        let r = t2(&env, &QTable::zeros(2, 2), &mu, 0.5).unwrap();
        assert!(r.as_slice().iter().all(|v| *v == 1.0));
        for gamma in [0.0, 0.3, 0.9] {
            let q = QTable::constant(2, 2, 1.0 / (1.0 - gamma));
            let r = t2(&env, &q, &mu, gamma).unwrap();
            assert!(r.sup_norm() < 1e-14);
        }
    }

    #[test]
    fn constants_torus() {
        let c = estimate_constants(&torus(), 11, 500).unwrap();
        assert!((c.c_min - 0.005).abs() < 1e-15);
        assert!((c.c_max - 0.995).abs() < 1e-15);
        assert_eq!(c.l_p_hat, 0.0);
        assert!(c.l_f_hat <= 1.0 + 1e-9 && c.l_f_hat > 0.5);
        assert_eq!(c.l_f, 1.0);
        assert_eq!(c.l_f_source, Provenance::Declared);
    }

    #[test]
    fn constants_inconsistent_metadata() {
        let env = TabularMFEnvironment::new(
            StateSpace::new(2).unwrap(),
            ActionSpace::new(1).unwrap(),
            |x, _, mu| 5.0 * mu.get(x),
            |_, _, _| vec![0.5, 0.5],
        )
        .with_constants(DeclaredConstants {
            l_f: Some(1.0),
            l_p: Some(0.0),
        });
        assert!(matches!(
            estimate_constants(&env, 5, 100),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn constants_mu_independent_kernel() {
        let env = uniform_env(3, 2);
        let c = estimate_constants(&env, 4, 200).unwrap();
        assert_eq!(c.l_p_hat, 0.0);
        assert_eq!(c.l_p_source, Provenance::Estimated);
        assert!(estimate_constants(&env, 1, 10).is_err());
    }

    #[test]
    fn grid_enumeration() {
        assert_eq!(simplex_grid(3, 2).len(), 6);
        assert_eq!(simplex_grid(2, 10).len(), 11);
        assert_eq!(simplex_grid(16, 10).len(), 17);
    }
}
