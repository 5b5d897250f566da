use mftq_core::envs::{table_env, torus3_env, torus_env, TableEnvSpec, TorusEnv, TorusSpec};
use mftq_core::operators::{estimate_constants, p2, t2};
use mftq_core::oracles::{
    action_gap, error_bounds, phi_max, solve_mfc_fixed_point, solve_mfc_fixed_point_best_effort,
    solve_mfcg_fixed_point, solve_mfg_fixed_point, solve_q_star, solve_q_star_detailed,
    solve_sharp_equilibrium, stationary_distribution, BoundKind, FixedPointSolution,
    ModelConstants, SharpKind,
};
use mftq_core::spaces::{l1_distance, sup_distance};
use mftq_core::{
    ActionDistribution, ActionSpace, IgnoreLocal, MeanFieldEnv, PolicyTable, SimplexVector, StateSpace,
    TabularMFEnvironment,
};

fn sparse_torus() -> TorusEnv {
    torus_env(&TorusSpec::new(2, 0.01).unwrap())
}

fn contractive() -> (TorusEnv, ModelConstants, f64) {
    let env = torus_env(&TorusSpec::new(2, 0.9).unwrap());
    let c = ModelConstants::from_report(&estimate_constants(&env, 11, 2000).unwrap());
    let pm = phi_max(&c, 0.5).unwrap();
    (env, c, pm)
}

/// Dense Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Q-function of the deterministic policy `greedy` with the measure frozen,
/// from `(I - gamma P_greedy) Q = f`.
fn policy_q<E: MeanFieldEnv>(env: &E, mu: &SimplexVector, gamma: f64, greedy: &[usize]) -> Vec<f64> {
    let (nx, na) = (env.n_states(), env.n_actions());
    let n = nx * na;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for x in 0..nx {
        for u in 0..na {
            let i = x * na + u;
            a[i][i] += 1.0;
            b[i] = env.cost(x, u, mu);
            let k = env.kernel(x, u, mu).unwrap();
            for y in 0..nx {
                a[i][y * na + greedy[y]] -= gamma * k.get(y);
            }
        }
    }
    gauss_solve(a, b)
}

fn greedy_of(q: &[f64], nx: usize, na: usize) -> Vec<usize> {
    (0..nx)
        .map(|x| {
            (0..na)
                .min_by(|&a, &b| q[x * na + a].total_cmp(&q[x * na + b]))
                .unwrap()
        })
        .collect()
}

#[test]
fn q_star_matches_policy_linear_solve() {
    let env = sparse_torus();
    let mu = SimplexVector::uniform(2).unwrap();
    let gamma = 0.99;
    let q = solve_q_star(&env, &mu, gamma, 1e-10, 1_000_000).unwrap();
    let greedy = greedy_of(q.as_slice(), 2, 3);
    let exact = policy_q(&env, &mu, gamma, &greedy);
    // the greedy policy must be stable under its own evaluation
    assert_eq!(greedy_of(&exact, 2, 3), greedy);
    for (a, b) in q.as_slice().iter().zip(&exact) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn q_star_residuals_shrink_by_gamma() {
    let env = torus_env(&TorusSpec::new(4, 0.3).unwrap());
    let mu = SimplexVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    for gamma in [0.3, 0.9, 0.99] {
        let sol = solve_q_star_detailed(&env, &mu, gamma, 1e-9, 1_000_000, None).unwrap();
        for w in sol.residuals.windows(2).skip(1) {
            assert!(w[1] <= gamma * w[0] + 1e-12, "{gamma}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn stationary_two_state_closed_form() {
    let env = sparse_torus();
    let mu = SimplexVector::uniform(2).unwrap();
    // actions are moves -1, 0, +1: stay in state 0, move from state 1
    let pi = PolicyTable::new(vec![
        ActionDistribution::new(vec![0.0, 1.0, 0.0]).unwrap(),
        ActionDistribution::new(vec![0.0, 0.0, 1.0]).unwrap(),
    ])
    .unwrap();
    let s = stationary_distribution(&env, &pi, &mu, 1e-13, 1_000_000).unwrap();
    let k0 = env.kernel(0, 1, &mu).unwrap();
    let k1 = env.kernel(1, 2, &mu).unwrap();
    let (p01, p10) = (k0.get(1), k1.get(0));
    let expected = p10 / (p01 + p10);
    assert!((s.mu.get(0) - expected).abs() < 1e-10);
    assert!((expected - 0.995).abs() < 1e-12, "{p01} {p10} {expected}");
    assert!(s.unique);
}

fn assert_symmetric_residuals(env: &TorusEnv, sol: &FixedPointSolution, gamma: f64, phi: f64, tol: f64) {
    let p: f64 = p2(env, &sol.q, &sol.mu, phi).unwrap().iter().map(|v| v.abs()).sum();
    let t = t2(env, &sol.q, &sol.mu, gamma).unwrap().sup_norm();
    assert!(p <= 2.0 * tol, "P residual {p}");
    assert!(t <= 2.0 * tol, "T residual {t}");
}

#[test]
fn mfg_sparse_torus_equilibrium() {
    let env = sparse_torus();
    let tol = 1e-8;
    let sol = solve_mfg_fixed_point(&env, 0.99, 3000.0, tol, 100_000).unwrap();
    assert!((sol.mu.get(0) - 0.386).abs() <= 0.02, "{:?}", sol.mu);
    assert!((sol.mu.get(1) - 0.614).abs() <= 0.02, "{:?}", sol.mu);
    assert_symmetric_residuals(&env, &sol, 0.99, 3000.0, tol);
}

#[test]
fn mfg_outer_map_contracts_below_analytic_factor() {
    let (env, c, pm) = contractive();
    for frac in [0.25, 0.5, 0.9] {
        let phi = frac * pm;
        let factor = c.contraction_factor(0.5, phi);
        assert!(factor < 1.0);
        let sol = solve_mfg_fixed_point(&env, 0.5, phi, 1e-12, 10_000).unwrap();
        for w in sol.history.windows(2) {
            if w[0] > 1e-10 {
                assert!(w[1] / w[0] <= factor + 1e-6, "phi={phi}: ratio {}", w[1] / w[0]);
            }
        }
        assert_symmetric_residuals(&env, &sol, 0.5, phi, 1e-12);
    }
}

#[test]
fn mfc_matches_mfg_without_coupling() {
    let spec = TableEnvSpec {
        n_states: 3,
        n_actions: 2,
        kernel: vec![
            0.5, 0.3, 0.2, 0.1, 0.1, 0.8, //
            0.3, 0.3, 0.4, 0.6, 0.2, 0.2, //
            0.2, 0.5, 0.3, 0.25, 0.25, 0.5,
        ],
        cost_base: vec![1.0, 0.2, 0.4, 0.9, 0.0, 0.6],
        cost_mf_coeff: vec![0.0; 6],
        cost_mf_power: 1,
    };
    let env = table_env(&spec).unwrap();
    let g = solve_mfg_fixed_point(&env, 0.9, 2.0, 1e-11, 10_000).unwrap();
    let c = solve_mfc_fixed_point(&env, 0.9, 2.0, 1e-11, 10_000).unwrap();
    assert!(l1_distance(&g.mu, &c.mu).unwrap() < 1e-9);
    assert!(sup_distance(&g.q, &c.q).unwrap() < 1e-9);
}

#[test]
fn mfc_sparse_torus_social_optimum() {
    let env = sparse_torus();
    let sol = solve_mfc_fixed_point_best_effort(&env, 0.99, 3000.0, 1e-8, 100_000).unwrap();
    assert!(
        (sol.mu.get(0) - 0.5).abs() <= 0.02 && (sol.mu.get(1) - 0.5).abs() <= 0.02,
        "control fixed point {:?}, converged={}",
        sol.mu,
        sol.converged
    );
}

#[test]
fn mfc_residuals_on_contractive_torus() {
    let (env, _, pm) = contractive();
    let sol = solve_mfc_fixed_point(&env, 0.5, 0.5 * pm, 1e-11, 10_000).unwrap();
    assert_symmetric_residuals(&env, &sol, 0.5, 0.5 * pm, 1e-11);
}

#[test]
fn mfcg_degenerate_reduces_to_mfg() {
    let (env, _, pm) = contractive();
    let phi = 0.5 * pm;
    let tol = 1e-11;
    let g = solve_mfg_fixed_point(&env, 0.5, phi, tol, 10_000).unwrap();
    let lifted = IgnoreLocal(env.clone());
    let m = solve_mfcg_fixed_point(&lifted, 0.5, phi, tol, 10_000).unwrap();
    let loc = m.mu_loc.clone().unwrap();
    assert!(l1_distance(&m.mu, &g.mu).unwrap() < 1e-9);
    assert!(l1_distance(&m.mu, &loc).unwrap() <= 2.0 * tol);
    assert!(sup_distance(&m.q, &g.q).unwrap() < 1e-9);

    let torus3 = torus3_env(&TorusSpec::new(2, 0.9).unwrap(), 0.0, 1.0).unwrap();
    let t = solve_mfcg_fixed_point(&torus3, 0.5, phi, tol, 10_000).unwrap();
    assert!(l1_distance(&t.mu, &g.mu).unwrap() < 1e-9);
}

#[test]
fn mfcg_local_equals_global() {
    let env3 = torus3_env(&TorusSpec::new(3, 0.6).unwrap(), 0.8, 0.3).unwrap();
    let tol = 1e-10;
    let sol = solve_mfcg_fixed_point(&env3, 0.6, 0.05, tol, 10_000).unwrap();
    let loc = sol.mu_loc.clone().unwrap();
    assert!(l1_distance(&sol.mu, &loc).unwrap() <= 2.0 * tol);
    assert!(sol.loc_residual.unwrap() <= tol);
}

#[test]
fn sharp_decoupled_is_stationary_of_greedy() {
    let env = TabularMFEnvironment::new(
        StateSpace::new(3).unwrap(),
        ActionSpace::new(2).unwrap(),
        |x, a, _| [0.3, 1.0, 0.0][x] + 0.2 * a as f64,
        |x, a, _| {
            let mut v = vec![0.1; 3];
            v[(x + a) % 3] += 0.7;
            v
        },
    );
    let sol = solve_sharp_equilibrium(&env, 0.8, 1e-11, 10_000, SharpKind::Mfg).unwrap();
    let mu = SimplexVector::uniform(3).unwrap();
    let q = solve_q_star(&env, &mu, 0.8, 1e-12, 100_000).unwrap();
    let pi = PolicyTable::argmin(&q).unwrap();
    let s = stationary_distribution(&env, &pi, &mu, 1e-13, 100_000).unwrap();
    assert!(l1_distance(&sol.mu, &s.mu).unwrap() < 1e-9);
}

#[test]
fn sharp_sparse_torus_close_to_large_phi() {
    let env = sparse_torus();
    let sharp = solve_sharp_equilibrium(&env, 0.99, 1e-9, 100_000, SharpKind::Mfg).unwrap();
    let reg = solve_mfg_fixed_point(&env, 0.99, 3000.0, 1e-8, 100_000).unwrap();
    assert!(l1_distance(&sharp.mu, &reg.mu).unwrap() <= 0.03, "{:?} vs {:?}", sharp.mu, reg.mu);
}

#[test]
fn bounds_dominate_on_table_envs() {
    let spec = TableEnvSpec {
        n_states: 3,
        n_actions: 2,
        kernel: vec![
            0.6, 0.2, 0.2, 0.2, 0.6, 0.2, //
            0.3, 0.4, 0.3, 0.2, 0.2, 0.6, //
            0.4, 0.3, 0.3, 0.3, 0.3, 0.4,
        ],
        cost_base: vec![0.0, 0.5, 1.0, 0.2, 0.3, 0.9],
        cost_mf_coeff: vec![0.3; 6],
        cost_mf_power: 2,
    };
    let env = table_env(&spec).unwrap();
    let gamma = 0.6;
    let c = ModelConstants::from_report(&estimate_constants(&env, 11, 2000).unwrap());
    let pm = phi_max(&c, gamma).unwrap();
    for (kind, sk) in [(BoundKind::Mfg, SharpKind::Mfg), (BoundKind::Mfc, SharpKind::Mfc)] {
        let sharp = solve_sharp_equilibrium(&env, gamma, 1e-11, 100_000, sk).unwrap();
        let delta = action_gap(&sharp.q);
        for frac in [0.1, 0.5, 0.9] {
            let phi = frac * pm;
            let reg = match kind {
                BoundKind::Mfg => solve_mfg_fixed_point(&env, gamma, phi, 1e-11, 100_000),
                _ => solve_mfc_fixed_point(&env, gamma, phi, 1e-11, 100_000),
            }
            .unwrap();
            let b = error_bounds(kind, phi, pm, delta, &c, gamma).unwrap();
            assert!(b.applicable);
            assert!(l1_distance(&reg.mu, &sharp.mu).unwrap() <= b.mu_bound.unwrap());
            assert!(sup_distance(&reg.q, &sharp.q).unwrap() <= b.q_bound.unwrap());
        }
    }
}

#[test]
fn bounds_not_applicable_past_phi_max() {
    let (_, c, pm) = contractive();
    let b = error_bounds(BoundKind::Mfg, 1.5 * pm, pm, 0.5, &c, 0.5).unwrap();
    assert!(!b.applicable);
    assert!(b.mu_bound.is_none() && b.q_bound.is_none());
}
