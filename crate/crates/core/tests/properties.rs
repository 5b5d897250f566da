use proptest::prelude::*;

use mftq_core::envs::{table_env, torus3_env, torus_env, TableEnv, TableEnvSpec, TorusSpec};
use mftq_core::operators::{
    bellman, estimate_constants, p2, p3, p3_prime, t2, transition_matrix, transition_operator,
};
use mftq_core::policy::{argmin_e, sample_action, softmin};
use mftq_core::spaces::{dirac, l1_distance, sup_distance};
use mftq_core::{
    rate_at, ActionSpace, MeanFieldEnv, PolicyTable, QTable, RateSchedule, Rng, SimplexVector,
    StateSpace, TabularMFEnvironment, ThreePopEnv,
};

fn measure(n: usize) -> impl Strategy<Value = SimplexVector> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |w| {
        SimplexVector::normalized(w).ok()
    })
}

fn qtable(nx: usize, na: usize) -> impl Strategy<Value = QTable> {
    prop::collection::vec(-10.0f64..10.0, nx * na).prop_map(move |v| QTable::new(nx, na, v).unwrap())
}

fn table_spec() -> impl Strategy<Value = TableEnvSpec> {
    (1usize..6, 1usize..4).prop_flat_map(|(nx, na)| {
        (
            prop::collection::vec(0.01f64..1.0, nx * na * nx),
            prop::collection::vec(0.0f64..2.0, nx * na),
            prop::collection::vec(-1.0f64..1.0, nx * na),
            1u32..4,
        )
            .prop_map(move |(mut kernel, cost_base, cost_mf_coeff, cost_mf_power)| {
                for row in kernel.chunks_mut(nx) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|p| *p /= s);
                }
                TableEnvSpec {
                    n_states: nx,
                    n_actions: na,
                    kernel,
                    cost_base,
                    cost_mf_coeff,
                    cost_mf_power,
                }
            })
    })
}

/// Environment whose kernel tilts toward the most crowded state.
fn crowd_env(nx: usize, na: usize) -> TabularMFEnvironment {
    TabularMFEnvironment::new(
        StateSpace::new(nx).unwrap(),
        ActionSpace::new(na).unwrap(),
        move |x, a, mu| (x + a) as f64 * 0.1 + mu.get(x),
        move |x, a, mu| {
            let w: Vec<f64> = (0..nx)
                .map(|y| 1.0 + mu.get(y) + if y == (x + a) % nx { 1.0 } else { 0.0 })
                .collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        },
    )
}

fn env_and_point() -> impl Strategy<Value = (TableEnv, QTable, QTable, SimplexVector)> {
    table_spec().prop_flat_map(|spec| {
        let (nx, na) = (spec.n_states, spec.n_actions);
        (Just(spec), qtable(nx, na), qtable(nx, na), measure(nx))
            .prop_map(|(s, q1, q2, mu)| (table_env(&s).unwrap(), q1, q2, mu))
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(256)
    })]

    #[test]
    fn normalized_vectors_are_valid(w in prop::collection::vec(0.0f64..1e6, 1..20)) {
        if let Ok(v) = SimplexVector::normalized(w) {
            prop_assert!((v.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(v.as_slice().iter().all(|p| *p >= -1e-12));
        }
    }

    #[test]
    fn dirac_distance(n in 1usize..10, x in 0usize..10, y in 0usize..10) {
        let s = StateSpace::new(n).unwrap();
        let (x, y) = (x % n, y % n);
        let d = l1_distance(&dirac(x, &s).unwrap(), &dirac(y, &s).unwrap()).unwrap();
        prop_assert_eq!(d, if x == y { 0.0 } else { 2.0 });
    }

    #[test]
    fn kernels_are_distributions((env, _, _, mu) in env_and_point(), x in 0usize..6, a in 0usize..4) {
        let (x, a) = (x % env.n_states(), a % env.n_actions());
        prop_assert!(env.kernel(x, a, &mu).unwrap().is_valid());
        prop_assert!(env.cost(x, a, &mu).is_finite());
        let crowd = crowd_env(env.n_states(), env.n_actions());
        prop_assert!(crowd.kernel(x, a, &mu).unwrap().is_valid());
    }

    #[test]
    fn softmin_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 1..8), c in -1e3f64..1e3, phi in 0.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let m = z.iter().copied().fold(f64::INFINITY, f64::min);
        let ms = shifted.iter().copied().fold(f64::INFINITY, f64::min);
        // bitwise equality needs the shifted gaps to round to the same values
        let exact = z.iter().zip(&shifted).all(|(a, b)| b - ms == a - m);
        let s1 = softmin(&z, phi).unwrap();
        let s2 = softmin(&shifted, phi).unwrap();
        if exact {
            prop_assert_eq!(s1.as_slice(), s2.as_slice());
        }
        for (a, b) in s1.as_slice().iter().zip(s2.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmin_lipschitz(
        pair in (1usize..8).prop_flat_map(|n| (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )),
        phi in prop::sample::select(vec![0.1, 1.0, 10.0]),
    ) {
        let (z, w) = pair;
        let a = softmin(&z, phi).unwrap();
        let b = softmin(&w, phi).unwrap();
        let lhs: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let dz: f64 = z.iter().zip(&w).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(lhs <= phi * dz + 1e-12);
    }

    #[test]
    fn softmin_approaches_argmin(z in prop::collection::vec(0.0f64..3.0, 2..8), phi in 0.0f64..200.0) {
        let m = z.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assume!(z.iter().filter(|v| **v == m).count() == 1);
        let gap = z.iter().filter(|v| **v > m).fold(f64::INFINITY, |g, v| g.min(v - m));
        let s = softmin(&z, phi).unwrap();
        let a = argmin_e(&z).unwrap();
        let d: f64 = s.as_slice().iter().zip(a.as_slice()).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!(d <= 2.0 * z.len() as f64 * (-phi * gap).exp() + 1e-12);
    }

    #[test]
    fn bellman_contracts((env, q1, q2, mu) in env_and_point(), gamma in 0.0f64..0.999) {
        let b1 = bellman(&env, &q1, &mu, gamma).unwrap();
        let b2 = bellman(&env, &q2, &mu, gamma).unwrap();
        prop_assert!(sup_distance(&b1, &b2).unwrap() <= gamma * sup_distance(&q1, &q2).unwrap() + 1e-12);
    }

    #[test]
    fn p2_lipschitz_in_q((env, q1, q2, mu) in env_and_point(), phi in 0.0f64..5.0) {
        let a = p2(&env, &q1, &mu, phi).unwrap();
        let b = p2(&env, &q2, &mu, phi).unwrap();
        let lhs: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        let bound = phi * env.n_actions() as f64 * sup_distance(&q1, &q2).unwrap();
        prop_assert!(lhs <= bound + 1e-12);
    }

    #[test]
    fn t2_lipschitz_in_q((env, q1, q2, mu) in env_and_point(), gamma in 0.0f64..0.999) {
        let a = t2(&env, &q1, &mu, gamma).unwrap();
        let b = t2(&env, &q2, &mu, gamma).unwrap();
        let lhs = sup_distance(&a, &b).unwrap();
        prop_assert!(lhs <= (gamma + 1.0) * sup_distance(&q1, &q2).unwrap() + 1e-12);
    }

    #[test]
    fn drifts_sum_to_zero((env, q, _, mu) in env_and_point(), loc_w in prop::collection::vec(0.01f64..1.0, 5), phi in 0.0f64..10.0) {
        let s: f64 = p2(&env, &q, &mu, phi).unwrap().iter().sum();
        prop_assert!(s.abs() <= 1e-12);
        let nx = env.n_states();
        let env3 = torus3_env(&TorusSpec::new(nx.max(2), 0.3).unwrap(), 0.7, 0.4).unwrap();
        let nx3 = env3.n_states();
        let mu3 = SimplexVector::normalized(loc_w.iter().cycle().take(nx3).copied().collect()).unwrap();
        let loc = SimplexVector::uniform(nx3).unwrap();
        let q3 = QTable::new(nx3, 3, (0..nx3 * 3).map(|i| q.as_slice()[i % q.as_slice().len()]).collect()).unwrap();
        prop_assert!(p3(&env3, &q3, &mu3, &loc, phi).unwrap().iter().sum::<f64>().abs() <= 1e-12);
        prop_assert!(p3_prime(&env3, &q3, &mu3, &loc, phi).unwrap().iter().sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn transition_operator_matches_dense_product(
        (nx, na, q, mu, input) in (1usize..7, 1usize..4).prop_flat_map(|(nx, na)| {
            (Just(nx), Just(na), qtable(nx, na), measure(nx), measure(nx))
        }),
        phi in 0.0f64..3.0,
    ) {
        let env = crowd_env(nx, na);
        let pi = PolicyTable::softmin(&q, phi).unwrap();
        // dense matrix built straight from the kernel
        let mut dense = vec![vec![0.0; nx]; nx];
        for (x, row) in dense.iter_mut().enumerate() {
            for a in 0..na {
                let k = env.kernel(x, a, &mu).unwrap();
                for y in 0..nx {
                    row[y] += pi.prob(x, a) * k.get(y);
                }
            }
        }
        let m = transition_matrix(&env, &pi, &mu).unwrap();
        let out = transition_operator(&env, &pi, &mu, &input).unwrap();
        for y in 0..nx {
            let expected: f64 = (0..nx).map(|x| input.get(x) * dense[x][y]).sum();
            prop_assert!((out.get(y) - expected).abs() <= 1e-12);
            for x in 0..nx {
                prop_assert!((m[x][y] - dense[x][y]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn rates_nonincreasing(omega in 0.01f64..1.0, n in 0u64..1_000_000, k in 1u64..1000) {
        let step = RateSchedule::poly_step(omega).unwrap();
        let visit = RateSchedule::poly_visit(omega).unwrap();
        prop_assert!(rate_at(&step, n + k, 1) <= rate_at(&step, n, 1));
        prop_assert!(rate_at(&visit, 0, n + k) <= rate_at(&visit, 0, n));
        prop_assert!(rate_at(&step, n, 1) <= 1.0 && rate_at(&step, n, 1) > 0.0);
    }
}

#[test]
fn rate_ratio_vanishes() {
    for (fast, slow) in [(0.55, 0.85), (0.55, 0.95), (0.6, 0.7)] {
        let n = 1_000_000;
        let r = rate_at(&RateSchedule::poly_step(slow).unwrap(), n, 1)
            / rate_at(&RateSchedule::poly_step(fast).unwrap(), n, 1);
        assert!(r < 10f64.powf(-(slow - fast) * 6.0 + 0.5), "{fast} {slow}: {r}");
    }
}

#[test]
fn sample_action_chi_square() {
    let dist = softmin(&[0.3, 0.0, 1.2, 0.5], 1.7).unwrap();
    let mut rng = Rng::from_seed(11);
    let n = 100_000;
    let mut counts = [0u64; 4];
    for _ in 0..n {
        counts[sample_action(&dist, &mut rng)] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(dist.as_slice())
        .map(|(&c, p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // chi-square with 3 degrees of freedom, upper 1e-3 quantile
    assert!(chi2 < 16.266, "chi2 = {chi2}");
}

#[test]
fn torus_kernels_doubly_stochastic() {
    for n in 2..=16 {
        for p in [0.01, 0.3, 1.0] {
            let env = torus_env(&TorusSpec::new(n, p).unwrap());
            let mu = SimplexVector::uniform(n).unwrap();
            for a in 0..3 {
                let mut cols = vec![0.0; n];
                for x in 0..n {
                    let k = env.kernel(x, a, &mu).unwrap();
                    assert!((k.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for y in 0..n {
                        cols[y] += k.get(y);
                    }
                }
                assert!(cols.iter().all(|c| (c - 1.0).abs() < 1e-12), "n={n} p={p} a={a}");
            }
        }
    }
}

#[test]
fn torus_constants_estimates() {
    for (n, p) in [(2, 0.01), (3, 0.5), (5, 0.9)] {
        let env = torus_env(&TorusSpec::new(n, p).unwrap());
        let r = estimate_constants(&env, 6, 500).unwrap();
        assert_eq!(r.l_p_hat, 0.0);
        assert!(r.l_f_hat <= 1.0 + 1e-9, "{}", r.l_f_hat);
        assert!((r.c_min - p / n as f64).abs() < 1e-15);
    }
}

#[test]
fn random_kernel_queries_are_valid() {
    let mut rng = Rng::from_seed(5);
    let envs: Vec<Box<dyn MeanFieldEnv>> = vec![
        Box::new(torus_env(&TorusSpec::new(4, 0.2).unwrap())),
        Box::new(crowd_env(4, 3)),
    ];
    for env in &envs {
        for _ in 0..1000 {
            let w: Vec<f64> = (0..4).map(|_| rng.uniform() + 1e-9).collect();
            let mu = SimplexVector::normalized(w).unwrap();
            let (x, a) = (rng.index(4), rng.index(3));
            assert!(env.kernel(x, a, &mu).unwrap().is_valid());
        }
    }
    let env3 = torus3_env(&TorusSpec::new(4, 0.2).unwrap(), 1.0, 0.5).unwrap();
    let mu = SimplexVector::uniform(4).unwrap();
    for x in 0..4 {
        for a in 0..3 {
            assert!(env3.kernel3(x, a, &mu, &mu).unwrap().is_valid());
        }
    }
}
