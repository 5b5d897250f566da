//! Built-in environments: the ring ("torus") model with moves {-1, 0, +1},
//! its two-measure variant, and environments given by explicit tables.

use crate::error::{Error, Result};
use crate::spaces::{
    ActionSpace, DeclaredConstants, MeanFieldEnv, SimplexVector, StateSpace, ThreePopConstants,
    ThreePopEnv,
};

/// Ring of `n_states` sites. Each step the chosen move is applied with
/// probability `1 - p_zeta`; otherwise the agent jumps to a uniform site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusSpec {
    n_states: usize,
    p_zeta: f64,
}

impl TorusSpec {
    pub fn new(n_states: usize, p_zeta: f64) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::Config(format!(
                "torus needs at least 2 states, got {n_states}"
            )));
        }
        if !(p_zeta > 0.0 && p_zeta <= 1.0) {
            return Err(Error::Config(format!("p_zeta must lie in (0, 1], got {p_zeta}")));
        }
        Ok(Self { n_states, p_zeta })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn p_zeta(&self) -> f64 {
        self.p_zeta
    }
}

/// Moves of action indices 0, 1, 2.
pub const TORUS_MOVES: [i64; 3] = [-1, 0, 1];

fn normalize_rows(kernel: &mut [f64], n: usize) {
    for row in kernel.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= s;
        }
    }
}

/// Precomputed torus tables shared by the one- and two-measure variants.
#[derive(Debug, Clone)]
struct TorusTables {
    states: StateSpace,
    actions: ActionSpace,
    /// `|X| x |A| x |X|`
    kernel: Vec<f64>,
    /// `|x/N - 1/2|^2 + |a|^2`
    base_cost: Vec<f64>,
}

impl TorusTables {
    fn new(spec: &TorusSpec) -> Self {
        let n = spec.n_states;
        let p = spec.p_zeta;
        let off = p / n as f64;
        let on = 1.0 - p + off;
        let mut kernel = vec![off; n * 3 * n];
        let mut base_cost = vec![0.0; n * 3];
        for x in 0..n {
            let d = x as f64 / n as f64 - 0.5;
            for (a, &m) in TORUS_MOVES.iter().enumerate() {
                let target = (x as i64 + m).rem_euclid(n as i64) as usize;
                kernel[(x * 3 + a) * n + target] = on;
                base_cost[x * 3 + a] = d * d + (m * m) as f64;
            }
        }
        normalize_rows(&mut kernel, n);
        let labels = TORUS_MOVES.iter().map(|m| format!("{m:+}")).collect();
        Self {
            states: StateSpace::new(n).expect("n >= 2"),
            actions: ActionSpace::with_labels(labels).expect("three moves"),
            kernel,
            base_cost,
        }
    }

    fn row(&self, x: usize, a: usize) -> &[f64] {
        let n = self.states.size();
        &self.kernel[(x * 3 + a) * n..(x * 3 + a + 1) * n]
    }
}

/// The ring model with cost `|x/N - 1/2|^2 + mu(x)^2 + |a|^2`.
#[derive(Debug, Clone)]
pub struct TorusEnv {
    spec: TorusSpec,
    tables: TorusTables,
}

pub fn torus_env(spec: &TorusSpec) -> TorusEnv {
    TorusEnv {
        spec: *spec,
        tables: TorusTables::new(spec),
    }
}

impl TorusEnv {
    pub fn spec(&self) -> &TorusSpec {
        &self.spec
    }
}

impl MeanFieldEnv for TorusEnv {
    fn states(&self) -> &StateSpace {
        &self.tables.states
    }

    fn actions(&self) -> &ActionSpace {
        &self.tables.actions
    }

    fn cost(&self, x: usize, a: usize, mu: &SimplexVector) -> f64 {
        let m = mu.get(x);
        self.tables.base_cost[x * 3 + a] + m * m
    }

    fn kernel_into(&self, x: usize, a: usize, _mu: &SimplexVector, out: &mut [f64]) {
        out.copy_from_slice(self.tables.row(x, a));
    }

    fn declared_constants(&self) -> DeclaredConstants {
        DeclaredConstants {
            l_f: Some(1.0),
            l_p: Some(0.0),
        }
    }
}

/// Ring model with cost
/// `|x/N - 1/2|^2 + global_coeff mu(x)^2 + local_coeff mu'(x)^2 + |a|^2`.
#[derive(Debug, Clone)]
pub struct Torus3Env {
    spec: TorusSpec,
    tables: TorusTables,
    local_coeff: f64,
    global_coeff: f64,
}

pub fn torus3_env(spec: &TorusSpec, local_coeff: f64, global_coeff: f64) -> Result<Torus3Env> {
    if !local_coeff.is_finite() || !global_coeff.is_finite() {
        return Err(Error::Config("torus3 coefficients must be finite".into()));
    }
    Ok(Torus3Env {
        spec: *spec,
        tables: TorusTables::new(spec),
        local_coeff,
        global_coeff,
    })
}

impl Torus3Env {
    pub fn spec(&self) -> &TorusSpec {
        &self.spec
    }

    pub fn local_coeff(&self) -> f64 {
        self.local_coeff
    }

    pub fn global_coeff(&self) -> f64 {
        self.global_coeff
    }
}

impl ThreePopEnv for Torus3Env {
    fn states(&self) -> &StateSpace {
        &self.tables.states
    }

    fn actions(&self) -> &ActionSpace {
        &self.tables.actions
    }

    fn cost3(&self, x: usize, a: usize, mu: &SimplexVector, mu_loc: &SimplexVector) -> f64 {
        let (g, l) = (mu.get(x), mu_loc.get(x));
        self.tables.base_cost[x * 3 + a] + self.global_coeff * g * g + self.local_coeff * l * l
    }

    fn kernel3_into(
        &self,
        x: usize,
        a: usize,
        _mu: &SimplexVector,
        _mu_loc: &SimplexVector,
        out: &mut [f64],
    ) {
        out.copy_from_slice(self.tables.row(x, a));
    }

    fn declared_constants(&self) -> ThreePopConstants {
        ThreePopConstants {
            l_f_glob: Some(2.0 * self.global_coeff.abs()),
            l_f_loc: Some(2.0 * self.local_coeff.abs()),
            l_p_glob: Some(0.0),
            l_p_loc: Some(0.0),
        }
    }
}

/// Tables describing a measure-independent kernel and a cost of the form
/// `base(x, a) + coeff(x, a) mu(x)^k`. Arrays are flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEnvSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `kernel[(x * n_actions + a) * n_states + y] = p(y | x, a)`
    pub kernel: Vec<f64>,
    pub cost_base: Vec<f64>,
    pub cost_mf_coeff: Vec<f64>,
    pub cost_mf_power: u32,
}

/// Row sums further than this from one are rejected.
pub const TABLE_ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TableEnv {
    states: StateSpace,
    actions: ActionSpace,
    kernel: Vec<f64>,
    cost_base: Vec<f64>,
    cost_mf_coeff: Vec<f64>,
    power: i32,
    l_f: f64,
}

pub fn table_env(spec: &TableEnvSpec) -> Result<TableEnv> {
    let load = |m: String| Err(Error::Load(m));
    let (nx, na) = (spec.n_states, spec.n_actions);
    if nx == 0 || na == 0 {
        return load("state and action counts must be positive".into());
    }
    if spec.kernel.len() != nx * na * nx {
        return load(format!(
            "kernel has {} entries, expected {}",
            spec.kernel.len(),
            nx * na * nx
        ));
    }
    for (name, v) in [("cost_base", &spec.cost_base), ("cost_mf_coeff", &spec.cost_mf_coeff)] {
        if v.len() != nx * na {
            return load(format!("{name} has {} entries, expected {}", v.len(), nx * na));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return load(format!("{name} has a non-finite entry"));
        }
    }
    if spec.cost_mf_power == 0 {
        return load("cost_mf_power must be a positive integer".into());
    }
    for (i, row) in spec.kernel.chunks(nx).enumerate() {
        let (x, a) = (i / na, i % na);
        if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return load(format!("kernel row ({x}, {a}) has invalid entry {p}"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > TABLE_ROW_TOLERANCE {
            return load(format!("kernel row ({x}, {a}) sums to {s}"));
        }
    }
    let mut kernel = spec.kernel.clone();
    normalize_rows(&mut kernel, nx);
    let max_coeff = spec.cost_mf_coeff.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    Ok(TableEnv {
        states: StateSpace::new(nx)?,
        actions: ActionSpace::new(na)?,
        kernel,
        cost_base: spec.cost_base.clone(),
        cost_mf_coeff: spec.cost_mf_coeff.clone(),
        power: spec.cost_mf_power as i32,
        l_f: max_coeff * spec.cost_mf_power as f64,
    })
}

impl MeanFieldEnv for TableEnv {
    fn states(&self) -> &StateSpace {
        &self.states
    }

    fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    fn cost(&self, x: usize, a: usize, mu: &SimplexVector) -> f64 {
        let i = x * self.actions.size() + a;
        self.cost_base[i] + self.cost_mf_coeff[i] * mu.get(x).powi(self.power)
    }

    fn kernel_into(&self, x: usize, a: usize, _mu: &SimplexVector, out: &mut [f64]) {
        let n = self.states.size();
        let i = x * self.actions.size() + a;
        out.copy_from_slice(&self.kernel[i * n..(i + 1) * n]);
    }

    fn declared_constants(&self) -> DeclaredConstants {
        DeclaredConstants {
            l_f: Some(self.l_f),
            l_p: Some(0.0),
        }
    }
}
