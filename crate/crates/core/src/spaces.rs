//! State and action spaces, distributions over states, Q-tables, the
//! environment abstractions and the seeded random stream.

use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Error, Result};

/// Entries below this are rejected outright at construction.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;
/// Largest accepted deviation of a probability vector's sum from one.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A finite space `{0, .., size-1}` with optional display names.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    size: usize,
    labels: Option<Vec<String>>,
}

/// A finite action space; same shape as [`StateSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    size: usize,
    labels: Option<Vec<String>>,
}

macro_rules! finite_space {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(size: usize) -> Result<Self> {
                if size == 0 {
                    return domain(concat!($what, " space must be non-empty"));
                }
                Ok(Self { size, labels: None })
            }

            pub fn with_labels(labels: Vec<String>) -> Result<Self> {
                if labels.is_empty() {
                    return domain(concat!($what, " space must be non-empty"));
                }
                Ok(Self {
                    size: labels.len(),
                    labels: Some(labels),
                })
            }

            pub fn size(&self) -> usize {
                self.size
            }

            pub fn labels(&self) -> Option<&[String]> {
                self.labels.as_deref()
            }

            /// Display name of element `i`, falling back to its index.
            pub fn label(&self, i: usize) -> String {
                match &self.labels {
                    Some(l) => l[i].clone(),
                    None => i.to_string(),
                }
            }
        }
    };
}

finite_space!(StateSpace, "state");
finite_space!(ActionSpace, "action");

/// A probability vector over a finite state space.
///
/// Every instance is non-negative and sums to one up to rounding; all
/// constructors and in-place updates enforce this.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector {
    probs: Vec<f64>,
}

impl SimplexVector {
    /// Validates a vector that is already meant to be a probability vector
    /// and renormalizes away floating-point dust.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum = checked_sum(&probs)?;
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return domain(format!("probabilities sum to {sum}, expected 1"));
        }
        Ok(Self::renormalize(probs, sum))
    }

    /// Builds a distribution proportional to non-negative `weights`.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum = checked_sum(&weights)?;
        if sum <= 0.0 {
            return domain("weights sum to zero");
        }
        Ok(Self::renormalize(weights, sum))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return domain("uniform distribution over an empty space");
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    fn renormalize(mut probs: Vec<f64>, sum: f64) -> Self {
        for p in probs.iter_mut() {
            *p = p.max(0.0) / sum;
        }
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn get(&self, x: usize) -> f64 {
        self.probs[x]
    }

    /// In place `self <- (1 - rho) self + rho * dirac(x)`.
    pub fn mix_toward_state(&mut self, x: usize, rho: f64) -> Result<()> {
        check_rate(rho)?;
        if x >= self.probs.len() {
            return domain(format!("state {x} out of range"));
        }
        for p in self.probs.iter_mut() {
            *p *= 1.0 - rho;
        }
        self.probs[x] += rho;
        Ok(())
    }

    /// In place `self <- self + rho * drift`, where `drift` sums to zero and
    /// `self + drift` is itself a probability vector. Valid for `rho` in `[0, 1]`.
    pub fn apply_drift(&mut self, drift: &[f64], rho: f64) -> Result<()> {
        check_rate(rho)?;
        if drift.len() != self.probs.len() {
            return domain("drift length does not match distribution");
        }
        let mut sum = 0.0;
        for (p, d) in self.probs.iter_mut().zip(drift) {
            *p += rho * d;
            if *p < -NEGATIVE_TOLERANCE || !p.is_finite() {
                return domain(format!("update left the simplex (entry {p})"));
            }
            *p = p.max(0.0);
            sum += *p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return domain(format!("update left the simplex (sum {sum})"));
        }
        for p in self.probs.iter_mut() {
            *p /= sum;
        }
        Ok(())
    }

    /// `true` when the vector satisfies the simplex invariant at the assertion tolerance.
    pub fn is_valid(&self) -> bool {
        is_probability_vector(&self.probs)
    }
}

impl fmt::Display for SimplexVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.probs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{p:.6}")?;
        }
        write!(f, ")")
    }
}

fn check_rate(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "rate {rho} outside [0, 1] would leave the simplex"
        )));
    }
    Ok(())
}

fn checked_sum(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return domain("empty probability vector");
    }
    let mut sum = 0.0;
    for &p in v {
        if !p.is_finite() {
            return domain("non-finite probability");
        }
        if p < -NEGATIVE_TOLERANCE {
            return domain(format!("negative probability {p}"));
        }
        sum += p.max(0.0);
    }
    Ok(sum)
}

/// Non-negative (to `NEGATIVE_TOLERANCE`) and summing to one (to `SUM_TOLERANCE`).
pub fn is_probability_vector(v: &[f64]) -> bool {
    !v.is_empty()
        && v.iter().all(|p| p.is_finite() && *p >= -NEGATIVE_TOLERANCE)
        && (v.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE
}

/// A dense `|X| x |A|` table of state-action values, row-major by state.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::constant(n_states, n_actions, 0.0)
    }

    pub fn constant(n_states: usize, n_actions: usize, c: f64) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![c; n_states * n_actions],
        }
    }

    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return domain("Q-table dimensions must be positive");
        }
        if values.len() != n_states * n_actions {
            return domain(format!(
                "expected {} values for a {n_states}x{n_actions} table, got {}",
                n_states * n_actions,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("Q-table entries must be finite");
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n_actions) {
            return domain("ragged Q-table rows");
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }

    pub fn get(&self, x: usize, a: usize) -> f64 {
        self.values[x * self.n_actions + a]
    }

    pub fn set(&mut self, x: usize, a: usize, v: f64) {
        self.values[x * self.n_actions + a] = v;
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn row_min(&self, x: usize) -> f64 {
        self.row(x).iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `max |Q(x, a)|`.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// The indicator distribution of state `x`.
pub fn dirac(x: usize, states: &StateSpace) -> Result<SimplexVector> {
    if x >= states.size() {
        return domain(format!("state {x} outside space of size {}", states.size()));
    }
    let mut probs = vec![0.0; states.size()];
    probs[x] = 1.0;
    Ok(SimplexVector { probs })
}

/// `sum_x |a(x) - b(x)|`.
pub fn l1_distance(a: &SimplexVector, b: &SimplexVector) -> Result<f64> {
    l1_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn l1_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return domain(format!("length mismatch {} vs {}", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// Largest entrywise absolute difference of two equally shaped tables.
pub fn sup_distance(a: &QTable, b: &QTable) -> Result<f64> {
    if a.shape() != b.shape() {
        return domain(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(a
        .values
        .iter()
        .zip(&b.values)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// Lipschitz constants (L¹ in the measure argument) an environment declares
/// about its cost and kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeclaredConstants {
    pub l_f: Option<f64>,
    pub l_p: Option<f64>,
}

/// Declared constants of a three-population environment, split into the
/// global-measure and local-measure parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ThreePopConstants {
    pub l_f_glob: Option<f64>,
    pub l_f_loc: Option<f64>,
    pub l_p_glob: Option<f64>,
    pub l_p_loc: Option<f64>,
}

impl ThreePopConstants {
    /// `(L_f^glob + L_f^loc, L_p^glob + L_p^loc)` when all four are declared.
    pub fn totals(&self) -> Option<(f64, f64)> {
        Some((
            self.l_f_glob? + self.l_f_loc?,
            self.l_p_glob? + self.l_p_loc?,
        ))
    }
}

/// A single-population tabular mean-field model: running cost `f(x, a, mu)`
/// and transition kernel `p(. | x, a, mu)`.
pub trait MeanFieldEnv: Send + Sync {
    fn states(&self) -> &StateSpace;
    fn actions(&self) -> &ActionSpace;

    fn cost(&self, x: usize, a: usize, mu: &SimplexVector) -> f64;

    /// Writes `p(. | x, a, mu)` into `out` (length `|X|`).
    fn kernel_into(&self, x: usize, a: usize, mu: &SimplexVector, out: &mut [f64]);

    fn declared_constants(&self) -> DeclaredConstants {
        DeclaredConstants::default()
    }

    /// The validated next-state distribution.
    fn kernel(&self, x: usize, a: usize, mu: &SimplexVector) -> Result<SimplexVector> {
        let mut out = vec![0.0; self.n_states()];
        self.kernel_into(x, a, mu, &mut out);
        SimplexVector::new(out)
    }

    fn n_states(&self) -> usize {
        self.states().size()
    }

    fn n_actions(&self) -> usize {
        self.actions().size()
    }
}

/// A model with a global and a local population measure.
pub trait ThreePopEnv: Send + Sync {
    fn states(&self) -> &StateSpace;
    fn actions(&self) -> &ActionSpace;

    fn cost3(&self, x: usize, a: usize, mu: &SimplexVector, mu_loc: &SimplexVector) -> f64;

    fn kernel3_into(
        &self,
        x: usize,
        a: usize,
        mu: &SimplexVector,
        mu_loc: &SimplexVector,
        out: &mut [f64],
    );

    fn declared_constants(&self) -> ThreePopConstants {
        ThreePopConstants::default()
    }

    fn kernel3(
        &self,
        x: usize,
        a: usize,
        mu: &SimplexVector,
        mu_loc: &SimplexVector,
    ) -> Result<SimplexVector> {
        let mut out = vec![0.0; self.n_states()];
        self.kernel3_into(x, a, mu, mu_loc, &mut out);
        SimplexVector::new(out)
    }

    fn n_states(&self) -> usize {
        self.states().size()
    }

    fn n_actions(&self) -> usize {
        self.actions().size()
    }
}

type CostFn = dyn Fn(usize, usize, &SimplexVector) -> f64 + Send + Sync;
type KernelFn = dyn Fn(usize, usize, &SimplexVector) -> Vec<f64> + Send + Sync;
type Cost3Fn = dyn Fn(usize, usize, &SimplexVector, &SimplexVector) -> f64 + Send + Sync;
type Kernel3Fn = dyn Fn(usize, usize, &SimplexVector, &SimplexVector) -> Vec<f64> + Send + Sync;

/// An environment assembled from closures.
#[derive(Clone)]
pub struct TabularMFEnvironment {
    states: StateSpace,
    actions: ActionSpace,
    cost: Arc<CostFn>,
    kernel: Arc<KernelFn>,
    constants: DeclaredConstants,
}

impl TabularMFEnvironment {
    pub fn new(
        states: StateSpace,
        actions: ActionSpace,
        cost: impl Fn(usize, usize, &SimplexVector) -> f64 + Send + Sync + 'static,
        kernel: impl Fn(usize, usize, &SimplexVector) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            states,
            actions,
            cost: Arc::new(cost),
            kernel: Arc::new(kernel),
            constants: DeclaredConstants::default(),
        }
    }

    pub fn with_constants(mut self, constants: DeclaredConstants) -> Self {
        self.constants = constants;
        self
    }
}

impl fmt::Debug for TabularMFEnvironment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TabularMFEnvironment")
            .field("states", &self.states.size())
            .field("actions", &self.actions.size())
            .field("constants", &self.constants)
            .finish()
    }
}

impl MeanFieldEnv for TabularMFEnvironment {
    fn states(&self) -> &StateSpace {
        &self.states
    }

    fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    fn cost(&self, x: usize, a: usize, mu: &SimplexVector) -> f64 {
        (self.cost)(x, a, mu)
    }

    fn kernel_into(&self, x: usize, a: usize, mu: &SimplexVector, out: &mut [f64]) {
        out.copy_from_slice(&(self.kernel)(x, a, mu));
    }

    fn declared_constants(&self) -> DeclaredConstants {
        self.constants
    }
}

/// A three-population environment assembled from closures.
#[derive(Clone)]
pub struct ThreePopEnvironment {
    states: StateSpace,
    actions: ActionSpace,
    cost3: Arc<Cost3Fn>,
    kernel3: Arc<Kernel3Fn>,
    constants: ThreePopConstants,
}

impl ThreePopEnvironment {
    pub fn new(
        states: StateSpace,
        actions: ActionSpace,
        cost3: impl Fn(usize, usize, &SimplexVector, &SimplexVector) -> f64 + Send + Sync + 'static,
        kernel3: impl Fn(usize, usize, &SimplexVector, &SimplexVector) -> Vec<f64>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        Self {
            states,
            actions,
            cost3: Arc::new(cost3),
            kernel3: Arc::new(kernel3),
            constants: ThreePopConstants::default(),
        }
    }

    pub fn with_constants(mut self, constants: ThreePopConstants) -> Self {
        self.constants = constants;
        self
    }
}

impl fmt::Debug for ThreePopEnvironment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThreePopEnvironment")
            .field("states", &self.states.size())
            .field("actions", &self.actions.size())
            .field("constants", &self.constants)
            .finish()
    }
}

impl ThreePopEnv for ThreePopEnvironment {
    fn states(&self) -> &StateSpace {
        &self.states
    }

    fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    fn cost3(&self, x: usize, a: usize, mu: &SimplexVector, mu_loc: &SimplexVector) -> f64 {
        (self.cost3)(x, a, mu, mu_loc)
    }

    fn kernel3_into(
        &self,
        x: usize,
        a: usize,
        mu: &SimplexVector,
        mu_loc: &SimplexVector,
        out: &mut [f64],
    ) {
        out.copy_from_slice(&(self.kernel3)(x, a, mu, mu_loc));
    }

    fn declared_constants(&self) -> ThreePopConstants {
        self.constants
    }
}

/// Views a single-population model as a three-population one that ignores
/// the local measure.
#[derive(Debug, Clone)]
pub struct IgnoreLocal<E>(pub E);

impl<E: MeanFieldEnv> ThreePopEnv for IgnoreLocal<E> {
    fn states(&self) -> &StateSpace {
        self.0.states()
    }

    fn actions(&self) -> &ActionSpace {
        self.0.actions()
    }

    fn cost3(&self, x: usize, a: usize, mu: &SimplexVector, _mu_loc: &SimplexVector) -> f64 {
        self.0.cost(x, a, mu)
    }

    fn kernel3_into(
        &self,
        x: usize,
        a: usize,
        mu: &SimplexVector,
        _mu_loc: &SimplexVector,
        out: &mut [f64],
    ) {
        self.0.kernel_into(x, a, mu, out)
    }

    fn declared_constants(&self) -> ThreePopConstants {
        let c = self.0.declared_constants();
        ThreePopConstants {
            l_f_glob: c.l_f,
            l_f_loc: Some(0.0),
            l_p_glob: c.l_p,
            l_p_loc: Some(0.0),
        }
    }
}

/// Deterministic random stream: ChaCha8 keyed by a 64-bit seed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn from_seed(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Inverse-CDF draw from a probability vector using one uniform.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        // rounding left u above the accumulated mass
        last_positive
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
