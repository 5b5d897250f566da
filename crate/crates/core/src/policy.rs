//! Softmin and exact-greedy policies over Q-table rows.

use crate::error::{domain, Result};
use crate::spaces::{is_probability_vector, QTable, Rng};

/// Entries of a row within this of the row minimum count as tied minimizers.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// A probability vector over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if !is_probability_vector(&probs) {
            return domain("not a probability vector over actions");
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, a: usize) -> f64 {
        self.probs[a]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_row(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return domain("empty action row");
    }
    let mut m = f64::INFINITY;
    for &v in z {
        if !v.is_finite() {
            return domain(format!("non-finite Q entry {v}"));
        }
        m = m.min(v);
    }
    Ok(m)
}

/// `softmin_phi(z)_i = exp(-phi z_i) / sum_j exp(-phi z_j)`.
pub fn softmin(z: &[f64], phi: f64) -> Result<ActionDistribution> {
    let mut out = vec![0.0; z.len()];
    softmin_into(z, phi, &mut out)?;
    Ok(ActionDistribution { probs: out })
}

/// Allocation-free [`softmin`]. The row minimum is subtracted first, so the
/// largest weight is exactly 1 and nothing overflows for large `phi`.
pub fn softmin_into(z: &[f64], phi: f64, out: &mut [f64]) -> Result<()> {
    if !(phi >= 0.0) || !phi.is_finite() {
        return domain(format!("phi must be finite and non-negative, got {phi}"));
    }
    let m = check_row(z)?;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (-phi * (v - m)).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Uniform over the minimizers of `z`.
pub fn argmin_e(z: &[f64]) -> Result<ActionDistribution> {
    let m = check_row(z)?;
    let ties: Vec<bool> = z.iter().map(|v| v - m <= TIE_TOLERANCE).collect();
    let k = ties.iter().filter(|t| **t).count() as f64;
    Ok(ActionDistribution {
        probs: ties.iter().map(|&t| if t { 1.0 / k } else { 0.0 }).collect(),
    })
}

/// Draws an action by inverse CDF on a single uniform.
pub fn sample_action(dist: &ActionDistribution, rng: &mut Rng) -> usize {
    rng.categorical(&dist.probs)
}

/// One action distribution per state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(rows: Vec<ActionDistribution>) -> Result<Self> {
        let n_actions = match rows.first() {
            Some(r) => r.len(),
            None => return domain("policy over an empty state space"),
        };
        if rows.iter().any(|r| r.len() != n_actions) {
            return domain("policy rows of unequal length");
        }
        let probs = rows.into_iter().flat_map(|r| r.probs).collect();
        Ok(Self { n_actions, probs })
    }

    /// The softmin policy of every row of `q`.
    pub fn softmin(q: &QTable, phi: f64) -> Result<Self> {
        let na = q.n_actions();
        let mut probs = vec![0.0; q.as_slice().len()];
        for x in 0..q.n_states() {
            softmin_into(q.row(x), phi, &mut probs[x * na..(x + 1) * na])?;
        }
        Ok(Self {
            n_actions: na,
            probs,
        })
    }

    /// The exact-greedy policy of every row of `q`.
    pub fn argmin(q: &QTable) -> Result<Self> {
        let rows = (0..q.n_states())
            .map(|x| argmin_e(q.row(x)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// Always plays action `a`.
    pub fn deterministic(n_states: usize, n_actions: usize, a: usize) -> Result<Self> {
        if a >= n_actions {
            return domain(format!("action {a} out of range"));
        }
        let mut row = vec![0.0; n_actions];
        row[a] = 1.0;
        Self::new(vec![ActionDistribution { probs: row }; n_states])
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[x * self.n_actions + a]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmin_examples() {
        let d = softmin(&[5.0, 5.0, 5.0], 10.0).unwrap();
        for p in d.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let d = softmin(&[0.3, -7.0, 12.0, 1.0], 0.0).unwrap();
        assert_eq!(d.as_slice(), &[0.25; 4]);
        let d = softmin(&[0.0, 1.0], 3f64.ln()).unwrap();
        assert!((d.get(0) - 0.75).abs() < 1e-14);
        assert!((d.get(1) - 0.25).abs() < 1e-14);
    }

    #[test]
    fn softmin_large_phi_does_not_overflow() {
        let d = softmin(&[100.0, 100.5, 1000.0], 3000.0).unwrap();
        assert_eq!(d.get(0), 1.0);
        assert!(d.as_slice().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmin_rejects_bad_input() {
        assert!(softmin(&[0.0, f64::NAN], 1.0).is_err());
        assert!(softmin(&[0.0, f64::INFINITY], 1.0).is_err());
        assert!(softmin(&[0.0, 1.0], -1.0).is_err());
        assert!(softmin(&[], 1.0).is_err());
    }

    #[test]
    fn argmin_examples() {
        assert_eq!(argmin_e(&[1.0, 2.0, 3.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(argmin_e(&[1.0, 1.0, 2.0]).unwrap().as_slice(), &[0.5, 0.5, 0.0]);
        let d = argmin_e(&[7.0, 7.0, 7.0]).unwrap();
        assert!(d.as_slice().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let d = argmin_e(&[1.0, 1.0 + 1e-13]).unwrap();
        assert_eq!(d.as_slice(), &[0.5, 0.5]);
        assert!(argmin_e(&[f64::NAN]).is_err());
    }

    #[test]
    fn sampling_degenerate() {
        for seed in 0..20 {
            let mut rng = Rng::from_seed(seed);
            let d = ActionDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
            assert_eq!(sample_action(&d, &mut rng), 0);
            let d = ActionDistribution::new(vec![0.0, 0.0, 1.0]).unwrap();
            assert_eq!(sample_action(&d, &mut rng), 2);
        }
    }

    #[test]
    fn sampling_fair_coin() {
        // sd of the frequency at 1e6 draws is 5e-4; the band is six sd wide
        let mut rng = Rng::from_seed(42);
        let d = ActionDistribution::new(vec![0.5, 0.5]).unwrap();
        let n = 1_000_000;
        let zeros = (0..n).filter(|_| sample_action(&d, &mut rng) == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((0.497..=0.503).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn policy_tables() {
        let q = QTable::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let p = PolicyTable::argmin(&q).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
        assert_eq!(p.row(1), &[0.5, 0.5]);
        let s = PolicyTable::softmin(&q, 3f64.ln()).unwrap();
        assert!((s.prob(0, 0) - 0.75).abs() < 1e-14);
        assert!(PolicyTable::deterministic(2, 2, 2).is_err());
    }
}
