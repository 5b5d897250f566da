//! Learning-rate families and timescale admissibility checks.

use std::fmt;

use crate::error::{Error, Result};

/// A learning-rate sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateSchedule {
    /// `1 / (n + 2)^omega` in the global step index `n`.
    PolyStep { omega: f64 },
    /// `1 / (1 + visits)^omega` in a per-pair visit count.
    PolyVisit { omega: f64 },
    /// A fixed rate in `(0, 1]`.
    Constant { value: f64 },
}

impl RateSchedule {
    pub fn poly_step(omega: f64) -> Result<Self> {
        check_omega(omega)?;
        Ok(Self::PolyStep { omega })
    }

    pub fn poly_visit(omega: f64) -> Result<Self> {
        check_omega(omega)?;
        Ok(Self::PolyVisit { omega })
    }

    pub fn constant(value: f64) -> Result<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::Config(format!(
                "constant rate must lie in (0, 1], got {value}"
            )));
        }
        Ok(Self::Constant { value })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::PolyStep { .. } => "poly_step",
            Self::PolyVisit { .. } => "poly_visit",
            Self::Constant { .. } => "constant",
        }
    }

    /// Decay exponent: `omega` for polynomial kinds, zero for constants.
    pub fn exponent(&self) -> f64 {
        match *self {
            Self::PolyStep { omega } | Self::PolyVisit { omega } => omega,
            Self::Constant { .. } => 0.0,
        }
    }

    /// `omega` for polynomial kinds, the rate itself for constants.
    pub fn parameter(&self) -> f64 {
        match *self {
            Self::PolyStep { omega } | Self::PolyVisit { omega } => omega,
            Self::Constant { value } => value,
        }
    }
}

impl fmt::Display for RateSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PolyStep { omega } => write!(f, "poly_step(omega={omega})"),
            Self::PolyVisit { omega } => write!(f, "poly_visit(omega={omega})"),
            Self::Constant { value } => write!(f, "constant({value})"),
        }
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::Config(format!("omega must be positive, got {omega}")));
    }
    Ok(())
}

/// Rate at step `n` for a pair visited `visit_count` times.
pub fn rate_at(s: &RateSchedule, n: u64, visit_count: u64) -> f64 {
    match *s {
        RateSchedule::PolyStep { omega } => (n as f64 + 2.0).powf(-omega),
        RateSchedule::PolyVisit { omega } => (1.0 + visit_count as f64).powf(-omega),
        RateSchedule::Constant { value } => value,
    }
}

/// Which fixed point the rate ordering targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Distribution slower than Q.
    Mfg,
    /// Q slower than distribution.
    Mfc,
    /// Global distribution slowest, then Q, then local distribution.
    Mfcg,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Mfg => "MFG",
            Regime::Mfc => "MFC",
            Regime::Mfcg => "MFCG",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MFG" => Ok(Regime::Mfg),
            "MFC" => Ok(Regime::Mfc),
            "MFCG" => Ok(Regime::Mfcg),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimescaleConfig {
    pub q_schedule: RateSchedule,
    pub mu_schedule: RateSchedule,
    pub mu_loc_schedule: Option<RateSchedule>,
    pub regime: Regime,
}

impl TimescaleConfig {
    pub fn two(regime: Regime, q: RateSchedule, mu: RateSchedule) -> Result<Self> {
        Self::new(regime, q, mu, None)
    }

    pub fn three(q: RateSchedule, mu: RateSchedule, mu_loc: RateSchedule) -> Result<Self> {
        Self::new(Regime::Mfcg, q, mu, Some(mu_loc))
    }

    pub fn new(
        regime: Regime,
        q_schedule: RateSchedule,
        mu_schedule: RateSchedule,
        mu_loc_schedule: Option<RateSchedule>,
    ) -> Result<Self> {
        if (regime == Regime::Mfcg) != mu_loc_schedule.is_some() {
            return Err(Error::Config(
                "a local-distribution schedule is required for MFCG and only for MFCG".into(),
            ));
        }
        Ok(Self {
            q_schedule,
            mu_schedule,
            mu_loc_schedule,
            regime,
        })
    }

    /// MFG ordering with polynomial exponents: per-visit Q rate, per-step distribution rate.
    pub fn mfg(omega_q: f64, omega_mu: f64) -> Result<Self> {
        Self::two(
            Regime::Mfg,
            RateSchedule::poly_visit(omega_q)?,
            RateSchedule::poly_step(omega_mu)?,
        )
    }

    /// MFC ordering with polynomial exponents.
    pub fn mfc(omega_q: f64, omega_mu: f64) -> Result<Self> {
        Self::two(
            Regime::Mfc,
            RateSchedule::poly_visit(omega_q)?,
            RateSchedule::poly_step(omega_mu)?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Warn => "warn",
            CheckStatus::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleCheck {
    /// `a` .. `e`
    pub id: char,
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimescaleReport {
    pub checks: Vec<ScheduleCheck>,
}

impl TimescaleReport {
    pub fn worst(&self) -> CheckStatus {
        self.checks
            .iter()
            .map(|c| c.status)
            .max()
            .unwrap_or(CheckStatus::Pass)
    }

    pub fn all_pass(&self) -> bool {
        self.worst() == CheckStatus::Pass
    }

    pub fn status_of(&self, id: char) -> Option<CheckStatus> {
        self.checks
            .iter()
            .filter(|c| c.id == id)
            .map(|c| c.status)
            .max()
    }
}

/// Admissibility diagnostics. Never blocks a run.
///
/// (a) rates not summable, (b) square summable, (c) ordering matches the
/// regime, (d) constant rates flagged as unproved, (e) the per-pair Q rate is
/// a visit-count polynomial with exponent in (1/2, 1].
pub fn validate_timescales(cfg: &TimescaleConfig) -> TimescaleReport {
    let mut checks = Vec::new();
    let mut named = vec![("rho_Q", cfg.q_schedule), ("rho_mu", cfg.mu_schedule)];
    if let Some(s) = cfg.mu_loc_schedule {
        named.push(("rho_mu_loc", s));
    }

    for (name, s) in &named {
        let (status, detail) = match s {
            RateSchedule::Constant { .. } => (CheckStatus::Pass, format!("{name}: constant")),
            _ if s.exponent() <= 1.0 => (CheckStatus::Pass, format!("{name}: omega <= 1")),
            _ => (CheckStatus::Fail, format!("{name}: omega > 1, rates are summable")),
        };
        checks.push(ScheduleCheck {
            id: 'a',
            name: "divergent sum".into(),
            status,
            detail,
        });
    }

    for (name, s) in &named {
        let (status, detail) = match s {
            RateSchedule::Constant { .. } => (
                CheckStatus::Warn,
                format!("{name}: constant rates are not square summable"),
            ),
            _ if s.exponent() > 0.5 => (CheckStatus::Pass, format!("{name}: omega > 1/2")),
            _ => (
                CheckStatus::Fail,
                format!("{name}: 2 omega = {} <= 1", 2.0 * s.exponent()),
            ),
        };
        checks.push(ScheduleCheck {
            id: 'b',
            name: "square summable".into(),
            status,
            detail,
        });
    }

    let order = |slow: &RateSchedule, fast: &RateSchedule| -> bool {
        match (slow, fast) {
            (RateSchedule::Constant { value: s }, RateSchedule::Constant { value: f }) => s < f,
            _ => slow.exponent() > fast.exponent(),
        }
    };
    let (ok, detail) = match cfg.regime {
        Regime::Mfg => (
            order(&cfg.mu_schedule, &cfg.q_schedule),
            "MFG needs rho_mu / rho_Q -> 0".to_string(),
        ),
        Regime::Mfc => (
            order(&cfg.q_schedule, &cfg.mu_schedule),
            "MFC needs rho_Q / rho_mu -> 0".to_string(),
        ),
        Regime::Mfcg => {
            let ok = match cfg.mu_loc_schedule {
                Some(loc) => order(&cfg.mu_schedule, &cfg.q_schedule) && order(&cfg.q_schedule, &loc),
                None => false,
            };
            (ok, "MFCG needs rho_mu << rho_Q << rho_mu_loc".to_string())
        }
    };
    checks.push(ScheduleCheck {
        id: 'c',
        name: "timescale ordering".into(),
        status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        detail,
    });

    let constants: Vec<&str> = named
        .iter()
        .filter(|(_, s)| matches!(s, RateSchedule::Constant { .. }))
        .map(|(n, _)| *n)
        .collect();
    checks.push(ScheduleCheck {
        id: 'd',
        name: "constant rates".into(),
        status: if constants.is_empty() {
            CheckStatus::Pass
        } else {
            CheckStatus::Warn
        },
        detail: if constants.is_empty() {
            "no constant rates".into()
        } else {
            format!("{} constant: no convergence guarantee", constants.join(", "))
        },
    });

    let its = matches!(cfg.q_schedule, RateSchedule::PolyVisit { omega } if omega > 0.5 && omega <= 1.0);
    checks.push(ScheduleCheck {
        id: 'e',
        name: "ideal tapering stepsize".into(),
        status: if its { CheckStatus::Pass } else { CheckStatus::Warn },
        detail: if its {
            "rho_Q is poly_visit with omega in (1/2, 1]".into()
        } else {
            format!("rho_Q = {} is not covered analytically", cfg.q_schedule)
        },
    });

    TimescaleReport { checks }
}
