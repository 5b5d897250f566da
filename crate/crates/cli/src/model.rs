//! Builds the configured environment.

use mftq_core::envs::{table_env, torus3_env, torus_env, TableEnv, Torus3Env, TorusEnv, TorusSpec};
use mftq_core::operators::{estimate_constants, ConstantsReport, FreezeLocal};
use mftq_core::spaces::DeclaredConstants;
use mftq_core::{
    ActionSpace, IgnoreLocal, MeanFieldEnv, Result, SimplexVector, StateSpace, ThreePopEnv,
};

use crate::config::EnvironmentConfig;

/// Grid points per simplex edge and random samples for constant estimates.
pub const CONSTANTS_GRID: usize = 11;
pub const CONSTANTS_SAMPLES: usize = 2000;

/// A single-population environment.
#[derive(Debug, Clone)]
pub enum TwoPop {
    Torus(TorusEnv),
    Table(TableEnv),
}

impl MeanFieldEnv for TwoPop {
    fn states(&self) -> &StateSpace {
        match self {
            TwoPop::Torus(e) => e.states(),
            TwoPop::Table(e) => e.states(),
        }
    }

    fn actions(&self) -> &ActionSpace {
        match self {
            TwoPop::Torus(e) => e.actions(),
            TwoPop::Table(e) => e.actions(),
        }
    }

    fn cost(&self, x: usize, a: usize, mu: &SimplexVector) -> f64 {
        match self {
            TwoPop::Torus(e) => e.cost(x, a, mu),
            TwoPop::Table(e) => e.cost(x, a, mu),
        }
    }

    fn kernel_into(&self, x: usize, a: usize, mu: &SimplexVector, out: &mut [f64]) {
        match self {
            TwoPop::Torus(e) => e.kernel_into(x, a, mu, out),
            TwoPop::Table(e) => e.kernel_into(x, a, mu, out),
        }
    }

    fn declared_constants(&self) -> DeclaredConstants {
        match self {
            TwoPop::Torus(e) => e.declared_constants(),
            TwoPop::Table(e) => e.declared_constants(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Environment {
    Two(TwoPop),
    Three(Torus3Env),
}

impl Environment {
    pub fn build(cfg: &EnvironmentConfig) -> Result<Self> {
        Ok(match cfg {
            EnvironmentConfig::Torus { n_states, p_zeta } => {
                Environment::Two(TwoPop::Torus(torus_env(&TorusSpec::new(*n_states, *p_zeta)?)))
            }
            EnvironmentConfig::Torus3 {
                n_states,
                p_zeta,
                local_coeff,
                global_coeff,
            } => Environment::Three(torus3_env(
                &TorusSpec::new(*n_states, *p_zeta)?,
                *local_coeff,
                *global_coeff,
            )?),
            EnvironmentConfig::Table { spec, .. } => Environment::Two(TwoPop::Table(table_env(spec)?)),
        })
    }

    pub fn n_states(&self) -> usize {
        match self {
            Environment::Two(e) => e.n_states(),
            Environment::Three(e) => e.n_states(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Environment::Two(e) => e.n_actions(),
            Environment::Three(e) => e.n_actions(),
        }
    }

    pub fn two(&self) -> Option<&TwoPop> {
        match self {
            Environment::Two(e) => Some(e),
            Environment::Three(_) => None,
        }
    }

    /// Three-population view; single-population models ignore the local measure.
    pub fn three(&self) -> Box<dyn ThreePopEnv> {
        match self {
            Environment::Two(e) => Box::new(IgnoreLocal(e.clone())),
            Environment::Three(e) => Box::new(e.clone()),
        }
    }

    /// Kernel extremes and Lipschitz constants. Three-population models are
    /// probed in the global measure with the local one uniform; their
    /// declared totals replace the Lipschitz constants when present.
    pub fn constants(&self) -> Result<ConstantsReport> {
        match self {
            Environment::Two(e) => estimate_constants(e, CONSTANTS_GRID, CONSTANTS_SAMPLES),
            Environment::Three(e) => {
                let loc = SimplexVector::uniform(e.n_states())?;
                let mut r =
                    estimate_constants(&FreezeLocal::new(e, &loc)?, CONSTANTS_GRID, CONSTANTS_SAMPLES)?;
                if let Some((l_f, l_p)) = e.declared_constants().totals() {
                    r.l_f = l_f;
                    r.l_p = l_p;
                }
                Ok(r)
            }
        }
    }
}
