//! Experiment configuration: `[section]` headers with one `key = value` per
//! line. Unknown sections or keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ini::{Ini, ParseOption};
use mftq_core::envs::TableEnvSpec;
use mftq_core::trainers::StopRule;
use mftq_core::{RateSchedule, Regime, TimescaleConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error("[{section}] {key}: {msg}")]
    Value {
        section: String,
        key: String,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvironmentConfig {
    Torus {
        n_states: usize,
        p_zeta: f64,
    },
    Torus3 {
        n_states: usize,
        p_zeta: f64,
        local_coeff: f64,
        global_coeff: f64,
    },
    Table {
        path: PathBuf,
        spec: TableEnvSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Idealized,
    Synchronous,
    Asynchronous,
    ThreeTimescale,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Idealized => "idealized",
            Tier::Synchronous => "synchronous",
            Tier::Asynchronous => "asynchronous",
            Tier::ThreeTimescale => "three_timescale",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerSection {
    pub tier: Tier,
    pub gamma: f64,
    pub phi: f64,
    pub n_steps: u64,
    pub seeds: Vec<u64>,
    pub trace_stride: Option<u64>,
    pub initial_state: Option<usize>,
    /// Three-timescale tier only: iterate expected updates instead of a
    /// sampled trajectory.
    pub idealized: bool,
    pub stop: Option<StopRule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub trainer: TrainerSection,
    pub regime: Regime,
    /// One entry per rate configuration; list-valued keys expand here.
    pub timescales: Vec<TimescaleConfig>,
    pub oracle: OracleSection,
    pub output: OutputSection,
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "environment",
        &["kind", "n_states", "p_zeta", "local_coeff", "global_coeff", "path"],
    ),
    (
        "trainer",
        &[
            "tier",
            "gamma",
            "phi",
            "n_steps",
            "seeds",
            "trace_stride",
            "initial_state",
            "idealized",
            "stop_tol_mu",
            "stop_tol_q",
        ],
    ),
    (
        "timescales",
        &[
            "regime",
            "q_kind",
            "q_omega",
            "q_value",
            "mu_kind",
            "mu_omega",
            "mu_value",
            "mu_loc_kind",
            "mu_loc_omega",
            "mu_loc_value",
        ],
    ),
    ("oracle", &["tol", "max_iter"]),
    ("output", &["directory", "prefix"]),
];

const TABLE_KEYS: &[&str] = &[
    "n_states",
    "n_actions",
    "kernel",
    "cost_base",
    "cost_mf_coeff",
    "cost_mf_power",
];

/// Key-value pairs of one section, consumed as they are read.
struct Section {
    name: String,
    values: BTreeMap<String, String>,
}

impl Section {
    fn err(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            section: self.name.clone(),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.raw(key).ok_or_else(|| self.err(key, "missing"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| self.err(key, format!("{v:?}: {e}"))))
            .transpose()
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?.ok_or_else(|| self.err(key, "missing"))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<T>().map_err(|e| self.err(key, format!("{s:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(v) => Err(self.err(key, format!("expected true or false, got {v:?}"))),
        }
    }
}

fn read_sections(
    text: &str,
    allowed: &[(&str, &[&str])],
) -> Result<BTreeMap<String, Section>, ConfigError> {
    let opt = ParseOption {
        enabled_quote: false,
        enabled_escape: false,
        ..ParseOption::default()
    };
    let ini = Ini::load_from_str_opt(text, opt).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let mut out: BTreeMap<String, Section> = BTreeMap::new();
    for (name, props) in ini.iter() {
        let Some(name) = name else {
            if props.iter().next().is_some() {
                return Err(ConfigError::Syntax("key outside of any [section]".into()));
            }
            continue;
        };
        let Some((_, keys)) = allowed.iter().find(|(s, _)| *s == name) else {
            return Err(ConfigError::Syntax(format!("unknown section [{name}]")));
        };
        if out.contains_key(name) {
            return Err(ConfigError::Syntax(format!("section [{name}] appears twice")));
        }
        let mut values = BTreeMap::new();
        for (k, v) in props.iter() {
            if !keys.contains(&k) {
                return Err(ConfigError::Syntax(format!("unknown key [{name}] {k}")));
            }
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax(format!("key [{name}] {k} appears twice")));
            }
        }
        out.insert(
            name.to_string(),
            Section {
                name: name.to_string(),
                values,
            },
        );
    }
    Ok(out)
}

fn section<'a>(
    sections: &'a BTreeMap<String, Section>,
    name: &str,
) -> Result<&'a Section, ConfigError> {
    sections
        .get(name)
        .ok_or_else(|| ConfigError::Syntax(format!("missing section [{name}]")))
}

fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read_file(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Relative paths in the config resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let sections = read_sections(text, SECTIONS)?;
        let environment = parse_environment(section(&sections, "environment")?, base)?;
        let trainer = parse_trainer(section(&sections, "trainer")?)?;
        let (regime, timescales) = parse_timescales(section(&sections, "timescales")?)?;
        let oracle = match sections.get("oracle") {
            Some(s) => OracleSection {
                tol: s.parse("tol")?.unwrap_or(1e-8),
                max_iter: s.parse("max_iter")?.unwrap_or(100_000),
            },
            None => OracleSection::default(),
        };
        let out = section(&sections, "output")?;
        let output = OutputSection {
            directory: base.join(out.required("directory")?),
            prefix: out.raw("prefix").unwrap_or("mftq").to_string(),
        };
        let cfg = Self {
            environment,
            trainer,
            regime,
            timescales,
            oracle,
            output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.trainer;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(t.gamma > 0.0 && t.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", t.gamma));
        }
        if !(t.phi >= 0.0) || !t.phi.is_finite() {
            return bad(format!("phi must be finite and non-negative, got {}", t.phi));
        }
        if t.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if t.trace_stride == Some(0) {
            return bad("trace_stride must be at least 1".into());
        }
        if !(self.oracle.tol > 0.0) {
            return bad(format!("oracle tol must be positive, got {}", self.oracle.tol));
        }
        let three = self.regime == Regime::Mfcg;
        if three != (t.tier == Tier::ThreeTimescale) {
            return bad("the three_timescale tier goes with the mfcg regime and only with it".into());
        }
        if matches!(self.environment, EnvironmentConfig::Torus3 { .. }) && !three {
            return bad("torus3 needs the three_timescale tier".into());
        }
        if t.idealized && t.tier != Tier::ThreeTimescale {
            return bad("idealized = true applies to the three_timescale tier only".into());
        }
        let asynchronous = t.tier == Tier::Asynchronous || (three && !t.idealized);
        if asynchronous
            && self
                .timescales
                .iter()
                .any(|ts| matches!(ts.q_schedule, RateSchedule::PolyStep { .. }))
        {
            return bad("trajectory tiers need q_kind poly_visit or constant".into());
        }
        if let Some(x) = t.initial_state {
            if x >= self.n_states() {
                return bad(format!("initial_state {x} out of range"));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        match &self.environment {
            EnvironmentConfig::Torus { n_states, .. } | EnvironmentConfig::Torus3 { n_states, .. } => {
                *n_states
            }
            EnvironmentConfig::Table { spec, .. } => spec.n_states,
        }
    }

    /// Replaces the seed list with one seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.trainer.seeds = vec![seed];
    }
}

fn parse_environment(s: &Section, base: &Path) -> Result<EnvironmentConfig, ConfigError> {
    let kind = s.required("kind")?;
    let only = |keys: &[&str]| -> Result<(), ConfigError> {
        match s.values.keys().find(|k| *k != "kind" && !keys.contains(&k.as_str())) {
            Some(k) => Err(s.err(k, format!("not used by kind = {kind}"))),
            None => Ok(()),
        }
    };
    match kind {
        "torus" => {
            only(&["n_states", "p_zeta"])?;
            Ok(EnvironmentConfig::Torus {
                n_states: s.get("n_states")?,
                p_zeta: s.get("p_zeta")?,
            })
        }
        "torus3" => {
            only(&["n_states", "p_zeta", "local_coeff", "global_coeff"])?;
            Ok(EnvironmentConfig::Torus3 {
                n_states: s.get("n_states")?,
                p_zeta: s.get("p_zeta")?,
                local_coeff: s.get("local_coeff")?,
                global_coeff: s.get("global_coeff")?,
            })
        }
        "table" => {
            only(&["path"])?;
            let path = base.join(s.required("path")?);
            let spec = load_table(&path)?;
            Ok(EnvironmentConfig::Table { path, spec })
        }
        other => Err(s.err("kind", format!("unknown environment {other:?}"))),
    }
}

/// Reads a tabular environment file: one `[table]` section with flattened,
/// comma-separated arrays.
pub fn load_table(path: &Path) -> Result<TableEnvSpec, ConfigError> {
    let text = read_file(path)?;
    let sections = read_sections(&text, &[("table", TABLE_KEYS)])?;
    let s = section(&sections, "table")?;
    let list = |k: &str| -> Result<Vec<f64>, ConfigError> {
        s.list(k)?.ok_or_else(|| s.err(k, "missing"))
    };
    Ok(TableEnvSpec {
        n_states: s.get("n_states")?,
        n_actions: s.get("n_actions")?,
        kernel: list("kernel")?,
        cost_base: list("cost_base")?,
        cost_mf_coeff: list("cost_mf_coeff")?,
        cost_mf_power: s.get("cost_mf_power")?,
    })
}

fn parse_tier(s: &Section) -> Result<Tier, ConfigError> {
    match s.required("tier")? {
        "idealized" => Ok(Tier::Idealized),
        "synchronous" => Ok(Tier::Synchronous),
        "asynchronous" => Ok(Tier::Asynchronous),
        "three_timescale" => Ok(Tier::ThreeTimescale),
        other => Err(s.err("tier", format!("unknown tier {other:?}"))),
    }
}

fn parse_trainer(s: &Section) -> Result<TrainerSection, ConfigError> {
    let stop = match (s.parse::<f64>("stop_tol_mu")?, s.parse::<f64>("stop_tol_q")?) {
        (Some(tol_mu), Some(tol_q)) => Some(StopRule { tol_mu, tol_q }),
        (None, None) => None,
        _ => {
            return Err(ConfigError::Invalid(
                "stop_tol_mu and stop_tol_q must be given together".into(),
            ))
        }
    };
    Ok(TrainerSection {
        tier: parse_tier(s)?,
        gamma: s.get("gamma")?,
        phi: s.get("phi")?,
        n_steps: s.get("n_steps")?,
        seeds: s.list("seeds")?.unwrap_or_else(|| vec![0]),
        trace_stride: s.parse("trace_stride")?,
        initial_state: s.parse("initial_state")?,
        idealized: s.boolean("idealized")?.unwrap_or(false),
        stop,
    })
}

fn schedules(s: &Section, prefix: &str) -> Result<Option<Vec<RateSchedule>>, ConfigError> {
    let kind_key = format!("{prefix}_kind");
    let omega_key = format!("{prefix}_omega");
    let value_key = format!("{prefix}_value");
    let Some(kinds) = s.list::<String>(&kind_key)? else {
        if s.raw(&omega_key).is_some() || s.raw(&value_key).is_some() {
            return Err(s.err(&kind_key, "missing"));
        }
        return Ok(None);
    };
    let omegas = s.list::<f64>(&omega_key)?.unwrap_or_default();
    let values = s.list::<f64>(&value_key)?.unwrap_or_default();
    let n = kinds.len().max(omegas.len()).max(values.len());
    let pick = |v: &[f64], i: usize| -> Option<f64> {
        match v.len() {
            0 => None,
            1 => Some(v[0]),
            _ => v.get(i).copied(),
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let kind = if kinds.len() == 1 { &kinds[0] } else { &kinds[i] };
        let need = |key: &str, v: Option<f64>| v.ok_or_else(|| s.err(key, "missing or too short"));
        let sched = match kind.as_str() {
            "poly_step" => RateSchedule::poly_step(need(&omega_key, pick(&omegas, i))?),
            "poly_visit" => RateSchedule::poly_visit(need(&omega_key, pick(&omegas, i))?),
            "constant" => RateSchedule::constant(need(&value_key, pick(&values, i))?),
            other => return Err(s.err(&kind_key, format!("unknown schedule kind {other:?}"))),
        }
        .map_err(|e| s.err(&kind_key, e.to_string()))?;
        out.push(sched);
    }
    Ok(Some(out))
}

fn parse_timescales(s: &Section) -> Result<(Regime, Vec<TimescaleConfig>), ConfigError> {
    let regime: Regime = s.get("regime")?;
    let q = schedules(s, "q")?.ok_or_else(|| s.err("q_kind", "missing"))?;
    let mu = schedules(s, "mu")?.ok_or_else(|| s.err("mu_kind", "missing"))?;
    let loc = schedules(s, "mu_loc")?;
    let lens: BTreeSet<usize> = [q.len(), mu.len()]
        .into_iter()
        .chain(loc.as_ref().map(Vec::len))
        .filter(|&l| l > 1)
        .collect();
    if lens.len() > 1 {
        return Err(ConfigError::Invalid(format!(
            "rate lists have different lengths {lens:?}"
        )));
    }
    let n = lens.into_iter().next().unwrap_or(1);
    let at = |v: &[RateSchedule], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    (0..n)
        .map(|i| {
            TimescaleConfig::new(regime, at(&q, i), at(&mu, i), loc.as_deref().map(|l| at(l, i)))
                .map_err(|e| ConfigError::Invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|ts| (regime, ts))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
[environment]
kind = torus
n_states = 2
p_zeta = 0.01

[trainer]
tier = asynchronous
gamma = 0.99
phi = 3000
n_steps = 1000
seeds = 0, 1, 2

[timescales]
regime = mfg
q_kind = poly_visit
q_omega = 0.55
mu_kind = poly_step
mu_omega = 0.85, 0.88, 0.92, 0.95

[output]
directory = out
prefix = torus
";

    #[test]
    fn parses_rate_lists() {
        let cfg = ExperimentConfig::parse(BASE, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.timescales.len(), 4);
        assert_eq!(cfg.timescales[3].mu_schedule, RateSchedule::poly_step(0.95).unwrap());
        assert_eq!(cfg.timescales[3].q_schedule, RateSchedule::poly_visit(0.55).unwrap());
        assert_eq!(cfg.trainer.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.output.directory, PathBuf::from("/tmp/out"));
        assert_eq!(cfg.oracle, OracleSection::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = BASE.replace("phi = 3000", "phi = 3000\nomega_mu = 0.85");
        let e = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("unknown key"), "{e}");
        let text = BASE.replace("[output]", "[outputs]");
        assert!(ExperimentConfig::parse(&text, Path::new(".")).is_err());
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = BASE.replace("phi = 3000", "phi = 3000\nphi = 1");
        assert!(ExperimentConfig::parse(&text, Path::new(".")).is_err());
    }

    #[test]
    fn mismatched_lists_rejected() {
        let text = BASE.replace("q_omega = 0.55", "q_omega = 0.55, 0.6");
        assert!(matches!(
            ExperimentConfig::parse(&text, Path::new(".")),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn step_indexed_q_rejected_for_trajectories() {
        let text = BASE.replace("q_kind = poly_visit", "q_kind = poly_step");
        assert!(ExperimentConfig::parse(&text, Path::new(".")).is_err());
        let ok = text.replace("tier = asynchronous", "tier = idealized");
        assert!(ExperimentConfig::parse(&ok, Path::new(".")).is_ok());
    }

    #[test]
    fn booleans_and_constants() {
        let text = BASE
            .replace("mu_kind = poly_step\nmu_omega = 0.85, 0.88, 0.92, 0.95", "mu_kind = constant\nmu_value = 0.0001")
            .replace("q_kind = poly_visit\nq_omega = 0.55", "q_kind = constant\nq_value = 0.01");
        let cfg = ExperimentConfig::parse(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.timescales.len(), 1);
        assert_eq!(cfg.timescales[0].mu_schedule, RateSchedule::constant(0.0001).unwrap());
        let bad = BASE.replace("seeds = 0, 1, 2", "seeds = 0\nidealized = yes");
        assert!(ExperimentConfig::parse(&bad, Path::new(".")).is_err());
    }

    #[test]
    fn regime_and_tier_must_agree() {
        let text = BASE.replace("regime = mfg", "regime = mfcg");
        assert!(ExperimentConfig::parse(&text, Path::new(".")).is_err());
    }
}
