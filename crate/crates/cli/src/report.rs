//! CSV output. Floats carry 17 significant digits so reruns compare
//! byte-for-byte and values read back exactly.

use std::io::Write;
use std::path::Path;

use csv::StringRecord;
use mftq_core::trainers::StepRecord;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `mu_0..`, `q_0_0..` and optionally `mu_loc_0..` column names.
pub fn state_columns(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |x| format!("{prefix}_{x}"))
}

pub fn q_columns(n_states: usize, n_actions: usize) -> impl Iterator<Item = String> {
    (0..n_states).flat_map(move |x| (0..n_actions).map(move |a| format!("q_{x}_{a}")))
}

/// One trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub mu: Vec<f64>,
    pub q: Vec<f64>,
    pub state: Option<usize>,
    pub action: Option<usize>,
    pub rho_q: Option<f64>,
    pub rho_mu: Option<f64>,
    pub mu_loc: Option<Vec<f64>>,
}

impl TraceRow {
    pub fn from_record(r: &StepRecord) -> Self {
        Self {
            step: r.n,
            mu: r.mu.as_slice().to_vec(),
            q: r.q.as_slice().to_vec(),
            state: r.state,
            action: r.action,
            rho_q: r.rho_q,
            rho_mu: r.rho_mu,
            mu_loc: r.mu_loc.as_ref().map(|m| m.as_slice().to_vec()),
        }
    }

    pub fn header(n_states: usize, n_actions: usize, with_loc: bool) -> Vec<String> {
        let mut h = vec!["step".to_string()];
        h.extend(state_columns("mu", n_states));
        h.extend(q_columns(n_states, n_actions));
        h.extend(["state", "action", "rho_q", "rho_mu"].map(String::from));
        if with_loc {
            h.extend(state_columns("mu_loc", n_states));
        }
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![self.step.to_string()];
        f.extend(self.mu.iter().map(|&v| fmt_f64(v)));
        f.extend(self.q.iter().map(|&v| fmt_f64(v)));
        f.push(fmt_opt(self.state));
        f.push(fmt_opt(self.action));
        f.push(fmt_opt(self.rho_q.map(fmt_f64)));
        f.push(fmt_opt(self.rho_mu.map(fmt_f64)));
        if let Some(loc) = &self.mu_loc {
            f.extend(loc.iter().map(|&v| fmt_f64(v)));
        }
        f
    }

    /// Inverse of [`TraceRow::fields`] for a table of the given shape.
    pub fn parse(
        rec: &StringRecord,
        n_states: usize,
        n_actions: usize,
        with_loc: bool,
    ) -> Result<Self, String> {
        let want = TraceRow::header(n_states, n_actions, with_loc).len();
        if rec.len() != want {
            return Err(format!("expected {want} fields, found {}", rec.len()));
        }
        let mut it = rec.iter();
        let mut next = || it.next().unwrap_or_default();
        fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("cannot parse {s:?}"))
        }
        fn opt<T: std::str::FromStr>(s: &str) -> Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        }
        let step = num(next())?;
        let mu = (0..n_states).map(|_| num(next())).collect::<Result<_, _>>()?;
        let q = (0..n_states * n_actions)
            .map(|_| num(next()))
            .collect::<Result<_, _>>()?;
        let state = opt(next())?;
        let action = opt(next())?;
        let rho_q = opt(next())?;
        let rho_mu = opt(next())?;
        let mu_loc = if with_loc {
            Some((0..n_states).map(|_| num(next())).collect::<Result<_, _>>()?)
        } else {
            None
        };
        Ok(Self {
            step,
            mu,
            q,
            state,
            action,
            rho_q,
            rho_mu,
            mu_loc,
        })
    }
}

pub fn write_trace(
    path: &Path,
    n_states: usize,
    n_actions: usize,
    rows: &[TraceRow],
) -> Result<(), ReportError> {
    let with_loc = rows.first().is_some_and(|r| r.mu_loc.is_some());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TraceRow::header(n_states, n_actions, with_loc))?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace, inferring its shape from the header.
pub fn read_trace(path: &Path) -> Result<(usize, usize, Vec<TraceRow>), ReportError> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let parse_err = |row, msg: String| ReportError::Parse { row, msg };
    let n_states = header.iter().filter(|h| h.starts_with("mu_") && !h.starts_with("mu_loc_")).count();
    let n_q = header.iter().filter(|h| h.starts_with("q_")).count();
    let with_loc = header.iter().any(|h| h.starts_with("mu_loc_"));
    if n_states == 0 || n_q % n_states != 0 {
        return Err(parse_err(0, "header does not describe a trace".into()));
    }
    let n_actions = n_q / n_states;
    let expected = TraceRow::header(n_states, n_actions, with_loc);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(0, "unexpected trace header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        rows.push(TraceRow::parse(&rec, n_states, n_actions, with_loc).map_err(|m| parse_err(i + 1, m))?);
    }
    Ok((n_states, n_actions, rows))
}

/// A CSV table followed by a `# key: value` block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub scalars: Vec<(String, String)>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn scalar(&mut self, key: &str, value: impl ToString) {
        self.scalars.push((key.to_string(), value.to_string()));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let mut out = w.into_inner().map_err(|e| e.into_error())?;
        for (k, v) in &self.scalars {
            writeln!(out, "# {k}: {v}")?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = rd.headers()?.iter().map(String::from).collect();
        let rows = rd
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()?;
        let scalars = text
            .lines()
            .filter_map(|l| l.strip_prefix("# "))
            .filter_map(|l| l.split_once(": "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Self {
            header,
            rows,
            scalars,
        })
    }

    pub fn get_scalar(&self, key: &str) -> Option<&str> {
        self.scalars.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}
