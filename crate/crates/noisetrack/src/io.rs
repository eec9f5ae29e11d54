//! Tab-separated tables with a JSON schema sidecar, and record ingestion.
//!
//! Every table `name.tsv` is accompanied by `name.tsv.schema.json` listing
//! its columns, units and any table-level metadata. Floats are written in
//! shortest round-trip form, so a write/read cycle is lossless.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::averaging::{ProbabilitySeries, Window};
use crate::emulator::{reconstruct_timestamps, Basis, Emulation, ExperimentPlan, NoiseSchedule, Outcomes, Timestamps, MISSING};
use crate::noisefit::{FitFlags, NoiseTrace, TracePoint};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Int,
    Float,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub unit: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

/// Shorthand for building a column list.
pub fn col(name: &str, kind: ColumnKind, unit: &str, description: &str) -> Column {
    Column {
        name: name.into(),
        kind,
        unit: unit.into(),
        description: description.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<Column>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

pub fn schema_path(path: &Path) -> PathBuf {
    sidecar(path, "schema.json")
}

pub fn meta_path(path: &Path) -> PathBuf {
    sidecar(path, "meta.json")
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Streaming writer for one table.
pub struct TableWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl TableWriter {
    pub fn create(path: &Path, schema: &TableSchema) -> Result<Self> {
        write_json(&schema_path(path), schema)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().delimiter(b'\t').from_writer(BufWriter::new(file)),
        };
        w.row(schema.columns.iter().map(|c| c.name.as_str()))?;
        Ok(w)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(|e| Error::data(format!("{}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// A fully loaded table. `lines[k]` is the 1-based file line of row `k`.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
    pub schema: Option<TableSchema>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(BufReader::new(file));
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let schema = if schema_path(path).exists() {
        let s: TableSchema = read_json(&schema_path(path))?;
        let expected: Vec<&str> = s.columns.iter().map(|c| c.name.as_str()).collect();
        if expected != header.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::data(format!(
                "{} line 1: header {:?} does not match schema {:?}",
                path.display(),
                header,
                expected
            )));
        }
        Some(s)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::data(format!("{} line {line}: {e}", path.display()))
        })?;
        lines.push(rec.position().map_or(0, |p| p.line()));
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
        lines,
        schema,
    })
}

impl Table {
    pub fn index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("{}: missing column '{name}'", self.path.display())))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Parse one cell, reporting the file line on failure.
    pub fn parse<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T> {
        let cell = &self.rows[row][col];
        cell.parse().map_err(|_| {
            Error::data(format!(
                "{} line {}: cannot parse '{cell}' in column '{}'",
                self.path.display(),
                self.lines[row],
                self.header[col]
            ))
        })
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.index(name)?;
        (0..self.len()).map(|r| self.parse(r, c)).collect()
    }

    pub fn usize_column(&self, name: &str) -> Result<Vec<usize>> {
        let c = self.index(name)?;
        (0..self.len()).map(|r| self.parse(r, c)).collect()
    }

    pub fn text_column(&self, name: &str) -> Result<Vec<&str>> {
        let c = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[c].as_str()).collect())
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Sidecar metadata of a record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub plan: ExperimentPlan,
    pub qubits: Vec<String>,
    /// Noise schedule used to emulate each qubit, when emulated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedules: Vec<NoiseSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn record_schema() -> TableSchema {
    use ColumnKind::*;
    TableSchema {
        columns: vec![
            col("qubit", Text, "", "qubit label"),
            col("script", Int, "", "script index"),
            col("repetition", Int, "", "global repetition index"),
            col("tau_index", Int, "", "index into the idle-time grid"),
            col("tau_s", Float, "s", "idle time"),
            col("basis", Text, "", "measurement basis X, Y or Z"),
            col("outcome", Text, "", "0, 1 or - when missing"),
            col("t_s", Float, "s", "repetition start time"),
        ],
        metadata: serde_json::Value::Null,
    }
}

/// Write emulated shots for one or more qubits sharing a plan, plus the
/// metadata sidecar.
pub fn write_records(path: &Path, qubits: &[(&str, &Emulation)], meta: &RecordMetadata) -> Result<()> {
    let mut w = TableWriter::create(path, &record_schema())?;
    let Some((_, first)) = qubits.first() else {
        return Err(Error::config("no qubits to write"));
    };
    let plan = &first.plan;
    let nc = plan.n_circuits();
    for r in 0..first.outcomes.n_repetitions() {
        let t = fmt(first.times.t[r]);
        let script = (r / plan.n_repetitions).to_string();
        let rep = r.to_string();
        for (name, em) in qubits {
            for c in 0..nc {
                let (ti, basis) = plan.circuit(c);
                let bit = em.outcomes.get(r, c);
                let outcome = if bit == MISSING { "-".to_string() } else { bit.to_string() };
                w.row([name, script.as_str(), rep.as_str(), &ti.to_string(), &fmt(plan.idle_times[ti]), basis.label(), &outcome, &t])?;
            }
        }
    }
    w.finish()?;
    write_json(&meta_path(path), meta)
}

/// Outcome stream of one qubit with reconstructed timestamps.
#[derive(Debug, Clone)]
pub struct QubitStream {
    pub name: String,
    pub outcomes: Outcomes,
    pub times: Timestamps,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub plan: ExperimentPlan,
    pub streams: Vec<QubitStream>,
    pub warnings: Vec<String>,
}

/// Read and validate a record file. Timestamps are rebuilt from the plan's
/// script timing; without it repetitions are spaced uniformly and a warning
/// is recorded.
pub fn ingest_records(path: &Path, meta: Option<&Path>) -> Result<Ingested> {
    let meta_file = meta.map_or_else(|| meta_path(path), Path::to_path_buf);
    let meta: RecordMetadata = read_json(&meta_file)?;
    meta.plan.validate()?;
    let plan = meta.plan;
    let table = read_table(path)?;
    let cols: Vec<usize> = ["qubit", "repetition", "tau_index", "basis", "outcome"]
        .iter()
        .map(|c| table.index(c))
        .collect::<Result<_>>()?;
    let circuit_of: HashMap<(usize, Basis), usize> = (0..plan.n_circuits()).map(|c| (plan.circuit(c), c)).collect();
    let n_rep = plan.total_repetitions();
    let nc = plan.n_circuits();
    let mut order: Vec<String> = meta.qubits.clone();
    let mut streams: HashMap<String, (Outcomes, Option<usize>)> =
        order.iter().map(|q| (q.clone(), (Outcomes::empty(n_rep, nc), None))).collect();
    let mut warnings = Vec::new();
    let mut non_monotone = 0usize;
    for r in 0..table.len() {
        let line = table.lines[r];
        let bad = |what: String| Error::data(format!("{} line {line}: {what}", path.display()));
        let qubit = &table.rows[r][cols[0]];
        let rep: usize = table.parse(r, cols[1])?;
        let ti: usize = table.parse(r, cols[2])?;
        let basis = Basis::parse(&table.rows[r][cols[3]]).ok_or_else(|| bad(format!("unknown basis '{}'", table.rows[r][cols[3]])))?;
        let bit = match table.rows[r][cols[4]].as_str() {
            "0" => 0,
            "1" => 1,
            "-" => MISSING,
            other => return Err(bad(format!("outcome must be 0, 1 or -, got '{other}'"))),
        };
        if rep >= n_rep {
            return Err(bad(format!("repetition {rep} beyond the plan's {n_rep}")));
        }
        let &c = circuit_of.get(&(ti, basis)).ok_or_else(|| bad(format!("circuit ({ti}, {basis}) not in the plan")))?;
        if !streams.contains_key(qubit) {
            order.push(qubit.clone());
            streams.insert(qubit.clone(), (Outcomes::empty(n_rep, nc), None));
        }
        let (out, last) = streams.get_mut(qubit).expect("inserted above");
        if last.is_some_and(|l| rep < l) {
            non_monotone += 1;
        }
        *last = Some(rep);
        out.set(rep, c, bit);
    }
    if non_monotone > 0 {
        let msg = format!("{non_monotone} records go back in repetition order");
        warn!("{msg}");
        warnings.push(msg);
    }
    let times = reconstruct_timestamps(&plan);
    if times.uniform_fallback {
        log::warn!("{}: script timing missing; repetitions spaced uniformly", path.display());
        warnings.push("script timing missing; repetitions spaced uniformly".into());
    }
    let streams = order
        .into_iter()
        .filter_map(|name| {
            let (outcomes, last) = streams.remove(&name)?;
            last.map(|_| QubitStream {
                name,
                outcomes,
                times: times.clone(),
            })
        })
        .collect::<Vec<_>>();
    for s in &streams {
        let missing = s.outcomes.missing_count();
        if missing > 0 {
            warnings.push(format!("qubit {}: {missing} shots missing", s.name));
        }
    }
    Ok(Ingested { plan, streams, warnings })
}

/// Probability estimates, one row per repetition and circuit.
pub fn write_probabilities(path: &Path, plan: &ExperimentPlan, times: &[f64], series: &ProbabilitySeries) -> Result<()> {
    use ColumnKind::*;
    let schema = TableSchema {
        columns: vec![
            col("t_s", Float, "s", "repetition start time"),
            col("repetition", Int, "", ""),
            col("tau_index", Int, "", ""),
            col("basis", Text, "", ""),
            col("p", Float, "", "estimated probability of outcome 1"),
            col("n_eff", Float, "", "realized window weight"),
            col("edge", Int, "", "1 where the window was truncated"),
        ],
        metadata: serde_json::json!({ "window": series.window }),
    };
    let mut w = TableWriter::create(path, &schema)?;
    for r in 0..series.len() {
        let (t, rep, edge) = (fmt(times[r]), r.to_string(), u8::from(series.edge[r]).to_string());
        for c in 0..series.n_circuits() {
            let (ti, basis) = plan.circuit(c);
            w.row([t.as_str(), &rep, &ti.to_string(), basis.label(), &fmt(series.p(r)[c]), &fmt(series.n_eff(r)[c]), &edge])?;
        }
    }
    w.finish()
}

pub fn read_probabilities(path: &Path, plan: &ExperimentPlan) -> Result<(Vec<f64>, ProbabilitySeries)> {
    let table = read_table(path)?;
    let window: Window = table
        .schema
        .as_ref()
        .and_then(|s| s.metadata.get("window").cloned())
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::data(format!("{}: bad window metadata: {e}", path.display())))?
        .ok_or_else(|| Error::data(format!("{}: schema sidecar lacks the window", path.display())))?;
    let nc = plan.n_circuits();
    if table.len() % nc != 0 {
        return Err(Error::data(format!("{}: {} rows is not a multiple of {nc} circuits", path.display(), table.len())));
    }
    let n = table.len() / nc;
    let (t_col, p_col, n_col, e_col) = (table.index("t_s")?, table.index("p")?, table.index("n_eff")?, table.index("edge")?);
    let mut times = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(table.len());
    let mut n_eff = Vec::with_capacity(table.len());
    let mut edge = Vec::with_capacity(n);
    for r in 0..table.len() {
        if r % nc == 0 {
            times.push(table.parse(r, t_col)?);
            edge.push(table.parse::<u8>(r, e_col)? != 0);
        }
        p.push(table.parse(r, p_col)?);
        n_eff.push(table.parse(r, n_col)?);
    }
    Ok((times, ProbabilitySeries::from_parts(window, nc, p, n_eff, edge)?))
}

const TRACE_COLUMNS: [(&str, &str); 8] = [
    ("t_s", "s"),
    ("delta_f_hz", "Hz"),
    ("sigma_delta_f_hz", "Hz"),
    ("gamma_1", "1/s"),
    ("sigma_gamma_1", "1/s"),
    ("gamma_phi", "1/s"),
    ("sigma_gamma_phi", "1/s"),
    ("residual_norm", ""),
];

pub fn write_trace(path: &Path, trace: &NoiseTrace) -> Result<()> {
    let mut columns: Vec<Column> = TRACE_COLUMNS.iter().map(|(n, u)| col(n, ColumnKind::Float, u, "")).collect();
    columns.push(col("flags", ColumnKind::Text, "", "|-joined flags or -"));
    let mut w = TableWriter::create(path, &TableSchema { columns, metadata: serde_json::Value::Null })?;
    for p in &trace.points {
        let v = [p.t, p.delta_f, p.sigma_delta_f, p.gamma_1, p.sigma_gamma_1, p.gamma_phi, p.sigma_gamma_phi, p.residual_norm];
        w.row(v.iter().map(|x| fmt(*x)).chain(std::iter::once(p.flags.to_string())))?;
    }
    w.finish()
}

pub fn read_trace(path: &Path) -> Result<NoiseTrace> {
    let table = read_table(path)?;
    let idx: Vec<usize> = TRACE_COLUMNS.iter().map(|(n, _)| table.index(n)).collect::<Result<_>>()?;
    let fcol = table.index("flags")?;
    let points = (0..table.len())
        .map(|r| {
            let v: Vec<f64> = idx.iter().map(|&c| table.parse(r, c)).collect::<Result<_>>()?;
            let flags = FitFlags::parse(&table.rows[r][fcol])
                .ok_or_else(|| Error::data(format!("{} line {}: bad flags", path.display(), table.lines[r])))?;
            Ok(TracePoint {
                t: v[0],
                delta_f: v[1],
                sigma_delta_f: v[2],
                gamma_1: v[3],
                sigma_gamma_1: v[4],
                gamma_phi: v[5],
                sigma_gamma_phi: v[6],
                residual_norm: v[7],
                flags,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NoiseTrace { points })
}

/// Write equal-length float columns.
pub fn write_columns(path: &Path, columns: &[(Column, &[f64])], metadata: serde_json::Value) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != n) {
        return Err(Error::data(format!("{}: columns differ in length", path.display())));
    }
    let schema = TableSchema {
        columns: columns.iter().map(|c| c.0.clone()).collect(),
        metadata,
    };
    let mut w = TableWriter::create(path, &schema)?;
    for r in 0..n {
        w.row(columns.iter().map(|c| fmt(c.1[r])))?;
    }
    w.finish()
}

/// Read every column of a float table.
pub fn read_columns(path: &Path) -> Result<(Table, Vec<Vec<f64>>)> {
    let table = read_table(path)?;
    let cols = table.header.iter().map(|h| table.f64_column(h)).collect::<Result<_>>()?;
    Ok((table, cols))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// JSON has no NaN or infinity; these helpers write non-finite values as
/// the strings `"NaN"`, `"inf"` and `"-inf"` and read them back.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
        Null(()),
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Null(()) => Ok(f64::NAN),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("expected a number, got '{other}'"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    /// The same encoding for fixed-size pairs such as confidence intervals.
    pub mod pair {
        use serde::ser::SerializeTuple;
        use serde::{Deserialize, Deserializer, Serializer};

        struct Wrap(f64);

        impl serde::Serialize for Wrap {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                super::serialize(&self.0, s)
            }
        }

        pub fn serialize<S: Serializer>(v: &[f64; 2], s: S) -> Result<S::Ok, S::Error> {
            let mut t = s.serialize_tuple(2)?;
            t.serialize_element(&Wrap(v[0]))?;
            t.serialize_element(&Wrap(v[1]))?;
            t.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 2], D::Error> {
            let [a, b] = <[super::Repr; 2]>::deserialize(d)?;
            Ok([super::from_repr(a)?, super::from_repr(b)?])
        }
    }
}
