//! Reader and writer for the subset of the MATPOWER case format used here:
//! `mpc.baseMVA`, `mpc.bus` and `mpc.branch`. Every other block is skipped.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    Pq,
    Pv,
    Slack,
}

impl BusType {
    fn from_code(code: f64, line: usize) -> Result<Self> {
        match code as i64 {
            1 => Ok(BusType::Pq),
            2 => Ok(BusType::Pv),
            3 => Ok(BusType::Slack),
            other => Err(Error::Parse {
                line,
                msg: format!("unsupported bus type {other}"),
            }),
        }
    }

    fn code(self) -> u8 {
        match self {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBus {
    pub id: u32,
    pub bus_type: BusType,
    /// Active load as written in the file (MW).
    pub load_mw: f64,
    /// Active load in per-unit of the system base.
    pub load_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBranch {
    pub from: u32,
    pub to: u32,
    /// Series reactance (p.u.), always strictly positive after parsing.
    pub reactance: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<RawBus>,
    /// In-service branches only, in file order.
    pub branches: Vec<RawBranch>,
}

impl RawCase {
    pub fn slack_bus(&self) -> u32 {
        self.buses
            .iter()
            .find(|b| b.bus_type == BusType::Slack)
            .map(|b| b.id)
            .expect("validated case has a slack bus")
    }

    /// Serialize back to MATPOWER syntax. Only the blocks this crate reads are
    /// written; unused columns are zero-filled.
    pub fn to_matpower(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "function mpc = {}", self.name);
        let _ = writeln!(out, "mpc.version = '2';");
        let _ = writeln!(out, "mpc.baseMVA = {};", self.base_mva);
        let _ = writeln!(out, "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin");
        let _ = writeln!(out, "mpc.bus = [");
        for b in &self.buses {
            let _ = writeln!(
                out,
                "\t{}\t{}\t{}\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;",
                b.id,
                b.bus_type.code(),
                b.load_mw
            );
        }
        let _ = writeln!(out, "];");
        let _ = writeln!(out, "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax");
        let _ = writeln!(out, "mpc.branch = [");
        for br in &self.branches {
            let _ = writeln!(
                out,
                "\t{}\t{}\t0\t{}\t0\t0\t0\t0\t0\t0\t{}\t-360\t360;",
                br.from,
                br.to,
                br.reactance,
                u8::from(br.in_service)
            );
        }
        let _ = writeln!(out, "];");
        out
    }
}

/// One numeric row of a matrix block together with the line it started on.
struct Row {
    line: usize,
    values: Vec<f64>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_scalar(rest: &str, line: usize) -> Result<f64> {
    let body = rest.trim().trim_end_matches(';').trim();
    body.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("expected a number, found {body:?}"),
    })
}

/// Collect the rows of a `[ ... ];` block whose opening `[` is on `start`.
fn read_matrix(lines: &[&str], start: usize, after_bracket: &str) -> Result<(Vec<Row>, usize)> {
    let mut rows = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    let mut current_line = start + 1;
    let mut idx = start;
    let mut text = after_bracket.to_string();

    loop {
        let lineno = idx + 1;
        let mut closed = false;
        let mut segment = strip_comment(&text).to_string();
        if let Some(end) = segment.find(']') {
            segment.truncate(end);
            closed = true;
        }
        // Rows end at ';' or at a line break.
        let parts: Vec<&str> = segment.split(';').collect();
        for (k, part) in parts.iter().enumerate() {
            for tok in part.split(|c: char| c.is_whitespace() || c == ',') {
                if tok.is_empty() {
                    continue;
                }
                let v = tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("malformed matrix entry {tok:?}"),
                })?;
                if current.is_empty() {
                    current_line = lineno;
                }
                current.push(v);
            }
            let row_ends = k + 1 < parts.len() || !current.is_empty();
            if row_ends && !current.is_empty() {
                rows.push(Row {
                    line: current_line,
                    values: std::mem::take(&mut current),
                });
            }
        }
        if closed {
            return Ok((rows, idx));
        }
        idx += 1;
        if idx >= lines.len() {
            return Err(Error::Parse {
                line: start + 1,
                msg: "matrix block is never closed with ']'".into(),
            });
        }
        text = lines[idx].to_string();
    }
}

fn ensure_cols(row: &Row, need: usize, block: &str) -> Result<()> {
    if row.values.len() < need {
        return Err(Error::Parse {
            line: row.line,
            msg: format!(
                "{block} row has {} columns, at least {need} required",
                row.values.len()
            ),
        });
    }
    if row.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse {
            line: row.line,
            msg: format!("{block} row contains a non-finite value"),
        });
    }
    Ok(())
}

/// Parse MATPOWER case text into a validated [`RawCase`].
pub fn parse_matpower_case(text: &str) -> Result<RawCase> {
    let lines: Vec<&str> = text.lines().collect();
    let mut name = String::from("case");
    let mut base_mva: Option<f64> = None;
    let mut bus_rows: Option<Vec<Row>> = None;
    let mut branch_rows: Option<Vec<Row>> = None;

    let mut i = 0;
    while i < lines.len() {
        let raw = strip_comment(lines[i]).trim();
        let lineno = i + 1;
        if let Some(rest) = raw.strip_prefix("function") {
            if let Some((_, rhs)) = rest.split_once('=') {
                name = rhs.trim().to_string();
            }
        } else if let Some(rest) = raw.strip_prefix("mpc.") {
            if let Some((field, rhs)) = rest.split_once('=') {
                let field = field.trim();
                let rhs = rhs.trim();
                match field {
                    "baseMVA" => base_mva = Some(parse_scalar(rhs, lineno)?),
                    "bus" | "branch" => {
                        let after = rhs.strip_prefix('[').ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: format!("expected '[' to open mpc.{field}"),
                        })?;
                        let (rows, end) = read_matrix(&lines, i, after)?;
                        if field == "bus" {
                            bus_rows = Some(rows);
                        } else {
                            branch_rows = Some(rows);
                        }
                        i = end;
                    }
                    _ => {
                        // Skip other matrix/cell blocks wholesale.
                        if rhs.starts_with('[') || rhs.starts_with('{') {
                            let close = if rhs.starts_with('[') { ']' } else { '}' };
                            while i < lines.len() && !strip_comment(lines[i]).contains(close) {
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
        i += 1;
    }

    let base_mva = base_mva.ok_or_else(|| Error::Parse {
        line: lines.len(),
        msg: "missing mpc.baseMVA".into(),
    })?;
    if base_mva <= 0.0 {
        return Err(Error::Validation(format!("baseMVA must be positive, got {base_mva}")));
    }
    let bus_rows = bus_rows.ok_or_else(|| Error::Parse {
        line: lines.len(),
        msg: "missing mpc.bus".into(),
    })?;
    let branch_rows = branch_rows.ok_or_else(|| Error::Parse {
        line: lines.len(),
        msg: "missing mpc.branch".into(),
    })?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in &bus_rows {
        ensure_cols(row, 3, "bus")?;
        let v = &row.values;
        let load_mw = v[2];
        buses.push(RawBus {
            id: v[0] as u32,
            bus_type: BusType::from_code(v[1], row.line)?,
            load_mw,
            load_pu: load_mw / base_mva,
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in &branch_rows {
        ensure_cols(row, 4, "branch")?;
        let v = &row.values;
        let in_service = v.get(10).map_or(true, |s| *s != 0.0);
        if !in_service {
            continue;
        }
        let mut x = v[3];
        if x == 0.0 {
            return Err(Error::Validation(format!(
                "branch {}-{} (line {}) has zero reactance",
                v[0], v[1], row.line
            )));
        }
        if x < 0.0 {
            log::warn!(
                "branch {}-{} (line {}) has negative reactance {x}; using |x|",
                v[0],
                v[1],
                row.line
            );
            x = x.abs();
        }
        branches.push(RawBranch {
            from: v[0] as u32,
            to: v[1] as u32,
            reactance: x,
            in_service: true,
        });
    }

    let case = RawCase {
        name,
        base_mva,
        buses,
        branches,
    };
    validate(&case)?;
    Ok(case)
}

fn validate(case: &RawCase) -> Result<()> {
    let mut ids = HashSet::new();
    for b in &case.buses {
        if !ids.insert(b.id) {
            return Err(Error::Validation(format!("duplicate bus id {}", b.id)));
        }
    }
    let slack = case
        .buses
        .iter()
        .filter(|b| b.bus_type == BusType::Slack)
        .count();
    if slack != 1 {
        return Err(Error::Validation(format!(
            "exactly one slack bus required, found {slack}"
        )));
    }
    for br in &case.branches {
        for end in [br.from, br.to] {
            if !ids.contains(&end) {
                return Err(Error::Validation(format!(
                    "branch {}-{} references unknown bus {end}",
                    br.from, br.to
                )));
            }
        }
        if br.from == br.to {
            return Err(Error::Validation(format!("branch {}-{} is a self loop", br.from, br.to)));
        }
        if !(br.reactance > 0.0) {
            return Err(Error::Validation(format!(
                "branch {}-{} has non-positive reactance",
                br.from, br.to
            )));
        }
    }
    Ok(())
}
