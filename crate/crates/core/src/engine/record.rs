//! Per-step run records and their CSV form.
//!
//! One row per model per step. Columns: `step, phase(transfer|self),
//! model_id, loss, top1, top5, omega_1..omega_4`; cells that do not apply
//! stay empty. UTF-8, LF line endings, header mandatory.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Transfer,
    SelfLearning,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Transfer => "transfer",
            Phase::SelfLearning => "self",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transfer" => Ok(Phase::Transfer),
            "self" => Ok(Phase::SelfLearning),
            other => Err(Error::format(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: u64,
    pub phase: Phase,
    pub model_id: String,
    pub loss: Option<Real>,
    pub top1: Option<Real>,
    pub top5: Option<Real>,
    pub omega: Option<[Real; 4]>,
}

pub const RUN_CSV_HEADER: &str = "step,phase,model_id,loss,top1,top5,omega_1,omega_2,omega_3,omega_4";

fn cell(v: Option<Real>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    for r in records {
        let om = r.omega.map(|o| o.map(|x| x.to_string()));
        let empty = || String::new();
        let [o1, o2, o3, o4] = match om {
            Some([a, b, c, d]) => [a, b, c, d],
            None => [empty(), empty(), empty(), empty()],
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.phase.name(),
            r.model_id,
            cell(r.loss),
            cell(r.top1),
            cell(r.top5),
            o1,
            o2,
            o3,
            o4
        ));
    }
    out
}

fn parse_cell(s: &str, line: usize, what: &str) -> Result<Option<Real>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<Real>()
        .map(Some)
        .map_err(|_| Error::format(format!("line {line}: bad {what} value {s:?}")))
}

pub fn parse_run_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RUN_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::format(format!("line 1: unexpected header {h:?}")))
        }
        None => return Err(Error::format("empty run record CSV")),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split(',').collect();
        if cols.len() != 10 {
            return Err(Error::format(format!(
                "line {line}: expected 10 columns, got {}",
                cols.len()
            )));
        }
        let step = cols[0]
            .parse::<u64>()
            .map_err(|_| Error::format(format!("line {line}: bad step {:?}", cols[0])))?;
        let omega = {
            let parts: Vec<Option<Real>> = cols[6..10]
                .iter()
                .map(|c| parse_cell(c, line, "omega"))
                .collect::<Result<_>>()?;
            match (parts[0], parts[1], parts[2], parts[3]) {
                (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
                (None, None, None, None) => None,
                _ => {
                    return Err(Error::format(format!(
                        "line {line}: partially filled omega columns"
                    )))
                }
            }
        };
        out.push(RunRecord {
            step,
            phase: Phase::parse(cols[1])
                .map_err(|_| Error::format(format!("line {line}: bad phase {:?}", cols[1])))?,
            model_id: cols[2].to_string(),
            loss: parse_cell(cols[3], line, "loss")?,
            top1: parse_cell(cols[4], line, "top1")?,
            top5: parse_cell(cols[5], line, "top5")?,
            omega,
        });
    }
    Ok(out)
}
