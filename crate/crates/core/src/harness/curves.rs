//! Plot-ready long-format curves from run records.

use crate::engine::parse_run_csv;
use crate::error::Result;

pub const CURVES_HEADER: &str = "variant,step,metric,value";

/// Flatten one or more run-record CSVs into long format
/// `variant,step,metric,value`, one row per populated cell. Metric names
/// are `<model_id>/<column>`; ω columns are forwarded when present.
pub fn emit_curves(inputs: &[(String, String)]) -> Result<String> {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for (variant, csv) in inputs {
        let records = parse_run_csv(csv)?;
        for r in records {
            let mut push = |metric: &str, v: crate::tensor::Real| {
                out.push_str(&format!("{variant},{},{}/{metric},{v}\n", r.step, r.model_id));
            };
            if let Some(v) = r.loss {
                push("loss", v);
            }
            if let Some(v) = r.top1 {
                push("top1", v);
            }
            if let Some(v) = r.top5 {
                push("top5", v);
            }
            if let Some(o) = r.omega {
                for (i, v) in o.into_iter().enumerate() {
                    push(&format!("omega_{}", i + 1), v);
                }
            }
        }
    }
    Ok(out)
}
