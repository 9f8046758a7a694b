//! Reading result CSVs back and rendering summaries.
//!
//! For the grid experiment this assembles the nine-row ablation table
//! (means ± standard errors over seeds), checks the expected orderings, and
//! compares against the reference means within ±0.15 or 3× the reference
//! standard error, whichever is looser. Band misses produce an explicit
//! architecture-sensitivity caveat rather than silence: absolute values move
//! with unspecified architecture details, orderings should not.

use std::fmt::Write as _;
use std::path::Path;

use lam_core::evaluator::{LatentKind, LloReport};

use crate::config::ExperimentName;
use crate::experiments::{mean_stderr, RunRecord, SweepPoint, CSV_HEADER};
use crate::plot;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad csv: {0}")]
    BadCsv(String),
}

/// A parsed CSV row (same fields as [`RunRecord`], plus the experiment tag).
#[derive(Clone, Debug)]
pub struct CsvRow {
    pub experiment: String,
    pub record: RunRecord,
    pub latent_kind: String,
}

fn parse_opt(field: &str) -> Result<Option<f64>, ReportError> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| ReportError::BadCsv(format!("bad numeric field `{field}`")))
}

/// Read a `lam-csv v1` file.
pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, ReportError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| ReportError::BadCsv("empty file".into()))?;
    if header != CSV_HEADER {
        return Err(ReportError::BadCsv(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != CSV_HEADER.split(',').count() {
            return Err(ReportError::BadCsv(format!("wrong field count in `{line}`")));
        }
        let num = |i: usize| -> Result<f64, ReportError> {
            f[i].parse().map_err(|_| ReportError::BadCsv(format!("bad numeric field `{}`", f[i])))
        };
        let point = SweepPoint {
            d_z: num(2)? as usize,
            sigma_iid: num(3)?,
            sigma_exo: num(4)?,
            chi: num(5)?,
            aug: num(6)?,
            lambda: num(7)?,
            seed: num(1)? as u64,
        };
        let llo = match (parse_opt(f[8])?, parse_opt(f[9])?, parse_opt(f[10])?, parse_opt(f[11])?) {
            (Some(nmse_q), Some(nmse_eps), Some(nmse_o), Some(llo)) => Some(LloReport {
                nmse_q,
                nmse_eps,
                nmse_o,
                llo,
                latent_kind: if f[12] == "surrogate" {
                    LatentKind::Surrogate
                } else {
                    LatentKind::TrueLatent
                },
                n_eval: 0,
                degenerate_latent: false,
            }),
            _ => None,
        };
        rows.push(CsvRow {
            experiment: f[0].to_string(),
            latent_kind: f[12].to_string(),
            record: RunRecord {
                point,
                llo,
                controllable: parse_opt(f[13])?,
                stochastic: parse_opt(f[14])?,
                final_train_loss: parse_opt(f[15])?,
                oracle_loss: parse_opt(f[16])?,
                status: f[17].to_string(),
                wall_clock_ms: f[18].parse().unwrap_or(0),
            },
        });
    }
    Ok(rows)
}

/// Reference Table-1 means and standard errors (controllable, stochastic).
pub struct ReferenceRow {
    pub label: &'static str,
    /// (sigma_iid, chi, aug, lambda) identifying the training variant.
    pub variant: (f64, f64, f64, f64),
    pub controllable: f64,
    pub controllable_se: f64,
    pub stochastic: Option<f64>,
    pub stochastic_se: f64,
}

pub const REFERENCE_TABLE1: [ReferenceRow; 9] = [
    ReferenceRow { label: "No noise", variant: (0.0, 0.0, 0.0, 0.0), controllable: 0.624, controllable_se: 0.087, stochastic: None, stochastic_se: 0.0 },
    ReferenceRow { label: "Low noise", variant: (1.0, 0.0, 0.0, 0.0), controllable: 0.781, controllable_se: 0.079, stochastic: Some(0.739), stochastic_se: 0.047 },
    ReferenceRow { label: "High noise", variant: (2.0, 0.0, 0.0, 0.0), controllable: 1.046, controllable_se: 0.017, stochastic: Some(0.607), stochastic_se: 0.021 },
    ReferenceRow { label: "Uniform policy", variant: (1.0, 0.0, 0.0, 0.0), controllable: 0.781, controllable_se: 0.079, stochastic: Some(0.739), stochastic_se: 0.047 },
    ReferenceRow { label: "Correlated policy", variant: (1.0, 0.95, 0.0, 0.0), controllable: 1.997, controllable_se: 0.022, stochastic: Some(0.599), stochastic_se: 0.036 },
    ReferenceRow { label: "No data augmentation", variant: (1.0, 0.0, 0.0, 0.0), controllable: 0.781, controllable_se: 0.079, stochastic: Some(0.739), stochastic_se: 0.047 },
    ReferenceRow { label: "Data augmentation", variant: (1.0, 0.0, 1.0, 0.0), controllable: 0.415, controllable_se: 0.020, stochastic: Some(0.898), stochastic_se: 0.049 },
    ReferenceRow { label: "No action prediction", variant: (1.0, 0.0, 0.0, 0.0), controllable: 0.781, controllable_se: 0.079, stochastic: Some(0.739), stochastic_se: 0.047 },
    ReferenceRow { label: "1% action prediction", variant: (1.0, 0.0, 0.0, 0.01), controllable: 0.295, controllable_se: 0.011, stochastic: Some(0.986), stochastic_se: 0.002 },
];

/// Absolute tolerance floor for the reference-band check.
pub const BAND_ABS: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct VariantStats {
    pub variant: (f64, f64, f64, f64),
    pub controllable: (f64, f64),
    pub stochastic: Option<(f64, f64)>,
    pub n_seeds: usize,
}

/// Per-variant means over seeds for a table1 CSV.
pub fn table1_stats(rows: &[CsvRow]) -> Result<Vec<VariantStats>, ReportError> {
    let mut variants: Vec<((f64, f64, f64, f64), Vec<f64>, Vec<f64>)> = Vec::new();
    for row in rows {
        if row.record.status != "ok" {
            continue;
        }
        let p = &row.record.point;
        let key = (p.sigma_iid, p.chi, p.aug, p.lambda);
        let slot = match variants.iter_mut().find(|(k, _, _)| *k == key) {
            Some(v) => v,
            None => {
                variants.push((key, Vec::new(), Vec::new()));
                variants.last_mut().unwrap()
            }
        };
        if let Some(c) = row.record.controllable {
            slot.1.push(c);
        }
        if let Some(s) = row.record.stochastic {
            slot.2.push(s);
        }
    }
    Ok(variants
        .into_iter()
        .map(|(variant, cs, ss)| VariantStats {
            variant,
            controllable: mean_stderr(&cs),
            stochastic: if ss.is_empty() { None } else { Some(mean_stderr(&ss)) },
            n_seeds: cs.len(),
        })
        .collect())
}

pub struct OrderingCheck {
    pub description: String,
    pub holds: bool,
}

/// The ordering relations the ablation table must satisfy.
pub fn table1_orderings(stats: &[VariantStats]) -> Vec<OrderingCheck> {
    let find = |key: (f64, f64, f64, f64)| stats.iter().find(|v| v.variant == key);
    let baseline = (1.0, 0.0, 0.0, 0.0);
    let pairs: [(&str, (f64, f64, f64, f64), (f64, f64, f64, f64)); 5] = [
        ("controllable: no noise < low noise", (0.0, 0.0, 0.0, 0.0), baseline),
        ("controllable: low noise < high noise", baseline, (2.0, 0.0, 0.0, 0.0)),
        ("controllable: uniform < correlated policy", baseline, (1.0, 0.95, 0.0, 0.0)),
        ("controllable: augmented < not augmented", (1.0, 0.0, 1.0, 0.0), baseline),
        ("controllable: 1% labels < no labels", (1.0, 0.0, 0.0, 0.01), baseline),
    ];
    let mut checks = Vec::new();
    for (desc, lo, hi) in pairs {
        let holds = match (find(lo), find(hi)) {
            (Some(a), Some(b)) => a.controllable.0 < b.controllable.0,
            _ => false,
        };
        checks.push(OrderingCheck { description: desc.to_string(), holds });
    }
    let spairs: [(&str, (f64, f64, f64, f64), (f64, f64, f64, f64)); 4] = [
        ("stochastic: low noise > high noise", baseline, (2.0, 0.0, 0.0, 0.0)),
        ("stochastic: uniform > correlated policy", baseline, (1.0, 0.95, 0.0, 0.0)),
        ("stochastic: augmented > not augmented", (1.0, 0.0, 1.0, 0.0), baseline),
        ("stochastic: 1% labels > no labels", (1.0, 0.0, 0.0, 0.01), baseline),
    ];
    for (desc, hi, lo) in spairs {
        let holds = match (find(hi).and_then(|v| v.stochastic), find(lo).and_then(|v| v.stochastic)) {
            (Some(a), Some(b)) => a.0 > b.0,
            _ => false,
        };
        checks.push(OrderingCheck { description: desc.to_string(), holds });
    }
    checks
}

pub struct Table1Report {
    pub text: String,
    pub orderings_hold: bool,
    pub bands_hold: bool,
}

/// Render the nine-row table with ordering and reference-band results.
pub fn table1_report(rows: &[CsvRow]) -> Result<Table1Report, ReportError> {
    let stats = table1_stats(rows)?;
    let mut text = String::new();
    writeln!(text, "{:<24} {:>22} {:>22}", "Setting", "Controllable loss", "Stochastic loss").unwrap();
    let mut bands_hold = true;
    let mut band_notes = Vec::new();
    for reference in &REFERENCE_TABLE1 {
        let stat = stats.iter().find(|v| v.variant == reference.variant);
        match stat {
            Some(v) => {
                let c = format!("{:.3} ± {:.3}", v.controllable.0, v.controllable.1);
                let s = v
                    .stochastic
                    .map(|(m, se)| format!("{m:.3} ± {se:.3}"))
                    .unwrap_or_else(|| "--".into());
                writeln!(text, "{:<24} {:>22} {:>22}", reference.label, c, s).unwrap();
                let tol = BAND_ABS.max(3.0 * reference.controllable_se);
                if (v.controllable.0 - reference.controllable).abs() > tol {
                    bands_hold = false;
                    band_notes.push(format!(
                        "{}: controllable {:.3} vs reference {:.3} (tolerance {:.3})",
                        reference.label, v.controllable.0, reference.controllable, tol
                    ));
                }
            }
            None => {
                writeln!(text, "{:<24} {:>22} {:>22}", reference.label, "missing", "missing").unwrap();
                bands_hold = false;
                band_notes.push(format!("{}: no rows", reference.label));
            }
        }
    }
    let orderings = table1_orderings(&stats);
    let orderings_hold = orderings.iter().all(|c| c.holds);
    writeln!(text).unwrap();
    for check in &orderings {
        writeln!(text, "[{}] {}", if check.holds { "ok" } else { "VIOLATED" }, check.description).unwrap();
    }
    if !bands_hold {
        writeln!(text).unwrap();
        writeln!(
            text,
            "CAVEAT: absolute losses fall outside the reference bands; these values are \
             sensitive to architecture details (conv widths, batch size, codebook handling) \
             that the setup leaves open. Orderings are the robust signal{}:",
            if orderings_hold { " and all hold" } else { ", and some are violated" }
        )
        .unwrap();
        for note in &band_notes {
            writeln!(text, "  - {note}").unwrap();
        }
    }
    Ok(Table1Report { text, orderings_hold, bands_hold })
}

/// Render a report (and refreshed plots) for any experiment CSV.
pub fn report_csv(csv: &Path, out_dir: &Path) -> Result<String, ReportError> {
    let rows = read_csv(csv)?;
    if rows.is_empty() {
        return Err(ReportError::BadCsv("no data rows".into()));
    }
    let name = ExperimentName::parse(&rows[0].experiment)
        .map_err(|e| ReportError::BadCsv(e.to_string()))?;
    if name == ExperimentName::Table1 {
        let t = table1_report(&rows)?;
        return Ok(t.text);
    }
    std::fs::create_dir_all(out_dir)?;
    let records: Vec<RunRecord> = rows.iter().map(|r| r.record.clone()).collect();
    plot::experiment_plots_at(name, out_dir, &records)?;
    let mut text = String::new();
    writeln!(text, "{}: {} rows ({} failed)", name.as_str(), records.len(),
        records.iter().filter(|r| r.status != "ok").count()).unwrap();
    // Aggregate LLO by point (all axes except seed).
    let mut groups: Vec<(SweepPoint, Vec<f64>)> = Vec::new();
    for rec in records.iter().filter(|r| r.status == "ok") {
        let Some(l) = rec.llo.map(|l| l.llo) else { continue };
        let mut key = rec.point.clone();
        key.seed = 0;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(l),
            None => groups.push((key, vec![l])),
        }
    }
    for (point, llos) in groups {
        let (m, se) = mean_stderr(&llos);
        writeln!(
            text,
            "d_z={:<3} sigma_iid={:<5} sigma_exo={:<5} chi={:<5} aug={:<5} lambda={:<5} llo={m:.4} ± {se:.4}",
            point.d_z, point.sigma_iid, point.sigma_exo, point.chi, point.aug, point.lambda
        )
        .unwrap();
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_orderings_hold_for_reference_values() {
        // Feed the reference means back in as if measured: every ordering and
        // band check must pass on them.
        let stats: Vec<VariantStats> = [
            ((0.0, 0.0, 0.0, 0.0), 0.624, None),
            ((1.0, 0.0, 0.0, 0.0), 0.781, Some(0.739)),
            ((2.0, 0.0, 0.0, 0.0), 1.046, Some(0.607)),
            ((1.0, 0.95, 0.0, 0.0), 1.997, Some(0.599)),
            ((1.0, 0.0, 1.0, 0.0), 0.415, Some(0.898)),
            ((1.0, 0.0, 0.0, 0.01), 0.295, Some(0.986)),
        ]
        .into_iter()
        .map(|(variant, c, s)| VariantStats {
            variant,
            controllable: (c, 0.01),
            stochastic: s.map(|x| (x, 0.01)),
            n_seeds: 5,
        })
        .collect();
        let checks = table1_orderings(&stats);
        assert_eq!(checks.len(), 9);
        assert!(checks.iter().all(|c| c.holds), "{:?}", checks.iter().map(|c| (&c.description, c.holds)).collect::<Vec<_>>());
    }
}
