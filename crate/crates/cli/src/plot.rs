//! Native SVG line charts (no plotting dependency); CSV stays the canonical
//! artifact, these are a convenience mirror of it.

use std::io;
use std::path::Path;

use crate::config::{ExperimentConfig, ExperimentName};
use crate::experiments::{mean_stderr, RunRecord};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

const W: f64 = 720.0;
const H: f64 = 480.0;
const ML: f64 = 72.0;
const MR: f64 = 170.0;
const MT: f64 = 46.0;
const MB: f64 = 56.0;

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi - lo).is_finite() || hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    } * mag;
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + 1e-9 * step {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 100.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v}")
    }
}

/// Write a polyline chart with axes, ticks, and a legend.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    path: &Path,
) -> io::Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Ok(());
    }
    let (mut x_lo, mut x_hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let (mut y_lo, mut y_hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    if x_hi == x_lo {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_hi == y_lo {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let y_pad = 0.06 * (y_hi - y_lo);
    y_lo -= y_pad;
    y_hi += y_pad;

    let px = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        ML + (W - ML - MR) / 2.0,
        xml_escape(title)
    ));

    for t in nice_ticks(x_lo, x_hi, 6) {
        let x = px(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            MT,
            H - MB
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            fmt_tick(t)
        ));
    }
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = py(t);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            ML,
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            y + 4.0,
            fmt_tick(t)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 14.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0,
        xml_escape(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut sorted = s.points.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let pts: Vec<String> =
            sorted.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &sorted {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = MT + 16.0 + 20.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            W - MR + 12.0,
            W - MR + 36.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            W - MR + 42.0,
            ly + 4.0,
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean metric over seeds, grouped by (series key, x value).
fn grouped_series(
    records: &[RunRecord],
    x_of: impl Fn(&RunRecord) -> f64,
    key_of: impl Fn(&RunRecord) -> String,
    y_of: impl Fn(&RunRecord) -> Option<f64>,
) -> Vec<Series> {
    let mut groups: Vec<(String, Vec<(f64, Vec<f64>)>)> = Vec::new();
    for rec in records.iter().filter(|r| r.status == "ok") {
        let Some(y) = y_of(rec) else { continue };
        let key = key_of(rec);
        let x = x_of(rec);
        let group = match groups.iter_mut().find(|(k, _)| *k == key) {
            Some(g) => &mut g.1,
            None => {
                groups.push((key, Vec::new()));
                &mut groups.last_mut().unwrap().1
            }
        };
        match group.iter_mut().find(|(gx, _)| *gx == x) {
            Some((_, ys)) => ys.push(y),
            None => group.push((x, vec![y])),
        }
    }
    groups
        .into_iter()
        .map(|(label, pts)| Series {
            label,
            points: pts.into_iter().map(|(x, ys)| (x, mean_stderr(&ys).0)).collect(),
        })
        .collect()
}

/// Emit the figure-style plots for an experiment's records.
pub fn experiment_plots(cfg: &ExperimentConfig, records: &[RunRecord]) -> io::Result<()> {
    experiment_plots_at(cfg.experiment, &cfg.out_dir, records)
}

pub fn experiment_plots_at(
    experiment: ExperimentName,
    dir: &Path,
    records: &[RunRecord],
) -> io::Result<()> {
    use ExperimentName::*;
    let llo_of = |r: &RunRecord| r.llo.map(|l| l.llo);
    match experiment {
        Fig4Left | Fig4Mid | Fig5Policy => {
            let (x_of, x_label): (fn(&RunRecord) -> f64, &str) = match experiment {
                Fig4Left => (|r| r.point.d_z as f64, "latent dimension d_z"),
                Fig4Mid => (|r| r.point.sigma_iid, "iid noise scale"),
                _ => (|r| r.point.chi, "policy determinism chi"),
            };
            let mut series = grouped_series(records, x_of, |_| "LLO".into(), llo_of);
            series.extend(grouped_series(records, x_of, |_| "nmse_q".into(), |r| {
                r.llo.map(|l| l.nmse_q)
            }));
            series.extend(grouped_series(records, x_of, |_| "nmse_eps".into(), |r| {
                r.llo.map(|l| l.nmse_eps)
            }));
            series.extend(grouped_series(records, x_of, |_| "nmse_o".into(), |r| {
                r.llo.map(|l| l.nmse_o)
            }));
            line_chart(
                experiment.as_str(),
                x_label,
                "objective / normalized error",
                &series,
                &dir.join(format!("{}.svg", experiment.as_str())),
            )?;
        }
        Fig4Right => {
            let mut series = grouped_series(
                records,
                |r| r.point.d_z as f64,
                |r| format!("LLO sigma_exo={}", r.point.sigma_exo),
                llo_of,
            );
            series.extend(grouped_series(
                records,
                |r| r.point.d_z as f64,
                |r| format!("nmse_q sigma_exo={}", r.point.sigma_exo),
                |r| r.llo.map(|l| l.nmse_q),
            ));
            series.extend(grouped_series(
                records,
                |r| r.point.d_z as f64,
                |r| format!("nmse_eps sigma_exo={}", r.point.sigma_exo),
                |r| r.llo.map(|l| l.nmse_eps),
            ));
            line_chart(
                "fig4_right",
                "latent dimension d_z",
                "objective / normalized error",
                &series,
                &dir.join("fig4_right.svg"),
            )?;
        }
        Fig5Aug => {
            let series = grouped_series(
                records,
                |r| r.point.aug,
                |r| format!("sigma_iid={}", r.point.sigma_iid),
                llo_of,
            );
            line_chart("fig5_aug", "augmentation variance", "LLO (true latent)", &series, &dir.join("fig5_aug.svg"))?;
        }
        Fig5Actpred => {
            let series = grouped_series(
                records,
                |r| r.point.sigma_exo,
                |r| format!("lambda={}", r.point.lambda),
                llo_of,
            );
            line_chart(
                "fig5_actpred",
                "exogenous noise scale",
                "LLO (true latent)",
                &series,
                &dir.join("fig5_actpred.svg"),
            )?;
        }
        Table1 => {
            // Tabular experiment; the `report` subcommand renders the table.
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_axes_series_and_legend() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let series = vec![
            Series { label: "a".into(), points: vec![(1.0, 2.0), (2.0, 2.5), (4.0, 1.0)] },
            Series { label: "b".into(), points: vec![(1.0, 0.0), (4.0, 3.0)] },
        ];
        line_chart("title", "x", "y", &series, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("<svg"));
        assert_eq!(text.matches("<polyline").count(), 2);
        assert!(text.contains(">a</text>") && text.contains(">b</text>"));
        assert!(text.contains("title"));
    }

    #[test]
    fn ticks_are_sensible() {
        let t = nice_ticks(0.0, 2.0, 6);
        assert!(t.len() >= 4 && t.len() <= 9);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }
}
