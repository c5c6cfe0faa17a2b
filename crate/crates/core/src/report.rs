//! Plots and a consolidated table from the CSV artifacts of a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{csv_rows, read_text, write_text, RunDir};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: [f64; 4] = [60.0, 20.0, 30.0, 150.0]; // left, top, bottom-ish, legend
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(pts().map(|p| p.0));
        let (y0, y1) = bounds(pts().map(|p| p.1));
        let (left, top, bottom, legend) = (MARGIN[0], MARGIN[1] + 20.0, HEIGHT - MARGIN[2] - 20.0, MARGIN[3]);
        let right = WIDTH - legend;
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            (left + right) / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            right - left,
            bottom - top
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(fx),
                bottom + 14.0,
                tick(fx)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 4.0,
                sy(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (left + right) / 2.0,
            HEIGHT - 8.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            (top + bottom) / 2.0,
            (top + bottom) / 2.0,
            esc(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if path.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
            }
            for p in &path {
                let (cx, cy) = p.split_once(',').expect("formatted pair");
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
            }
            let ly = top + 14.0 * i as f64 + 8.0;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
                right + 10.0,
                right + 28.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                right + 32.0,
                ly + 4.0,
                esc(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e5 {
        format!("{:.2e}", v)
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Column lookup by header name for a CSV body.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(body: &str) -> Self {
        let header = body
            .lines()
            .next()
            .map(|l| l.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        Table {
            header,
            rows: csv_rows(body),
        }
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn num(&self, row: &[String], name: &str) -> f64 {
        self.col(name)
            .and_then(|c| row.get(c))
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN)
    }

    fn text<'a>(&self, row: &'a [String], name: &str) -> &'a str {
        self.col(name).and_then(|c| row.get(c)).map(String::as_str).unwrap_or("")
    }
}

/// Writes the report plots and table; every input artifact must exist.
pub fn report_stage(run: &RunDir) -> Result<Vec<PathBuf>> {
    let needed = [
        run.config(),
        run.trajectory(),
        run.layer_filters(),
        run.accuracy(),
        run.eval_summary(),
        run.explain_summary(),
    ];
    let absent: Vec<String> = needed
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !absent.is_empty() {
        return Err(Error::MissingInput(format!("report needs {}", absent.join(", "))));
    }
    let cfg = ExperimentConfig::load(&run.config())?;
    let hash = cfg.hash();
    let traj = Table::parse(&read_text(&run.trajectory(), &hash)?);
    let layers = Table::parse(&read_text(&run.layer_filters(), &hash)?);
    let acc = Table::parse(&read_text(&run.accuracy(), &hash)?);
    let eval = Table::parse(&read_text(&run.eval_summary(), &hash)?);
    let explain = Table::parse(&read_text(&run.explain_summary(), &hash)?);
    let dir = run.report_dir();
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };

    let sizes = &cfg.verification.template_sizes;
    for &t in sizes {
        let col = format!("eer_t{t}");
        let mut by_variant: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
        for r in &eval.rows {
            by_variant.entry(eval.text(r, "variant").to_string()).or_default().push((
                eval.num(r, "sparsity"),
                eval.num(r, "learnables"),
                eval.num(r, &col),
            ));
        }
        let origin = by_variant.remove(crate::experiment::ORIGINAL).unwrap_or_default();
        let traj_col = match t {
            1 => Some("eer_1to1"),
            5 => Some("eer_5to5"),
            _ => None,
        };
        let mut trajectory_curve: Vec<(f64, f64, f64)> = Vec::new();
        if let Some(c) = traj_col {
            trajectory_curve = traj
                .rows
                .iter()
                .map(|r| (traj.num(r, "pruned_fraction"), traj.num(r, "learnables"), traj.num(r, c)))
                .filter(|p| p.2.is_finite())
                .collect();
        }
        let build = |pick: fn(&(f64, f64, f64)) -> f64| -> Vec<Series> {
            let mut out = Vec::new();
            if !trajectory_curve.is_empty() {
                out.push(Series {
                    name: "pruned (every eval)".into(),
                    points: trajectory_curve.iter().map(|p| (pick(p), p.2)).collect(),
                });
            }
            for (v, pts) in &by_variant {
                let mut pts: Vec<(f64, f64)> = origin.iter().chain(pts).map(|p| (pick(p), p.2)).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                out.push(Series {
                    name: v.clone(),
                    points: pts,
                });
            }
            out
        };
        emit(
            &format!("eer_t{t}_vs_sparsity.svg"),
            LinePlot {
                title: format!("EER, {t}:{t} templates"),
                x_label: "pruned filter fraction".into(),
                y_label: "EER".into(),
                series: build(|p| p.0),
            }
            .to_svg(),
        )?;
        emit(
            &format!("eer_t{t}_vs_learnables.svg"),
            LinePlot {
                title: format!("EER against learnables, {t}:{t} templates"),
                x_label: "learnable parameters".into(),
                y_label: "EER".into(),
                series: build(|p| p.1),
            }
            .to_svg(),
        )?;
    }

    let acc_points: Vec<(f64, f64)> = acc
        .rows
        .iter()
        .map(|r| (acc.num(r, "pruned_fraction"), acc.num(r, "val_accuracy")))
        .filter(|p| p.1.is_finite())
        .collect();
    emit(
        "accuracy_vs_sparsity.svg",
        LinePlot {
            title: "Validation accuracy while pruning".into(),
            x_label: "pruned filter fraction".into(),
            y_label: "accuracy".into(),
            series: vec![Series {
                name: "unretrained".into(),
                points: acc_points,
            }],
        }
        .to_svg(),
    )?;

    let fractions: BTreeMap<String, f64> = traj
        .rows
        .iter()
        .map(|r| (traj.text(r, "iteration").to_string(), traj.num(r, "pruned_fraction")))
        .collect();
    let mut shown: Vec<String> = vec!["0".into()];
    for r in &eval.rows {
        let it = eval.text(r, "iteration").to_string();
        if !shown.contains(&it) {
            shown.push(it);
        }
    }
    let layer_series: Vec<Series> = layers
        .rows
        .iter()
        .filter(|r| shown.iter().any(|s| s == &r[0]))
        .map(|r| Series {
            name: format!("{:.0}% pruned", 100.0 * fractions.get(&r[0]).copied().unwrap_or(0.0)),
            points: r[1..]
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64, v.parse().unwrap_or(f64::NAN)))
                .collect(),
        })
        .collect();
    emit(
        "filters_per_layer.svg",
        LinePlot {
            title: "Filters per layer".into(),
            x_label: "layer index".into(),
            y_label: "filters".into(),
            series: layer_series,
        }
        .to_svg(),
    )?;

    let mut hist_series = Vec::new();
    let mut psnr_of: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in &explain.rows {
        let (v, it) = (explain.text(r, "variant"), explain.text(r, "iteration"));
        psnr_of.insert((v.to_string(), it.to_string()), explain.num(r, "mean_psnr"));
        let n: usize = it.parse().unwrap_or(0);
        let path = run.explain_dir().join(format!("{v}_iter_{n:04}_hist.csv"));
        let h = Table::parse(&read_text(&path, &hash)?);
        hist_series.push(Series {
            name: format!("{v} @ {:.0}%", 100.0 * explain.num(r, "sparsity")),
            points: h
                .rows
                .iter()
                .map(|b| ((h.num(b, "bin_left") + h.num(b, "bin_right")) / 2.0, h.num(b, "count")))
                .collect(),
        });
    }
    emit(
        "psnr_histogram.svg",
        LinePlot {
            title: "Heatmap PSNR against the original network".into(),
            x_label: "PSNR (dB)".into(),
            y_label: "images".into(),
            series: hist_series,
        }
        .to_svg(),
    )?;

    let mut table = eval.header.join(",");
    table.push_str(",mean_psnr\n");
    for r in &eval.rows {
        let key = (eval.text(r, "variant").to_string(), eval.text(r, "iteration").to_string());
        let psnr = psnr_of.get(&key).map(|p| format!("{p:.9}")).unwrap_or_default();
        table.push_str(&format!("{},{psnr}\n", r.join(",")));
    }
    let summary = dir.join("summary.csv");
    write_text(&summary, &hash, &table)?;
    written.push(summary);
    Ok(written)
}
