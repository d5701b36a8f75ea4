//! Metric tables and SVG path overlays.

use anode_core::metrics::AxisStats;
use anode_core::robot::fmt17;
use anode_core::Vector3;
use anode_core::{Error, Result};
use std::fmt::Write as _;
use std::io::{Read, Write};

const AXES: [&str; 3] = ["x̃", "ỹ", "z̃"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scenario: String,
    /// Per-axis statistics in millimetres.
    pub stats: AxisStats,
    pub n_trials: usize,
}

/// One row per scenario with RMSE and STD columns for each axis.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn push(
        &mut self,
        scenario: impl Into<String>,
        stats: AxisStats,
        n_trials: usize,
    ) -> Result<()> {
        if n_trials == 0 {
            return Err(Error::Contract(
                "a metrics row needs at least one trial".into(),
            ));
        }
        if stats.rmse.iter().chain(&stats.std).any(|v| !(*v >= 0.0)) {
            return Err(Error::Numeric(format!("invalid statistics {stats:?}")));
        }
        self.rows.push(MetricsRow {
            scenario: scenario.into(),
            stats,
            n_trials,
        });
        Ok(())
    }

    pub fn row(&self, scenario: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }

    fn header() -> Vec<String> {
        let mut h = vec!["scenario".to_string()];
        for a in AXES {
            h.push(format!("{a} RMSE (mm)"));
            h.push(format!("{a} STD (mm)"));
        }
        h.push("trials".into());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header())?;
        for r in &self.rows {
            let mut rec = vec![r.scenario.clone()];
            for a in 0..3 {
                rec.push(fmt17(r.stats.rmse[a]));
                rec.push(fmt17(r.stats.std[a]));
            }
            rec.push(r.n_trials.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`MetricsTable::write_csv`]; per-row sample
    /// counts are not stored and come back as zero.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()?
            .iter()
            .ne(Self::header().iter().map(String::as_str))
        {
            return Err(Error::Format("unexpected metrics columns".into()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|e| Error::Format(format!("{:?}: {e}", &rec[i])))
            };
            let stats = AxisStats {
                rmse: [num(1)?, num(3)?, num(5)?],
                std: [num(2)?, num(4)?, num(6)?],
                count: 0,
            };
            let n_trials = rec[7]
                .parse()
                .map_err(|e| Error::Format(format!("trials: {e}")))?;
            rows.push(MetricsRow {
                scenario: rec[0].to_string(),
                stats,
                n_trials,
            });
        }
        Ok(Self { rows })
    }

    /// Markdown table with three decimals.
    pub fn to_markdown(&self) -> String {
        let header = Self::header();
        let mut s = format!("| {} |\n", header.join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for r in &self.rows {
            let _ = write!(s, "| {} ", r.scenario);
            for a in 0..3 {
                let _ = write!(s, "| {:.3} | {:.3} ", r.stats.rmse[a], r.stats.std[a]);
            }
            let _ = writeln!(s, "| {} |", r.n_trials);
        }
        s
    }
}

/// A named polyline for [`svg_overlay`].
pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: &'a [Vector3<f64>],
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Top view (x–y, millimetres) of the series with an optional obstacle marker.
pub fn svg_overlay(title: &str, series: &[Series], obstacle: Option<Vector3<f64>>) -> String {
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 40.0;
    let all = series
        .iter()
        .flat_map(|s| s.points.iter())
        .chain(obstacle.iter())
        .map(|p| (p.x * 1000.0, p.y * 1000.0));
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-6);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let map = |p: &Vector3<f64>| {
        let x = MARGIN + (p.x * 1000.0 - x0) * scale;
        let y = SIZE - MARGIN - (p.y * 1000.0 - y0) * scale;
        (x, y)
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">x (mm) →, y (mm) ↑, span {:.1} mm</text>"#,
        SIZE - 12.0,
        span
    );
    for (k, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(ser.color),
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            SIZE - 150.0,
            44.0 + 14.0 * k as f64,
            escape(ser.color),
            escape(ser.label)
        );
    }
    if let Some(o) = obstacle {
        let (x, y) = map(&o);
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="green"/>"#);
    }
    s.push_str("</svg>\n");
    s
}
