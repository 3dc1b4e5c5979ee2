use std::fmt::Write as _;
use std::path::Path;

use tct_core::trainer::LOG_FILE;
use tct_core::{Error, Result};

/// One run's training log.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RunLog {
    pub fn parse(name: &str, text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format {
            path: path.to_owned(),
            offset: 0,
            msg: "empty log".into(),
        })?;
        let columns: Vec<String> = header.split(',').map(str::to_owned).collect();
        if columns.first().map(String::as_str) != Some("epoch") {
            return Err(Error::Format {
                path: path.to_owned(),
                offset: 0,
                msg: format!("header must start with epoch, got {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let cells: Vec<String> = line.split(',').map(str::to_owned).collect();
            if cells.len() != columns.len() {
                return Err(Error::Format {
                    path: path.to_owned(),
                    offset: 0,
                    msg: format!("row {} has {} cells, header {}", k + 1, cells.len(), columns.len()),
                });
            }
            rows.push(cells);
        }
        Ok(Self {
            name: name.to_owned(),
            columns,
            rows,
        })
    }

    fn value(&self, row: &[String], column: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == column)?;
        row[i].parse().ok()
    }

    /// `(epoch, value)` points of `column`, skipping empty cells.
    pub fn series(&self, column: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| Some((self.value(r, "epoch")?, self.value(r, column)?)))
            .collect()
    }

    /// Mean over the per-class DSC columns on rows where all are present.
    pub fn mean_dsc_series(&self) -> Vec<(f64, f64)> {
        let dsc: Vec<&String> = self.columns.iter().filter(|c| c.starts_with("dsc_class_")).collect();
        if dsc.is_empty() {
            return Vec::new();
        }
        self.rows
            .iter()
            .filter_map(|r| {
                let vals: Option<Vec<f64>> = dsc.iter().map(|c| self.value(r, c)).collect();
                let vals = vals?;
                Some((self.value(r, "epoch")?, vals.iter().sum::<f64>() / vals.len() as f64))
            })
            .collect()
    }
}

/// Every immediate subdirectory of `dir` holding a training log, by name.
pub fn load_runs(dir: &Path) -> Result<Vec<RunLog>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LOG_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Io {
            path: dir.to_owned(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("no run directory holds {LOG_FILE}")),
        });
    }
    dirs.iter()
        .map(|d| {
            let path = d.join(LOG_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            RunLog::parse(&name, &text, &path)
        })
        .collect()
}

/// `run` followed by the union of all log columns in first-seen order.
pub fn merged_csv(runs: &[RunLog]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    for r in runs {
        for c in &r.columns {
            if !columns.contains(&c.as_str()) {
                columns.push(c);
            }
        }
    }
    let mut out = format!("run,{}\n", columns.join(","));
    for r in runs {
        for row in &r.rows {
            out += &r.name;
            for c in &columns {
                out.push(',');
                if let Some(i) = r.columns.iter().position(|x| x == c) {
                    out += &row[i];
                }
            }
            out.push('\n');
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Stacked line charts of `L_main`, `total` and (when logged) mean DSC per
/// epoch, one colored line per run.
pub fn curves_svg(runs: &[RunLog]) -> String {
    let panels: Vec<(&str, Vec<Vec<(f64, f64)>>)> = vec![
        ("L_main", runs.iter().map(|r| r.series("L_main")).collect()),
        ("total", runs.iter().map(|r| r.series("total")).collect()),
        ("mean DSC", runs.iter().map(RunLog::mean_dsc_series).collect()),
    ];
    let panels: Vec<_> = panels.into_iter().filter(|(_, s)| s.iter().any(|p| !p.is_empty())).collect();
    let (w, h, pad, legend) = (640.0, 220.0, 40.0, 16.0 * runs.len() as f64 + 10.0);
    let height = h * panels.len() as f64 + legend;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for (k, (title, series)) in panels.iter().enumerate() {
        let top = h * k as f64;
        let pts = series.iter().flatten();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let sy = |y: f64| top + h - pad + (y0 - y) / (y1 - y0) * (h - 2.0 * pad);
        let _ = writeln!(
            svg,
            "<rect x=\"{pad}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            top + pad,
            w - 2.0 * pad,
            h - 2.0 * pad
        );
        let _ = writeln!(svg, "<text x=\"{pad}\" y=\"{}\">{}</text>", top + pad - 8.0, escape(title));
        let _ = writeln!(svg, "<text x=\"2\" y=\"{}\">{y1:.3}</text>", top + pad + 4.0);
        let _ = writeln!(svg, "<text x=\"2\" y=\"{}\">{y0:.3}</text>", top + h - pad);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">epoch {x1}</text>", w - pad - 50.0, top + h - pad + 14.0);
        for (i, s) in series.iter().enumerate().filter(|(_, s)| !s.is_empty()) {
            let points: Vec<String> = s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
                PALETTE[i % PALETTE.len()],
                points.join(" ")
            );
        }
    }
    for (i, r) in runs.iter().enumerate() {
        let y = h * panels.len() as f64 + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{pad}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{y}\">{}</text>",
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            pad + 16.0,
            escape(&r.name)
        );
    }
    svg += "</svg>\n";
    svg
}
