use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::read_jsonl;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

const X_KEYS: [&str; 2] = ["meta_step", "step"];
const Y_KEYS: [&str; 3] = ["expected_distance", "loss", "val_loss"];

/// One plotted curve: record index order is kept, missing values are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub x_key: String,
    pub y_key: String,
    pub rows: Vec<(f64, Option<f64>)>,
}

impl Series {
    /// Picks the step column and the first known value column present.
    pub fn from_records(records: &[Value]) -> Series {
        let pick = |keys: &[&str], fallback: &str| {
            keys.iter()
                .find(|k| records.iter().any(|r| r.get(**k).is_some_and(Value::is_number)))
                .map_or(fallback.to_string(), |k| k.to_string())
        };
        let x_key = pick(&X_KEYS, "step");
        let y_key = pick(&Y_KEYS, "loss");
        let rows = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let x = r.get(&x_key).and_then(Value::as_f64).unwrap_or(i as f64);
                (x, r.get(&y_key).and_then(Value::as_f64))
            })
            .collect();
        Series { x_key, y_key, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}\n", self.x_key, self.y_key);
        for (x, y) in &self.rows {
            match y {
                Some(y) => writeln!(s, "{x},{y}"),
                None => writeln!(s, "{x},"),
            }
            .expect("writing to a String");
        }
        s
    }

    /// Line chart with axes; one polyline vertex per present value.
    pub fn to_svg(&self, title: &str) -> String {
        let pts: Vec<(f64, f64)> = self.rows.iter().filter_map(|&(x, y)| y.map(|y| (x, y))).collect();
        let mut s = String::new();
        let w = |s: &mut String, line: String| s.push_str(&line);
        w(&mut s, format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        w(&mut s, format!("<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"));
        let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
        w(&mut s, format!("<line class=\"axis\" x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"));
        w(&mut s, format!("<line class=\"axis\" x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"));
        w(
            &mut s,
            format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                WIDTH / 2.0,
                HEIGHT - 15.0,
                escape(&self.x_key)
            ),
        );
        w(
            &mut s,
            format!(
                "<text x=\"15\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {})\">{}</text>\n",
                HEIGHT / 2.0,
                HEIGHT / 2.0,
                escape(&self.y_key)
            ),
        );
        w(&mut s, format!("<text x=\"{}\" y=\"25\" text-anchor=\"middle\">{}</text>\n", WIDTH / 2.0, escape(title)));
        if !pts.is_empty() {
            let (xmin, xmax) = bounds(pts.iter().map(|p| p.0));
            let (ymin, ymax) = bounds(pts.iter().map(|p| p.1));
            let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
            let sy = |y: f64| y0 - (y - ymin) / (ymax - ymin) * (y0 - y1);
            for (v, px, py, anchor) in [(xmin, x0, y0 + 15.0, "start"), (xmax, x1, y0 + 15.0, "end")] {
                w(
                    &mut s,
                    format!(
                        "<text x=\"{px}\" y=\"{py}\" text-anchor=\"{anchor}\" font-size=\"10\">{}</text>\n",
                        tick(v)
                    ),
                );
            }
            for (v, py) in [(ymin, y0), (ymax, y1)] {
                w(
                    &mut s,
                    format!(
                        "<text x=\"{}\" y=\"{py}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n",
                        x0 - 4.0,
                        tick(v)
                    ),
                );
            }
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            w(&mut s, format!("<polyline fill=\"none\" stroke=\"steelblue\" points=\"{}\"/>\n", coords.join(" ")));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders each JSONL metrics file to `<stem>.svg` and `<stem>.csv` in
/// `out`. Returns the written paths.
pub fn plot_metrics(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::input("no metrics files to plot"));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for input in inputs {
        let records = read_jsonl(input)?;
        let series = Series::from_records(&records);
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::input(format!("cannot name output for {}", input.display())))?;
        let svg = out.join(format!("{stem}.svg"));
        let csv = out.join(format!("{stem}.csv"));
        fs::write(&svg, series.to_svg(stem))?;
        fs::write(&csv, series.to_csv())?;
        written.extend([svg, csv]);
    }
    Ok(written)
}
