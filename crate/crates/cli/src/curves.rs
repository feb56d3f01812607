//! Per-metric series from training and evaluation logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mid_core::trainer::{EVAL_LOG, TRAIN_LOG};
use mid_core::{MidError, Result};

struct Series {
    x_name: &'static str,
    points: Vec<(f64, f64)>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> MidError + '_ {
    move |source| MidError::Io { path: path.to_path_buf(), source }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| MidError::Data(format!("{}: no `{name}` column", path.display())))
}

fn parse(cell: &str, path: &Path) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse().map(Some).map_err(|_| MidError::Data(format!("{}: `{cell}` is not a number", path.display())))
}

/// Every numeric column of the training log against the global iteration.
fn train_series(path: &Path) -> Result<BTreeMap<String, Series>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let it = column(&headers, "iteration", path)?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let x = parse(&record[it], path)?.unwrap_or(0.0);
        for (i, name) in headers.iter().enumerate() {
            if name == "epoch" || name == "iteration" {
                continue;
            }
            if let Some(y) = parse(&record[i], path)? {
                out.entry(name.to_string())
                    .or_insert_with(|| Series { x_name: "iteration", points: Vec::new() })
                    .points
                    .push((x, y));
            }
        }
    }
    Ok(out)
}

/// One series per direction and metric against the epoch.
fn eval_series(path: &Path) -> Result<BTreeMap<String, Series>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let dir = column(&headers, "direction", path)?;
    let ep = column(&headers, "epoch", path)?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let x = parse(&record[ep], path)?.unwrap_or(0.0);
        for (i, name) in headers.iter().enumerate() {
            if i == dir || i == ep {
                continue;
            }
            if let Some(y) = parse(&record[i], path)? {
                out.entry(format!("{}_{name}", &record[dir]))
                    .or_insert_with(|| Series { x_name: "epoch", points: Vec::new() })
                    .points
                    .push((x, y));
            }
        }
    }
    Ok(out)
}

fn svg(name: &str, s: &Series) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &s.points {
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
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#, H - M, W - M);
    let _ = writeln!(out, r#"<text x="{W2}" y="24" text-anchor="middle" font-size="14">{name}</text>"#, W2 = W / 2.0);
    let _ = writeln!(out, r#"<text x="4" y="{}" font-size="11">{y1:.4}</text>"#, M + 4.0);
    let _ = writeln!(out, r#"<text x="4" y="{}" font-size="11">{y0:.4}</text>"#, H - M);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{} {x1}</text>"#,
        W - M,
        H - M + 20.0,
        s.x_name
    );
    let mut pts = String::new();
    for &(x, y) in &s.points {
        let _ = write!(pts, "{:.2},{:.2} ", px(x), py(y));
    }
    let _ =
        writeln!(out, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, pts.trim_end());
    out.push_str("</svg>\n");
    out
}

/// Writes `<metric>.csv` (and `<metric>.svg`) for every series found in the
/// run directory. Returns the number of series.
pub fn export(run_dir: &Path, out: &Path, draw: bool) -> Result<usize> {
    let train = run_dir.join(TRAIN_LOG);
    if !train.exists() {
        return Err(MidError::Config(format!("{} not found", train.display())));
    }
    let mut all = train_series(&train)?;
    let eval = run_dir.join(EVAL_LOG);
    if eval.exists() {
        all.extend(eval_series(&eval)?.into_iter().map(|(k, v)| (format!("eval_{k}"), v)));
    }
    fs::create_dir_all(out).map_err(io(out))?;
    for (name, series) in &all {
        let path = out.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([series.x_name, "value"])?;
        for &(x, y) in &series.points {
            w.write_record([x.to_string(), y.to_string()])?;
        }
        w.flush().map_err(io(&path))?;
        if draw {
            let path = out.join(format!("{name}.svg"));
            fs::write(&path, svg(name, series)).map_err(io(&path))?;
        }
    }
    Ok(all.len())
}
