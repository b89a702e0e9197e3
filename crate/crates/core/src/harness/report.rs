use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{
    ensure_dir, read_metrics_csv, read_ranks_csv, run_file, RunConfig, CONFIG_FILE, METRICS_FILE, RANKS_FILE,
};
use crate::bench::delta_m;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportArtifacts {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// `(run name, trainable params, recomputed delta-m)` per run.
    pub points: Vec<(String, usize, Option<f64>)>,
}

const REQUIRED: [&str; 3] = [CONFIG_FILE, METRICS_FILE, RANKS_FILE];

fn is_run_dir(dir: &Path) -> bool {
    run_file(dir, METRICS_FILE).exists()
}

fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if is_run_dir(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    if let Ok(entries) = std::fs::read_dir(root) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() && is_run_dir(&p) {
                dirs.push(p);
            }
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingArtifacts(
            REQUIRED.iter().map(|f| root.join(f).display().to_string()).collect(),
        ));
    }
    Ok(dirs)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Summary table, scatter data and rank curves from the CSV logs under
/// `root` (a run directory or a directory of runs). Nothing is read from
/// checkpoints: every number is recomputed from the logs and the config.
pub fn report(root: &Path, svg: bool) -> Result<ReportArtifacts> {
    let dirs = run_dirs(root)?;
    let missing: Vec<String> = dirs
        .iter()
        .flat_map(|d| REQUIRED.iter().map(move |f| run_file(d, f)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }

    let out = root.join("report");
    ensure_dir(&out)?;
    let mut summary = csv::Writer::from_path(out.join("summary.csv"))?;
    summary.write_record(["run", "epoch", "task", "metric", "reference", "trainable_params", "delta_m"])?;
    let mut scatter = csv::Writer::from_path(out.join("scatter.csv"))?;
    scatter.write_record(["run", "trainable_params", "delta_m"])?;
    let mut curves = csv::Writer::from_path(out.join("rank_curves.csv"))?;
    curves.write_record(["run", "epoch", "stage", "kind", "mean_rank"])?;

    let mut points = Vec::new();
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for dir in &dirs {
        let name = run_name(dir);
        let cfg = RunConfig::load(&run_file(dir, CONFIG_FILE))?;
        let (tasks, rows) = read_metrics_csv(&run_file(dir, METRICS_FILE))?;
        let last = rows
            .last()
            .ok_or_else(|| Error::MissingArtifacts(vec![format!("{} has no rows", METRICS_FILE)]))?;
        let dm = match &cfg.reference {
            Some(r) => Some(delta_m(&last.metrics, r, &cfg.lower_is_better())?),
            None => None,
        };
        for (i, task) in tasks.iter().enumerate() {
            let reference = cfg.reference.as_ref().map(|r| r[i].to_string()).unwrap_or_default();
            summary.write_record([
                name.clone(),
                last.epoch.to_string(),
                task.clone(),
                last.metrics[i].to_string(),
                reference,
                last.trainable_params.to_string(),
                dm.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        scatter.write_record([
            name.clone(),
            last.trainable_params.to_string(),
            dm.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
        points.push((name.clone(), last.trainable_params, dm));

        let ranks = read_ranks_csv(&run_file(dir, RANKS_FILE))?;
        let mut groups: BTreeMap<(usize, usize, &'static str), (usize, usize)> = BTreeMap::new();
        for r in &ranks {
            let kind = if r.kind == "shared" { "shared" } else { "task" };
            let g = groups.entry((r.epoch, r.stage, kind)).or_default();
            g.0 += r.r_after;
            g.1 += 1;
        }
        for ((epoch, stage, kind), (sum, n)) in groups {
            let mean = sum as f64 / n as f64;
            curves.write_record([
                name.clone(),
                epoch.to_string(),
                stage.to_string(),
                kind.to_string(),
                mean.to_string(),
            ])?;
            series
                .entry(format!("{name} s{stage} {kind}"))
                .or_default()
                .push((epoch as f64, mean));
        }
    }
    summary.flush().map_err(|e| Error::io(&out, e))?;
    scatter.flush().map_err(|e| Error::io(&out, e))?;
    curves.flush().map_err(|e| Error::io(&out, e))?;

    let mut files = vec![out.join("summary.csv"), out.join("scatter.csv"), out.join("rank_curves.csv")];
    if svg {
        let pts: Vec<(String, f64, f64)> = points
            .iter()
            .map(|(n, p, d)| (n.clone(), *p as f64, d.unwrap_or(0.0)))
            .collect();
        let p = out.join("scatter.svg");
        std::fs::write(&p, svg_scatter(&pts, "trainable parameters", "delta m (%)")).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        let p = out.join("ranks.svg");
        std::fs::write(&p, svg_line_chart(&series, "epoch", "mean rank")).map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok(ReportArtifacts { dir: out, files, points })
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;
const COLOURS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 1.0, hi + 1.0)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn svg_open(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, x, y, anchor) in [
        (f.x0, PAD, H - PAD + 15.0, "start"),
        (f.x1, W - PAD, H - PAD + 15.0, "end"),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4}</text>"#);
    }
    for (v, y) in [(f.y0, H - PAD), (f.y1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{v:.4}</text>"#, PAD - 5.0);
    }
}

/// Labelled scatter plot.
pub fn svg_scatter(points: &[(String, f64, f64)], xlabel: &str, ylabel: &str) -> String {
    let f = Frame::fit(points.iter().map(|p| p.1), points.iter().map(|p| p.2));
    let mut s = String::new();
    svg_open(&mut s, &f, xlabel, ylabel);
    for (i, (name, x, y)) in points.iter().enumerate() {
        let (cx, cy) = (f.px(*x), f.py(*y));
        let c = COLOURS[i % COLOURS.len()];
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{c}"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, cx + 6.0, cy - 6.0);
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per named series, with a legend.
pub fn svg_line_chart(series: &BTreeMap<String, Vec<(f64, f64)>>, xlabel: &str, ylabel: &str) -> String {
    let all = || series.values().flatten();
    let f = Frame::fit(all().map(|p| p.0), all().map(|p| p.1));
    let mut s = String::new();
    svg_open(&mut s, &f, xlabel, ylabel);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLOURS[i % COLOURS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" points="{}"/>"#, path.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#,
            W - PAD + 4.0 - 120.0,
            PAD + 12.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
