//! SVG figures, each with a CSV twin holding the plotted numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{read_dataset, read_selection, selection_file, write_curves, CurveRow, RunManifest};
use crate::error::{Error, Result};
use crate::io::decode_records;
use crate::metrics::MetricReport;

/// Files written by [`cmd_plot`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlotFiles {
    pub scatter_svg: String,
    pub scatter_csv: String,
    pub curves_svg: String,
    pub curves_csv: String,
    pub heatmap_svg: String,
    pub heatmap_csv: String,
}

impl PlotFiles {
    fn new() -> Self {
        Self {
            scatter_svg: "scatter.svg".into(),
            scatter_csv: "scatter.csv".into(),
            curves_svg: "curves.svg".into(),
            curves_csv: "curves.csv".into(),
            heatmap_svg: "heatmap.svg".into(),
            heatmap_csv: "heatmap.csv".into(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        vec![
            self.scatter_svg.clone(),
            self.scatter_csv.clone(),
            self.curves_svg.clone(),
            self.curves_csv.clone(),
            self.heatmap_svg.clone(),
            self.heatmap_csv.clone(),
        ]
    }
}

fn artifact(manifest: &RunManifest, root: &Path, stage: &str, name: &str) -> Result<std::path::PathBuf> {
    manifest
        .artifact(stage, name)
        .map(|p| root.join(p))
        .ok_or_else(|| Error::InvalidArgument(format!("manifest lists no {name} from stage {stage}")))
}

type Points = Vec<(f64, f64)>;

/// Three-panel scatter (training data, generated, filtered), metric-versus-n
/// curves and the score-correlation heatmap, read only from artifacts the
/// manifest lists under `root`; written to `dir`.
pub fn cmd_plot(manifest: &RunManifest, root: &Path, dir: &Path) -> Result<PlotFiles> {
    let records_path = artifact(manifest, root, "score", "records.bin")?;
    let set = decode_records(&fs::read(&records_path).map_err(|e| Error::io(&records_path, e))?)?;
    if set.records.is_empty() {
        return Err(Error::InvalidArgument("record set is empty; nothing to plot".into()));
    }
    if set.records[0].sample.len() < 2 {
        return Err(Error::InvalidArgument(
            "scatter plots need at least two coordinates".into(),
        ));
    }
    let train = read_dataset(&artifact(manifest, root, "dataset", "train.csv")?)?;
    let first = manifest
        .reports
        .iter()
        .find(|r| r.subset == "filtered")
        .ok_or_else(|| Error::InvalidArgument("manifest lists no filtered report".into()))?;
    let kept = read_selection(
        &artifact(manifest, root, "filter", &selection_file(&first.score, first.n))?,
        "filtered",
    )?;
    let mut reports = Vec::new();
    for entry in &manifest.reports {
        let p = root.join(&entry.path);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        reports.push((
            entry.score.clone(),
            entry.n,
            entry.subset.clone(),
            MetricReport::parse(&text)?,
        ));
    }
    let heat = reports
        .iter()
        .find(|r| r.2 == "all")
        .map(|r| r.3.clone())
        .ok_or_else(|| Error::InvalidArgument("manifest lists no report for the full set".into()))?;

    let xy = |row: &[f64]| (row[0], row[1]);
    let data_pts: Points = train.points.iter_rows().map(xy).collect();
    let gen_pts: Points = set.records.iter().map(|r| xy(&r.sample)).collect();
    let by_id: std::collections::HashMap<u64, usize> =
        set.records.iter().enumerate().map(|(i, r)| (r.seed_id, i)).collect();
    let kept_pts: Points = kept
        .iter()
        .filter_map(|id| by_id.get(id))
        .map(|&i| xy(&set.records[i].sample))
        .collect();

    let files = PlotFiles::new();
    let panels = [
        ("training data".to_string(), data_pts),
        ("generated".to_string(), gen_pts),
        (format!("kept by {} (n={})", first.score, first.n), kept_pts),
    ];
    let mut w = csv::Writer::from_path(dir.join(&files.scatter_csv))?;
    w.write_record(["panel", "x", "y"])?;
    for (name, pts) in &panels {
        for (x, y) in pts {
            w.write_record([name.clone(), format!("{x:?}"), format!("{y:?}")])?;
        }
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    write_svg(&dir.join(&files.scatter_svg), &scatter_svg(&panels))?;

    write_curves(&dir.join(&files.curves_csv), &reports)?;
    write_svg(&dir.join(&files.curves_svg), &curves_svg(&reports))?;

    let mut w = csv::Writer::from_path(dir.join(&files.heatmap_csv))?;
    let mut header = vec!["name".to_string()];
    header.extend(heat.spearman_names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in heat.spearman_names.iter().zip(&heat.spearman) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    write_svg(&dir.join(&files.heatmap_svg), &heatmap_svg(&heat))?;
    Ok(files)
}

fn write_svg(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PANEL: f64 = 300.0;
const PAD: f64 = 30.0;

fn bounds<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
    }
    if !b.0.is_finite() {
        return (-1.0, 1.0, -1.0, 1.0);
    }
    let grow = |lo: f64, hi: f64| if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let (x0, x1) = grow(b.0, b.1);
    let (y0, y1) = grow(b.2, b.3);
    (x0, x1, y0, y1)
}

fn scatter_svg(panels: &[(String, Points)]) -> String {
    // One shared frame so panels are comparable.
    let (x0, x1, y0, y1) = bounds(panels.iter().flat_map(|(_, p)| p.iter()));
    let width = panels.len() as f64 * (PANEL + PAD) + PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="12">"#,
        PANEL + 2.0 * PAD
    );
    for (k, (name, pts)) in panels.iter().enumerate() {
        let ox = PAD + k as f64 * (PANEL + PAD);
        let _ = writeln!(
            s,
            r#"<rect x="{ox}" y="{PAD}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/><text x="{ox}" y="{}">{}</text>"#,
            PAD - 8.0,
            escape(name)
        );
        for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let px = ox + (x - x0) / (x1 - x0) * PANEL;
            let py = PAD + PANEL - (y - y0) / (y1 - y0) * PANEL;
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1" fill-opacity="0.4"/>"#);
        }
    }
    s.push_str("</svg>\n");
    s
}

const CURVE_METRICS: [&str; 4] = ["fid", "precision", "recall", "hallucination_rate"];

fn metric(r: &MetricReport, name: &str) -> Option<f64> {
    match name {
        "fid" => Some(r.fid),
        "precision" => Some(r.precision),
        "recall" => Some(r.recall),
        _ => r.hallucination_rate,
    }
}

fn curves_svg(reports: &[CurveRow]) -> String {
    let series: Vec<(String, Vec<&CurveRow>)> = {
        let mut keys: Vec<(String, String)> = reports
            .iter()
            .filter(|r| r.2 != "all")
            .map(|r| (r.0.clone(), r.2.clone()))
            .collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(score, subset)| {
                let mut pts: Vec<_> = reports.iter().filter(|r| r.0 == score && r.2 == subset).collect();
                pts.sort_by_key(|r| r.1);
                (format!("{score}/{subset}"), pts)
            })
            .collect()
    };
    let width = CURVE_METRICS.len() as f64 * (PANEL + PAD) + PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="12">"#,
        PANEL + 2.0 * PAD + 16.0 * series.len() as f64
    );
    for (k, m) in CURVE_METRICS.iter().enumerate() {
        let ox = PAD + k as f64 * (PANEL + PAD);
        let pts: Vec<(f64, f64)> = series
            .iter()
            .flat_map(|(_, v)| v.iter().filter_map(|r| metric(&r.3, m).map(|y| (r.1 as f64, y))))
            .collect();
        let (x0, x1, y0, y1) = bounds(pts.iter());
        let _ = writeln!(
            s,
            r#"<rect x="{ox}" y="{PAD}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/><text x="{ox}" y="{}">{m} vs n</text>"#,
            PAD - 8.0
        );
        for (j, (_, v)) in series.iter().enumerate() {
            let path: Vec<String> = v
                .iter()
                .filter_map(|r| metric(&r.3, m).map(|y| (r.1 as f64, y)))
                .filter(|(_, y)| y.is_finite())
                .map(|(x, y)| {
                    let px = ox + (x - x0) / (x1 - x0) * PANEL;
                    let py = PAD + PANEL - (y - y0) / (y1 - y0) * PANEL;
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="hsl({},70%,40%)" stroke-width="1.5"/>"#,
                path.join(" "),
                j * 360 / series.len().max(1)
            );
        }
    }
    for (j, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{PAD}" y="{}" fill="hsl({},70%,40%)">{}</text>"#,
            PANEL + 2.0 * PAD + 12.0 + 16.0 * j as f64,
            j * 360 / series.len().max(1),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn heatmap_svg(r: &MetricReport) -> String {
    let n = r.spearman_names.len().max(1);
    let cell = 60.0;
    let size = PAD * 3.0 + cell * n as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#
    );
    for (i, row) in r.spearman.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            // Blue for negative, red for positive correlation.
            let (red, blue) = if v >= 0.0 {
                (255, (255.0 * (1.0 - v)) as u8)
            } else {
                ((255.0 * (1.0 + v)) as u8, 255)
            };
            let green = red.min(blue);
            let (x, y) = (PAD * 2.0 + j as f64 * cell, PAD * 2.0 + i as f64 * cell);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({red},{green},{blue})"/><text x="{}" y="{}">{v:.2}</text>"#,
                x + 12.0,
                y + cell / 2.0
            );
        }
    }
    for (i, name) in r.spearman_names.iter().enumerate() {
        let off = PAD * 2.0 + i as f64 * cell;
        let _ = writeln!(
            s,
            r#"<text x="{off}" y="{}">{}</text><text x="2" y="{}">{}</text>"#,
            PAD * 1.5,
            escape(name),
            off + cell / 2.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
