//! SVG and CSV emission for training curves and sweep heatmaps.
//!
//! Curves show the per-iteration mean across seeds with a 90% confidence
//! band (normal approximation, 1.6449 standard errors). When runs disagree
//! on the iteration grid, all series are resampled onto a common grid by
//! linear interpolation with a warning. Every plotted series is mirrored
//! into a CSV next to the SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::metrics::MetricsRecord;

const Z_90: f64 = 1.6448536269514722;
const PALETTE: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A single run's values for one metric at the iterations where it was
/// recorded.
#[derive(Debug, Clone, Default)]
pub struct RunSeries {
    pub iterations: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn extract_series(records: &[MetricsRecord], metric: &str) -> RunSeries {
    let mut out = RunSeries::default();
    for r in records {
        if let Some(v) = r.metric(metric) {
            out.iterations.push(r.iteration as f64);
            out.values.push(v);
        }
    }
    out
}

/// Mean curve with a confidence band over a group of runs.
#[derive(Debug, Clone)]
pub struct BandSeries {
    pub label: String,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn interp(series: &RunSeries, x: f64) -> f64 {
    let xs = &series.iterations;
    let ys = &series.values;
    if xs.is_empty() {
        return f64::NAN;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= *xs.last().unwrap() {
        return *ys.last().unwrap();
    }
    let mut hi = 1;
    while xs[hi] < x {
        hi += 1;
    }
    let (x0, x1) = (xs[hi - 1], xs[hi]);
    let (y0, y1) = (ys[hi - 1], ys[hi]);
    if x1 == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Aggregates runs into a mean curve with a 90% confidence band.
pub fn aggregate(label: &str, group: &[RunSeries]) -> Result<BandSeries> {
    let nonempty: Vec<&RunSeries> = group.iter().filter(|s| !s.iterations.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::config(format!("no data for series '{label}'")));
    }
    let same_grid = nonempty.windows(2).all(|w| w[0].iterations == w[1].iterations);
    let grid: Vec<f64> = if same_grid {
        nonempty[0].iterations.clone()
    } else {
        eprintln!("warning: runs disagree on iteration grids for '{label}'; resampling");
        let lo = nonempty.iter().map(|s| s.iterations[0]).fold(f64::MIN, f64::max);
        let hi = nonempty
            .iter()
            .map(|s| *s.iterations.last().unwrap())
            .fold(f64::MAX, f64::min);
        if hi < lo {
            return Err(Error::config(format!("iteration grids for '{label}' do not overlap")));
        }
        let mut union: Vec<f64> = nonempty
            .iter()
            .flat_map(|s| s.iterations.iter().copied())
            .filter(|&x| x >= lo && x <= hi)
            .collect();
        union.sort_by(|a, b| a.partial_cmp(b).unwrap());
        union.dedup();
        union
    };
    let n = nonempty.len() as f64;
    let mut mean = Vec::with_capacity(grid.len());
    let mut lo_band = Vec::with_capacity(grid.len());
    let mut hi_band = Vec::with_capacity(grid.len());
    for &x in &grid {
        let vals: Vec<f64> = nonempty.iter().map(|s| interp(s, x)).collect();
        let m = vals.iter().sum::<f64>() / n;
        let half = if vals.len() > 1 {
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
            Z_90 * (var / n).sqrt()
        } else {
            0.0
        };
        mean.push(m);
        lo_band.push(m - half);
        hi_band.push(m + half);
    }
    Ok(BandSeries { label: label.to_string(), grid, mean, lo: lo_band, hi: hi_band })
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi - lo).is_finite() || hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = mag
        * if norm < 1.5 {
            1.0
        } else if norm < 3.0 {
            2.0
        } else if norm < 7.0 {
            5.0
        } else {
            10.0
        };
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + 1e-9 * step {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Writes a line chart with confidence bands.
pub fn write_line_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    bands: &[BandSeries],
) -> Result<()> {
    let (w, h) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 55.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let mut x_min = f64::MAX;
    let mut x_max = f64::MIN;
    let mut y_min = f64::MAX;
    let mut y_max = f64::MIN;
    for b in bands {
        for &x in &b.grid {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
        }
        for (&l, &hv) in b.lo.iter().zip(&b.hi) {
            y_min = y_min.min(l);
            y_max = y_max.max(hv);
        }
    }
    if bands.is_empty() || !x_min.is_finite() {
        return Err(Error::config("nothing to plot"));
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    let pad = ((y_max - y_min) * 0.08).max(1e-9);
    y_min -= pad;
    y_max += pad;

    let sx = move |x: f64| ml + (x - x_min) / (x_max - x_min) * pw;
    let sy = move |y: f64| mt + (1.0 - (y - y_min) / (y_max - y_min)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" font-family="Helvetica, Arial, sans-serif" font-size="13">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        w / 2.0,
        title
    );

    for t in nice_ticks(x_min, x_max, 6) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{mt}" x2="{x:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            mt + ph
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            mt + ph + 18.0,
            fmt_num(t)
        );
    }
    for t in nice_ticks(y_min, y_max, 6) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            ml + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            ml - 6.0,
            y + 4.0,
            fmt_num(t)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{:.1}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        h - 12.0,
        x_label
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        y_label
    );

    for (i, b) in bands.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // Confidence band polygon.
        let mut d = String::from("M");
        for (&x, &y) in b.grid.iter().zip(&b.lo) {
            let _ = write!(d, " {:.1},{:.1}", sx(x), sy(y));
        }
        for (&x, &y) in b.grid.iter().zip(&b.hi).rev() {
            let _ = write!(d, " {:.1},{:.1}", sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<path d="{d} Z" fill="{color}" opacity="0.18"/>"#);
        let mut pts = String::new();
        for (&x, &y) in b.grid.iter().zip(&b.mean) {
            let _ = write!(pts, "{:.1},{:.1} ", sx(x), sy(y));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.trim_end()
        );
        // Legend.
        let ly = mt + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/>"#,
            ml + pw - 150.0,
            ml + pw - 125.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            ml + pw - 118.0,
            ly + 4.0,
            b.label
        );
    }
    let _ = writeln!(s, "</svg>");
    std::fs::write(path, s)?;
    Ok(())
}

/// CSV mirror of plotted bands: iteration, then mean/lo/hi per series.
pub fn write_band_csv(path: &Path, bands: &[BandSeries]) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::config("nothing to write"));
    }
    let grid = &bands[0].grid;
    let mut s = String::from("iteration");
    for b in bands {
        let _ = write!(s, ",{0}_mean,{0}_lo,{0}_hi", b.label.replace(' ', "_"));
    }
    let _ = writeln!(s);
    for (i, &x) in grid.iter().enumerate() {
        let _ = write!(s, "{x}");
        for b in bands {
            let j = b.grid.iter().position(|&g| g == x).unwrap_or(i.min(b.grid.len() - 1));
            let _ = write!(s, ",{},{},{}", b.mean[j], b.lo[j], b.hi[j]);
        }
        let _ = writeln!(s);
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn group_series(run_dirs: &[PathBuf], metric: &str) -> Result<Vec<RunSeries>> {
    let mut out = Vec::new();
    for dir in run_dirs {
        let records = super::metrics::read_records(&dir.join("metrics.jsonl"))?;
        let series = extract_series(&records, metric);
        if !series.iterations.is_empty() {
            out.push(series);
        }
    }
    Ok(out)
}

/// Emits every panel the given runs have data for. Returns the files
/// written.
pub fn emit_plots(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let panels: [(&str, &str, Vec<(&str, &str)>); 4] = [
        (
            "selfplay_defects",
            "defect actions / 10 steps",
            vec![("selfplay_defects", "self-play defects")],
        ),
        (
            "defects_vs_fixed",
            "defect actions / 10 steps",
            vec![
                ("defects_vs_alldefect", "vs all-defect"),
                ("defects_vs_allcooperate", "vs all-cooperate"),
            ],
        ),
        (
            "team_metrics",
            "value",
            vec![
                ("team_agents_on_team", "agents on team"),
                ("team_mean_length", "mean team length"),
                ("team_mean_reward", "mean reward"),
            ],
        ),
        (
            "holdout",
            "defect rate at final step",
            vec![
                ("holdout_defect_vs_alldefect", "vs all-defect"),
                ("holdout_defect_vs_allcooperate", "vs all-cooperate"),
            ],
        ),
    ];
    for (panel_name, y_label, series_spec) in panels {
        let mut bands = Vec::new();
        for (metric, label) in &series_spec {
            let group = group_series(run_dirs, metric)?;
            if !group.is_empty() {
                bands.push(aggregate(label, &group)?);
            }
        }
        if bands.is_empty() {
            continue;
        }
        let svg = out_dir.join(format!("{panel_name}.svg"));
        let csv = out_dir.join(format!("{panel_name}.csv"));
        write_line_svg(&svg, panel_name, "training iteration", y_label, &bands)?;
        write_band_csv(&csv, &bands)?;
        written.push(svg);
        written.push(csv);
    }
    Ok(written)
}

/// Heatmap over a sweep: one row per axis value, one column per evaluation
/// iteration, cell color by the metric's mean across seeds.
pub fn emit_heatmap(manifest_path: &Path, metric: &str, out_base: &Path) -> Result<Vec<PathBuf>> {
    let manifest: Vec<super::SweepCell> = serde_json::from_str(
        &std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::config(format!("cannot read manifest: {e}")))?,
    )
    .map_err(|e| Error::config(format!("bad manifest: {e}")))?;

    // Group cell dirs by axis value, preserving manifest order.
    let mut rows: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for cell in &manifest {
        match rows.iter_mut().find(|(v, _)| *v == cell.value) {
            Some((_, dirs)) => dirs.push(cell.dir.clone()),
            None => rows.push((cell.value.clone(), vec![cell.dir.clone()])),
        }
    }
    let mut bands = Vec::new();
    for (value, dirs) in &rows {
        let group = group_series(dirs, metric)?;
        if group.is_empty() {
            return Err(Error::config(format!("no '{metric}' data under value {value}")));
        }
        bands.push(aggregate(value, &group)?);
    }
    // Common grid across rows.
    let grid = bands
        .iter()
        .map(|b| b.grid.clone())
        .reduce(|a, b| a.into_iter().filter(|x| b.contains(x)).collect())
        .unwrap_or_default();
    if grid.is_empty() {
        return Err(Error::config("sweep rows share no evaluation iterations"));
    }

    let (cell_w, cell_h) = (18.0, 26.0);
    let (ml, mt) = (110.0, 50.0);
    let w = ml + cell_w * grid.len() as f64 + 30.0;
    let h = mt + cell_h * bands.len() as f64 + 60.0;
    let mut vmin = f64::MAX;
    let mut vmax = f64::MIN;
    let mut cells: Vec<Vec<f64>> = Vec::new();
    for b in &bands {
        let row: Vec<f64> = grid
            .iter()
            .map(|x| {
                let j = b.grid.iter().position(|g| g == x).unwrap();
                b.mean[j]
            })
            .collect();
        for &v in &row {
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        cells.push(row);
    }
    let span = (vmax - vmin).max(1e-9);
    let color = |v: f64| -> String {
        // Blue (low) through white to red (high).
        let t = ((v - vmin) / span).clamp(0.0, 1.0);
        let (r, g, b) = if t < 0.5 {
            let u = t * 2.0;
            (49.0 + 206.0 * u, 54.0 + 201.0 * u, 149.0 + 106.0 * u)
        } else {
            let u = (t - 0.5) * 2.0;
            (255.0 - 90.0 * u, 255.0 - 229.5 * u, 255.0 - 217.0 * u)
        };
        format!("rgb({},{},{})", r as u8, g as u8, b as u8)
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.0} {h:.0}" font-family="Helvetica, Arial, sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="24" text-anchor="middle" font-size="15">{metric} heatmap</text>"#,
        w / 2.0
    );
    for (ri, (b, row)) in bands.iter().zip(&cells).enumerate() {
        let y = mt + ri as f64 * cell_h;
        let _ = writeln!(
            s,
            r#"<text x="{:.0}" y="{:.0}" text-anchor="end">{}</text>"#,
            ml - 8.0,
            y + cell_h * 0.65,
            b.label
        );
        for (ci, &v) in row.iter().enumerate() {
            let x = ml + ci as f64 * cell_w;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="{}"><title>{v:.3}</title></rect>"#,
                color(v)
            );
        }
    }
    let step = (grid.len() / 6).max(1);
    for (ci, g) in grid.iter().enumerate().step_by(step) {
        let x = ml + ci as f64 * cell_w + cell_w / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.0}" y="{:.0}" text-anchor="middle">{}</text>"#,
            mt + bands.len() as f64 * cell_h + 18.0,
            fmt_num(*g)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="{:.0}" text-anchor="middle">training iteration</text>"#,
        ml + grid.len() as f64 * cell_w / 2.0,
        h - 14.0
    );
    let _ = writeln!(s, "</svg>");

    let svg_path = out_base.with_extension("svg");
    std::fs::write(&svg_path, s)?;

    let mut csv = String::from("value");
    for g in &grid {
        let _ = write!(csv, ",it_{g}");
    }
    let _ = writeln!(csv);
    for (b, row) in bands.iter().zip(&cells) {
        let _ = write!(csv, "{}", b.label);
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        let _ = writeln!(csv);
    }
    let csv_path = out_base.with_extension("csv");
    std::fs::write(&csv_path, csv)?;
    Ok(vec![svg_path, csv_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_band_collapses_to_the_curve() {
        let s = RunSeries { iterations: vec![0.0, 1.0, 2.0], values: vec![1.0, 2.0, 3.0] };
        let band = aggregate("x", &[s]).unwrap();
        assert_eq!(band.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(band.lo, band.mean);
        assert_eq!(band.hi, band.mean);
    }

    #[test]
    fn constant_metric_gives_zero_width_band() {
        let group: Vec<RunSeries> = (0..5)
            .map(|_| RunSeries { iterations: vec![0.0, 5.0, 10.0], values: vec![2.0, 2.0, 2.0] })
            .collect();
        let band = aggregate("flat", &group).unwrap();
        for i in 0..band.grid.len() {
            assert_eq!(band.mean[i], 2.0);
            assert!((band.hi[i] - band.lo[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_band_width_matches_analytic_interval() {
        // 10 synthetic seeds with known noise: mean band width must match
        // 2 * 1.6449 * sigma / sqrt(10) within 10%.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let sigma = 0.8f64;
        let n_iters = 400;
        let group: Vec<RunSeries> = (0..10)
            .map(|_| {
                let values: Vec<f64> = (0..n_iters)
                    .map(|_| {
                        // Sum of 12 uniforms minus 6: near-Gaussian with
                        // unit variance.
                        let z: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
                        5.0 + sigma * z
                    })
                    .collect();
                RunSeries { iterations: (0..n_iters).map(|i| i as f64).collect(), values }
            })
            .collect();
        let band = aggregate("noise", &group).unwrap();
        let mean_width: f64 =
            band.hi.iter().zip(&band.lo).map(|(h, l)| h - l).sum::<f64>() / band.grid.len() as f64;
        let analytic = 2.0 * Z_90 * sigma / 10f64.sqrt();
        assert!(
            (mean_width - analytic).abs() <= 0.1 * analytic,
            "width {mean_width} vs analytic {analytic}"
        );
    }

    #[test]
    fn mismatched_grids_resample_onto_overlap() {
        let a = RunSeries { iterations: vec![0.0, 10.0, 20.0], values: vec![0.0, 10.0, 20.0] };
        let b = RunSeries { iterations: vec![5.0, 15.0, 25.0], values: vec![5.0, 15.0, 25.0] };
        let band = aggregate("mix", &[a, b]).unwrap();
        // Overlap is [5, 20]; both series are the identity line there, so
        // the mean must be too.
        assert!(band.grid.first().unwrap() >= &5.0);
        assert!(band.grid.last().unwrap() <= &20.0);
        for (g, m) in band.grid.iter().zip(&band.mean) {
            assert!((g - m).abs() < 1e-9);
        }
    }

    #[test]
    fn svg_and_csv_files_materialize() {
        let dir = tempfile::tempdir().unwrap();
        let band = aggregate(
            "demo",
            &[RunSeries { iterations: vec![0.0, 1.0], values: vec![1.0, 4.0] }],
        )
        .unwrap();
        let svg = dir.path().join("demo.svg");
        let csv = dir.path().join("demo.csv");
        write_line_svg(&svg, "demo", "iteration", "y", &[band.clone()]).unwrap();
        write_band_csv(&csv, &[band]).unwrap();
        let svg_text = std::fs::read_to_string(&svg).unwrap();
        assert!(svg_text.starts_with("<svg"));
        assert!(svg_text.contains("polyline"));
        let csv_text = std::fs::read_to_string(&csv).unwrap();
        assert!(csv_text.starts_with("iteration,demo_mean,demo_lo,demo_hi"));
        assert_eq!(csv_text.lines().count(), 3);
    }
}
