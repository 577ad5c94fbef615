//! Static plots and a markdown summary from finished run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;

use crate::error::{Result, SimError};
use crate::metrics::{quantile_sorted, GS_LOG_HEADER, REQUEST_METRICS_HEADER};

const HIST_BINS: usize = 30;

/// One completed request as read back from `request_metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub request_id: u64,
    pub arrived_at: f64,
    pub e2e_time: f64,
    pub num_restarts: u32,
    pub ttft: f64,
}

/// One `gs_log.csv` sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySample {
    pub time: f64,
    pub replica_id: u32,
    pub memory_usage_percent: f64,
}

fn open_csv(path: &Path, header: &str) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let found = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if found != header {
        return Err(parse_error(
            path,
            1,
            format!("expected header `{header}`, found `{found}`"),
        ));
    }
    Ok(reader)
}

fn parse_error(path: &Path, line: u64, message: String) -> SimError {
    SimError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn field<T: FromStr>(
    path: &Path,
    line: u64,
    record: &csv::StringRecord,
    i: usize,
    name: &str,
) -> Result<T> {
    let raw = record
        .get(i)
        .ok_or_else(|| parse_error(path, line, format!("missing column `{name}`")))?;
    raw.trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("bad {name} `{raw}`")))
}

fn rows(path: &Path, header: &str) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = open_csv(path, header)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    Ok(out)
}

pub fn read_request_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    rows(path, REQUEST_METRICS_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            Ok(MetricsRow {
                request_id: field(path, line, &r, 0, "request_id")?,
                arrived_at: field(path, line, &r, 1, "request_arrived_at")?,
                e2e_time: field(path, line, &r, 2, "request_e2e_time")?,
                num_restarts: field(path, line, &r, 3, "request_num_restarts")?,
                ttft: field(path, line, &r, 4, "ttft")?,
            })
        })
        .collect()
}

pub fn read_gs_log(path: &Path) -> Result<Vec<MemorySample>> {
    rows(path, GS_LOG_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            Ok(MemorySample {
                time: field(path, line, &r, 0, "time")?,
                replica_id: field(path, line, &r, 1, "replica_id")?,
                memory_usage_percent: field(path, line, &r, 6, "memory_usage_percent")?,
            })
        })
        .collect()
}

/// Equal-width histogram: `(lo, hi, count)` per bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c))
        .collect()
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Plot(format!("{}: {e}", path.display()))
}

fn draw_histogram(path: &Path, title: &str, bins: &[(f64, f64, usize)]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let x0 = bins.first().map_or(0.0, |b| b.0);
    let x1 = bins.last().map_or(1.0, |b| b.1);
    let ymax = bins.iter().map(|b| b.2).max().unwrap_or(1).max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1.max(x0 + 1e-9), 0usize..ymax + 1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("response time (s)")
        .y_desc("requests")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(
            bins.iter()
                .map(|&(lo, hi, c)| Rectangle::new([(lo, 0), (hi, c)], BLUE.mix(0.6).filled())),
        )
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

fn draw_lines(
    path: &Path,
    title: &str,
    y_desc: &str,
    series: &BTreeMap<String, Vec<(f64, f64)>>,
) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let points = series.values().flatten();
    let x1 = points.clone().map(|p| p.0).fold(1e-9, f64::max);
    let y1 = points.map(|p| p.1).fold(1e-9, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x1, 0.0..y1 * 1.05)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("time (s)")
        .y_desc(y_desc)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))
            .map_err(|e| plot_err(path, e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SimError::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub dir: PathBuf,
    pub requests: usize,
    pub mean_rt: f64,
    pub p95_rt: f64,
    pub restart_fraction: f64,
    /// One per replica that appears in gs_log.csv.
    pub memory_series: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub runs: Vec<RunReport>,
    pub files: Vec<PathBuf>,
}

/// For each run directory: an RT histogram, per-replica memory usage over
/// time and a cumulative restart timeline, as SVG plus the underlying CSV.
/// Writes `report.md` summarizing all runs.
pub fn build_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(SimError::InvalidConfig(
            "report needs at least one run directory".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| SimError::io(out_dir, e))?;
    let mut report = Report::default();
    let mut md = String::from("# Simulation report\n\n| run | requests | mean RT (s) | p95 RT (s) | restart fraction | replicas |\n|---|---|---|---|---|---|\n");

    for (k, dir) in run_dirs.iter().enumerate() {
        let metrics = read_request_metrics(&dir.join("request_metrics.csv"))?;
        let gs = read_gs_log(&dir.join("gs_log.csv"))?;

        let mut rts: Vec<f64> = metrics.iter().map(|m| m.e2e_time).collect();
        rts.sort_by(f64::total_cmp);
        let bins = histogram(&rts, HIST_BINS);
        let mut csv = String::from("bin_lo,bin_hi,count\n");
        for (lo, hi, c) in &bins {
            let _ = writeln!(csv, "{lo:.6},{hi:.6},{c}");
        }
        let hist_csv = out_dir.join(format!("rt_hist_{k}.csv"));
        write_text(&hist_csv, &csv)?;
        let hist_svg = out_dir.join(format!("rt_hist_{k}.svg"));
        draw_histogram(&hist_svg, &format!("run {k}: response time"), &bins)?;

        let mut memory: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for s in &gs {
            memory
                .entry(format!("replica {}", s.replica_id))
                .or_default()
                .push((s.time, s.memory_usage_percent));
        }
        let mem_svg = out_dir.join(format!("memory_{k}.svg"));
        draw_lines(
            &mem_svg,
            &format!("run {k}: KV-cache usage"),
            "memory usage (%)",
            &memory,
        )?;

        let mut by_arrival: Vec<&MetricsRow> = metrics.iter().collect();
        by_arrival.sort_by(|a, b| {
            a.arrived_at
                .total_cmp(&b.arrived_at)
                .then(a.request_id.cmp(&b.request_id))
        });
        let mut total = 0u64;
        let mut timeline = Vec::with_capacity(by_arrival.len());
        let mut csv = String::from("request_arrived_at,cumulative_restarts\n");
        for m in by_arrival {
            total += m.num_restarts as u64;
            timeline.push((m.arrived_at, total as f64));
            let _ = writeln!(csv, "{:.6},{total}", m.arrived_at);
        }
        let restart_csv = out_dir.join(format!("restarts_{k}.csv"));
        write_text(&restart_csv, &csv)?;
        let restart_svg = out_dir.join(format!("restarts_{k}.svg"));
        let series = BTreeMap::from([("restarts".to_string(), timeline)]);
        draw_lines(
            &restart_svg,
            &format!("run {k}: cumulative restarts by arrival"),
            "restarts",
            &series,
        )?;

        let restarted = metrics.iter().filter(|m| m.num_restarts > 0).count();
        let run = RunReport {
            dir: dir.clone(),
            requests: metrics.len(),
            mean_rt: if rts.is_empty() {
                0.0
            } else {
                rts.iter().sum::<f64>() / rts.len() as f64
            },
            p95_rt: quantile_sorted(&rts, 0.95),
            restart_fraction: if metrics.is_empty() {
                0.0
            } else {
                restarted as f64 / metrics.len() as f64
            },
            memory_series: memory.len(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {:.3} | {:.3} | {:.3} | {} |",
            dir.display(),
            run.requests,
            run.mean_rt,
            run.p95_rt,
            run.restart_fraction,
            run.memory_series
        );
        report.runs.push(run);
        report
            .files
            .extend([hist_csv, hist_svg, mem_svg, restart_csv, restart_svg]);
    }

    md.push_str("\nPer run `k`: `rt_hist_k.svg`, `memory_k.svg`, `restarts_k.svg` and the CSVs behind them.\n");
    let md_path = out_dir.join("report.md");
    write_text(&md_path, &md)?;
    report.files.push(md_path);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let bins = histogram(&values, 10);
        assert_eq!(bins.len(), 10);
        assert_eq!(bins.iter().map(|b| b.2).sum::<usize>(), 100);
        assert!(bins.iter().all(|b| b.2 == 10));
    }

    #[test]
    fn histogram_of_constant_values() {
        let bins = histogram(&[2.0; 5], 4);
        assert_eq!(bins[0].2, 5);
    }

    #[test]
    fn malformed_row_cites_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("request_metrics.csv");
        fs::write(
            &path,
            format!("{REQUEST_METRICS_HEADER}\n0,0.0,1.0,0,0.1,0.01,0.0,0,10,10\n1,0.5,oops,0,0.1,0.01,0.0,0,10,10\n"),
        )
        .unwrap();
        let err = read_request_metrics(&path).unwrap_err().to_string();
        assert!(err.contains("request_metrics.csv:3:"), "{err}");
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gs_log.csv");
        fs::write(&path, "time,replica\n1,2\n").unwrap();
        let err = read_gs_log(&path).unwrap_err().to_string();
        assert!(err.contains("gs_log.csv:1:"), "{err}");
    }
}
