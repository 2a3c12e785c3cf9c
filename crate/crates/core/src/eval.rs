//! Distance-binned evaluation: per-window position/time errors, the five
//! distance bins, mean/median/SD/M.A.D. statistics, throughput benchmarks,
//! and deterministic CSV + SVG report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::WindowConfig;
use crate::model::CollisionPrediction;
use crate::quant::QatModel;
use crate::synth::{CollisionLabel, PreparedRecording};
use crate::tensor::graph::Mode;
use crate::train::LabelStats;

/// One evaluated window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: u32,
    pub t_end_us: u64,
    /// True 3D distance (m) from the ball at the window end to the labeled
    /// collision point.
    pub distance_m: f32,
    /// Norm of the XY deviation in millimetres.
    pub pos_err_mm: f32,
    /// Absolute time-to-collision deviation in milliseconds.
    pub time_err_ms: f32,
}

/// Euclidean norm of the XY impact-point deviation, in millimetres.
pub fn position_error(pred: &CollisionPrediction, label: &CollisionLabel) -> f32 {
    ((pred.x_mm - label.x_mm).powi(2) + (pred.y_mm - label.y_mm).powi(2)).sqrt()
}

/// Human-readable labels of the five distance bins, in metres.
pub const BIN_LABELS: [&str; 5] = ["0.2-0.5", "0.5-1.0", "1.0-1.5", "1.5-2.0", "2.0+"];

/// Half-open, lower-inclusive bin of a distance; `None` below 0.2 m.
pub fn bin_index(distance_m: f32) -> Option<usize> {
    if !(distance_m >= 0.2) {
        return None;
    }
    Some(match distance_m {
        d if d < 0.5 => 0,
        d if d < 1.0 => 1,
        d if d < 1.5 => 2,
        d if d < 2.0 => 3,
        _ => 4,
    })
}

/// Partitions records into the five distance bins, dropping records whose
/// distance is below 0.2 m.
pub fn bin_by_distance(records: &[EvalRecord]) -> [Vec<EvalRecord>; 5] {
    let mut bins: [Vec<EvalRecord>; 5] = Default::default();
    for r in records {
        if let Some(i) = bin_index(r.distance_m) {
            bins[i].push(*r);
        }
    }
    bins
}

/// Which deviation statistic the `mad` field reports. The table caption's
/// own words say "maximum absolute deviation", so maximum-from-median is the
/// default; the conventional median-absolute-deviation stays available.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Deviation {
    #[default]
    MaxFromMedian,
    MedianAbs,
}

/// Summary statistics of one bin for one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct BinStats {
    pub range: String,
    pub mean: f32,
    pub median: f32,
    /// Population standard deviation.
    pub sd: f32,
    /// Deviation from the median, per the selected `Deviation` convention.
    pub mad: f32,
    pub n: usize,
}

fn median_of_sorted(sorted: &[f32]) -> f32 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Mean, median (midpoint for even n), population SD, and the selected
/// deviation statistic. The range label is left empty for the caller.
pub fn stats(values: &[f32], dev: Deviation) -> Result<BinStats> {
    if values.is_empty() {
        return Err(Error::invalid("stats", "cannot summarize an empty value list"));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    // Accumulate from the sorted copy so the result is exactly
    // permutation-invariant.
    let mean = (sorted.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
    let var = sorted.iter().map(|&v| ((v - mean) as f64).powi(2)).sum::<f64>() / n as f64;
    let median = median_of_sorted(&sorted);
    let mad = match dev {
        Deviation::MaxFromMedian => sorted.iter().map(|v| (v - median).abs()).fold(0.0, f32::max),
        Deviation::MedianAbs => {
            let mut devs: Vec<f32> = sorted.iter().map(|v| (v - median).abs()).collect();
            devs.sort_by(f32::total_cmp);
            median_of_sorted(&devs)
        }
    };
    Ok(BinStats { range: String::new(), mean, median, sd: var.sqrt() as f32, mad, n })
}

/// Per-bin statistics tables for both metrics: (position error in mm, time
/// error in ms). Bins with no records are omitted.
pub fn bin_tables(records: &[EvalRecord], dev: Deviation) -> (Vec<BinStats>, Vec<BinStats>) {
    let bins = bin_by_distance(records);
    let mut pos = Vec::new();
    let mut time = Vec::new();
    for (i, members) in bins.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let pos_vals: Vec<f32> = members.iter().map(|r| r.pos_err_mm).collect();
        let time_vals: Vec<f32> = members.iter().map(|r| r.time_err_ms).collect();
        let mut p = stats(&pos_vals, dev).expect("bin is non-empty");
        p.range = BIN_LABELS[i].to_string();
        pos.push(p);
        let mut t = stats(&time_vals, dev).expect("bin is non-empty");
        t.range = BIN_LABELS[i].to_string();
        time.push(t);
    }
    (pos, time)
}

fn build_record(rec: &PreparedRecording, t_end_us: u64, raw_pred: [f32; 3]) -> EvalRecord {
    let target = rec.target(t_end_us);
    let pred = CollisionPrediction { x_mm: raw_pred[0], y_mm: raw_pred[1], t_ms: raw_pred[2] };
    EvalRecord {
        id: rec.id,
        t_end_us,
        distance_m: rec.distance_at(t_end_us),
        pos_err_mm: position_error(&pred, &rec.label),
        time_err_ms: (raw_pred[2] - target[2]).abs(),
    }
}

/// Evaluates an arbitrary raw-unit predictor `(recording, window end) ->
/// [x_mm, y_mm, time_to_collision_ms]` over every eligible window, in
/// parallel across recordings. Output order is deterministic.
pub fn evaluate_with<F>(
    predict: F,
    recordings: &[PreparedRecording],
    window: &WindowConfig,
) -> Result<Vec<EvalRecord>>
where
    F: Fn(&PreparedRecording, u64) -> Result<[f32; 3]> + Sync,
{
    if recordings.is_empty() {
        return Err(Error::invalid("evaluate", "the requested split has no recordings"));
    }
    window.validate()?;
    let per_rec: Vec<Vec<EvalRecord>> = recordings
        .par_iter()
        .map(|rec| {
            rec.eligible_window_ends(window)
                .into_iter()
                .map(|t_end| Ok(build_record(rec, t_end, predict(rec, t_end)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_rec.into_iter().flatten().collect())
}

/// Evaluates a trained model over every eligible window of the given
/// recordings. Model outputs are mapped back to raw units through the label
/// statistics saved with the checkpoint.
pub fn evaluate(
    qat: &mut QatModel,
    label_stats: &LabelStats,
    recordings: &[PreparedRecording],
    window: &WindowConfig,
    event_clip: i32,
) -> Result<Vec<EvalRecord>> {
    if recordings.is_empty() {
        return Err(Error::invalid("evaluate", "the requested split has no recordings"));
    }
    window.validate()?;
    let modality = qat.model.cfg.modality;
    // One sequential inference first: activation quantizers calibrate on
    // their first pass, and every parallel clone must share that state.
    if let Some((rec, t_end)) = recordings
        .iter()
        .find_map(|r| r.eligible_window_ends(window).first().map(|&t| (r, t)))
    {
        let (evs, rgb) = rec.model_inputs(t_end, window, event_clip, modality)?;
        qat.predict(evs.as_ref(), rgb.as_ref(), Mode::Eval)?;
    }
    let per_rec: Vec<Vec<EvalRecord>> = recordings
        .par_iter()
        .map_init(
            || qat.clone(),
            |q, rec| {
                rec.eligible_window_ends(window)
                    .into_iter()
                    .map(|t_end| {
                        let (evs, rgb) = rec.model_inputs(t_end, window, event_clip, modality)?;
                        let pred = q.predict(evs.as_ref(), rgb.as_ref(), Mode::Eval)?;
                        let raw = label_stats.invert([pred.x_mm, pred.y_mm, pred.t_ms]);
                        Ok(build_record(rec, t_end, raw))
                    })
                    .collect::<Result<Vec<_>>>()
            },
        )
        .collect::<Result<_>>()?;
    Ok(per_rec.into_iter().flatten().collect())
}

/// Wall-clock throughput of `n_iters` single-window inferences.
#[derive(Clone, Copy, Debug)]
pub struct BenchResult {
    pub iters: usize,
    pub elapsed_s: f64,
    /// `iters / elapsed_s` by definition.
    pub hz: f64,
    pub median_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
}

/// Times `run` for `warmup + n_iters` calls, reporting aggregate rate over
/// the timed iterations plus median and p95 per-call latency.
pub fn benchmark_throughput(
    mut run: impl FnMut() -> Result<()>,
    n_iters: usize,
    warmup: usize,
) -> Result<BenchResult> {
    if n_iters == 0 {
        return Err(Error::invalid("benchmark", "need at least one timed iteration"));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut lat_ms = Vec::with_capacity(n_iters);
    let start = Instant::now();
    for _ in 0..n_iters {
        let t0 = Instant::now();
        run()?;
        lat_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let elapsed_s = start.elapsed().as_secs_f64();
    lat_ms.sort_by(f64::total_cmp);
    let median_ms = if n_iters % 2 == 1 {
        lat_ms[n_iters / 2]
    } else {
        (lat_ms[n_iters / 2 - 1] + lat_ms[n_iters / 2]) / 2.0
    };
    let p95_ms = lat_ms[((0.95 * n_iters as f64).ceil() as usize).clamp(1, n_iters) - 1];
    Ok(BenchResult { iters: n_iters, elapsed_s, hz: n_iters as f64 / elapsed_s, median_ms, p95_ms })
}

/// One model's point on the error-versus-operations scatter.
#[derive(Clone, Debug)]
pub struct OpsPoint {
    pub label: String,
    pub total_ops: f64,
    pub pos_err_mm: f64,
    pub time_err_ms: f64,
}

/// Everything a report needs. `ops_points` may be empty, in which case the
/// error-versus-operations plot is skipped.
pub struct Report<'a> {
    pub records: &'a [EvalRecord],
    pub pos_bins: &'a [BinStats],
    pub time_bins: &'a [BinStats],
    pub ops_points: &'a [OpsPoint],
}

/// Plot midpoints of the distance bins; the open-ended last bin uses the
/// same half-metre width as its neighbor.
fn bin_center(label: &str) -> f64 {
    match BIN_LABELS.iter().position(|l| *l == label) {
        Some(4) | None => 2.25,
        Some(i) => [0.35, 0.75, 1.25, 1.75][i],
    }
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("id,t_end_us,distance_m,pos_err_mm,time_err_ms\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.id, r.t_end_us, r.distance_m, r.pos_err_mm, r.time_err_ms);
    }
    out
}

pub fn bins_csv(pos: &[BinStats], time: &[BinStats]) -> String {
    let mut out = String::from("range,metric,mean,median,sd,mad,n\n");
    for (table, metric) in [(pos, "pos_err_mm"), (time, "time_err_ms")] {
        for b in table {
            let _ = writeln!(out, "{},{},{},{},{},{},{}", b.range, metric, b.mean, b.median, b.sd, b.mad, b.n);
        }
    }
    out
}

struct Series<'a> {
    name: &'a str,
    points: Vec<(f64, f64)>,
    line: bool,
}

/// Minimal deterministic SVG line/scatter plot; linear axes sized from the
/// data with 5% padding.
fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !(x1 > x0) {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let xpad = 0.05 * (x1 - x0);
    let ypad = 0.05 * (y1 - y0);
    let (x0, x1, y0, y1) = (x0 - xpad, x1 + xpad, y0 - ypad, y1 + ypad);
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>",
        W / 2.0
    );
    // axes
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.1}\" stroke=\"black\"/>", H - M);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{fx:.3}</text>",
            sx(fx),
            H - M + 18.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{fy:.3}</text>",
            M - 6.0,
            sy(fy) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{x_label}</text>",
        W / 2.0,
        H - 14.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>",
        H / 2.0,
        H / 2.0
    );
    for (si, ser) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        if ser.line && ser.points.len() > 1 {
            let pts: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", pts.join(" "));
        }
        for p in &ser.points {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{color}\"/>", sx(p.0), sy(p.1));
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>",
            W - M - 150.0,
            M + 16.0 * (si + 1) as f64,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `records.csv`, `bins.csv`, and (for non-empty inputs) the
/// error-versus-distance and error-versus-operations SVG plots. Re-running
/// on identical inputs produces byte-identical files. Returns the written
/// paths in order.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let records_path = out_dir.join("records.csv");
    write_file(&records_path, &records_csv(report.records))?;
    written.push(records_path);

    let bins_path = out_dir.join("bins.csv");
    write_file(&bins_path, &bins_csv(report.pos_bins, report.time_bins))?;
    written.push(bins_path);

    if !report.pos_bins.is_empty() || !report.time_bins.is_empty() {
        let series = [
            Series {
                name: "position error (mm)",
                points: report.pos_bins.iter().map(|b| (bin_center(&b.range), b.mean as f64)).collect(),
                line: true,
            },
            Series {
                name: "time error (ms)",
                points: report.time_bins.iter().map(|b| (bin_center(&b.range), b.mean as f64)).collect(),
                line: true,
            },
        ];
        let svg = svg_plot("Mean error per distance bin", "distance to collision point (m)", "mean error", &series);
        let path = out_dir.join("error_vs_distance.svg");
        write_file(&path, &svg)?;
        written.push(path);
    }

    if !report.ops_points.is_empty() {
        let series: Vec<Series> = report
            .ops_points
            .iter()
            .map(|p| Series {
                name: p.label.as_str(),
                points: vec![(p.total_ops.max(1.0).log10(), p.pos_err_mm)],
                line: false,
            })
            .collect();
        let svg = svg_plot(
            "Position error versus total operations",
            "log10 total operations",
            "mean position error (mm)",
            &series,
        );
        let path = out_dir.join("error_vs_ops.svg");
        write_file(&path, &svg)?;
        written.push(path);
    }

    Ok(written)
}
