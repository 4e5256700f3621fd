//! Cross-run comparison: final eval table, eval-length reductions and SVG curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

use capcur_core::audit::percent_reduction;

use crate::commands::Ctx;
use crate::ReportArgs;

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub label: String,
    pub steps: Vec<f64>,
    pub reward: Vec<f64>,
    /// `(step, eval_len)` at evaluation rows.
    pub eval_len: Vec<(f64, f64)>,
    /// Last evaluation: perception, text, visual accuracy and mean length.
    pub final_eval: Option<[f64; 4]>,
}

impl RunMetrics {
    pub fn final_mean_accuracy(&self) -> Option<f64> {
        self.final_eval.map(|e| (e[0] + e[1] + e[2]) / 3.0)
    }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .with_context(|| format!("{}: missing column `{name}`", path.display()))
}

pub fn read_metrics(label: &str, path: &Path) -> Result<RunMetrics> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let idx = |n: &str| column(&headers, n, path);
    let (step, reward) = (idx("step")?, idx("mean_reward")?);
    let evals = [idx("eval_perc")?, idx("eval_text")?, idx("eval_vis")?, idx("eval_len")?];
    let mut m = RunMetrics {
        label: label.to_string(),
        ..RunMetrics::default()
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let num = |k: usize| -> Result<Option<f64>> {
            let s = rec.get(k).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .with_context(|| format!("{}: row {}: `{s}` is not a number", path.display(), i + 1))
        };
        // metrics rows record the step index before the update; plot after it
        let s = num(step)?.context("empty step")? + 1.0;
        m.steps.push(s);
        m.reward.push(num(reward)?.unwrap_or(f64::NAN));
        let e = [num(evals[0])?, num(evals[1])?, num(evals[2])?, num(evals[3])?];
        if let [Some(a), Some(b), Some(c), Some(l)] = e {
            m.eval_len.push((s, l));
            m.final_eval = Some([a, b, c, l]);
        }
    }
    if m.steps.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok(m)
}

/// Final-eval table with each run's eval-length reduction against `reference`.
pub fn summary_csv(runs: &[RunMetrics], reference: &str) -> Result<String> {
    let base = runs
        .iter()
        .find(|r| r.label == reference)
        .with_context(|| format!("reference run `{reference}` not among --run labels"))?;
    let base_len = base.final_eval.map(|e| e[3]);
    let mut s = String::from(
        "label,steps,eval_perc,eval_text,eval_vis,eval_mean,eval_len,len_reduction_vs_reference_pct\n",
    );
    for r in runs {
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let e = r.final_eval;
        let red = match (base_len, e) {
            (Some(b), Some(e)) => Some(percent_reduction(b, e[3])),
            _ => None,
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.label,
            r.steps.len(),
            f(e.map(|e| e[0])),
            f(e.map(|e| e[1])),
            f(e.map(|e| e[2])),
            f(r.final_mean_accuracy()),
            f(e.map(|e| e[3])),
            f(red)
        )
        .expect("string write");
    }
    Ok(s)
}

fn bounds(series: &[Vec<(f64, f64)>]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    (x0, x1.max(x0 + 1.0), y0 - pad, y1 + pad)
}

/// Line chart of one series per run.
pub fn plot(path: &Path, title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let data: Vec<Vec<(f64, f64)>> = series.iter().map(|(_, s)| s.clone()).collect();
    let (x0, x1, y0, y1) = bounds(&data);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    let draw = || -> Result<(), Box<dyn std::error::Error + '_>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc("step").y_desc(y_label).draw()?;
        for (i, (label, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))?
                .label(label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| anyhow::anyhow!("plotting {}: {e}", path.display()))
}

/// Trailing moving average; keeps curves of noisy per-step rewards readable.
fn smooth(xs: &[f64], ys: &[f64], window: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(ys.len());
    let mut sum = 0.0;
    for i in 0..ys.len() {
        sum += ys[i];
        if i >= window {
            sum -= ys[i - window];
        }
        out.push((xs[i], sum / (i + 1).min(window) as f64));
    }
    out
}

pub fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let runs: Vec<RunMetrics> = a
        .runs
        .iter()
        .map(|(label, dir)| read_metrics(label, &dir.join("metrics.csv")))
        .collect::<Result<_>>()?;
    let reference = a.reference.clone().unwrap_or_else(|| runs[0].label.clone());
    let csv = summary_csv(&runs, &reference)?;
    let out: PathBuf = ctx.write(Path::new(&format!("{}.csv", a.prefix)), &csv)?;
    let reward: Vec<(String, Vec<(f64, f64)>)> =
        runs.iter().map(|r| (r.label.clone(), smooth(&r.steps, &r.reward, 20))).collect();
    let lengths: Vec<(String, Vec<(f64, f64)>)> = runs.iter().map(|r| (r.label.clone(), r.eval_len.clone())).collect();
    plot(&ctx.out(Path::new(&format!("{}_reward.svg", a.prefix)))?, "training reward (20-step mean)", "reward", &reward)?;
    plot(&ctx.out(Path::new(&format!("{}_length.svg", a.prefix)))?, "mean eval response length", "tokens", &lengths)?;
    println!("{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}", "run", "perc", "text", "vis", "mean", "len", "len_red%");
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let cell = |i: usize| f.get(i).and_then(|s| s.parse::<f64>().ok());
        let fmt = |x: Option<f64>, p: usize| x.map(|v| format!("{v:.p$}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
            f[0],
            fmt(cell(2), 4),
            fmt(cell(3), 4),
            fmt(cell(4), 4),
            fmt(cell(5), 4),
            fmt(cell(6), 3),
            fmt(cell(7), 2)
        );
    }
    println!("report: wrote {}", out.display());
    Ok(())
}
