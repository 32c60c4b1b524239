use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{Dump, EvalReport};
use crate::baselines::Method;
use crate::metrics::auroc;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    /// Histogram of LI (or the first method present) by answerability.
    Distribution,
    /// Mean `I_ℓ` per layer by answerability.
    PerLayer,
    /// Mean cumulative LI per layer by answerability.
    Cumulative,
    /// AUROC per method and template.
    BarAuroc,
}

impl FigureKind {
    pub const ALL: [FigureKind; 4] =
        [FigureKind::Distribution, FigureKind::PerLayer, FigureKind::Cumulative, FigureKind::BarAuroc];

    pub fn as_str(self) -> &'static str {
        match self {
            FigureKind::Distribution => "distribution",
            FigureKind::PerLayer => "per_layer",
            FigureKind::Cumulative => "cumulative",
            FigureKind::BarAuroc => "bar_auroc",
        }
    }
}

impl fmt::Display for FigureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FigureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown figure kind {s:?}")))
    }
}

const ANSWERABLE: &str = "answerable";
const UNANSWERABLE: &str = "unanswerable";

fn group(answerable: bool) -> &'static str {
    if answerable {
        ANSWERABLE
    } else {
        UNANSWERABLE
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn plot_error<E: std::fmt::Debug>(e: E) -> Error {
    Error::Figure(format!("{e:?}"))
}

/// Writes one SVG and one CSV per requested kind (per template where the
/// kind is per template) and returns every path written.
pub fn emit_figures(report: &EvalReport, kinds: &[FigureKind], dir: &Path) -> Result<Vec<PathBuf>> {
    emit_figures_from_dump(&report.dump(), kinds, dir)
}

/// As [`emit_figures`], from the per-example tables alone.
pub fn emit_figures_from_dump(dump: &Dump, kinds: &[FigureKind], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &kind in kinds {
        match kind {
            FigureKind::Distribution => {
                let method = if dump.methods().contains(&Method::Li) {
                    Method::Li
                } else {
                    *dump.methods().first().ok_or_else(|| Error::Figure("distribution: no scores".into()))?
                };
                for t in dump.templates() {
                    let set = dump.scored_set(&t, method);
                    if set.is_empty() {
                        continue;
                    }
                    written.extend(distribution(&set.pairs, method, &t, dir)?);
                }
            }
            FigureKind::PerLayer | FigureKind::Cumulative => {
                if dump.profiles.is_empty() {
                    return Err(Error::Figure(format!("{kind}: report has no per-layer profiles")));
                }
                for t in dump.templates() {
                    written.extend(layer_curve(dump, &t, kind, dir)?);
                }
            }
            FigureKind::BarAuroc => written.extend(bar_auroc(dump, dir)?),
        }
    }
    if written.is_empty() {
        return Err(Error::Figure("no data for the requested figures".into()));
    }
    Ok(written)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Figure(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    fs::write(path, w.into_inner().map_err(|e| Error::Figure(e.to_string()))?)?;
    Ok(())
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

fn distribution(pairs: &[(String, f64, bool)], method: Method, template: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let stem = format!("distribution_{}", slug(template));
    let csv_path = dir.join(format!("{stem}.csv"));
    let rows: Vec<Vec<String>> =
        pairs.iter().map(|(id, v, a)| vec![group(*a).to_string(), id.clone(), v.to_string()]).collect();
    write_csv(&csv_path, &["series", "example_id", "value"], &rows)?;

    let bins = 20usize;
    let (lo, hi) = padded_range(pairs.iter().map(|p| p.1));
    let width = (hi - lo) / bins as f64;
    let mut counts: BTreeMap<bool, Vec<usize>> = BTreeMap::new();
    for (_, v, a) in pairs {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts.entry(*a).or_insert_with(|| vec![0; bins])[b] += 1;
    }
    let top = counts.values().flatten().copied().max().unwrap_or(1) as f64;

    let svg_path = dir.join(format!("{stem}.svg"));
    {
        let root = SVGBackend::new(&svg_path, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{method} distribution ({template})"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(lo..hi, 0.0..top * 1.1)
            .map_err(plot_error)?;
        chart.configure_mesh().x_desc(method.as_str()).y_desc("count").draw().map_err(plot_error)?;
        for (answerable, color) in [(true, BLUE), (false, RED)] {
            let Some(c) = counts.get(&answerable) else { continue };
            chart
                .draw_series(c.iter().enumerate().filter(|(_, &n)| n > 0).map(|(i, &n)| {
                    let x0 = lo + i as f64 * width;
                    Rectangle::new([(x0, 0.0), (x0 + width, n as f64)], color.mix(0.45).filled())
                }))
                .map_err(plot_error)?
                .label(group(answerable))
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.mix(0.45).filled()));
        }
        chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    Ok(vec![svg_path, csv_path])
}

/// `(layer, group) -> (sum, count)` of per-layer or cumulative values.
fn layer_means(dump: &Dump, template: &str, kind: FigureKind) -> BTreeMap<(usize, bool), (f64, usize)> {
    let mut acc: BTreeMap<(usize, bool), (f64, usize)> = BTreeMap::new();
    for r in dump.profiles.iter().filter(|r| r.template_id == template) {
        let v = if kind == FigureKind::PerLayer { r.i_layer } else { r.cumulative };
        let e = acc.entry((r.layer, r.answerable)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc
}

fn layer_curve(dump: &Dump, template: &str, kind: FigureKind, dir: &Path) -> Result<Vec<PathBuf>> {
    let means = layer_means(dump, template, kind);
    if means.is_empty() {
        return Ok(Vec::new());
    }
    let stem = format!("{kind}_{}", slug(template));
    let value_name = if kind == FigureKind::PerLayer { "mean_i_layer" } else { "mean_cumulative" };
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut rows = Vec::new();
    for answerable in [true, false] {
        for (&(layer, a), &(sum, n)) in means.iter().filter(|((_, a), _)| *a == answerable) {
            rows.push(vec![layer.to_string(), group(a).to_string(), (sum / n as f64).to_string(), n.to_string()]);
        }
    }
    write_csv(&csv_path, &["layer", "series", value_name, "count"], &rows)?;

    let series = |answerable: bool| -> Vec<(f64, f64)> {
        means
            .iter()
            .filter(|((_, a), _)| *a == answerable)
            .map(|(&(layer, _), &(sum, n))| (layer as f64, sum / n as f64))
            .collect()
    };
    let max_layer = means.keys().map(|k| k.0).max().unwrap_or(1) as f64;
    let (lo, hi) = padded_range(means.values().map(|(s, n)| s / *n as f64).chain(std::iter::once(0.0)));

    let svg_path = dir.join(format!("{stem}.svg"));
    {
        let root = SVGBackend::new(&svg_path, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let title = if kind == FigureKind::PerLayer { "usable information per layer" } else { "cumulative LI" };
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{title} ({template})"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(0.5..max_layer + 0.5, lo..hi)
            .map_err(plot_error)?;
        chart.configure_mesh().x_desc("layer").y_desc("bits/token").draw().map_err(plot_error)?;
        for (answerable, color) in [(true, BLUE), (false, RED)] {
            let points = series(answerable);
            if points.is_empty() {
                continue;
            }
            chart
                .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
                .map_err(plot_error)?
                .label(group(answerable))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], color.stroke_width(2)));
            chart.draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(plot_error)?;
        }
        chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    Ok(vec![svg_path, csv_path])
}

fn bar_auroc(dump: &Dump, dir: &Path) -> Result<Vec<PathBuf>> {
    let templates = dump.templates();
    let methods = dump.methods();
    let mut bars: Vec<(String, Method, Option<f64>)> = Vec::new();
    for t in &templates {
        for &m in &methods {
            let set = dump.scored_set(t, m);
            if !set.is_empty() {
                bars.push((t.clone(), m, auroc(&set).ok()));
            }
        }
    }
    if bars.is_empty() {
        return Err(Error::Figure("bar_auroc: no scores".into()));
    }
    let csv_path = dir.join("bar_auroc.csv");
    let rows: Vec<Vec<String>> = bars
        .iter()
        .map(|(t, m, a)| vec![t.clone(), m.to_string(), a.map(|v| v.to_string()).unwrap_or_default()])
        .collect();
    write_csv(&csv_path, &["template_id", "method", "auroc"], &rows)?;

    let svg_path = dir.join("bar_auroc.svg");
    {
        let root = SVGBackend::new(&svg_path, (160 + 90 * bars.len() as u32, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let labels: Vec<String> = bars.iter().map(|(t, m, _)| format!("{m}/{t}")).collect();
        let mut chart = ChartBuilder::on(&root)
            .caption("AUROC", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(60)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..bars.len() as f64, 0.0..1.0)
            .map_err(plot_error)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(bars.len() + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - x.floor() - 0.5).abs() < 1e-9 || x.fract() == 0.0 {
                    labels.get(i).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("AUROC")
            .draw()
            .map_err(plot_error)?;
        let palette = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];
        chart
            .draw_series(bars.iter().enumerate().filter_map(|(i, (t, _, a))| {
                let color = palette[templates.iter().position(|x| x == t).unwrap_or(0) % palette.len()];
                a.map(|v| Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v)], color.mix(0.6).filled()))
            }))
            .map_err(plot_error)?;
        chart
            .draw_series(LineSeries::new(vec![(0.0, 0.5), (bars.len() as f64, 0.5)], BLACK.mix(0.5)))
            .map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    Ok(vec![svg_path, csv_path])
}
