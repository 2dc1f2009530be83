//! Explanation reports: a versioned JSON document plus PNG and SVG figures.
//!
//! Local reports (`explanation.json`) hold one entry per explained sample and,
//! per sample, a channel panel with the top prototypes' receptive fields
//! outlined, one overlay per prototype on its source training image, one
//! location-scaling heatmap per prototype (when the model scales), and a
//! bar chart of every prototype score on a log axis floored at 1e-6.
//!
//! Global reports (`global.json`) render the head matrix as a heatmap and
//! the top-prototype frequencies as bar charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use protogrid_core::data::{DatasetSplit, RasterSample};
use protogrid_core::explain::{prototype_scores, GlobalExplanation, LocalExplanation, PixelBox};
use protogrid_core::model::ProtoNet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "protogrid-explanation/1";
pub const GLOBAL_SCHEMA: &str = "protogrid-global/1";
/// Scores below this are drawn at the floor of the log axis.
pub const SCORE_FLOOR: f64 = 1e-6;

const PIXEL_SCALE: u32 = 4;
const CELL_SCALE: u32 = 32;
const RANK_COLOURS: [[u8; 3]; 6] =
    [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];
const GROUP_COLOURS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Names carried into every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub channel_names: Vec<String>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub schema: String,
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub explanations: Vec<LocalExplanation>,
    /// Image files written alongside, relative to the report.
    pub figures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalReport {
    pub schema: String,
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub global: GlobalExplanation,
    pub figures: Vec<String>,
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(Error::io(out))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Image(other),
    })
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Grayscale rendering of one channel, stretched to its own range.
fn channel_image(sample: &RasterSample, channel: usize) -> RgbImage {
    let values = sample.channel(channel);
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = (sample.height as u32, sample.width as u32);
    RgbImage::from_fn(w * PIXEL_SCALE, h * PIXEL_SCALE, |x, y| {
        let v = values[((y / PIXEL_SCALE) * w + x / PIXEL_SCALE) as usize];
        let g = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([g, g, g])
    })
}

fn outline(img: &mut RgbImage, b: PixelBox, colour: [u8; 3], inset: u32) {
    let s = PIXEL_SCALE;
    let x0 = (b.col0 as u32 * s + inset).min(img.width() - 1);
    let y0 = (b.row0 as u32 * s + inset).min(img.height() - 1);
    let x1 = ((b.col1 as u32 + 1) * s).saturating_sub(1 + inset).clamp(x0, img.width() - 1);
    let y1 = ((b.row1 as u32 + 1) * s).saturating_sub(1 + inset).clamp(y0, img.height() - 1);
    for x in x0..=x1 {
        img.put_pixel(x, y0, Rgb(colour));
        img.put_pixel(x, y1, Rgb(colour));
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, Rgb(colour));
        img.put_pixel(x1, y, Rgb(colour));
    }
}

/// Images placed left to right with a white gutter.
fn hstack(images: &[RgbImage]) -> RgbImage {
    const GAP: u32 = 8;
    let h = images.iter().map(RgbImage::height).max().unwrap_or(1);
    let w = images.iter().map(RgbImage::width).sum::<u32>() + GAP * images.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w.max(1), h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in images {
        image::imageops::replace(&mut out, img, x0 as i64, 0);
        x0 += img.width() + GAP;
    }
    out
}

/// Diverging colour: grey for positive, red for negative, white at zero.
fn diverging(v: f64, limit: f64) -> Rgb<u8> {
    let t = if limit > 0.0 { (v / limit).clamp(-1.0, 1.0) } else { 0.0 };
    let mix = |full: f64, t: f64| (255.0 - (255.0 - full) * t).round() as u8;
    if t >= 0.0 {
        let g = mix(90.0, t);
        Rgb([g, g, g])
    } else {
        let t = -t;
        Rgb([mix(200.0, t), mix(30.0, t), mix(30.0, t)])
    }
}

fn heatmap(values: &[f64], rows: usize, cols: usize, cell_w: u32, cell_h: u32) -> RgbImage {
    let limit = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    RgbImage::from_fn(cols as u32 * cell_w, rows as u32 * cell_h, |x, y| {
        diverging(values[(y / cell_h) as usize * cols + (x / cell_w) as usize], limit)
    })
}

fn channel_label(meta: &ReportMeta, channel: Option<usize>) -> String {
    match channel {
        Some(c) => meta.channel_names.get(c).cloned().unwrap_or_else(|| format!("channel {c}")),
        None => "all channels".into(),
    }
}

fn class_label(meta: &ReportMeta, class: usize) -> String {
    meta.class_names.as_ref().and_then(|n| n.get(class).cloned()).unwrap_or_else(|| class.to_string())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A vertical bar chart. `log` maps values to a log10 axis with the lower
/// end at [`SCORE_FLOOR`].
struct BarChart<'a> {
    title: String,
    values: &'a [f64],
    colours: Vec<&'static str>,
    labels: Vec<String>,
    log: bool,
    y_label: &'a str,
}

impl BarChart<'_> {
    fn render(&self) -> String {
        let (left, right, top, bottom) = (70.0, 20.0, 40.0, 70.0);
        let bar = if self.values.len() > 60 { 6.0 } else { 18.0 };
        let width = left + right + bar * self.values.len().max(1) as f64;
        let height = 320.0;
        let plot_h = height - top - bottom;
        let (lo, hi) = if self.log {
            let max = self.values.iter().fold(SCORE_FLOOR, |m, &v| m.max(v));
            (SCORE_FLOOR.log10(), max.log10().ceil().max(SCORE_FLOOR.log10() + 1.0))
        } else {
            (0.0, self.values.iter().fold(0.0f64, |m, &v| m.max(v)).max(1.0))
        };
        let y_of = |v: f64| {
            let t = if self.log { (v.max(SCORE_FLOOR).log10() - lo) / (hi - lo) } else { v / hi };
            top + plot_h * (1.0 - t.clamp(0.0, 1.0))
        };
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, escape(&self.title));
        let ticks: Vec<f64> = if self.log {
            (lo as i32..=hi as i32).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=4).map(|i| hi * i as f64 / 4.0).collect()
        };
        for t in ticks {
            let y = y_of(t);
            let label = if self.log { format!("1e{}", t.log10().round() as i32) } else { format!("{t:.0}") };
            let _ = writeln!(
                svg,
                r##"<line x1="{left}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
                width - right,
                left - 4.0,
                y + 4.0
            );
        }
        for (i, &v) in self.values.iter().enumerate() {
            let x = left + bar * i as f64;
            let y = y_of(v);
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {v:.6e}</title></rect>"#,
                (bar - 1.0).max(1.0),
                (top + plot_h - y).max(0.0),
                self.colours[i],
                escape(&self.labels[i])
            );
            if self.values.len() <= 60 {
                let _ = writeln!(
                    svg,
                    r#"<text transform="translate({:.1},{:.1}) rotate(60)">{}</text>"#,
                    x + bar / 2.0,
                    top + plot_h + 10.0,
                    escape(&self.labels[i])
                );
            }
        }
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" x2="{left}" y1="{top}" y2="{:.1}" stroke="#333"/><line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#333"/>"##,
            top + plot_h,
            width - right,
            top + plot_h,
            top + plot_h
        );
        let _ = writeln!(
            svg,
            r#"<text transform="translate(14,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            top + plot_h / 2.0,
            escape(self.y_label)
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn prototype_label(net: &ProtoNet<f32>, meta: &ReportMeta, a: usize) -> String {
    let id = net.bank.identity(a);
    format!("p{a} {} class {}", channel_label(meta, net.group_channel(id.group)), class_label(meta, id.class))
}

fn find(data: &DatasetSplit, id: u64) -> Result<&RasterSample> {
    data.find(id).ok_or_else(|| Error::Usage(format!("sample {id} is not in the dataset")))
}

/// Panels of the sample's channels; the k-th entry's receptive field is
/// outlined on its channel (every channel for a joint bank).
fn sample_panel(sample: &RasterSample, e: &LocalExplanation) -> RgbImage {
    let mut panels: Vec<RgbImage> = (0..sample.channels).map(|c| channel_image(sample, c)).collect();
    for (rank, entry) in e.entries.iter().enumerate() {
        let colour = RANK_COLOURS[rank % RANK_COLOURS.len()];
        let inset = (rank as u32).min(3);
        match entry.channel {
            Some(c) => outline(&mut panels[c], entry.receptive_field, colour, inset),
            None => panels.iter_mut().for_each(|p| outline(p, entry.receptive_field, colour, inset)),
        }
    }
    hstack(&panels)
}

/// Writes `explanation.json` and the figures for every explanation.
/// Returns the paths written, the report first.
pub fn render_local_reports(
    net: &ProtoNet<f32>,
    data: &DatasetSplit,
    explanations: &[LocalExplanation],
    meta: &ReportMeta,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut figures = Vec::new();
    for e in explanations {
        let sample = find(data, e.sample_id)?;
        let stem = format!("sample{}", e.sample_id);
        let path = out.join(format!("{stem}_channels.png"));
        save_png(&sample_panel(sample, e), &path)?;
        figures.push(path);

        for (rank, entry) in e.entries.iter().enumerate() {
            if let (Some(src), Some(field)) = (entry.source, entry.source_field) {
                let source = find(data, src.sample_id)?;
                let colour = RANK_COLOURS[rank % RANK_COLOURS.len()];
                let img = match entry.channel {
                    Some(c) => {
                        let mut img = channel_image(source, c);
                        outline(&mut img, field, colour, 0);
                        img
                    }
                    None => {
                        let mut panels: Vec<RgbImage> = (0..source.channels).map(|c| channel_image(source, c)).collect();
                        panels.iter_mut().for_each(|p| outline(p, field, colour, 0));
                        hstack(&panels)
                    }
                };
                let path = out.join(format!("{stem}_rank{}_source.png", rank + 1));
                save_png(&img, &path)?;
                figures.push(path);
            }
            if let Some(scaling) = &entry.scaling {
                let path = out.join(format!("{stem}_rank{}_scaling.png", rank + 1));
                save_png(&heatmap(scaling, e.grid.0, e.grid.1, CELL_SCALE, CELL_SCALE), &path)?;
                figures.push(path);
            }
        }

        let scores = prototype_scores(net, sample, e.predicted)?;
        let chart = BarChart {
            title: format!(
                "sample {} scores for class {} ({})",
                e.sample_id,
                class_label(meta, e.predicted),
                if e.unprojected { "unprojected" } else { "projected" }
            ),
            values: &scores.scores,
            colours: (0..scores.scores.len())
                .map(|a| GROUP_COLOURS[net.bank.identity(a).group % GROUP_COLOURS.len()])
                .collect(),
            labels: (0..scores.scores.len()).map(|a| prototype_label(net, meta, a)).collect(),
            log: true,
            y_label: "prototype score",
        };
        let path = out.join(format!("{stem}_scores.svg"));
        write_text(&path, &chart.render())?;
        figures.push(path);
    }
    let report = LocalReport {
        schema: SCHEMA.into(),
        meta: meta.clone(),
        explanations: explanations.to_vec(),
        figures: figures.iter().map(|p| file_name(p)).collect(),
    };
    let path = out.join("explanation.json");
    write_text(&path, &(serde_json::to_string_pretty(&report).expect("report serialises") + "\n"))?;
    figures.insert(0, path);
    Ok(figures)
}

/// Writes `global.json`, the head-matrix heatmap and the frequency charts.
pub fn render_global_report(
    net: &ProtoNet<f32>,
    global: &GlobalExplanation,
    meta: &ReportMeta,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut figures = Vec::new();
    let w = &global.weights.weights;
    let (rows, cols) = (w.len(), w.first().map_or(0, Vec::len));
    if rows > 0 && cols > 0 {
        let flat: Vec<f64> = w.iter().flatten().copied().collect();
        let path = out.join("weights.png");
        save_png(&heatmap(&flat, rows, cols, 24, 4), &path)?;
        figures.push(path);
    }

    let f = &global.frequency;
    let group_values: Vec<f64> = f.groups.iter().map(|&c| c as f64).collect();
    let chart = BarChart {
        title: format!("top-scoring prototype channel over {} correct samples", f.considered),
        values: &group_values,
        colours: (0..f.groups.len()).map(|g| GROUP_COLOURS[g % GROUP_COLOURS.len()]).collect(),
        labels: (0..f.groups.len()).map(|g| channel_label(meta, net.group_channel(g))).collect(),
        log: false,
        y_label: "count",
    };
    let path = out.join("frequency_channels.svg");
    write_text(&path, &chart.render())?;
    figures.push(path);

    let top: Vec<(usize, usize)> = f.prototypes.iter().take(30).copied().collect();
    let values: Vec<f64> = top.iter().map(|&(_, c)| c as f64).collect();
    let chart = BarChart {
        title: "most frequent top-scoring prototypes".into(),
        values: &values,
        colours: top.iter().map(|&(a, _)| GROUP_COLOURS[net.bank.identity(a).group % GROUP_COLOURS.len()]).collect(),
        labels: top.iter().map(|&(a, _)| prototype_label(net, meta, a)).collect(),
        log: false,
        y_label: "count",
    };
    let path = out.join("frequency_prototypes.svg");
    write_text(&path, &chart.render())?;
    figures.push(path);

    let report = GlobalReport {
        schema: GLOBAL_SCHEMA.into(),
        meta: meta.clone(),
        global: global.clone(),
        figures: figures.iter().map(|p| file_name(p)).collect(),
    };
    let path = out.join("global.json");
    write_text(&path, &(serde_json::to_string_pretty(&report).expect("report serialises") + "\n"))?;
    figures.insert(0, path);
    Ok(figures)
}
