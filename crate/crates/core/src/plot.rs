//! PNG plots rendered without a plotting dependency: loss curves,
//! per-group error bars, and a binned yaw/pitch error heatmap. The chart
//! kind is chosen by the CSV header, so files written by the trainer and
//! evaluator plot without extra flags.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::train::{EVAL_CSV_HEADER, PRED_CSV_HEADER};

const LOSS_HEADER: &str = LossReport::CSV_HEADER;

/// 5x7 bitmap glyphs; each row uses the low 5 bits, bit 4 leftmost.
const GLYPH_CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789.-+_/:% ";
#[rustfmt::skip]
const GLYPHS: [[u8; 7]; 44] = [
    [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F], // a
    [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E], // b
    [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E], // c
    [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F], // d
    [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E], // e
    [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08], // f
    [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E], // g
    [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11], // h
    [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E], // i
    [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C], // j
    [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12], // k
    [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // l
    [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11], // m
    [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11], // n
    [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E], // o
    [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10], // p
    [0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01], // q
    [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10], // r
    [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E], // s
    [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06], // t
    [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D], // u
    [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04], // v
    [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A], // w
    [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11], // x
    [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E], // y
    [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F], // z
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C], // .
    [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00], // -
    [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00], // +
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F], // _
    [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10], // /
    [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00], // :
    [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03], // %
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], // space
];

fn glyph(c: char) -> [u8; 7] {
    let c = c.to_ascii_lowercase();
    match GLYPH_CHARS.find(c) {
        Some(i) => GLYPHS[i],
        // Hollow box marks characters outside the charset.
        None => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

pub type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const BLACK: Rgb = [20, 20, 20];
const GRID: Rgb = [225, 225, 225];
const SERIES: [(Rgb, &str); 4] = [
    ([20, 20, 20], "total"),
    ([214, 69, 65], "l1"),
    ([31, 119, 180], "ang"),
    ([44, 160, 44], "sep"),
];
const BAR: Rgb = [70, 130, 180];
const EMPTY_BIN: Rgb = [200, 200, 200];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Canvas {
        Canvas {
            w,
            h,
            px: WHITE.iter().cycle().take(w * h * 3).copied().collect(),
        }
    }

    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x as usize >= self.w || y as usize >= self.h {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        let mut cx = x;
        for ch in s.chars() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.set(cx + col as i64, y + row as i64, c);
                    }
                }
            }
            cx += 6;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.px.clone())
            .expect("buffer sized w*h*3");
        img.save(path)
            .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
    }
}

fn text_width(s: &str) -> i64 {
    s.chars().count() as i64 * 6
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (0.01..10000.0).contains(&a) {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

/// Parsed CSV: header fields and raw data rows.
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_csv(text: &str) -> Result<Csv> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != header.len() {
            return Err(Error::Record {
                record: i,
                message: format!("{} fields, header has {}", fields.len(), header.len()),
            });
        }
        rows.push(fields);
    }
    Ok(Csv { header, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Loss,
    Groups,
    Heatmap,
}

/// Chart kind by header; the error lists every accepted schema.
pub fn detect_kind(header: &[String]) -> Result<PlotKind> {
    let joined = header.join(",");
    match joined.as_str() {
        h if h == LOSS_HEADER => Ok(PlotKind::Loss),
        h if h == EVAL_CSV_HEADER => Ok(PlotKind::Groups),
        h if h == PRED_CSV_HEADER => Ok(PlotKind::Heatmap),
        other => Err(Error::invalid(format!(
            "unrecognized csv header {other:?}; expected one of \
             {LOSS_HEADER:?} (loss curves), {EVAL_CSV_HEADER:?} (group bars), \
             {PRED_CSV_HEADER:?} (error heatmap)"
        ))),
    }
}

fn parse_f64(rows_idx: usize, field: &str, name: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Record {
        record: rows_idx,
        message: format!("{name} field {field:?} is not a number"),
    })
}

/// Mean of `value` per cell over an nx-by-ny grid covering the given
/// ranges; None where a cell received no points. Points on the top edge
/// of a range land in the final bin.
pub fn binned_mean(
    points: &[(f64, f64, f64)],
    nx: usize,
    ny: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Vec<Vec<Option<f64>>> {
    let mut sums = vec![vec![0.0f64; nx]; ny];
    let mut counts = vec![vec![0usize; nx]; ny];
    let bin = |v: f64, (lo, hi): (f64, f64), n: usize| -> usize {
        if hi <= lo {
            return 0;
        }
        (((v - lo) / (hi - lo) * n as f64).floor() as i64).clamp(0, n as i64 - 1) as usize
    };
    for &(x, y, value) in points {
        let bx = bin(x, x_range, nx);
        let by = bin(y, y_range, ny);
        sums[by][bx] += value;
        counts[by][bx] += 1;
    }
    (0..ny)
        .map(|by| {
            (0..nx)
                .map(|bx| {
                    if counts[by][bx] > 0 {
                        Some(sums[by][bx] / counts[by][bx] as f64)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect()
}

fn viridis(t: f64) -> Rgb {
    const STOPS: [Rgb; 5] = [
        [68, 1, 84],
        [59, 82, 139],
        [33, 145, 140],
        [94, 201, 98],
        [253, 231, 37],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mix = |a: u8, b: u8| (a as f64 + f * (b as f64 - a as f64)).round() as u8;
    [
        mix(STOPS[i][0], STOPS[i + 1][0]),
        mix(STOPS[i][1], STOPS[i + 1][1]),
        mix(STOPS[i][2], STOPS[i + 1][2]),
    ]
}

struct Frame {
    left: i64,
    top: i64,
    right: i64,
    bottom: i64,
}

impl Frame {
    fn px(&self, t: f64) -> i64 {
        self.left + (t * (self.right - self.left) as f64).round() as i64
    }

    fn py(&self, t: f64) -> i64 {
        self.bottom - (t * (self.bottom - self.top) as f64).round() as i64
    }
}

fn draw_axes(c: &mut Canvas, fr: &Frame, y_lo: f64, y_hi: f64) {
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let y = fr.py(t);
        c.line(fr.left, y, fr.right, y, GRID);
        let v = y_lo + t * (y_hi - y_lo);
        let label = format_tick(v);
        c.text(fr.left - text_width(&label) - 4, y - 3, &label, BLACK);
    }
    c.line(fr.left, fr.top, fr.left, fr.bottom, BLACK);
    c.line(fr.left, fr.bottom, fr.right, fr.bottom, BLACK);
}

fn plot_loss(csv: &Csv, out: &Path) -> Result<()> {
    let mut steps = Vec::new();
    let mut series: [Vec<f64>; 4] = Default::default();
    for (i, row) in csv.rows.iter().enumerate() {
        steps.push(parse_f64(i, &row[0], "step")?);
        for (s, slot) in series.iter_mut().enumerate() {
            slot.push(parse_f64(i, &row[s + 1], csv.header[s + 1].as_str())?);
        }
    }
    let y_hi = series
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        .max(1e-12);
    let (x_lo, x_hi) = (steps[0], *steps.last().unwrap());
    let mut c = Canvas::new(720, 420);
    let fr = Frame {
        left: 70,
        top: 30,
        right: 700,
        bottom: 380,
    };
    draw_axes(&mut c, &fr, 0.0, y_hi * 1.05);
    c.text(fr.left, 396, "step", BLACK);
    c.text(8, 10, "loss", BLACK);
    let span = (x_hi - x_lo).max(1.0);
    for (s, (color, name)) in SERIES.iter().enumerate() {
        let pts: Vec<(i64, i64)> = steps
            .iter()
            .zip(&series[s])
            .map(|(&x, &y)| {
                (
                    fr.px((x - x_lo) / span),
                    fr.py((y / (y_hi * 1.05)).clamp(0.0, 1.0)),
                )
            })
            .collect();
        for w in pts.windows(2) {
            c.line(w[0].0, w[0].1, w[1].0, w[1].1, *color);
        }
        if pts.len() == 1 {
            c.fill_rect(
                pts[0].0 - 1,
                pts[0].1 - 1,
                pts[0].0 + 1,
                pts[0].1 + 1,
                *color,
            );
        }
        let lx = fr.left + 10 + s as i64 * 90;
        c.fill_rect(lx, 14, lx + 10, 18, *color);
        c.text(lx + 14, 10, name, BLACK);
    }
    c.save(out)
}

struct GroupRow {
    group: String,
    mean: Option<f64>,
    std: Option<f64>,
}

fn plot_groups(csv: &Csv, out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for (i, row) in csv.rows.iter().enumerate() {
        let opt = |field: &str, name: &str| -> Result<Option<f64>> {
            if field.is_empty() {
                Ok(None)
            } else {
                parse_f64(i, field, name).map(Some)
            }
        };
        rows.push(GroupRow {
            group: row[0].clone(),
            mean: opt(&row[2], "mean_deg")?,
            std: opt(&row[3], "std_deg")?,
        });
    }
    let y_hi = rows
        .iter()
        .filter_map(|r| Some(r.mean? + r.std.unwrap_or(0.0)))
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.1;
    let mut c = Canvas::new(720, 420);
    let fr = Frame {
        left: 70,
        top: 30,
        right: 700,
        bottom: 360,
    };
    draw_axes(&mut c, &fr, 0.0, y_hi);
    c.text(8, 10, "mean error / deg", BLACK);
    let n = rows.len().max(1) as i64;
    let slot = (fr.right - fr.left) / n;
    for (i, r) in rows.iter().enumerate() {
        let x0 = fr.left + i as i64 * slot + slot / 6;
        let x1 = fr.left + (i as i64 + 1) * slot - slot / 6;
        if let Some(mean) = r.mean {
            let y = fr.py((mean / y_hi).clamp(0.0, 1.0));
            c.fill_rect(x0, y, x1, fr.bottom - 1, BAR);
            if let Some(std) = r.std {
                let xm = (x0 + x1) / 2;
                let y_up = fr.py(((mean + std) / y_hi).clamp(0.0, 1.0));
                let y_dn = fr.py(((mean - std).max(0.0) / y_hi).clamp(0.0, 1.0));
                c.line(xm, y_up, xm, y_dn, BLACK);
                c.line(xm - 3, y_up, xm + 3, y_up, BLACK);
                c.line(xm - 3, y_dn, xm + 3, y_dn, BLACK);
            }
            let label = format_tick(mean);
            c.text(
                (x0 + x1) / 2 - text_width(&label) / 2,
                y - 10,
                &label,
                BLACK,
            );
        } else {
            c.text((x0 + x1) / 2 - 12, fr.bottom - 12, "n/a", BLACK);
        }
        let max_chars = ((x1 - x0 + slot / 3) / 6).max(1) as usize;
        let name: String = r.group.chars().take(max_chars).collect();
        c.text(
            (x0 + x1) / 2 - text_width(&name) / 2,
            fr.bottom + 8,
            &name,
            BLACK,
        );
    }
    c.save(out)
}

pub const HEATMAP_BINS: usize = 8;

fn plot_heatmap(csv: &Csv, out: &Path) -> Result<()> {
    let mut pts = Vec::new();
    for (i, row) in csv.rows.iter().enumerate() {
        pts.push((
            parse_f64(i, &row[0], "yaw")?,
            parse_f64(i, &row[1], "pitch")?,
            parse_f64(i, &row[2], "err_deg")?,
        ));
    }
    let xr = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let yr = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let grid = binned_mean(&pts, HEATMAP_BINS, HEATMAP_BINS, xr, yr);
    let flat: Vec<f64> = grid.iter().flatten().filter_map(|v| *v).collect();
    let v_lo = flat.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let v_hi = flat.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let denom = (v_hi - v_lo).max(1e-12);

    let cell: i64 = 40;
    let (left, top) = (70i64, 30i64);
    let gw = cell * HEATMAP_BINS as i64;
    let mut c = Canvas::new((left + gw + 110) as usize, (top + gw + 60) as usize);
    for (by, row) in grid.iter().enumerate() {
        for (bx, v) in row.iter().enumerate() {
            let x0 = left + bx as i64 * cell;
            // Row 0 is the lowest pitch; draw it at the bottom.
            let y0 = top + (HEATMAP_BINS - 1 - by) as i64 * cell;
            let color = match v {
                Some(v) => viridis((v - v_lo) / denom),
                None => EMPTY_BIN,
            };
            c.fill_rect(x0, y0, x0 + cell - 1, y0 + cell - 1, color);
        }
    }
    for k in 0..=2 {
        let t = k as f64 / 2.0;
        let xv = xr.0 + t * (xr.1 - xr.0);
        let yv = yr.0 + t * (yr.1 - yr.0);
        let xl = format_tick(xv);
        c.text(
            left + (t * gw as f64) as i64 - text_width(&xl) / 2,
            top + gw + 6,
            &xl,
            BLACK,
        );
        let yl = format_tick(yv);
        c.text(
            left - text_width(&yl) - 6,
            top + ((1.0 - t) * gw as f64) as i64 - 3,
            &yl,
            BLACK,
        );
    }
    c.text(left + gw / 2 - 9, top + gw + 24, "yaw", BLACK);
    c.text(8, 10, "pitch", BLACK);
    let bar_x = left + gw + 24;
    for i in 0..gw {
        let t = 1.0 - i as f64 / (gw - 1) as f64;
        let color = viridis(t);
        for dx in 0..14 {
            c.set(bar_x + dx, top + i, color);
        }
    }
    c.text(bar_x + 18, top - 3, &format_tick(v_hi), BLACK);
    c.text(bar_x + 18, top + gw - 4, &format_tick(v_lo), BLACK);
    c.text(bar_x, top + gw + 6, "deg", BLACK);
    c.save(out)
}

/// Run id for output naming: the file stem minus a known role suffix.
pub fn run_id_of(csv_path: &Path) -> String {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plot".to_string());
    for suffix in ["_metrics", "_preds", "_eval", "_groups"] {
        if let Some(base) = stem.strip_suffix(suffix) {
            if !base.is_empty() {
                return base.to_string();
            }
        }
    }
    stem
}

/// Plot a CSV into `out_dir` (default: alongside the input). Returns the
/// written path. Empty data is an error and writes nothing.
pub fn plot_csv(csv_path: impl AsRef<Path>, out_dir: Option<&Path>) -> Result<PathBuf> {
    let csv_path = csv_path.as_ref();
    let text =
        fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let csv = parse_csv(&text)?;
    let kind = detect_kind(&csv.header)?;
    if csv.rows.is_empty() {
        return Err(Error::invalid(format!(
            "{} has no data rows; nothing to plot",
            csv_path.display()
        )));
    }
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| csv_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let run_id = run_id_of(csv_path);
    type Render = fn(&Csv, &Path) -> Result<()>;
    let (name, render): (&str, Render) = match kind {
        PlotKind::Loss => ("loss", plot_loss),
        PlotKind::Groups => ("groups", plot_groups),
        PlotKind::Heatmap => ("heatmap", plot_heatmap),
    };
    let out = dir.join(format!("{run_id}_{name}.png"));
    render(&csv, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("lisa-plot-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn png_dims(path: &Path) -> (u32, u32) {
        let img = image::open(path).unwrap();
        (img.width(), img.height())
    }

    #[test]
    fn binned_mean_matches_hand_computation() {
        let pts = [
            (0.0, 0.0, 2.0),
            (0.4, 0.0, 4.0),  // same cell as the first point in a 2x2 grid
            (1.0, 0.0, 10.0), // top edge of x lands in the last bin
            (0.0, 1.0, 6.0),
        ];
        let grid = binned_mean(&pts, 2, 2, (0.0, 1.0), (0.0, 1.0));
        assert_eq!(grid[0][0], Some(3.0));
        assert_eq!(grid[0][1], Some(10.0));
        assert_eq!(grid[1][0], Some(6.0));
        assert_eq!(grid[1][1], None);
    }

    #[test]
    fn binned_mean_handles_degenerate_range() {
        let pts = [(5.0, 5.0, 1.0), (5.0, 5.0, 3.0)];
        let grid = binned_mean(&pts, 4, 4, (5.0, 5.0), (5.0, 5.0));
        assert_eq!(grid[0][0], Some(2.0));
        assert!(grid[3][3].is_none());
    }

    #[test]
    fn loss_csv_renders_deterministic_png() {
        let dir = tmp("loss");
        let csv = dir.join("demo_metrics.csv");
        let mut text = String::from("step,total,l1,ang,sep\n");
        for s in 0..20 {
            let v = 1.0 / (s as f64 + 1.0);
            text.push_str(&format!("{s},{v},{},{},{}\n", v * 0.5, v * 0.4, v * 0.1));
        }
        fs::write(&csv, &text).unwrap();
        let out = plot_csv(&csv, None).unwrap();
        assert_eq!(out.file_name().unwrap(), "demo_loss.png");
        let first = fs::read(&out).unwrap();
        let (w, h) = png_dims(&out);
        assert!(w > 100 && h > 100);
        let out2 = plot_csv(&csv, None).unwrap();
        assert_eq!(first, fs::read(&out2).unwrap());
    }

    #[test]
    fn groups_csv_renders_including_null_rows() {
        let dir = tmp("groups");
        let csv = dir.join("demo_eval.csv");
        fs::write(
            &csv,
            "group,count,mean_deg,std_deg,acc_lt_8deg\n\
             clean,10,3.5,1.2,0.9\n\
             occluder,0,,,\n\
             overall,10,3.5,1.2,0.9\n",
        )
        .unwrap();
        let out = plot_csv(&csv, None).unwrap();
        assert_eq!(out.file_name().unwrap(), "demo_groups.png");
        png_dims(&out);
    }

    #[test]
    fn predictions_csv_renders_heatmap() {
        let dir = tmp("heatmap");
        let csv = dir.join("demo_preds.csv");
        let mut text = String::from("yaw,pitch,err_deg\n");
        for i in 0..50 {
            let y = -0.5 + i as f64 / 49.0;
            text.push_str(&format!("{y},{},{}\n", -y, i as f64 % 7.0));
        }
        fs::write(&csv, &text).unwrap();
        let out = plot_csv(&csv, None).unwrap();
        assert_eq!(out.file_name().unwrap(), "demo_heatmap.png");
        png_dims(&out);
    }

    #[test]
    fn empty_csv_errors_and_writes_nothing() {
        let dir = tmp("empty");
        let csv = dir.join("run_metrics.csv");
        fs::write(&csv, "step,total,l1,ang,sep\n").unwrap();
        assert!(plot_csv(&csv, None).is_err());
        let files: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(files.len(), 1, "only the input csv should exist: {files:?}");
    }

    #[test]
    fn unknown_header_lists_all_schemas() {
        let dir = tmp("badheader");
        let csv = dir.join("x.csv");
        fs::write(&csv, "a,b,c\n1,2,3\n").unwrap();
        let err = plot_csv(&csv, None).unwrap_err().to_string();
        assert!(err.contains("step,total,l1,ang,sep"), "{err}");
        assert!(
            err.contains("group,count,mean_deg,std_deg,acc_lt_8deg"),
            "{err}"
        );
        assert!(err.contains("yaw,pitch,err_deg"), "{err}");
    }

    #[test]
    fn malformed_rows_name_the_record() {
        let dir = tmp("badrow");
        let csv = dir.join("r_metrics.csv");
        fs::write(
            &csv,
            "step,total,l1,ang,sep\n0,0.5,0.2,0.2,0.1\n1,oops,0.2,0.2,0.1\n",
        )
        .unwrap();
        match plot_csv(&csv, None).unwrap_err() {
            Error::Record { record, .. } => assert_eq!(record, 1),
            other => panic!("expected record error, got {other}"),
        }
        let short = dir.join("s_metrics.csv");
        fs::write(&short, "step,total,l1,ang,sep\n0,0.5,0.2\n").unwrap();
        assert!(matches!(
            plot_csv(&short, None).unwrap_err(),
            Error::Record { record: 0, .. }
        ));
    }

    #[test]
    fn run_id_strips_known_suffixes_only() {
        assert_eq!(run_id_of(Path::new("/x/abc_metrics.csv")), "abc");
        assert_eq!(run_id_of(Path::new("t-w-o-sdm_preds.csv")), "t-w-o-sdm");
        assert_eq!(run_id_of(Path::new("raw.csv")), "raw");
        assert_eq!(run_id_of(Path::new("_metrics.csv")), "_metrics");
    }

    #[test]
    fn glyph_table_covers_charset() {
        assert_eq!(GLYPH_CHARS.chars().count(), GLYPHS.len());
        for c in GLYPH_CHARS.chars() {
            // Charset glyphs never fall back to the hollow box.
            assert_ne!(glyph(c), [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F], "{c}");
        }
        assert_eq!(glyph('☃'), [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F]);
    }
}
