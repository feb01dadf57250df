//! Image files and training-curve rendering.
//!
//! Masks travel as binary PGM (maxval 255, the ignore label maps to white),
//! previews as binary PPM, and training histories as a hand-built SVG.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mask::{Mask, IGNORE};
use crate::taxonomy::Taxonomy;
use crate::tensor::Tensor;

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_atomic(path, &encode_pgm(mask))
}

/// Pulls the next whitespace-delimited token, skipping `#` comment lines.
fn pnm_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, "truncated header".to_string()));
    }
    Ok(&bytes[start..*pos])
}

fn pnm_number(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
    let tok = pnm_token(bytes, pos, path)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, format!("{what} is not a number")))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    if pnm_token(&bytes, &mut pos, path)? != b"P5" {
        return Err(Error::format(path, "not a binary PGM (wants P5)".to_string()));
    }
    let w = pnm_number(&bytes, &mut pos, path, "width")?;
    let h = pnm_number(&bytes, &mut pos, path, "height")?;
    let maxval = pnm_number(&bytes, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval}, labels need 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let want = h.checked_mul(w).filter(|&n| n > 0 && pos + n <= bytes.len());
    let Some(want) = want else {
        return Err(Error::format(
            path,
            format!("raster wants {h}x{w} bytes, {} remain", bytes.len().saturating_sub(pos)),
        ));
    };
    if pos + want != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after raster", bytes.len() - pos - want),
        ));
    }
    Mask::new(h, w, bytes[pos..pos + want].to_vec())
}

pub fn encode_ppm(h: usize, w: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != h * w * 3 {
        return Err(Error::invalid(format!(
            "ppm raster wants {h}x{w}x3 = {} bytes, got {}",
            h * w * 3,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_ppm(path: &Path, h: usize, w: usize, rgb: &[u8]) -> Result<()> {
    write_atomic(path, &encode_ppm(h, w, rgb)?)
}

/// Converts one (C, H, W) frame with C >= 3 to 8-bit RGB, clamping to [0, 1].
pub fn frame_to_rgb(frame: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] < 3 {
        return Err(Error::invalid(format!(
            "frame wants shape (C>=3, H, W), got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let data = frame.data();
    let mut rgb = Vec::with_capacity(plane * 3);
    for px in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + px].clamp(0.0, 1.0);
            rgb.push((v * 255.0).round() as u8);
        }
    }
    Ok((h, w, rgb))
}

/// Fallback class color when the taxonomy carries none: spaced hues at
/// fixed saturation so neighboring ids stay distinguishable.
pub fn fallback_color(class_id: usize) -> [u8; 3] {
    let hue = (class_id as f64 * 0.618033988749895).fract() * 6.0;
    let sector = hue as usize % 6;
    let f = hue.fract();
    let (v, s) = (0.92f64, 0.65f64);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Paints species ids with their taxonomy colors; ignore pixels go black.
pub fn colorize_mask(mask: &Mask, taxonomy: &Taxonomy) -> Result<Vec<u8>> {
    let species = taxonomy.species();
    let mut rgb = Vec::with_capacity(mask.data.len() * 3);
    for &v in &mask.data {
        let px = if v == IGNORE {
            [0, 0, 0]
        } else {
            let Some(info) = species.get(v as usize) else {
                return Err(Error::invalid(format!(
                    "mask label {v} exceeds the {} known species",
                    species.len()
                )));
            };
            info.color.unwrap_or_else(|| fallback_color(v as usize))
        };
        rgb.extend_from_slice(&px);
    }
    Ok(rgb)
}

/// Parses a small numeric CSV: header row plus data rows, empty cells
/// becoming `None`.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return Err(Error::invalid("csv is empty"));
    };
    let names: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(Error::invalid(format!(
                "csv row {} has {} cells, header has {}",
                i + 2,
                cells.len(),
                names.len()
            )));
        }
        let mut row = Vec::with_capacity(cells.len());
        for (cell, name) in cells.iter().zip(&names) {
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::invalid(format!("csv row {}, column {name}: bad number {cell:?}", i + 2))
                })?;
                row.push(Some(v));
            }
        }
        rows.push(row);
    }
    Ok((names, rows))
}

pub fn csv_column(
    names: &[String],
    rows: &[Vec<Option<f64>>],
    wanted: &str,
) -> Result<Vec<Option<f64>>> {
    let Some(i) = names.iter().position(|n| n == wanted) else {
        return Err(Error::invalid(format!(
            "csv has no column {wanted:?}, columns are {names:?}"
        )));
    };
    Ok(rows.iter().map(|r| r[i]).collect())
}

const SERIES_COLORS: [&str; 6] = [
    "#1065ab", "#c22f2f", "#2e8540", "#8250c4", "#b8860b", "#0e7490",
];

struct Panel<'a> {
    title: &'a str,
    series: Vec<(String, Vec<Option<f64>>)>,
}

fn render_panel(svg: &mut String, panel: &Panel, x0: f64, y0: f64, w: f64, h: f64) {
    let (left, bottom, top, right) = (64.0, 28.0, 22.0, 120.0);
    let (px0, py0) = (x0 + left, y0 + top);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let n = panel.series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, vs) in &panel.series {
        for v in vs.iter().flatten() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let sx = |i: usize| px0 + pw * i as f64 / (n.max(2) - 1) as f64;
    let sy = |v: f64| py0 + ph * (1.0 - (v - lo) / (hi - lo));

    svg.push_str(&format!(
        "<text x='{px0}' y='{}' class='title'>{}</text>\n",
        y0 + 14.0,
        panel.title
    ));
    svg.push_str(&format!(
        "<rect x='{px0}' y='{py0}' width='{pw}' height='{ph}' class='frame'/>\n"
    ));
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = sy(v);
        svg.push_str(&format!(
            "<line x1='{px0}' y1='{y}' x2='{}' y2='{y}' class='grid'/>\n",
            px0 + pw
        ));
        svg.push_str(&format!(
            "<text x='{}' y='{}' class='ylab'>{v:.3}</text>\n",
            px0 - 6.0,
            y + 4.0
        ));
    }
    for i in [0, n.saturating_sub(1)] {
        svg.push_str(&format!(
            "<text x='{}' y='{}' class='xlab'>{i}</text>\n",
            sx(i),
            py0 + ph + 18.0
        ));
    }
    for (si, (name, vs)) in panel.series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, v) in vs.iter().enumerate() {
            match v {
                Some(v) => {
                    d.push_str(if pen_down { "L" } else { "M" });
                    d.push_str(&format!("{:.2} {:.2} ", sx(i), sy(*v)));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        if !d.is_empty() {
            svg.push_str(&format!(
                "<path d='{}' fill='none' stroke='{color}' stroke-width='1.6'/>\n",
                d.trim_end()
            ));
        }
        let ly = py0 + 14.0 + 16.0 * si as f64;
        svg.push_str(&format!(
            "<line x1='{}' y1='{ly}' x2='{}' y2='{ly}' stroke='{color}' stroke-width='3'/>\n",
            px0 + pw + 10.0,
            px0 + pw + 30.0
        ));
        svg.push_str(&format!(
            "<text x='{}' y='{}' class='legend'>{name}</text>\n",
            px0 + pw + 36.0,
            ly + 4.0
        ));
    }
}

/// Renders the training CSV as two stacked panels: losses on top, the
/// validation score below. Loss columns that never carry a value are left
/// out (the two objectives fill different columns).
pub fn training_curves_svg(csv_text: &str) -> Result<String> {
    let (names, rows) = parse_csv(csv_text)?;
    let mut loss_series = Vec::new();
    for col in [
        "loss_total",
        "loss_species",
        "loss_genus",
        "loss_taxon",
        "loss_dice",
        "loss_ce",
    ] {
        let vs = csv_column(&names, &rows, col)?;
        if vs.iter().any(Option::is_some) {
            loss_series.push((col.to_string(), vs));
        }
    }
    let miou = csv_column(&names, &rows, "val_miou")?;

    let (w, h) = (760.0, 520.0);
    let mut svg = format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{w}' height='{h}' \
         viewBox='0 0 {w} {h}'>\n\
         <style>text{{font:12px sans-serif;fill:#333}}.title{{font-weight:bold}}\
         .ylab{{text-anchor:end}}.xlab{{text-anchor:middle}}\
         .grid{{stroke:#ddd;stroke-width:1}}.frame{{fill:none;stroke:#888}}</style>\n\
         <rect width='{w}' height='{h}' fill='white'/>\n"
    );
    render_panel(
        &mut svg,
        &Panel { title: "loss per epoch", series: loss_series },
        0.0,
        0.0,
        w,
        h / 2.0,
    );
    render_panel(
        &mut svg,
        &Panel {
            title: "validation mIoU per epoch",
            series: vec![("val_miou".to_string(), miou)],
        },
        0.0,
        h / 2.0,
        w,
        h / 2.0,
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
