//! Minimal line plot rasterizer for loss curves.

use crate::image_io::Rgb8;

const MARGIN_L: usize = 48;
const MARGIN_R: usize = 12;
const MARGIN_T: usize = 12;
const MARGIN_B: usize = 24;

const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
const RAW: [u8; 3] = [160, 190, 230];
const SMOOTH: [u8; 3] = [20, 70, 170];

/// 3×5 bitmaps, one row per `u8` using the low three bits.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

/// Draws `text` with its top-left corner at `(x, y)`, each font pixel `scale` wide.
pub fn draw_text(img: &mut Rgb8, x: i64, y: i64, text: &str, scale: i64, rgb: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        let ox = x + i as i64 * 4 * scale;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put(ox + col * scale + dx, y + r as i64 * scale + dy, rgb);
                        }
                    }
                }
            }
        }
    }
}

fn line(img: &mut Rgb8, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        img.put(x, y, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 0.01 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Exponential moving average with weight `alpha` on the newest point.
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Plots `y` against `x`: the raw series in a light color, its moving average
/// on top, with min/max labels on the y axis and the last x on the x axis.
pub fn line_plot(x: &[f64], y: &[f64], width: usize, height: usize) -> Rgb8 {
    let mut img = Rgb8::new(width, height, [255, 255, 255]);
    let (pw, ph) = (
        width.saturating_sub(MARGIN_L + MARGIN_R).max(1) as f64,
        height.saturating_sub(MARGIN_T + MARGIN_B).max(1) as f64,
    );
    let (x0, y0) = (MARGIN_L as i64, (height - MARGIN_B) as i64);
    let finite: Vec<(f64, f64)> = x.iter().zip(y).map(|(&a, &b)| (a, b)).filter(|(a, b)| a.is_finite() && b.is_finite()).collect();

    for k in 0..=4 {
        let gy = y0 - (k as f64 / 4.0 * ph) as i64;
        line(&mut img, (x0, gy), (x0 + pw as i64, gy), GRID);
    }
    line(&mut img, (x0, y0), (x0 + pw as i64, y0), AXIS);
    line(&mut img, (x0, y0), (x0, MARGIN_T as i64), AXIS);
    if finite.is_empty() {
        return img;
    }

    let (xmin, xmax) = finite.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (ymin, ymax) = finite.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let yspan = if ymax > ymin { ymax - ymin } else { 1.0 };
    let to_px = |a: f64, b: f64| (x0 + ((a - xmin) / xspan * pw) as i64, y0 - ((b - ymin) / yspan * ph) as i64);

    let ys: Vec<f64> = finite.iter().map(|p| p.1).collect();
    let smoothed = smooth(&ys, 0.05);
    for (series, color) in [(ys.as_slice(), RAW), (smoothed.as_slice(), SMOOTH)] {
        let pts: Vec<(i64, i64)> = finite.iter().zip(series).map(|(p, &v)| to_px(p.0, v)).collect();
        if pts.len() == 1 {
            img.put(pts[0].0, pts[0].1, color);
        }
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
    }

    draw_text(&mut img, 2, MARGIN_T as i64, &label(ymax), 1, AXIS);
    draw_text(&mut img, 2, y0 - 5, &label(ymin), 1, AXIS);
    let xl = label(xmax).trim_end_matches(".000").to_string();
    let xw = xl.len() as i64 * 4;
    draw_text(&mut img, x0 + pw as i64 - xw, y0 + 6, &xl, 1, AXIS);
    draw_text(&mut img, x0, y0 + 6, label(xmin).trim_end_matches(".000"), 1, AXIS);
    img
}
