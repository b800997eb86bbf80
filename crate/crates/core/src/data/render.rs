//! Synthetic text images in four visual styles.
//!
//! Style parameters are drawn from the stream first, per-glyph parameters
//! after them, so two texts rendered from equal seeds share margins, scale
//! and colors.

use rand::Rng;

use super::glyphs::{glyph, Glyph, ADVANCE, GLYPH_H, GLYPH_W};
use super::{Sample, Task};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::RandomStream;

/// Axis-aligned rectangle `[x0, y0, x1, y1)` in canvas pixels.
pub type Rect = [usize; 4];

/// A rendered line with the undistorted cell of each glyph.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedLine {
    pub image: Image,
    pub cells: Vec<Rect>,
    pub background: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
struct Style {
    scale: usize,
    margin_x: usize,
    margin_y: usize,
    background: [f64; 3],
    ink: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default)]
struct GlyphJitter {
    dx: usize,
    dy: isize,
    /// Row-major 2×2 map applied about the cell center.
    warp: Option<[f64; 4]>,
    tint: f64,
}

fn gray(v: f64) -> [f64; 3] {
    [v, v, v]
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn draw_style(task: Task, rng: &mut RandomStream) -> Style {
    match task {
        Task::Document => {
            let scale = 2;
            Style {
                scale,
                margin_x: rng.random_range(0..=3 * scale),
                margin_y: rng.random_range(0..=3 * scale),
                background: gray(rng.random_range(0.85..=1.0)),
                ink: gray(rng.random_range(0.0..=0.2)),
            }
        }
        Task::Scene => {
            let scale = 2;
            let dark_on_light = rng.random_bool(0.7);
            let (bg, ink) = if dark_on_light { ((0.55, 1.0), (0.0, 0.3)) } else { ((0.0, 0.35), (0.7, 1.0)) };
            let mut pick = |r: (f64, f64)| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(r.0..=r.1)) };
            let background = pick(bg);
            let ink = pick(ink);
            Style {
                scale,
                margin_x: rng.random_range(scale..=4 * scale),
                margin_y: rng.random_range(scale..=4 * scale),
                background,
                ink,
            }
        }
        Task::Web => {
            let scale = rng.random_range(1..=3);
            let hue = rng.random_range(0..3);
            let mut background = [0.0; 3];
            let mut ink = [0.0; 3];
            for c in 0..3 {
                background[c] = rng.random_range(0.75..=1.0);
                ink[c] = if c == hue { rng.random_range(0.3..=0.6) } else { rng.random_range(0.0..=0.2) };
            }
            Style {
                scale,
                margin_x: rng.random_range(0..=3 * scale),
                margin_y: rng.random_range(0..=3 * scale),
                background,
                ink,
            }
        }
        Task::Handwriting => {
            let scale = 2;
            let paper = rng.random_range(0.82..=0.95);
            Style {
                scale,
                margin_x: rng.random_range(scale + 1..=3 * scale),
                margin_y: rng.random_range(scale + 1..=3 * scale),
                background: [paper, paper, paper * 0.93],
                ink: [0.1, 0.12, rng.random_range(0.25..=0.55)],
            }
        }
    }
}

fn draw_jitter(task: Task, scale: usize, rng: &mut RandomStream) -> GlyphJitter {
    match task {
        Task::Document => GlyphJitter::default(),
        Task::Scene => GlyphJitter {
            dx: rng.random_range(0..=scale),
            dy: rng.random_range(-1i64..=1) as isize,
            ..Default::default()
        },
        Task::Web => GlyphJitter {
            tint: rng.random_range(-0.1..=0.1),
            ..Default::default()
        },
        Task::Handwriting => {
            let theta: f64 = rng.random_range(-0.15..=0.15);
            let shear: f64 = rng.random_range(-0.25..=0.25);
            let sx: f64 = rng.random_range(0.85..=1.1);
            let sy: f64 = rng.random_range(0.85..=1.1);
            let (s, c) = theta.sin_cos();
            // rotation · shear · scale
            let m = [c * sx, (c * shear - s) * sy, s * sx, (s * shear + c) * sy];
            GlyphJitter {
                dy: rng.random_range(-1i64..=1) as isize,
                warp: Some(m),
                ..Default::default()
            }
        }
    }
}

fn check_glyphs(text: &str) -> Result<Vec<Glyph>> {
    let mut missing: Vec<char> = text.chars().filter(|&c| glyph(c).is_none()).collect();
    if !missing.is_empty() {
        missing.dedup();
        return Err(Error::Render(missing));
    }
    Ok(text.chars().filter_map(glyph).collect())
}

/// Draws one glyph with its top-left cell corner at (`ox`, `oy`).
fn stamp(img: &mut Image, g: &Glyph, ox: isize, oy: isize, scale: usize, ink: [f64; 3], warp: Option<[f64; 4]>) {
    let (gw, gh) = ((GLYPH_W * scale) as f64, (GLYPH_H * scale) as f64);
    let (w, h) = (img.width() as isize, img.height() as isize);
    match warp {
        None => {
            for gy in 0..GLYPH_H {
                for gx in 0..GLYPH_W {
                    if !g.ink(gx, gy) {
                        continue;
                    }
                    for py in 0..scale {
                        for px in 0..scale {
                            let x = ox + (gx * scale + px) as isize;
                            let y = oy + (gy * scale + py) as isize;
                            if (0..w).contains(&x) && (0..h).contains(&y) {
                                img.set(x as usize, y as usize, ink);
                            }
                        }
                    }
                }
            }
        }
        Some([a, b, c, d]) => {
            let det = a * d - b * c;
            let inv = [d / det, -b / det, -c / det, a / det];
            let (cx, cy) = (ox as f64 + gw / 2.0, oy as f64 + gh / 2.0);
            let reach = (gw.max(gh) * 0.75).ceil() as isize;
            for y in (cy as isize - reach)..=(cy as isize + reach) {
                for x in (cx as isize - reach)..=(cx as isize + reach) {
                    if !(0..w).contains(&x) || !(0..h).contains(&y) {
                        continue;
                    }
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let u = inv[0] * dx + inv[1] * dy + gw / 2.0;
                    let v = inv[2] * dx + inv[3] * dy + gh / 2.0;
                    if u < 0.0 || v < 0.0 || u >= gw || v >= gh {
                        continue;
                    }
                    if g.ink(u as usize / scale, v as usize / scale) {
                        img.set(x as usize, y as usize, ink);
                    }
                }
            }
        }
    }
}

fn clutter(img: &mut Image, bg: [f64; 3], rng: &mut RandomStream) {
    let (w, h) = (img.width(), img.height());
    let n = rng.random_range(2..=5);
    for _ in 0..n {
        let shade: [f64; 3] = std::array::from_fn(|c| (bg[c] + rng.random_range(-0.15..=0.15)).clamp(0.0, 1.0));
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let x1 = (x0 + rng.random_range(1..=w.max(2) / 2)).min(w);
        let y1 = (y0 + rng.random_range(1..=h.max(2) / 2)).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                img.set(x, y, shade);
            }
        }
    }
}

fn add_noise(img: &mut Image, amplitude: f64, rng: &mut RandomStream) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let n = rng.random_range(-amplitude..=amplitude);
            let p = img.get(x, y);
            img.set(x, y, [p[0] + n, p[1] + n, p[2] + n]);
        }
    }
}

/// Renders `text` in the visual style of `task`.
pub fn render_line(text: &str, task: Task, rng: &mut RandomStream) -> Result<RenderedLine> {
    let glyphs = check_glyphs(text)?;
    let style = draw_style(task, rng);
    let s = style.scale;
    let jitter: Vec<GlyphJitter> = glyphs.iter().map(|_| draw_jitter(task, s, rng)).collect();

    let text_w = if glyphs.is_empty() {
        0
    } else {
        glyphs.len() * ADVANCE * s - s + jitter.iter().map(|j| j.dx).sum::<usize>()
    };
    let slack_y = if matches!(task, Task::Scene | Task::Handwriting) { 1 } else { 0 };
    let width = (2 * style.margin_x + text_w).max(1);
    let height = 2 * style.margin_y + GLYPH_H * s + 2 * slack_y;
    let mut img = Image::filled(width, height, style.background);
    if task == Task::Scene {
        clutter(&mut img, style.background, rng);
    }

    let mut cells = Vec::with_capacity(glyphs.len());
    let mut x = style.margin_x;
    for (g, j) in glyphs.iter().zip(&jitter) {
        x += j.dx;
        let y = (style.margin_y + slack_y) as isize + j.dy;
        let ink = std::array::from_fn(|c| (style.ink[c] + j.tint).clamp(0.0, 1.0));
        stamp(&mut img, g, x as isize, y, s, ink, j.warp);
        let y0 = y.max(0) as usize;
        cells.push([x, y0, x + GLYPH_W * s, (y0 + GLYPH_H * s).min(height)]);
        x += ADVANCE * s;
    }

    match task {
        Task::Scene => add_noise(&mut img, 0.06, rng),
        Task::Handwriting => add_noise(&mut img, 0.03, rng),
        _ => {}
    }
    debug_assert!(luma(style.background) >= 0.0);
    Ok(RenderedLine {
        image: img.quantized(),
        cells,
        background: style.background,
    })
}

/// Renders a labelled sample; the image is held inline.
pub fn render_sample(text: &str, task: Task, rng: &mut RandomStream) -> Result<Sample> {
    let line = render_line(text, task, rng)?;
    Sample::inline(line.image, text, task)
}

/// Stacks single-word lines on a white page, separated by `gap` blank pixels
/// on every side. Returns the page and each line's placement.
pub fn render_page(lines: &[&str], task: Task, gap: usize, rng: &mut RandomStream) -> Result<(Image, Vec<Rect>)> {
    let rendered = lines
        .iter()
        .map(|t| render_line(t, task, rng))
        .collect::<Result<Vec<_>>>()?;
    let width = rendered.iter().map(|r| r.image.width()).max().unwrap_or(1) + 2 * gap;
    let height = rendered.iter().map(|r| r.image.height() + gap).sum::<usize>() + gap;
    let mut page = Image::filled(width, height, [1.0; 3]);
    let mut placed = Vec::with_capacity(rendered.len());
    let mut y = gap;
    for r in &rendered {
        let (w, h) = (r.image.width(), r.image.height());
        for yy in 0..h {
            for xx in 0..w {
                page.set(gap + xx, y + yy, r.image.get(xx, yy));
            }
        }
        placed.push([gap, y, gap + w, y + h]);
        y += h + gap;
    }
    Ok((page, placed))
}
