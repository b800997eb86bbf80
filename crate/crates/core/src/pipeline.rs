//! Page recognition: find text boxes, crop them, recognize each crop.
//!
//! Boxes come either from [`detect_naive`], a projection-profile heuristic for
//! dark text on a light page, or from an external detector as JSON lines.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Recognize;
use crate::image::Image;

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl TextBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Argument(format!("empty box ({x0},{y0})-({x1},{y1})")));
        }
        Ok(TextBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn fits(&self, img: &Image) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= img.width() && self.y1 <= img.height()
    }
}

impl fmt::Display for TextBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})-({}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    /// Pixels darker than this luminance are ink.
    pub threshold: f64,
    /// Blank runs at least this long separate lines (rows) and words (columns).
    pub min_gap: usize,
    /// Boxes narrower or shorter than this are dropped.
    pub min_size: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            threshold: 0.5,
            min_gap: 12,
            min_size: 2,
        }
    }
}

/// Splits `profile` into runs of non-zero entries, joining runs separated by
/// fewer than `min_gap` zeros.
fn segments(profile: &[usize], min_gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < profile.len() {
        if profile[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < profile.len() && profile[i] > 0 {
            i += 1;
        }
        match out.last_mut() {
            Some(last) if start - last.1 < min_gap => last.1 = i,
            _ => out.push((start, i)),
        }
    }
    out
}

/// Projection-profile text detector: lines from the row profile, words from
/// each line's column profile, boxes tight to the ink.
pub fn detect_naive(img: &Image, params: &DetectParams) -> Vec<TextBox> {
    let (w, h) = (img.width(), img.height());
    let ink: Vec<bool> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| img.luminance(x, y) < params.threshold)
        .collect();
    let rows: Vec<usize> = (0..h).map(|y| ink[y * w..(y + 1) * w].iter().filter(|&&b| b).count()).collect();
    let mut boxes = Vec::new();
    for (y0, y1) in segments(&rows, params.min_gap.max(1)) {
        let cols: Vec<usize> = (0..w).map(|x| (y0..y1).filter(|&y| ink[y * w + x]).count()).collect();
        for (x0, x1) in segments(&cols, params.min_gap.max(1)) {
            let inked = |y: usize| (x0..x1).any(|x| ink[y * w + x]);
            let top = (y0..y1).find(|&y| inked(y));
            let bottom = (y0..y1).rev().find(|&y| inked(y));
            if let (Some(t), Some(b)) = (top, bottom) {
                let bx = TextBox {
                    x0,
                    y0: t,
                    x1,
                    y1: b + 1,
                };
                if bx.width() >= params.min_size && bx.height() >= params.min_size {
                    boxes.push(bx);
                }
            }
        }
    }
    boxes
}

/// Sub-images for `boxes`, in order.
pub fn crop(img: &Image, boxes: &[TextBox]) -> Result<Vec<Image>> {
    boxes.iter().map(|b| crop_with_margin(img, b, 0)).collect()
}

/// Crop grown by `margin` pixels on each side, clamped to the image.
pub fn crop_with_margin(img: &Image, b: &TextBox, margin: usize) -> Result<Image> {
    if !b.fits(img) {
        return Err(Error::Argument(format!(
            "box {b} lies outside the {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let x0 = b.x0.saturating_sub(margin);
    let y0 = b.y0.saturating_sub(margin);
    let x1 = (b.x1 + margin).min(img.width());
    let y1 = (b.y1 + margin).min(img.height());
    Ok(Image::from_fn(x1 - x0, y1 - y0, |x, y| img.get(x0 + x, y0 + y)))
}

/// Sorts boxes into reading order: rows top to bottom (boxes overlapping a
/// row vertically by at least half their height join it), left to right
/// within a row.
pub fn reading_order(boxes: &[TextBox]) -> Vec<TextBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by_key(|b| (b.y0, b.x0, b.y1, b.x1));
    let mut rows: Vec<(usize, usize, Vec<TextBox>)> = Vec::new();
    for b in sorted {
        let joins = rows.last().is_some_and(|(top, bottom, _)| {
            let overlap = (*bottom).min(b.y1).saturating_sub((*top).max(b.y0));
            2 * overlap >= b.height().min(bottom - top)
        });
        if joins {
            let row = rows.last_mut().expect("checked above");
            row.0 = row.0.min(b.y0);
            row.1 = row.1.max(b.y1);
            row.2.push(b);
        } else {
            rows.push((b.y0, b.y1, vec![b]));
        }
    }
    rows.into_iter()
        .flat_map(|(_, _, mut r)| {
            r.sort_by_key(|b| (b.x0, b.y0, b.x1, b.y1));
            r
        })
        .collect()
}

/// Source of text boxes for a page.
pub trait Detect {
    fn detect(&self, img: &Image) -> Vec<TextBox>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NaiveDetector(pub DetectParams);

impl Detect for NaiveDetector {
    fn detect(&self, img: &Image) -> Vec<TextBox> {
        detect_naive(img, &self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PageEntry {
    #[serde(rename = "box")]
    pub bbox: TextBox,
    pub text: String,
    pub terminated: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PageResult {
    pub entries: Vec<PageEntry>,
}

impl PageResult {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("page entries serialize") + "\n")
            .collect()
    }

    /// Human-readable listing, one box per line.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let flag = if e.terminated { "" } else { "  [truncated]" };
                format!("{:<24} {}{flag}\n", e.bbox.to_string(), e.text)
            })
            .collect()
    }
}

/// Recognizes every box on a page. External `boxes` bypass the detector.
pub fn recognize_page(
    img: &Image,
    rec: &dyn Recognize,
    detector: &dyn Detect,
    boxes: Option<&[TextBox]>,
    margin: usize,
) -> Result<PageResult> {
    let found;
    let boxes = match boxes {
        Some(b) => b,
        None => {
            found = detector.detect(img);
            &found
        }
    };
    let mut entries = Vec::with_capacity(boxes.len());
    for b in reading_order(boxes) {
        let piece = crop_with_margin(img, &b, margin)?;
        let r = rec.recognize(&piece)?;
        entries.push(PageEntry {
            bbox: b,
            text: r.text,
            terminated: r.terminated,
        });
    }
    Ok(PageResult { entries })
}

/// Parses one JSON object `{"x0":…,"y0":…,"x1":…,"y1":…}` per line.
pub fn parse_boxes(text: &str, source_name: &str) -> Result<Vec<TextBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b: TextBox =
            serde_json::from_str(line).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        TextBox::new(b.x0, b.y0, b.x1, b.y1).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page_with(rects: &[(usize, usize, usize, usize)], w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            if rects.iter().any(|&(x0, y0, x1, y1)| x >= x0 && x < x1 && y >= y0 && y < y1) {
                [0.0; 3]
            } else {
                [1.0; 3]
            }
        })
    }

    #[test]
    fn blank_image_has_no_boxes() {
        assert!(detect_naive(&Image::filled(30, 20, [1.0; 3]), &DetectParams::default()).is_empty());
    }

    #[test]
    fn two_lines_two_boxes_in_order() {
        let img = page_with(&[(3, 30, 20, 36), (5, 2, 15, 9)], 40, 50);
        let boxes = detect_naive(&img, &DetectParams::default());
        assert_eq!(
            boxes,
            vec![TextBox::new(5, 2, 15, 9).unwrap(), TextBox::new(3, 30, 20, 36).unwrap()]
        );
    }

    #[test]
    fn crop_examples() {
        let img = Image::from_fn(4, 3, |x, y| [x as f64 / 4.0, y as f64 / 3.0, 0.5]);
        assert_eq!(crop(&img, &[TextBox::new(0, 0, 4, 3).unwrap()]).unwrap()[0], img);
        let px = &crop(&img, &[TextBox::new(0, 0, 1, 1).unwrap()]).unwrap()[0];
        assert_eq!(px.get(0, 0), img.get(0, 0));
        let err = crop(&img, &[TextBox { x0: 2, y0: 0, x1: 5, y1: 1 }]).unwrap_err();
        assert!(err.to_string().contains("(2, 0)-(5, 1)"));
    }

    #[test]
    fn reading_order_rows_then_columns() {
        let a = TextBox::new(50, 10, 60, 20).unwrap();
        let b = TextBox::new(0, 12, 10, 22).unwrap();
        let c = TextBox::new(5, 40, 15, 50).unwrap();
        assert_eq!(reading_order(&[c, a, b]), vec![b, a, c]);
    }

    #[test]
    fn boxes_jsonl() {
        let text = "{\"x0\":1,\"y0\":2,\"x1\":3,\"y1\":4}\n\n{\"x0\":0,\"y0\":0,\"x1\":1,\"y1\":1}\n";
        assert_eq!(parse_boxes(text, "b").unwrap().len(), 2);
        let err = parse_boxes("{\"x0\":1,\"y0\":2,\"x1\":3,\"y1\":4}\n{\"x0\":3,\"y0\":0,\"x1\":3,\"y1\":1}\n", "b").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
