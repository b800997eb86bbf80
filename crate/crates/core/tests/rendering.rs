//! Renders checked against the font itself: reading each document-style
//! glyph cell back by template matching must recover the transcript.

use capocr::data::glyphs::{charset, glyph, GLYPH_H, GLYPH_W};
use capocr::data::render::{render_line, render_page};
use capocr::data::{build_corpus, Corpus, CorpusSpec, Split, Task, TaskSpec};
use capocr::{derive_seed, stream};
use rand::Rng;

fn read_cell(img: &capocr::Image, cell: [usize; 4], cutoff: f64) -> char {
    let scale = (cell[2] - cell[0]) / GLYPH_W;
    let mut best = (usize::MAX, '?');
    for c in charset().chars() {
        let g = glyph(c).unwrap();
        let mut mismatches = 0;
        for gy in 0..GLYPH_H {
            for gx in 0..GLYPH_W {
                // sample the center of the scaled font pixel
                let x = cell[0] + gx * scale + scale / 2;
                let y = cell[1] + gy * scale + scale / 2;
                let inked = img.luminance(x, y) < cutoff;
                mismatches += usize::from(inked != g.ink(gx, gy));
            }
        }
        if mismatches < best.0 {
            best = (mismatches, c);
        }
    }
    assert_eq!(best.0, 0, "cell {cell:?} matches nothing exactly");
    best.1
}

#[test]
fn document_renders_read_back_exactly() {
    let chars: Vec<char> = charset().chars().collect();
    let mut pick = stream(1);
    for i in 0..200 {
        let len = pick.random_range(1..=8);
        let text: String = (0..len).map(|_| chars[pick.random_range(0..chars.len())]).collect();
        let mut rng = stream(derive_seed(7, &[&i.to_string()]));
        let line = render_line(&text, Task::Document, &mut rng).unwrap();
        let bg = 0.299 * line.background[0] + 0.587 * line.background[1] + 0.114 * line.background[2];
        // ink luminance is at most 0.2, background at least 0.85
        let cutoff = (bg + 0.2) / 2.0;
        let read: String = line.cells.iter().map(|&c| read_cell(&line.image, c, cutoff)).collect();
        assert_eq!(read, text);
    }
}

#[test]
fn every_style_renders_every_character() {
    let all = charset();
    for task in Task::ALL {
        for (i, chunk) in all.as_bytes().chunks(6).enumerate() {
            let text = std::str::from_utf8(chunk).unwrap();
            let line = render_line(text, task, &mut stream(i as u64)).unwrap();
            assert_eq!(line.cells.len(), text.len());
            assert!(line.cells.iter().all(|c| c[2] <= line.image.width() && c[3] <= line.image.height()));
        }
    }
}

#[test]
fn page_lines_do_not_overlap() {
    let (page, placed) = render_page(&["AB", "C7D", "9"], Task::Document, 14, &mut stream(2)).unwrap();
    assert_eq!(placed.len(), 3);
    for w in placed.windows(2) {
        assert!(w[0][3] + 14 <= w[1][1]);
    }
    assert!(placed.iter().all(|r| r[2] <= page.width() && r[3] <= page.height()));
}

#[test]
fn corpus_is_deterministic_and_disjoint() {
    let spec = CorpusSpec::uniform(TaskSpec::new(30, 10, 10, 1, 4), 3);
    let a = build_corpus(&spec).unwrap();
    let b = build_corpus(&spec).unwrap();
    assert_eq!(a, b);
    for task in Task::ALL {
        let mut seen = std::collections::HashSet::new();
        for split in Split::ALL {
            for s in a.samples(task, split).unwrap() {
                assert!(seen.insert(s.transcript().to_string()), "{task}: {} repeats", s.transcript());
            }
        }
        assert_eq!(seen.len(), 50);
    }
}

#[test]
fn written_corpus_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec::uniform(TaskSpec::new(4, 2, 2, 1, 3), 0);
    let built = build_corpus(&spec).unwrap();
    built.write(dir.path()).unwrap();
    let loaded: Corpus = Corpus::load(dir.path()).unwrap().into_inline().unwrap();
    assert_eq!(loaded, built);
}
