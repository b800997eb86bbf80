//! Replays the checked-in fuzz seeds through the same entry points the fuzz
//! targets call, so a regression seed fails `cargo test` on stable too.

use std::path::{Path, PathBuf};

use capocr::checkpoint::Checkpoint;
use capocr::data::{CorpusSpec, DatasetManifest};
use capocr::pipeline::parse_boxes;
use capocr::training::StagePlan;
use capocr::Image;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).expect("text seeds are UTF-8")
}

fn stem(p: &Path) -> &str {
    p.file_stem().unwrap().to_str().unwrap()
}

#[test]
fn image_seeds() {
    for (p, b) in seeds("decode_ppm") {
        let r = Image::decode_ppm(&b);
        assert_eq!(r.is_ok(), stem(&p) != "truncated", "{}", p.display());
    }
    for (p, b) in seeds("decode_png") {
        let img = Image::decode_png(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(img.width(), 3);
    }
}

#[test]
fn manifest_seeds() {
    for (p, b) in seeds("parse_manifest") {
        let r = DatasetManifest::parse(text(&b), Path::new("/corpus"), "seed");
        assert_eq!(r.is_ok(), stem(&p) == "valid", "{}", p.display());
    }
}

#[test]
fn box_seeds() {
    for (p, b) in seeds("parse_boxes") {
        let r = parse_boxes(text(&b), "seed");
        assert_eq!(r.is_ok(), stem(&p) == "two", "{}", p.display());
    }
}

#[test]
fn checkpoint_seeds() {
    for (p, b) in seeds("load_checkpoint") {
        let r = Checkpoint::from_bytes(&b, "seed");
        assert_eq!(r.is_ok(), stem(&p) != "truncated", "{}", p.display());
        if let Ok(ck) = r {
            ck.model().unwrap();
            assert_eq!(ck.to_bytes().unwrap(), b);
        }
    }
}

#[test]
fn plan_and_spec_seeds() {
    for (p, b) in seeds("parse_plan") {
        StagePlan::parse(text(&b), "seed").unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("parse_corpus_spec") {
        CorpusSpec::parse(text(&b), "seed").unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
