#![no_main]

use capocr::pipeline::{parse_boxes, reading_order};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(boxes) = parse_boxes(text, "fuzz") {
        assert!(boxes.iter().all(|b| b.x0 < b.x1 && b.y0 < b.y1));
        assert_eq!(reading_order(&boxes).len(), boxes.len());
    }
});
