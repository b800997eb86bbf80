#![no_main]

use std::path::Path;

use capocr::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let base = Path::new("/corpus");
    if let Ok(m) = DatasetManifest::parse(text, base, "fuzz") {
        // records with stray carriage returns parse but refuse to re-render
        if let Ok(again) = m.to_text(base) {
            assert_eq!(DatasetManifest::parse(&again, base, "fuzz").unwrap(), m);
        }
    }
});
