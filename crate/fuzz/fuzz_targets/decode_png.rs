#![no_main]

use capocr::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode_png(data) {
        assert_eq!(img.pixels().len(), img.width() * img.height() * 3);
    }
});
