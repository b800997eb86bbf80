#![no_main]

use capocr::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode_ppm(data) {
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(Image::decode_ppm(&img.encode_ppm()).unwrap(), img.quantized());
    }
});
