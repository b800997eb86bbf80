#![no_main]

use capocr::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;
use sha2::{Digest, Sha256};

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::from_bytes(data, "fuzz");
    // the same bytes with a valid digest, so mutations reach the body parser
    if data.len() > 32 {
        let body = &data[..data.len() - 32];
        let mut fixed = body.to_vec();
        fixed.extend_from_slice(&Sha256::digest(body));
        if let Ok(ck) = Checkpoint::from_bytes(&fixed, "fuzz") {
            let _ = ck.model();
        }
    }
});
