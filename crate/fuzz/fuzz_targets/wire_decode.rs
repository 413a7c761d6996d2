#![no_main]

use ccb_core::backend::wire::{decode_error, decode_info, decode_score_request, decode_score_response};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&selector, body)) = data.split_first() else { return };
    match selector % 4 {
        0 => {
            let _ = decode_score_request(body);
        }
        1 => {
            let _ = decode_score_response(body);
        }
        2 => {
            let _ = decode_info(body);
        }
        _ => {
            let _ = decode_error(body);
        }
    }
});
