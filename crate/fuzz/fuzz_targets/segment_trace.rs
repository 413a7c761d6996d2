#![no_main]

use ccb_core::trace::{segment_spans, segment_trace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let steps = segment_trace(text);
    let joined: String = steps.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(joined, text);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.index, i);
        assert!(!s.text.is_empty());
        assert_eq!(&text[s.char_span.0..s.char_span.1], s.text);
    }
    assert_eq!(segment_spans(text).len(), steps.len());
});
