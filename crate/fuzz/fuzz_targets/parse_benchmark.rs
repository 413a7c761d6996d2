#![no_main]

use ccb_core::trace::{item_to_record, parse_benchmark, BenchmarkFormat};
use libfuzzer_sys::fuzz_target;

const FORMATS: [BenchmarkFormat; 4] =
    [BenchmarkFormat::Canonical, BenchmarkFormat::Questions, BenchmarkFormat::Gsm8k, BenchmarkFormat::MultipleChoice];

fuzz_target!(|data: &[u8]| {
    let Some((&selector, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let format = FORMATS[selector as usize % FORMATS.len()];
    if let Ok(items) = parse_benchmark(text, format) {
        if format == BenchmarkFormat::Canonical {
            // Canonical records read back as themselves.
            let again: String = items.iter().map(|i| item_to_record(i) + "\n").collect();
            assert_eq!(parse_benchmark(&again, BenchmarkFormat::Canonical).unwrap(), items);
        }
    }
});
