#![no_main]

use ccb_core::backend::{ScoringBackend, Statistic, TableLm, TableLmFixture};
use ccb_core::ScoreRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let Ok(fixture) = TableLmFixture::parse(text) else { return };
    let Ok(lm) = TableLm::new("f", fixture) else { return };
    let probe = text.lines().last().unwrap_or("");
    if let Ok(req) = ScoreRequest::new("f", "", probe, Statistic::ALL) {
        if let Ok(r) = lm.score(&req) {
            let joined: String = r.tokens.iter().map(|t| t.token_text.as_str()).collect();
            assert_eq!(joined, probe);
        }
    }
});
