#![no_main]

use ccb_core::selection::{grade, parse_rational};
use ccb_core::trace::{extract_final_answer, TaskType};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    for task in [TaskType::OpenEnded, TaskType::MultipleChoice] {
        if let Some(a) = extract_final_answer(text, task) {
            assert!(text.contains(a.trim_start_matches(['-', '+'])) || task == TaskType::MultipleChoice);
            let _ = grade(Some(&a), text, task);
        }
    }
    let _ = parse_rational(text);
});
