#![no_main]

use libfuzzer_sys::fuzz_target;
use tspo_core::evalbench::{parse_report_json, render_report, ReportFormat};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = parse_report_json(text) {
        let _ = render_report(&report, ReportFormat::Json);
        let _ = render_report(&report, ReportFormat::Csv);
    }
});
