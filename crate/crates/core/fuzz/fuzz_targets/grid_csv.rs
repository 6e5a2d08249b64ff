#![no_main]

use ffnspec::report::HeatmapGrid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(grid) = HeatmapGrid::from_csv("fuzz", text) {
            let again = HeatmapGrid::from_csv("fuzz", &grid.to_csv().expect("grid writes"))
                .expect("grid re-reads");
            assert_eq!(again, grid);
        }
    }
});
