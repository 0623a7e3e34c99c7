#![no_main]

use battformer::data::{parse_trip_csv, FeatureSchema};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let schemas = [
        FeatureSchema::default(),
        FeatureSchema::from_json(r#"{"aggregations": [], "inputs": ["a", "b"], "targets": ["b"]}"#).unwrap(),
    ];
    for schema in &schemas {
        if let Ok(trip) = parse_trip_csv(data, "fuzz", schema) {
            let n = trip.len();
            assert!(trip.channels.values().all(|c| c.len() == n));
            assert!(trip.channels.values().flatten().all(|v| v.is_finite()));
        }
    }
});
