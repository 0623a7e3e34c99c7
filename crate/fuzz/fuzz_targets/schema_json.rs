#![no_main]

use battformer::data::FeatureSchema;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schema) = FeatureSchema::from_json(text) {
        let _ = schema.validate();
        let _ = schema.required_channels();
        let again = FeatureSchema::from_json(&schema.to_json()).expect("serialized schema parses");
        assert_eq!(again, schema);
    }
});
