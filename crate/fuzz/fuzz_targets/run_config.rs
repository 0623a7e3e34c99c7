#![no_main]

use battformer::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text, &[]) {
        let echo = cfg.to_toml();
        assert_eq!(RunConfig::parse(&echo, &[]).expect("echoed config parses"), cfg);
    }
});
