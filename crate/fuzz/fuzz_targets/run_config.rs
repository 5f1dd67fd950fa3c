#![no_main]
use libfuzzer_sys::fuzz_target;
use ssboost_cli::config;

// First line is an environment override `KEY=VALUE`, the rest is TOML.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let vars = first
        .split_once('=')
        .map(|(k, v)| vec![(format!("{}{k}", config::ENV_PREFIX), v.to_string())])
        .unwrap_or_default();
    if let Ok(cfg) = config::parse(rest, vars) {
        let _ = cfg.infer.budget.resolve();
        let _ = cfg.train.validate();
        let _ = cfg.generate.scene.validate();
    }
});
