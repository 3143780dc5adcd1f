use pfedes_core::config::ExperimentConfig;
use pfedes_core::protocol::Mode;

/// Small synthetic federation: 4 classes of 40 samples at 1×16×16, four
/// clients with two classes each. `extra` lines override or add keys.
pub fn small_config(mode: Mode, extra: &str) -> ExperimentConfig {
    let mut lines = vec![
        ("mode".to_string(), mode.to_string()),
        ("dataset".into(), "synthetic".into()),
        ("synthetic_classes".into(), "4".into()),
        ("synthetic_per_class".into(), "40".into()),
        ("num_clients".into(), "4".into()),
        ("rounds".into(), "3".into()),
        ("seed".into(), "5".into()),
    ];
    for line in extra.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').expect("key = value");
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        match lines.iter_mut().find(|(key, _)| *key == k) {
            Some(slot) => slot.1 = v,
            None => lines.push((k, v)),
        }
    }
    let text: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    ExperimentConfig::parse(&text).unwrap()
}
