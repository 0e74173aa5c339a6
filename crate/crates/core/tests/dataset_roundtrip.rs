use std::fs;

use eprb_core::dataset::{load_dataset, station_file, write_dataset, META_FILE};
use eprb_core::deg;
use eprb_core::sim::{simulate, OutcomeModel, Settings, SimConfig};

fn singlet(n: u64, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(
        n,
        Settings::Switched { a: 0.0, ap: deg(45.0), b: deg(22.5), bp: deg(67.5) },
        OutcomeModel::Singlet,
    );
    cfg.seed = seed;
    cfg
}

#[test]
fn million_event_roundtrip_is_exact() {
    let d = simulate(&singlet(1_000_000, 42)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &d).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert!(loaded.resorted.is_empty());
    assert_eq!(loaded.dataset, d);

    // writing the loaded copy again gives the same bytes
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &loaded.dataset).unwrap();
    for name in [META_FILE.to_string(), station_file(1), station_file(2)] {
        assert_eq!(fs::read(dir.path().join(&name)).unwrap(), fs::read(again.path().join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn simulation_config_survives_in_meta() {
    let cfg = singlet(100, 5);
    let d = simulate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &d).unwrap();
    let loaded = load_dataset(dir.path()).unwrap().dataset;
    let echoed: SimConfig = serde_json::from_str(&loaded.provenance["sim_config"]).unwrap();
    assert_eq!(echoed, cfg);
    assert_eq!(simulate(&echoed).unwrap(), d);
}

#[test]
fn unsorted_file_is_resorted() {
    let d = simulate(&singlet(50, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &d).unwrap();
    let path = dir.path().join(station_file(2));
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1..].reverse();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.resorted, vec![2]);
    assert_eq!(loaded.dataset.station2.times().collect::<Vec<_>>(), d.station2.times().collect::<Vec<_>>());
}
