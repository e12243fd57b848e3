use cellfree::geometry::NetworkConfig;
use cellfree::harness::{
    run_comparison, run_experiment, CdfTable, ExperimentOutput, ExperimentSpec, Link, OutputFormat, PowerPolicy,
    ProcessingMode,
};
use cellfree::uplink::LsfdMode;

fn small_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::running_example(16, 2);
    cfg.num_ues = 6;
    cfg.pilot_length = 3;
    cfg.ul_data = 97;
    cfg.dl_data = 100;
    cfg.area_side = 300.0;
    cfg
}

fn spec(mode: ProcessingMode, scheme: &str) -> ExperimentSpec {
    let mut s = ExperimentSpec::new("running-example-100x4", mode, scheme);
    s.scenario = None;
    s.config = Some(small_config());
    s.num_setups = 3;
    s.draws_per_setup = 20;
    s.seed = 11;
    s
}

#[test]
fn same_seed_gives_identical_csv() {
    let s = spec(ProcessingMode::Centralized, "p-mmse");
    let a = run_experiment(&s).unwrap().table.to_csv().unwrap();
    let b = run_experiment(&s).unwrap().table.to_csv().unwrap();
    assert_eq!(a, b);
    let mut other = s.clone();
    other.seed = 12;
    assert_ne!(a, run_experiment(&other).unwrap().table.to_csv().unwrap());
}

#[test]
fn thread_count_does_not_change_samples() {
    let s = spec(ProcessingMode::Distributed, "lp-mmse");
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_experiment(&s).unwrap());
    let b = four.install(|| run_experiment(&s).unwrap());
    assert_eq!(a.table, b.table);
}

#[test]
fn comparison_matches_single_runs() {
    let specs = vec![spec(ProcessingMode::Centralized, "mr"), spec(ProcessingMode::Distributed, "mr")];
    let both = run_comparison(&specs).unwrap();
    for (s, o) in specs.iter().zip(&both) {
        assert_eq!(run_experiment(s).unwrap().table, o.table);
    }
}

#[test]
fn pooled_count_is_setups_times_ues() {
    let o = run_experiment(&spec(ProcessingMode::Cellular, "l-mmse")).unwrap();
    assert_eq!(o.table.count, 3 * 6);
    assert!(o.table.samples.iter().all(|&x| x >= 0.0));
}

#[test]
fn every_downlink_policy_runs() {
    for (mode, scheme) in [(ProcessingMode::Centralized, "p-mmse"), (ProcessingMode::Distributed, "lp-mmse")] {
        for power in [
            PowerPolicy::Equal,
            PowerPolicy::Fractional { upsilon: 0.5, kappa: 0.5 },
            PowerPolicy::MaxMin,
            PowerPolicy::SumSe,
        ] {
            let mut s = spec(mode, scheme);
            s.link = Link::Downlink;
            s.power = power;
            s.num_setups = 1;
            let o = run_experiment(&s).unwrap_or_else(|e| panic!("{mode:?} {power:?}: {e}"));
            assert_eq!(o.table.count, 6);
        }
    }
}

#[test]
fn uplink_max_min_equalizes_ses() {
    let mut s = spec(ProcessingMode::Centralized, "p-mmse");
    s.power = PowerPolicy::MaxMin;
    s.num_setups = 1;
    let t = run_experiment(&s).unwrap().table;
    let spread = t.samples[t.count - 1] - t.samples[0];
    assert!(spread < 1e-4, "spread {spread}");
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec(ProcessingMode::Cellular, "l-mmse");
    s.link = Link::Downlink;
    s.power = PowerPolicy::Equal;
    assert!(run_experiment(&s).is_err());
    let s = spec(ProcessingMode::Centralized, "l-mmse");
    assert!(run_experiment(&s).is_err());
    let mut s = spec(ProcessingMode::Centralized, "mr");
    s.power = PowerPolicy::Equal;
    assert!(run_experiment(&s).is_err());
    let mut a = spec(ProcessingMode::Centralized, "mr");
    let b = a.clone();
    a.seed = 3;
    assert!(run_comparison(&[a, b]).is_err());
}

#[test]
fn emit_writes_csv_and_json() {
    let mut s = spec(ProcessingMode::Distributed, "mr");
    s.lsfd = LsfdMode::Opt;
    s.num_setups = 1;
    let o = run_experiment(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("se.csv");
    o.emit(OutputFormat::Csv, &csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 1 + o.table.count);
    let json_path = dir.path().join("se.json");
    o.emit(OutputFormat::Json, &json_path).unwrap();
    let back: ExperimentOutput = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(back.table, o.table);
    assert_eq!(back.spec, o.spec);
    assert_eq!(back.metadata.seed, 11);
    assert!(o.emit(OutputFormat::Csv, &dir.path().join("missing/dir/x.csv")).is_err());
}

#[test]
fn spec_json_defaults() {
    let s: ExperimentSpec =
        serde_json::from_str(r#"{"scenario":"running-example-400x1","mode":"distributed","scheme":"lp-mmse"}"#).unwrap();
    assert_eq!(s.num_setups, 50);
    assert_eq!(s.draws_per_setup, 500);
    assert_eq!(s.lsfd, LsfdMode::NOpt);
    assert_eq!(s.power, PowerPolicy::Full);
    assert!(s.validate().is_ok());
    let t = CdfTable::from_samples(vec![1.0, 2.0, 3.0], vec![]).unwrap();
    assert_eq!(t.median(), 2.0);
}
