use std::fs;
use std::path::{Path, PathBuf};

use gridcharge_core::experiment::*;
use gridcharge_core::simulate::SimulationConfig;
use gridcharge_core::stats::{CiMethod, Windowing};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn plan(out: &Path) -> ExperimentPlan {
    let mut p = ExperimentPlan::new(data("synthetic_tree12.csv"), out);
    p.grid = vec![0.2, 0.6];
    p.runs = 1;
    p.base_seed = 5;
    p.simulation = SimulationConfig { horizon: 300.0, ..Default::default() };
    p.windowing = Windowing { window: 10.0, trim: 100.0 };
    p
}

fn cell_dirs(out: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        fs::read_dir(out.join(RUNS_DIR)).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn sweep_writes_every_cell_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = plan(tmp.path());
    let first = run_sweep(&p).unwrap();
    assert_eq!(first.computed.len(), 4);
    assert!(first.failed.is_empty());
    assert_eq!(
        cell_dirs(tmp.path()),
        ["lambda-0.2_mf_run-000", "lambda-0.2_pf_run-000", "lambda-0.6_mf_run-000", "lambda-0.6_pf_run-000"]
    );
    let summary = fs::read(tmp.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(first.records.len(), 4);

    let again = run_sweep(&p).unwrap();
    assert!(again.computed.is_empty());
    assert_eq!(again.skipped.len(), 4);
    assert_eq!(fs::read(tmp.path().join(SUMMARY_FILE)).unwrap(), summary);

    fs::remove_dir_all(tmp.path().join(RUNS_DIR).join("lambda-0.6_pf_run-000")).unwrap();
    let resumed = run_sweep(&p).unwrap();
    assert_eq!(resumed.computed.len(), 1);
    assert_eq!(resumed.computed[0].dir_name(), "lambda-0.6_pf_run-000");
    assert_eq!(fs::read(tmp.path().join(SUMMARY_FILE)).unwrap(), summary);

    // A changed setting invalidates every cell.
    let mut longer = p.clone();
    longer.simulation.horizon = 400.0;
    assert_eq!(run_sweep(&longer).unwrap().computed.len(), 4);
}

#[test]
fn summaries_are_byte_identical_across_directories_and_jobs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut pa = plan(a.path());
    pa.jobs = 1;
    let mut pb = plan(b.path());
    pb.jobs = 4;
    run_sweep(&pa).unwrap();
    run_sweep(&pb).unwrap();
    assert_eq!(fs::read(a.path().join(SUMMARY_FILE)).unwrap(), fs::read(b.path().join(SUMMARY_FILE)).unwrap());
    for name in cell_dirs(a.path()) {
        for file in [SERIES_FILE, VEHICLES_FILE] {
            let x = fs::read(a.path().join(RUNS_DIR).join(&name).join(file)).unwrap();
            let y = fs::read(b.path().join(RUNS_DIR).join(&name).join(file)).unwrap();
            assert_eq!(x, y, "{name}/{file}");
        }
    }
}

#[test]
fn rates_use_their_own_streams_unless_shared() {
    let tmp = tempfile::tempdir().unwrap();
    let p = plan(tmp.path());
    let cells = p.cells();
    assert_ne!(p.cell_config(&cells[0]).arrival_stream, p.cell_config(&cells[2]).arrival_stream);
    assert_eq!(p.cell_config(&cells[0]).arrival_stream, p.cell_config(&cells[1]).arrival_stream);
    let shared = ExperimentPlan { common_arrivals: true, ..p };
    let cells = shared.cells();
    assert_eq!(shared.cell_config(&cells[0]).arrival_stream, shared.cell_config(&cells[2]).arrival_stream);
}

#[test]
fn resummarizing_with_another_window() {
    let tmp = tempfile::tempdir().unwrap();
    run_sweep(&plan(tmp.path())).unwrap();
    let records = summarize_sweep(tmp.path(), Windowing { window: 20.0, trim: 100.0 }, CiMethod::Normal).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.window == 20.0));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(summarize_sweep(empty.path(), Windowing::default(), CiMethod::Normal), Err(ExperimentError::Plan(_))));
}

#[test]
fn audit_of_a_sweep_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = plan(tmp.path());
    p.grid = vec![0.6];
    run_sweep(&p).unwrap();
    for name in cell_dirs(tmp.path()) {
        let dir = tmp.path().join(RUNS_DIR).join(&name);
        let clean = audit_dir(&dir, &AuditOptions { samples: 30, ..Default::default() }).unwrap();
        assert!(clean.states > 0, "{name}");
        assert_eq!(clean.pass_rate(), 1.0, "{name}: {:?}", clean.failures);
        let bad = audit_dir(&dir, &AuditOptions { samples: 30, corrupt: Some(0.01), ..Default::default() }).unwrap();
        assert!(bad.pass_rate() < 1.0, "{name}");
        assert!(bad.max_relative_gap > 1e-3);
    }
}

#[test]
fn plan_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = plan(tmp.path());
    p.runs = 0;
    assert!(matches!(run_sweep(&p), Err(ExperimentError::Plan(_))));
    let mut p = plan(tmp.path());
    p.network = tmp.path().join("missing.csv");
    assert!(matches!(run_sweep(&p), Err(ExperimentError::Io { .. })));
    assert!(matches!(parse_grid("0.1:x:0.1"), Err(ExperimentError::Grid { .. })));
    assert!(matches!(parse_grid("0.5:0.1:0.1"), Err(ExperimentError::Grid { .. })));
}

#[test]
fn pruned_network_loads() {
    let net = load_network(&data("synthetic_feeder47.csv"), Some("pv")).unwrap();
    assert_eq!(net.tree.len(), 42);
    assert_eq!(net.digest.len(), 64);
    assert!(matches!(load_network(&data("synthetic_tree12.csv"), Some("pv")), Err(ExperimentError::Plan(_))));
}
