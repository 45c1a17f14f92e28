use std::path::Path;
use std::process::{Command, Output};

use tdg::experiments::{MetricsTable, CSV_HEADER};
use tdg::train::TrainedModel;

const SMALL: &str = "seeds = [0]\n[benchmark]\nsamples_per_cell = 20\n[train]\ntotal_steps = 30\nwarmup_steps = 10\n";

fn tdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdg")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tdg(&[])), 1);
    assert_eq!(code(&tdg(&["frobnicate"])), 1);
    assert_eq!(code(&tdg(&["lodo", "--format", "xml"])), 1);
    assert_eq!(code(&tdg(&["gradcheck", "--trials", "0"])), 1);
    assert_eq!(code(&tdg(&["--help"])), 0);
    assert_eq!(code(&tdg(&["lodo", "--help"])), 0);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlamda = 0.3\n").unwrap();
    let out = tdg(&["lodo", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let cfg = small_config(dir.path());
    assert_eq!(code(&tdg(&["train", "--config", &cfg])), 1);
}

#[test]
fn io_errors_exit_with_three() {
    assert_eq!(code(&tdg(&["lodo", "--config", "/nonexistent/tdg.toml"])), 3);
    assert_eq!(code(&tdg(&["eval", "--ckpt", "/nonexistent/model.json"])), 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = tdg(&["gen-data", "--config", &cfg, "--out", "/nonexistent/dir/data.txt"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_reports_every_family() {
    let out = tdg(&["gradcheck", "--trials", "3", "--seed", "5"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")));

    let json = tdg(&["gradcheck", "--trials", "1", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["families"].as_array().unwrap().len(), 10);
}

#[test]
fn generate_train_and_evaluate_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data.txt");
    let ckpt = dir.path().join("model.json");
    let scores = dir.path().join("scores.csv");
    let d = data.to_str().unwrap();
    let c = ckpt.to_str().unwrap();

    assert_eq!(code(&tdg(&["gen-data", "--config", &cfg, "--out", d])), 0);
    let out = tdg(&["train", "--config", &cfg, "--data", d, "--target", "2", "--arm", "text", "--out", c]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = TrainedModel::from_json(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(model.sources, vec![0, 1, 3]);
    assert_eq!(model.config.total_steps, 30);

    let out = tdg(&["eval", "--config", &cfg, "--ckpt", c, "--data", d, "--out", scores.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = MetricsTable::from_csv(std::fs::read(&scores).unwrap().as_slice()).unwrap();
    let raw: Vec<_> = table.raw_rows().collect();
    assert_eq!(raw.len(), 1);
    assert_eq!((raw[0].arm.as_str(), raw[0].target.as_str()), ("TEXT", "2"));

    let live = tdg(&["eval", "--config", &cfg, "--ckpt", c, "--data", d, "--domains", "0,1", "--live"]);
    assert_eq!(code(&live), 0);
    assert_eq!(MetricsTable::from_csv(live.stdout.as_slice()).unwrap().raw_rows().count(), 2);
}

#[test]
fn gen_data_accepts_a_bare_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "num_domains = 3\nsamples_per_cell = 4\nseed = 9\n").unwrap();
    let out = tdg(&["gen-data", "--spec", spec.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let ds = tdg::data::MultiDomainDataset::read_text(out.stdout.as_slice()).unwrap();
    assert_eq!(ds.num_domains(), 3);
    assert_eq!(ds.spec().seed, 9);
}

#[test]
fn protocol_subcommands_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for args in [
        vec!["lodo", "--arms", "erm,tdg"],
        vec!["single-source", "--arms", "erm"],
        vec!["ablate-losses"],
        vec!["sweep-lambda", "--lambdas", "0,1"],
    ] {
        let mut full = args.clone();
        full.extend(["--config", cfg.as_str()]);
        let out = tdg(&full);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let csv = String::from_utf8(out.stdout).unwrap();
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert!(csv.ends_with('\n'));

        full.extend(["--format", "json"]);
        let json = tdg(&full);
        let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
        assert!(v["metadata"]["config_sha256"].is_string(), "{args:?}");
    }
}

#[test]
fn seeds_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = tdg(&["lodo", "--arms", "erm", "--config", &cfg, "--seeds", "3,4"]);
    assert_eq!(code(&out), 0);
    let t = MetricsTable::from_csv(out.stdout.as_slice()).unwrap();
    let seeds: std::collections::BTreeSet<_> = t.raw_rows().map(|r| r.seed.clone()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec!["3", "4"]);
}
