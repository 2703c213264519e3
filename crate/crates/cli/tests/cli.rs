use std::path::Path;
use std::process::{Command, Output};

use grappa::dataio::synthetic::{contaminate, synthetic_dataset};
use grappa::dataio::write_split_csv;
use serde_json::Value;

fn grappa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grappa")).args(args).env_remove("GRAPPA_SEED").output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic data, its split labels and a two-epoch config.
fn fixtures(dir: &Path) {
    let (ds, _) = synthetic_dataset(6);
    ds.save_csv(&dir.join("data.csv")).unwrap();
    write_split_csv(&ds, std::fs::File::create(dir.join("split.csv")).unwrap()).unwrap();
    std::fs::write(
        dir.join("config.json"),
        r#"{"batch_size": 8, "warmup_epochs": 1, "main_epochs": 1,
            "arch": {"gat_layers": 2, "heads": 1, "hidden_layers": 1},
            "grid": {"gat_layers": [2], "heads": [1, 2], "hidden_layers": [1], "pooling": ["sum", "interaction"]}}"#,
    )
    .unwrap();
}

#[test]
fn boil_from_explicit_parameters() {
    let v = stdout_json(&grappa(&["boil", "--params", "10", "2000", "-50", "--pressure", "1000"]));
    assert!((v["boiling_temperature_K"].as_f64().unwrap() - 250.0).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    assert_eq!(grappa(&["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(grappa(&["boil", "--pressure", "1000"]).status.code(), Some(2));
    assert_eq!(grappa(&["predict", "--smiles", "CCO"]).status.code(), Some(2));
    // pressure above e^A kPa has no boiling temperature
    let out = grappa(&["boil", "--params", "10", "2000", "-50", "--pressure", "1e9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert_eq!(grappa(&["predict", "--model", "/no/such/model.json", "--smiles", "CCO"]).status.code(), Some(1));
}

#[test]
fn curate_names_exactly_the_injected_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, _) = synthetic_dataset(9);
    let (dirty, injected) = contaminate(&clean, 2.0, 5);
    dirty.save_csv(&dir.path().join("dirty.csv")).unwrap();
    let out_csv = dir.path().join("clean.csv");
    let audit = dir.path().join("audit.jsonl");
    let v = stdout_json(&grappa(&["curate", "--data", p(&dir.path().join("dirty.csv")), "--out", p(&out_csv), "--audit", p(&audit)]));
    let mut rows: Vec<u64> = v["audit"].as_array().unwrap().iter().map(|e| e["row"].as_u64().unwrap()).collect();
    rows.sort_unstable();
    let mut expected: Vec<u64> = injected.iter().map(|p| p.line as u64).collect();
    expected.sort_unstable();
    assert_eq!(rows, expected);
    assert!(v["audit"].as_array().unwrap().iter().all(|e| e["rule"] == "outlier"));
    assert_eq!(v["kept_points"].as_u64().unwrap() as usize, clean.len());
    assert_eq!(std::fs::read_to_string(&audit).unwrap().lines().count(), injected.len());
}

#[test]
fn split_is_seeded_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let data = dir.path().join("data.csv");
    let run = |name: &str, seed_flag: Option<&str>, env_seed: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_grappa"));
        cmd.env_remove("GRAPPA_SEED").args(["split", "--data", p(&data), "--out", p(&out)]);
        if let Some(s) = seed_flag {
            cmd.args(["--seed", s]);
        }
        if let Some(s) = env_seed {
            cmd.env("GRAPPA_SEED", s);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success());
        std::fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv", Some("7"), None);
    let b = run("b.csv", None, Some("7"));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 21);
}

#[test]
fn fit_antoine_recovers_generating_parameters() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let v = stdout_json(&grappa(&["fit-antoine", "--data", p(&dir.path().join("data.csv")), "--component", "alkane_c05"]));
    let fit = &v[0];
    assert!((fit["A"].as_f64().unwrap() - 14.0).abs() < 14.0 * 1e-3);
    assert!((fit["B"].as_f64().unwrap() - 3100.0).abs() < 3100.0 * 1e-3);
    assert!((fit["C"].as_f64().unwrap() + 60.0).abs() < 60.0 * 1e-3);
}

#[test]
fn train_predict_evaluate_report_attention() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let d = dir.path();
    let data_before = std::fs::read(d.join("data.csv")).unwrap();
    let train = |model: &str| {
        stdout_json(&grappa(&[
            "train",
            "--config",
            p(&d.join("config.json")),
            "--data",
            p(&d.join("data.csv")),
            "--split",
            p(&d.join("split.csv")),
            "--out",
            p(&d.join(model)),
            "--history",
            p(&d.join("history.csv")),
            "--seed",
            "3",
        ]))
    };
    let v = train("m1.json");
    assert_eq!(v["epochs_run"], 2);
    train("m2.json");
    assert_eq!(std::fs::read(d.join("m1.json")).unwrap(), std::fs::read(d.join("m2.json")).unwrap());
    let history = std::fs::read_to_string(d.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,phase,lr,train_loss,valid_MAPE_i\n1,mse,"));

    let model = d.join("m1.json");
    let model_before = std::fs::read(&model).unwrap();
    let pred = stdout_json(&grappa(&["predict", "--model", p(&model), "--smiles", "CCO", "--temp", "298.15"]));
    for key in ["A", "B", "C", "ln_p_kPa", "p_Pa"] {
        assert!(pred[key].is_number(), "missing {key}");
    }
    let ln = pred["ln_p_kPa"].as_f64().unwrap();
    assert!((pred["p_Pa"].as_f64().unwrap() - ln.exp() * 1000.0).abs() < 1e-9 * pred["p_Pa"].as_f64().unwrap());

    let boil = stdout_json(&grappa(&["boil", "--model", p(&model), "--smiles", "CCCCCC", "--pressure", "101325"]));
    assert!(boil["boiling_temperature_K"].as_f64().unwrap() > 0.0);

    let ev = stdout_json(&grappa(&[
        "evaluate",
        "--model",
        p(&model),
        "--data",
        p(&d.join("data.csv")),
        "--split",
        p(&d.join("split.csv")),
        "--subset",
        "valid",
    ]));
    assert_eq!(ev["scores"]["components"], 4);
    assert!(ev["scores"]["mape_i"].as_f64().unwrap() >= 0.0);

    let rep = stdout_json(&grappa(&["report", "--model", p(&model), "--data", p(&d.join("data.csv")), "--out-dir", p(&d.join("report"))]));
    assert_eq!(rep["files"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(d.join("report/hexbin.csv")).unwrap().starts_with("T_center"));

    let att = stdout_json(&grappa(&["attention", "--model", p(&model), "--smiles", "CCO"]));
    let atoms = att["atoms"].as_array().unwrap();
    assert_eq!(atoms.len(), 3);
    assert_eq!(atoms[2]["element"], "O");

    assert_eq!(std::fs::read(d.join("data.csv")).unwrap(), data_before);
    assert_eq!(std::fs::read(&model).unwrap(), model_before);
}

#[test]
fn grid_search_ranking_does_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let d = dir.path();
    let run = |jobs: &str| {
        stdout_json(&grappa(&[
            "grid-search",
            "--config",
            p(&d.join("config.json")),
            "--data",
            p(&d.join("data.csv")),
            "--split",
            p(&d.join("split.csv")),
            "--jobs",
            jobs,
            "--seed",
            "1",
        ]))
    };
    let (a, b) = (run("1"), run("3"));
    assert_eq!(a, b);
    assert_eq!(a.as_array().unwrap().len(), 4);
    assert_eq!(a[0]["rank"], 1);
}
