//! Command-line behaviour: exit codes, idempotence, report schema and file
//! round trips, on the small configuration.

mod common;

use std::path::{Path, PathBuf};

use common::{hetcp, hetcp_ok, s, small_config, write_config};
use hetcp::dataset;
use hetcp::model_io::{load_base, load_lift};
use hetcp_core::pipeline::Model;
use serde_json::Value;

fn schema() -> jsonschema::Validator {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/report.schema.json");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap()
}

fn assert_valid(report: &Value) {
    let errors: Vec<String> = schema()
        .iter_errors(report)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{}: {errors:?}", report["command"]);
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    data: PathBuf,
    base: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = write_config(&root, "small.json", &small_config());
    let (data, base) = (root.join("data"), root.join("base.bin"));
    assert_valid(&hetcp_ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&data),
        "--seed",
        "7",
    ]));
    assert_valid(&hetcp_ok(&[
        "train-base",
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--data",
        s(&data),
        "--out",
        s(&base),
        "--max-steps",
        "6",
    ]));
    Fixture {
        _dir: dir,
        root,
        cfg,
        data,
        base,
    }
}

fn train_lift(fx: &Fixture, family: &str, extra: &[&str]) -> (PathBuf, Value) {
    let out = fx.root.join(format!("lift-{family}{}.bin", extra.len()));
    let mut args = vec![
        "train-lift",
        "--config",
        s(&fx.cfg),
        "--seed",
        "7",
        "--data",
        s(&fx.data),
        "--base",
        s(&fx.base),
        "--family",
        family,
        "--out",
        s(&out),
        "--max-steps",
        "4",
    ];
    args.extend_from_slice(extra);
    let r = hetcp_ok(&args);
    assert_valid(&r);
    (out, r)
}

#[test]
fn gen_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("d");
    let a = hetcp_ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--seed",
        "3",
    ]);
    let first = std::fs::read(out.join("train/000000.bin")).unwrap();
    let b = hetcp_ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--seed",
        "3",
    ]);
    assert_eq!(
        a["metrics"]["manifest_sha256"],
        b["metrics"]["manifest_sha256"]
    );
    assert_eq!(first, std::fs::read(out.join("train/000000.bin")).unwrap());
    let c = hetcp_ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("e")),
        "--seed",
        "4",
    ]);
    assert_ne!(
        a["metrics"]["manifest_sha256"],
        c["metrics"]["manifest_sha256"]
    );
    let hist: u64 = a["metrics"]["object_histogram"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(hist, 10);
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let out = hetcp(&[
        "gen-data",
        "--config",
        "/nonexistent/cfg.json",
        "--out",
        "/tmp/x",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("/nonexistent/cfg.json"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(small_config()).unwrap();
    v["surprise"] = Value::Bool(true);
    let p = dir.path().join("c.json");
    std::fs::write(&p, v.to_string()).unwrap();
    assert_eq!(
        hetcp(&[
            "gen-data",
            "--config",
            s(&p),
            "--out",
            s(&dir.path().join("d")),
            "--seed",
            "1"
        ])
        .status
        .code(),
        Some(2)
    );
    let mut bad = small_config();
    bad.eval.scenario = vec!["m9".into()];
    let p = write_config(dir.path(), "bad.json", &bad);
    assert_eq!(
        hetcp(&["params-report", "--config", s(&p)]).status.code(),
        Some(2)
    );
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_config());
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = hetcp(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&blocker.join("sub")),
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    let missing = hetcp(&[
        "train-base",
        "--config",
        s(&cfg),
        "--data",
        s(&dir.path().join("nodata")),
        "--out",
        s(&dir.path().join("b.bin")),
    ]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn params_report_matches_formulas() {
    let full = hetcp_ok(&["params-report", "--preset", "full"]);
    assert_valid(&full);
    for fam in ["m2", "m3", "m4"] {
        assert_eq!(full["params"]["stage2"][fam]["prompt"], 3584);
        assert_eq!(full["params"]["stage2"][fam]["full_prompt"], 2_097_152);
    }
    let desk = hetcp_ok(&["params-report", "--preset", "desk"]);
    assert_valid(&desk);
    assert!(
        desk["params"]["stage2"]["m2"]["lift_over_enc_bev"]
            .as_f64()
            .unwrap()
            < 0.1
    );
    let shipped = hetcp_ok(&[
        "params-report",
        "--config",
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json"),
    ]);
    assert_eq!(
        shipped["config_hash"], desk["config_hash"],
        "configs/desk.json is out of date"
    );
    let shipped = hetcp_ok(&[
        "params-report",
        "--config",
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/full.json"),
    ]);
    assert_eq!(
        shipped["config_hash"], full["config_hash"],
        "configs/full.json is out of date"
    );
    assert!(desk["git_describe"].as_str().is_some_and(|g| !g.is_empty()));
}

#[test]
fn stage2_commands_and_progressive_eval() {
    let fx = fixture();
    let mut lifts = Vec::new();
    for fam in ["m2", "m3", "m4"] {
        let (p, r) = train_lift(&fx, fam, &[]);
        assert_eq!(r["params"]["trainable"], r["params"]["formula"]);
        lifts.push(p);
    }
    let mut args = vec![
        "eval",
        "--config",
        s(&fx.cfg),
        "--data",
        s(&fx.data),
        "--base",
        s(&fx.base),
        "--scenario",
        "+m2,+m3,+m4",
    ];
    for l in &lifts {
        args.extend(["--lift", s(l)]);
    }
    let curves = fx.root.join("curves.csv");
    args.extend(["--curves", s(&curves)]);
    let e = hetcp_ok(&args);
    assert_valid(&e);
    let steps = e["metrics"]["progressive"].as_array().unwrap();
    let scen: Vec<Value> = steps.iter().map(|s| s["scenario"].clone()).collect();
    assert_eq!(
        scen,
        [
            serde_json::json!(["m2"]),
            serde_json::json!(["m2", "m3"]),
            serde_json::json!(["m2", "m3", "m4"])
        ]
    );
    assert!(steps
        .iter()
        .all(|s| s["ap50"].is_number() && s["ap70"].is_number()));
    let flops: Vec<u64> = e["flops"]["progressive"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert!(
        flops.windows(2).all(|w| w[0] < w[1]) && e["flops"]["ego"].as_u64().unwrap() < flops[0]
    );
    assert!(std::fs::read_to_string(&curves)
        .unwrap()
        .starts_with("curve,iou,recall,precision"));

    // A scenario family without a pair is a configuration error.
    let out = hetcp(&[
        "eval",
        "--config",
        s(&fx.cfg),
        "--data",
        s(&fx.data),
        "--base",
        s(&fx.base),
        "--lift",
        s(&lifts[0]),
        "--scenario",
        "+m2,+m3",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Worker count does not change results.
    let single = hetcp_ok(&args);
    let many = {
        let o = std::process::Command::new(env!("CARGO_BIN_EXE_hetcp"))
            .args(&args)
            .env("FH_THREADS", "3")
            .output()
            .unwrap();
        assert!(o.status.success());
        serde_json::from_slice::<Value>(&o.stdout).unwrap()
    };
    assert_eq!(single, many);

    let (_, al) = train_lift(&fx, "m2", &["--aligner-only"]);
    assert_eq!(al["metrics"]["variant"], "aligner-only");
    assert_eq!(
        al["params"]["trainable"].as_u64().unwrap() + al["params"]["prompt"].as_u64().unwrap(),
        al["params"]["formula"].as_u64().unwrap()
    );
    let init = s(&lifts[0]).to_string();
    let (_, ft) = train_lift(&fx, "m2", &["--finetune-epochs", "1", "--init", &init]);
    assert_eq!(ft["metrics"]["variant"], "finetune");

    let table = fx.root.join("ablate.csv");
    let ab = hetcp_ok(&[
        "ablate",
        "--config",
        s(&fx.cfg),
        "--data",
        s(&fx.data),
        "--base",
        s(&fx.base),
        "--family",
        "m2",
        "--max-steps",
        "2",
        "--table",
        s(&table),
    ]);
    assert_valid(&ab);
    assert_eq!(ab["metrics"]["rows"].as_array().unwrap().len(), 5);
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 6);

    let sw = hetcp_ok(&[
        "sweep-rank",
        "--config",
        s(&fx.cfg),
        "--data",
        s(&fx.data),
        "--base",
        s(&fx.base),
        "--family",
        "m2",
        "--ranks",
        "1,2",
        "--max-steps",
        "2",
    ]);
    assert_valid(&sw);
    assert_eq!(sw["params"]["prompt"], serde_json::json!([52, 104]));
}

#[test]
fn frozen_update_in_config_exits_4() {
    let fx = fixture();
    let mut cfg = small_config();
    cfg.stage_plans.lift_trainable = Some(vec!["lift.{family}.*".into(), "pyramid.*".into()]);
    let bad = write_config(&fx.root, "bad.json", &cfg);
    let out = hetcp(&[
        "train-lift",
        "--config",
        s(&bad),
        "--data",
        s(&fx.data),
        "--base",
        s(&fx.base),
        "--family",
        "m2",
        "--out",
        s(&fx.root.join("l.bin")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("pyramid"));
}

#[test]
fn checkpoints_and_datasets_round_trip() {
    let fx = fixture();
    let cfg = small_config();
    let base = load_base(&cfg, &fx.base).unwrap();
    let fresh = Model::<f32>::new(&cfg, 7).unwrap();
    assert_eq!(base.store.len(), fresh.store.len());
    let (lift, _) = train_lift(&fx, "m2", &[]);
    let mut m = load_base(&cfg, &fx.base).unwrap();
    assert_eq!(load_lift(&mut m, &lift).unwrap(), "m2");
    let pair = hetcp::checkpoint::TensorFile::read(&lift).unwrap();
    for r in &pair.header.records {
        let id = m.store.id(&r.name).unwrap();
        assert_eq!(m.store.get(id).tensor, pair.tensor(&r.name).unwrap());
    }
    // A base checkpoint is not a lift checkpoint.
    assert!(load_lift(&mut m, &fx.base).is_err());

    let ds = dataset::load(&cfg, &fx.data).unwrap();
    let mem = dataset::load_or_generate(&cfg, None, 7).unwrap();
    assert_eq!(ds.train, mem.train);
    assert_eq!(ds.test, mem.test);
    let mut other = small_config();
    other.grid.resolution = 0.5;
    assert!(dataset::load(&other, &fx.data).is_err());
}
