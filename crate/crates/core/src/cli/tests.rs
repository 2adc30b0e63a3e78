use std::fs;
use std::path::Path;

use super::*;

fn run_ok(args: &[&str]) {
    let mut argv = vec!["sagnet"];
    argv.extend_from_slice(args);
    assert_eq!(run(argv), 0, "sagnet {}", args.join(" "));
}

fn code(args: &[&str]) -> i32 {
    let mut argv = vec!["sagnet"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().to_string();
        if e.path().is_dir() {
            for (k, v) in dir_bytes(&e.path()) {
                out.insert(format!("{name}/{k}"), v);
            }
        } else if name != RUN_FILE {
            out.insert(name, fs::read(e.path()).unwrap());
        }
    }
    out
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gen-data"]), 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(code(&["gen-data", "--class", "chair", "--count", "3", "--out", p(&out)]), 2);
    assert!(!out.exists());
    assert_eq!(code(&["gen-data", "--class", "teapot", "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--help"]), 0);
}

#[test]
fn runtime_faults_exit_with_one_and_clean_up() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let ckpt = tmp.path().join("missing");
    assert_eq!(code(&["sample", "--ckpt", p(&ckpt), "--count", "2", "--out", p(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn gen_data_writes_dataset_labels_and_run_record() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["gen-data", "--class", "joint", "--count", "100", "--seed", "7", "--out", p(&a)]);
    run_ok(&["--threads", "1", "gen-data", "--class", "joint", "--count", "100", "--seed", "7", "--out", p(&b)]);
    let (manifest, data) = load_dataset(&a).unwrap();
    assert_eq!(manifest.count, 100);
    assert_eq!(data.len(), 100);
    let labels = crate::synthjoints::load_labels(&a).unwrap();
    assert_eq!(labels.len(), 100);
    let record: Value = serde_json::from_str(&fs::read_to_string(a.join(RUN_FILE)).unwrap()).unwrap();
    assert_eq!(record["command"], "gen-data");
    assert_eq!(record["args"]["seed"], 7);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let ck = tmp.path().join("ck");
    let ck2 = tmp.path().join("ck2");
    run_ok(&["gen-data", "--count", "12", "--seed", "3", "--out", p(&d)]);
    let train_args = |out: &Path| {
        vec![
            "train".to_string(),
            "--data".into(),
            p(&d).into(),
            "--iters".into(),
            "30".into(),
            "--phase1".into(),
            "10".into(),
            "--latent".into(),
            "8".into(),
            "--feature".into(),
            "16".into(),
            "--lr".into(),
            "0.01".into(),
            "--momentum".into(),
            "0.9".into(),
            "--seed".into(),
            "1".into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let argv = |v: Vec<String>| std::iter::once("sagnet".to_string()).chain(v).collect::<Vec<_>>();
    assert_eq!(run(argv(train_args(&ck))), 0);
    assert_eq!(run(argv(train_args(&ck2))), 0);
    assert_eq!(dir_bytes(&ck), dir_bytes(&ck2));
    let record: Value = serde_json::from_str(&fs::read_to_string(ck.join(RUN_FILE)).unwrap()).unwrap();
    assert!(record["result"]["final_l_f"].as_f64().unwrap() < record["result"]["initial_l_f"].as_f64().unwrap());

    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    run_ok(&["sample", "--ckpt", p(&ck), "--count", "4", "--seed", "2", "--data", p(&d), "--obj", "--out", p(&s1)]);
    run_ok(&["sample", "--ckpt", p(&ck), "--count", "4", "--seed", "2", "--data", p(&d), "--obj", "--out", p(&s2)]);
    assert_eq!(dir_bytes(&s1), dir_bytes(&s2));
    assert!(s1.join("obj/shape_000003.obj").exists());

    let i = tmp.path().join("i");
    run_ok(&["interpolate", "--ckpt", p(&ck), "--data", p(&d), "--a", "0", "--b", "1", "--steps", "5", "--out", p(&i)]);
    assert_eq!(load_dataset(&i.join("shapes")).unwrap().1.len(), 5);

    let c = tmp.path().join("c");
    run_ok(&["complete", "--ckpt", p(&ck), "--data", p(&d), "--index", "2", "--missing", "0", "--iters", "4", "--out", p(&c)]);
    let done = load_dataset(&c.join("shapes")).unwrap().1;
    let (_, data) = load_dataset(&d).unwrap();
    assert_eq!(done[0].parts[1], data[2].parts[1]);

    let m = tmp.path().join("m");
    run_ok(&["map", "--ckpt", p(&ck), "--data", p(&d), "--direction", "s2g", "--iters", "3", "--out", p(&m)]);
    assert_eq!(code(&["map", "--ckpt", p(&ck), "--data", p(&d), "--direction", "up", "--out", p(&m)]), 2);

    let e = tmp.path().join("e");
    run_ok(&["eval", "--ckpt", p(&ck), "--data", p(&d), "--metrics", "cavity,mmd,cov", "--count", "6", "--out", p(&e)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    for key in ["r_over", "mmd", "cov", "cavity"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(e.join("cavity_curve.csv").exists());
    assert_eq!(code(&["eval", "--ckpt", p(&ck), "--data", p(&d), "--metrics", "beauty", "--out", p(&e)]), 2);
}

#[test]
fn grad_check_subcommand_passes() {
    run_ok(&["grad-check", "--seed", "2"]);
}
