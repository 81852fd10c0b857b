use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use blo_cli::config::parse_config;
use blo_cli::runner::{run_experiments, RunnerOptions};
use serde_json::Value;

const HEADER: &str = "k,wall_seconds,ul_value,ll_value,d_norm,kkt_residual,grad_phi_norm,dist_x_rel,dist_y,lyapunov,mu,alpha,beta,eta,hvp_count,jvp_count";

fn blo(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_blo"));
    cmd.args(args).env_remove("BLO_SEED");
    if let Some(s) = seed {
        cmd.env("BLO_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn run_dirs(root: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn minimal_config_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"problem":{"family":"quadratic","n":2},"method":{"name":"bagdc"}}"#);
    let out = tmp.path().join("out");
    let o = blo(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 1);
    let trace = fs::read_to_string(dirs[0].join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), HEADER);
    assert_eq!(trace.lines().count(), 1 + 1000);
    let s = summary(&dirs[0]);
    for key in ["status", "iterations", "wall_seconds", "final_metrics", "config", "library_version"] {
        assert!(s.get(key).is_some(), "missing {key}");
    }
    assert_eq!(s["iterations"], 1000);
    assert_eq!(s["config"]["problem"]["n"], 2);
    assert_eq!(s["library_version"], blo_core::VERSION);
    let x_rel = s["final_metrics"]["dist_x_rel"].as_f64().unwrap();
    assert!(x_rel < 1e-6, "{x_rel}");
}

#[test]
fn parallel_fan_out_does_not_change_traces() {
    let text = r#"[
        {"problem":{"family":"quadratic","n":20,"spectrum":{"log_uniform":{"min":0.5,"max":5}},"z0":"random"},
         "method":{"name":"bagdc"},"stop":{"max_iters":300},"clock":"frozen","seed":3},
        {"problem":{"family":"quadratic","n":20,"spectrum":{"log_uniform":{"min":0.5,"max":5}},"z0":"random"},
         "method":{"name":"bagdc"},"stop":{"max_iters":300},"clock":"frozen","seed":3}
    ]"#;
    let cfgs = parse_config(text).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("p1"), tmp.path().join("p2"));
    run_experiments(&cfgs, &RunnerOptions { parallelism: 1, out: Some(a.clone()), ..Default::default() });
    run_experiments(&cfgs, &RunnerOptions { parallelism: 2, out: Some(b.clone()), ..Default::default() });
    let traces = |root: &Path| run_dirs(root).iter().map(|d| fs::read(d.join("trace.csv")).unwrap()).collect::<Vec<_>>();
    let (ta, tb) = (traces(&a), traces(&b));
    assert_eq!(ta.len(), 2);
    assert_eq!(ta, tb);
    assert_eq!(ta[0], ta[1]);
}

#[test]
fn parallel_flag_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"problem":{"family":"multimin"},"method":{"name":["bagdc","rhg","bda","implicit-ns"]},"stop":{"max_iters":50},"clock":"frozen"}"#,
    );
    let run = |n: &str, out: &str| {
        let out = tmp.path().join(out);
        let o = blo(&["run", &cfg, "--parallel", n, "--out", out.to_str().unwrap()], None);
        assert_eq!(o.status.code(), Some(0));
        run_dirs(&out).iter().map(|d| fs::read(d.join("trace.csv")).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run("1", "a"), run("3", "b"));
}

#[test]
fn divergence_is_recorded_and_fails_the_process() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"[{"problem":{"family":"quadratic","n":3},"method":{"name":"bagdc"},"schedule":{"alpha":0.1,"beta":3.5,"eta":0.1},"stop":{"max_iters":100000}},
            {"problem":{"family":"quadratic","n":3},"method":{"name":"bagdc"},"stop":{"max_iters":10}}]"#,
    );
    let out = tmp.path().join("out");
    let o = blo(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let dirs = run_dirs(&out);
    let s = summary(&dirs[0]);
    assert_eq!(s["status"], "diverged");
    let k = s["at_iteration"].as_u64().unwrap();
    assert!(k > 0 && k < 100000);
    assert_eq!(summary(&dirs[1])["status"], "max_iters");
}

#[test]
fn empty_config_list_succeeds_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", "[]");
    let out = tmp.path().join("out");
    let o = blo(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", r#"{"problem":{"family":"quadratic","n":2},"method":{"name":"bgdc"}}"#);
    let o = blo(&["run", &bad], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("method.name") && err.contains("implicit-cg"), "{err}");

    let syntax = write(tmp.path(), "syntax.json", "{");
    assert_eq!(blo(&["run", &syntax], None).status.code(), Some(2));
    assert_eq!(blo(&["run", "/nonexistent/blo.json"], None).status.code(), Some(2));
    assert_eq!(blo(&["reproduce", "figure-7"], None).status.code(), Some(2));

    let ok = write(tmp.path(), "ok.json", r#"{"problem":{"family":"multimin"},"method":{"name":"nosa"},"stop":{"max_iters":1}}"#);
    assert_eq!(blo(&["run", &ok, "--out", tmp.path().join("o").to_str().unwrap()], Some("abc")).status.code(), Some(2));
}

#[test]
fn blo_seed_overrides_the_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"problem":{"family":"quadratic","n":5,"z0":"random"},"method":{"name":"bagdc"},"seed":1,"stop":{"max_iters":5}}"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(blo(&["run", &cfg, "--out", out.to_str().unwrap()], Some("77")).status.code(), Some(0));
    assert_eq!(summary(&run_dirs(&out)[0])["config"]["seed"], 77);
}

#[test]
fn config_output_directory_is_used_without_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("from-config");
    let text = format!(
        r#"{{"problem":{{"family":"multimin"}},"method":{{"name":"nosa"}},"stop":{{"max_iters":3}},"output":{}}}"#,
        serde_json::to_string(target.to_str().unwrap()).unwrap()
    );
    let cfg = write(tmp.path(), "c.json", &text);
    assert_eq!(blo(&["run", &cfg], None).status.code(), Some(0));
    assert_eq!(run_dirs(&target).len(), 1);
}

#[test]
fn check_reports_every_derivative() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"[{"problem":{"family":"quadratic","n":6,"spectrum":{"log_uniform":{"min":0.5,"max":5}}},"method":{"name":"bagdc"}},
            {"problem":{"family":"hypercleaning","classes":3,"dim":4,"n_train":15,"n_val":6},"method":{"name":"bagdc"}}]"#,
    );
    let o = blo(&["check", &cfg], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["grad_x_ul", "grad_y_ul", "grad_y_ll", "hvp_yy_ll", "jvp_xy_ll"] {
        assert_eq!(text.matches(name).count(), 2, "{text}");
    }
    assert!(!text.contains("FAILED"));
}

fn idx_files(dir: &Path, count: usize) -> (String, String) {
    let (rows, cols) = (2usize, 2usize);
    let mut img = vec![0, 0, 8, 3];
    for d in [count, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&(count as u32).to_be_bytes());
    for i in 0..count {
        let class = i % 2;
        for p in 0..rows * cols {
            img.push(if (p % 2) == class { 230 } else { ((i * 37 + p * 11) % 60) as u8 });
        }
        lab.push(class as u8);
    }
    let (a, b) = (dir.join("images.idx"), dir.join("labels.idx"));
    fs::write(&a, img).unwrap();
    fs::write(&b, lab).unwrap();
    (a.display().to_string(), b.display().to_string())
}

#[test]
fn hypercleaning_from_idx_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (img, lab) = idx_files(tmp.path(), 40);
    let text = format!(
        r#"{{"problem":{{"family":"hypercleaning","idx_images":{},"idx_labels":{},"n_train":30,"n_val":10,"rho":0.2}},
            "method":{{"name":"bagdc"}},"stop":{{"max_iters":20}}}}"#,
        serde_json::to_string(&img).unwrap(),
        serde_json::to_string(&lab).unwrap()
    );
    let cfg = write(tmp.path(), "c.json", &text);
    let out = tmp.path().join("out");
    let o = blo(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let s = summary(&run_dirs(&out)[0]);
    assert_eq!(s["extras"]["n_train"], 30);
    assert!(s["extras"]["val_accuracy"].as_f64().unwrap() >= 0.0);
    let trace = fs::read_to_string(run_dirs(&out)[0].join("trace.csv")).unwrap();
    let row = trace.lines().nth(1).unwrap();
    assert!(row.contains(",,,,"), "oracle columns must be empty: {row}");
}

#[test]
fn malformed_data_is_a_recorded_run_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (img, lab) = idx_files(tmp.path(), 10);
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
    let text = format!(
        r#"{{"problem":{{"family":"hypercleaning","idx_images":{},"idx_labels":{},"n_train":5,"n_val":5}},"method":{{"name":"bagdc"}}}}"#,
        serde_json::to_string(&img).unwrap(),
        serde_json::to_string(&lab).unwrap()
    );
    let cfg = write(tmp.path(), "c.json", &text);
    let out = tmp.path().join("out");
    assert_eq!(blo(&["run", &cfg, "--out", out.to_str().unwrap()], None).status.code(), Some(1));
    let s = summary(&run_dirs(&out)[0]);
    assert_eq!(s["status"], "failed");
    assert!(s["message"].as_str().unwrap().contains("truncated payload"), "{s}");
}

#[test]
fn reproduce_counterexample_writes_comparison_and_charts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = blo(&["reproduce", "counterexample", "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("counterexample");
    for f in ["comparison.csv", "dist_x_rel.svg", "grad_phi_norm.svg", "study.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let mut reader = csv::Reader::from_path(dir.join("comparison.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), ["series", "method", "param", "k", "wall_seconds", "metric", "value"]);
    let mut last = std::collections::BTreeMap::new();
    for row in reader.records() {
        let row = row.unwrap();
        if &row[5] == "dist_x_rel" {
            last.insert(row[1].to_string(), row[6].parse::<f64>().unwrap());
        }
    }
    let plateau = ((1.0 / 1.5) - 0.5f64).abs() / 0.5;
    assert!((last["nosa"] - plateau).abs() < 1e-6, "{last:?}");
    assert!(last["bagdc"] < 1e-4, "{last:?}");
}

#[test]
fn reproduce_is_deterministic_under_a_fixed_seed_apart_from_timing() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let out = tmp.path().join(d);
        assert_eq!(blo(&["reproduce", "multimin", "--seed", "4", "--out", out.to_str().unwrap()], None).status.code(), Some(0));
    }
    let values = |d: &str| {
        let mut r = csv::Reader::from_path(tmp.path().join(d).join("multimin/comparison.csv")).unwrap();
        r.records().map(|x| {
            let x = x.unwrap();
            format!("{},{},{},{}", &x[0], &x[3], &x[5], &x[6])
        }).collect::<Vec<_>>()
    };
    assert_eq!(values("a"), values("b"));
    let study: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a/multimin/study.json")).unwrap()).unwrap();
    let cg = study["runs"].as_array().unwrap().iter().find(|r| r["series"] == "implicit-cg").unwrap();
    assert_eq!(cg["status"], "failed");
    assert_eq!(cg["expected_error"], true);
}
