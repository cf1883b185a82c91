//! End-to-end runs of the `itu-match` binary on the shipped example inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itu-match"))
        .args(args)
        .env_remove("ITU_MATCH_THREADS")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json stdout")
}

fn err_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("json stderr")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solves_one_by_one_market() {
    let out = run(&["solve", "--input", s(&example("tu_1x1.json"))]);
    let v = ok_json(&out);
    assert!((v["outcome"]["matching"]["mu"][0][0].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert!((v["outcome"]["matching"]["mu_x0"][0].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert!((v["outcome"]["matching"]["mu_0y"][0].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert_eq!(v["config"]["solver"], "ipfp");
    assert_eq!(v["config"]["tol"], 1e-10);
}

#[test]
fn jacobi_agrees_with_ipfp() {
    let input = example("search_2x2.json");
    let a = ok_json(&run(&["solve", "--input", s(&input)]));
    let b = ok_json(&run(&["solve", "--input", s(&input), "--solver", "jacobi"]));
    for x in 0..2 {
        for y in 0..2 {
            let (p, q) = (
                &a["outcome"]["matching"]["mu"][x][y],
                &b["outcome"]["matching"]["mu"][x][y],
            );
            assert!((p.as_f64().unwrap() - q.as_f64().unwrap()).abs() < 1e-8);
        }
    }
}

#[test]
fn negative_tau_names_the_field() {
    let out = run(&["solve", "--input", s(&example("negative_tau.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let e = err_json(&out);
    assert_eq!(e["error"]["kind"], "validation");
    assert_eq!(e["error"]["field"], "tech.x1|y1.tau");
}

#[test]
fn malformed_json_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"men\": [").unwrap();
    let out = run(&["solve", "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"]["kind"], "parse");
}

#[test]
fn iteration_budget_exhaustion_exits_three_with_trace() {
    let out = run(&["solve", "--input", s(&example("etu_2x3.json")), "--max-iter", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let e = err_json(&out);
    assert_eq!(e["error"]["kind"], "convergence");
    assert_eq!(e["error"]["trace"].as_array().unwrap().len(), 1);
}

#[test]
fn invalid_thread_count_exits_two() {
    let out = Command::new(env!("CARGO_BIN_EXE_itu-match"))
        .args(["solve", "--input", s(&example("tu_1x1.json"))])
        .env("ITU_MATCH_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"]["field"], "ITU_MATCH_THREADS");
}

#[test]
fn verify_only_reproduces_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let input = example("etu_2x3.json");
    let result = dir.path().join("result.json");
    let out = run(&["solve", "--input", s(&input), "--output", s(&result)]);
    assert!(out.status.success());
    let stored: Value = serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    let v = ok_json(&run(&[
        "solve",
        "--input",
        s(&input),
        "--verify-only",
        "--outcome",
        s(&result),
    ]));
    assert_eq!(v["residuals"], stored["residuals"]);
}

#[test]
fn outputs_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = example("etu_2x3.json");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for p in [&a, &b] {
        assert!(run(&[
            "compstats",
            "--input",
            s(&input),
            "--delta-n",
            "0.1,0",
            "--symmetry",
            "--output",
            s(p)
        ])
        .status
        .success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let threaded = Command::new(env!("CARGO_BIN_EXE_itu-match"))
        .args(["compstats", "--input", s(&input), "--delta-n", "0.1,0", "--symmetry"])
        .env("ITU_MATCH_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(threaded.stdout, std::fs::read(&a).unwrap());
}

#[test]
fn simulate_then_estimate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = example("model_tu_2x2.json");
    let theta = "1.0,-0.5,0.5,0.8,0.6,0.4";
    let (sj, sc) = (dir.path().join("s.json"), dir.path().join("s.csv"));
    for (p, fmt) in [(&sj, "json"), (&sc, "csv")] {
        let out = run(&[
            "simulate",
            "--input",
            s(&model),
            "--theta",
            theta,
            "--n-hat",
            "100000",
            "--seed",
            "7",
            "--format",
            fmt,
            "--output",
            s(p),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = run(&["estimate", "--input", s(&model), "--sample", s(&sj)]);
    let b = run(&["estimate", "--input", s(&model), "--sample", s(&sj)]);
    assert_eq!(a.stdout, b.stdout);
    let fj = ok_json(&a);
    let fc = ok_json(&run(&["estimate", "--input", s(&model), "--sample", s(&sc)]));
    let lam: Vec<f64> = fj["fit"]["lambda"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let se: Vec<f64> = fj["fit"]["standard_errors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    for (k, truth) in [1.0, -0.5].iter().enumerate() {
        assert!((lam[k] - truth).abs() < 4.0 * se[k], "λ{k} = {} ± {}", lam[k], se[k]);
        let lc = fc["fit"]["lambda"][k].as_f64().unwrap();
        assert!((lc - lam[k]).abs() < 1e-6);
    }
}

#[test]
fn full_assignment_respects_the_pin() {
    let v = ok_json(&run(&[
        "solve-full",
        "--input",
        s(&example("balanced_2x2.json")),
        "--pin-value",
        "0.5",
    ]));
    assert_eq!(v["result"]["effects"]["a"][0], 0.5);
    let mu = &v["result"]["matching"]["mu"];
    let row0 = mu[0][0].as_f64().unwrap() + mu[0][1].as_f64().unwrap();
    assert!((row0 - 1.0).abs() < 1e-8);
}

#[test]
fn search_reports_acceptance_sets() {
    let v = ok_json(&run(&[
        "search",
        "--input",
        s(&example("search_2x2.json")),
        "--rho",
        "2",
        "--delta",
        "0.5",
        "--r",
        "0.05",
    ]));
    assert_eq!(
        v["outcome"]["accepted"],
        serde_json::json!([[true, false], [false, true]])
    );
    assert_eq!(v["config"]["params"]["rho"], 2.0);
}

#[test]
fn one_to_many_converges_and_reports_failure() {
    let input = example("economy_2x1.json");
    let v = ok_json(&run(&["one-to-many", "--input", s(&input)]));
    assert_eq!(v["outcome"]["status"], "converged");
    assert_eq!(v["outcome"]["experimental"], true);
    assert_eq!(v["outcome"]["bundles"].as_array().unwrap().len(), 6);

    let out = run(&["one-to-many", "--input", s(&input), "--max-iter", "2"]);
    assert_eq!(out.status.code(), Some(3));
    let partial: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(partial["outcome"]["status"], "failed");
    assert_eq!(partial["outcome"]["history"].as_array().unwrap().len(), 2);

    let out = run(&["one-to-many", "--input", s(&input), "--max-bundle-size", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"]["field"], "phi.acme.b=[0,3]");
}
