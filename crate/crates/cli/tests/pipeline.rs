//! End-to-end smoke test: the whole pipeline on a tiny dataset through the
//! real binary, plus idempotency and error-reporting contracts.

use std::path::Path;
use std::process::{Command, Output};

fn pips(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pips"))
        .args(args)
        .env_remove("PIPS_SEED")
        .output()
        .expect("spawning the pips binary")
}

fn expect_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every command prints one JSON object on success.
fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stdout is not JSON: {text}"))
}

fn tiny_sets() -> Vec<String> {
    [
        "data.n_train=2",
        "data.n_test=1",
        "net.k_init=2",
        "net.receptive_field=3",
        "net.n_supports=3",
        "net.widths=4",
        "net.downsample=0:2",
        "net.propagation_k=2",
        "net.head_widths=8",
        "teacher.epochs=2",
        "teacher.steps_per_epoch=1",
        "teacher.batch=2",
        "teacher.input_points=16",
        "teacher.queries_per_cloud=8",
        "teacher.dense_pool=64",
        "pseudo_gt.n_probe=128",
        "pseudo_gt.h=4",
        "pseudo_gt.input_points=16",
        "pseudo_gt.fraction=0.5",
        "pips.epochs=2",
        "pips.batch=2",
        "pips.input_points=16",
        "pips.anneal_epochs=2",
        "student.epochs=2",
        "student.steps_per_epoch=1",
        "student.batch=2",
        "student.input_points=16",
        "student.random_budget=16",
        "eval.observed_n=16",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

/// Subcommand and its flags first, the `--set` overrides after.
fn with_sets(sets: Vec<String>, args: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    v.extend(sets);
    v
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let data_s = data.to_str().unwrap();
    let run_s = run.to_str().unwrap();

    // Dataset generation, then idempotency without and with --force.
    let args: Vec<String> =
        with_sets(tiny_sets(), &["gen-data", "--out", data_s]);
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = pips(&argrefs);
    expect_ok(&out, "gen-data");
    let summary = stdout_json(&out);
    assert_eq!(summary["samples"]["train"], 8); // 2 per family
    assert_eq!(summary["samples"]["test_clean"], 4);
    assert!(data.join("train/0000.ply").is_file());
    assert!(data.join("train/0000.json").is_file());
    assert!(data.join("config.echo").is_file());

    let out = pips(&argrefs);
    assert!(!out.status.success(), "gen-data must refuse to overwrite");
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("--force"));
    let mut forced = args.clone();
    forced.push("--force".to_string());
    let forcedrefs: Vec<&str> = forced.iter().map(|s| s.as_str()).collect();
    expect_ok(&pips(&forcedrefs), "gen-data --force");

    // Stage 1: teacher (exercises the gradient self-check once).
    let args = with_sets(
        tiny_sets(),
        &["train-teacher", "--data", data_s, "--run", run_s],
    );
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = pips(&argrefs);
    expect_ok(&out, "train-teacher");
    assert!(String::from_utf8_lossy(&out.stderr).contains("self-check passed"));
    assert!(run.join("checkpoints/teacher.ckpt").is_file());
    assert!(run.join("checkpoints/teacher.net.json").is_file());
    assert!(run.join("curves/teacher.csv").is_file());
    assert!(run.join("config.echo").is_file());
    let out = pips(&argrefs);
    assert!(!out.status.success(), "train-teacher must refuse to overwrite");

    // Stage 1b: pseudo-ground-truth export.
    let args = with_sets(
        tiny_sets(),
        &["make-pseudo-gt", "--data", data_s, "--run", run_s],
    );
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = pips(&argrefs);
    expect_ok(&out, "make-pseudo-gt");
    assert_eq!(stdout_json(&out)["records"], 4);
    assert_eq!(count_files(&run.join("pseudo_gt"), "pgt"), 4);

    // Stage 2: classifier plus gate.
    let args = with_sets(
        tiny_sets(),
        &["train-pips", "--data", data_s, "--run", run_s, "--skip-gradcheck"],
    );
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    expect_ok(&pips(&argrefs), "train-pips");
    assert!(run.join("checkpoints/pips.ckpt").is_file());
    assert!(run.join("curves/pips.csv").is_file());

    // Stage 3: one sampling-based student and the random baseline.
    for mode in ["pips-s", "random"] {
        let args = with_sets(
            tiny_sets(),
            &[
                "train-student",
                "--data",
                data_s,
                "--run",
                run_s,
                "--mode",
                mode,
                "--skip-gradcheck",
            ],
        );
        let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        let out = pips(&argrefs);
        expect_ok(&out, "train-student");
        assert!(run
            .join(format!("checkpoints/student-{mode}.ckpt"))
            .is_file());
        assert!(run.join(format!("stats/student-{mode}.json")).is_file());
    }

    // Evaluation: oracle short-circuit and a trained student.
    let args = with_sets(
        tiny_sets(),
        &[
            "eval", "--data", data_s, "--run", run_s, "--split", "test_clean", "--oracle",
        ],
    );
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = pips(&argrefs);
    expect_ok(&out, "eval --oracle");
    let summary = stdout_json(&out);
    assert_eq!(summary["n_valid"], 4);
    assert!(summary["median_rot_deg"].as_f64().unwrap() < 1e-6);
    assert!(run.join("metrics/oracle-test_clean-observed.csv").is_file());

    let args = with_sets(
        tiny_sets(),
        &[
            "eval", "--data", data_s, "--run", run_s, "--split", "test_clean", "--student",
            "random",
        ],
    );
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = pips(&argrefs);
    expect_ok(&out, "eval --student random");
    let summary = stdout_json(&out);
    assert_eq!(summary["n_total"], 4);
    assert!(run.join("metrics/random-test_clean-observed.json").is_file());

    // Point-set export: an untrained gate may select nothing, which must
    // surface as a structured error rather than a panic.
    let export = tmp.path().join("points");
    let args = with_sets(
        tiny_sets(),
        &[
            "sample-points",
            "--data",
            data_s,
            "--run",
            run_s,
            "--out",
            export.to_str().unwrap(),
        ],
    );
    let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = pips(&argrefs);
    if out.status.success() {
        assert_eq!(count_files(&export, "ply"), 2);
    } else {
        let err: serde_json::Value =
            serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
        assert!(err["error"].is_string());
    }

    // Report over everything written so far.
    let out = pips(&["report", "--run", run_s]);
    expect_ok(&out, "report");
    assert!(run.join("report/report.md").is_file());
    assert!(run.join("report/curves.svg").is_file());
    assert!(run.join("report/precision.svg").is_file());
    let md = std::fs::read_to_string(run.join("report/report.md")).unwrap();
    assert!(md.contains("oracle-test_clean-observed"));
    assert!(md.contains("| random |"));
}

fn count_files(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == ext))
                .count()
        })
        .unwrap_or(0)
}

#[test]
fn unknown_config_key_is_a_structured_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pips(&[
        "gen-data",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--set",
        "teacher.typo=1",
    ]);
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("teacher.typo"));
}

#[test]
fn env_seed_overrides_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let out = Command::new(env!("CARGO_BIN_EXE_pips"))
        .args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--set",
            "data.n_train=4",
            "--set",
            "data.n_test=2",
        ])
        .env("PIPS_SEED", "99")
        .output()
        .unwrap();
    expect_ok(&out, "gen-data with PIPS_SEED");
    let echo = std::fs::read_to_string(data.join("config.echo")).unwrap();
    assert!(echo.contains("master_seed = 99"));
    assert!(echo.contains("seed = 99"));
}
