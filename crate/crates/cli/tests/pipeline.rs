use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ltau::calib::{
    calibration_report, default_levels, ensemble_uncertainty, write_ensemble, write_vectors,
    EnsemblePredictions, GaussianInterval,
};
use ltau::toylab::{evaluate_ltau, generate_task, train, LtauConfig, TaskSpec, TrainConfig};
use ltau::trajlog::{write_descriptor_set, write_pdf_bank, write_trajectory_log, BinGrid, PdfBank};
use ltau::{DescriptorSet, ErrorTrajectoryLog, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn ltau(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltau"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ltau(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

fn csv_column(path: &Path, col: usize) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap()[col].to_string())
        .collect()
}

const SMALL: &[&str] = &[
    "--n-train",
    "400",
    "--n-val",
    "50",
    "--n-test-id",
    "200",
    "--n-test-ood",
    "40",
    "--epochs",
    "12",
    "--seed",
    "3",
];

fn small_run(dir: &Path) {
    let mut args = vec!["toy-train", "--out-dir", "run"];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
    ok(
        dir,
        &[
            "build-pdfs",
            "--errs",
            "run/train.errs",
            "--out",
            "train.pdfb",
        ],
    );
    ok(
        dir,
        &[
            "build-index",
            "--desc",
            "run/train.desc",
            "--out",
            "train.idx",
        ],
    );
    ok(
        dir,
        &[
            "ood-threshold",
            "--desc",
            "run/train.desc",
            "--index",
            "train.idx",
            "--out",
            "cutoff.json",
        ],
    );
}

#[test]
fn cli_predictions_equal_the_library_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    ok(
        dir.path(),
        &[
            "predict",
            "--index",
            "train.idx",
            "--pdfs",
            "train.pdfb",
            "--queries",
            "run/test_id.desc",
            "--out",
            "id.csv",
            "--ood",
            "cutoff.json",
        ],
    );

    let spec = TaskSpec {
        n_train: 400,
        n_val: 50,
        n_test_id: 200,
        n_test_ood: 40,
        seed: 3,
        ..TaskSpec::default()
    };
    let task = generate_task(&spec).unwrap();
    let outcome = train(
        &task,
        &TrainConfig {
            epochs: 12,
            seed: 3,
            ..TrainConfig::default()
        },
        None,
    )
    .unwrap();
    let run = evaluate_ltau(&task, &outcome, &LtauConfig::default()).unwrap();

    let expected = csv_column(&dir.path().join("id.csv"), 1);
    let nn1 = csv_column(&dir.path().join("id.csv"), 2);
    let flags = csv_column(&dir.path().join("id.csv"), 3);
    assert_eq!(expected.len(), run.id.estimates.len());
    for (i, e) in run.id.estimates.iter().enumerate() {
        assert_eq!(
            expected[i].parse::<f64>().unwrap(),
            e.expected_error,
            "query {i}"
        );
        assert_eq!(nn1[i].parse::<f64>().unwrap(), e.nn1_distance, "query {i}");
        assert_eq!(flags[i], e.ood_flag.unwrap().to_string(), "query {i}");
    }
}

#[test]
fn full_pipeline_produces_a_calibration_report() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    ok(
        dir.path(),
        &[
            "predict",
            "--index",
            "train.idx",
            "--pdfs",
            "train.pdfb",
            "--queries",
            "run/test_id.desc",
            "--out",
            "id.csv",
            "--pdf-out",
            "id.pdfb",
            "--include-pdf",
        ],
    );
    ok(
        dir.path(),
        &[
            "calibrate",
            "--pdfs",
            "id.pdfb",
            "--truths",
            "run/test_id.truth",
            "--report",
            "r.json",
            "--curve",
            "c.csv",
        ],
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    let r = &report["report"];
    assert_eq!(r["num_points"], 200);
    assert_eq!(r["method"], "ltau");
    let total = r["area_total"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&total));
    let curve = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert_eq!(curve.lines().count(), 102);
    // Without a cutoff the flag column stays empty; the PDF column is a JSON array.
    let flags = csv_column(&dir.path().join("id.csv"), 3);
    assert!(flags.iter().all(|f| f.is_empty()));
    let pdf: Vec<f64> =
        serde_json::from_str(&csv_column(&dir.path().join("id.csv"), 4)[0]).unwrap();
    assert!((pdf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

fn tiny_inputs(dir: &Path, n: usize) {
    let grid = BinGrid::new(vec![0.0, 1.0, 2.0], Spacing::Linear).unwrap();
    let pdfs: Vec<f64> = (0..n)
        .flat_map(|i| if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    write_pdf_bank(&dir.join("t.pdfb"), &PdfBank::new(grid, n, pdfs).unwrap()).unwrap();
    let rows: Vec<Vec<f32>> = (0..n).map(|i| vec![i as f32, 0.0]).collect();
    write_descriptor_set(
        &dir.join("t.desc"),
        &DescriptorSet::from_rows(&rows).unwrap(),
    )
    .unwrap();
    let q: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32 * 0.5, 0.1]).collect();
    write_descriptor_set(&dir.join("q.desc"), &DescriptorSet::from_rows(&q).unwrap()).unwrap();
    ok(
        dir,
        &[
            "build-index",
            "--desc",
            "t.desc",
            "--out",
            "t.idx",
            "--flat",
        ],
    );
}

#[test]
fn k_above_index_size_warns_and_clamps() {
    let dir = tempfile::tempdir().unwrap();
    tiny_inputs(dir.path(), 3);
    let args = [
        "predict",
        "--index",
        "t.idx",
        "--pdfs",
        "t.pdfb",
        "--queries",
        "q.desc",
    ];
    let clamped = ok(
        dir.path(),
        &[&args[..], &["--k", "50", "--out", "p.csv"]].concat(),
    );
    let warning = stderr_json(&clamped);
    assert!(warning["warning"].as_str().unwrap().contains("k = 50"));
    let full = ok(
        dir.path(),
        &[&args[..], &["--k", "3", "--out", "p3.csv"]].concat(),
    );
    assert!(full.stderr.is_empty());
    assert_eq!(
        fs::read(dir.path().join("p.csv")).unwrap(),
        fs::read(dir.path().join("p3.csv")).unwrap()
    );
}

#[test]
fn grouped_output_aggregates_consecutive_queries() {
    let dir = tempfile::tempdir().unwrap();
    tiny_inputs(dir.path(), 4);
    let base = [
        "predict",
        "--index",
        "t.idx",
        "--pdfs",
        "t.pdfb",
        "--queries",
        "q.desc",
        "--out",
        "p.csv",
        "--k",
        "1",
        "--ood-cutoff",
        "0.3",
    ];
    ok(
        dir.path(),
        &[
            &base[..],
            &[
                "--aggregate",
                "max",
                "--group-size",
                "3",
                "--group-out",
                "g.csv",
            ],
        ]
        .concat(),
    );
    let per_query: Vec<f64> = csv_column(&dir.path().join("p.csv"), 1)
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let flags = csv_column(&dir.path().join("p.csv"), 3);
    let groups: Vec<f64> = csv_column(&dir.path().join("g.csv"), 1)
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let group_flags = csv_column(&dir.path().join("g.csv"), 3);
    assert_eq!(groups.len(), 2);
    for g in 0..2 {
        let chunk = &per_query[3 * g..3 * g + 3];
        assert_eq!(groups[g], chunk.iter().cloned().fold(f64::MIN, f64::max));
        let any = flags[3 * g..3 * g + 3].iter().any(|f| f == "true");
        assert_eq!(group_flags[g], any.to_string());
    }

    let bad = ltau(
        dir.path(),
        &[
            &base[..],
            &[
                "--aggregate",
                "mean",
                "--group-size",
                "4",
                "--group-out",
                "g.csv",
            ],
        ]
        .concat(),
    );
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(stderr_json(&bad)["error"]["kind"], "shape");
}

#[test]
fn failures_report_json_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    tiny_inputs(dir.path(), 3);

    let missing = ltau(
        dir.path(),
        &["build-pdfs", "--errs", "nope.errs", "--out", "x.pdfb"],
    );
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(stderr_json(&missing)["error"]["kind"], "io");

    let usage = ltau(dir.path(), &["predict", "--index", "t.idx"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(stderr_json(&usage)["error"]["kind"], "usage");

    // Bank of 5 rows paired with an index of 3 is refused before any output.
    let grid = BinGrid::new(vec![0.0, 1.0], Spacing::Linear).unwrap();
    write_pdf_bank(
        &dir.path().join("five.pdfb"),
        &PdfBank::new(grid, 5, vec![1.0; 5]).unwrap(),
    )
    .unwrap();
    let args = [
        "predict",
        "--index",
        "t.idx",
        "--pdfs",
        "five.pdfb",
        "--queries",
        "q.desc",
        "--out",
        "p.csv",
    ];
    let mismatch = ltau(dir.path(), &args);
    assert_eq!(mismatch.status.code(), Some(1));
    assert_eq!(stderr_json(&mismatch)["error"]["kind"], "shape");
    assert!(!dir.path().join("p.csv").exists());

    fs::write(dir.path().join("junk.idx"), b"NOTANIDX").unwrap();
    let corrupt = ltau(
        dir.path(),
        &[
            "predict",
            "--index",
            "junk.idx",
            "--pdfs",
            "t.pdfb",
            "--queries",
            "q.desc",
            "--out",
            "p.csv",
        ],
    );
    assert_eq!(corrupt.status.code(), Some(1));
    assert_eq!(stderr_json(&corrupt)["error"]["kind"], "format");
}

#[test]
fn ensemble_calibration_matches_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, n, c) = (4, 50, 3);
    let targets: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    // f32 on disk: draw values that survive the round trip unchanged.
    let data: Vec<f64> = (0..m * n * c)
        .map(|j| f64::from((targets[j % (n * c)] + rng.random_range(-0.2..0.2)) as f32))
        .collect();
    let preds = EnsemblePredictions::new(m, n, c, data).unwrap();
    write_ensemble(&dir.path().join("e.ens"), &preds).unwrap();
    write_vectors(&dir.path().join("t.vec"), 1, n * c, &targets).unwrap();
    ok(
        dir.path(),
        &[
            "calibrate",
            "--ensemble",
            "e.ens",
            "--targets",
            "t.vec",
            "--interval",
            "one-sided",
            "--report",
            "r.json",
            "--curve",
            "c.csv",
        ],
    );
    let expected = calibration_report(
        "ensemble",
        &ensemble_uncertainty(&preds, &targets, GaussianInterval::OneSided).unwrap(),
        &default_levels(101),
    )
    .unwrap();
    let got: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(got["report"], serde_json::to_value(&expected).unwrap());
}

#[test]
fn reweight_writes_weights_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let log = ErrorTrajectoryLog::new(2, 3, vec![0.1, 0.5, 0.9, 0.1, 0.5, 0.9]).unwrap();
    write_trajectory_log(&dir.path().join("t.errs"), &log).unwrap();
    let out = ok(
        dir.path(),
        &[
            "reweight", "--errs", "t.errs", "--scheme", "hard", "--mae", "0.5", "--out", "w",
        ],
    );
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["num_samples"], 3);
    assert_eq!(summary["reference_mae"], 0.5);
    let w = ltau::reweight::read_weights(&dir.path().join("w")).unwrap();
    // d = [1, 0, 0]: an error equal to the MAE is not below it. Stored as f32.
    let hard = f64::from(4.5f64.exp() as f32);
    assert_eq!(w, vec![1.0, hard, hard]);
}

#[test]
fn bench_reports_throughput() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let out = ok(
        dir.path(),
        &[
            "bench",
            "--index",
            "train.idx",
            "--pdfs",
            "train.pdfb",
            "--queries",
            "run/test_id.desc",
            "--repeat",
            "1",
            "--compare-flat",
            "--model",
            "run/model.json",
            "--inputs",
            "run/test_id.inputs",
        ],
    );
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["num_queries"], 200);
    assert!(r["batch_queries_per_second"].as_f64().unwrap() > 0.0);
    let share = r["uq_share_percent"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&share));
}
