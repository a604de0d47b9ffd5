use nightseg::evalkit;
use nightseg::synth::{Dataset, Taxonomy};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nightseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nightseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(cwd: &Path, name: &str, seed: &str) -> Output {
    let o = nightseg(
        &[
            "gen-data",
            "--out",
            name,
            "--seed",
            seed,
            "--num-source",
            "4",
            "--num-target",
            "4",
            "--num-test",
            "2",
        ],
        cwd,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    o
}

fn digest(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("digest = "))
        .unwrap()
        .to_string()
}

/// The `miou` row of a `report.csv`.
fn report_miou(dir: &Path) -> f64 {
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    csv.lines()
        .find_map(|l| l.strip_prefix("miou,"))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_small(tmp.path(), "a", "3");
    let b = gen_small(tmp.path(), "b", "3");
    let c = gen_small(tmp.path(), "c", "4");
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
    assert!(stdout(&a).contains("num_source = 4"));
}

#[test]
fn gen_data_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nightseg(&["gen-data", "--out", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = Dataset::load(&tmp.path().join("d")).unwrap();
    assert_eq!(
        (data.source.len(), data.target.len(), data.test.len()),
        (200, 200, 50)
    );
}

#[test]
fn user_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nightseg(&["gen-data", "--out", "d", "--num-source", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = nightseg(&["train", "--data", "missing", "--out", "r"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));

    let o = nightseg(
        &[
            "train",
            "--data",
            "missing",
            "--out",
            "r",
            "--set",
            "trainer.alpah=1",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trainer.alpah"), "{}", stderr(&o));

    let o = nightseg(
        &[
            "train",
            "--data",
            "missing",
            "--out",
            "r",
            "--variant",
            "nope",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));

    let o = nightseg(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "0");
    let o = nightseg(
        &[
            "train",
            "--data",
            "d",
            "--out",
            "r",
            "--set",
            "trainer.total_iters=10",
            "--set",
            "trainer.eval_every=5",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "checkpoint.bin",
        "metrics.csv",
        "eval.csv",
        "report.csv",
        "report.md",
        "run.cfg",
    ] {
        assert!(tmp.path().join("r").join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(tmp.path().join("r/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 11);

    let eval = |out: &str| {
        let o = nightseg(
            &[
                "eval",
                "--ckpt",
                "r/checkpoint.bin",
                "--data",
                "d",
                "--out",
                out,
            ],
            tmp.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    eval("e1");
    eval("e2");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    assert_eq!(
        fs::read(e1.join("report.csv")).unwrap(),
        fs::read(e2.join("report.csv")).unwrap()
    );
    assert!(e1.join("pred_00001.ppm").is_file());
    assert!(report_miou(&e1) < 0.2);
}

#[test]
fn baseline_via_set_matches_variant() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "0");
    let common = ["train", "--data", "d", "--set", "trainer.total_iters=3"];
    let by_set = [
        &common[..],
        &[
            "--out",
            "a",
            "--set",
            "dsr.enable=false",
            "--set",
            "fpa.enable=false",
            "--set",
            "trainer.alpha=0",
        ],
    ]
    .concat();
    let by_variant = [&common[..], &["--out", "b", "--variant", "baseline"]].concat();
    assert_eq!(nightseg(&by_set, tmp.path()).status.code(), Some(0));
    assert_eq!(nightseg(&by_variant, tmp.path()).status.code(), Some(0));
    assert_eq!(
        fs::read(tmp.path().join("a/metrics.csv")).unwrap(),
        fs::read(tmp.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn resume_continues_a_stopped_run() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "0");
    let base = [
        "train",
        "--data",
        "d",
        "--set",
        "trainer.total_iters=6",
        "--set",
        "trainer.eval_every=0",
    ];
    assert_eq!(
        nightseg(&[&base[..], &["--out", "full"]].concat(), tmp.path())
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        nightseg(
            &[&base[..], &["--out", "split", "--stop-after", "2"]].concat(),
            tmp.path()
        )
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        nightseg(
            &[&base[..], &["--out", "split", "--resume"]].concat(),
            tmp.path()
        )
        .status
        .code(),
        Some(0)
    );
    for f in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(
            fs::read(tmp.path().join("full").join(f)).unwrap(),
            fs::read(tmp.path().join("split").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_of_ground_truth_dump_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "0");
    let data = Dataset::load(&tmp.path().join("d")).unwrap();
    let tax = Taxonomy::street();
    let preds = tmp.path().join("preds");
    fs::create_dir(&preds).unwrap();
    for (i, (_, y)) in data.test.iter().enumerate() {
        evalkit::render_prediction(y, &tax, &preds.join(format!("pred_{i:05}.ppm"))).unwrap();
    }
    let o = nightseg(&["eval", "--preds", "preds", "--data", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(report_miou(&preds), 1.0);
}

#[test]
fn gradcheck_passes_and_flags_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nightseg(&["gradcheck", "--seeds", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let o = nightseg(
        &["gradcheck", "--seeds", "2", "--corrupt", "matmul"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("matmul"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "d", "0");
    let o = nightseg(
        &[
            "ablate",
            "--data",
            "d",
            "--out",
            "abl",
            "--variants",
            "baseline,full",
            "--seeds",
            "2",
            "--set",
            "trainer.total_iters=2",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let abl = tmp.path().join("abl");
    let runs = fs::read_to_string(abl.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    let table = fs::read_to_string(abl.join("comparison.md")).unwrap();
    assert!(
        table.contains("baseline") && table.contains("full"),
        "{table}"
    );
    assert!(abl.join("full/seed_1/run.cfg").is_file());
}
