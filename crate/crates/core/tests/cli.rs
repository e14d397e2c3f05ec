use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carl-router"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_data(dir: &Path) {
    ok(&cli(
        &[
            "gen-synth",
            "--set",
            "samples_per_split=120,0,60",
            "--set",
            "classes_per_task=3",
            "--out",
            "data",
        ],
        dir,
    ));
}

const TRAIN: [&str; 10] = [
    "train",
    "--set",
    "data_dir=data",
    "--set",
    "bottleneck=8",
    "--set",
    "epochs=3",
    "--set",
    "selector_epochs=3",
    "--out",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args: Vec<&str> = TRAIN.to_vec();
    args.push(out);
    if !extra.contains(&"--tasks") {
        args.extend(["--tasks", "task_1,task_2"]);
    }
    args.extend_from_slice(extra);
    ok(&cli(&args, dir))
}

#[test]
fn gen_synth_is_byte_deterministic_and_creates_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a/nested", "b"] {
        ok(&cli(
            &[
                "gen-synth",
                "--set",
                "seed=1337",
                "--set",
                "samples_per_split=50,10,20",
                "--out",
                out,
            ],
            tmp.path(),
        ));
    }
    let names: Vec<_> = fs::read_dir(tmp.path().join("b"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(names.len() >= 10);
    for name in names {
        let a = fs::read(tmp.path().join("a/nested").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    let bad_fraction = cli(
        &["gen-synth", "--set", "uncertain_fraction=1.5", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(bad_fraction.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_fraction.stderr).contains("uncertain_fraction"));

    assert_eq!(cli(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(
        cli(&["train", "--set", "no_such_key=1", "--out", "r"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        cli(&["train", "--set", "missing-equals", "--out", "r"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    let empty = cli(
        &["ablate", "--axis", "adapter", "--values", "", "--out", "ab"],
        tmp.path(),
    );
    assert_eq!(empty.status.code(), Some(1));
    let strategy = cli(&["eval", "--run", "r", "--strategy", "nearest"], tmp.path());
    assert_eq!(strategy.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["train", "--tasks", "nowhere", "--out", "r"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn repeated_training_reproduces_the_report_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    train(tmp.path(), "r1", &["--trace"]);
    train(tmp.path(), "r2", &["--trace"]);
    for file in [
        "report.txt",
        "config.echo",
        "tables/phases.csv",
        "tables/trace_selector.csv",
        "checkpoints/task_1.ckpt",
    ] {
        let a = fs::read(tmp.path().join("r1").join(file)).unwrap();
        let b = fs::read(tmp.path().join("r2").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn oracle_eval_ignores_a_deleted_selector_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    train(tmp.path(), "run", &[]);
    let before = ok(&cli(&["eval", "--run", "run", "--mode", "oracle"], tmp.path()));
    fs::remove_file(tmp.path().join("run/checkpoints/selector.ckpt")).unwrap();
    fs::remove_file(tmp.path().join("run/checkpoints/selector.manifest")).unwrap();
    let after = ok(&cli(&["eval", "--run", "run", "--mode", "oracle"], tmp.path()));
    assert_eq!(before, after);
    let routed = cli(&["eval", "--run", "run", "--mode", "routed"], tmp.path());
    assert_eq!(routed.status.code(), Some(2));
}

#[test]
fn entropy_eval_emits_a_routing_row() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    train(tmp.path(), "run", &[]);
    let json = ok(&cli(
        &[
            "eval",
            "--run",
            "run",
            "--strategy",
            "entropy",
            "--trace",
            "--out",
            "ev",
        ],
        tmp.path(),
    ));
    assert!(json.contains("\"mode\": \"entropy\""));
    let csv = fs::read_to_string(tmp.path().join("ev/routed_entropy.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("strategy,acc_task_1,acc_task_2,overall,auroc,macro_f1")
    );
    assert!(lines.next().unwrap().starts_with("entropy,"));
    let trace = fs::read_to_string(tmp.path().join("ev/trace_entropy.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 120);
    assert!(tmp.path().join("ev/config.echo").exists());
}

#[test]
fn reversed_and_joint_orders_run() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    let reversed = train(tmp.path(), "rev", &["--tasks", "task_2,task_1"]);
    assert!(reversed.contains("tasks task_2 -> task_1"));
    let joint = train(tmp.path(), "joint", &["--mode", "joint"]);
    assert!(joint.starts_with("mode joint"));
    let phases = fs::read_to_string(tmp.path().join("joint/tables/phases.csv")).unwrap();
    assert_eq!(phases.lines().count(), 2);
}

#[test]
fn report_rerenders_identical_tables() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    train(tmp.path(), "run", &[]);
    let original = fs::read(tmp.path().join("run/tables/routing.csv")).unwrap();
    fs::remove_dir_all(tmp.path().join("run/tables")).unwrap();
    let summary = ok(&cli(&["report", "--run", "run"], tmp.path()));
    assert!(summary.contains("phase,trained"));
    assert_eq!(fs::read(tmp.path().join("run/tables/routing.csv")).unwrap(), original);
}

#[test]
fn parallel_sweep_matches_sequential_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    fs::write(
        tmp.path().join("base.cfg"),
        "# shared sweep base\ntasks = task_1,task_2\ndata_dir = data\nbottleneck = 8\nepochs = 2\nselector_epochs = 2\n",
    )
    .unwrap();
    let base = [
        "ablate",
        "--config",
        "base.cfg",
        "--axis",
        "replay-capacity",
        "--values",
        "0,500,1000",
    ];
    let seq = ok(&cli(&[&base[..], &["--out", "seq"]].concat(), tmp.path()));
    let par = ok(&cli(
        &[&base[..], &["--out", "par", "--parallel", "2"]].concat(),
        tmp.path(),
    ));
    assert_eq!(seq, par);
    assert!(tmp.path().join("par/runs/replay-capacity_500/report.txt").exists());
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&cli(&["gradcheck", "--out", "gc"], tmp.path()));
    assert_eq!(out.lines().filter(|l| l.starts_with("ok")).count(), 4);
    assert!(tmp.path().join("gc/gradcheck.txt").exists());
}
