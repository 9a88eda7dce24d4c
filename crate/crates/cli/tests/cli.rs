use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn prs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prs"))
        .args(args)
        .env_remove("PRS_CIFAR10_DIR")
        .env_remove("PRS_CIFAR100_DIR")
        .output()
        .expect("running prs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "seed=3",
    "--set",
    "model.image_height=8",
    "--set",
    "model.image_width=8",
    "--set",
    "model.patch=2",
    "--set",
    "model.dim=8",
    "--set",
    "model.depth=2",
    "--set",
    "model.mlp_ratio=2",
    "--set",
    "model.classes=4",
    "--set",
    "schedule.epochs=3",
    "--set",
    "optim.warmup_epochs=1",
    "--set",
    "data.dataset=synthetic",
    "--set",
    "data.synthetic_train=32",
    "--set",
    "data.synthetic_eval=16",
    "--set",
    "augment.crop_pad=1",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.eval_batch=16",
    "--set",
    "train.probe_batch=8",
    "--set",
    "train.checkpoint_every=1",
    "--set",
    "spectral.images=16",
];

fn run_with(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "-q", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    prs(&args)
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn schedule_table_for_four_hundred_epochs() {
    let o = prs(&["schedule", "-t", "400", "-l", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,switch_epoch"));
    let rows: Vec<(usize, u32)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.first(), Some(&(6, 58)));
    assert_eq!(rows.last(), Some(&(1, 343)));
}

#[test]
fn schedule_json_notes_attention_from_the_start() {
    let o = prs(&[
        "schedule", "-t", "10", "-l", "3", "--kind", "all-sa", "--format", "json",
    ]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["note"], "all layers SA from epoch 1");
    assert_eq!(v["switches"].as_array().unwrap().len(), 0);
}

#[test]
fn schedule_rejects_zero_layers() {
    let o = prs(&["schedule", "-t", "10", "-l", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn reparam_check_defaults_pass_and_perturbation_fails() {
    let o = prs(&["reparam-check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pass"], true);

    let o = prs(&["reparam-check", "--perturb", "0.1", "--samples", "5"]);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pass"], false);
}

#[test]
fn reparam_check_rejects_even_kernels() {
    let o = prs(&["reparam-check", "-k", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("kernel size must be odd"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn missing_dataset_directory_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let set = format!("data.path={}", missing.display());
    let o = prs(&[
        "train",
        "-q",
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
        "--set",
        "data.dataset=cifar10",
        "--set",
        &set,
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    let dir = only_run_dir(&tmp.path().join("runs"));
    assert_eq!(manifest(&dir)["status"], "failed");
}

#[test]
fn bad_override_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_with("train", tmp.path(), &["--set", "model.kernel=4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run_with("train", tmp.path(), &["--set", "model.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_then_fourier_on_the_final_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let o = run_with("train", &runs, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(&runs);
    assert!(dir
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .ends_with("-seed3-train"));
    let m = manifest(&dir);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["schedule"]["epochs"], 3);
    for a in m["artifacts"].as_array().unwrap() {
        assert!(dir.join(a.as_str().unwrap()).is_file(), "{a}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let depth = fs::read_to_string(dir.join("depth.csv")).unwrap();
    assert_eq!(depth.lines().count(), 1 + 2 * 3);

    let fourier_out = tmp.path().join("fourier");
    let ckpt = dir.join("final.ckpt");
    let o = prs(&[
        "fourier",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tap",
        "pre-residual",
        "--out",
        fourier_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 2 * 3);
    let fdir = only_run_dir(&fourier_out);
    let fm = manifest(&fdir);
    assert_eq!(fm["status"], "ok");
    assert_eq!(fm["settings"]["tap"], "pre-residual");
    assert!(fdir.join("depth.json").is_file());
}

#[test]
fn schedule_flag_is_overridden_by_set() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_with(
        "train",
        tmp.path(),
        &["--schedule", "all-sa", "--set", "schedule.kind=all-conv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&only_run_dir(tmp.path()));
    assert_eq!(m["config"]["schedule"]["kind"], "all-conv");
}

#[test]
fn resume_continues_an_existing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_with("train", tmp.path(), &["--set", "schedule.epochs=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(tmp.path());
    let first = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let o = prs(&["train", "-q", "--resume", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    // nothing left to train: history is unchanged
    assert_eq!(
        fs::read_to_string(dir.join("metrics.jsonl")).unwrap(),
        first
    );

    let o = prs(&[
        "train",
        "-q",
        "--resume",
        tmp.path().join("absent").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fourier_rejects_a_single_token_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let o = run_with(
        "train",
        &runs,
        &[
            "--set",
            "model.image_height=2",
            "--set",
            "model.image_width=2",
            "--set",
            "augment.crop_pad=0",
            "--set",
            "schedule.epochs=1",
        ],
    );
    // the run trains but its closing depth profile cannot be taken
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let ckpt = only_run_dir(&runs).join("final.ckpt");
    let o = prs(&[
        "fourier",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        tmp.path().join("f").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("2x2"));
}

#[test]
fn fourier_rejects_a_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let o = prs(&[
        "fourier",
        "--checkpoint",
        tmp.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn set_overrides_take_precedence_over_epochs_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_with(
        "interp",
        tmp.path(),
        &["--epochs", "50", "--set", "schedule.epochs=1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        manifest(&only_run_dir(tmp.path()))["config"]["schedule"]["epochs"],
        1
    );
}

#[test]
fn interp_runs_four_settings_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_with(
        "interp",
        tmp.path(),
        &[
            "--set",
            "schedule.epochs=6",
            "--set",
            "train.checkpoint_every=3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(tmp.path());
    let m = manifest(&dir);
    assert_eq!(m["status"], "ok");
    let csv = fs::read_to_string(dir.join("interp.csv")).unwrap();
    assert!(csv.starts_with("setting,switch_epoch,depth,f,delta_log_amp"));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("interp.json")).unwrap()).unwrap();
    let epochs: Vec<u64> = report["settings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["switch_epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [6, 5, 3, 1]);
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("conv")).count(),
        4
    );

    let o = prs(&["interp", "-q", "--resume", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.join("interp.csv")).unwrap(), csv);
}
