use std::process::Command;

fn swd(dir: &std::path::Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_swd"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

const BLOBS: &str = "model = mini_resnet  # narrow on purpose
depth_blocks = 1
base_width = 4
dataset = synthetic
synthetic_shape = 3x8x8
synthetic_classes = 4
synthetic_train = 128
synthetic_test = 64
epochs = 2
batch_size = 32
lr = 0.05
momentum = 0.9
out_dir = runs
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blobs.cfg"), BLOBS).unwrap();
    dir
}

#[test]
fn train_writes_report_history_and_checkpoint() {
    let dir = setup();
    let (code, text) = swd(dir.path(), &["train", "--config", "blobs.cfg", "--name", "base"]);
    assert_eq!(code, 0, "{text}");
    let run = dir.path().join("runs/base");
    for f in ["report.csv", "history.csv", "checkpoint/manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,step,a,train_loss,test_acc,churn,selected_count\n"));
    assert_eq!(history.lines().count(), 3);
    let (code, text) = swd(dir.path(), &["report", "runs/base"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("base"));
    let (code, text) = swd(dir.path(), &["eval", "runs/base/checkpoint"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("test_acc"), "{text}");
}

#[test]
fn stop_and_resume() {
    let dir = setup();
    let args = ["train", "--config", "blobs.cfg", "--method=swd", "--target", "0.5", "--a-min", "1e-1", "--a-max", "1e2"];
    let (code, text) = swd(dir.path(), &[&args[..], &["--name", "whole"]].concat());
    assert_eq!(code, 0, "{text}");
    let (code, text) = swd(dir.path(), &[&args[..], &["--name", "split", "--stop-after", "1"]].concat());
    assert_eq!(code, 0, "{text}");
    assert!(!dir.path().join("runs/split/report.csv").exists());
    let (code, text) = swd(dir.path(), &[&args[..], &["--name", "split", "--resume"]].concat());
    assert_eq!(code, 0, "{text}");
    let read = |n: &str| {
        let r = swd_harness::report::read_reports(&dir.path().join(format!("runs/{n}/report.csv"))).unwrap();
        r.into_iter().next().unwrap()
    };
    assert!(read("whole").same_outcome(&read("split")));
}

#[test]
fn exit_codes_are_distinct() {
    let dir = setup();
    // rejected before anything is loaded or written
    let (code, text) = swd(dir.path(), &["train", "--config", "blobs.cfg", "--method", "swd", "--target", "0.9", "--a-min", "10", "--a-max", "1"]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("a_min"), "{text}");
    assert!(!dir.path().join("runs").exists());
    let (code, _) = swd(dir.path(), &["train", "--config", "blobs.cfg", "--colour", "blue"]);
    assert_eq!(code, 2);
    let (code, text) = swd(dir.path(), &["train", "--dataset", "mnist", "--data-dir", "nowhere"]);
    assert_eq!(code, 3, "{text}");
    let (code, text) = swd(dir.path(), &["train", "--config", "blobs.cfg", "--lr", "1e12", "--name", "boom"]);
    assert_eq!(code, 4, "{text}");
    let (code, text) = swd(
        dir.path(),
        &["train", "--config", "blobs.cfg", "--method", "liu", "--lambda", "1e-4", "--target", "0.95", "--base-width", "2", "--name", "thin"],
    );
    assert_eq!(code, 5, "{text}");
    let rows = swd_harness::report::read_reports(&dir.path().join("runs/thin/report.csv")).unwrap();
    assert_eq!(rows[0].acc_after_removal, 25.0);
    assert!(!rows[0].error.is_empty());
    let (code, text) = swd(dir.path(), &["eval", "runs/none"]);
    assert_eq!(code, 3, "{text}");
}

#[test]
fn grid_prints_the_matrix() {
    let dir = setup();
    let (code, text) = swd(
        dir.path(),
        &["grid", "--config", "blobs.cfg", "--a-min", "1e-1,1e-2", "--a-max", "1e1", "--target", "0.5", "--name", "g", "--epochs", "1"],
    );
    assert_eq!(code, 0, "{text}");
    assert!(text.starts_with("a_max \\ a_min,1e-1,1e-2\n1e1,("), "{text}");
    assert!(dir.path().join("runs/g/grid.csv").exists());
}
