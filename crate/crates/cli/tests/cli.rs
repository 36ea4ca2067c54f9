use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn evclplus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evclplus"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
# two small synthetic tasks
benchmark = synthetic
methods = vcl, evclplus
seeds = 1, 2
n_tasks = 2
epochs = 2
batch_size = 16
hidden_dims = 8
fisher_samples = 30
eval_samples = 2
synthetic_per_class = 30
synthetic_dim = 5
";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn selftest_passes() {
    let o = evclplus(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 5);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn run_writes_tables_and_plot_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");

    let o = evclplus(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = evclplus(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let raw_a = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(raw_a, fs::read(b.join("results.csv")).unwrap());
    let raw = String::from_utf8(raw_a).unwrap();
    assert!(raw.starts_with("method,seed,after_task,eval_task,accuracy\n"));
    assert_eq!(raw.lines().count(), 1 + 2 * 2 * 3);
    let agg = fs::read_to_string(a.join("results_aggregate.csv")).unwrap();
    assert!(agg.starts_with("method,after_task,avg_accuracy_mean,avg_accuracy_std,forgetting_mean\n"));
    assert_eq!(agg.lines().count(), 1 + 2 * 2);
    assert!(fs::read_to_string(a.join("accuracy.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn out_dir_from_config_is_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}out_dir = here\nmethods_unused = 1\n"));
    let o = evclplus(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 14"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &format!("{TINY}out_dir = here\n"));
    let o = evclplus(&["run", "--config", &cfg, "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("here/results.csv").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "benchmark = synthetic\nmethods = vcl\nlambda = abc\n");
    let o = evclplus(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config line 3"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "methods = vcl\n");
    let o = evclplus(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("benchmark"));

    let o = evclplus(&["run", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = evclplus(&["run"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "benchmark = split_mnist\nmethods = vcl\nmnist_images = none1\nmnist_labels = none2\n\
         mnist_test_images = none3\nmnist_test_labels = none4\n",
    );
    let o = evclplus(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("none1"), "{}", stderr(&o));
}

#[test]
fn plot_reads_raw_and_aggregate_tables() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("r.csv");
    fs::write(
        &raw,
        "method,seed,after_task,eval_task,accuracy\nvcl,0,1,1,0.9\nvcl,0,2,1,0.8\nvcl,0,2,2,1.0\n",
    )
    .unwrap();
    let svg = dir.path().join("p.svg");
    let o = evclplus(&["plot", "--results", raw.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 1);

    let agg = dir.path().join("a.csv");
    fs::write(
        &agg,
        "method,after_task,avg_accuracy_mean,avg_accuracy_std,forgetting_mean\nvcl,1,0.9,0,0\newc,1,0.5,0,0\n",
    )
    .unwrap();
    let o = evclplus(&["plot", "--results", agg.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 2);

    fs::write(&agg, "not,a,table\n").unwrap();
    let o = evclplus(&["plot", "--results", agg.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
