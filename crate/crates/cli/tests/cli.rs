use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use archrefine::featio::{write_labels_file, write_multihot_file, write_tensor_file, MultiHot, Tensor};

const PROFILE: &str = "classes 4
images_per_class 6
layer conv1 16 uniform 0.3
layer conv2 16 uniform 0.6
layer conv3 16 uniform 0.4
layer conv4 16 uniform 0.2
layer conv5 16 uniform 0.0
layer conv6 16 uniform -0.1
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_archrefine")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic dumps plus their chain network under `dir/data`.
fn synth(dir: &Path) -> (PathBuf, PathBuf) {
    let profile = dir.join("profile.txt");
    fs::write(&profile, PROFILE).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--profile", p(&profile), "--seed", "5", "--out", p(&data)]);
    (data.join("network.ir"), data.join("manifest.txt"))
}

#[test]
fn analyze_writes_heatmaps_and_tallies() {
    let dir = tempfile::tempdir().unwrap();
    let (ir, manifest) = synth(dir.path());
    let out = dir.path().join("run");
    ok(&["analyze", "--ir", p(&ir), "--manifest", p(&manifest), "--out", p(&out)]);
    for i in 1..=6 {
        assert!(out.join(format!("analysis/conv{i}.csv")).is_file());
        let pgm = fs::read(out.join(format!("analysis/conv{i}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    }
    let tallies = fs::read_to_string(out.join("analysis/tallies.csv")).unwrap();
    assert!(tallies.starts_with("block,stage,n_plus,n_minus,n_ties,n_total\nconv2,1,0,12,4,16\n"), "{tallies}");

    // byte-identical on a re-run
    let again = dir.path().join("again");
    ok(&["analyze", "--ir", p(&ir), "--manifest", p(&manifest), "--out", p(&again)]);
    for name in ["conv3.csv", "conv3.pgm", "tallies.csv"] {
        assert_eq!(fs::read(out.join("analysis").join(name)).unwrap(), fs::read(again.join("analysis").join(name)).unwrap());
    }
}

#[test]
fn plan_from_tallies_matches_plan_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (ir, manifest) = synth(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["analyze", "--ir", p(&ir), "--manifest", p(&manifest), "--out", p(&a)]);
    let stdout = ok(&["plan", "--ir", p(&ir), "--tallies", p(&a.join("analysis/tallies.csv")), "--out", p(&a)]);
    assert_eq!(stdout, "lambda_o=0.5625\n");
    ok(&["plan", "--ir", p(&ir), "--manifest", p(&manifest), "--out", p(&b)]);
    let plan = fs::read_to_string(a.join("plans/plan_lambda0.25.txt")).unwrap();
    assert_eq!(plan, fs::read_to_string(b.join("plans/plan_lambda0.25.txt")).unwrap());
    assert!(plan.contains("plan conv2 stretch=1.0 split=4 case=a\n"), "{plan}");
    assert!(plan.contains("plan conv3 stretch=1.5 split=1 case=b\n"), "{plan}");
}

#[test]
fn lambda_above_bound_warns_and_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (ir, manifest) = synth(dir.path());
    let out = run(&["plan", "--ir", p(&ir), "--manifest", p(&manifest), "--lambda", "0.6", "--out", p(dir.path())]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("above lambda_o"));
    let plan = fs::read_to_string(dir.path().join("plans/plan_lambda0.6.txt")).unwrap();
    assert!(plan.lines().filter(|l| l.starts_with("plan ")).all(|l| l.contains("stretch=1.0 split=1 ")), "{plan}");
}

#[test]
fn identity_plan_applies_to_same_network() {
    let dir = tempfile::tempdir().unwrap();
    let (ir, manifest) = synth(dir.path());
    ok(&["plan", "--ir", p(&ir), "--manifest", p(&manifest), "--lambda", "1", "--out", p(dir.path())]);
    ok(&["apply", "--ir", p(&ir), "--plan", p(&dir.path().join("plans/plan_lambda1.0.txt")), "--out", p(dir.path())]);
    assert_eq!(fs::read_to_string(dir.path().join("refined/refined_lambda1.0.ir")).unwrap(), fs::read_to_string(&ir).unwrap());
    let report = fs::read_to_string(dir.path().join("reports/size_refined_lambda1.0.csv")).unwrap();
    assert!(report.ends_with("TOTAL,12048,12048,0.000000\n"), "{report}");
}

#[test]
fn split_two_halves_one_block() {
    let dir = tempfile::tempdir().unwrap();
    let ir = dir.path().join("net.ir");
    fs::write(&ir, "block conv1 in=3 out=96 k=11x11 group=1 stage=0\nblock conv2 in=96 out=256 k=11x11 group=1 stage=1 prev=conv1\nblock conv3 in=256 out=384 k=3x3 group=1 stage=2 prev=conv2\n").unwrap();
    let plan = dir.path().join("plan.txt");
    fs::write(&plan, "lambda=0.25\nlambda_o=0.5\nplan conv1 stretch=1.0 split=1 case=x\nplan conv2 stretch=1.0 split=2 case=a\nplan conv3 stretch=1.0 split=1 case=x\n").unwrap();
    ok(&["apply", "--ir", p(&ir), "--plan", p(&plan), "--out", p(dir.path())]);
    let report = fs::read_to_string(dir.path().join("reports/size_refined_lambda0.25.csv")).unwrap();
    assert!(report.contains("conv2,2973696,1486848,50.000000\n"), "{report}");
}

#[test]
fn sweep_marks_rows_above_bound() {
    let dir = tempfile::tempdir().unwrap();
    let (ir, manifest) = synth(dir.path());
    ok(&["sweep", "--ir", p(&ir), "--manifest", p(&manifest), "--sweep-min", "0.25", "--sweep-max", "0.75", "--sweep-steps", "3", "--out", p(dir.path())]);
    let mut reader = csv::Reader::from_path(dir.path().join("reports/sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[2][0], "0.75");
    assert_eq!(&rows[2][1], "true");
    assert_eq!(&rows[2][2], "12048");
    assert_eq!(&rows[0][1], "false");
}

#[test]
fn iterate_one_round_equals_apply() {
    let dir = tempfile::tempdir().unwrap();
    let (ir, manifest) = synth(dir.path());
    ok(&["iterate", "--ir", p(&ir), "--manifest", p(&manifest), "--out", p(dir.path())]);
    ok(&["plan", "--ir", p(&ir), "--manifest", p(&manifest), "--out", p(dir.path())]);
    ok(&["apply", "--ir", p(&ir), "--plan", p(&dir.path().join("plans/plan_lambda0.25.txt")), "--out", p(dir.path())]);
    assert_eq!(
        fs::read_to_string(dir.path().join("refined/round1.ir")).unwrap(),
        fs::read_to_string(dir.path().join("refined/refined_lambda0.25.ir")).unwrap()
    );
    // the second round needs its own dumps
    let out = run(&["iterate", "--ir", p(&ir), "--manifest", p(&manifest), "--rounds", "2", "--out", p(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let (ir, _) = synth(dir.path());
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert!(!run(&["analyze", "--ir", p(&ir), "--manifest", p(&empty), "--out", p(dir.path())]).status.success());
    assert!(!run(&["plan", "--ir", p(&ir), "--out", p(dir.path())]).status.success());
    assert!(!run(&["plan", "--ir", p(&ir), "--tallies", "missing.csv", "--lambda", "0", "--out", p(dir.path())]).status.success());
}

#[test]
fn strict_mode_names_degenerate_layer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("net.ir"), "block c1 in=3 out=2 k=1x1 group=1 stage=0\nblock c2 in=2 out=2 k=1x1 group=1 stage=1 prev=c1\n").unwrap();
    // class 0 has the same activation on both features in c2
    write_tensor_file(d.join("c1.atns"), &Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    write_tensor_file(d.join("c2.atns"), &Tensor::new(vec![2, 2], vec![3.0, 3.0, 0.0, 1.0]).unwrap()).unwrap();
    write_labels_file(d.join("labels.atlb"), &[0, 1]).unwrap();
    fs::write(d.join("manifest.txt"), "layer c1 c1.atns\nlayer c2 c2.atns\nlabels labels.atlb\n").unwrap();
    let (ir, manifest) = (d.join("net.ir"), d.join("manifest.txt"));
    let args = ["analyze", "--ir", p(&ir), "--manifest", p(&manifest), "--out", p(d)];
    assert!(run(&args).status.success());
    let mut strict = args.to_vec();
    strict.push("--strict-degenerate");
    let out = run(&strict);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("c2"));
}

#[test]
fn precision_reads_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tensor_file(d.join("scores.atns"), &Tensor::new(vec![2, 3], vec![0.9, 0.5, 0.1, 0.2, 0.3, 0.8]).unwrap()).unwrap();
    write_multihot_file(d.join("truth.atmh"), &MultiHot::from_rows(&[vec![1, 1, 0], vec![1, 0, 0]]).unwrap()).unwrap();
    let stdout = ok(&["precision", "--scores", p(&d.join("scores.atns")), "--truth", p(&d.join("truth.atmh")), "--k", "2", "--out", p(d)]);
    assert_eq!(stdout, "precision@2=0.666667 tp=2 fp=1 evaluated=2 skipped=0\n");
    assert_eq!(fs::read_to_string(d.join("reports/precision.txt")).unwrap(), stdout);
}
