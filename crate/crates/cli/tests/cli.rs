use std::path::Path;
use std::process::{Command, Output};

use pillardet::container;
use pillardet::kitti::{fov_filter, read_velodyne_bin, CalibMatrices};

fn pillardet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pillardet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pillardet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two synthetic frames, written once per test.
fn dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["--seed", "1", "--out", p(&data), "synth", "--frames", "2"]);
    data
}

#[test]
fn exit_codes_distinguish_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[loss]\nbeta_lok = 2.0\n").unwrap();
    assert_eq!(pillardet(&["--config", p(&cfg), "selfcheck"]).status.code(), Some(2));
    std::fs::write(&cfg, "[postproc]\nnms_iou = 3.0\n").unwrap();
    assert_eq!(pillardet(&["--config", p(&cfg), "selfcheck"]).status.code(), Some(2));
    // a missing data root is a configuration problem, a missing scan a data problem
    assert_eq!(pillardet(&["pillarize"]).status.code(), Some(2));
    let missing = dir.path().join("nope.bin");
    assert_eq!(pillardet(&["pillarize", "--input", p(&missing)]).status.code(), Some(3));
    assert_eq!(pillardet(&["--jobs", "0", "selfcheck"]).status.code(), Some(2));
}

#[test]
fn corrupt_weights_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let w = dir.path().join("w.bin");
    std::fs::write(&w, b"not a container").unwrap();
    let out = pillardet(&["--data-root", p(&data), "--weights", p(&w), "--out", p(&dir.path().join("r")), "infer"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}

#[test]
fn eval_of_labels_against_themselves_and_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let labels = data.join("label_2");
    // labels carry no score; every entry then counts as a detection scored 1
    let perfect = dir.path().join("perfect");
    std::fs::create_dir(&perfect).unwrap();
    for e in std::fs::read_dir(&labels).unwrap() {
        let e = e.unwrap();
        let text = std::fs::read_to_string(e.path()).unwrap();
        let scored: String = text.lines().map(|l| format!("{l} 1\n")).collect();
        std::fs::write(perfect.join(e.file_name()), scored).unwrap();
    }
    let report = ok(&["--data-root", p(&data), "eval", "--results", p(&perfect)]);
    let car: Vec<&str> = report.lines().filter(|l| l.starts_with("Car")).collect();
    assert_eq!(car.len(), 2, "{report}");
    for line in car {
        assert!(line.split_whitespace().skip(2).all(|v| v == "1.0000" || v == "-"), "{line}");
    }

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    for id in ["000000", "000001"] {
        std::fs::write(empty.join(format!("{id}.txt")), "").unwrap();
    }
    let report = ok(&["--data-root", p(&data), "eval", "--results", p(&empty)]);
    for line in report.lines().filter(|l| l.starts_with("Car")) {
        assert!(line.split_whitespace().skip(2).all(|v| v == "0.0000" || v == "-"), "{line}");
    }

    std::fs::remove_file(empty.join("000001.txt")).unwrap();
    let out = pillardet(&["--data-root", p(&data), "eval", "--results", p(&empty)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame sets differ"));
}

#[test]
fn perfect_predictions_have_near_zero_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = ok(&["--data-root", p(&data), "loss", "--frame", "000000", "--perfect", "--coords", "300"]);
    let total: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("total"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(total < 1e-3, "{out}");
    assert!(out.contains("N_pos"));
}

#[test]
fn loss_on_a_frame_without_objects_flags_no_positives() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    std::fs::write(data.join("label_2/000001.txt"), "").unwrap();
    let out = ok(&["--data-root", p(&data), "loss", "--frame", "000001", "--perfect", "--coords", "50"]);
    assert!(out.contains("no positives"), "{out}");
}

#[test]
fn identity_augmentation_leaves_the_frame_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = dir.path().join("id.toml");
    std::fs::write(
        &cfg,
        "[augment]\nsample_counts = [0, 0, 0]\nbox_rotation = 0.0\nbox_translation_std = 0.0\n\
         flip_probability = 0.0\nglobal_rotation = 0.0\nscale_range = [1.0, 1.0]\nglobal_translation_std = 0.0\n",
    )
    .unwrap();
    let dump = dir.path().join("aug.bin");
    ok(&["--config", p(&cfg), "--data-root", p(&data), "--out", p(&dump), "augment", "--frame", "000000"]);
    let t = container::read(&dump).unwrap();
    let raw = read_velodyne_bin(&data.join("velodyne/000000.bin")).unwrap();
    let pts = fov_filter(&raw, &CalibMatrices::permutation(), 1242.0, 375.0);
    let got = &t["scene.points"];
    assert_eq!(got.shape, vec![pts.len(), 4]);
    let want: Vec<f32> = pts.iter().flat_map(|q| [q.x, q.y, q.z, q.r]).collect();
    assert_eq!(got.data, want);
}

#[test]
fn augmentation_adds_at_most_the_sample_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let dump = dir.path().join("aug.bin");
    let out = ok(&["--seed", "3", "--data-root", p(&data), "--out", p(&dump), "augment"]);
    let counts: Vec<usize> = out
        .lines()
        .find_map(|l| l.strip_prefix("boxes"))
        .unwrap()
        .split("->")
        .map(|v| v.trim().parse().unwrap())
        .collect();
    assert!(counts[1] >= counts[0] && counts[1] <= counts[0] + 15 + 0 + 8, "{out}");
}

#[test]
fn pillarize_dumps_a_checked_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let dump = dir.path().join("pillars.bin");
    let out = ok(&["--data-root", p(&data), "--out", p(&dump), "pillarize", "--frame", "000001"]);
    assert!(out.contains("pillars=") && out.contains("sparsity="), "{out}");
    let t = container::read(&dump).unwrap();
    assert!(t.values().any(|v| v.shape == vec![9, 12000, 100]), "{:?}", t.keys().collect::<Vec<_>>());
}

#[test]
fn bench_reports_every_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.toml");
    std::fs::write(&cfg, "[bench]\nrepeats = 1\n[synth]\nazimuth_steps = 500\n").unwrap();
    let out = ok(&["--config", p(&cfg), "bench"]);
    for r in ["0.12", "0.16", "0.20", "0.24", "0.28"] {
        assert!(out.lines().any(|l| l.trim_start().starts_with(r)), "{r} missing:\n{out}");
    }
    assert!(out.contains("pillar count non-increasing: yes"), "{out}");
}

#[test]
fn synth_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--seed", "9", "--out", p(&a), "synth", "--frames", "1"]);
    ok(&["--seed", "9", "--out", p(&b), "synth", "--frames", "1"]);
    for f in ["velodyne/000000.bin", "label_2/000000.txt", "calib/000000.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn par_map_keeps_input_order() {
    let items: Vec<u64> = (0..37).collect();
    for jobs in [1, 2, 3, 8, 64] {
        let out = pillardet_cli::commands::par_map(&items, jobs, |i, v| (i as u64, v * v));
        assert_eq!(out, items.iter().map(|&v| (v, v * v)).collect::<Vec<_>>(), "jobs {jobs}");
    }
}
