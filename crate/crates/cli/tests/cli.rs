use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn monosim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monosim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = monosim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generated_scenes_filter_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-scenes", "--seed", "5", "--count", "3", "--out-dir", s(&data)]);
    for sub in ["scenes", "label_2", "calib", "teacher"] {
        assert_eq!(fs::read_dir(data.join(sub)).unwrap().count(), 3, "{sub}");
    }

    // threshold 0 keeps everything; raising it never keeps more
    let all = data.join("all");
    ok(&["filter-labels", "--in-dir", s(&data.join("teacher")), "--out-dir", s(&all), "--car-threshold", "0"]);
    for f in fs::read_dir(data.join("teacher")).unwrap() {
        let f = f.unwrap().path();
        let kept = fs::read_to_string(all.join(f.file_name().unwrap())).unwrap();
        assert_eq!(kept, fs::read_to_string(&f).unwrap());
    }
    let kept = |t: &str| -> usize {
        let out = data.join(format!("t{t}"));
        let msg = ok(&["filter-labels", "--in-dir", s(&data.join("teacher")), "--out-dir", s(&out), "--car-threshold", t]);
        msg.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    let counts: Vec<usize> = ["0", "0.5", "0.9", "1"].into_iter().map(kept).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");

    let csv = dir.path().join("render.csv");
    ok(&["render-debug", "--scene", s(&data.join("scenes/000000.json")), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..3], ["row", "col", "valid"]);
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 32 * 64);
    // the mask column is exactly "channel sum nonzero"
    for r in &rows {
        assert_eq!(r.len(), header.len());
        let valid = r[3..].iter().sum::<f64>() != 0.0;
        assert_eq!(r[2], if valid { 1.0 } else { 0.0 });
    }
    assert!(rows.iter().any(|r| r[2] == 1.0));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    fs::write(&cfg, "# short run\ntrain_scenes = 2\neval_scenes = 2\n").unwrap();
    let ckpt = dir.path().join("model.json");
    let metrics = dir.path().join("metrics.csv");
    ok(&[
        "train", "--config", s(&cfg), "--steps", "4", "--seed", "2",
        "--out-checkpoint", s(&ckpt), "--metrics-csv", s(&metrics),
    ]);
    let csv = fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,L,L_response,L_scene,L_RoI,alpha,beta");
    assert_eq!(lines.len(), 5);
    for (i, line) in lines[1..].iter().enumerate() {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[0], i as f64);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    let report = ok(&["eval", "--checkpoint", s(&ckpt), "--iou", "0.5", "--recall-set", "R11"]);
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "class,iou_threshold,recall_set,ap");
    assert!(rows[1].starts_with("Car,0.5,R11,"));
    let ap: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    assert!(rows[2].ends_with("NaN"));

    let data = dir.path().join("data");
    ok(&["gen-scenes", "--seed", "1", "--count", "2", "--out-dir", s(&data)]);
    let from_dir = ok(&["eval", "--checkpoint", s(&ckpt), "--scenes", s(&data)]);
    assert!(from_dir.lines().nth(1).unwrap().starts_with("Car,0.5,R40,"));
}

#[test]
fn gradient_suite_passes() {
    let out = ok(&["check-grads"]);
    assert!(out.lines().count() >= 7);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "steps = 3\nnot_a_key = 1\n").unwrap();
    let out = monosim(&["train", "--config", s(&cfg), "--out-checkpoint", s(&dir.path().join("m.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let labels = dir.path().join("labels");
    fs::create_dir(&labels).unwrap();
    fs::write(labels.join("000000.txt"), "Car 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1.6 10 0\nCar 1 2\n").unwrap();
    let out = monosim(&["filter-labels", "--in-dir", s(&labels), "--out-dir", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = monosim(&["eval", "--checkpoint", s(&dir.path().join("missing.json"))]);
    assert!(!out.status.success());
}
