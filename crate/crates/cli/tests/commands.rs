use std::fs;
use std::path::Path;
use std::process::Command;

use deepavo::flow::read_flo;
use deepavo::geometry::{format_kitti_poses, read_kitti_poses, PoseMatrix};
use deepavo::model::{DeepAvo, ModelConfig};
use deepavo::texture::ValueNoise;
use deepavo::train::{save_checkpoint, Checkpoint, HistorySummary};
use deepavo_cli::{run, CliError, RunConfig};

fn run_ok(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut full = vec!["deepavo"];
    full.extend_from_slice(args);
    if let Err(e) = run(full, &mut out) {
        panic!("{args:?} failed: {e}");
    }
    String::from_utf8(out).unwrap()
}

fn run_err(args: &[&str]) -> CliError {
    let mut out = Vec::new();
    let mut full = vec!["deepavo"];
    full.extend_from_slice(args);
    run(full, &mut out).expect_err("command should fail")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn save_png(path: &Path, img: &deepavo::flow::GrayImage) {
    let dir = tempfile::tempdir().unwrap();
    deepavo::dataset::write_sequence(dir.path(), std::slice::from_ref(img), None).unwrap();
    fs::copy(dir.path().join("image_2/000000.png"), path).unwrap();
}

fn straight(n: usize, step: f64) -> Vec<PoseMatrix> {
    (0..n).map(|i| PoseMatrix::planar(0.0, i as f64 * step, 0.0)).collect()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_width: 64,
        input_height: 32,
        head_hidden: vec![8, 4],
        ..ModelConfig::desk()
    }
}

fn zero_head_checkpoint(path: &Path, cfg: ModelConfig) {
    let mut m = DeepAvo::new(cfg, 3).unwrap();
    for (w, b) in &mut m.head.layers {
        w.value.data_mut().fill(0.0);
        b.value.data_mut().fill(0.0);
    }
    save_checkpoint(&Checkpoint::from_model(&m, None, 0, HistorySummary::default()), path).unwrap();
}

#[test]
fn config_file_parsing() {
    let c = RunConfig::from_text("# comment\nseed = 9  # trailing\n\ntrain.alpha=10\nmodel.head_hidden = 32, 16\neval.align = similarity\n").unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.train.alpha, 10.0);
    assert_eq!(c.model.head_hidden, vec![32, 16]);
    assert_eq!(c.align, deepavo::eval::AlignMode::Similarity);
    let e = RunConfig::from_text("seed = 1\ntrain.alhpa = 3\n").unwrap_err();
    assert!(e.to_string().contains("train.alhpa") && e.to_string().contains("line 2"), "{e}");
    let e = RunConfig::from_text("train.alpha = lots\n").unwrap_err();
    assert!(e.to_string().contains("train.alpha"));
    assert!(RunConfig::from_text("just words\n").is_err());
    for k in deepavo_cli::config::KEYS {
        let mut c = RunConfig::default();
        let e = c.set(k, "@@");
        assert!(!matches!(e, Err(deepavo_cli::ConfigError::UnknownKey { .. })), "{k} not handled");
    }
}

#[test]
fn unknown_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 3\nbogus.key = 1\n").unwrap();
    let e = run_err(&["--config", s(&cfg), "synth", "--n", "0", "--out", s(&dir.path().join("o"))]);
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("bogus.key"));
    let e = run_err(&["--set", "nope=1", "synth", "--n", "0", "--out", s(dir.path())]);
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("nope"));
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_deepavo");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "train.bogus = 1\n").unwrap();
    let o = Command::new(exe).args(["--config", s(&cfg), "train", "--data", "synthetic"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.bogus"));

    let o = Command::new(exe)
        .args(["flow", "--in-a", "/nonexistent/a.png", "--in-b", "/nonexistent/b.png", "--out", "x.flo"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "1 2 3\n").unwrap();
    let o = Command::new(exe).args(["eval", "--gt", s(&bad), "--est", s(&bad)]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(exe).args(["synth", "--n", "0", "--out", s(&dir.path().join("e"))]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(exe).args(["frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flow_command() {
    let dir = tempfile::tempdir().unwrap();
    let tex = ValueNoise::new(4, 3, 12.0);
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    let c = dir.path().join("c.png");
    save_png(&a, &tex.image(96, 64, 0.0, 0.0));
    save_png(&b, &tex.image(96, 64, 2.0, -1.0));
    save_png(&c, &tex.image(80, 64, 0.0, 0.0));
    let flo = dir.path().join("f.flo");
    let out = run_ok(&["flow", "--in-a", s(&a), "--in-b", s(&a), "--out", s(&flo)]);
    assert!(out.contains("mean flow magnitude: 0.0000"), "{out}");
    let out = run_ok(&["flow", "--in-a", s(&a), "--in-b", s(&b), "--out", s(&flo), "--window", "15", "--levels", "3"]);
    let m: f64 = out.split_whitespace().nth(3).unwrap().parse().unwrap();
    let want = 5f64.sqrt();
    assert!((m - want).abs() < 0.1 * want, "{m}");
    assert_eq!(read_flo(&flo).unwrap().width, 96);
    assert_eq!(run_err(&["flow", "--in-a", s(&a), "--in-b", s(&c), "--out", s(&flo)]).exit_code(), 2);
    assert_eq!(run_err(&["flow", "--in-a", s(&a), "--in-b", "/missing.png", "--out", s(&flo)]).exit_code(), 2);
}

#[test]
fn synth_command() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    run_ok(&["synth", "--n", "0", "--out", s(&empty)]);
    assert_eq!(fs::read_to_string(empty.join("manifest.csv")).unwrap(), "pair,prev,next,dp,dphi\n");

    let d = dir.path().join("three");
    run_ok(&["--set", "synth.width=64", "--set", "synth.height=32", "--set", "synth.focal=60", "synth", "--n", "3", "--seed", "5", "--out", s(&d)]);
    assert_eq!(fs::read_dir(d.join("image_2")).unwrap().count(), 4);
    assert_eq!(read_kitti_poses(d.join("poses.txt")).unwrap().len(), 4);
    let m = fs::read_to_string(d.join("manifest.csv")).unwrap();
    assert_eq!(m.lines().count(), 4);
    assert!(m.lines().nth(1).unwrap().starts_with("0,image_2/000000.png,image_2/000001.png,"));
    let d2 = dir.path().join("again");
    run_ok(&["--set", "synth.width=64", "--set", "synth.height=32", "--set", "synth.focal=60", "synth", "--n", "3", "--seed", "5", "--out", s(&d2)]);
    assert_eq!(fs::read(d.join("image_2/000003.png")).unwrap(), fs::read(d2.join("image_2/000003.png")).unwrap());
}

fn tiny_args(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "synth.width=64",
        "synth.height=32",
        "synth.focal=60",
        "model.input_width=64",
        "model.input_height=32",
        "model.head_hidden=8,4",
        "train.batch_size=2",
        "train.max_steps=3",
        "synth.n=4",
        "flow.levels=1",
        "flow.window=7",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn train_and_track_small() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let args = tiny_args(&["train", "--data", "synthetic", "--out", s(&ck)]);
    let a: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run_ok(&a);
    assert!(out.contains("final train loss"), "{out}");
    let hist = fs::read_to_string(dir.path().join("m.ckpt.history.csv")).unwrap();
    assert!(hist.starts_with("epoch,train_loss,val_loss,lr\n"));
    let first = fs::read(&ck).unwrap();
    run_ok(&a);
    assert_eq!(fs::read(&ck).unwrap(), first);

    // the same sequence on disk trains to the same checkpoint
    let seq = dir.path().join("seq");
    let args = tiny_args(&["synth", "--out", s(&seq)]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let ck2 = dir.path().join("disk.ckpt");
    let args = tiny_args(&["train", "--data", s(&seq), "--out", s(&ck2)]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    // labels come back from rounded pose text, so compare losses, not bytes
    let losses = |p: &Path| -> Vec<f64> {
        fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
    };
    let (l1, l2) = (losses(&dir.path().join("m.ckpt.history.csv")), losses(&dir.path().join("disk.ckpt.history.csv")));
    assert_eq!(l1.len(), l2.len());
    for (a, b) in l1.iter().zip(&l2) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12), "{a} vs {b}");
    }

    let est = dir.path().join("est.txt");
    let args = tiny_args(&["track", "--images", s(&seq), "--checkpoint", s(&ck), "--out", s(&est)]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read_to_string(&est).unwrap().lines().count(), 5);
}

#[test]
fn track_identical_images_with_zero_head() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("zero.ckpt");
    zero_head_checkpoint(&ck, tiny_model_config());
    let imgs = dir.path().join("imgs");
    let tex = ValueNoise::new(2, 3, 10.0).image(64, 32, 0.0, 0.0);
    deepavo::dataset::write_sequence(&imgs, &[tex.clone(), tex.clone()], None).unwrap();
    let est = dir.path().join("est.txt");
    run_ok(&["--set", "flow.levels=1", "track", "--images", s(&imgs), "--checkpoint", s(&ck), "--out", s(&est)]);
    let poses = read_kitti_poses(&est).unwrap();
    assert_eq!(poses.len(), 2);
    assert_eq!(poses[1], PoseMatrix::identity());

    let many = dir.path().join("many");
    let frames: Vec<_> = (0..7).map(|i| ValueNoise::new(2, 3, 10.0).image(64, 32, i as f64, 0.0)).collect();
    deepavo::dataset::write_sequence(&many, &frames, None).unwrap();
    run_ok(&["--set", "flow.levels=1", "track", "--images", s(&many), "--checkpoint", s(&ck), "--out", s(&est)]);
    assert_eq!(fs::read_to_string(&est).unwrap().lines().count(), 7);

    let flows = dir.path().join("flows");
    fs::create_dir(&flows).unwrap();
    for i in 0..3 {
        let f = deepavo::flow::FlowField::zeros(64, 32);
        deepavo::flow::write_flo(&f, flows.join(format!("{i:06}.flo"))).unwrap();
    }
    run_ok(&["--set", "flow.levels=1", "track", "--flows", s(&flows), "--checkpoint", s(&ck), "--out", s(&est)]);
    assert_eq!(read_kitti_poses(&est).unwrap().len(), 4);

    let one = dir.path().join("one");
    deepavo::dataset::write_sequence(&one, std::slice::from_ref(&tex), None).unwrap();
    assert_eq!(run_err(&["track", "--images", s(&one), "--checkpoint", s(&ck), "--out", s(&est)]).exit_code(), 2);
    let big = dir.path().join("big");
    let f = ValueNoise::new(2, 3, 10.0).image(80, 32, 0.0, 0.0);
    deepavo::dataset::write_sequence(&big, &[f.clone(), f], None).unwrap();
    let e = run_err(&["track", "--images", s(&big), "--checkpoint", s(&ck), "--out", s(&est)]);
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("64×32"), "{e}");
}

#[test]
fn eval_command() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let est = dir.path().join("est.txt");
    fs::write(&gt, format_kitti_poses(&straight(1001, 1.0))).unwrap();
    let out = run_ok(&["eval", "--gt", s(&gt), "--est", s(&gt)]);
    assert!(out.starts_with("t_rel 0.00%, r_rel 0.00"), "{out}");
    fs::write(&est, format_kitti_poses(&straight(1001, 1.1))).unwrap();
    let rep = dir.path().join("rep/report");
    let out = run_ok(&["eval", "--gt", s(&gt), "--est", s(&est), "--align", "none", "--report", s(&rep)]);
    assert!(out.starts_with("t_rel 10.00%"), "{out}");
    assert!(rep.with_extension("json").is_file() && rep.with_extension("csv").is_file());
    let out = run_ok(&["eval", "--gt", s(&gt), "--est", s(&est), "--align", "similarity"]);
    assert!(out.starts_with("t_rel 0.00%"), "{out}");
    fs::write(&est, format_kitti_poses(&straight(1000, 1.1))).unwrap();
    assert_eq!(run_err(&["eval", "--gt", s(&gt), "--est", s(&est)]).exit_code(), 1);
    assert_eq!(run_err(&["eval", "--gt", s(&gt), "--est", s(&gt), "--align", "affine"]).exit_code(), 2);
}

fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            pts.split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn plot_command() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("gt.txt");
    let b = dir.path().join("est.txt");
    let line: Vec<PoseMatrix> = (0..50).map(|i| PoseMatrix::planar(0.0, i as f64, 0.0)).collect();
    fs::write(&a, format_kitti_poses(&line)).unwrap();
    let curve: Vec<PoseMatrix> = (0..50).map(|i| PoseMatrix::planar(0.0, i as f64, (i as f64 * 0.1).sin() * 5.0)).collect();
    fs::write(&b, format_kitti_poses(&curve)).unwrap();
    let svg1 = dir.path().join("one.svg");
    run_ok(&["plot", "--poses", s(&a), "--out", s(&svg1)]);
    let text = fs::read_to_string(&svg1).unwrap();
    let lines = polylines(&text);
    assert_eq!(lines.len(), 1);
    assert!(lines[0].windows(2).all(|w| w[1].0 > w[0].0));
    assert!(text.contains("X [m]") && text.contains("Z [m]"));

    let two = dir.path().join("two.svg");
    let again = dir.path().join("again.svg");
    run_ok(&["plot", "--poses", s(&a), s(&b), "--labels", "ground truth", "ours", "--out", s(&two)]);
    run_ok(&["plot", "--poses", s(&a), s(&b), "--labels", "ground truth", "ours", "--out", s(&again)]);
    assert_eq!(fs::read(&two).unwrap(), fs::read(&again).unwrap());
    let text = fs::read_to_string(&two).unwrap();
    let legend: Vec<&str> = text.lines().filter(|l| l.contains("class=\"legend\"")).collect();
    assert_eq!(legend.len(), 2);
    assert!(legend[0].contains(">ground truth<") && legend[1].contains(">ours<"));

    let junk = dir.path().join("junk.txt");
    fs::write(&junk, "a b c\n").unwrap();
    assert_eq!(run_err(&["plot", "--poses", s(&junk), "--out", s(&two)]).exit_code(), 1);
    assert_eq!(run_err(&["plot", "--poses", s(&a), "--labels", "x", "y", "--out", s(&two)]).exit_code(), 2);
}

fn bench_rows(csv: &str) -> Vec<(String, usize, [f64; 3])> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), [f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap()])
        })
        .collect()
}

#[test]
fn bench_command() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    run_ok(&["bench", "--frames", "1", "--size", "256x96", "--out", s(&csv)]);
    let rows = bench_rows(&fs::read_to_string(&csv).unwrap());
    let stages: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(stages, ["flow", "forward", "accumulate"]);
    for (_, n, t) in &rows {
        assert_eq!(*n, 1);
        assert!(t.iter().all(|&v| v > 0.0));
    }
    run_ok(&["bench", "--frames", "2", "--size", "320x120", "--out", s(&csv)]);
    let rows = bench_rows(&fs::read_to_string(&csv).unwrap());
    assert!(rows.iter().all(|r| r.1 == 2 && r.2.iter().all(|&v| v > 0.0)));

    let ck = dir.path().join("z.ckpt");
    zero_head_checkpoint(&ck, tiny_model_config());
    let out = run_ok(&["--set", "flow.levels=1", "bench", "--checkpoint", s(&ck), "--frames", "1"]);
    assert!(out.contains("64×32"), "{out}");
    assert_eq!(run_err(&["bench", "--checkpoint", s(&ck), "--size", "128x48"]).exit_code(), 2);
    assert_eq!(run_err(&["bench", "--size", "wide"]).exit_code(), 2);
}

#[test]
fn help_exits_cleanly() {
    let out = run_ok(&["--help"]);
    assert!(out.contains("track"));
}
