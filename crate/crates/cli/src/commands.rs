use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deepavo::dataset::{
    load_kitti, quantize_8bit, read_gray_image, render_sequence, synth_increments, write_sequence, LoadOptions, SceneSpec,
};
use deepavo::eval::{align_trajectory, segment_errors, AlignMode, EvalReport};
use deepavo::flow::{lk_flow, read_flo, write_flo, FlowField, GrayImage};
use deepavo::geometry::{accumulate, read_kitti_poses, write_kitti_poses, PoseIncrement};
use deepavo::model::{split_quadrants, DeepAvo, ModelConfig};
use deepavo::train::{fit, load_checkpoint, save_checkpoint, TrainSample};
use deepavo::Exec;

use crate::config::RunConfig;
use crate::plot::{render_svg, Series};
use crate::{require_dir, require_file, runtime, usage, BenchArgs, CliError, EvalArgs, FlowArgs, PlotArgs, SynthArgs, TrackArgs, TrainArgs};

fn say(out: &mut dyn Write, s: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    out.write_fmt(s).and_then(|_| out.write_all(b"\n")).map_err(runtime)
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => { say($out, format_args!($($t)*)) };
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| runtime(format!("{}: {e}", d.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_flow(cfg: &RunConfig, a: &FlowArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&a.in_a)?;
    require_file(&a.in_b)?;
    let prev = read_gray_image(&a.in_a).map_err(runtime)?;
    let next = read_gray_image(&a.in_b).map_err(runtime)?;
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(usage(format!(
            "image sizes differ: {}×{} vs {}×{}",
            prev.width, prev.height, next.width, next.height
        )));
    }
    let mut p = cfg.lk_params();
    p.window = a.window.unwrap_or(p.window);
    p.levels = a.levels.unwrap_or(p.levels);
    let flow = lk_flow(&prev, &next, &p).map_err(runtime)?;
    write_flo(&flow, &a.out).map_err(runtime)?;
    say!(out, "mean flow magnitude: {:.4} px", flow.mean_magnitude())
}

/// Frames (`n + 1`) and ground-truth increments of the configured synthetic sequence.
pub fn synthetic_sequence(cfg: &RunConfig, seed: u64, n: usize) -> Result<(Vec<GrayImage>, Vec<PoseIncrement>), CliError> {
    let incs = synth_increments(seed, n, &cfg.synth.ranges).map_err(usage)?;
    let frames = render_sequence(&cfg.synth.scene(seed), &incs, cfg.exec()).map_err(runtime)?;
    Ok((frames, incs))
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let n = a.n.unwrap_or(cfg.synth.n);
    fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    let mut manifest = String::from("pair,prev,next,dp,dphi\n");
    if n > 0 {
        let (frames, incs) = synthetic_sequence(cfg, seed, n)?;
        let (_, poses) = accumulate(&incs);
        write_sequence(&a.out, &frames, Some(&poses)).map_err(runtime)?;
        for (i, g) in incs.iter().enumerate() {
            manifest.push_str(&format!(
                "{i},image_2/{i:06}.png,image_2/{:06}.png,{:?},{:?}\n",
                i + 1,
                g.dp,
                g.dphi
            ));
        }
    }
    write_file(&a.out.join("manifest.csv"), manifest)?;
    say!(out, "wrote {n} pairs to {}", a.out.display())
}

fn flows_for(cfg: &RunConfig, frames: &[GrayImage]) -> Result<Vec<FlowField>, CliError> {
    let p = cfg.lk_params();
    frames.windows(2).map(|w| lk_flow(&w[0], &w[1], &p).map_err(runtime)).collect()
}

fn check_size(model: &ModelConfig, w: usize, h: usize, what: &str) -> Result<(), CliError> {
    if (model.input_width, model.input_height) != (w, h) {
        return Err(usage(format!(
            "model expects {}×{} input (model.input_width, model.input_height), {what} are {w}×{h}",
            model.input_width, model.input_height
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let data = a
        .data
        .clone()
        .or_else(|| cfg.data.as_ref().map(|p| p.display().to_string()))
        .ok_or_else(|| usage("no training data: pass --data <dir|synthetic> or set `data`"))?;
    let ckpt_path = a
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| usage("no checkpoint path: pass --out or set `out`"))?;
    let (frames, incs) = if data == "synthetic" {
        let (frames, incs) = synthetic_sequence(cfg, cfg.seed, cfg.synth.n)?;
        (frames.iter().map(quantize_8bit).collect::<Vec<_>>(), incs)
    } else {
        let dir = PathBuf::from(&data);
        require_dir(&dir)?;
        let seq = load_kitti(&dir, &LoadOptions { exec: cfg.exec(), ..LoadOptions::default() }).map_err(usage)?;
        let incs = seq
            .increments
            .clone()
            .ok_or_else(|| usage(format!("{} has no poses.txt", dir.display())))?;
        (seq.images, incs)
    };
    if incs.is_empty() {
        return Err(usage("training data holds no frame pairs"));
    }
    check_size(&cfg.model, frames[0].width, frames[0].height, "training frames")?;
    let t0 = Instant::now();
    let flows = flows_for(cfg, &frames)?;
    let samples = flows
        .iter()
        .zip(&incs)
        .map(|(f, g)| TrainSample::from_flow(f, *g, &cfg.model))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    say!(out, "{} samples, flow {:.1} s", samples.len(), t0.elapsed().as_secs_f64())?;
    let model = DeepAvo::new(cfg.model.clone(), cfg.seed).map_err(usage)?;
    let t0 = Instant::now();
    let r = fit(&samples, model, &cfg.train, cfg.exec()).map_err(runtime)?;
    save_checkpoint(&r.checkpoint, &ckpt_path).map_err(runtime)?;
    let hist_path = a.history.clone().unwrap_or_else(|| {
        let mut s = ckpt_path.clone().into_os_string();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    write_file(&hist_path, r.history.to_csv())?;
    let last = r.history.epochs.last();
    say!(
        out,
        "steps {} epochs {} fit {:.1} s{}",
        r.steps,
        r.history.epochs.len(),
        t0.elapsed().as_secs_f64(),
        if r.diverged { " DIVERGED" } else { "" }
    )?;
    if let Some(l) = last {
        say!(out, "final train loss {:.6e}", l.train_loss)?;
    }
    if let Some(v) = r.checkpoint.summary.best_val_loss {
        say!(out, "best val loss {:.6e} (epoch {})", v, r.checkpoint.summary.best_epoch.unwrap_or(0))?;
    }
    say!(out, "checkpoint {}", ckpt_path.display())
}

fn flo_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("flo")))
        .collect();
    v.sort();
    Ok(v)
}

pub fn cmd_track(cfg: &RunConfig, a: &TrackArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&a.checkpoint)?;
    let model = load_checkpoint(&a.checkpoint)
        .and_then(|c| c.to_model())
        .map_err(usage)?;
    let flows = match (&a.images, &a.flows) {
        (Some(dir), _) => {
            require_dir(dir)?;
            let seq = load_kitti(dir, &LoadOptions { exec: cfg.exec(), ..LoadOptions::default() }).map_err(usage)?;
            check_size(&model.config, seq.manifest.width, seq.manifest.height, "images")?;
            flows_for(cfg, &seq.images)?
        }
        (None, Some(dir)) => {
            require_dir(dir)?;
            let files = flo_files(dir)?;
            if files.is_empty() {
                return Err(usage(format!("no .flo files in {}", dir.display())));
            }
            let flows = files.iter().map(|f| read_flo(f).map_err(runtime)).collect::<Result<Vec<_>, _>>()?;
            for f in &flows {
                check_size(&model.config, f.width, f.height, "flows")?;
            }
            flows
        }
        (None, None) => return Err(usage("pass --images or --flows")),
    };
    let preds = flows
        .iter()
        .map(|f| split_quadrants(f).and_then(|q| model.predict(&q)).map_err(runtime))
        .collect::<Result<Vec<_>, _>>()?;
    // the network is unconstrained; a negative distance means standing still
    let incs: Vec<PoseIncrement> = preds
        .iter()
        .map(|p| PoseIncrement::new(p.dp.max(0.0), p.dphi).map_err(runtime))
        .collect::<Result<_, _>>()?;
    let (_, poses) = accumulate(&incs);
    if let Some(d) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(runtime)?;
    }
    write_kitti_poses(&poses, &a.out).map_err(runtime)?;
    let len: f64 = incs.iter().map(|i| i.dp).sum();
    say!(out, "{} poses, path length {:.3} m -> {}", poses.len(), len, a.out.display())
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&a.gt)?;
    require_file(&a.est)?;
    let align: AlignMode = match &a.align {
        Some(s) => s.parse().map_err(usage)?,
        None => cfg.align,
    };
    let gt = read_kitti_poses(&a.gt).map_err(runtime)?;
    let est = read_kitti_poses(&a.est).map_err(runtime)?;
    let est = align_trajectory(&gt, &est, align).map_err(runtime)?;
    let errs = segment_errors(&gt, &est, &cfg.eval, cfg.exec()).map_err(runtime)?;
    let report = EvalReport::aggregate(&errs, &cfg.eval);
    if let Some(stem) = &a.report {
        if let Some(d) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(runtime)?;
        }
        report.write(stem).map_err(runtime)?;
    }
    say!(
        out,
        "t_rel {:.2}%, r_rel {:.2} deg/100m ({} segments)",
        report.t_rel,
        report.r_rel,
        report.count
    )
}

pub fn cmd_plot(a: &PlotArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !a.labels.is_empty() && a.labels.len() != a.poses.len() {
        return Err(usage(format!("{} labels for {} pose files", a.labels.len(), a.poses.len())));
    }
    let mut series = Vec::with_capacity(a.poses.len());
    for (i, p) in a.poses.iter().enumerate() {
        require_file(p)?;
        let poses = read_kitti_poses(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        let label = a
            .labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        series.push(Series {
            label,
            points: poses.iter().map(|m| (m.translation[0], m.translation[2])).collect(),
        });
    }
    write_file(&a.out, render_svg(&series))?;
    say!(out, "{} trajectories -> {}", series.len(), a.out.display())
}

/// Per-stage timing statistics in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStats {
    pub stage: &'static str,
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    pub fn from_durations(stage: &'static str, ms: &[f64]) -> Self {
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        // nearest rank
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            stage,
            samples: n,
            mean_ms: s.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: s[rank - 1],
        }
    }
}

pub fn bench_csv(stats: &[StageStats]) -> String {
    let mut s = String::from("stage,samples,mean_ms,median_ms,p95_ms\n");
    for t in stats {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", t.stage, t.samples, t.mean_ms, t.median_ms, t.p95_ms));
    }
    s
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || usage(format!("size {s:?} is not WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w < 2 || h < 2 {
        return Err(bad());
    }
    Ok((w, h))
}

/// Runs the three pipeline stages on `frames` synthetic pairs.
pub fn bench_stages(cfg: &RunConfig, model: &DeepAvo, frames: usize, exec: Exec) -> Result<Vec<StageStats>, CliError> {
    let (w, h) = (model.config.input_width, model.config.input_height);
    let spec = SceneSpec {
        seed: cfg.seed,
        width: w,
        height: h,
        focal: cfg.synth.focal * w as f64 / cfg.synth.width as f64,
        cam_height: cfg.synth.cam_height,
        pitch: cfg.synth.pitch,
        ..SceneSpec::default()
    };
    let incs = synth_increments(cfg.seed, frames, &cfg.synth.ranges).map_err(usage)?;
    let images = render_sequence(&spec, &incs, exec).map_err(runtime)?;
    let lk = deepavo::flow::LkParams { exec, ..cfg.lk };
    let (mut t_flow, mut t_fwd, mut t_acc) = (vec![], vec![], vec![]);
    let mut predicted = Vec::with_capacity(frames);
    for i in 0..frames {
        let t = Instant::now();
        let flow = lk_flow(&images[i], &images[i + 1], &lk).map_err(runtime)?;
        t_flow.push(t.elapsed().as_secs_f64() * 1e3);

        let t = Instant::now();
        let q = split_quadrants(&flow).map_err(runtime)?;
        let p = model.predict(&q).map_err(runtime)?;
        t_fwd.push(t.elapsed().as_secs_f64() * 1e3);

        let t = Instant::now();
        predicted.push(PoseIncrement::new(p.dp.max(0.0), p.dphi).map_err(runtime)?);
        let (traj, _) = accumulate(&predicted);
        std::hint::black_box(&traj);
        t_acc.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(vec![
        StageStats::from_durations("flow", &t_flow),
        StageStats::from_durations("forward", &t_fwd),
        StageStats::from_durations("accumulate", &t_acc),
    ])
}

pub fn cmd_bench(cfg: &RunConfig, a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    let size = a.size.as_deref().map(parse_size).transpose()?;
    let model = match &a.checkpoint {
        Some(p) => {
            require_file(p)?;
            let m = load_checkpoint(p).and_then(|c| c.to_model()).map_err(usage)?;
            if let Some((w, h)) = size {
                check_size(&m.config, w, h, "--size")?;
            }
            m
        }
        None => {
            let (w, h) = size.unwrap_or((1226, 370));
            let mc = ModelConfig {
                input_width: w,
                input_height: h,
                ..ModelConfig::default()
            };
            DeepAvo::new(mc, cfg.seed).map_err(usage)?
        }
    };
    let stats = bench_stages(cfg, &model, a.frames, cfg.exec())?;
    say!(
        out,
        "{} frames at {}×{} ({})",
        a.frames,
        model.config.input_width,
        model.config.input_height,
        if cfg.exec().is_parallel() { "parallel" } else { "sequential" }
    )?;
    say!(out, "{:<12}{:>12}{:>12}{:>12}", "stage", "mean ms", "median ms", "p95 ms")?;
    for s in &stats {
        say!(out, "{:<12}{:>12.3}{:>12.3}{:>12.3}", s.stage, s.mean_ms, s.median_ms, s.p95_ms)?;
    }
    if let Some(p) = &a.out {
        write_file(p, bench_csv(&stats))?;
    }
    Ok(())
}
