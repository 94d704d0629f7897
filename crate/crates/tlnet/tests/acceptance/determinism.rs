//! Two identical command-line runs must leave byte-identical artifacts.

use std::fs;
use std::path::Path;

use tlnet::cli;
use tlnet::config::ExperimentConfig;
use tlnet_core::anchor::AnchorPoolParams;
use tlnet_core::pipeline::Schedule;

use crate::Outcome;

pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth.train_frames = 3;
    cfg.synth.val_frames = 2;
    cfg.scene.objects = (1, 2);
    cfg.scene.seed = 5;
    let d = &mut cfg.detector;
    d.backbone_widths = [4, 8, 8, 8];
    d.head_hidden = 16;
    d.roi_size = 3;
    d.rpn_batch = 16;
    d.learning_rate = 1e-3;
    d.anchors = AnchorPoolParams {
        interval_m: 1.0,
        ..AnchorPoolParams::default()
    };
    d.schedule = Schedule {
        frontview: 4,
        rpn: 4,
        refine: 4,
        sgd: 4,
    };
    d.checkpoint_every = 8;
    // Keep low-confidence output so the evaluation has something to score.
    d.score_threshold = 0.0;
    d.seed = 17;
    cfg
}

fn pipeline(root: &Path, cfg: &ExperimentConfig) -> Result<(), String> {
    fs::write(root.join("exp.toml"), cfg.to_toml()).map_err(|e| e.to_string())?;
    let r = root.to_str().unwrap();
    let steps: [&[&str]; 4] = [
        &["synth", "--config", "exp.toml", "--out", "data"],
        &[
            "train",
            "--config",
            "exp.toml",
            "--data",
            "data",
            "--split",
            "data/train.txt",
            "--out",
            "run/model.tlnt",
        ],
        &[
            "infer",
            "--checkpoint",
            "run/model.tlnt",
            "--data",
            "data",
            "--split",
            "data/val.txt",
            "--out",
            "dets",
        ],
        &[
            "eval",
            "--config",
            "exp.toml",
            "--gt",
            "data",
            "--dets",
            "dets",
            "--split",
            "data/val.txt",
            "--out",
            "eval",
        ],
    ];
    for step in steps {
        let mut argv = vec!["tlnet", "--root", r];
        argv.extend_from_slice(step);
        let code = cli::run(argv);
        if code != 0 {
            return Err(format!("`{}` exited {code}", step.join(" ")));
        }
    }
    Ok(())
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn run() -> Outcome {
    let cfg = small_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        if let Err(e) = pipeline(d.path(), &cfg) {
            return Outcome::new(false, e);
        }
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    let needed = [
        "run/model.tlnt",
        "run/model.8.tlnt",
        "run/model.16.tlnt",
        "eval/summary.csv",
    ];
    if let Some(m) = needed.iter().find(|n| !names.contains(n)) {
        return Outcome::new(false, format!("missing artifact {m}"));
    }
    if a.len() != b.len() {
        return Outcome::new(false, format!("{} vs {} artifacts", a.len(), b.len()));
    }
    if let Some((x, _)) = a.iter().zip(&b).find(|(x, y)| x != y) {
        return Outcome::new(false, format!("{} differs between runs", x.0));
    }
    Outcome::new(
        true,
        format!("{} artifacts (checkpoints, loss log, detections, reports) byte-identical across two runs", a.len()),
    )
}
