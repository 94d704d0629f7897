//! The `tlnet` command line. Usage errors exit 2, data errors exit 1.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tlnet_core::anchor::compute_prior_sizes;
use tlnet_core::dataset::DONT_CARE;
use tlnet_core::gradsuite::run_suite;
use tlnet_core::pipeline::{train, Detector, DetectorMode};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset_io::{
    check_same_ids, list_ids, read_detections, read_label_file, read_split, write_detections,
    write_split, write_text, KittiDir, Views, LABEL_DIR,
};
use crate::experiment::{
    ablate, ablation_csv, ablation_table, evaluate_frames, synth_frames, FileObserver, Variant,
};
use crate::report::{parse_pr_csv, pr_csv, pr_file_name, pr_svg, pretty_table, summary_csv};

#[derive(Debug, Parser)]
#[command(
    name = "tlnet",
    version,
    about = "Stereo 3D detection by anchor triangulation"
)]
struct Cli {
    /// Directory every other path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset directory with image_2/, image_3/, calib/, label_2/.
    #[arg(long)]
    data: PathBuf,
    /// File listing the frame ids to use, one per line.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mean box size per class over a label directory.
    Priors {
        #[arg(long)]
        labels: PathBuf,
        /// Classes to report; all labelled classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Render a synthetic dataset with train.txt/val.txt splits.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write its checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        /// Final checkpoint path; the loss log and intermediate checkpoints go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint over a dataset and write detection files.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detection files against ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory holding the ground-truth labels.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare monocular and the three stereo fusion variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset with train.txt/val.txt; synthetic frames from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Plot PR-curve CSVs into one SVG.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx {
    root: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    fn config(&self, arg: &ConfigArg) -> Result<ExperimentConfig> {
        match &arg.config {
            Some(p) => Ok(ExperimentConfig::load(&self.path(p))?),
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn ids(&self, dir: &KittiDir, split: Option<&PathBuf>) -> Result<Vec<String>> {
        Ok(match split {
            Some(s) => read_split(&self.path(s))?,
            None => dir.ids()?,
        })
    }
}

fn views(mode: DetectorMode) -> Views {
    match mode {
        DetectorMode::Mono => Views::Left,
        DetectorMode::Stereo => Views::Stereo,
    }
}

fn provenance(path: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    let text = format!(
        "command = \"{command}\"\nconfig_hash = \"{}\"\n\n{}",
        cfg.hash(),
        cfg.to_toml()
    );
    write_text(path, &text)?;
    Ok(())
}

fn kitti(ctx: &Ctx, dir: &Path, cfg: &ExperimentConfig) -> KittiDir {
    KittiDir::new(ctx.path(dir)).with_cameras(&cfg.data.left_camera, &cfg.data.right_camera)
}

fn cmd_priors(ctx: &Ctx, labels: &Path, classes: &[String]) -> Result<()> {
    let dir = ctx.path(labels);
    let mut samples = Vec::new();
    for id in list_ids(&dir, "txt")? {
        for l in read_label_file(&dir.join(format!("{id}.txt")))? {
            if !l.is_dont_care() {
                samples.push((l.class_name.clone(), l.size));
            }
        }
    }
    let mut names: Vec<String> = if classes.is_empty() {
        samples.iter().map(|s| s.0.clone()).collect()
    } else {
        classes.to_vec()
    };
    if names.is_empty() {
        bail!("no labelled objects under {}", dir.display());
    }
    if names.iter().any(|n| n == DONT_CARE) {
        bail!("{DONT_CARE} has no prior size");
    }
    names.sort();
    names.dedup();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let priors = compute_prior_sizes(samples.iter().map(|(c, s)| (c.as_str(), *s)), &refs)?;
    println!("class,count,h,w,l");
    for p in priors {
        let n = samples.iter().filter(|s| s.0 == p.class_name).count();
        println!(
            "{},{},{:.4},{:.4},{:.4}",
            p.class_name, n, p.mean_size.h, p.mean_size.w, p.mean_size.l
        );
    }
    Ok(())
}

fn cmd_synth(ctx: &Ctx, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let dir = kitti(ctx, out, cfg);
    let (train_frames, val) = synth_frames(cfg)?;
    for f in train_frames.iter().chain(&val) {
        dir.write_frame(f)?;
    }
    let ids =
        |fs: &[tlnet_core::dataset::FrameData]| fs.iter().map(|f| f.id.clone()).collect::<Vec<_>>();
    write_split(&dir.root().join("train.txt"), &ids(&train_frames))?;
    write_split(&dir.root().join("val.txt"), &ids(&val))?;
    provenance(&dir.root().join("synth.toml"), "synth", cfg)?;
    println!(
        "wrote {} training and {} validation frames to {}",
        train_frames.len(),
        val.len(),
        dir.root().display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, cfg: &ExperimentConfig, data: &DataArg, out: &Path) -> Result<()> {
    let dir = kitti(ctx, &data.data, cfg);
    let ids = ctx.ids(&dir, data.split.as_ref())?;
    let frames = dir.read_frames(&ids, views(cfg.detector.mode), true)?;
    let out = ctx.path(out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let log_path = out.with_extension("loss.csv");
    let log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut obs = FileObserver::new(BufWriter::new(log), Some(out.clone()), cfg.clone());
    let det = train(cfg.detector.clone(), &frames, &mut obs)?;
    let mut final_cfg = cfg.clone();
    final_cfg.detector = det.config.clone();
    checkpoint::save(&out, &det.params, &final_cfg)?;
    println!(
        "trained on {} frames; checkpoint {}",
        frames.len(),
        out.display()
    );
    Ok(())
}

fn cmd_infer(ctx: &Ctx, ckpt: &Path, data: &DataArg, out: &Path) -> Result<()> {
    let ckpt = ctx.path(ckpt);
    let side = checkpoint::load_sidecar(&ckpt)?;
    let cfg = side.config;
    let mut det = Detector::new(cfg.detector.clone())?;
    det.load_params(checkpoint::load(&ckpt)?)?;
    let dir = kitti(ctx, &data.data, &cfg);
    let ids = ctx.ids(&dir, data.split.as_ref())?;
    let out = ctx.path(out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut total = 0;
    for id in &ids {
        let frame = dir.read_frame(id, views(cfg.detector.mode), false)?;
        let dets = det.infer(&frame)?;
        total += dets.len();
        write_detections(&out, id, &dets)?;
    }
    provenance(&out.join("infer.toml"), "infer", &cfg)?;
    println!(
        "{total} detections over {} frames in {}",
        ids.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    ctx: &Ctx,
    cfg: &ExperimentConfig,
    gt: &Path,
    dets: &Path,
    split: Option<&PathBuf>,
    out: &Path,
) -> Result<()> {
    let dir = kitti(ctx, gt, cfg);
    let det_dir = ctx.path(dets);
    let ids = match split {
        Some(s) => read_split(&ctx.path(s))?,
        None => {
            let gt_ids = list_ids(&dir.root().join(LABEL_DIR), "txt")?;
            let det_ids = list_ids(&det_dir, "txt")?;
            check_same_ids(&gt_ids, &det_ids)?;
            gt_ids
        }
    };
    let mut frames = Vec::with_capacity(ids.len());
    let mut all_dets = Vec::with_capacity(ids.len());
    for id in &ids {
        // Only the image height is needed from the pixels.
        let (w, h) = dir.image_size(id)?;
        let calib = dir.read_calib(id, (w, h))?;
        let labels = read_label_file(&dir.label_path(id))?;
        let blank = tlnet_core::Tensor4::zeros([1, 3, h, w]);
        frames.push(tlnet_core::dataset::FrameData::new(
            id.clone(),
            blank,
            None,
            calib,
            labels,
        )?);
        all_dets.push(read_detections(&det_dir, id)?);
    }
    let report = evaluate_frames(&frames, &all_dets, &cfg.eval);
    let out = ctx.path(out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("summary.csv"), &summary_csv(&report))?;
    for e in &report.entries {
        write_text(&out.join(pr_file_name(e)), &pr_csv(&e.curve))?;
    }
    provenance(&out.join("eval.toml"), "eval", cfg)?;
    print!("{}", pretty_table(&report));
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, cfg: &ExperimentConfig, data: Option<&PathBuf>, out: &Path) -> Result<()> {
    let (train_frames, val) = match data {
        Some(d) => {
            let dir = kitti(ctx, d, cfg);
            let tr = read_split(&dir.root().join("train.txt"))?;
            let va = read_split(&dir.root().join("val.txt"))?;
            (
                dir.read_frames(&tr, Views::Stereo, true)?,
                dir.read_frames(&va, Views::Stereo, true)?,
            )
        }
        None => synth_frames(cfg)?,
    };
    let rows = ablate(
        cfg,
        &Variant::ALL,
        &cfg.ablate.seeds,
        &train_frames,
        &val,
        &mut |line| eprintln!("{line}"),
    )?;
    let out = ctx.path(out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let table = ablation_table(&rows);
    write_text(&out.join("ablation.txt"), &table)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    provenance(&out.join("ablate.toml"), "ablate", cfg)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, runs: u64) -> Result<bool> {
    let mut ok = true;
    println!("seed,op,max_rel_err,tolerance,status");
    for s in seed..seed + runs {
        for case in run_suite(s)? {
            let pass = case.passed();
            ok &= pass;
            println!(
                "{s},{},{:.3e},{:.0e},{}",
                case.op,
                case.report.max_rel_err(),
                case.report.tolerance,
                if pass { "pass" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

fn cmd_plot(ctx: &Ctx, curves: &[PathBuf], title: Option<&str>, out: &Path) -> Result<()> {
    let mut series = Vec::new();
    for c in curves {
        let path = ctx.path(c);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let pts = parse_pr_csv(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        series.push((name, pts));
    }
    let out = ctx.path(out);
    write_text(
        &out,
        &pr_svg(title.unwrap_or("precision / recall"), &series),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    let ctx = Ctx { root: cli.root };
    match cli.command {
        Command::Priors { labels, classes } => cmd_priors(&ctx, &labels, &classes)?,
        Command::Synth { config, out } => cmd_synth(&ctx, &ctx.config(&config)?, &out)?,
        Command::Train { config, data, out } => {
            cmd_train(&ctx, &ctx.config(&config)?, &data, &out)?
        }
        Command::Infer {
            checkpoint,
            data,
            out,
        } => cmd_infer(&ctx, &checkpoint, &data, &out)?,
        Command::Eval {
            config,
            gt,
            dets,
            split,
            out,
        } => cmd_eval(
            &ctx,
            &ctx.config(&config)?,
            &gt,
            &dets,
            split.as_ref(),
            &out,
        )?,
        Command::Ablate { config, data, out } => {
            cmd_ablate(&ctx, &ctx.config(&config)?, data.as_ref(), &out)?
        }
        Command::Gradcheck { seed, runs } => return cmd_gradcheck(seed, runs),
        Command::Plot { curves, title, out } => cmd_plot(&ctx, &curves, title.as_deref(), &out)?,
    }
    Ok(true)
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            1
        }
    }
}
