//! Training, inference, evaluation and ablation over in-memory frames,
//! shared by the command-line driver and the acceptance suite.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use tlnet_core::dataset::{generate_scene, DatasetError, Difficulty, FrameData};
use tlnet_core::eval::{
    evaluate, standard_criteria, CriterionKind, Detection, EvalFrame, EvalReport, MatchCriterion,
};
use tlnet_core::pipeline::{
    train, Detector, DetectorConfig, DetectorMode, IterationRecord, PipelineError, Stage,
    TrainObserver,
};
use tlnet_core::tlnet::FusionMode;

use crate::checkpoint;
use crate::config::{EvalSettings, ExperimentConfig};

pub const LOSS_HEADER: &str = "iter,stage,loss_total,loss_cls,loss_reg";

/// Writes the loss log and periodic checkpoints during training.
pub struct FileObserver<W: Write> {
    pub log: W,
    /// Checkpoints go to `<stem>.<iter>.tlnt` next to this path.
    pub checkpoint_stem: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub stage_starts: Vec<(Stage, usize)>,
    header_written: bool,
}

impl<W: Write> FileObserver<W> {
    pub fn new(log: W, checkpoint_stem: Option<PathBuf>, config: ExperimentConfig) -> Self {
        FileObserver {
            log,
            checkpoint_stem,
            config,
            stage_starts: Vec::new(),
            header_written: false,
        }
    }
}

fn observer_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Observer(e.to_string())
}

impl<W: Write> TrainObserver for FileObserver<W> {
    fn on_stage(&mut self, stage: Stage, first_iter: usize) -> Result<(), PipelineError> {
        self.stage_starts.push((stage, first_iter));
        Ok(())
    }

    fn on_iteration(&mut self, r: &IterationRecord) -> Result<(), PipelineError> {
        if !self.header_written {
            writeln!(self.log, "{LOSS_HEADER}").map_err(observer_err)?;
            self.header_written = true;
        }
        writeln!(
            self.log,
            "{},{},{},{},{}",
            r.iter,
            r.stage.name(),
            r.loss_total,
            r.loss_cls,
            r.loss_reg
        )
        .map_err(observer_err)
    }

    fn on_checkpoint(&mut self, iter: usize, detector: &Detector) -> Result<(), PipelineError> {
        if let Some(stem) = &self.checkpoint_stem {
            let path = stem.with_extension(format!("{iter}.tlnt"));
            let mut cfg = self.config.clone();
            cfg.detector = detector.config.clone();
            checkpoint::save(&path, &detector.params, &cfg).map_err(observer_err)?;
        }
        Ok(())
    }
}

/// Criteria of the report grid, with 3D or ground-plane distances.
pub fn criteria(settings: &EvalSettings) -> Vec<MatchCriterion> {
    standard_criteria()
        .into_iter()
        .map(|mut c| {
            if settings.loc_bev && c.kind == CriterionKind::Distance {
                c.kind = CriterionKind::DistanceBev;
            }
            c
        })
        .collect()
}

/// Evaluates `dets[i]` against `frames[i]`.
pub fn evaluate_frames(
    frames: &[FrameData],
    dets: &[Vec<Detection>],
    settings: &EvalSettings,
) -> EvalReport {
    let eval_frames: Vec<EvalFrame<'_>> = frames
        .iter()
        .zip(dets)
        .map(|(f, d)| EvalFrame {
            gts: &f.labels,
            dets: d,
            image_height: f.calib.height(),
        })
        .collect();
    evaluate(
        &eval_frames,
        &settings.class_name,
        &criteria(settings),
        settings.interpolation,
    )
}

pub fn infer_all(
    det: &Detector,
    frames: &[FrameData],
) -> Result<Vec<Vec<Detection>>, PipelineError> {
    frames.iter().map(|f| det.infer(f)).collect()
}

/// Training and validation frames generated from the configured scene.
/// Validation frames continue the index sequence after the training ones.
pub fn synth_frames(
    cfg: &ExperimentConfig,
) -> Result<(Vec<FrameData>, Vec<FrameData>), DatasetError> {
    let n_train = cfg.synth.train_frames;
    let n_val = cfg.synth.val_frames;
    let all = (0..n_train + n_val)
        .map(|i| generate_scene(&cfg.scene, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut train = all;
    let val = train.split_off(n_train);
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub mode: DetectorMode,
    pub fusion: FusionMode,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant {
            mode: DetectorMode::Mono,
            fusion: FusionMode::Add,
        },
        Variant {
            mode: DetectorMode::Stereo,
            fusion: FusionMode::Concat,
        },
        Variant {
            mode: DetectorMode::Stereo,
            fusion: FusionMode::Add,
        },
        Variant {
            mode: DetectorMode::Stereo,
            fusion: FusionMode::Reweight,
        },
    ];

    pub fn name(&self) -> &'static str {
        match self.mode {
            DetectorMode::Mono => "mono",
            DetectorMode::Stereo => self.fusion.name(),
        }
    }

    pub fn apply(&self, base: &DetectorConfig, seed: u64) -> DetectorConfig {
        DetectorConfig {
            mode: self.mode,
            fusion: self.fusion,
            seed,
            ..base.clone()
        }
    }
}

pub const ABLATION_IOUS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per seed, AP3D indexed `[iou][regime]`.
    pub per_seed: Vec<(u64, [[f64; 3]; 3])>,
}

impl AblationRow {
    pub fn mean(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (_, ap) in &self.per_seed {
            for i in 0..3 {
                for r in 0..3 {
                    m[i][r] += ap[i][r] / self.per_seed.len() as f64;
                }
            }
        }
        m
    }
}

fn ap_grid(report: &EvalReport) -> [[f64; 3]; 3] {
    let mut g = [[0.0; 3]; 3];
    for (i, &iou) in ABLATION_IOUS.iter().enumerate() {
        for (r, &regime) in Difficulty::REGIMES.iter().enumerate() {
            g[i][r] = report.ap(CriterionKind::Iou3d, iou, regime).unwrap_or(0.0);
        }
    }
    g
}

/// Trains every variant on every seed in `seeds` and evaluates AP3D on
/// `val`. `progress` receives a line per finished run.
pub fn ablate(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_frames: &[FrameData],
    val: &[FrameData],
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::new();
    for v in variants {
        let mut row = AblationRow {
            variant: *v,
            per_seed: Vec::new(),
        };
        for &seed in seeds {
            let cfg = v.apply(&base.detector, seed);
            let det = train(cfg, train_frames, &mut tlnet_core::pipeline::NullObserver)?;
            let dets = infer_all(&det, val)?;
            let report = evaluate_frames(val, &dets, &base.eval);
            let grid = ap_grid(&report);
            progress(&format!(
                "{} seed {seed}: AP3D@0.5 easy/moderate/hard {:.2}/{:.2}/{:.2}",
                v.name(),
                100.0 * grid[1][0],
                100.0 * grid[1][1],
                100.0 * grid[1][2]
            ));
            row.per_seed.push((seed, grid));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// The fusion comparison table: for each IoU threshold, one row per
/// variant with AP3D × 100 by regime, averaged over seeds.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<5} {:<10} {:>8} {:>9} {:>8}\n",
        "IoU", "Method", "Easy", "Moderate", "Hard"
    );
    for (i, iou) in ABLATION_IOUS.iter().enumerate() {
        for (k, row) in rows.iter().enumerate() {
            let m = row.mean();
            let iou_col = if k == 0 {
                format!("{iou}")
            } else {
                String::new()
            };
            writeln!(
                out,
                "{:<5} {:<10} {:>8.2} {:>9.2} {:>8.2}",
                iou_col,
                row.variant.name(),
                100.0 * m[i][0],
                100.0 * m[i][1],
                100.0 * m[i][2]
            )
            .unwrap();
        }
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,seed,iou,regime,ap\n");
    for row in rows {
        for (seed, grid) in &row.per_seed {
            for (i, iou) in ABLATION_IOUS.iter().enumerate() {
                for (r, regime) in Difficulty::REGIMES.iter().enumerate() {
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        row.variant.name(),
                        seed,
                        iou,
                        regime.name(),
                        grid[i][r]
                    )
                    .unwrap();
                }
            }
        }
    }
    out
}
