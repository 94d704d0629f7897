//! KITTI-style dataset directories:
//!
//! ```text
//! <root>/image_2/<id>.ppm   left view
//! <root>/image_3/<id>.ppm   right view
//! <root>/calib/<id>.txt     P0..P3, R0_rect, Tr_velo_to_cam, Tr_imu_to_velo
//! <root>/label_2/<id>.txt   one object per line
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use tlnet_core::dataset::{DatasetError, FrameData, GroundTruthLabel};
use tlnet_core::eval::Detection;

use crate::kitti::{self, CalibFile, FormatError, LEFT_CAMERA, RIGHT_CAMERA};
use crate::ppm::{self, PpmError};

pub const LEFT_DIR: &str = "image_2";
pub const RIGHT_DIR: &str = "image_3";
pub const CALIB_DIR: &str = "calib";
pub const LABEL_DIR: &str = "label_2";
pub const IMAGE_EXT: &str = "ppm";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("frame ids differ: {} only in the first set ({}), {} only in the second ({})",
        .only_first.len(), preview(.only_first), .only_second.len(), preview(.only_second))]
    IdMismatch {
        only_first: Vec<String>,
        only_second: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Format {
        path: PathBuf,
        line: usize,
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PpmError },
    #[error("frame {id}: {source}")]
    Frame { id: String, source: DatasetError },
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(3).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 3 {
        s.push_str(", ...");
    }
    s
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_label_file(path: &Path) -> Result<Vec<GroundTruthLabel>, DataError> {
    kitti::parse_labels(&read_text(path)?).map_err(|(line, source)| DataError::Format {
        path: path.to_path_buf(),
        line,
        source,
    })
}

pub fn write_label_file(path: &Path, labels: &[GroundTruthLabel]) -> Result<(), DataError> {
    write_text(path, &kitti::serialize_labels(labels))
}

/// Sorted stems of the files in `dir` with extension `ext`.
pub fn list_ids(dir: &Path, ext: &str) -> Result<Vec<String>, DataError> {
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut ids = Vec::new();
    for e in entries {
        let path = e.map_err(io_err(dir))?.path();
        if path.extension().and_then(|x| x.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Ids listed one per line; blank lines and `#` comments are skipped.
pub fn read_split(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn write_split(path: &Path, ids: &[String]) -> Result<(), DataError> {
    let mut s = ids.join("\n");
    s.push('\n');
    write_text(path, &s)
}

/// Fails with [`DataError::IdMismatch`] unless both lists hold the same ids.
pub fn check_same_ids(first: &[String], second: &[String]) -> Result<(), DataError> {
    let a: BTreeSet<&String> = first.iter().collect();
    let b: BTreeSet<&String> = second.iter().collect();
    if a == b {
        return Ok(());
    }
    Err(DataError::IdMismatch {
        only_first: a.difference(&b).map(|s| s.to_string()).collect(),
        only_second: b.difference(&a).map(|s| s.to_string()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Views {
    Left,
    Stereo,
}

#[derive(Debug, Clone)]
pub struct KittiDir {
    root: PathBuf,
    cameras: (String, String),
}

impl KittiDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        KittiDir {
            root: root.into(),
            cameras: (LEFT_CAMERA.into(), RIGHT_CAMERA.into()),
        }
    }

    /// Uses calibration keys `left` and `right` for the two views.
    pub fn with_cameras(mut self, left: &str, right: &str) -> Self {
        self.cameras = (left.into(), right.into());
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self, dir: &str, id: &str, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("{id}.{ext}"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.file(LABEL_DIR, id, "txt")
    }

    /// Frame ids, from the left images, in lexicographic order.
    pub fn ids(&self) -> Result<Vec<String>, DataError> {
        list_ids(&self.root.join(LEFT_DIR), IMAGE_EXT)
    }

    fn read_image(&self, dir: &str, id: &str) -> Result<tlnet_core::Tensor4, DataError> {
        let path = self.file(dir, id, IMAGE_EXT);
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        ppm::read(BufReader::new(f)).map_err(|source| DataError::Image { path, source })
    }

    /// `(width, height)` of the left image, from its header.
    pub fn image_size(&self, id: &str) -> Result<(usize, usize), DataError> {
        let path = self.file(LEFT_DIR, id, IMAGE_EXT);
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        ppm::read_size(f).map_err(|source| DataError::Image { path, source })
    }

    pub fn read_calib(
        &self,
        id: &str,
        image_size: (usize, usize),
    ) -> Result<tlnet_core::StereoCalibration, DataError> {
        let path = self.file(CALIB_DIR, id, "txt");
        let fmt = |source| DataError::Format {
            path: path.clone(),
            line: 0,
            source,
        };
        let calib = CalibFile::parse(&read_text(&path)?).map_err(fmt)?;
        calib
            .stereo(image_size, &self.cameras.0, &self.cameras.1)
            .map_err(fmt)
    }

    /// Reads a frame. Labels are optional: a missing label file yields an
    /// unlabelled frame when `require_labels` is false.
    pub fn read_frame(
        &self,
        id: &str,
        views: Views,
        require_labels: bool,
    ) -> Result<FrameData, DataError> {
        let left = self.read_image(LEFT_DIR, id)?;
        let right = match views {
            Views::Stereo => Some(self.read_image(RIGHT_DIR, id)?),
            Views::Left => None,
        };
        let calib = self.read_calib(id, (left.w(), left.h()))?;
        let label_path = self.label_path(id);
        let labels = if require_labels || label_path.exists() {
            read_label_file(&label_path)?
        } else {
            Vec::new()
        };
        FrameData::new(id, left, right, calib, labels).map_err(|source| DataError::Frame {
            id: id.into(),
            source,
        })
    }

    pub fn read_frames(
        &self,
        ids: &[String],
        views: Views,
        require_labels: bool,
    ) -> Result<Vec<FrameData>, DataError> {
        ids.iter()
            .map(|id| self.read_frame(id, views, require_labels))
            .collect()
    }

    pub fn write_frame(&self, frame: &FrameData) -> Result<(), DataError> {
        let mut images = vec![(LEFT_DIR, &frame.left_image)];
        if let Some(r) = &frame.right_image {
            images.push((RIGHT_DIR, r));
        }
        for (dir, img) in images {
            let path = self.file(dir, &frame.id, IMAGE_EXT);
            fs::create_dir_all(path.parent().unwrap()).map_err(io_err(&path))?;
            let f = fs::File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(f);
            ppm::write(&mut w, img).map_err(|source| DataError::Image {
                path: path.clone(),
                source,
            })?;
            w.flush().map_err(io_err(&path))?;
        }
        write_text(
            &self.file(CALIB_DIR, &frame.id, "txt"),
            &CalibFile::from_stereo(&frame.calib).serialize(),
        )?;
        write_label_file(&self.label_path(&frame.id), &frame.labels)
    }
}

/// A detection as a label row with a score column. Quantities not produced
/// by the detector (truncation, occlusion) are written as zero.
pub fn detection_to_label(d: &Detection) -> GroundTruthLabel {
    let b = d.box3d;
    GroundTruthLabel {
        class_name: d.class_name.clone(),
        truncation: 0.0,
        occlusion: 0,
        alpha: tlnet_core::dataset::observation_angle(&b.center, b.yaw),
        bbox2d: d.bbox2d,
        size: b.size,
        location: b.center,
        rotation_y: b.yaw,
        score: Some(d.score),
    }
}

pub fn label_to_detection(l: &GroundTruthLabel) -> Result<Detection, tlnet_core::box3d::BoxError> {
    Ok(Detection {
        class_name: l.class_name.clone(),
        box3d: l.to_box()?,
        score: l.score.unwrap_or(1.0),
        bbox2d: l.bbox2d,
    })
}

/// Detection files `<dir>/<id>.txt`; rows without a score count as 1.
pub fn read_detections(dir: &Path, id: &str) -> Result<Vec<Detection>, DataError> {
    let path = dir.join(format!("{id}.txt"));
    let mut out = Vec::new();
    for (i, l) in read_label_file(&path)?.iter().enumerate() {
        if l.is_dont_care() {
            continue;
        }
        out.push(label_to_detection(l).map_err(|e| DataError::Format {
            path: path.clone(),
            line: i + 1,
            source: e.into(),
        })?);
    }
    Ok(out)
}

pub fn write_detections(dir: &Path, id: &str, dets: &[Detection]) -> Result<(), DataError> {
    let labels: Vec<GroundTruthLabel> = dets.iter().map(detection_to_label).collect();
    write_label_file(&dir.join(format!("{id}.txt")), &labels)
}
