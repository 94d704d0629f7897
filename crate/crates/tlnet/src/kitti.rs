//! KITTI label and calibration text formats.

use std::fmt::Write as _;

use thiserror::Error;
use tlnet_core::box3d::BoxError;
use tlnet_core::dataset::{GroundTruthLabel, DONT_CARE};
use tlnet_core::geometry::{GeometryError, ProjectionMatrix, StereoCalibration};
use tlnet_core::BoxSize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("expected {expected} fields, found {found}")]
    FieldCount {
        expected: &'static str,
        found: usize,
    },
    #[error("field {index} ({name}) is not a number: {text:?}")]
    NonNumeric {
        index: usize,
        name: &'static str,
        text: String,
    },
    #[error("field {name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("calibration is missing {0}")]
    MissingKey(String),
    #[error("calibration line {line} is malformed: {text:?}")]
    BadCalibLine { line: usize, text: String },
    #[error("invalid box: {0}")]
    Box(#[from] BoxError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

const FIELD_NAMES: [&str; 16] = [
    "type",
    "truncated",
    "occluded",
    "alpha",
    "left",
    "top",
    "right",
    "bottom",
    "height",
    "width",
    "length",
    "x",
    "y",
    "z",
    "rotation_y",
    "score",
];

/// Parses one label line: 15 fields, or 16 with a trailing score.
///
/// `DontCare` rows carry KITTI's placeholder values; their `-1` occlusion is
/// stored as 3 (fully occluded) since such rows never count as objects.
pub fn parse_label_line(text: &str) -> Result<GroundTruthLabel, FormatError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(FormatError::FieldCount {
            expected: "15 or 16",
            found: fields.len(),
        });
    }
    let num = |i: usize| -> Result<f64, FormatError> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| FormatError::NonNumeric {
                index: i,
                name: FIELD_NAMES[i],
                text: fields[i].to_string(),
            })
    };
    let class_name = fields[0].to_string();
    let occ = num(2)?;
    let occlusion = if class_name == DONT_CARE && occ == -1.0 {
        3
    } else if occ.fract() == 0.0 && (0.0..=3.0).contains(&occ) {
        occ as u8
    } else {
        return Err(FormatError::OutOfRange {
            name: "occluded",
            value: occ,
        });
    };
    Ok(GroundTruthLabel {
        class_name,
        truncation: num(1)?,
        occlusion,
        alpha: num(3)?,
        bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
        size: BoxSize::new(num(8)?, num(9)?, num(10)?),
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if fields.len() == 16 {
            Some(num(15)?)
        } else {
            None
        },
    })
}

/// Formats a label at KITTI precision: two decimals everywhere, integer
/// occlusion, and four decimals for the optional score.
pub fn serialize_label(label: &GroundTruthLabel) -> String {
    let occ: i32 = if label.is_dont_care() {
        -1
    } else {
        label.occlusion as i32
    };
    let b = label.bbox2d;
    let s = label.size;
    let l = label.location;
    let mut out = format!(
        "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
        label.class_name,
        label.truncation,
        occ,
        label.alpha,
        b[0],
        b[1],
        b[2],
        b[3],
        s.h,
        s.w,
        s.l,
        l[0],
        l[1],
        l[2],
        label.rotation_y
    );
    if let Some(score) = label.score {
        write!(out, " {score:.4}").unwrap();
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<GroundTruthLabel>, (usize, FormatError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l).map_err(|e| (i + 1, e)))
        .collect()
}

pub fn serialize_labels(labels: &[GroundTruthLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serialize_label(l));
        out.push('\n');
    }
    out
}

/// The keyed matrices of a calibration file, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibFile {
    pub entries: Vec<(String, Vec<f64>)>,
}

/// Camera matrices used for the left and right views.
pub const LEFT_CAMERA: &str = "P2";
pub const RIGHT_CAMERA: &str = "P3";

/// C-style `%.12e`, e.g. `7.215377000000e+02`.
fn sci(v: f64) -> String {
    let s = format!("{v:.12e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

impl CalibFile {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || FormatError::BadCalibLine {
                line: i + 1,
                text: line.to_string(),
            };
            let (key, rest) = line.split_once(':').ok_or_else(bad)?;
            let values = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(bad)?;
            entries.push((key.trim().to_string(), values));
        }
        Ok(CalibFile { entries })
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    pub fn projection(&self, key: &str) -> Result<ProjectionMatrix, FormatError> {
        let v = self
            .get(key)
            .ok_or_else(|| FormatError::MissingKey(key.into()))?;
        let arr: [f64; 12] = v.try_into().map_err(|_| FormatError::FieldCount {
            expected: "12",
            found: v.len(),
        })?;
        Ok(ProjectionMatrix::from_array(arr)?)
    }

    /// The stereo rig formed by the `left` and `right` camera matrices.
    pub fn stereo(
        &self,
        image_size: (usize, usize),
        left: &str,
        right: &str,
    ) -> Result<StereoCalibration, FormatError> {
        Ok(StereoCalibration::from_matrices(
            self.projection(left)?,
            self.projection(right)?,
            image_size,
        )?)
    }

    /// A complete KITTI calibration for a rig: `P0`/`P2` left, `P1`/`P3`
    /// right, identity rectification and identity sensor transforms.
    pub fn from_stereo(calib: &StereoCalibration) -> Self {
        let l = calib.p_left.to_array().to_vec();
        let r = calib.p_right.to_array().to_vec();
        let eye34 = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let eye33 = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        CalibFile {
            entries: vec![
                ("P0".into(), l.clone()),
                ("P1".into(), r.clone()),
                ("P2".into(), l),
                ("P3".into(), r),
                ("R0_rect".into(), eye33),
                ("Tr_velo_to_cam".into(), eye34.clone()),
                ("Tr_imu_to_velo".into(), eye34),
            ],
        }
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push(':');
            for x in v {
                out.push(' ');
                out.push_str(&sci(*x));
            }
            out.push('\n');
        }
        out
    }
}
