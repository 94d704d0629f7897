//! KITTI label and calibration round trips over the fixture corpus.

use std::fs;
use std::path::{Path, PathBuf};

use tlnet::kitti::{parse_label_line, serialize_label, CalibFile};
use tlnet_core::geometry::RigParams;
use tlnet_core::StereoCalibration;

use crate::Outcome;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kitti")
}

fn text_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

/// Every numeric field of the serialized line equals the original at the
/// original's printed precision.
fn same_at_precision(original: &str, written: &str) -> Result<(), String> {
    let a: Vec<&str> = original.split_whitespace().collect();
    let b: Vec<&str> = written.split_whitespace().collect();
    if a.len() != b.len() || a[0] != b[0] {
        return Err(format!("field layout changed: {original:?} -> {written:?}"));
    }
    for (i, (x, y)) in a.iter().zip(&b).enumerate().skip(1) {
        let decimals = x.split_once('.').map_or(0, |(_, d)| d.len());
        let (xv, yv): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
        if (xv - yv).abs() > 0.5 * 10f64.powi(-(decimals as i32)) + 1e-12 {
            return Err(format!("field {i}: {x} -> {y}"));
        }
    }
    Ok(())
}

fn labels() -> Result<usize, String> {
    let root = fixtures();
    let mut lines = 0;
    for dir in ["label_2", "results"] {
        for path in text_files(&root.join(dir)) {
            for line in fs::read_to_string(&path)
                .unwrap()
                .lines()
                .filter(|l| !l.trim().is_empty())
            {
                lines += 1;
                let parsed =
                    parse_label_line(line).map_err(|e| format!("{}: {e}", path.display()))?;
                let written = serialize_label(&parsed);
                same_at_precision(line, &written)?;
                let again = parse_label_line(&written).map_err(|e| e.to_string())?;
                if again != parsed {
                    return Err(format!("reparse differs: {line}"));
                }
                if serialize_label(&again) != written {
                    return Err(format!("serialization not stable: {written}"));
                }
            }
        }
    }
    Ok(lines)
}

fn calibs() -> Result<usize, String> {
    let mut files = Vec::new();
    for path in text_files(&fixtures().join("calib")) {
        files.push(fs::read_to_string(path).unwrap());
    }
    for rig in [
        RigParams::centered(200.0, 0.54, 320, 96),
        RigParams::centered(721.5377, 0.5327, 1242, 375),
    ] {
        files.push(CalibFile::from_stereo(&StereoCalibration::from_rig(&rig).unwrap()).serialize());
    }
    for text in &files {
        let parsed = CalibFile::parse(text).map_err(|e| e.to_string())?;
        let written = parsed.serialize();
        if written.trim_end() != text.trim_end() {
            return Err(format!("calibration text changed:\n{text}\n->\n{written}"));
        }
        if CalibFile::parse(&written).map_err(|e| e.to_string())? != parsed {
            return Err("calibration reparse differs".into());
        }
    }
    Ok(files.len())
}

pub fn run() -> Outcome {
    match (labels(), calibs()) {
        (Ok(n), Ok(c)) => Outcome::new(
            n >= 50,
            format!("{n} label lines and {c} calibration files round-trip at format precision"),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    }
}
