//! KITTI object label text: one object per line,
//! `type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::labels::{DetectionBox, ObjectClass, SoftLabelSet};
use crate::error::{Error, Result};

const MISSING_BBOX: f64 = -1.0;

fn parse_line(line: &str, line_no: usize) -> Result<DetectionBox> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 15 or 16 fields, found {}", fields.len()),
        });
    }
    let class: ObjectClass = fields[0].parse().map_err(|e: Error| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("field {} (`{}`) is not a finite number", i + 1, fields[i]),
            })
    };
    let occlusion = fields[2].parse::<i32>().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("field 3 (`{}`) is not an integer occlusion state", fields[2]),
    })?;
    let bbox = [num(4)?, num(5)?, num(6)?, num(7)?];
    let b = DetectionBox {
        class,
        truncation: num(1)?,
        occlusion,
        alpha: num(3)?,
        bbox: if bbox.iter().all(|&v| v == MISSING_BBOX) {
            None
        } else {
            Some(bbox)
        },
        dimensions: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        yaw: num(14)?,
        confidence: if fields.len() == 16 { num(15)? } else { 1.0 },
    };
    b.validate().map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    Ok(b)
}

/// Parses label text. A missing score field means confidence 1. Blank lines
/// are skipped; errors carry the 1-based line number.
pub fn parse_kitti_labels(text: &str, frame_id: u32) -> Result<SoftLabelSet> {
    let boxes = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftLabelSet::new(frame_id, boxes))
}

/// Writes one object per line with fixed six-decimal reals and a trailing
/// score.
pub fn emit_kitti_labels(labels: &SoftLabelSet) -> String {
    let mut out = String::new();
    for b in &labels.boxes {
        let bbox = b.bbox.unwrap_or([MISSING_BBOX; 4]);
        let [h, w, l] = b.dimensions;
        let [x, y, z] = b.location;
        writeln!(
            out,
            "{} {:.6} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.class,
            b.truncation,
            b.occlusion,
            b.alpha,
            bbox[0],
            bbox[1],
            bbox[2],
            bbox[3],
            h,
            w,
            l,
            x,
            y,
            z,
            b.yaw,
            b.confidence
        )
        .expect("writing to a String");
    }
    out
}

/// Frame id from a `000123.txt`-style path.
pub fn frame_id_from_path(path: &Path) -> Result<u32> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::invalid(format!("`{}` is not a numeric frame file", path.display())))
}

pub fn read_label_file(path: &Path) -> Result<SoftLabelSet> {
    let frame = frame_id_from_path(path)?;
    let text = fs::read_to_string(path)?;
    parse_kitti_labels(&text, frame).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Writes `<dir>/<frame:06>.txt` and returns its path.
pub fn write_label_file(dir: &Path, labels: &SoftLabelSet) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(labels.file_name());
    fs::write(&path, emit_kitti_labels(labels))?;
    Ok(path)
}

/// All `*.txt` label files in `dir`, sorted by name.
pub fn list_label_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    Ok(files)
}
