//! KITTI pose text files: one pose per line, 12 space-separated row-major floats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GeometryError, PoseMatrix};

pub fn parse_kitti_poses(text: &str) -> Result<Vec<PoseMatrix>, GeometryError> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 12 {
            return Err(GeometryError::Parse {
                line: line_no,
                msg: format!("expected 12 values, found {}", tokens.len()),
            });
        }
        let mut vals = [0.0; 12];
        for (v, tok) in vals.iter_mut().zip(&tokens) {
            *v = tok.parse().map_err(|_| GeometryError::Parse {
                line: line_no,
                msg: format!("not a number: {tok:?}"),
            })?;
        }
        poses.push(PoseMatrix::from_row_major(&vals));
    }
    Ok(poses)
}

/// Formats poses with 17 significant digits per value.
pub fn format_kitti_poses(poses: &[PoseMatrix]) -> String {
    let mut out = String::new();
    for p in poses {
        let row = p.to_row_major();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            // -0.0 prints as "-0.0000000000000000e0"; normalize for stable diffs
            let v = if *v == 0.0 { 0.0 } else { *v };
            write!(out, "{v:.16e}").expect("write to String");
        }
        out.push('\n');
    }
    out
}

pub fn read_kitti_poses(path: impl AsRef<Path>) -> Result<Vec<PoseMatrix>, GeometryError> {
    parse_kitti_poses(&fs::read_to_string(path)?)
}

pub fn write_kitti_poses(poses: &[PoseMatrix], path: impl AsRef<Path>) -> Result<(), GeometryError> {
    fs::write(path, format_kitti_poses(poses))?;
    Ok(())
}
