//! Sequence directories and result files.
//!
//! A sequence directory holds `img/0001.ppm, img/0002.ppm, ...`, a
//! `groundtruth_rect.txt` with one `x,y,w,h` line per frame (top-left
//! corner, pixels) and optionally `class.txt` with the target class id.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::Image;
use crate::synth::Sequence;

/// Parses `x,y,w,h` lines; commas, tabs or spaces separate fields.
pub fn parse_boxes(text: &str) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: bad number in '{line}'", i + 1)))?;
        if vals.len() != 4 {
            return Err(Error::Format(format!("line {}: expected x,y,w,h", i + 1)));
        }
        let b = BoundingBox::from_top_left(vals[0], vals[1], vals[2], vals[3])
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(b);
    }
    Ok(out)
}

/// One `x,y,w,h` line per box, shortest round-trip formatting.
pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let (x, y, w, h) = b.top_left();
        let _ = writeln!(s, "{x},{y},{w},{h}");
    }
    s
}

pub fn frame_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let img = dir.as_ref().join("img");
    let mut paths: Vec<PathBuf> = fs::read_dir(&img)
        .map_err(|e| Error::Format(format!("{}: {e}", img.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let gt_path = dir.join("groundtruth_rect.txt");
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::Format(format!("{}: {e}", gt_path.display())))?;
    let boxes = parse_boxes(&text)?;
    let frames = frame_paths(dir)?
        .iter()
        .map(Image::load_ppm)
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() || frames.len() != boxes.len() {
        return Err(Error::Format(format!(
            "{}: {} frames but {} boxes",
            dir.display(),
            frames.len(),
            boxes.len()
        )));
    }
    let class = match fs::read_to_string(dir.join("class.txt")) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad class.txt", dir.display())))?,
        Err(_) => 0,
    };
    let name = dir.file_name().map_or_else(|| "seq".into(), |n| n.to_string_lossy().into_owned());
    Ok(Sequence { name, frames, boxes, class })
}

pub fn save_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("img"))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_ppm(dir.join("img").join(format!("{:04}.ppm", i + 1)))?;
    }
    fs::write(dir.join("groundtruth_rect.txt"), format_boxes(&seq.boxes))?;
    fs::write(dir.join("class.txt"), format!("{}\n", seq.class))?;
    Ok(())
}
