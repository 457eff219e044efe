//! Plain-text point files: one `x y z [part]` line per point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

/// Parses point-file text; `origin` only labels errors.
pub fn parse_xyz(text: &str, origin: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(format!(
                "expected 3 or 4 columns, found {}",
                fields.len()
            )));
        }
        let mut p: Point = [0.0; 3];
        for (a, f) in fields[..3].iter().enumerate() {
            p[a] = f
                .parse()
                .map_err(|_| err(format!("bad coordinate {f:?}")))?;
            if !p[a].is_finite() {
                return Err(err(format!("non-finite coordinate {f:?}")));
            }
        }
        let has_label = fields.len() == 4;
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(err(
                "part labels must be given for every point or none".into()
            ));
        }
        if has_label {
            labels.push(
                fields[3]
                    .parse()
                    .map_err(|_| err(format!("bad part label {:?}", fields[3])))?,
            );
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Data {
            path: origin.to_path_buf(),
            msg: "file contains no points".into(),
        });
    }
    let labels = (labelled == Some(true)).then_some(labels);
    PointCloud::with_labels(points, labels)
}

/// Shortest round-trip formatting, so reading back is lossless.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32);
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(l) = &cloud.labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

/// One integer label per line.
pub fn load_part_labels(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad part label {:?}", l.trim()),
            })
        })
        .collect()
}
