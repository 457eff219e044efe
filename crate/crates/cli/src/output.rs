//! Append-only TSV logs and JSON metric files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use point2vec::downstream::EpochLog;
use point2vec::{Error, Result};
use serde::Serialize;

pub const EPOCH_HEADER: &str = "epoch\ttrain_loss\ttest_accuracy";

pub fn epoch_row(log: &EpochLog) -> String {
    format!("{}\t{}\t{}", log.epoch, log.train_loss, log.test_accuracy)
}

/// A tab-separated log. Reopening an existing file appends after checking
/// that its header matches.
pub struct TsvLog {
    path: PathBuf,
    file: File,
}

impl TsvLog {
    pub fn open(path: &Path, header: &str) -> Result<Self> {
        let io = |e| Error::io(path, e);
        if path.exists() {
            let mut first = String::new();
            BufReader::new(File::open(path).map_err(io)?)
                .read_line(&mut first)
                .map_err(io)?;
            if first.trim_end_matches('\n') != header {
                return Err(Error::Data {
                    path: path.into(),
                    msg: format!(
                        "existing log has header `{}`, expected `{header}`",
                        first.trim_end()
                    ),
                });
            }
            let file = OpenOptions::new().append(true).open(path).map_err(io)?;
            return Ok(Self {
                path: path.into(),
                file,
            });
        }
        let mut file = File::create(path).map_err(io)?;
        writeln!(file, "{header}").map_err(io)?;
        Ok(Self {
            path: path.into(),
            file,
        })
    }

    pub fn row(&mut self, line: impl std::fmt::Display) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `x y z r g b` lines, colors in `[0, 1]`.
pub fn format_colored(points: &[[f32; 3]], colors: &[[f64; 3]]) -> String {
    let mut out = String::with_capacity(points.len() * 48);
    for (p, c) in points.iter().zip(colors) {
        out.push_str(&format!(
            "{} {} {} {:.6} {:.6} {:.6}\n",
            p[0], p[1], p[2], c[0], c[1], c[2]
        ));
    }
    out
}

pub fn write_colored(path: &Path, points: &[[f32; 3]], colors: &[[f64; 3]]) -> Result<()> {
    fs::write(path, format_colored(points, colors)).map_err(|e| Error::io(path, e))
}
