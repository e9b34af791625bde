//! Dataset manifest listing scene files relative to the manifest directory.
//!
//! ```text
//! DATSEG-MANIFEST v1
//! classes K
//! feat_dim D
//! seed S
//! total_points T
//! scene <file> <points>      (one line per scene)
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use super::parse_error;
use crate::error::{Error, Result};

const HEADER: &str = "DATSEG-MANIFEST v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub num_classes: usize,
    pub feat_dim: usize,
    pub seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn total_points(&self) -> usize {
        self.scenes.iter().map(|e| e.points).sum()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        writeln!(w, "classes {}", self.num_classes)?;
        writeln!(w, "feat_dim {}", self.feat_dim)?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "total_points {}", self.total_points())?;
        for e in &self.scenes {
            writeln!(w, "scene {} {}", e.file, e.points)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        if lines.first().map(|l| l.trim_end()) != Some(HEADER) {
            return Err(parse_error(1, format!("expected '{HEADER}'")));
        }
        let mut num_classes = None;
        let mut feat_dim = None;
        let mut seed = None;
        let mut total = None;
        let mut scenes = Vec::new();
        for (n, line) in lines.iter().enumerate().skip(1) {
            let line_no = n + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |t: &str| t.parse::<u64>().map_err(|_| parse_error(line_no, format!("bad integer '{t}'")));
            match fields.as_slice() {
                [] => {}
                ["classes", v] => num_classes = Some(num(v)? as usize),
                ["feat_dim", v] => feat_dim = Some(num(v)? as usize),
                ["seed", v] => seed = Some(num(v)?),
                ["total_points", v] => total = Some(num(v)? as usize),
                ["scene", file, points] => {
                    scenes.push(ManifestEntry { file: (*file).to_string(), points: num(points)? as usize })
                }
                _ => return Err(parse_error(line_no, format!("unrecognized manifest line '{line}'"))),
            }
        }
        let missing = |key: &str| Error::Format(format!("manifest is missing '{key}'"));
        let manifest = Self {
            num_classes: num_classes.ok_or_else(|| missing("classes"))?,
            feat_dim: feat_dim.ok_or_else(|| missing("feat_dim"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            scenes,
        };
        let total = total.ok_or_else(|| missing("total_points"))?;
        if total != manifest.total_points() {
            return Err(Error::Format(format!(
                "manifest total_points {total} disagrees with the scene lines ({})",
                manifest.total_points()
            )));
        }
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::read(super::open(&dir.join(MANIFEST_FILE))?)
    }
}
