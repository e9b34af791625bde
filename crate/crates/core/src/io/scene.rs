//! Text scene format:
//!
//! ```text
//! DATSEG v1
//! points N feat_dim D classes K
//! x y z f1 .. fD class instance      (N lines)
//! ```
//!
//! Reals are written with 17 significant digits so they read back exactly.

use std::io::{BufRead, Write};

use super::parse_error;
use crate::array::Array;
use crate::error::Result;
use crate::scene::{LabeledScene, PointCloud};

const HEADER: &str = "DATSEG v1";

pub fn write_scene<W: Write>(scene: &LabeledScene, w: &mut W) -> Result<()> {
    let cloud = &scene.cloud;
    writeln!(w, "{HEADER}")?;
    writeln!(w, "points {} feat_dim {} classes {}", cloud.len(), cloud.feat_dim(), scene.num_classes)?;
    for i in 0..cloud.len() {
        for v in cloud.coords().row(i).iter().chain(cloud.feats().row(i)) {
            write!(w, "{v:.16e} ")?;
        }
        writeln!(w, "{} {}", scene.gt_classes[i], scene.instance_ids[i])?;
    }
    Ok(())
}

pub fn read_scene<R: BufRead>(r: R) -> Result<LabeledScene> {
    let mut lines = r.lines();
    let mut next = |n: usize| -> Result<String> {
        lines.next().ok_or_else(|| parse_error(n, "unexpected end of file"))?.map_err(Into::into)
    };
    if next(1)?.trim_end() != HEADER {
        return Err(parse_error(1, format!("expected '{HEADER}'")));
    }
    let header = next(2)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let dims = match fields.as_slice() {
        ["points", n, "feat_dim", d, "classes", k] => (n.parse::<usize>(), d.parse::<usize>(), k.parse::<usize>()),
        _ => return Err(parse_error(2, "expected 'points N feat_dim D classes K'")),
    };
    let (n, d, k) = match dims {
        (Ok(n), Ok(d), Ok(k)) if n > 0 && d > 0 => (n, d, k),
        _ => return Err(parse_error(2, "invalid counts in header")),
    };
    let mut coords = Vec::with_capacity(n * 3);
    let mut feats = Vec::with_capacity(n * d);
    let mut classes = Vec::with_capacity(n);
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let line_no = i + 3;
        let line = next(line_no)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 + d + 2 {
            return Err(parse_error(line_no, format!("expected {} fields, got {}", 5 + d, tokens.len())));
        }
        for (j, t) in tokens[..3 + d].iter().enumerate() {
            let v: f64 = t.parse().map_err(|_| parse_error(line_no, format!("bad number '{t}'")))?;
            if j < 3 {
                coords.push(v);
            } else {
                feats.push(v);
            }
        }
        let int = |t: &str| t.parse::<usize>().map_err(|_| parse_error(line_no, format!("bad integer '{t}'")));
        classes.push(int(tokens[3 + d])?);
        instances.push(int(tokens[4 + d])?);
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(parse_error(n + 3, "trailing data after the declared points"));
        }
    }
    let cloud = PointCloud::new(Array::matrix(n, 3, coords)?, Array::matrix(n, d, feats)?)?;
    LabeledScene::new(cloud, classes, instances, k)
}
