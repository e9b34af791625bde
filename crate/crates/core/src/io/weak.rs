//! Weak labels as `index class` lines.

use std::io::{BufRead, Write};

use super::parse_error;
use crate::annotation::WeakLabels;
use crate::error::Result;

pub fn write_weak<W: Write>(labels: &WeakLabels, w: &mut W) -> Result<()> {
    for (i, c) in labels.entries() {
        writeln!(w, "{i} {c}")?;
    }
    Ok(())
}

pub fn read_weak<R: BufRead>(r: R) -> Result<WeakLabels> {
    let mut entries = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(i)), Some(Ok(c)), None) => entries.push((i, c)),
            _ => return Err(parse_error(n + 1, "expected 'index class'")),
        }
    }
    WeakLabels::new(entries)
}
