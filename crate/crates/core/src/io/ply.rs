//! ASCII PLY point export with per-vertex colors.

use std::io::Write;

use crate::array::Array;
use crate::error::{Error, Result};

pub fn write_ply<W: Write>(coords: &Array, colors: &[[u8; 3]], w: &mut W) -> Result<()> {
    if coords.dims().map(|(_, c)| c) != Some(3) || colors.len() != coords.rows() {
        return Err(Error::invalid(format!(
            "PLY export needs N×3 coordinates and N colors, got {:?} and {}",
            coords.shape(),
            colors.len()
        )));
    }
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", coords.rows())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property double {axis}")?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(w, "property uchar {channel}")?;
    }
    writeln!(w, "end_header")?;
    for (i, [r, g, b]) in colors.iter().enumerate() {
        let p = coords.row(i);
        writeln!(w, "{:.16e} {:.16e} {:.16e} {r} {g} {b}", p[0], p[1], p[2])?;
    }
    Ok(())
}

/// Stable pseudo-random color per region id.
pub fn region_color(id: usize) -> [u8; 3] {
    let h = crate::seed::derive_seed(0x5eed, id as u64);
    let [a, b, c, ..] = h.to_le_bytes();
    [64 + a / 4 * 3, 64 + b / 4 * 3, 64 + c / 4 * 3]
}

/// Blue to red ramp for `value / max`.
pub fn magnitude_color(value: f64, max: f64) -> [u8; 3] {
    let t = if max > 0.0 { (value / max).clamp(0.0, 1.0) } else { 0.0 };
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    [r, g, b]
}
