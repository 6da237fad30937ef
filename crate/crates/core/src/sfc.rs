//! Bijective 3-D space-filling-curve codecs (Z-order and Hilbert) and the
//! point serialization built on them.
//!
//! The Hilbert codec follows the Gray-code / axis-transposition construction:
//! coordinates are folded into a "transposed" form whose column-interleaved
//! bits are the curve index. Consecutive Hilbert keys address face-adjacent
//! cells, which Z-order deliberately does not guarantee — the serialize-demo
//! locality statistic makes that difference visible.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Maximum bits per axis. 3·16 = 48 key bits, comfortably inside u64.
pub const MAX_DEPTH: u8 = 16;

/// Position of a cell along one curve at a given depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CurveKey {
    pub value: u64,
    pub depth: u8,
}

/// The four serialization patterns. The `Trans` variants rotate the axes
/// `(x,y,z) -> (y,z,x)` before the base encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SerializationPattern {
    #[serde(rename = "z")]
    Z,
    #[serde(rename = "z-trans")]
    TransZ,
    #[serde(rename = "hilbert")]
    Hilbert,
    #[serde(rename = "hilbert-trans")]
    TransHilbert,
}

impl SerializationPattern {
    pub const ALL: [SerializationPattern; 4] = [
        SerializationPattern::Z,
        SerializationPattern::TransZ,
        SerializationPattern::Hilbert,
        SerializationPattern::TransHilbert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SerializationPattern::Z => "z",
            SerializationPattern::TransZ => "z-trans",
            SerializationPattern::Hilbert => "hilbert",
            SerializationPattern::TransHilbert => "hilbert-trans",
        }
    }
}

impl std::str::FromStr for SerializationPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(SerializationPattern::Z),
            "z-trans" => Ok(SerializationPattern::TransZ),
            "hilbert" => Ok(SerializationPattern::Hilbert),
            "hilbert-trans" => Ok(SerializationPattern::TransHilbert),
            other => Err(Error::Config(format!(
                "unknown pattern {other:?} (expected z, z-trans, hilbert, hilbert-trans)"
            ))),
        }
    }
}

impl std::fmt::Display for SerializationPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn validate(cell: [u32; 3], depth: u8) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::Range(format!("depth {depth} outside 1..={MAX_DEPTH}")));
    }
    let limit = 1u32 << depth;
    for (axis, &c) in cell.iter().enumerate() {
        if c >= limit {
            return Err(Error::Range(format!(
                "coordinate {c} on axis {axis} >= 2^{depth}"
            )));
        }
    }
    Ok(())
}

/// Spread the low 21 bits of `w` so each lands 3 positions apart.
fn spread(w: u64) -> u64 {
    let mut w = w & 0x1f_ffff;
    w = (w | w << 32) & 0x001f_0000_0000_ffff;
    w = (w | w << 16) & 0x001f_0000_ff00_00ff;
    w = (w | w << 8) & 0x010f_00f0_0f00_f00f;
    w = (w | w << 4) & 0x10c3_0c30_c30c_30c3;
    w = (w | w << 2) & 0x1249_2492_4924_9249;
    w
}

/// Inverse of [`spread`].
fn compact(w: u64) -> u32 {
    let mut w = w & 0x1249_2492_4924_9249;
    w = (w ^ (w >> 2)) & 0x10c3_0c30_c30c_30c3;
    w = (w ^ (w >> 4)) & 0x010f_00f0_0f00_f00f;
    w = (w ^ (w >> 8)) & 0x001f_0000_ff00_00ff;
    w = (w ^ (w >> 16)) & 0x001f_0000_0000_ffff;
    w = (w ^ (w >> 32)) & 0x1f_ffff;
    w as u32
}

/// Morton encode with x in bit 3j, y in bit 3j+1, z in bit 3j+2.
pub fn z_encode(cell: [u32; 3], depth: u8) -> Result<CurveKey> {
    validate(cell, depth)?;
    let value = spread(cell[0] as u64) | spread(cell[1] as u64) << 1 | spread(cell[2] as u64) << 2;
    Ok(CurveKey { value, depth })
}

/// Exact inverse of [`z_encode`].
pub fn z_decode(key: CurveKey) -> [u32; 3] {
    [compact(key.value), compact(key.value >> 1), compact(key.value >> 2)]
}

/// Hilbert encode; the curve starts at the origin cell.
pub fn hilbert_encode(cell: [u32; 3], depth: u8) -> Result<CurveKey> {
    validate(cell, depth)?;
    let x = axes_to_transpose(cell, depth);
    // Column interleave of the transposed form: bit j of x[0] is the most
    // significant bit of key group j.
    let value = spread(x[2] as u64) | spread(x[1] as u64) << 1 | spread(x[0] as u64) << 2;
    Ok(CurveKey { value, depth })
}

/// Exact inverse of [`hilbert_encode`].
pub fn hilbert_decode(key: CurveKey) -> [u32; 3] {
    let x = [compact(key.value >> 2), compact(key.value >> 1), compact(key.value)];
    transpose_to_axes(x, key.depth)
}

fn axes_to_transpose(cell: [u32; 3], depth: u8) -> [u32; 3] {
    let mut x = cell;
    let m = 1u32 << (depth - 1);
    // Inverse undo.
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    // Gray encode.
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0u32;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in &mut x {
        *xi ^= t;
    }
    x
}

fn transpose_to_axes(transposed: [u32; 3], depth: u8) -> [u32; 3] {
    let mut x = transposed;
    let n = 2u32 << (depth - 1);
    // Gray decode.
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    // Undo excess work.
    let mut q = 2u32;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
    x
}

/// Encode a cell under any of the four patterns.
pub fn apply_pattern(pattern: SerializationPattern, cell: [u32; 3], depth: u8) -> Result<CurveKey> {
    let rotated = [cell[1], cell[2], cell[0]];
    match pattern {
        SerializationPattern::Z => z_encode(cell, depth),
        SerializationPattern::TransZ => z_encode(rotated, depth),
        SerializationPattern::Hilbert => hilbert_encode(cell, depth),
        SerializationPattern::TransHilbert => hilbert_encode(rotated, depth),
    }
}

/// Decode under any of the four patterns (inverse of [`apply_pattern`]).
pub fn decode_pattern(pattern: SerializationPattern, key: CurveKey) -> [u32; 3] {
    let unrotate = |c: [u32; 3]| [c[2], c[0], c[1]];
    match pattern {
        SerializationPattern::Z => z_decode(key),
        SerializationPattern::TransZ => unrotate(z_decode(key)),
        SerializationPattern::Hilbert => hilbert_decode(key),
        SerializationPattern::TransHilbert => unrotate(hilbert_decode(key)),
    }
}

/// A serialization of `N` cells along one curve pattern.
#[derive(Debug, Clone)]
pub struct SerializationOrder {
    pub pattern: SerializationPattern,
    /// Sequence position -> input row.
    pub perm: Vec<usize>,
    /// Input row -> sequence position.
    pub inv_perm: Vec<usize>,
    /// Curve key per sequence position (sorted ascending).
    pub keys: Vec<u64>,
}

/// Sort cells by `(curve key, lexicographic cell coordinate)`.
///
/// The lexicographic tie-break makes the order a function of cell identity
/// only: for distinct cells the assignment of sequence positions does not
/// depend on the input row order. Duplicate cells are permitted and keep
/// their relative input order (stable sort).
pub fn order_points(
    cells: &[[u32; 3]],
    pattern: SerializationPattern,
    depth: u8,
) -> Result<SerializationOrder> {
    let mut keyed = Vec::with_capacity(cells.len());
    for (row, &cell) in cells.iter().enumerate() {
        keyed.push((apply_pattern(pattern, cell, depth)?.value, cell, row));
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let perm: Vec<usize> = keyed.iter().map(|e| e.2).collect();
    let keys: Vec<u64> = keyed.iter().map(|e| e.0).collect();
    let mut inv_perm = vec![0usize; perm.len()];
    for (pos, &row) in perm.iter().enumerate() {
        inv_perm[row] = pos;
    }
    Ok(SerializationOrder { pattern, perm, inv_perm, keys })
}

/// Smallest depth whose cube contains every cell coordinate.
pub fn required_depth(cells: &[[i64; 3]]) -> Result<u8> {
    let mut max_c = 0i64;
    for c in cells {
        for &v in c {
            if v < 0 {
                return Err(Error::Range(format!("negative cell coordinate {v}")));
            }
            max_c = max_c.max(v);
        }
    }
    let mut depth = 1u8;
    while (1i64 << depth) <= max_c {
        depth += 1;
        if depth > MAX_DEPTH {
            return Err(Error::Range(format!(
                "cell coordinate {max_c} needs more than {MAX_DEPTH} bits"
            )));
        }
    }
    Ok(depth)
}

/// Cells cast to u32 after the range check implied by `depth`.
pub fn cells_to_u32(cells: &[[i64; 3]], depth: u8) -> Result<Vec<[u32; 3]>> {
    let limit = 1i64 << depth;
    cells
        .iter()
        .map(|c| {
            for &v in c {
                if v < 0 || v >= limit {
                    return Err(Error::Range(format!("cell coordinate {v} outside [0, {limit})")));
                }
            }
            Ok([c[0] as u32, c[1] as u32, c[2] as u32])
        })
        .collect()
}
