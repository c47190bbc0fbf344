//! Space-filling-curve serialization of voxel coordinates.
//!
//! Z-order codes interleave coordinate bits three ways. The primary axis owns
//! the least-significant slot of every bit triple, so it varies fastest as the
//! code increases; the secondary horizontal axis takes the middle slot and z
//! always takes the top slot. Hilbert codes use the transpose/Gray-code
//! construction and exist mainly as a latency and locality baseline.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::voxelgrid::SparseVoxelTensor;

pub const MAX_BITS_PER_AXIS: u32 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Priority {
    XFirst,
    YFirst,
}

impl Priority {
    /// Interleave slot of (x, y, z) within each bit triple.
    fn slots(self) -> [u32; 3] {
        match self {
            Priority::XFirst => [0, 1, 2],
            Priority::YFirst => [1, 0, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Curve {
    ZOrderX,
    ZOrderY,
    Hilbert,
    /// Seeded uniform shuffle, kept as an ablation baseline.
    Random(u64),
}

impl Curve {
    pub fn zorder(priority: Priority) -> Self {
        match priority {
            Priority::XFirst => Curve::ZOrderX,
            Priority::YFirst => Curve::ZOrderY,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Curve::ZOrderX => "zorder-x",
            Curve::ZOrderY => "zorder-y",
            Curve::Hilbert => "hilbert",
            Curve::Random(_) => "random",
        }
    }
}

impl fmt::Display for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Curve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zorder-x" | "zorder" | "z-x" => Ok(Curve::ZOrderX),
            "zorder-y" | "z-y" => Ok(Curve::ZOrderY),
            "hilbert" => Ok(Curve::Hilbert),
            "random" => Ok(Curve::Random(0)),
            other => Err(Error::config("curve", format!("unknown curve `{other}`"))),
        }
    }
}

/// `ceil(log2(max extent))`, at least 1 and at most [`MAX_BITS_PER_AXIS`].
pub fn default_bits(grid_shape: [u32; 3]) -> u32 {
    let max = grid_shape.iter().copied().max().unwrap_or(1).max(2);
    (32 - (max - 1).leading_zeros()).clamp(1, MAX_BITS_PER_AXIS)
}

fn check_bits(coords: &[[u32; 3]], bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS_PER_AXIS {
        return Err(Error::config(
            "bits_per_axis",
            format!("must be in 1..={MAX_BITS_PER_AXIS}, got {bits}"),
        ));
    }
    let limit = 1u64 << bits;
    let seen = coords
        .iter()
        .fold([0u32; 3], |a, c| [a[0] | c[0], a[1] | c[1], a[2] | c[2]]);
    if seen.iter().all(|&v| (v as u64) < limit) {
        return Ok(());
    }
    for c in coords {
        for (axis, &v) in c.iter().enumerate() {
            if v as u64 >= limit {
                return Err(Error::CoordinateOverflow {
                    axis,
                    value: v,
                    bits,
                });
            }
        }
    }
    Ok(())
}

/// Spreads the low 21 bits of `v` so bit k lands at position 3k.
#[inline]
fn spread3(v: u32) -> u64 {
    let mut x = (v as u64) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
pub(crate) fn morton_code(c: [u32; 3], priority: Priority) -> u64 {
    let s = priority.slots();
    (spread3(c[0]) << s[0]) | (spread3(c[1]) << s[1]) | (spread3(c[2]) << s[2])
}

/// Bit-interleaved Z-order codes.
pub fn morton_encode(
    coords: &[[u32; 3]],
    priority: Priority,
    bits_per_axis: u32,
) -> Result<Vec<u64>> {
    check_bits(coords, bits_per_axis)?;
    Ok(coords.iter().map(|&c| morton_code(c, priority)).collect())
}

/// Skilling's axes-to-transpose followed by bit interleaving, x most significant.
pub(crate) fn hilbert_code(c: [u32; 3], bits: u32) -> u64 {
    let mut x = c;
    let m = 1u32 << (bits - 1);

    // inverse undo
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

    // Gray encode
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }

    let mut h = 0u64;
    for j in (0..bits).rev() {
        for v in &x {
            h = (h << 1) | ((v >> j) & 1) as u64;
        }
    }
    h
}

pub fn hilbert_encode(coords: &[[u32; 3]], bits_per_axis: u32) -> Result<Vec<u64>> {
    check_bits(coords, bits_per_axis)?;
    Ok(coords
        .iter()
        .map(|&c| hilbert_code(c, bits_per_axis))
        .collect())
}

/// A curve-induced permutation of voxel rows and the codes that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializationOrder {
    pub curve: Curve,
    /// Code of each row, indexed by original row.
    pub codes: Vec<u64>,
    /// `perm[k]` is the original row visited at sequence position `k`.
    pub perm: Vec<usize>,
}

impl SerializationOrder {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Sequence position of each original row.
    pub fn inverse(&self) -> Vec<usize> {
        invert_permutation(&self.perm)
    }

    /// Checks the permutation property and code monotonicity along `perm`.
    pub fn is_valid(&self) -> bool {
        is_permutation(&self.perm)
            && self.codes.len() == self.perm.len()
            && self
                .perm
                .windows(2)
                .all(|w| self.codes[w[0]] <= self.codes[w[1]])
    }

    /// Writes `row,code,perm_position` with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,code,perm_position")?;
        for (row, pos) in self.inverse().into_iter().enumerate() {
            writeln!(w, "{row},{},{pos}", self.codes[row])?;
        }
        Ok(())
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Stable LSD radix argsort. When code and row index fit in 64 bits
/// together they travel as one packed key; otherwise the indices ride along.
pub fn argsort_codes(codes: &[u64]) -> Vec<usize> {
    let n = codes.len();
    let bits = 64 - codes.iter().fold(0u64, |a, &b| a | b).leading_zeros();
    if bits == 0 || n < 2 {
        return (0..n).collect();
    }
    let idx_bits = usize::BITS - (n - 1).leading_zeros();
    if bits + idx_bits <= 64 {
        let mut keys: Vec<u64> = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c << idx_bits) | i as u64)
            .collect();
        radix_sort(&mut keys, None, idx_bits, bits);
        let mask = (1u64 << idx_bits) - 1;
        return keys.into_iter().map(|k| (k & mask) as usize).collect();
    }
    let mut keys = codes.to_vec();
    let mut idx: Vec<u32> = (0..n as u32).collect();
    radix_sort(&mut keys, Some(&mut idx), 0, bits);
    idx.into_iter().map(|i| i as usize).collect()
}

/// Stable sort of `keys` on bits `[lo, lo + bits)`, split evenly into passes
/// of at most 11 bits. `rows` receives the same moves. Passes where every
/// key shares a digit are skipped.
fn radix_sort(keys: &mut Vec<u64>, mut rows: Option<&mut Vec<u32>>, lo: u32, bits: u32) {
    const MAX_DIGIT: u32 = 11;
    let n = keys.len();
    let passes = bits.div_ceil(MAX_DIGIT);
    let digit = bits.div_ceil(passes);
    let mask = (1u64 << digit) - 1;
    let buckets = 1usize << digit;
    let mut hist = vec![0u32; passes as usize * buckets];
    for &k in keys.iter() {
        for p in 0..passes {
            hist[p as usize * buckets + ((k >> (lo + p * digit)) & mask) as usize] += 1;
        }
    }
    let mut keys_out = vec![0u64; n];
    let mut rows_out = vec![0u32; if rows.is_some() { n } else { 0 }];
    for (p, h) in hist.chunks_exact_mut(buckets).enumerate() {
        if h.iter().any(|&c| c as usize == n) {
            continue;
        }
        let mut sum = 0;
        for slot in h.iter_mut() {
            let count = *slot;
            *slot = sum;
            sum += count;
        }
        let shift = lo + p as u32 * digit;
        match rows.as_deref_mut() {
            None => {
                for &k in keys.iter() {
                    let slot = &mut h[((k >> shift) & mask) as usize];
                    keys_out[*slot as usize] = k;
                    *slot += 1;
                }
            }
            Some(rows) => {
                for (&k, &r) in keys.iter().zip(rows.iter()) {
                    let slot = &mut h[((k >> shift) & mask) as usize];
                    keys_out[*slot as usize] = k;
                    rows_out[*slot as usize] = r;
                    *slot += 1;
                }
                std::mem::swap(rows, &mut rows_out);
            }
        }
        std::mem::swap(keys, &mut keys_out);
    }
}

/// Serializes raw coordinates with an explicit bit width.
pub fn order_coords(
    coords: &[[u32; 3]],
    curve: Curve,
    bits_per_axis: u32,
) -> Result<SerializationOrder> {
    match curve {
        Curve::ZOrderX | Curve::ZOrderY | Curve::Hilbert => {
            let codes = match curve {
                Curve::ZOrderX => morton_encode(coords, Priority::XFirst, bits_per_axis)?,
                Curve::ZOrderY => morton_encode(coords, Priority::YFirst, bits_per_axis)?,
                _ => hilbert_encode(coords, bits_per_axis)?,
            };
            let perm = argsort_codes(&codes);
            Ok(SerializationOrder { curve, codes, perm })
        }
        Curve::Random(seed) => {
            let mut perm: Vec<usize> = (0..coords.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut codes = vec![0u64; coords.len()];
            for (k, &p) in perm.iter().enumerate() {
                codes[p] = k as u64;
            }
            Ok(SerializationOrder { curve, codes, perm })
        }
    }
}

/// Serializes a tensor's voxels along `curve`, sized to its grid.
pub fn make_order(t: &SparseVoxelTensor, curve: Curve) -> Result<SerializationOrder> {
    order_coords(t.coords(), curve, default_bits(t.grid_shape()))
}

/// Window/local coordinates and equal-length groups of a windowed serialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    pub window_size: [u32; 3],
    pub c_win: Vec<[u32; 3]>,
    pub c_local: Vec<[u32; 3]>,
    /// Original row indices, in serialized order, split into runs of `group_size`.
    pub groups: Vec<Vec<usize>>,
    pub group_size: usize,
}

/// Splits `c` into window and intra-window coordinates.
pub fn window_coords(c: [u32; 3], window: [u32; 3]) -> ([u32; 3], [u32; 3]) {
    let win = [c[0] / window[0], c[1] / window[1], c[2] / window[2]];
    let local = [
        c[0] - win[0] * window[0],
        c[1] - win[1] * window[1],
        c[2] - win[2] * window[2],
    ];
    (win, local)
}

/// Orders voxels by (window code, local code) and cuts the sequence into
/// groups of `group_size`; windows may straddle group boundaries.
pub fn window_partition(
    t: &SparseVoxelTensor,
    window_size: [u32; 3],
    group_size: usize,
    curve: Curve,
) -> Result<(WindowPartition, SerializationOrder)> {
    if window_size.contains(&0) {
        return Err(Error::config("window_size", "components must be positive"));
    }
    if group_size == 0 {
        return Err(Error::config("group_size", "must be positive"));
    }
    let g = t.grid_shape();
    let win_grid = [
        g[0].div_ceil(window_size[0]),
        g[1].div_ceil(window_size[1]),
        g[2].div_ceil(window_size[2]),
    ];
    let win_bits = default_bits(win_grid);
    let local_bits = default_bits(window_size);
    if 3 * (win_bits + local_bits) > 64 {
        return Err(Error::config(
            "window_size",
            "window and local codes do not fit a 64-bit composite key",
        ));
    }

    let (c_win, c_local): (Vec<[u32; 3]>, Vec<[u32; 3]>) = t
        .coords()
        .iter()
        .map(|&c| window_coords(c, window_size))
        .unzip();

    let (win_codes, local_codes) = match curve {
        Curve::ZOrderX | Curve::ZOrderY => {
            let p = if curve == Curve::ZOrderX {
                Priority::XFirst
            } else {
                Priority::YFirst
            };
            (
                morton_encode(&c_win, p, win_bits)?,
                morton_encode(&c_local, p, local_bits)?,
            )
        }
        Curve::Hilbert => (
            hilbert_encode(&c_win, win_bits)?,
            hilbert_encode(&c_local, local_bits)?,
        ),
        Curve::Random(_) => {
            return Err(Error::config("curve", "random order has no windowed form"));
        }
    };
    let codes: Vec<u64> = win_codes
        .iter()
        .zip(&local_codes)
        .map(|(w, l)| (w << (3 * local_bits)) | l)
        .collect();
    let perm = argsort_codes(&codes);
    let groups = perm.chunks(group_size).map(<[usize]>::to_vec).collect();

    Ok((
        WindowPartition {
            window_size,
            c_win,
            c_local,
            groups,
            group_size,
        },
        SerializationOrder { curve, codes, perm },
    ))
}
