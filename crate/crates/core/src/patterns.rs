//! Semi-structured kernel patterns.
//!
//! A pattern keeps `n` collinear weights of a `d x d` kernel: along the main
//! diagonal, the anti-diagonal, a row segment or a column segment. Diagonals
//! are anchored at index 0; row and column segments start anywhere that
//! keeps all `n` cells in bounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UpaqError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    MainDiagonal,
    AntiDiagonal,
    Row,
    Column,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [
        PatternKind::MainDiagonal,
        PatternKind::AntiDiagonal,
        PatternKind::Row,
        PatternKind::Column,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelPattern {
    pub kind: PatternKind,
    pub d: usize,
    pub n: usize,
    /// Retained `(row, col)` cells in generation order.
    pub positions: Vec<(usize, usize)>,
}

fn check_params(n: usize, d: usize) -> Result<()> {
    if d == 0 || n == 0 || n > d {
        return Err(UpaqError::Param(format!("pattern needs 1 <= n <= d, got n={n}, d={d}")));
    }
    Ok(())
}

impl KernelPattern {
    /// Builds the pattern of `kind` with the given anchor. `line` is the row
    /// (for `Row`) or column (for `Column`), `start` the first cell along it;
    /// both are ignored for diagonals.
    pub fn build(kind: PatternKind, n: usize, d: usize, line: usize, start: usize) -> Result<Self> {
        check_params(n, d)?;
        let len = n.min(d);
        let positions = match kind {
            PatternKind::MainDiagonal => (0..len).map(|i| (i, i)).collect(),
            PatternKind::AntiDiagonal => (0..len).map(|i| (i, d - i - 1)).collect(),
            PatternKind::Row | PatternKind::Column => {
                if line >= d || start > d - n {
                    return Err(UpaqError::Param(format!(
                        "segment anchor (line={line}, start={start}) out of range for n={n}, d={d}"
                    )));
                }
                if kind == PatternKind::Row {
                    (0..n).map(|i| (line, start + i)).collect()
                } else {
                    (0..n).map(|i| (start + i, line)).collect()
                }
            }
        };
        Ok(Self { kind, d, n, positions })
    }

    /// Row-major `d x d` keep-mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.d * self.d];
        for &(r, c) in &self.positions {
            mask[r * self.d + c] = true;
        }
        mask
    }

    /// Row-major flat indices of the retained cells, ascending.
    pub fn flat_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.positions.iter().map(|&(r, c)| r * self.d + c).collect();
        idx.sort_unstable();
        idx
    }

    /// Same cell set, regardless of kind label or listing order.
    pub fn same_cells(&self, other: &KernelPattern) -> bool {
        self.d == other.d && self.flat_indices() == other.flat_indices()
    }

    /// Checks the structural invariants of a pattern.
    pub fn check(&self) -> Result<()> {
        check_params(self.n, self.d)?;
        let bad = |msg: &str| Err(UpaqError::Param(format!("invalid pattern {:?}: {msg}", self.positions)));
        if self.positions.len() != self.n.min(self.d) {
            return bad("wrong number of positions");
        }
        if self.positions.iter().any(|&(r, c)| r >= self.d || c >= self.d) {
            return bad("position out of range");
        }
        let idx = self.flat_indices();
        if idx.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate position");
        }
        let p = &self.positions;
        let collinear = match self.kind {
            PatternKind::MainDiagonal => p.iter().enumerate().all(|(i, &(r, c))| r == i && c == i),
            PatternKind::AntiDiagonal => p.iter().enumerate().all(|(i, &(r, c))| r == i && c == self.d - 1 - i),
            PatternKind::Row => p.iter().enumerate().all(|(i, &(r, c))| r == p[0].0 && c == p[0].1 + i),
            PatternKind::Column => p.iter().enumerate().all(|(i, &(r, c))| c == p[0].1 && r == p[0].0 + i),
        };
        if !collinear {
            return bad("positions are not collinear for their kind");
        }
        Ok(())
    }
}

/// Draws one random pattern. All randomness comes from `rng`.
pub fn generate_pattern<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<KernelPattern> {
    check_params(n, d)?;
    let kind = PatternKind::ALL[rng.gen_range(0..4)];
    match kind {
        PatternKind::MainDiagonal | PatternKind::AntiDiagonal => KernelPattern::build(kind, n, d, 0, 0),
        PatternKind::Row | PatternKind::Column => {
            let line = rng.gen_range(0..d);
            let start = rng.gen_range(0..=d - n);
            KernelPattern::build(kind, n, d, line, start)
        }
    }
}

/// Every pattern `generate_pattern(n, d, _)` can return, without duplicate
/// cell sets. Order: main diagonal, anti-diagonal, rows (by row, then start),
/// columns (by column, then start).
pub fn enumerate_all_patterns(n: usize, d: usize) -> Result<Vec<KernelPattern>> {
    check_params(n, d)?;
    let mut all = vec![
        KernelPattern::build(PatternKind::MainDiagonal, n, d, 0, 0)?,
        KernelPattern::build(PatternKind::AntiDiagonal, n, d, 0, 0)?,
    ];
    for kind in [PatternKind::Row, PatternKind::Column] {
        for line in 0..d {
            for start in 0..=d - n {
                all.push(KernelPattern::build(kind, n, d, line, start)?);
            }
        }
    }
    let mut unique: Vec<KernelPattern> = Vec::with_capacity(all.len());
    for p in all {
        if !unique.iter().any(|u| u.same_cells(&p)) {
            unique.push(p);
        }
    }
    Ok(unique)
}

/// Keeps the pattern cells of a row-major `d x d` slice and zeroes the rest.
pub fn apply_pattern(slice: &[f32], pattern: &KernelPattern) -> Result<Vec<f32>> {
    let d = pattern.d;
    if slice.len() != d * d {
        return Err(UpaqError::Param(format!(
            "slice has {} values, pattern expects {d}x{d}",
            slice.len()
        )));
    }
    let mut out = vec![0.0; d * d];
    for &(r, c) in &pattern.positions {
        out[r * d + c] = slice[r * d + c];
    }
    Ok(out)
}

/// Packs the keep-mask row-major into bits, least significant bit first.
pub fn mask_to_bytes(pattern: &KernelPattern) -> Vec<u8> {
    let mask = pattern.mask();
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, keep) in mask.iter().enumerate() {
        if *keep {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

pub fn mask_byte_len(d: usize) -> usize {
    (d * d).div_ceil(8)
}
