//! Axial 2-D rotary position embedding.
//!
//! Each head's channels are split in two halves: the first half rotates with
//! the patch row, the second with the patch column. Inside a half, channels
//! `(2j, 2j + 1)` form a rotation pair with frequency `base^(-2j / half)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Patch-grid coordinate `(row, col)`.
pub type GridPos = (usize, usize);

#[derive(Clone, Debug)]
pub struct RopeTable {
    grid_h: usize,
    grid_w: usize,
    head_dim: usize,
    base: f64,
    // Indexed by `(row * grid_w + col) * (head_dim / 2) + pair`.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(grid_h: usize, grid_w: usize, head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(Error::config(
                "head_dim",
                format!("2-D RoPE needs head_dim divisible by 4, got {head_dim}"),
            ));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::config("grid", "grid extents must be >= 1"));
        }
        if !(base > 0.0) {
            return Err(Error::config(
                "rope_base",
                "frequency base must be positive",
            ));
        }
        let half = head_dim / 2;
        let pairs = head_dim / 2;
        let freqs: Vec<f64> = (0..half / 2)
            .map(|j| base.powf(-2.0 * j as f64 / half as f64))
            .collect();
        let mut cos = Vec::with_capacity(grid_h * grid_w * pairs);
        let mut sin = Vec::with_capacity(grid_h * grid_w * pairs);
        for row in 0..grid_h {
            for col in 0..grid_w {
                for coord in [row, col] {
                    for &f in &freqs {
                        let angle = coord as f64 * f;
                        cos.push(angle.cos());
                        sin.push(angle.sin());
                    }
                }
            }
        }
        Ok(RopeTable {
            grid_h,
            grid_w,
            head_dim,
            base,
            cos,
            sin,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Rotation angle of `pair` at `pos`, recomputed from the frequency rule.
    pub fn angle(&self, pos: GridPos, pair: usize) -> f64 {
        let half = self.head_dim / 2;
        let per_axis = half / 2;
        let (coord, j) = if pair < per_axis {
            (pos.0, pair)
        } else {
            (pos.1, pair - per_axis)
        };
        coord as f64 * self.base.powf(-2.0 * j as f64 / half as f64)
    }

    /// Cached `(cos, sin)` for one channel pair.
    pub fn cos_sin(&self, pos: GridPos, pair: usize) -> (f64, f64) {
        let i = self.offset(pos) + pair;
        (self.cos[i], self.sin[i])
    }

    fn offset(&self, pos: GridPos) -> usize {
        (pos.0 * self.grid_w + pos.1) * (self.head_dim / 2)
    }

    pub(crate) fn check_positions(&self, positions: &[GridPos]) -> Result<()> {
        for &(r, c) in positions {
            if r >= self.grid_h || c >= self.grid_w {
                return Err(Error::Index(format!(
                    "position ({r}, {c}) outside {}x{} grid",
                    self.grid_h, self.grid_w
                )));
            }
        }
        Ok(())
    }

    /// Rotates a `[tokens, heads * head_dim]` buffer in place. Tokens before
    /// `skip` (e.g. a class token) are left untouched; token `skip + i` uses
    /// `positions[i]`. `inverse` applies the transposed rotation, which is
    /// the vector-Jacobian product of the forward rotation.
    pub(crate) fn rotate_rows(
        &self,
        data: &mut [f64],
        width: usize,
        skip: usize,
        positions: &[GridPos],
        inverse: bool,
    ) {
        let sign = if inverse { -1.0 } else { 1.0 };
        let pairs = self.head_dim / 2;
        for (i, &pos) in positions.iter().enumerate() {
            let row = &mut data[(skip + i) * width..(skip + i + 1) * width];
            let off = self.offset(pos);
            for head in row.chunks_mut(self.head_dim) {
                for p in 0..pairs {
                    let (c, s) = (self.cos[off + p], sign * self.sin[off + p]);
                    let (x0, x1) = (head[2 * p], head[2 * p + 1]);
                    head[2 * p] = x0 * c - x1 * s;
                    head[2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Builds the cos/sin cache for a `grid_h × grid_w` patch grid.
pub fn build_rope_table(
    grid_h: usize,
    grid_w: usize,
    head_dim: usize,
    base: f64,
) -> Result<RopeTable> {
    RopeTable::new(grid_h, grid_w, head_dim, base)
}

/// Rotates `v: [tokens, heads, head_dim]` by each token's grid position.
pub fn apply_rope(v: &Tensor, table: &RopeTable, positions: &[GridPos]) -> Result<Tensor> {
    let &[tokens, heads, head_dim] = v.shape() else {
        return Err(Error::InvalidTensor(format!(
            "apply_rope expects [tokens, heads, head_dim], got {:?}",
            v.shape()
        )));
    };
    if head_dim != table.head_dim() {
        return Err(Error::shape("apply_rope", v.shape(), &[table.head_dim()]));
    }
    if positions.len() != tokens {
        return Err(Error::shape("apply_rope", v.shape(), &[positions.len()]));
    }
    table.check_positions(positions)?;
    let mut out = v.data().to_vec();
    table.rotate_rows(&mut out, heads * head_dim, 0, positions, false);
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

/// Row-major positions of every cell in a grid.
pub fn grid_positions(grid_h: usize, grid_w: usize) -> Vec<GridPos> {
    (0..grid_h)
        .flat_map(|r| (0..grid_w).map(move |c| (r, c)))
        .collect()
}
