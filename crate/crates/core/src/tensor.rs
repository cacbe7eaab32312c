//! Dense numeric kernels used across the pipeline.
//!
//! Everything is computed in `f64`. Token grids are stored row-major with
//! the embedding channel innermost: `data[(row * width + col) * dim + c]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("pooling stride must be >= 1")]
    InvalidStride,
    #[error("k = {k} exceeds the number of scores ({len})")]
    KTooLarge { k: usize, len: usize },
    #[error("every logit is masked")]
    AllMasked,
    #[error("empty input")]
    Empty,
    #[error("grid data length {got} does not match {height}x{width}x{dim}")]
    BadGridShape {
        height: usize,
        width: usize,
        dim: usize,
        got: usize,
    },
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a·b / (|a|·|b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(TensorError::Empty);
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(TensorError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// A `height × width` grid of `dim`-channel tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(TensorError::Empty);
        }
        if data.len() != height * width * dim {
            return Err(TensorError::BadGridShape {
                height,
                width,
                dim,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    /// Single-channel grid from row-major scalars.
    pub fn scalar(height: usize, width: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Number of cells along one axis after pooling with `stride`.
pub fn pooled_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

/// Average-pool a token grid with a square `stride × stride` window.
///
/// Edge windows average over the cells that fall inside the grid; there is no
/// padding, so a constant grid stays constant.
pub fn avg_pool_2d(grid: &TokenGrid, stride: usize) -> Result<TokenGrid, TensorError> {
    if stride == 0 {
        return Err(TensorError::InvalidStride);
    }
    if stride == 1 {
        return Ok(grid.clone());
    }
    let out_h = pooled_extent(grid.height, stride);
    let out_w = pooled_extent(grid.width, stride);
    let dim = grid.dim;
    let mut out = vec![0.0; out_h * out_w * dim];
    for oy in 0..out_h {
        let rows = oy * stride..((oy + 1) * stride).min(grid.height);
        for ox in 0..out_w {
            let cols = ox * stride..((ox + 1) * stride).min(grid.width);
            let cell = &mut out[(oy * out_w + ox) * dim..(oy * out_w + ox + 1) * dim];
            let count = (rows.len() * cols.len()) as f64;
            for y in rows.clone() {
                for x in cols.clone() {
                    for (acc, v) in cell.iter_mut().zip(grid.token(y, x)) {
                        *acc += v;
                    }
                }
            }
            for acc in cell.iter_mut() {
                *acc /= count;
            }
        }
    }
    TokenGrid::new(out_h, out_w, dim, out)
}

/// Indices of the `k` largest scores, ties broken toward the smaller index,
/// returned in ascending index order.
pub fn top_k_stable(scores: &[f64], k: usize) -> Result<Vec<usize>, TensorError> {
    if k > scores.len() {
        return Err(TensorError::KTooLarge { k, len: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep their index order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Numerically stable softmax. `-inf` entries map to exactly zero.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>, TensorError> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(if logits.is_empty() {
            TensorError::Empty
        } else {
            TensorError::AllMasked
        });
    }
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// `ceil(ratio * n)` that ignores floating-point noise just above an integer,
/// e.g. `0.45 * 20` evaluates to `9.000000000000002` but counts as 9.
pub fn ceil_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let snapped = x.round();
    let c = if (x - snapped).abs() <= 1e-9 * x.abs().max(1.0) {
        snapped
    } else {
        x.ceil()
    };
    (c.max(0.0) as usize).min(n)
}

/// Row-vector times matrix: `x (1×rows) · w (rows×cols)`.
pub fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), x.len() * cols);
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
