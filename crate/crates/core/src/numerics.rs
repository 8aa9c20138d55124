//! Dense 64-bit kernels used by the agent: softmax, cosine similarity,
//! sinusoidal position encodings, and single-head local-window attention with
//! a hand-derived reverse pass.
//!
//! Vectors are column vectors, so a projection of frame `t` is `W · x_t` and a
//! `T × D` input stacks frames as rows.

use crate::error::{Error, Result};

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn mul_vec_transposed(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            axpy(&mut out, vr, self.row(r));
        }
        out
    }

    /// Stacks `W · x_t` for every row `x_t`, i.e. `X · Wᵀ`.
    pub fn project_rows(&self, weight: &Matrix) -> Matrix {
        debug_assert_eq!(weight.cols, self.cols);
        let mut out = Matrix::zeros(self.rows, weight.rows);
        for t in 0..self.rows {
            let x = self.row(t);
            let dst = out.row_mut(t);
            for (o, w) in dst.iter_mut().zip(weight.data.chunks_exact(weight.cols)) {
                *o = dot(w, x);
            }
        }
        out
    }

    /// `self += scale · other` element-wise.
    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(&mut self.data, scale, &other.data);
    }

    /// `self += a · bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!((a.len(), b.len()), self.shape());
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            axpy(self.row_mut(r), ar, b);
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::invalid(format!(
            "{what}: non-finite value at index {i}"
        ))),
        None => Ok(()),
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    check_finite(logits, "softmax")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log softmax` through log-sum-exp. The normalizer is formed as
/// `log1p` of the non-maximal mass, so a near-certain entry keeps full
/// relative precision in its (tiny) log-probability.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("log_softmax of an empty vector"));
    }
    check_finite(logits, "log_softmax")?;
    let top = argmax(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    let lse = rest.ln_1p();
    Ok(logits.iter().map(|&l| (l - max) - lse).collect())
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Sinusoidal position encodings: `PE(p, 2i) = sin(p / 10000^(2i/dim))`,
/// `PE(p, 2i+1) = cos(p / 10000^(2i/dim))`.
pub fn sinusoidal_pe(length: usize, dim: usize) -> Result<Matrix> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "position encoding needs an even dimension, got {dim}"
        )));
    }
    let mut pe = Matrix::zeros(length, dim);
    for pos in 0..length {
        let row = pe.row_mut(pos);
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Inclusive window `[lo, hi]` of frames attended to by frame `t`.
///
/// Covers `t - ⌊w/2⌋ ..= t + ⌈w/2⌉ - 1`, clipped to the sequence.
pub fn window_bounds(t: usize, len: usize, window: usize) -> (usize, usize) {
    let back = window / 2;
    let fwd = window - back - 1;
    (t.saturating_sub(back), (t + fwd).min(len - 1))
}

/// Query/key/value projections of the single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_q: Matrix::zeros(dim, dim),
            w_k: Matrix::zeros(dim, dim),
            w_v: Matrix::zeros(dim, dim),
        }
    }

    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if m.shape() != (d, d) {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {d}x{d}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn matrices(&self) -> [&Matrix; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }

    /// Concatenation `w_q ‖ w_k ‖ w_v` in row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        self.matrices()
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        let n = dim * dim;
        if flat.len() != 3 * n {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                3 * n,
                flat.len()
            )));
        }
        Self::new(
            Matrix::from_vec(dim, dim, flat[..n].to_vec())?,
            Matrix::from_vec(dim, dim, flat[n..2 * n].to_vec())?,
            Matrix::from_vec(dim, dim, flat[2 * n..].to_vec())?,
        )
    }

    pub fn norm(&self) -> f64 {
        self.matrices()
            .iter()
            .map(|m| m.frobenius_norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_scaled(&mut self, scale: f64, other: &AttentionParams) {
        self.w_q.add_scaled(scale, &other.w_q);
        self.w_k.add_scaled(scale, &other.w_k);
        self.w_v.add_scaled(scale, &other.w_v);
    }
}

/// Everything the reverse pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    params: AttentionParams,
    window: usize,
    /// `x + PE`
    inputs: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per frame: first index of its window and the softmax weights over it.
    weights: Vec<(usize, Vec<f64>)>,
}

impl AttentionCache {
    pub fn inputs_with_pe(&self) -> &Matrix {
        &self.inputs
    }

    /// Attention weights of frame `t` and the frame index they start at.
    pub fn weights(&self, t: usize) -> (usize, &[f64]) {
        let (lo, w) = &self.weights[t];
        (*lo, w)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Single-head attention restricted to a local window, with sinusoidal
/// positions added to the input and a residual connection:
/// `out_t = x'_t + Σ_s a_ts · W_v x'_s`, with `x' = x + PE` and
/// `a_t = softmax_s(q_t · k_s / √D)` over frame `t`'s window.
pub fn local_window_attention_forward(
    x: &Matrix,
    params: &AttentionParams,
    window: usize,
) -> Result<(Matrix, AttentionCache)> {
    let (len, dim) = x.shape();
    if params.dim() != dim {
        return Err(Error::shape(format!(
            "features have dimension {dim}, attention expects {}",
            params.dim()
        )));
    }
    if window == 0 {
        return Err(Error::invalid("attention window must be at least 1"));
    }
    if len == 0 {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    let pe = sinusoidal_pe(len, dim)?;
    let mut inputs = x.clone();
    inputs.add_scaled(1.0, &pe);
    forward_on_inputs(inputs, params, window)
}

fn forward_on_inputs(
    inputs: Matrix,
    params: &AttentionParams,
    window: usize,
) -> Result<(Matrix, AttentionCache)> {
    let (len, dim) = inputs.shape();
    let scale = 1.0 / (dim as f64).sqrt();
    let q = inputs.project_rows(&params.w_q);
    let k = inputs.project_rows(&params.w_k);
    let v = inputs.project_rows(&params.w_v);

    let mut out = inputs.clone();
    let mut weights = Vec::with_capacity(len);
    for t in 0..len {
        let (lo, hi) = window_bounds(t, len, window);
        let logits: Vec<f64> = (lo..=hi).map(|s| dot(q.row(t), k.row(s)) * scale).collect();
        let a = softmax(&logits)?;
        let dst = out.row_mut(t);
        for (j, &w) in a.iter().enumerate() {
            axpy(dst, w, v.row(lo + j));
        }
        weights.push((lo, a));
    }
    if !out.is_finite() {
        return Err(Error::Numerical("attention output is not finite".into()));
    }
    let cache = AttentionCache {
        params: params.clone(),
        window,
        inputs,
        q,
        k,
        v,
        weights,
    };
    Ok((out, cache))
}

/// Exact gradients of `Σ upstream ⊙ out` with respect to the raw input `x`
/// and the three projections.
pub fn local_window_attention_backward(
    cache: &AttentionCache,
    upstream: &Matrix,
) -> Result<(Matrix, AttentionParams)> {
    let (len, dim) = cache.inputs.shape();
    if upstream.shape() != (len, dim) {
        return Err(Error::shape(format!(
            "upstream gradient is {:?}, forward output was {len}x{dim}",
            upstream.shape()
        )));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut d_inputs = upstream.clone();
    let mut dq = Matrix::zeros(len, dim);
    let mut dk = Matrix::zeros(len, dim);
    let mut dv = Matrix::zeros(len, dim);

    for t in 0..len {
        let g = upstream.row(t);
        let (lo, a) = cache.weights(t);
        let da: Vec<f64> = (0..a.len()).map(|j| dot(g, cache.v.row(lo + j))).collect();
        let mean: f64 = a.iter().zip(&da).map(|(w, d)| w * d).sum();
        for (j, (&w, &d)) in a.iter().zip(&da).enumerate() {
            let s = lo + j;
            axpy(dv.row_mut(s), w, g);
            let dlogit = w * (d - mean) * scale;
            if dlogit != 0.0 {
                axpy(dq.row_mut(t), dlogit, cache.k.row(s));
                axpy(dk.row_mut(s), dlogit, cache.q.row(t));
            }
        }
    }

    let mut grads = AttentionParams::zeros(dim);
    for t in 0..len {
        let x = cache.inputs.row(t);
        grads.w_q.add_outer(dq.row(t), x);
        grads.w_k.add_outer(dk.row(t), x);
        grads.w_v.add_outer(dv.row(t), x);
        let dx = d_inputs.row_mut(t);
        axpy(dx, 1.0, &cache.params.w_q.mul_vec_transposed(dq.row(t)));
        axpy(dx, 1.0, &cache.params.w_k.mul_vec_transposed(dk.row(t)));
        axpy(dx, 1.0, &cache.params.w_v.mul_vec_transposed(dv.row(t)));
    }
    Ok((d_inputs, grads))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `at`.
pub fn finite_difference_gradient<F>(mut f: F, at: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut point = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = f(&point)?;
        point[i] = orig - step;
        let minus = f(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
