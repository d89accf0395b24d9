//! NT-Xent contrastive loss and its brute-force twin.
//!
//! For anchor `i` with positive `p(i)`:
//!
//! ```text
//! L_i = -ln( exp(s(i,p(i)) / tau) / sum_{k != i} exp(s(i,k) / tau) )
//! ```
//!
//! where `s` is cosine similarity and the sum runs over the other `2N - 1`
//! latents, positive included. The reported loss is the mean of `L_i` over
//! all `2N` anchors, so each positive pair contributes `L_{i,j} + L_{j,i}`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Scalar;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("train.temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// Partner index of every row, for latents stacked as `[a_0..a_{N-1},
/// b_0..b_{N-1}]`.
pub fn halves_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

fn check_pairing(rows: usize, pairing: &[usize]) -> Result<()> {
    if pairing.len() != rows {
        return Err(Error::shape(
            "nt_xent",
            format!("pairing has {} entries for {rows} latents", pairing.len()),
        ));
    }
    for (i, &p) in pairing.iter().enumerate() {
        if p >= rows || p == i || pairing[p] != i {
            return Err(Error::invalid(format!(
                "pairing is not a fixed-point-free involution at row {i}"
            )));
        }
    }
    Ok(())
}

fn check_inputs(len: usize, rows: usize, dim: usize, pairing: &[usize], tau: f64) -> Result<()> {
    if rows * dim != len || dim == 0 {
        return Err(Error::shape(
            "nt_xent",
            format!("{len} values for {rows} x {dim} latents"),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::config("train.temperature", "must be > 0"));
    }
    check_pairing(rows, pairing)
}

/// Loss value and gradient with respect to the (unnormalized) latents.
///
/// Computed in `f64` with max-subtracted log-sum-exp whatever `S` is.
pub fn nt_xent_with_grad<S: Scalar>(
    latents: &[S],
    rows: usize,
    dim: usize,
    pairing: &[usize],
    tau: f64,
) -> Result<(f64, Vec<S>)> {
    check_inputs(latents.len(), rows, dim, pairing, tau)?;
    if rows < 4 {
        return Err(Error::invalid(
            "NT-Xent needs at least two positive pairs (one negative per anchor)",
        ));
    }

    let mut unit = vec![0.0f64; rows * dim];
    let mut norms = vec![0.0f64; rows];
    for i in 0..rows {
        let z = &latents[i * dim..(i + 1) * dim];
        let n = math::sqrt(z.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm { index: i });
        }
        norms[i] = n;
        for (u, v) in unit[i * dim..(i + 1) * dim].iter_mut().zip(z) {
            *u = v.as_f64() / n;
        }
    }

    // Gram matrix of unit vectors.
    let mut sim = vec![0.0f64; rows * rows];
    f64::gemm(
        rows,
        dim,
        rows,
        1.0,
        &unit,
        (dim as isize, 1),
        &unit,
        (1, dim as isize),
        0.0,
        &mut sim,
        (rows as isize, 1),
    );

    // g[i][k] = d loss / d s_ik along anchor i's row.
    let scale = 1.0 / (tau * rows as f64);
    let mut g = vec![0.0f64; rows * rows];
    let mut total = 0.0;
    for i in 0..rows {
        let row = &sim[i * rows..(i + 1) * rows];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .fold(f64::NEG_INFINITY, |m, (_, &s)| m.max(s / tau));
        let mut denom = 0.0;
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                denom += math::exp(s / tau - max);
            }
        }
        let lse = max + math::ln(denom);
        total += lse - row[pairing[i]] / tau;
        let grow = &mut g[i * rows..(i + 1) * rows];
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                grow[k] = math::exp(s / tau - lse) * scale;
            }
        }
        grow[pairing[i]] -= scale;
    }
    let loss = total / rows as f64;

    // Symmetrize: s_ik feeds both anchor i and anchor k.
    let mut gs = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            gs[i * rows + k] = g[i * rows + k] + g[k * rows + i];
        }
    }
    let mut du = vec![0.0f64; rows * dim];
    f64::gemm(
        rows,
        rows,
        dim,
        1.0,
        &gs,
        (rows as isize, 1),
        &unit,
        (dim as isize, 1),
        0.0,
        &mut du,
        (dim as isize, 1),
    );

    let mut grad = vec![S::zero(); rows * dim];
    for i in 0..rows {
        let u = &unit[i * dim..(i + 1) * dim];
        let d = &du[i * dim..(i + 1) * dim];
        let proj: f64 = u.iter().zip(d).map(|(a, b)| a * b).sum();
        for ((out, &ui), &di) in grad[i * dim..(i + 1) * dim].iter_mut().zip(u).zip(d) {
            *out = S::from_f64_lossy((di - ui * proj) / norms[i]);
        }
    }
    Ok((loss, grad))
}

/// Loss value only.
pub fn nt_xent<S: Scalar>(
    latents: &[S],
    rows: usize,
    dim: usize,
    pairing: &[usize],
    tau: f64,
) -> Result<f64> {
    nt_xent_with_grad(latents, rows, dim, pairing, tau).map(|(l, _)| l)
}

/// Direct enumeration of the loss: explicit cosine per pair, explicit
/// softmax per anchor, no shared intermediates and no stabilization.
/// Accepts a single pair (whose loss is exactly zero).
pub fn nt_xent_oracle(
    latents: &[f64],
    rows: usize,
    dim: usize,
    pairing: &[usize],
    tau: f64,
) -> Result<f64> {
    check_inputs(latents.len(), rows, dim, pairing, tau)?;
    let vec_of = |i: usize| &latents[i * dim..(i + 1) * dim];
    for i in 0..rows {
        if vec_of(i).iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm { index: i });
        }
    }
    let cosine = |i: usize, k: usize| {
        let (u, v) = (vec_of(i), vec_of(k));
        let mut dot = 0.0;
        let mut nu = 0.0;
        let mut nv = 0.0;
        for d in 0..dim {
            dot += u[d] * v[d];
            nu += u[d] * u[d];
            nv += v[d] * v[d];
        }
        dot / (math::sqrt(nu) * math::sqrt(nv))
    };
    let mut sum = 0.0;
    for i in 0..rows {
        let numerator = math::exp(cosine(i, pairing[i]) / tau);
        let mut denominator = 0.0;
        for k in 0..rows {
            if k != i {
                denominator += math::exp(cosine(i, k) / tau);
            }
        }
        sum += -math::ln(numerator / denominator);
    }
    Ok(sum / rows as f64)
}
