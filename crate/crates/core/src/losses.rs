//! Training objectives: the regularized prediction loss with its variance,
//! correlation, coskewness and locality terms, plus the reconstruction, KL
//! and DeepCubeAI baseline objectives.
//!
//! The batch-statistics terms are fused tape operations with hand-written
//! backward passes; all reductions accumulate in `f64`.

use dwmr_ndcore::real::{matmul_into, matmul_tn_into};
use dwmr_ndcore::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

/// ε of the batch standardization and of the variance hinge.
pub const STD_EPS: f64 = 1e-6;
/// Probability clamp of the KL term.
pub const KL_EPS: f64 = 1e-7;

/// Non-negative term weights; the prediction weight is fixed at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub var: f64,
    pub cor: f64,
    pub cos: f64,
    pub loc: f64,
    pub rec: f64,
    pub kl: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        var: 0.0,
        cor: 0.0,
        cos: 0.0,
        loc: 0.0,
        rec: 0.0,
        kl: 0.0,
    };
}

/// Bits-per-action flip bounds [L, U].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityWindow {
    pub lower: usize,
    pub upper: usize,
}

impl LocalityWindow {
    pub fn validate(&self, k: usize) -> Result<()> {
        if 1 <= self.lower && self.lower <= self.upper && self.upper <= k {
            Ok(())
        } else {
            Err(CoreError::Invalid(format!(
                "locality window [{}, {}] must satisfy 1 <= L <= U <= K = {k}",
                self.lower, self.upper
            )))
        }
    }

    /// Window center m = (L + U) / 2K.
    pub fn center(&self, k: usize) -> f64 {
        (self.lower + self.upper) as f64 / (2 * k) as f64
    }

    /// Half width w = (U − L) / 2K.
    pub fn half_width(&self, k: usize) -> f64 {
        (self.upper - self.lower) as f64 / (2 * k) as f64
    }
}

fn matrix_dims<T: Real>(tape: &Tape<T>, v: Var, what: &str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [n, k] => Ok((n, k)),
        ref s => Err(CoreError::Invalid(format!("{what} expects an N×K matrix, got {s:?}"))),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn scalar<T: Real>(v: f64) -> Tensor<T> {
    Tensor::scalar(T::lit(v))
}

/// Column means and population standard deviations of an N×K matrix.
fn column_stats<T: Real>(p: &[T], n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; k];
    for row in p.chunks_exact(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; k];
    for row in p.chunks_exact(k) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v.f64() - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    (mean, std)
}

/// Per-bit batch standardization p̃ = (p − mean) / (std + ε) with the
/// population standard deviation.
pub fn normalize_batch<T: Real>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let (n, k) = matrix_dims(tape, p, "normalize_batch")?;
    if n < 2 {
        return Err(CoreError::Invalid(format!("batch standardization needs N >= 2, got {n}")));
    }
    let (mean, std) = column_stats(tape.value(p).data(), n, k);
    let out: Vec<T> = tape
        .value(p)
        .data()
        .chunks_exact(k)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, v)| T::lit((v.f64() - mean[j]) / (std[j] + STD_EPS)))
                .collect::<Vec<_>>()
        })
        .collect();
    let value = Tensor::new(vec![n, k], out)?;
    Ok(tape.push(
        "normalize_batch",
        &[p],
        value,
        Box::new(move |ctx, g| {
            let x = ctx.input(0).data();
            let mut gmean = vec![0.0; k];
            let mut gc = vec![0.0; k];
            for (row, grow) in x.chunks_exact(k).zip(g.chunks_exact(k)) {
                for j in 0..k {
                    gmean[j] += grow[j].f64();
                    gc[j] += grow[j].f64() * (row[j].f64() - mean[j]);
                }
            }
            gmean.iter_mut().for_each(|m| *m /= n as f64);
            let mut gx = Vec::with_capacity(n * k);
            for (row, grow) in x.chunks_exact(k).zip(g.chunks_exact(k)) {
                for j in 0..k {
                    let s = std[j] + STD_EPS;
                    let c = row[j].f64() - mean[j];
                    let mut v = (grow[j].f64() - gmean[j]) / s;
                    if std[j] > 0.0 {
                        v -= c * gc[j] / (n as f64 * std[j] * s * s);
                    }
                    gx.push(T::lit(v));
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Hinge on the per-bit standard deviation:
/// (1/K) Σ_k max(0, γ − √(Var_n[p_·k] + ε)).
pub fn var_loss<T: Real>(tape: &mut Tape<T>, p: Var, gamma: f64) -> Result<Var> {
    let (n, k) = matrix_dims(tape, p, "var_loss")?;
    let (mean, std) = column_stats(tape.value(p).data(), n, k);
    let sd: Vec<f64> = std.iter().map(|s| (s * s + STD_EPS).sqrt()).collect();
    let value: f64 = sd.iter().map(|s| (gamma - s).max(0.0)).sum::<f64>() / k as f64;
    Ok(tape.push(
        "var_loss",
        &[p],
        scalar(value),
        Box::new(move |ctx, g| {
            let g = g[0].f64();
            let x = ctx.input(0).data();
            let coef: Vec<f64> = sd
                .iter()
                .map(|&s| if gamma - s > 0.0 { -g / (k as f64 * n as f64 * s) } else { 0.0 })
                .collect();
            let gx = x
                .chunks_exact(k)
                .flat_map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| T::lit(coef[j] * (v.f64() - mean[j])))
                        .collect::<Vec<_>>()
                })
                .collect();
            vec![Some(gx)]
        }),
    ))
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

/// Mean absolute off-diagonal entry of C = p̃ᵀp̃ / (N − 1), on an already
/// standardized batch. Zero for K < 2.
pub fn cor_loss_normalized<T: Real>(tape: &mut Tape<T>, pn: Var) -> Result<Var> {
    let (n, k) = matrix_dims(tape, pn, "cor_loss")?;
    if n < 2 {
        return Err(CoreError::Invalid(format!("correlation needs N >= 2, got {n}")));
    }
    if k < 2 {
        return Ok(tape.push("cor_loss", &[pn], scalar(0.0), Box::new(|_, _| vec![None])));
    }
    let q = to_f64(tape.value(pn).data());
    let mut c = vec![0.0; k * k];
    matmul_tn_into(k, n, k, &q, &q, &mut c, false);
    let denom = (n - 1) as f64;
    let pairs = (k * (k - 1)) as f64;
    let mut value = 0.0;
    let mut s = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let cij = c[i * k + j] / denom;
                value += cij.abs();
                s[i * k + j] = sign(cij);
            }
        }
    }
    value /= pairs;
    Ok(tape.push(
        "cor_loss",
        &[pn],
        scalar(value),
        Box::new(move |ctx, g| {
            let q = to_f64(ctx.input(0).data());
            let mut gq = vec![0.0; n * k];
            matmul_into(n, k, k, &q, &s, &mut gq, false);
            let coef = 2.0 * g[0].f64() / (pairs * denom);
            vec![Some(gq.into_iter().map(|v| T::lit(v * coef)).collect())]
        }),
    ))
}

/// `cor_loss_normalized(normalize_batch(p))`.
pub fn cor_loss<T: Real>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let pn = normalize_batch(tape, p)?;
    cor_loss_normalized(tape, pn)
}

/// Uniformly sampled ordered triplets of distinct bit indices.
pub fn sample_triplets<R: Rng + ?Sized>(rng: &mut R, k: usize, count: usize) -> Result<Vec<[usize; 3]>> {
    if k < 3 {
        return Err(CoreError::Invalid(format!("triplets need K >= 3, got {k}")));
    }
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..k);
            let j = loop {
                let j = rng.random_range(0..k);
                if j != i {
                    break j;
                }
            };
            let l = loop {
                let l = rng.random_range(0..k);
                if l != i && l != j {
                    break l;
                }
            };
            [i, j, l]
        })
        .collect())
}

/// Mean |M_ijk| over ordered distinct triplets, M_ijk = mean_n p̃_ni p̃_nj p̃_nk,
/// on an already standardized batch. With `triplets`, the mean runs over
/// those triplets only. Zero for K < 3.
pub fn cos_loss_normalized<T: Real>(tape: &mut Tape<T>, pn: Var, triplets: Option<Vec<[usize; 3]>>) -> Result<Var> {
    let (n, k) = matrix_dims(tape, pn, "cos_loss")?;
    if k < 3 || triplets.as_ref().is_some_and(|t| t.is_empty()) {
        return Ok(tape.push("cos_loss", &[pn], scalar(0.0), Box::new(|_, _| vec![None])));
    }
    let q = to_f64(tape.value(pn).data());
    match triplets {
        None => cos_full(tape, pn, q, n, k),
        Some(t) => cos_sampled(tape, pn, q, n, k, t),
    }
}

fn cos_full<T: Real>(tape: &mut Tape<T>, pn: Var, q: Vec<f64>, n: usize, k: usize) -> Result<Var> {
    let count = (k * (k - 1) * (k - 2)) as f64;
    let mut signs = vec![0i8; k * k * k];
    let mut z = vec![0.0; n * k];
    let mut m = vec![0.0; k * k];
    let mut value = 0.0;
    for a in 0..k {
        for r in 0..n {
            let s = q[r * k + a];
            for j in 0..k {
                z[r * k + j] = s * q[r * k + j];
            }
        }
        matmul_tn_into(k, n, k, &z, &q, &mut m, false);
        for j in 0..k {
            if j == a {
                continue;
            }
            for l in 0..k {
                if l == a || l == j {
                    continue;
                }
                let v = m[j * k + l] / n as f64;
                value += v.abs();
                signs[(a * k + j) * k + l] = sign(v) as i8;
            }
        }
    }
    value /= count;
    Ok(tape.push(
        "cos_loss",
        &[pn],
        scalar(value),
        Box::new(move |ctx, g| {
            let q = to_f64(ctx.input(0).data());
            let coef = 3.0 * g[0].f64() / (count * n as f64);
            let mut s = vec![0.0; k * k];
            let mut r = vec![0.0; n * k];
            let mut gq = vec![0.0; n * k];
            for a in 0..k {
                for (dst, &sg) in s.iter_mut().zip(&signs[a * k * k..(a + 1) * k * k]) {
                    *dst = sg as f64;
                }
                matmul_into(n, k, k, &q, &s, &mut r, false);
                for row in 0..n {
                    let acc: f64 = (0..k).map(|j| q[row * k + j] * r[row * k + j]).sum();
                    gq[row * k + a] = coef * acc;
                }
            }
            vec![Some(gq.into_iter().map(T::lit).collect())]
        }),
    ))
}

fn cos_sampled<T: Real>(
    tape: &mut Tape<T>,
    pn: Var,
    q: Vec<f64>,
    n: usize,
    k: usize,
    triplets: Vec<[usize; 3]>,
) -> Result<Var> {
    if let Some(bad) = triplets
        .iter()
        .find(|t| t.iter().any(|&i| i >= k) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
    {
        return Err(CoreError::Invalid(format!("invalid triplet {bad:?} for K = {k}")));
    }
    let mut signs = Vec::with_capacity(triplets.len());
    let mut value = 0.0;
    for &[i, j, l] in &triplets {
        let v = (0..n).map(|r| q[r * k + i] * q[r * k + j] * q[r * k + l]).sum::<f64>() / n as f64;
        value += v.abs();
        signs.push(sign(v));
    }
    let count = triplets.len() as f64;
    value /= count;
    Ok(tape.push(
        "cos_loss",
        &[pn],
        scalar(value),
        Box::new(move |ctx, g| {
            let q = to_f64(ctx.input(0).data());
            let coef = g[0].f64() / (count * n as f64);
            let mut gq = vec![0.0; n * k];
            for (&[i, j, l], &s) in triplets.iter().zip(&signs) {
                if s == 0.0 {
                    continue;
                }
                for r in 0..n {
                    let (a, b, c) = (q[r * k + i], q[r * k + j], q[r * k + l]);
                    gq[r * k + i] += coef * s * b * c;
                    gq[r * k + j] += coef * s * a * c;
                    gq[r * k + l] += coef * s * a * b;
                }
            }
            vec![Some(gq.into_iter().map(T::lit).collect())]
        }),
    ))
}

/// `cos_loss_normalized(normalize_batch(p))`.
pub fn cos_loss<T: Real>(tape: &mut Tape<T>, p: Var, triplets: Option<Vec<[usize; 3]>>) -> Result<Var> {
    let pn = normalize_batch(tape, p)?;
    cos_loss_normalized(tape, pn, triplets)
}

/// Soft Hamming distance d_n = Σ_k |p − b′|·I(|p − b′| > 0.5) / 0.75K per row.
pub fn flip_distance(p: &[f64], target: &[f64], k: usize) -> Vec<f64> {
    p.chunks_exact(k)
        .zip(target.chunks_exact(k))
        .map(|(pr, tr)| {
            pr.iter()
                .zip(tr)
                .map(|(a, b)| (a - b).abs())
                .filter(|&d| d > 0.5)
                .sum::<f64>()
                / (0.75 * k as f64)
        })
        .collect()
}

/// Locality prior. d_n = Σ_k |p − b′|·I(|p − b′| > 0.5) / 0.75K and the loss is
/// mean_n max(0, |d_n − m| − w)². The indicator is a constant gate in
/// backward; `target` carries no gradient.
pub fn loc_loss<T: Real>(tape: &mut Tape<T>, p: Var, target: &Tensor<T>, window: LocalityWindow) -> Result<Var> {
    let (n, k) = matrix_dims(tape, p, "loc_loss")?;
    if target.shape() != [n, k] {
        return Err(CoreError::Invalid(format!(
            "loc_loss target shape {:?} differs from {:?}",
            target.shape(),
            [n, k]
        )));
    }
    window.validate(k)?;
    let (m, w) = (window.center(k), window.half_width(k));
    let norm = 0.75 * k as f64;
    let pv = tape.value(p).data();
    let tv = target.data();
    let mut coef = vec![0.0; n];
    let mut value = 0.0;
    for r in 0..n {
        let d: f64 = (0..k)
            .map(|j| (pv[r * k + j].f64() - tv[r * k + j].f64()).abs())
            .filter(|&a| a > 0.5)
            .sum::<f64>()
            / norm;
        let h = ((d - m).abs() - w).max(0.0);
        value += h * h;
        coef[r] = 2.0 * h * sign(d - m) / (n as f64 * norm);
    }
    value /= n as f64;
    let target = tv.to_vec();
    Ok(tape.push(
        "loc_loss",
        &[p],
        scalar(value),
        Box::new(move |ctx, g| {
            let g = g[0].f64();
            let pv = ctx.input(0).data();
            let gx = (0..n * k)
                .map(|i| {
                    let diff = pv[i].f64() - target[i].f64();
                    if diff.abs() > 0.5 {
                        T::lit(g * coef[i / k] * sign(diff))
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(gx)]
        }),
    ))
}

/// KL(Bernoulli(p) ‖ Bernoulli(0.5)) averaged over all entries, with p
/// clamped to [1e-7, 1 − 1e-7].
pub fn kl_loss<T: Real>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let count = tape.value(p).len();
    if count == 0 {
        return Err(CoreError::Invalid("kl_loss on an empty tensor".into()));
    }
    let value = tape
        .value(p)
        .data()
        .iter()
        .map(|v| {
            let x = v.f64().clamp(KL_EPS, 1.0 - KL_EPS);
            x * (2.0 * x).ln() + (1.0 - x) * (2.0 * (1.0 - x)).ln()
        })
        .sum::<f64>()
        / count as f64;
    Ok(tape.push(
        "kl_loss",
        &[p],
        scalar(value),
        Box::new(move |ctx, g| {
            let g = g[0].f64() / count as f64;
            let gx = ctx
                .input(0)
                .data()
                .iter()
                .map(|v| {
                    let x = v.f64();
                    if x < KL_EPS || x > 1.0 - KL_EPS {
                        T::zero()
                    } else {
                        T::lit(g * (x / (1.0 - x)).ln())
                    }
                })
                .collect();
            vec![Some(gx)]
        }),
    ))
}

/// Logistic noise log u − log(1 − u), u ~ Uniform(0, 1).
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

/// Binary-Concrete relaxation sigmoid((logits + noise) / temperature) with the
/// noise held fixed (reparameterized).
pub fn binary_concrete<T: Real>(tape: &mut Tape<T>, logits: Var, noise: &[f64], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(CoreError::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let shape = tape.shape(logits).to_vec();
    let nv = tape.constant(Tensor::from_f64(&shape, noise)?);
    let z = tape.add(logits, nv)?;
    let z = if temperature == 1.0 { z } else { tape.scale(z, 1.0 / temperature) };
    Ok(tape.sigmoid(z))
}

/// BCE between predicted next-step probabilities and the detached target
/// bits.
pub fn pred_loss<T: Real>(tape: &mut Tape<T>, p_hat: Var, target_bits: Var) -> Result<Var> {
    Ok(tape.bce(p_hat, target_bits)?)
}

/// Pixel MSE.
pub fn rec_loss<T: Real>(tape: &mut Tape<T>, x_hat: Var, x: Var) -> Result<Var> {
    Ok(tape.mse(x_hat, x)?)
}

/// Σ wᵢ·termᵢ, skipping zero weights.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total = base;
    for &(w, v) in terms {
        if w != 0.0 {
            let s = tape.scale(v, w);
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

/// The individual terms of the regularized objective.
#[derive(Clone, Copy, Debug)]
pub struct DwmrTerms {
    pub pred: Var,
    pub var: Var,
    pub cor: Var,
    pub cos: Var,
    pub loc: Var,
}

/// L_pred + λ_var L_var + λ_cor L_cor + λ_cos L_cos + λ_loc L_loc.
pub fn total_dwmr<T: Real>(tape: &mut Tape<T>, terms: &DwmrTerms, w: &LossWeights) -> Result<Var> {
    weighted_sum(
        tape,
        terms.pred,
        &[(w.var, terms.var), (w.cor, terms.cor), (w.cos, terms.cos), (w.loc, terms.loc)],
    )
}

/// Regularizer settings shared by every DWMR-family objective.
#[derive(Clone, Debug)]
pub struct RegularizerSpec {
    pub gamma: f64,
    pub window: LocalityWindow,
    /// `None` evaluates every distinct triplet.
    pub triplets: Option<Vec<[usize; 3]>>,
}

/// Evaluates all five terms on the current batch. The regularizers see only
/// the probabilities of the current observations.
pub fn dwmr_terms<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    p_hat: Var,
    target_bits: &Tensor<T>,
    spec: &RegularizerSpec,
) -> Result<DwmrTerms> {
    let tb = tape.constant(target_bits.clone());
    let pred = pred_loss(tape, p_hat, tb)?;
    let var = var_loss(tape, p, spec.gamma)?;
    let pn = normalize_batch(tape, p)?;
    let cor = cor_loss_normalized(tape, pn)?;
    let cos = cos_loss_normalized(tape, pn, spec.triplets.clone())?;
    let loc = loc_loss(tape, p, target_bits, spec.window)?;
    Ok(DwmrTerms { pred, var, cor, cos, loc })
}

/// DeepCubeAI terms.
#[derive(Clone, Copy, Debug)]
pub struct DeepCubeTerms {
    pub pred: Var,
    pub rec: Option<Var>,
    pub total: Var,
}

/// ½MSE(r(p′), sg(r(p̂′))) + ½MSE(p̂′, sg(r(p′))) + λ_rec·(½MSE(dec(p), x) +
/// ½MSE(dec(p′), x′)), where r is straight-through rounding. `recon` holds
/// (dec(p), x, dec(p′), x′).
pub fn deepcubeai_loss<T: Real>(
    tape: &mut Tape<T>,
    p_next: Var,
    p_hat: Var,
    recon: Option<(Var, Var, Var, Var)>,
    lambda_rec: f64,
) -> Result<DeepCubeTerms> {
    let r_next = tape.straight_through_round(p_next);
    let r_hat = tape.straight_through_round(p_hat);
    let sg_r_hat = tape.stop_gradient(r_hat);
    let sg_r_next = tape.stop_gradient(r_next);
    let a = tape.mse(r_next, sg_r_hat)?;
    let b = tape.mse(p_hat, sg_r_next)?;
    let ab = tape.add(a, b)?;
    let pred = tape.scale(ab, 0.5);
    let (rec, total) = match recon {
        Some((xh, x, xh2, x2)) => {
            let r1 = tape.mse(xh, x)?;
            let r2 = tape.mse(xh2, x2)?;
            let rs = tape.add(r1, r2)?;
            let rec = tape.scale(rs, 0.5);
            (Some(rec), weighted_sum(tape, pred, &[(lambda_rec, rec)])?)
        }
        None => (None, pred),
    };
    Ok(DeepCubeTerms { pred, rec, total })
}

/// Predictor-only part of the DeepCubeAI objective: ½MSE(p̂′, sg(r(p′))) with
/// p′ already detached.
pub fn deepcubeai_predictor_loss<T: Real>(tape: &mut Tape<T>, p_hat: Var, rounded_next: Var) -> Result<Var> {
    let m = tape.mse(p_hat, rounded_next)?;
    Ok(tape.scale(m, 0.5))
}
