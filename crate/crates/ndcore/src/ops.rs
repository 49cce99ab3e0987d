//! Elementwise, structural and loss primitives.

use crate::error::{NdError, Result};
use crate::real::{matmul_into, matmul_nt_into, matmul_tn_into, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp applied to probabilities inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Hard threshold used everywhere a probability becomes a bit: `p >= 0.5`.
pub fn threshold_bit<T: Real>(p: T) -> T {
    if p >= T::lit(0.5) {
        T::one()
    } else {
        T::zero()
    }
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(NdError::Incompatible {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(
            "add",
            &[a, b],
            out,
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(
            "sub",
            &[a, b],
            out,
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(
            "mul",
            &[a, b],
            out,
            Box::new(|ctx, g| {
                let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
                let ga = g.iter().zip(b).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(a).map(|(&g, &x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|x| x * c);
        self.push(
            "scale",
            &[a],
            out,
            Box::new(move |_, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", &[a], out, Box::new(|_, g| vec![Some(g.to_vec())]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(
            "square",
            &[a],
            out,
            Box::new(|ctx, g| {
                let two = T::lit(2.0);
                let x = ctx.input(0).data();
                vec![Some(g.iter().zip(x).map(|(&g, &x)| two * x * g).collect())]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            "relu",
            &[a],
            out,
            Box::new(|ctx, g| {
                let x = ctx.input(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        self.push(
            "sigmoid",
            &[a],
            out,
            Box::new(|ctx, g| {
                let y = ctx.output().data();
                vec![Some(
                    g.iter()
                        .zip(y)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                )]
            }),
        )
    }

    /// Forward: hard threshold at 0.5. Backward: identity (straight-through).
    pub fn straight_through_round(&mut self, a: Var) -> Var {
        let out = self.value(a).map(threshold_bit);
        self.push(
            "straight_through_round",
            &[a],
            out,
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push("reshape", &[a], out, Box::new(|_, g| vec![Some(g.to_vec())])))
    }

    /// Flattens everything after the leading (batch) dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.first().ok_or_else(|| NdError::Shape {
            layer: "flatten".into(),
            got: shape.clone(),
            expected: "rank >= 1".into(),
        })?;
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Concatenation along axis 1. All other dimensions must agree.
    pub fn concat1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() >= 2
            && sa.len() == sb.len()
            && sa[0] == sb[0]
            && sa[2..] == sb[2..];
        if !compatible {
            return Err(NdError::Incompatible {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sa[0];
        let block_a = self.value(a).len() / n.max(1);
        let block_b = self.value(b).len() / n.max(1);
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..n {
                data.extend_from_slice(&da[i * block_a..(i + 1) * block_a]);
                data.extend_from_slice(&db[i * block_b..(i + 1) * block_b]);
            }
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            "concat",
            &[a, b],
            out,
            Box::new(move |_, g| {
                let mut ga = Vec::with_capacity(n * block_a);
                let mut gb = Vec::with_capacity(n * block_b);
                let stride = block_a + block_b;
                for i in 0..n {
                    ga.extend_from_slice(&g[i * stride..i * stride + block_a]);
                    gb.extend_from_slice(&g[i * stride + block_a..(i + 1) * stride]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|v| v.f64()).sum();
        let n = self.value(a).len();
        self.push(
            "sum",
            &[a],
            Tensor::scalar(T::lit(total)),
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `x · w + b` with `x: [N, I]`, `w: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(NdError::Shape {
                layer: "affine".into(),
                got: sx,
                expected: format!("[N, {}] for weight {:?} and bias {:?}", sw.first().copied().unwrap_or(0), sw, sb),
            });
        }
        let (n, i, o) = (sx[0], sw[0], sw[1]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        matmul_into(n, i, o, self.value(x).data(), self.value(w).data(), &mut out, true);
        let out = Tensor::new(vec![n, o], out)?;
        Ok(self.push(
            "affine",
            &[x, w, b],
            out,
            Box::new(move |ctx, g| {
                let (xv, wv) = (ctx.input(0).data(), ctx.input(1).data());
                let mut gx = vec![T::zero(); n * i];
                matmul_nt_into(n, o, i, g, wv, &mut gx, false);
                let mut gw = vec![T::zero(); i * o];
                matmul_tn_into(i, n, o, xv, g, &mut gw, false);
                let mut gb = vec![T::zero(); o];
                for row in g.chunks_exact(o) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        ))
    }

    /// Mean binary cross-entropy. The target receives no gradient.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self, "bce", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1);
        let mut total = 0.0f64;
        for (&p, &t) in p.iter().zip(t) {
            let p = p.f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let t = t.f64();
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let out = Tensor::scalar(T::lit(total / n as f64));
        Ok(self.push(
            "bce",
            &[pred, target],
            out,
            Box::new(move |ctx, g| {
                let (p, t) = (ctx.input(0).data(), ctx.input(1).data());
                let scale = g[0].f64() / n as f64;
                let gp = p
                    .iter()
                    .zip(t)
                    .map(|(&p, &t)| {
                        let raw = p.f64();
                        if raw < BCE_EPS || raw > 1.0 - BCE_EPS {
                            return T::zero();
                        }
                        let t = t.f64();
                        T::lit(scale * (raw - t) / (raw * (1.0 - raw)))
                    })
                    .collect();
                vec![Some(gp), None]
            }),
        ))
    }

    /// Mean squared error; both sides receive gradients.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mse", a, b)?;
        let n = self.value(a).len().max(1);
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = x.f64() - y.f64();
                d * d
            })
            .sum();
        Ok(self.push(
            "mse",
            &[a, b],
            Tensor::scalar(T::lit(total / n as f64)),
            Box::new(move |ctx, g| {
                let s = T::lit(2.0 * g[0].f64() / n as f64);
                let ga: Vec<T> = ctx
                    .input(0)
                    .data()
                    .iter()
                    .zip(ctx.input(1).data())
                    .map(|(&x, &y)| s * (x - y))
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Mean softmax cross-entropy over rows of `logits: [R, C]`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(NdError::Shape {
                layer: "softmax_ce".into(),
                got: shape,
                expected: format!("[{}, C]", labels.len()),
            });
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NdError::Invalid(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0f64; rows * classes];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
            for c in 0..classes {
                probs[r * classes + c] = (row[c].f64() - max).exp() / z;
            }
            total -= row[labels[r]].f64() - max - z.ln();
        }
        let labels = labels.to_vec();
        let denom = rows.max(1) as f64;
        Ok(self.push(
            "softmax_ce",
            &[logits],
            Tensor::scalar(T::lit(total / denom)),
            Box::new(move |_, g| {
                let s = g[0].f64() / denom;
                let mut gx: Vec<T> = probs.iter().map(|&p| T::lit(p * s)).collect();
                for (r, &l) in labels.iter().enumerate() {
                    let idx = r * classes + l;
                    gx[idx] = gx[idx] - T::lit(s);
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[0.0, -3.2, 2.0]).unwrap(), true);
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(r).data()[1], 0.0);
        assert_eq!(tape.value(r).data()[2], 2.0);
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_finite_for_extreme_inputs() {
        for x in [-1000.0f32, -90.0, 90.0, 1000.0] {
            let y = sigmoid_scalar(x);
            assert!(y.is_finite() && (0.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let y = tape.leaf(Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap(), true);
        let d = tape.stop_gradient(x);
        let prod = tape.mul(d, y).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let s = tape.sum(c);
        assert!(matches!(tape.backward(s), Err(NdError::Detached)));
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(NdError::NotScalar(_))));
    }

    #[test]
    fn loss_reference_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_f64(&[4], &[0.5; 4]).unwrap(), true);
        let t = tape.constant(Tensor::from_f64(&[4], &[0.0, 1.0, 1.0, 0.0]).unwrap());
        let l = tape.bce(p, t).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let one = tape.leaf(Tensor::from_f64(&[1], &[1.0]).unwrap(), true);
        let t1 = tape.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let l1 = tape.bce(one, t1).unwrap();
        assert!(tape.value(l1).item() <= 1e-6);

        let m = tape.mse(p, p).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
    }

    #[test]
    fn softmax_ce_rejects_bad_labels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        assert!(tape.softmax_ce(x, &[0, 3]).is_err());
        assert!(tape.softmax_ce(x, &[0]).is_err());
        let l = tape.softmax_ce(x, &[0, 2]).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_f64(&[3], &[0.7, 0.5, 0.2]).unwrap(), true);
        let b = tape.straight_through_round(p);
        assert_eq!(tape.value(b).data(), &[1.0, 1.0, 0.0]);
        let w = tape.constant(Tensor::from_f64(&[3], &[3.0, -1.0, 2.5]).unwrap());
        let prod = tape.mul(b, w).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[3.0, -1.0, 2.5]);
    }

    #[test]
    fn concat_and_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3, 2, 2]), true);
        let b = tape.leaf(Tensor::full(&[2, 1, 2, 2], 1.0), true);
        let c = tape.concat1(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4, 2, 2]);
        assert_eq!(tape.value(c).data()[12..16], [1.0; 4]);
        let bad = tape.leaf(Tensor::zeros(&[2, 1, 3, 2]), true);
        assert!(tape.concat1(a, bad).is_err());
        let w = tape.leaf(Tensor::zeros(&[5, 4]), true);
        let bias = tape.leaf(Tensor::zeros(&[4]), true);
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let err = tape.linear(x, w, bias).unwrap_err().to_string();
        assert!(err.contains("affine") && err.contains("[2, 3]"), "{err}");
    }
}
