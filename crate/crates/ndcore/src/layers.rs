//! Declarative layer specs and their forward passes on a tape.

use rand::Rng;

use crate::error::{NdError, Result};
use crate::params::{Bound, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool2d,
    GroupNorm {
        channels: usize,
        groups: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    /// conv3×3 → BN → ReLU → conv3×3 → BN → (+ skip) → ReLU
    ResidualBlock {
        channels: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    /// Reshape of the non-batch dimensions.
    Reshape(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

/// Per-channel batch statistics observed by a batch-norm layer in training
/// mode, applied to the running averages after the step.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Everything a forward pass needs besides the input.
pub struct LayerCtx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamSet<T>,
    pub bound: &'a Bound,
    pub train: bool,
    pub bn_stats: Vec<BnStats>,
}

impl<'a, T: Real> LayerCtx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamSet<T>, bound: &'a Bound, train: bool) -> Self {
        Self {
            tape,
            params,
            bound,
            train,
            bn_stats: Vec::new(),
        }
    }
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn init_conv<T: Real, R: Rng + ?Sized>(
    ps: &mut ParamSet<T>,
    rng: &mut R,
    prefix: &str,
    w_shape: [usize; 4],
    fan_in: usize,
    bias: usize,
) {
    ps.insert(format!("{prefix}.w"), uniform(rng, &w_shape, fan_in), true);
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[bias]), true);
}

fn init_norm<T: Real>(ps: &mut ParamSet<T>, prefix: &str, channels: usize, running: bool) {
    ps.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one()), true);
    ps.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true);
    if running {
        ps.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false);
        ps.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], T::one()), false);
    }
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    /// Creates this layer's parameters: fan-in scaled centered uniform
    /// weights, zero biases, unit norm gains.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        let p = &self.name;
        match self.spec {
            LayerSpec::Affine { inputs, outputs } => {
                ps.insert(format!("{p}.w"), uniform(rng, &[inputs, outputs], inputs), true);
                ps.insert(format!("{p}.b"), Tensor::zeros(&[outputs]), true);
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => init_conv(
                ps,
                rng,
                p,
                [out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels,
            ),
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                // effective fan-in of one output pixel
                let fan_in = in_channels * (kernel * kernel).div_ceil(stride * stride).max(1);
                init_conv(ps, rng, p, [in_channels, out_channels, kernel, kernel], fan_in, out_channels)
            }
            LayerSpec::GroupNorm { channels, .. } => init_norm(ps, p, channels, false),
            LayerSpec::BatchNorm2d { channels } => init_norm(ps, p, channels, true),
            LayerSpec::ResidualBlock { channels } => {
                let fan = channels * 9;
                init_conv(ps, rng, &format!("{p}.conv1"), [channels, channels, 3, 3], fan, channels);
                init_norm(ps, &format!("{p}.bn1"), channels, true);
                init_conv(ps, rng, &format!("{p}.conv2"), [channels, channels, 3, 3], fan, channels);
                init_norm(ps, &format!("{p}.bn2"), channels, true);
            }
            LayerSpec::AvgPool2d
            | LayerSpec::Relu
            | LayerSpec::Sigmoid
            | LayerSpec::Flatten
            | LayerSpec::Reshape(_) => {}
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut LayerCtx<'_, T>, x: Var) -> Result<Var> {
        let p = &self.name;
        let annotate = |e: NdError| match e {
            NdError::Shape { layer, got, expected } => NdError::Shape {
                layer: format!("{p} ({layer})"),
                got,
                expected,
            },
            NdError::Incompatible { op, lhs, rhs } => NdError::Shape {
                layer: format!("{p} ({op})"),
                got: lhs,
                expected: format!("{rhs:?}"),
            },
            other => other,
        };
        let out = match &self.spec {
            LayerSpec::Affine { .. } => {
                let (w, b) = (ctx.bound.var(&format!("{p}.w"))?, ctx.bound.var(&format!("{p}.b"))?);
                ctx.tape.linear(x, w, b)
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let (w, b) = (ctx.bound.var(&format!("{p}.w"))?, ctx.bound.var(&format!("{p}.b"))?);
                ctx.tape.conv2d(x, w, b, *stride, *padding)
            }
            LayerSpec::ConvTranspose2d { stride, padding, .. } => {
                let (w, b) = (ctx.bound.var(&format!("{p}.w"))?, ctx.bound.var(&format!("{p}.b"))?);
                ctx.tape.conv_transpose2d(x, w, b, *stride, *padding)
            }
            LayerSpec::AvgPool2d => ctx.tape.avg_pool2d(x),
            LayerSpec::GroupNorm { groups, .. } => {
                let g = ctx.bound.var(&format!("{p}.gamma"))?;
                let b = ctx.bound.var(&format!("{p}.beta"))?;
                ctx.tape.group_norm(x, g, b, *groups, NORM_EPS)
            }
            LayerSpec::BatchNorm2d { .. } => batch_norm(ctx, p, x),
            LayerSpec::ResidualBlock { .. } => residual(ctx, p, x),
            LayerSpec::Relu => Ok(ctx.tape.relu(x)),
            LayerSpec::Sigmoid => Ok(ctx.tape.sigmoid(x)),
            LayerSpec::Flatten => ctx.tape.flatten(x),
            LayerSpec::Reshape(dims) => {
                let n = ctx.tape.shape(x).first().copied().unwrap_or(0);
                let mut shape = vec![n];
                shape.extend_from_slice(dims);
                ctx.tape.reshape(x, &shape)
            }
        };
        out.map_err(annotate)
    }
}

fn batch_norm<T: Real>(ctx: &mut LayerCtx<'_, T>, p: &str, x: Var) -> Result<Var> {
    let g = ctx.bound.var(&format!("{p}.gamma"))?;
    let b = ctx.bound.var(&format!("{p}.beta"))?;
    if ctx.train {
        let (y, mean, var) = ctx.tape.batch_norm2d_train(x, g, b, NORM_EPS)?;
        let shape = ctx.tape.shape(x);
        let count = shape[0] * shape[2] * shape[3];
        ctx.bn_stats.push(BnStats {
            name: p.to_string(),
            mean,
            var,
            count,
        });
        Ok(y)
    } else {
        let mean = ctx.params.get(&format!("{p}.running_mean"))?.data().to_vec();
        let var = ctx.params.get(&format!("{p}.running_var"))?.data().to_vec();
        ctx.tape.batch_norm2d_eval(x, g, b, &mean, &var, NORM_EPS)
    }
}

fn residual<T: Real>(ctx: &mut LayerCtx<'_, T>, p: &str, x: Var) -> Result<Var> {
    let conv = |ctx: &mut LayerCtx<'_, T>, name: &str, input: Var| -> Result<Var> {
        let w = ctx.bound.var(&format!("{p}.{name}.w"))?;
        let b = ctx.bound.var(&format!("{p}.{name}.b"))?;
        ctx.tape.conv2d(input, w, b, 1, 1)
    };
    let h = conv(ctx, "conv1", x)?;
    let h = batch_norm(ctx, &format!("{p}.bn1"), h)?;
    let h = ctx.tape.relu(h);
    let h = conv(ctx, "conv2", h)?;
    let h = batch_norm(ctx, &format!("{p}.bn2"), h)?;
    let h = ctx.tape.add(h, x)?;
    Ok(ctx.tape.relu(h))
}

/// Single-layer entry point.
pub fn apply_layer<T: Real>(ctx: &mut LayerCtx<'_, T>, input: Var, layer: &Layer) -> Result<Var> {
    layer.forward(ctx, input)
}

/// Chain of layers applied in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        for layer in &self.layers {
            layer.init(ps, rng);
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut LayerCtx<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Folds observed batch statistics into the running averages
/// (`running ← (1 − m)·running + m·batch`, unbiased batch variance).
pub fn apply_bn_stats<T: Real>(ps: &mut ParamSet<T>, stats: &[BnStats], momentum: f64) -> Result<()> {
    for s in stats {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        let rm = ps.get_mut(&format!("{}.running_mean", s.name))?;
        for (r, &m) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = T::lit((1.0 - momentum) * r.f64() + momentum * m);
        }
        let rv = ps.get_mut(&format!("{}.running_var", s.name))?;
        for (r, &v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = T::lit((1.0 - momentum) * r.f64() + momentum * v * unbias);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_block_shape_and_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Layer::new("res0", LayerSpec::ResidualBlock { channels: 4 });
        let mut ps = ParamSet::<f64>::new();
        layer.init(&mut ps, &mut rng);
        assert!(ps.contains("res0.bn2.running_var"));
        assert!(!ps.entries().iter().any(|e| e.name.ends_with("running_mean") && e.trainable));

        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, true);
        let x = tape.constant(Tensor::full(&[2, 4, 8, 8], 0.5));
        let mut ctx = LayerCtx::new(&mut tape, &ps, &bound, true);
        let y = apply_layer(&mut ctx, x, &layer).unwrap();
        assert_eq!(ctx.bn_stats.len(), 2);
        let stats = std::mem::take(&mut ctx.bn_stats);
        assert_eq!(tape.shape(y), &[2, 4, 8, 8]);
        apply_bn_stats(&mut ps, &stats, BN_MOMENTUM).unwrap();
        assert!(ps.get("res0.bn1.running_mean").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shape_errors_carry_layer_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Layer::new(
            "enc.fc0",
            LayerSpec::Affine {
                inputs: 10,
                outputs: 3,
            },
        );
        let mut ps = ParamSet::<f32>::new();
        layer.init(&mut ps, &mut rng);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[4, 7]));
        let mut ctx = LayerCtx::new(&mut tape, &ps, &bound, false);
        let msg = layer.forward(&mut ctx, x).unwrap_err().to_string();
        assert!(msg.contains("enc.fc0") && msg.contains("[4, 7]"), "{msg}");
    }
}
