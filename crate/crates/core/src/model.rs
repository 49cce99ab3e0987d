//! Encoder, EMA target encoder, predictor and optional decoder for both
//! benchmarks.
//!
//! Puzzle: five 3×3 conv + GroupNorm + ReLU stages (2×2 average pooling after
//! the first three), a hidden-96 MLP head and K sigmoid outputs; an MLP
//! predictor over `[p, one-hot(a)]`. IceSlider: a k4/s4 conv followed by a
//! k2/s2 conv to a 3×8×8 bit grid; a residual conv predictor over the grid
//! with the action broadcast as four extra channels.

use dwmr_ndcore::{
    layers::apply_bn_stats, threshold_bit, BnStats, Bound, Layer, LayerCtx, LayerSpec, ParamSet, Real, Sequential, Tape,
    Tensor, Var,
};
use rand::Rng;

use crate::envs::{Benchmark, Action, ICE_SIDE};
use crate::error::{CoreError, Result};

/// Architecture knobs; defaults follow the paper where it is specific.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub benchmark: Benchmark,
    /// K for the puzzle encoder.
    pub latent_bits: usize,
    pub enc_widths: Vec<usize>,
    pub enc_hidden: usize,
    pub gn_groups: usize,
    pub pred_hidden: usize,
    pub ice_enc_channels: usize,
    pub ice_latent_channels: usize,
    pub ice_pred_channels: usize,
    pub ice_res_blocks: usize,
    pub decoder: bool,
}

impl ArchConfig {
    pub fn new(benchmark: Benchmark) -> Self {
        Self {
            benchmark,
            latent_bits: 64,
            enc_widths: vec![16, 32, 32, 64, 64],
            enc_hidden: 96,
            gn_groups: 4,
            pred_hidden: 128,
            ice_enc_channels: 32,
            ice_latent_channels: 3,
            ice_pred_channels: 32,
            ice_res_blocks: 4,
            decoder: false,
        }
    }

    /// Latent width K.
    pub fn k(&self) -> usize {
        match self.benchmark {
            Benchmark::Puzzle => self.latent_bits,
            Benchmark::IceSlider => self.ice_latent_channels * ICE_SIDE * ICE_SIDE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.k() == 0 {
            return err("latent width must be positive".into());
        }
        if self.benchmark == Benchmark::Puzzle {
            if self.enc_widths.len() < 3 {
                return err(format!("puzzle encoder needs at least 3 conv stages, got {}", self.enc_widths.len()));
            }
            if let Some(w) = self.enc_widths.iter().find(|&&w| w == 0 || w % self.gn_groups.max(1) != 0) {
                return err(format!("encoder width {w} not divisible by {} groups", self.gn_groups));
            }
            if self.gn_groups == 0 || self.enc_hidden == 0 {
                return err("group count and hidden width must be positive".into());
            }
        }
        if self.pred_hidden == 0 || self.ice_pred_channels == 0 || self.ice_enc_channels == 0 {
            return err("layer widths must be positive".into());
        }
        Ok(())
    }
}

fn conv(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::new(
        name,
        LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
        },
    )
}

fn deconv(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::new(
        name,
        LayerSpec::ConvTranspose2d {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
        },
    )
}

fn affine(name: &str, inputs: usize, outputs: usize) -> Layer {
    Layer::new(name, LayerSpec::Affine { inputs, outputs })
}

fn relu(name: String) -> Layer {
    Layer::new(name, LayerSpec::Relu)
}

/// Layer graphs of the four networks. Encoders stop at the logits; the
/// sigmoid is applied separately so the β-VAE can inject noise before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: ArchConfig,
    pub encoder: Sequential,
    pub predictor: Sequential,
    pub decoder: Option<Sequential>,
}

/// Spatial side after the three pooling stages of the puzzle encoder.
const PUZZLE_FEATURE_SIDE: usize = 11;

impl Architecture {
    pub fn new(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let k = config.k();
        let (encoder, predictor, decoder) = match config.benchmark {
            Benchmark::Puzzle => {
                let mut enc = Vec::new();
                let mut cin = 1;
                for (i, &w) in config.enc_widths.iter().enumerate() {
                    enc.push(conv(format!("conv{i}"), cin, w, 3, 1, 1));
                    enc.push(Layer::new(
                        format!("gn{i}"),
                        LayerSpec::GroupNorm {
                            channels: w,
                            groups: config.gn_groups,
                        },
                    ));
                    enc.push(relu(format!("relu{i}")));
                    if i < 3 {
                        enc.push(Layer::new(format!("pool{i}"), LayerSpec::AvgPool2d));
                    }
                    cin = w;
                }
                let flat = cin * PUZZLE_FEATURE_SIDE * PUZZLE_FEATURE_SIDE;
                enc.push(Layer::new("flatten", LayerSpec::Flatten));
                enc.push(affine("fc0", flat, config.enc_hidden));
                enc.push(relu("fc0_relu".into()));
                enc.push(affine("fc1", config.enc_hidden, k));

                let h = config.pred_hidden;
                let pred = vec![
                    affine("fc0", k + Action::COUNT, h),
                    relu("relu0".into()),
                    affine("fc1", h, h),
                    relu("relu1".into()),
                    affine("fc2", h, k),
                ];

                let dec = config.decoder.then(|| {
                    let c = cin;
                    let c2 = config.enc_widths[2];
                    let c1 = config.enc_widths[1];
                    let c0 = config.enc_widths[0];
                    Sequential::new(vec![
                        affine("fc0", k, config.enc_hidden),
                        relu("fc0_relu".into()),
                        affine("fc1", config.enc_hidden, flat),
                        relu("fc1_relu".into()),
                        Layer::new("unflatten", LayerSpec::Reshape(vec![c, PUZZLE_FEATURE_SIDE, PUZZLE_FEATURE_SIDE])),
                        deconv("deconv0".into(), c, c2, 3, 1, 1),
                        Layer::new(
                            "gn0",
                            LayerSpec::GroupNorm {
                                channels: c2,
                                groups: config.gn_groups,
                            },
                        ),
                        relu("relu0".into()),
                        deconv("up0".into(), c2, c2, 2, 2, 0),
                        relu("relu1".into()),
                        deconv("up1".into(), c2, c1, 2, 2, 0),
                        relu("relu2".into()),
                        deconv("up2".into(), c1, c0, 2, 2, 0),
                        relu("relu3".into()),
                        deconv("out".into(), c0, 1, 3, 1, 1),
                        Layer::new("sigmoid", LayerSpec::Sigmoid),
                    ])
                });
                (enc, pred, dec)
            }
            Benchmark::IceSlider => {
                let lc = config.ice_latent_channels;
                let enc = vec![
                    conv("conv0".into(), 3, config.ice_enc_channels, 4, 4, 0),
                    relu("relu0".into()),
                    conv("conv1".into(), config.ice_enc_channels, lc, 2, 2, 0),
                    Layer::new("flatten", LayerSpec::Flatten),
                ];
                let c = config.ice_pred_channels;
                let mut pred = vec![
                    conv("conv_in".into(), lc + Action::COUNT, c, 3, 1, 1),
                    Layer::new("bn_in", LayerSpec::BatchNorm2d { channels: c }),
                    relu("relu_in".into()),
                ];
                for i in 0..config.ice_res_blocks {
                    pred.push(Layer::new(format!("res{i}"), LayerSpec::ResidualBlock { channels: c }));
                }
                pred.push(conv("conv_out".into(), c, lc, 3, 1, 1));
                pred.push(Layer::new("flatten", LayerSpec::Flatten));
                let dec = config.decoder.then(|| {
                    Sequential::new(vec![
                        Layer::new("unflatten", LayerSpec::Reshape(vec![lc, ICE_SIDE, ICE_SIDE])),
                        deconv("up0".into(), lc, config.ice_enc_channels, 2, 2, 0),
                        relu("relu0".into()),
                        deconv("up1".into(), config.ice_enc_channels, 3, 4, 4, 0),
                        Layer::new("sigmoid", LayerSpec::Sigmoid),
                    ])
                });
                (enc, pred, dec)
            }
        };
        Ok(Self {
            config,
            encoder: Sequential::new(encoder),
            predictor: Sequential::new(predictor),
            decoder,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }
}

/// Bit threshold: 1 exactly where p ≥ 0.5.
pub fn binarize<T: Real>(p: &Tensor<T>) -> Tensor<T> {
    p.map(threshold_bit)
}

/// Straight-through rounding on the tape.
pub fn st_round<T: Real>(tape: &mut Tape<T>, p: Var) -> Var {
    tape.straight_through_round(p)
}

/// φ′ ← τφ′ + (1 − τ)φ over every entry.
pub fn ema_update<T: Real>(target: &mut ParamSet<T>, online: &ParamSet<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoreError::Invalid(format!("EMA coefficient {tau} outside [0, 1]")));
    }
    if !target.same_layout(online) {
        return Err(CoreError::Invalid("EMA target and online encoder layouts differ".into()));
    }
    let names: Vec<String> = online.entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let src = online.get(&name)?.data().to_vec();
        let dst = target.get_mut(&name)?;
        for (d, s) in dst.data_mut().iter_mut().zip(src) {
            *d = T::lit(tau * d.f64() + (1.0 - tau) * s.f64());
        }
    }
    Ok(())
}

/// φ, φ′, ψ and optional η.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub arch: Architecture,
    pub enc: ParamSet<T>,
    pub enc_ema: ParamSet<T>,
    pub pred: ParamSet<T>,
    pub dec: Option<ParamSet<T>>,
}

/// Which encoder parameters to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

impl<T: Real> ModelBundle<T> {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut enc = ParamSet::new();
        arch.encoder.init(&mut enc, rng);
        let mut pred = ParamSet::new();
        arch.predictor.init(&mut pred, rng);
        let dec = arch.decoder.as_ref().map(|d| {
            let mut ps = ParamSet::new();
            d.init(&mut ps, rng);
            ps
        });
        Self {
            enc_ema: enc.clone(),
            arch,
            enc,
            pred,
            dec,
        }
    }

    pub fn k(&self) -> usize {
        self.arch.k()
    }

    pub fn encoder_params(&self, which: Which) -> &ParamSet<T> {
        match which {
            Which::Online => &self.enc,
            Which::Target => &self.enc_ema,
        }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let [c, h, w] = self.arch.config.benchmark.frame_shape();
        match tape.shape(x) {
            [_, cc, hh, ww] if (*cc, *hh, *ww) == (c, h, w) => Ok(()),
            s => Err(CoreError::Invalid(format!(
                "encoder input must be [N, {c}, {h}, {w}], got {s:?}"
            ))),
        }
    }

    /// Pre-sigmoid encoder outputs `[N, K]`.
    pub fn encoder_logits(&self, tape: &mut Tape<T>, which: Which, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let ps = self.encoder_params(which);
        let mut ctx = LayerCtx::new(tape, ps, bound, true);
        Ok(self.arch.encoder.forward(&mut ctx, x)?)
    }

    /// Bit probabilities p = sigmoid(logits).
    pub fn encode(&self, tape: &mut Tape<T>, which: Which, bound: &Bound, x: Var) -> Result<Var> {
        let logits = self.encoder_logits(tape, which, bound, x)?;
        Ok(tape.sigmoid(logits))
    }

    /// Next-step probabilities from a latent (soft or hard) and actions.
    /// In training mode, batch-norm statistics are returned for the running
    /// averages.
    pub fn predict(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        latent: Var,
        actions: &[u8],
        train: bool,
    ) -> Result<(Var, Vec<BnStats>)> {
        let k = self.k();
        let n = match tape.shape(latent) {
            [n, kk] if *kk == k => *n,
            s => return Err(CoreError::Invalid(format!("predictor input must be [N, {k}], got {s:?}"))),
        };
        if actions.len() != n || actions.iter().any(|&a| a as usize >= Action::COUNT) {
            return Err(CoreError::Invalid(format!(
                "expected {n} actions in 0..4, got {} values",
                actions.len()
            )));
        }
        let input = match self.arch.config.benchmark {
            Benchmark::Puzzle => {
                let mut oh = vec![T::zero(); n * Action::COUNT];
                for (i, &a) in actions.iter().enumerate() {
                    oh[i * Action::COUNT + a as usize] = T::one();
                }
                let ohv = tape.constant(Tensor::new(vec![n, Action::COUNT], oh)?);
                tape.concat1(latent, ohv)?
            }
            Benchmark::IceSlider => {
                let lc = self.arch.config.ice_latent_channels;
                let grid = tape.reshape(latent, &[n, lc, ICE_SIDE, ICE_SIDE])?;
                let plane = ICE_SIDE * ICE_SIDE;
                let mut oh = vec![T::zero(); n * Action::COUNT * plane];
                for (i, &a) in actions.iter().enumerate() {
                    let off = (i * Action::COUNT + a as usize) * plane;
                    oh[off..off + plane].fill(T::one());
                }
                let ohv = tape.constant(Tensor::new(vec![n, Action::COUNT, ICE_SIDE, ICE_SIDE], oh)?);
                tape.concat1(grid, ohv)?
            }
        };
        let mut ctx = LayerCtx::new(tape, &self.pred, bound, train);
        let logits = self.arch.predictor.forward(&mut ctx, input)?;
        let stats = std::mem::take(&mut ctx.bn_stats);
        Ok((tape.sigmoid(logits), stats))
    }

    /// Pixel reconstruction `[N, C, H, W]` in [0, 1].
    pub fn decode(&self, tape: &mut Tape<T>, bound: &Bound, p: Var) -> Result<Var> {
        let (seq, ps) = match (&self.arch.decoder, &self.dec) {
            (Some(s), Some(p)) => (s, p),
            _ => return Err(CoreError::Invalid("model has no decoder".into())),
        };
        let k = self.k();
        if !matches!(tape.shape(p), [_, kk] if *kk == k) {
            return Err(CoreError::Invalid(format!(
                "decoder input must be [N, {k}], got {:?}",
                tape.shape(p)
            )));
        }
        let mut ctx = LayerCtx::new(tape, ps, bound, true);
        Ok(seq.forward(&mut ctx, p)?)
    }

    /// Folds predictor batch-norm statistics into the running averages.
    pub fn apply_bn_stats(&mut self, stats: &[BnStats]) -> Result<()> {
        Ok(apply_bn_stats(&mut self.pred, stats, dwmr_ndcore::layers::BN_MOMENTUM)?)
    }

    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        ema_update(&mut self.enc_ema, &self.enc, tau)
    }

    /// Gradient-free encoding of a batch of observations `[N, C, H, W]`.
    pub fn encode_batch(&self, which: Which, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.encoder_params(which).bind(&mut tape, false);
        let xv = tape.constant(x);
        let p = self.encode(&mut tape, which, &bound, xv)?;
        Ok(tape.value(p).clone())
    }

    /// Gradient-free prediction with running batch-norm statistics.
    pub fn predict_batch(&self, latent: Tensor<T>, actions: &[u8]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.pred.bind(&mut tape, false);
        let lv = tape.constant(latent);
        let (p, _) = self.predict(&mut tape, &bound, lv, actions, false)?;
        Ok(tape.value(p).clone())
    }
}
