//! Training loops for the three optimisation variants, EMA maintenance,
//! per-epoch exponential schedules, family dispatch and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dwmr_ndcore::checkpoint::{load_params, params_to_arrays, read_arrays, write_arrays, NamedArray};
use dwmr_ndcore::{AdamState, Bound, ParamSet, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::{Family, JointInput, TrainConfig, Variant};
use crate::datasets::{Split, SplitSet};
use crate::error::{CoreError, Result};
use crate::losses::{self, LossWeights, RegularizerSpec};
use crate::model::{binarize, Architecture, ModelBundle, Which};
use crate::seeding::{self, label};

/// Upper clamp for the scheduled EMA coefficient.
pub const TAU_MAX: f64 = 0.9999;

pub const METRICS_HEADER: &str = "epoch,step,loss_total,loss_pred,loss_var,loss_cor,loss_cos,loss_loc,loss_rec,loss_kl,mean_bit,mean_bit_std,mean_flips,lr_enc,lr_pred,tau";

/// Hyperparameter values in effect during one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scheduled {
    pub lr_enc: f64,
    pub lr_pred: f64,
    pub lr_dec: f64,
    pub tau: f64,
    pub weights: LossWeights,
}

impl Scheduled {
    /// `base · factor^e` for every scheduled quantity after `e` completed
    /// epochs; τ is clamped to at most 0.9999.
    pub fn at(cfg: &TrainConfig, e: usize) -> Self {
        let e = e as i32;
        let s = &cfg.schedule;
        let w = &cfg.weights;
        let sw = &s.weights;
        Self {
            lr_enc: cfg.lr_enc * s.lr_enc.powi(e),
            lr_pred: cfg.lr_pred * s.lr_pred.powi(e),
            lr_dec: cfg.lr_dec * s.lr_dec.powi(e),
            tau: (cfg.tau * s.tau.powi(e)).min(TAU_MAX),
            weights: LossWeights {
                var: w.var * sw.var.powi(e),
                cor: w.cor * sw.cor.powi(e),
                cos: w.cos * sw.cos.powi(e),
                loc: w.loc * sw.loc.powi(e),
                rec: w.rec * sw.rec.powi(e),
                kl: w.kl * sw.kl.powi(e),
            },
        }
    }
}

/// One Adam state per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<T> {
    pub enc: AdamState<T>,
    pub pred: AdamState<T>,
    pub dec: AdamState<T>,
}

impl<T: Real> Default for Optimizers<T> {
    fn default() -> Self {
        Self {
            enc: AdamState::default(),
            pred: AdamState::default(),
            dec: AdamState::default(),
        }
    }
}

/// Averages logged for one epoch (or one step).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub pred: f64,
    pub var: f64,
    pub cor: f64,
    pub cos: f64,
    pub loc: f64,
    pub rec: f64,
    pub kl: f64,
    pub mean_bit: f64,
    pub mean_bit_std: f64,
    pub mean_flips: f64,
}

impl StepStats {
    fn values(&self) -> [f64; 11] {
        [
            self.total,
            self.pred,
            self.var,
            self.cor,
            self.cos,
            self.loc,
            self.rec,
            self.kl,
            self.mean_bit,
            self.mean_bit_std,
            self.mean_flips,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            total: v[0],
            pred: v[1],
            var: v[2],
            cor: v[3],
            cos: v[4],
            loc: v[5],
            rec: v[6],
            kl: v[7],
            mean_bit: v[8],
            mean_bit_std: v[9],
            mean_flips: v[10],
        }
    }

    fn accumulate(&mut self, other: &StepStats) {
        let mut v = self.values();
        for (a, b) in v.iter_mut().zip(other.values()) {
            *a += b;
        }
        *self = Self::from_values(&v);
    }

    fn scaled(&self, f: f64) -> Self {
        Self::from_values(&self.values().map(|v| v * f))
    }
}

/// One metrics.csv row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Batches processed so far.
    pub step: u64,
    pub stats: StepStats,
    pub lr_enc: f64,
    pub lr_pred: f64,
    pub tau: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut fields = vec![self.epoch.to_string(), self.step.to_string()];
        fields.extend(self.stats.values().iter().map(|v| v.to_string()));
        fields.extend([self.lr_enc, self.lr_pred, self.tau].iter().map(|v| v.to_string()));
        fields.join(",")
    }

    fn to_values(self) -> Vec<f64> {
        let mut v = vec![self.epoch as f64, self.step as f64];
        v.extend(self.stats.values());
        v.extend([self.lr_enc, self.lr_pred, self.tau]);
        v
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            epoch: v[0] as usize,
            step: v[1] as u64,
            stats: StepStats::from_values(&v[2..13]),
            lr_enc: v[13],
            lr_pred: v[14],
            tau: v[15],
        }
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Model, optimiser state, progress and metric history.
#[derive(Clone, Debug)]
pub struct RunState<T> {
    pub model: ModelBundle<T>,
    pub opt: Optimizers<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Processed batches.
    pub step: u64,
    pub history: Vec<EpochMetrics>,
}

impl<T: Real> RunState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::new(cfg.arch.clone())?;
        let mut rng = seeding::stream(cfg.seed, label::INIT);
        Ok(Self {
            model: ModelBundle::new(arch, &mut rng),
            opt: Optimizers::default(),
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }
}

/// Observations and actions of one minibatch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub x_next: Tensor<T>,
    pub actions: Vec<u8>,
}

impl<T: Real> Batch<T> {
    pub fn from_split(split: &Split, indices: &[usize]) -> Result<Self> {
        let [c, h, w] = split.benchmark.frame_shape();
        let shape = vec![indices.len(), c, h, w];
        Ok(Self {
            x: Tensor::new(shape.clone(), split.gather(indices, false))?,
            x_next: Tensor::new(shape, split.gather(indices, true))?,
            actions: indices.iter().map(|&i| split.actions[i]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// How the predictor sees the current code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorInput {
    Soft,
    StraightThrough,
}

/// Online encoder pass shared by both sub-steps of a batch.
pub struct EncodedBatch<T> {
    pub tape: Tape<T>,
    pub enc_bound: Bound,
    /// Training-time code fed to predictor and decoder (noisy for β-VAE).
    pub p: Var,
    /// Noise-free probabilities, used for the KL term and the logged bits.
    pub p_clean: Var,
    /// Online encoding of x′ (DeepCubeAI only).
    pub p_next: Option<Var>,
    pub x: Var,
    pub x_next: Var,
    /// Detached prediction target: b′ from the EMA encoder, or r(p′) for
    /// DeepCubeAI.
    pub target_bits: Tensor<T>,
    pub actions: Vec<u8>,
}

/// Per-batch randomness, derived from (seed, epoch, batch) so that resumed
/// runs replay the same draws.
pub struct BatchRng {
    pub noise: ChaCha8Rng,
    pub triplets: ChaCha8Rng,
}

impl BatchRng {
    pub fn new(seed: u64, epoch: usize, batch: usize) -> Self {
        let idx = ((epoch as u64) << 24) | batch as u64;
        Self {
            noise: seeding::stream(seeding::derive_seed(seed, label::NOISE), idx),
            triplets: seeding::stream(seeding::derive_seed(seed, label::NOISE + 1), idx),
        }
    }
}

pub fn encode_for_training<T: Real>(
    model: &ModelBundle<T>,
    cfg: &TrainConfig,
    batch: &Batch<T>,
    rng: &mut BatchRng,
) -> Result<EncodedBatch<T>> {
    let mut tape = Tape::new();
    let enc_bound = model.enc.bind(&mut tape, true);
    let x = tape.constant(batch.x.clone());
    let x_next = tape.constant(batch.x_next.clone());
    let logits = model.encoder_logits(&mut tape, Which::Online, &enc_bound, x)?;
    let p_clean = tape.sigmoid(logits);
    let p = if cfg.family.is_variational() {
        let n = tape.value(logits).len();
        let noise = losses::logistic_noise(&mut rng.noise, n);
        losses::binary_concrete(&mut tape, logits, &noise, cfg.temperature)?
    } else {
        p_clean
    };
    let (p_next, target_bits) = if cfg.family == Family::Deepcubeai {
        let pn = model.encode(&mut tape, Which::Online, &enc_bound, x_next)?;
        let bits = binarize(tape.value(pn));
        (Some(pn), bits)
    } else {
        let pt = model.encode_batch(Which::Target, batch.x_next.clone())?;
        (None, binarize(&pt))
    };
    Ok(EncodedBatch {
        tape,
        enc_bound,
        p,
        p_clean,
        p_next,
        x,
        x_next,
        target_bits,
        actions: batch.actions.clone(),
    })
}

fn collect_grads<T: Real>(
    grads: &mut dwmr_ndcore::Gradients<T>,
    ps: &ParamSet<T>,
    bound: &Bound,
) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    for e in ps.entries().iter().filter(|e| e.trainable) {
        if let Some(g) = grads.take(bound.var(&e.name)?) {
            out.push((e.name.clone(), g));
        }
    }
    Ok(out)
}

/// Step (a) of the two-step variant: ψ alone is updated on hard bits
/// b = 1[p ≥ 0.5]; the encoder is untouched. Followed by an EMA update.
pub fn predictor_step<T: Real>(
    state: &mut RunState<T>,
    cfg: &TrainConfig,
    sched: &Scheduled,
    enc: &EncodedBatch<T>,
) -> Result<f64> {
    let model = &mut state.model;
    let bits = binarize(enc.tape.value(enc.p_clean));
    let mut tape = Tape::new();
    let pb = model.pred.bind(&mut tape, true);
    let b = tape.constant(bits);
    let (p_hat, bn) = model.predict(&mut tape, &pb, b, &enc.actions, true)?;
    let target = tape.constant(enc.target_bits.clone());
    let loss = match cfg.family {
        Family::Deepcubeai => losses::deepcubeai_predictor_loss(&mut tape, p_hat, target)?,
        _ => losses::pred_loss(&mut tape, p_hat, target)?,
    };
    let value = tape.value(loss).item().f64();
    let mut grads = tape.backward(loss)?;
    let g = collect_grads(&mut grads, &model.pred, &pb)?;
    state.opt.pred.step(&mut model.pred, &g, sched.lr_pred)?;
    model.apply_bn_stats(&bn)?;
    model.ema_update(sched.tau)?;
    Ok(value)
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().f64()
}

/// Joint update of φ, ψ (and η) on the full family objective, followed by
/// an EMA update.
pub fn joint_step<T: Real>(
    state: &mut RunState<T>,
    cfg: &TrainConfig,
    sched: &Scheduled,
    enc: EncodedBatch<T>,
    input: PredictorInput,
    rng: &mut BatchRng,
) -> Result<StepStats> {
    let EncodedBatch {
        mut tape,
        enc_bound,
        p,
        p_clean,
        p_next,
        x,
        x_next,
        target_bits,
        actions,
    } = enc;
    let model = &mut state.model;
    let k = model.k();
    let w = sched.weights;
    let pred_bound = model.pred.bind(&mut tape, true);
    let dec_bound = model.dec.as_ref().map(|d| d.bind(&mut tape, true));

    let latent = match input {
        PredictorInput::Soft => p,
        PredictorInput::StraightThrough => tape.straight_through_round(p),
    };
    let (p_hat, bn) = model.predict(&mut tape, &pred_bound, latent, &actions, true)?;

    let mut stats = StepStats::default();
    let total = if cfg.family == Family::Deepcubeai {
        let pn = p_next.expect("online next-step encoding");
        let recon = match &dec_bound {
            Some(db) => {
                let xh = model.decode(&mut tape, db, p)?;
                let xh2 = model.decode(&mut tape, db, pn)?;
                Some((xh, x, xh2, x_next))
            }
            None => None,
        };
        let t = losses::deepcubeai_loss(&mut tape, pn, p_hat, recon, w.rec)?;
        stats.pred = scalar(&tape, t.pred);
        stats.rec = t.rec.map_or(0.0, |r| scalar(&tape, r));
        t.total
    } else {
        let mut terms: Vec<(f64, Var)> = Vec::new();
        let tb = tape.constant(target_bits.clone());
        let pred = if cfg.family.has_regularizers() {
            let triplets = match cfg.cos_triplets {
                0 => None,
                n if n >= k * (k - 1) * (k - 2) => None,
                n => Some(losses::sample_triplets(&mut rng.triplets, k, n)?),
            };
            let spec = RegularizerSpec {
                gamma: cfg.gamma,
                window: cfg.window,
                triplets,
            };
            let t = losses::dwmr_terms(&mut tape, p, p_hat, &target_bits, &spec)?;
            stats.var = scalar(&tape, t.var);
            stats.cor = scalar(&tape, t.cor);
            stats.cos = scalar(&tape, t.cos);
            stats.loc = scalar(&tape, t.loc);
            terms.extend([(w.var, t.var), (w.cor, t.cor), (w.cos, t.cos), (w.loc, t.loc)]);
            t.pred
        } else {
            losses::pred_loss(&mut tape, p_hat, tb)?
        };
        stats.pred = scalar(&tape, pred);
        if let Some(db) = &dec_bound {
            let xh = model.decode(&mut tape, db, p)?;
            let rec = losses::rec_loss(&mut tape, xh, x)?;
            stats.rec = scalar(&tape, rec);
            terms.push((w.rec, rec));
        }
        if cfg.family.is_variational() {
            let kl = losses::kl_loss(&mut tape, p_clean)?;
            stats.kl = scalar(&tape, kl);
            terms.push((w.kl, kl));
        }
        losses::weighted_sum(&mut tape, pred, &terms)?
    };
    stats.total = scalar(&tape, total);
    let bits = binarize(tape.value(p_clean));
    bit_stats(&bits, &target_bits, k, &mut stats);

    let mut grads = tape.backward(total)?;
    let g_enc = collect_grads(&mut grads, &model.enc, &enc_bound)?;
    let g_pred = collect_grads(&mut grads, &model.pred, &pred_bound)?;
    state.opt.enc.step(&mut model.enc, &g_enc, sched.lr_enc)?;
    state.opt.pred.step(&mut model.pred, &g_pred, sched.lr_pred)?;
    if let (Some(db), Some(dec)) = (&dec_bound, model.dec.as_mut()) {
        let g_dec = collect_grads(&mut grads, dec, db)?;
        state.opt.dec.step(dec, &g_dec, sched.lr_dec)?;
    }
    model.apply_bn_stats(&bn)?;
    model.ema_update(sched.tau)?;
    Ok(stats)
}

/// Mean bit activation, mean per-bit batch std, and mean Hamming distance
/// between the current code and the prediction target.
fn bit_stats<T: Real>(bits: &Tensor<T>, target: &Tensor<T>, k: usize, stats: &mut StepStats) {
    let b = bits.data();
    let n = b.len() / k;
    let mut mean = vec![0.0; k];
    for row in b.chunks_exact(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    stats.mean_bit = mean.iter().sum::<f64>() / k as f64;
    stats.mean_bit_std = mean.iter().map(|&m| (m * (1.0 - m)).max(0.0).sqrt()).sum::<f64>() / k as f64;
    let flips = b.iter().zip(target.data()).filter(|(a, c)| a.f64() != c.f64()).count();
    stats.mean_flips = flips as f64 / n as f64;
}

/// One batch under the configured variant.
pub fn train_batch<T: Real>(
    state: &mut RunState<T>,
    cfg: &TrainConfig,
    sched: &Scheduled,
    batch: &Batch<T>,
    rng: &mut BatchRng,
) -> Result<StepStats> {
    let enc = encode_for_training(&state.model, cfg, batch, rng)?;
    let stats = match cfg.variant {
        Variant::TwoStep => {
            predictor_step(state, cfg, sched, &enc)?;
            let input = match cfg.joint_input {
                JointInput::Soft => PredictorInput::Soft,
                JointInput::StraightThrough => PredictorInput::StraightThrough,
            };
            joint_step(state, cfg, sched, enc, input, rng)?
        }
        Variant::FullyDifferentiable => joint_step(state, cfg, sched, enc, PredictorInput::Soft, rng)?,
        Variant::StraightThrough => joint_step(state, cfg, sched, enc, PredictorInput::StraightThrough, rng)?,
    };
    state.step += 1;
    Ok(stats)
}

/// Seeded permutation of the training records for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeding::stream(seeding::derive_seed(seed, label::SHUFFLE), epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// Runs one epoch (0-based index `state.epoch`) and records its metrics.
pub fn train_epoch<T: Real>(
    state: &mut RunState<T>,
    cfg: &TrainConfig,
    split: &Split,
    mut per_step: Option<&mut Vec<EpochMetrics>>,
) -> Result<EpochMetrics> {
    let e = state.epoch;
    let sched = Scheduled::at(cfg, e);
    let order = epoch_order(cfg.seed, e, split.len());
    let mut sum = StepStats::default();
    let mut batches = 0usize;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        // Batch statistics need at least two rows.
        if chunk.len() < 2 {
            continue;
        }
        let batch = Batch::<T>::from_split(split, chunk)?;
        let mut rng = BatchRng::new(cfg.seed, e, bi);
        let s = train_batch(state, cfg, &sched, &batch, &mut rng)?;
        if !s.total.is_finite() {
            return Err(CoreError::Diverged(format!("loss became {} at epoch {}, batch {bi}", s.total, e + 1)));
        }
        if let Some(rows) = per_step.as_deref_mut() {
            rows.push(EpochMetrics {
                epoch: e + 1,
                step: state.step,
                stats: s,
                lr_enc: sched.lr_enc,
                lr_pred: sched.lr_pred,
                tau: sched.tau,
            });
        }
        sum.accumulate(&s);
        batches += 1;
    }
    if batches == 0 {
        return Err(CoreError::Invalid("training split has fewer than two records".into()));
    }
    state.epoch += 1;
    let m = EpochMetrics {
        epoch: state.epoch,
        step: state.step,
        stats: sum.scaled(1.0 / batches as f64),
        lr_enc: sched.lr_enc,
        lr_pred: sched.lr_pred,
        tau: sched.tau,
    };
    state.history.push(m);
    Ok(m)
}

// ---------------------------------------------------------------------------
// Checkpoints

fn adam_arrays<T: Real>(prefix: &str, a: &AdamState<T>) -> Vec<NamedArray> {
    let mut out = vec![NamedArray::from_values(format!("{prefix}step"), &[a.step_count() as f64])];
    for (name, (m, v)) in a.moments() {
        out.push(NamedArray::from_values(format!("{prefix}m.{name}"), m));
        out.push(NamedArray::from_values(format!("{prefix}v.{name}"), v));
    }
    out
}

fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| CoreError::Format(format!("checkpoint lacks array `{name}`")))
}

fn load_adam<T: Real>(prefix: &str, a: &mut AdamState<T>, ps: Option<&ParamSet<T>>, arrays: &[NamedArray]) -> Result<()> {
    let step = find(arrays, &format!("{prefix}step"))?.data.to_f64()[0] as u64;
    let mut moments = BTreeMap::new();
    let mprefix = format!("{prefix}m.");
    for arr in arrays.iter().filter(|a| a.name.starts_with(&mprefix)) {
        let name = &arr.name[mprefix.len()..];
        let v = find(arrays, &format!("{prefix}v.{name}"))?;
        let m = arr.to_tensor::<T>()?.into_data();
        let vv = v.to_tensor::<T>()?.into_data();
        let expected = ps.and_then(|p| p.get(name).ok()).map(|t| t.len());
        if expected != Some(m.len()) || m.len() != vv.len() {
            return Err(CoreError::Mismatch(format!("optimizer state for `{name}` does not match the model")));
        }
        moments.insert(name.to_string(), (m, vv));
    }
    a.restore(step, moments);
    Ok(())
}

const META: [&str; 10] = [
    "lr_enc", "lr_pred", "lr_dec", "tau", "lambda_var", "lambda_cor", "lambda_cos", "lambda_loc", "lambda_rec", "lambda_kl",
];

fn scheduled_values(s: &Scheduled) -> [f64; 10] {
    let w = &s.weights;
    [s.lr_enc, s.lr_pred, s.lr_dec, s.tau, w.var, w.cor, w.cos, w.loc, w.rec, w.kl]
}

/// All state as named arrays: parameters under "enc.", "enc_ema.",
/// "pred.", "dec.", optimiser state under "opt.*", progress and the
/// scheduled values for the next epoch under "meta.", metric history
/// under "hist.".
pub fn checkpoint_arrays<T: Real>(state: &RunState<T>, cfg: &TrainConfig) -> Vec<NamedArray> {
    let m = &state.model;
    let mut out = params_to_arrays("enc.", &m.enc);
    out.extend(params_to_arrays("enc_ema.", &m.enc_ema));
    out.extend(params_to_arrays("pred.", &m.pred));
    if let Some(d) = &m.dec {
        out.extend(params_to_arrays("dec.", d));
    }
    out.extend(adam_arrays("opt.enc.", &state.opt.enc));
    out.extend(adam_arrays("opt.pred.", &state.opt.pred));
    out.extend(adam_arrays("opt.dec.", &state.opt.dec));
    out.push(NamedArray::from_values("meta.epoch", &[state.epoch as f64]));
    out.push(NamedArray::from_values("meta.step", &[state.step as f64]));
    let sched = Scheduled::at(cfg, state.epoch);
    for (name, v) in META.iter().zip(scheduled_values(&sched)) {
        out.push(NamedArray::from_values(format!("meta.{name}"), &[v]));
    }
    let hist: Vec<f64> = state.history.iter().flat_map(|h| h.to_values()).collect();
    let rows = state.history.len() as u32;
    out.push(NamedArray {
        name: "hist.metrics".into(),
        dims: vec![rows, 16],
        data: dwmr_ndcore::checkpoint::ArrayData::F64(hist),
    });
    out
}

pub fn save_checkpoint<T: Real>(path: &Path, state: &RunState<T>, cfg: &TrainConfig) -> Result<()> {
    let file = fs::File::create(path)?;
    write_arrays(BufWriter::new(file), &checkpoint_arrays(state, cfg))?;
    Ok(())
}

/// Restores a state saved under `cfg`; layout differences (e.g. a puzzle
/// checkpoint loaded with an IceSlider config) are errors.
pub fn load_checkpoint<T: Real>(path: &Path, cfg: &TrainConfig) -> Result<RunState<T>> {
    let arrays = read_arrays(BufReader::new(fs::File::open(path)?))?;
    state_from_arrays(&arrays, cfg)
}

pub fn state_from_arrays<T: Real>(arrays: &[NamedArray], cfg: &TrainConfig) -> Result<RunState<T>> {
    let mut state = RunState::<T>::new(cfg)?;
    let mismatch = |e: dwmr_ndcore::NdError| CoreError::Mismatch(e.to_string());
    let m = &mut state.model;
    load_params("enc.", &mut m.enc, arrays).map_err(mismatch)?;
    load_params("enc_ema.", &mut m.enc_ema, arrays).map_err(mismatch)?;
    load_params("pred.", &mut m.pred, arrays).map_err(mismatch)?;
    if let Some(d) = m.dec.as_mut() {
        load_params("dec.", d, arrays).map_err(mismatch)?;
    } else if arrays.iter().any(|a| a.name.starts_with("dec.")) {
        return Err(CoreError::Mismatch("checkpoint has a decoder but the model family does not".into()));
    }
    load_adam("opt.enc.", &mut state.opt.enc, Some(&m.enc), arrays)?;
    load_adam("opt.pred.", &mut state.opt.pred, Some(&m.pred), arrays)?;
    load_adam("opt.dec.", &mut state.opt.dec, m.dec.as_ref(), arrays)?;
    state.epoch = find(arrays, "meta.epoch")?.data.to_f64()[0] as usize;
    state.step = find(arrays, "meta.step")?.data.to_f64()[0] as u64;
    let hist = find(arrays, "hist.metrics")?;
    let values = hist.data.to_f64();
    if hist.dims.len() != 2 || hist.dims[1] != 16 {
        return Err(CoreError::Format("malformed metric history".into()));
    }
    state.history = values.chunks_exact(16).map(EpochMetrics::from_values).collect();
    Ok(state)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_epoch{epoch:03}.bin"))
}

/// Most recent `ckpt_epochNNN.bin` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name.strip_prefix("ckpt_epoch")?.strip_suffix(".bin")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
}

/// Output options for [`run_training`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `out_dir`.
    pub resume: bool,
}

/// Trains for `cfg.epochs` epochs on the training split, writing a
/// checkpoint and the metrics file after every epoch when an output
/// directory is given.
pub fn run_training<T: Real>(cfg: &TrainConfig, data: &SplitSet, opts: &RunOptions) -> Result<RunState<T>> {
    cfg.validate()?;
    if data.benchmark != cfg.benchmark {
        return Err(CoreError::Mismatch(format!(
            "dataset is {} but the config trains on {}",
            data.benchmark.name(),
            cfg.benchmark.name()
        )));
    }
    let mut state = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => match latest_checkpoint(dir) {
            Some((_, path)) => {
                log::info!("resuming from {}", path.display());
                load_checkpoint(&path, cfg)?
            }
            None => RunState::new(cfg)?,
        },
        _ => RunState::new(cfg)?,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut step_rows = Vec::new();
    while state.epoch < cfg.epochs {
        let t0 = Instant::now();
        let rows = cfg.per_step_metrics.then_some(&mut step_rows);
        let m = train_epoch(&mut state, cfg, data.train(), rows)?;
        log::info!(
            "epoch {}/{}: loss {:.5} pred {:.5} bit {:.3} std {:.3} flips {:.2} ({:.1}s)",
            m.epoch,
            cfg.epochs,
            m.stats.total,
            m.stats.pred,
            m.stats.mean_bit,
            m.stats.mean_bit_std,
            m.stats.mean_flips,
            t0.elapsed().as_secs_f64()
        );
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every_epoch || state.epoch == cfg.epochs {
                save_checkpoint(&checkpoint_path(dir, state.epoch), &state, cfg)?;
            }
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&state.history).as_bytes())?;
            if cfg.per_step_metrics {
                write_atomic(&dir.join("metrics_steps.csv"), metrics_csv(&step_rows).as_bytes())?;
            }
        }
    }
    Ok(state)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}
