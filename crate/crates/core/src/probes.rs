//! Linear probes over frozen Boolean codes and the encoding / imagination
//! evaluation protocol.

use dwmr_ndcore::{AdamState, Layer, LayerCtx, LayerSpec, ParamSet, Real, Sequential, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{Family, ProbeConfig, Variant};
use crate::datasets::Split;
use crate::envs::{Benchmark, ICE_SIDE};
use crate::error::{CoreError, Result};
use crate::model::{binarize, ModelBundle, Which};
use crate::seeding::{self, label};

/// Frames encoded per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

/// A single linear stage from bits to per-cell class logits.
///
/// Puzzle: one affine map K → 9 × 9. IceSlider: a 1×1 convolution over the
/// 3×8×8 grid, i.e. one 3 → 4 affine map shared by all 64 cells.
#[derive(Clone, Debug)]
pub struct Probe {
    pub benchmark: Benchmark,
    pub k: usize,
    pub net: Sequential,
    pub params: ParamSet<f64>,
}

impl Probe {
    pub fn new(benchmark: Benchmark, k: usize, seed: u64) -> Result<Self> {
        let (inputs, outputs) = match benchmark {
            Benchmark::Puzzle => (k, benchmark.cells() * benchmark.classes()),
            Benchmark::IceSlider => {
                if k % (ICE_SIDE * ICE_SIDE) != 0 {
                    return Err(CoreError::Invalid(format!("IceSlider code width {k} is not a multiple of 64")));
                }
                (k / (ICE_SIDE * ICE_SIDE), benchmark.classes())
            }
        };
        let net = Sequential::new(vec![Layer::new("probe", LayerSpec::Affine { inputs, outputs })]);
        let mut params = ParamSet::new();
        net.init(&mut params, &mut seeding::stream(seed, label::PROBE));
        Ok(Self {
            benchmark,
            k,
            net,
            params,
        })
    }

    /// Rearranges codes `[N, K]` into probe rows: unchanged for the puzzle,
    /// one row of channel values per cell for IceSlider.
    fn rows(&self, bits: &[f64], n: usize) -> Tensor<f64> {
        match self.benchmark {
            Benchmark::Puzzle => Tensor::new(vec![n, self.k], bits.to_vec()).expect("bit matrix"),
            Benchmark::IceSlider => {
                let cells = ICE_SIDE * ICE_SIDE;
                let ch = self.k / cells;
                let mut out = Vec::with_capacity(bits.len());
                for r in 0..n {
                    let row = &bits[r * self.k..(r + 1) * self.k];
                    for cell in 0..cells {
                        out.extend((0..ch).map(|c| row[c * cells + cell]));
                    }
                }
                Tensor::new(vec![n * cells, ch], out).expect("cell rows")
            }
        }
    }

    /// Logits `[N·cells, classes]` for codes `[N, K]`.
    fn logits(&self, tape: &mut Tape<f64>, bound: &dwmr_ndcore::Bound, bits: &[f64], n: usize) -> Result<dwmr_ndcore::Var> {
        let x = tape.constant(self.rows(bits, n));
        let mut ctx = LayerCtx::new(tape, &self.params, bound, false);
        let out = self.net.forward(&mut ctx, x)?;
        let rows = n * self.benchmark.cells();
        Ok(tape.reshape(out, &[rows, self.benchmark.classes()])?)
    }

    /// Arg-max class per cell, `[N·cells]`.
    pub fn predict(&self, bits: &[f64]) -> Result<Vec<u8>> {
        let n = bits.len() / self.k;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let l = self.logits(&mut tape, &bound, bits, n)?;
        let c = self.benchmark.classes();
        Ok(tape
            .value(l)
            .data()
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect())
    }
}

/// Fits a probe with cross-entropy and AdamW on frozen codes `[N, K]` and
/// per-cell labels `[N·cells]`. Returns the probe and the mean training loss
/// of every epoch.
pub fn fit_probe(
    benchmark: Benchmark,
    bits: &[f64],
    labels: &[u8],
    k: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(Probe, Vec<f64>)> {
    let cells = benchmark.cells();
    if k == 0 || bits.len() % k != 0 || labels.len() != bits.len() / k * cells {
        return Err(CoreError::Invalid("probe inputs and labels disagree in length".into()));
    }
    let n = bits.len() / k;
    let mut probe = Probe::new(benchmark, k, seed)?;
    let mut opt = AdamState::<f64>::default().with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeding::stream(seeding::derive_seed(seed, label::PROBE), 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * k);
            let mut yb = Vec::with_capacity(chunk.len() * cells);
            for &i in chunk {
                xb.extend_from_slice(&bits[i * k..(i + 1) * k]);
                yb.extend(labels[i * cells..(i + 1) * cells].iter().map(|&l| l as usize));
            }
            let mut tape = Tape::new();
            let bound = probe.params.bind(&mut tape, true);
            let logits = probe.logits(&mut tape, &bound, &xb, chunk.len())?;
            let loss = tape.softmax_ce(logits, &yb)?;
            total += tape.value(loss).item() * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<_> = probe
                .params
                .entries()
                .iter()
                .filter_map(|e| grads.take(bound.var(&e.name).ok()?).map(|t| (e.name.clone(), t)))
                .collect();
            opt.step(&mut probe.params, &g, cfg.lr)?;
        }
        history.push(total / n as f64);
    }
    Ok((probe, history))
}

/// Per-cell F1 and accuracy, each in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct CellScores {
    pub f1: Vec<f64>,
    pub acc: Vec<f64>,
}

/// Accuracy and unweighted macro-F1 per cell; classes absent from both the
/// predictions and the truth of a cell are left out of its average.
pub fn per_cell_scores(pred: &[u8], truth: &[u8], cells: usize, classes: usize) -> Result<CellScores> {
    if pred.len() != truth.len() || cells == 0 || truth.len() % cells != 0 {
        return Err(CoreError::Invalid("prediction and truth label arrays disagree".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l as usize >= classes) {
        return Err(CoreError::Invalid(format!("label {bad} outside 0..{classes}")));
    }
    let n = truth.len() / cells;
    let mut f1 = Vec::with_capacity(cells);
    let mut acc = Vec::with_capacity(cells);
    for cell in 0..cells {
        let mut tp = vec![0usize; classes];
        let mut fp = vec![0usize; classes];
        let mut fnn = vec![0usize; classes];
        let mut correct = 0;
        for r in 0..n {
            let (p, t) = (pred[r * cells + cell] as usize, truth[r * cells + cell] as usize);
            if p == t {
                tp[p] += 1;
                correct += 1;
            } else {
                fp[p] += 1;
                fnn[t] += 1;
            }
        }
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..classes {
            let denom = 2 * tp[c] + fp[c] + fnn[c];
            if denom > 0 {
                sum += 2.0 * tp[c] as f64 / denom as f64;
                present += 1;
            }
        }
        f1.push(if present > 0 { sum / present as f64 } else { 1.0 });
        acc.push(if n > 0 { correct as f64 / n as f64 } else { 0.0 });
    }
    Ok(CellScores { f1, acc })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Encoding,
    Imagination,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Encoding => "encoding",
            EvalMode::Imagination => "imagination",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: usize,
    pub f1: f64,
    pub acc: f64,
}

/// Scores in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: Benchmark,
    /// Pixel-noise standard deviation (0 for clean data).
    pub noise: f64,
    pub family: Family,
    pub variant: Variant,
    pub seed: u64,
    pub mode: EvalMode,
    pub mean_f1: f64,
    pub mean_acc: f64,
    pub per_cell: Vec<CellReport>,
}

/// Identifies the run a report belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunInfo {
    pub benchmark: Benchmark,
    pub noise: f64,
    pub family: Family,
    pub variant: Variant,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_scores(info: &RunInfo, mode: EvalMode, scores: &CellScores) -> Self {
        let cells = scores.f1.len().max(1) as f64;
        let per_cell: Vec<CellReport> = scores
            .f1
            .iter()
            .zip(&scores.acc)
            .enumerate()
            .map(|(cell, (&f1, &acc))| CellReport {
                cell,
                f1: 100.0 * f1,
                acc: 100.0 * acc,
            })
            .collect();
        Self {
            benchmark: info.benchmark,
            noise: info.noise,
            family: info.family,
            variant: info.variant,
            seed: info.seed,
            mode,
            mean_f1: per_cell.iter().map(|c| c.f1).sum::<f64>() / cells,
            mean_acc: per_cell.iter().map(|c| c.acc).sum::<f64>() / cells,
            per_cell,
        }
    }
}

/// Hard codes for every stored frame of a split, `[frames, K]`.
pub fn encode_frames<T: Real>(model: &ModelBundle<T>, split: &Split) -> Result<Vec<f64>> {
    let [c, h, w] = split.benchmark.frame_shape();
    let frame_len = c * h * w;
    let mut out = Vec::with_capacity(split.num_frames() * model.k());
    let mut lut = [T::zero(); 256];
    for (b, v) in lut.iter_mut().enumerate() {
        *v = T::lit(b as f64 / 255.0);
    }
    let nf = split.num_frames();
    let mut start = 0;
    while start < nf {
        let end = (start + EVAL_BATCH).min(nf);
        let data: Vec<T> = split.frames[start * frame_len..end * frame_len]
            .iter()
            .map(|&b| lut[b as usize])
            .collect();
        let x = Tensor::new(vec![end - start, c, h, w], data)?;
        let p = model.encode_batch(Which::Online, x)?;
        out.extend(binarize(&p).data().iter().map(|v| v.f64()));
        start = end;
    }
    Ok(out)
}

/// Codes of the current observation of every record, `[records, K]`.
pub fn record_codes(frame_codes: &[f64], split: &Split, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(split.len() * k);
    for &f in &split.obs_index {
        let f = f as usize;
        out.extend_from_slice(&frame_codes[f * k..(f + 1) * k]);
    }
    out
}

/// One-step imagined codes b̂′ = 1[pred(b, a) ≥ 0.5] for every record.
pub fn imagine<T: Real>(model: &ModelBundle<T>, codes: &[f64], actions: &[u8]) -> Result<Vec<f64>> {
    let k = model.k();
    let n = actions.len();
    let mut out = Vec::with_capacity(n * k);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let data: Vec<T> = codes[start * k..end * k].iter().map(|&v| T::lit(v)).collect();
        let b = Tensor::new(vec![end - start, k], data)?;
        let p = model.predict_batch(b, &actions[start..end])?;
        out.extend(binarize(&p).data().iter().map(|v| v.f64()));
        start = end;
    }
    Ok(out)
}

fn record_labels(split: &Split, next: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(split.len() * split.benchmark.cells());
    for i in 0..split.len() {
        out.extend_from_slice(if next { split.truth_next(i) } else { split.truth(i) });
    }
    out
}

/// Fits a probe on the training-split codes and scores the encoding and
/// one-step imagination modes on `eval_split`.
pub fn evaluate<T: Real>(
    model: &ModelBundle<T>,
    train: &Split,
    eval_split: &Split,
    probe_cfg: &ProbeConfig,
    info: &RunInfo,
) -> Result<(EvalReport, EvalReport)> {
    if train.benchmark != model.arch.config.benchmark || eval_split.benchmark != train.benchmark {
        return Err(CoreError::Mismatch("dataset and model benchmarks differ".into()));
    }
    let k = model.k();
    let b = train.benchmark;
    let train_codes = record_codes(&encode_frames(model, train)?, train, k);
    let (probe, _) = fit_probe(b, &train_codes, &record_labels(train, false), k, probe_cfg, info.seed)?;

    let eval_codes = record_codes(&encode_frames(model, eval_split)?, eval_split, k);
    let enc_pred = probe.predict(&eval_codes)?;
    let enc = per_cell_scores(&enc_pred, &record_labels(eval_split, false), b.cells(), b.classes())?;

    let imagined = imagine(model, &eval_codes, &eval_split.actions)?;
    let im_pred = probe.predict(&imagined)?;
    let im = per_cell_scores(&im_pred, &record_labels(eval_split, true), b.cells(), b.classes())?;
    Ok((
        EvalReport::from_scores(info, EvalMode::Encoding, &enc),
        EvalReport::from_scores(info, EvalMode::Imagination, &im),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_binary_confusion() {
        // TP=1 FP=1 FN=1 TN=1 for class 1.
        let truth = [1, 1, 0, 0];
        let pred = [1, 0, 1, 0];
        let s = per_cell_scores(&pred, &truth, 1, 2).unwrap();
        assert!((s.f1[0] - 0.5).abs() < 1e-12);
        assert!((s.acc[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_labels_score_one() {
        let t = [0, 3, 2, 1, 1, 0];
        let s = per_cell_scores(&t, &t, 2, 4).unwrap();
        assert_eq!(s.f1, vec![1.0, 1.0]);
        assert_eq!(s.acc, vec![1.0, 1.0]);
    }

    #[test]
    fn constant_prediction_on_imbalanced_cell() {
        let truth: Vec<u8> = (0..100).map(|i| if i < 90 { 0 } else { 1 }).collect();
        let pred = vec![0u8; 100];
        let s = per_cell_scores(&pred, &truth, 1, 4).unwrap();
        assert!((s.acc[0] - 0.9).abs() < 1e-12);
        assert!((s.f1[0] - (2.0 * 90.0 / 190.0) / 2.0).abs() < 1e-12);
    }
}
