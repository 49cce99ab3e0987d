//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! The mini-scale training criteria take the better part of an hour on one
//! core. The full-scale reproduction only runs with `DWMR_FULL_SCALE=1`.
//! Pass criterion numbers after `--` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use dwmr_core::config::Config;
use dwmr_core::datasets::{build_splits, SplitSet};
use dwmr_core::envs::{generate_ice_level, ice_step, puzzle_is_solvable, Action, IceBoard, IceCell, PuzzleState};
use dwmr_core::experiments::{train_and_evaluate, EvalSplit, RunReports};
use dwmr_core::losses::{
    binary_concrete, cor_loss, cos_loss, dwmr_terms, kl_loss, loc_loss, logistic_noise, normalize_batch, pred_loss,
    sample_triplets, total_dwmr, var_loss, LocalityWindow, LossWeights, RegularizerSpec,
};
use dwmr_core::trainer::{encode_for_training, joint_step, predictor_step, run_training, BatchRng, PredictorInput};
use dwmr_core::trainer::{Batch, RunOptions, RunState, Scheduled};
use dwmr_ndcore::{finite_diff_gradient, relative_error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn bits(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor<f64> {
    Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(0..2) as f64).collect()).unwrap()
}

/// Largest relative error between the tape gradient of `sum(proj ⊙ op(x))`
/// and central differences, over all inputs.
fn grad_error<F>(inputs: &[Tensor<f64>], proj_seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = op(&mut tape, &vars);
        let proj = random(&mut ChaCha8Rng::seed_from_u64(proj_seed), tape.shape(out), -1.0, 1.0);
        let pv = tape.constant(proj);
        let prod = tape.mul(out, pv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grads = if grad {
            let g = tape.backward(loss).unwrap();
            vars.iter().map(|&v| g.get(v).cloned()).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, grads) = eval(inputs, true);
    grads
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let numeric = finite_diff_gradient(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[i] = x.clone();
                    eval(&vals, false).0
                },
                &inputs[i],
                // Standardization is shift- and scale-invariant, so its
                // gradients are small next to the curvature; the O(h²)
                // truncation error needs a step below 1e-4.
                1e-5,
            );
            relative_error(g.as_ref().expect("gradient present").data(), numeric.data())
        })
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Check {
    let (n, k) = (8, 6);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(m, _)| *m == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random(&mut rng, &[n, k], 0.05, 0.95);
        let p_hat = random(&mut rng, &[n, k], 0.05, 0.95);
        let target = bits(&mut rng, n, k);

        record("normalize", grad_error(&[p.clone()], seed, |t, v| normalize_batch(t, v[0]).unwrap()));
        record("var", grad_error(&[p.clone()], seed, |t, v| var_loss(t, v[0], 0.45).unwrap()));
        record("cor", grad_error(&[p.clone()], seed, |t, v| cor_loss(t, v[0]).unwrap()));
        record("cos", grad_error(&[p.clone()], seed, |t, v| cos_loss(t, v[0], None).unwrap()));
        let trip = sample_triplets(&mut rng, k, 12).unwrap();
        record("cos sampled", grad_error(&[p.clone()], seed, |t, v| cos_loss(t, v[0], Some(trip.clone())).unwrap()));
        record("kl", grad_error(&[p.clone()], seed, |t, v| kl_loss(t, v[0]).unwrap()));
        record(
            "pred",
            grad_error(&[p_hat.clone()], seed, |t, v| {
                let b = t.constant(target.clone());
                pred_loss(t, v[0], b).unwrap()
            }),
        );
        // Keep every |p − b′| away from the 0.5 indicator boundary.
        let p_loc = Tensor::new(
            vec![n, k],
            p.data()
                .iter()
                .zip(target.data())
                .map(|(&v, &b)| if ((v - b).abs() - 0.5).abs() < 0.02 { v + 0.05 } else { v })
                .collect(),
        )
        .unwrap();
        let window = LocalityWindow { lower: 1, upper: 2 };
        record("loc", grad_error(&[p_loc.clone()], seed, |t, v| loc_loss(t, v[0], &target, window).unwrap()));
        let spec = RegularizerSpec {
            gamma: 0.45,
            window,
            triplets: None,
        };
        let w = LossWeights {
            var: 25.0,
            cor: 5.0,
            cos: 5.0,
            loc: 1.0,
            rec: 0.0,
            kl: 0.0,
        };
        record(
            "total",
            grad_error(&[p_loc, p_hat.clone()], seed, |t, v| {
                let terms = dwmr_terms(t, v[0], v[1], &target, &spec).unwrap();
                total_dwmr(t, &terms, &w).unwrap()
            }),
        );
        let logits = random(&mut rng, &[n, k], -2.0, 2.0);
        let noise = logistic_noise(&mut rng, n * k);
        record("binary_concrete", grad_error(&[logits], seed, |t, v| binary_concrete(t, v[0], &noise, 0.7).unwrap()));

        // Layer primitives.
        let a = random(&mut rng, &[n, k], -2.0, 2.0);
        let b = random(&mut rng, &[n, k], -2.0, 2.0);
        record("add", grad_error(&[a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]).unwrap()));
        record("sub", grad_error(&[a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1]).unwrap()));
        record("mul", grad_error(&[a.clone(), b.clone()], seed, |t, v| t.mul(v[0], v[1]).unwrap()));
        record("square", grad_error(&[a.clone()], seed, |t, v| t.square(v[0])));
        record("sigmoid", grad_error(&[a.clone()], seed, |t, v| t.sigmoid(v[0])));
        let r = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
        record("relu", grad_error(&[r], seed, |t, v| t.relu(v[0])));
        record("concat", grad_error(&[a.clone(), b.clone()], seed, |t, v| t.concat1(v[0], v[1]).unwrap()));
        record("mean", grad_error(&[a.clone()], seed, |t, v| {
            let m = t.mean(v[0]);
            t.reshape(m, &[1]).unwrap()
        }));
        let wl = random(&mut rng, &[k, 4], -1.0, 1.0);
        let bl = random(&mut rng, &[4], -1.0, 1.0);
        record("linear", grad_error(&[a.clone(), wl, bl], seed, |t, v| t.linear(v[0], v[1], v[2]).unwrap()));
        record("bce", grad_error(&[p.clone()], seed, |t, v| {
            let tv = t.constant(target.clone());
            t.bce(v[0], tv).unwrap()
        }));
        record("mse", grad_error(&[p.clone(), a.clone()], seed, |t, v| t.mse(v[0], v[1]).unwrap()));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        record("softmax_ce", grad_error(&[a.clone()], seed, |t, v| t.softmax_ce(v[0], &labels).unwrap()));

        let x = random(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let wc = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let bc = random(&mut rng, &[4], -0.5, 0.5);
        record("conv2d", grad_error(&[x.clone(), wc.clone(), bc.clone()], seed, |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 1).unwrap()
        }));
        record("conv2d strided", grad_error(&[x.clone(), wc, bc.clone()], seed, |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 0).unwrap()
        }));
        let wt = random(&mut rng, &[3, 4, 2, 2], -0.5, 0.5);
        record("conv_transpose2d", grad_error(&[x.clone(), wt, bc.clone()], seed, |t, v| {
            t.conv_transpose2d(v[0], v[1], v[2], 2, 0).unwrap()
        }));
        record("avg_pool2d", grad_error(&[x.clone()], seed, |t, v| t.avg_pool2d(v[0]).unwrap()));
        let xg = random(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        let gamma = random(&mut rng, &[4], 0.5, 1.5);
        let beta = random(&mut rng, &[4], -0.5, 0.5);
        record("group_norm", grad_error(&[xg.clone(), gamma.clone(), beta.clone()], seed, |t, v| {
            t.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap()
        }));
        record("batch_norm train", grad_error(&[xg.clone(), gamma.clone(), beta.clone()], seed, |t, v| {
            t.batch_norm2d_train(v[0], v[1], v[2], 1e-5).unwrap().0
        }));
        let (mean, var) = ([0.1, -0.2, 0.0, 0.3], [1.0, 0.5, 2.0, 0.8]);
        record("batch_norm eval", grad_error(&[xg, gamma, beta], seed, |t, v| {
            t.batch_norm2d_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
        }));
    }
    let (name, max) = worst.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<&str> = worst.iter().filter(|w| w.1 >= GRAD_TOL).map(|w| w.0).collect();
    ensure(
        failing.is_empty(),
        format!("{} checks x {GRAD_SEEDS} seeds, worst {name} {max:.2e}, failing {failing:?}", worst.len()),
    )
}

// ------------------------------------------------------------------ moments

fn scalar(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.value(v).item()
}

fn moment_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let k = rng.random_range(1..=8);
        let n = rng.random_range(2..=64);
        let p = common::random_matrix(trial, n, k, 0.0, 1.0);
        let m = Tensor::from_f64(&[n, k], &p).unwrap();
        let cor = scalar(|t| {
            let v = t.constant(m.clone());
            cor_loss(t, v).unwrap()
        });
        let cos = scalar(|t| {
            let v = t.constant(m.clone());
            cos_loss(t, v, None).unwrap()
        });
        worst = worst.max((cor - common::brute_cor(&p, n, k)).abs());
        worst = worst.max((cos - common::brute_cos(&p, n, k)).abs());
    }
    let xor: Vec<f64> = [[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]].concat();
    let xm = Tensor::from_f64(&[4, 3], &xor).unwrap();
    let cos = scalar(|t| {
        let v = t.constant(xm.clone());
        cos_loss(t, v, None).unwrap()
    });
    let cor = scalar(|t| {
        let v = t.constant(xm.clone());
        cor_loss(t, v).unwrap()
    });
    let q = common::standardize_with(&xor, 4, 3, 0.0);
    let pop: f64 = (0..4).map(|r| q[r * 3] * q[r * 3 + 1] * q[r * 3 + 2]).sum::<f64>() / 4.0;
    ensure(
        worst < 1e-10 && cor.abs() <= 0.35 && (pop.abs() - 1.0).abs() < 1e-6 && (cos - 1.0).abs() < 1e-5,
        format!("brute-force max diff {worst:.1e}; XOR cos {cos:.6}, cor {cor:.1e}, population |M| {:.6}", pop.abs()),
    )
}

// -------------------------------------------------------------- environments

fn environment_oracles() -> Check {
    let reachable = common::bfs_from_goal();
    let mut disagreements = 0;
    let perms = common::all_permutations();
    for g in &perms {
        if puzzle_is_solvable(&PuzzleState::new(*g).unwrap()) != reachable.contains(g) {
            disagreements += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    let mut pairs = 0;
    while pairs < 10_000 {
        let board = if pairs % 2 == 0 {
            let mut b = generate_ice_level(&mut rng, 0.2).unwrap();
            let free: Vec<(usize, usize)> =
                (0..64).map(|i| (i / 8, i % 8)).filter(|&(r, c)| b.cells[r][c] != IceCell::Rock).collect();
            b.agent = free[rng.random_range(0..free.len())];
            b
        } else {
            let mut b = IceBoard::empty((0, 0), (7, 7));
            for r in 0..8 {
                for c in 0..8 {
                    if rng.random_bool(0.3) {
                        b.cells[r][c] = IceCell::Rock;
                    }
                }
            }
            let free: Vec<(usize, usize)> =
                (0..64).map(|i| (i / 8, i % 8)).filter(|&(r, c)| b.cells[r][c] != IceCell::Rock).collect();
            if free.is_empty() {
                continue;
            }
            b.agent = free[rng.random_range(0..free.len())];
            b
        };
        let mut rocks = [[false; 8]; 8];
        for r in 0..8 {
            for c in 0..8 {
                rocks[r][c] = board.cells[r][c] == IceCell::Rock;
            }
        }
        let a = rng.random_range(0..4);
        if ice_step(&board, Action::from_index(a).unwrap()).agent != common::reference_slide(&rocks, board.agent, a) {
            mismatches += 1;
        }
        pairs += 1;
    }
    ensure(
        disagreements == 0 && reachable.len() == 181_440 && mismatches == 0,
        format!(
            "{} permutations, {} reachable, {disagreements} parity disagreements; {pairs} slides, {mismatches} mismatches",
            perms.len(),
            reachable.len()
        ),
    )
}

// ------------------------------------------------------------- mini training

/// Mini-scale setting shared by the collapse and family criteria.
fn mini_config(extra: &[&str]) -> Config {
    let mut c = Config::default();
    for o in MINI.iter().chain(extra) {
        c.apply_override(o).unwrap();
    }
    c
}

const MINI: &[&str] = &[
    "benchmark=puzzle",
    "data.train_size=5000",
    "data.val_size=1000",
    "data.test_size=1000",
    "train.epochs=10",
    // Tuned for the 5k-transition budget: stronger decorrelation and locality
    // pull the bits off per-image glyph style within ten epochs.
    "loss.lambda_cor=15",
    "loss.lambda_cos=15",
    "loss.lambda_loc=20",
];

struct Mini {
    data: SplitSet,
    dwmr: Vec<RunReports>,
}

fn mini_run(data: &SplitSet, extra: &[&str]) -> RunReports {
    let t0 = Instant::now();
    let r = train_and_evaluate(&mini_config(extra), data, EvalSplit::Test, None).unwrap();
    eprintln!(
        "  {extra:?}: enc acc {:.1} F1 {:.1}, im acc {:.1} F1 {:.1} ({:.0}s)",
        r.enc.mean_acc,
        r.enc.mean_f1,
        r.im.mean_acc,
        r.im.mean_f1,
        t0.elapsed().as_secs_f64()
    );
    r
}

fn collapse_ablation(mini: &mut Mini) -> Check {
    let full = mini_run(&mini.data, &["seed=0"]);
    let no_var = mini_run(&mini.data, &["seed=0", "loss.lambda_var=0"]);
    let (a, b) = (full.enc.mean_acc, no_var.enc.mean_acc);
    mini.dwmr.push(full);
    ensure(
        a >= 60.0 && b <= 20.0 && a - b >= 40.0,
        format!("encoding accuracy: full {a:.1} (>= 60), no L_var {b:.1} (<= 20), gap {:.1}", a - b),
    )
}

fn family_ordering(mini: &mut Mini) -> Check {
    for s in mini.dwmr.len()..3 {
        let r = mini_run(&mini.data, &[&format!("seed={s}")]);
        mini.dwmr.push(r);
    }
    let ae: Vec<f64> = (0..3)
        .map(|s| mini_run(&mini.data, &[&format!("seed={s}"), "family=ae"]).enc.mean_f1)
        .collect();
    let dwmr: Vec<f64> = mini.dwmr.iter().map(|r| r.enc.mean_f1).collect();
    let (d, a) = (dwmr.iter().sum::<f64>() / 3.0, ae.iter().sum::<f64>() / 3.0);
    ensure(
        d - a >= 20.0,
        format!("mean encoding F1 over 3 seeds: DWMR {d:.1} {dwmr:.1?}, AE {a:.1} {ae:.1?}, gap {:.1}", d - a),
    )
}

fn full_scale() -> Option<Check> {
    if std::env::var("DWMR_FULL_SCALE").map_or(true, |v| v.is_empty() || v == "0") {
        return None;
    }
    let cfg = Config::default();
    let data = build_splits(&cfg.data_spec().unwrap()).unwrap();
    let r = train_and_evaluate(&cfg, &data, EvalSplit::Test, None).unwrap();
    let (e, i) = (r.enc.mean_f1, r.im.mean_f1);
    Some(ensure(
        (e - 91.0).abs() <= 8.0 && (i - 84.0).abs() <= 8.0,
        format!("encoding F1 {e:.1} (91 ± 8), imagination F1 {i:.1} (84 ± 8)"),
    ))
}

// ------------------------------------------------------------- contracts

fn tiny_config(extra: &[&str]) -> Config {
    let mut c = Config::default();
    for o in [
        "benchmark=puzzle",
        "data.train_size=48",
        "data.val_size=16",
        "data.test_size=16",
        "data.digits_per_class=4",
        "train.batch_size=16",
        "train.epochs=2",
    ]
    .iter()
    .chain(extra)
    {
        c.apply_override(o).unwrap();
    }
    c
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn two_step_contract() -> Check {
    let cfg = tiny_config(&[]);
    let tc = cfg.train_config().unwrap();
    let data = build_splits(&cfg.data_spec().unwrap()).unwrap();
    let mut st = RunState::<f64>::new(&tc).unwrap();
    let mut other = tc.clone();
    other.seed = 77;
    st.model.enc_ema = RunState::<f64>::new(&other).unwrap().model.enc;
    let sched = Scheduled::at(&tc, 0);
    let batch = Batch::from_split(data.train(), &(0..16).collect::<Vec<_>>()).unwrap();
    let mut rng = BatchRng::new(tc.seed, 0, 0);

    let (phi0, psi0, ema0) =
        (st.model.enc.flat_trainable(), st.model.pred.flat_trainable(), st.model.enc_ema.flat_trainable());
    let enc = encode_for_training(&st.model, &tc, &batch, &mut rng).unwrap();
    predictor_step(&mut st, &tc, &sched, &enc).unwrap();
    let (phi1, psi1, ema1) =
        (st.model.enc.flat_trainable(), st.model.pred.flat_trainable(), st.model.enc_ema.flat_trainable());
    joint_step(&mut st, &tc, &sched, enc, PredictorInput::Soft, &mut rng).unwrap();
    let (phi2, psi2, ema2) =
        (st.model.enc.flat_trainable(), st.model.pred.flat_trainable(), st.model.enc_ema.flat_trainable());

    let ratio_a = distance(&ema1, &phi1) / distance(&ema0, &phi1);
    let ratio_b = distance(&ema2, &phi2) / distance(&ema1, &phi2);
    let tau = sched.tau;
    let rel = ((ratio_a - tau) / tau).abs().max(((ratio_b - tau) / tau).abs());
    ensure(
        phi0 == phi1 && psi0 != psi1 && phi1 != phi2 && psi1 != psi2 && rel <= 1e-6,
        format!(
            "step (a): phi unchanged {}, psi changed {}; step (b): phi changed {}, psi changed {}; EMA ratios {ratio_a:.9} / {ratio_b:.9} vs tau {tau} (rel {rel:.1e})",
            phi0 == phi1,
            psi0 != psi1,
            phi1 != phi2,
            psi1 != psi2
        ),
    )
}

fn determinism() -> Check {
    let cfg = tiny_config(&["seed=5"]);
    let tc = cfg.train_config().unwrap();
    let data = build_splits(&cfg.data_spec().unwrap()).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let opts = RunOptions {
            out_dir: Some(d.path().to_path_buf()),
            resume: false,
        };
        run_training::<f32>(&tc, &data, &opts).unwrap();
    }
    let mut same = Vec::new();
    for f in ["metrics.csv", "ckpt_epoch001.bin", "ckpt_epoch002.bin"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        same.push((f, a == b, a.len()));
    }
    ensure(same.iter().all(|s| s.1), format!("{same:?}"))
}

fn locality_arithmetic() -> Check {
    let (n, k) = (2, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = bits(&mut rng, n, k);
    let window = LocalityWindow { lower: 1, upper: 6 };
    let run = |p: Vec<f64>| {
        scalar(|t| {
            let v = t.constant(Tensor::new(vec![n, k], p).unwrap());
            loc_loss(t, v, &b, window).unwrap()
        })
    };
    let exact = run(b.data().to_vec());
    let three = run(b.data().iter().enumerate().map(|(i, &v)| if i % k < 3 { 1.0 - v } else { v }).collect());
    // |p − b′| = 0.5 on every bit: no bit counts, so d = 0 for every row.
    let half_p: Vec<f64> = vec![0.5; n * k];
    let d_half = dwmr_core::losses::flip_distance(&half_p, b.data(), k);
    let expected = (1.0f64 / 64.0).powi(2);
    ensure(
        (exact - expected).abs() < 1e-9 && three.abs() < 1e-9 && d_half.iter().all(|&d| d == 0.0),
        format!("p = b': {exact:.4e} (2.441e-4); three flips: {three:.1e}; all 0.5: d = {d_half:?}"),
    )
}

fn main() {
    // Criterion numbers given on the command line restrict the run to those.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Option<Check>| {
        if !only.is_empty() && !only.contains(&id) {
            return;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Some(Err(format!("panicked: {msg}")))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Some(Ok(d)) => println!("PASS [{id}] {name}: {d} ({secs:.1}s)"),
            Some(Err(d)) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {d} ({secs:.1}s)");
            }
            None => println!("SKIP [{id}] {name}: advisory, set DWMR_FULL_SCALE=1 to run"),
        }
    };
    report(1, "gradient suite", &mut || Some(gradient_suite()));
    report(2, "moment oracles", &mut || Some(moment_oracles()));
    report(3, "environment oracles", &mut || Some(environment_oracles()));
    let mut mini = Mini {
        data: build_splits(&mini_config(&[]).data_spec().unwrap()).unwrap(),
        dwmr: Vec::new(),
    };
    report(4, "collapse ablation", &mut || Some(collapse_ablation(&mut mini)));
    report(5, "family ordering", &mut || Some(family_ordering(&mut mini)));
    report(6, "full-scale reproduction", &mut full_scale);
    report(7, "two-step contract", &mut || Some(two_step_contract()));
    report(8, "determinism", &mut || Some(determinism()));
    report(9, "locality arithmetic", &mut || Some(locality_arithmetic()));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
