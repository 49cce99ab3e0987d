//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dwmr_ndcore::{finite_diff_gradient, relative_error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(seed: u64, n: usize, k: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * k).map(|_| rng.random_range(lo..hi)).collect()
}

/// Column standardization with population std and ε = 1e-6, straight loops.
pub fn standardize(p: &[f64], n: usize, k: usize) -> Vec<f64> {
    standardize_with(p, n, k, 1e-6)
}

pub fn standardize_with(p: &[f64], n: usize, k: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for j in 0..k {
        let mean = (0..n).map(|r| p[r * k + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (p[r * k + j] - mean).powi(2)).sum::<f64>() / n as f64;
        for r in 0..n {
            out[r * k + j] = (p[r * k + j] - mean) / (var.sqrt() + eps);
        }
    }
    out
}

/// Mean |corr| over ordered off-diagonal pairs, N − 1 denominator.
pub fn brute_cor(p: &[f64], n: usize, k: usize) -> f64 {
    if k < 2 {
        return 0.0;
    }
    let q = standardize(p, n, k);
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let c: f64 = (0..n).map(|r| q[r * k + i] * q[r * k + j]).sum();
            total += (c / (n - 1) as f64).abs();
        }
    }
    total / (k * (k - 1)) as f64
}

/// Mean |third cross-moment| over ordered distinct triplets.
pub fn brute_cos(p: &[f64], n: usize, k: usize) -> f64 {
    if k < 3 {
        return 0.0;
    }
    let q = standardize(p, n, k);
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                if i == j || j == l || i == l {
                    continue;
                }
                let m: f64 = (0..n).map(|r| q[r * k + i] * q[r * k + j] * q[r * k + l]).sum::<f64>() / n as f64;
                total += m.abs();
            }
        }
    }
    total / (k * (k - 1) * (k - 2)) as f64
}

/// Scalar locality loss written out directly.
pub fn brute_loc(p: &[f64], b: &[f64], n: usize, k: usize, lower: usize, upper: usize) -> f64 {
    let m = (lower + upper) as f64 / (2 * k) as f64;
    let w = (upper - lower) as f64 / (2 * k) as f64;
    let mut total = 0.0;
    for r in 0..n {
        let mut d = 0.0;
        for j in 0..k {
            let a = (p[r * k + j] - b[r * k + j]).abs();
            if a > 0.5 {
                d += a;
            }
        }
        d /= 0.75 * k as f64;
        let h = ((d - m).abs() - w).max(0.0);
        total += h * h;
    }
    total / n as f64
}

/// Compares the tape gradient of a scalar-valued `build` with central
/// differences (h = 1e-4) for every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F) -> Vec<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |vals: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs, true);
    let g = tape.backward(out).expect("backward");
    (0..inputs.len())
        .map(|i| {
            let numeric = finite_diff_gradient(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[i] = x.clone();
                    let (t, _, o) = run(&vals, false);
                    t.value(o).item()
                },
                &inputs[i],
                1e-4,
            );
            relative_error(g.get(vars[i]).expect("gradient").data(), numeric.data())
        })
        .collect()
}

/// Every 8-puzzle grid reachable from the goal, by breadth-first search over
/// blank moves written out independently of the simulator.
pub fn bfs_from_goal() -> std::collections::HashSet<[u8; 9]> {
    use std::collections::{HashSet, VecDeque};
    let goal = [0u8, 1, 2, 3, 4, 5, 6, 7, 8];
    let mut seen = HashSet::from([goal]);
    let mut queue = VecDeque::from([goal]);
    while let Some(g) = queue.pop_front() {
        let b = g.iter().position(|&t| t == 0).unwrap();
        let (r, c) = (b / 3, b % 3);
        let mut next = Vec::new();
        if r > 0 {
            next.push(b - 3);
        }
        if r < 2 {
            next.push(b + 3);
        }
        if c > 0 {
            next.push(b - 1);
        }
        if c < 2 {
            next.push(b + 1);
        }
        for t in next {
            let mut h = g;
            h.swap(b, t);
            if seen.insert(h) {
                queue.push_back(h);
            }
        }
    }
    seen
}

/// All permutations of 0..8 in lexicographic order.
pub fn all_permutations() -> Vec<[u8; 9]> {
    let mut p = [0u8, 1, 2, 3, 4, 5, 6, 7, 8];
    let mut out = vec![p];
    loop {
        let Some(i) = (0..8).rev().find(|&i| p[i] < p[i + 1]) else {
            return out;
        };
        let j = (i + 1..9).rev().find(|&j| p[j] > p[i]).unwrap();
        p.swap(i, j);
        p[i + 1..].reverse();
        out.push(p);
    }
}

/// Reference slide: walk the cells of the agent's row or column in the
/// action direction and stop in front of the first rock or at the edge.
/// `rocks[r][c]` marks obstacles; directions are up, down, left, right.
pub fn reference_slide(rocks: &[[bool; 8]; 8], agent: (usize, usize), action: usize) -> (usize, usize) {
    let (r, c) = agent;
    let path: Vec<(usize, usize)> = match action {
        0 => (0..r).rev().map(|i| (i, c)).collect(),
        1 => (r + 1..8).map(|i| (i, c)).collect(),
        2 => (0..c).rev().map(|j| (r, j)).collect(),
        3 => (c + 1..8).map(|j| (r, j)).collect(),
        _ => panic!("bad action"),
    };
    let mut pos = agent;
    for cell in path {
        if rocks[cell.0][cell.1] {
            break;
        }
        pos = cell;
    }
    pos
}
