//! Offline datasets: IDX ingestion, the synthetic digit fallback, trajectory
//! generation, the split protocol and the on-disk container.
//!
//! A split stores every rendered frame once; record `i` is the transition
//! from frame `obs_index[i]` to frame `obs_index[i] + 1` under `actions[i]`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    generate_ice_level, ice_step, puzzle_step, render_ice, render_puzzle, sample_solvable_state, Action,
    Benchmark, NoiseScale, NoiseSpec, PuzzleState, DEFAULT_ROCK_DENSITY, PUZZLE_TILE_PX,
};
use crate::error::{CoreError, Result};
use crate::seeding;

// ---------------------------------------------------------------------------
// IDX

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// Image `i` scaled to [0, 1].
    pub fn image(&self, i: usize) -> Vec<f32> {
        let n = self.rows * self.cols;
        self.pixels[i * n..(i + 1) * n].iter().map(|&b| b as f32 / 255.0).collect()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CoreError::Format("IDX header truncated".into()))
}

fn idx_payload(bytes: &[u8], header: usize, dims: &[u32]) -> Result<usize> {
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| CoreError::Format(format!("IDX dims overflow: {dims:?}")))?;
    let expected = header
        .checked_add(n)
        .ok_or_else(|| CoreError::Format("IDX size overflow".into()))?;
    if bytes.len() != expected {
        return Err(CoreError::Format(format!(
            "IDX payload has {} bytes, header declares {}",
            bytes.len().saturating_sub(header),
            n
        )));
    }
    Ok(n)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoreError::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let dims = [be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?];
    idx_payload(bytes, 16, &dims)?;
    Ok(IdxImages {
        count: dims[0] as usize,
        rows: dims[1] as usize,
        cols: dims[2] as usize,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CoreError::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    idx_payload(bytes, 8, &[be_u32(bytes, 4)?])?;
    Ok(bytes[8..].to_vec())
}

pub fn serialize_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn serialize_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

// ---------------------------------------------------------------------------
// Digit sources

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitProvenance {
    IdxFile,
    Synthetic,
}

/// Per-class pools of 28×28 exemplars for digits 1–8. Every exemplar has a
/// globally unique id so pools can be checked for disjointness.
#[derive(Clone, Debug)]
pub struct DigitSource {
    pools: Vec<Vec<Vec<f32>>>,
    ids: Vec<Vec<u64>>,
    pub provenance: DigitProvenance,
}

impl DigitSource {
    pub fn new(pools: Vec<Vec<Vec<f32>>>, ids: Vec<Vec<u64>>, provenance: DigitProvenance) -> Result<Self> {
        if pools.len() != 8 || ids.len() != 8 {
            return Err(CoreError::Invalid("digit source needs pools for classes 1-8".into()));
        }
        for (c, (pool, id)) in pools.iter().zip(&ids).enumerate() {
            if pool.is_empty() {
                return Err(CoreError::Generation(format!("digit class {} has no exemplars", c + 1)));
            }
            if pool.len() != id.len() || pool.iter().any(|g| g.len() != PUZZLE_TILE_PX * PUZZLE_TILE_PX) {
                return Err(CoreError::Invalid(format!("malformed pool for digit {}", c + 1)));
            }
        }
        Ok(Self { pools, ids, provenance })
    }

    pub fn pool(&self, class: u8) -> Result<&[Vec<f32>]> {
        match class {
            1..=8 => Ok(&self.pools[class as usize - 1]),
            _ => Err(CoreError::Invalid(format!("no digit pool for class {class}"))),
        }
    }

    /// All exemplar ids, class by class.
    pub fn exemplar_ids(&self) -> Vec<u64> {
        self.ids.iter().flatten().copied().collect()
    }

    /// Uniformly chosen exemplar of `class`.
    pub fn sample<R: Rng + ?Sized>(&self, class: u8, rng: &mut R) -> Result<&[f32]> {
        let pool = self.pool(class)?;
        Ok(&pool[rng.random_range(0..pool.len())])
    }
}

pub const DEFAULT_DIGITS_PER_CLASS: usize = 200;

/// 5×7 bitmap font for digits 1–8, one string per row.
const FONT: [[&str; 7]; 8] = [
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
];
const GLYPH_SX: usize = 4;
const GLYPH_SY: usize = 3;
const GLYPH_JITTER: i32 = 2;

/// Centered, unjittered 28×28 mask of a digit (values 0/1).
pub fn glyph_mask(class: u8) -> Vec<f32> {
    render_glyph(class, 0, 0, 1.0)
}

fn render_glyph(class: u8, dx: i32, dy: i32, intensity: f32) -> Vec<f32> {
    let px = PUZZLE_TILE_PX as i32;
    let (w, h) = ((5 * GLYPH_SX) as i32, (7 * GLYPH_SY) as i32);
    let (ox, oy) = ((px - w) / 2 + dx, (px - h) / 2 + dy);
    let mut img = vec![0.0f32; PUZZLE_TILE_PX * PUZZLE_TILE_PX];
    for (r, row) in FONT[class as usize - 1].iter().enumerate() {
        for (c, bit) in row.bytes().enumerate() {
            if bit != b'1' {
                continue;
            }
            for yy in 0..GLYPH_SY as i32 {
                for xx in 0..GLYPH_SX as i32 {
                    let y = oy + r as i32 * GLYPH_SY as i32 + yy;
                    let x = ox + c as i32 * GLYPH_SX as i32 + xx;
                    if (0..px).contains(&y) && (0..px).contains(&x) {
                        img[(y * px + x) as usize] = intensity;
                    }
                }
            }
        }
    }
    img
}

/// Synthetic fallback for MNIST: bitmap-font digits with ±2 px translation
/// jitter and intensity in [0.7, 1.0]. Exemplar `j` of class `c` is drawn
/// from its own seed, so pools over disjoint index ranges share nothing.
pub fn synth_glyph_source(seed: u64, first_index: u64, per_class: usize) -> Result<DigitSource> {
    let mut pools = Vec::with_capacity(8);
    let mut ids = Vec::with_capacity(8);
    for class in 1..=8u8 {
        let mut pool = Vec::with_capacity(per_class);
        let mut id = Vec::with_capacity(per_class);
        for j in 0..per_class as u64 {
            let ex = ((class as u64) << 40) | (first_index + j);
            let mut rng = seeding::stream(seed, ex);
            let dx = rng.random_range(-GLYPH_JITTER..=GLYPH_JITTER);
            let dy = rng.random_range(-GLYPH_JITTER..=GLYPH_JITTER);
            let intensity = rng.random_range(0.7f32..=1.0);
            pool.push(render_glyph(class, dx, dy, intensity));
            id.push(ex);
        }
        pools.push(pool);
        ids.push(id);
    }
    DigitSource::new(pools, ids, DigitProvenance::Synthetic)
}

/// Digit pools from MNIST training files, partitioned by index range.
pub fn idx_digit_source(images: &IdxImages, labels: &[u8], range: std::ops::Range<usize>) -> Result<DigitSource> {
    if images.rows != PUZZLE_TILE_PX || images.cols != PUZZLE_TILE_PX || images.count != labels.len() {
        return Err(CoreError::Format("MNIST files must be 28×28 images with matching labels".into()));
    }
    let mut pools = vec![Vec::new(); 8];
    let mut ids = vec![Vec::new(); 8];
    for i in range {
        let l = labels[i];
        if (1..=8).contains(&l) {
            pools[l as usize - 1].push(images.image(i));
            ids[l as usize - 1].push(i as u64);
        }
    }
    DigitSource::new(pools, ids, DigitProvenance::IdxFile)
}

const MNIST_IMAGES: &str = "train-images-idx3-ubyte";
const MNIST_LABELS: &str = "train-labels-idx1-ubyte";

/// Looks for MNIST training files in `dir` or `dir/mnist`.
pub fn find_mnist(dir: &Path) -> Option<(PathBuf, PathBuf)> {
    [dir.to_path_buf(), dir.join("mnist")].into_iter().find_map(|d| {
        let (i, l) = (d.join(MNIST_IMAGES), d.join(MNIST_LABELS));
        (i.is_file() && l.is_file()).then_some((i, l))
    })
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub obs: Vec<f32>,
    pub action: u8,
    pub next_obs: Vec<f32>,
    pub truth: Vec<u8>,
    pub truth_next: Vec<u8>,
}

/// One rendered walk: `frames.len() == actions.len() + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub frames: Vec<Vec<f32>>,
    pub truths: Vec<Vec<u8>>,
    pub actions: Vec<u8>,
}

impl Episode {
    pub fn records(&self) -> Vec<TransitionRecord> {
        (0..self.actions.len())
            .map(|i| TransitionRecord {
                obs: self.frames[i].clone(),
                action: self.actions[i],
                next_obs: self.frames[i + 1].clone(),
                truth: self.truths[i].clone(),
                truth_next: self.truths[i + 1].clone(),
            })
            .collect()
    }
}

/// Random walk of `length` transitions. Puzzle walks start from a random
/// solvable state and resample rejected moves; IceSlider walks start from a
/// fresh level and keep blocked moves.
pub fn generate_trajectory<R: Rng + ?Sized>(
    benchmark: Benchmark,
    length: usize,
    rng: &mut R,
    noise: Option<NoiseSpec>,
    digits: Option<&DigitSource>,
    rock_density: f64,
) -> Result<Episode> {
    let mut ep = Episode::default();
    match benchmark {
        Benchmark::Puzzle => {
            let digits =
                digits.ok_or_else(|| CoreError::Invalid("puzzle trajectories need a digit source".into()))?;
            let mut state = sample_solvable_state(rng);
            ep.frames.push(render_puzzle(&state, digits, rng, noise)?);
            ep.truths.push(state.grid.to_vec());
            for _ in 0..length {
                let (action, next) = loop {
                    let a = Action::random(rng);
                    if let Some(n) = puzzle_step(&state, a) {
                        break (a, n);
                    }
                };
                state = next;
                ep.actions.push(action.index() as u8);
                ep.frames.push(render_puzzle(&state, digits, rng, noise)?);
                ep.truths.push(state.grid.to_vec());
            }
        }
        Benchmark::IceSlider => {
            let mut board = generate_ice_level(rng, rock_density)?;
            ep.frames.push(render_ice(&board, noise, rng));
            ep.truths.push(board.labels().to_vec());
            for _ in 0..length {
                let a = Action::random(rng);
                board = ice_step(&board, a);
                ep.actions.push(a.index() as u8);
                ep.frames.push(render_ice(&board, noise, rng));
                ep.truths.push(board.labels().to_vec());
            }
        }
    }
    Ok(ep)
}

/// Re-simulates a transition from its ground-truth grid (used for
/// consistency checks). `None` when the truth grid is not decodable.
pub fn resimulate(benchmark: Benchmark, truth: &[u8], action: u8) -> Option<Vec<u8>> {
    let action = Action::from_index(action as usize)?;
    match benchmark {
        Benchmark::Puzzle => {
            let state = PuzzleState::new(truth.try_into().ok()?).ok()?;
            puzzle_step(&state, action).map(|s| s.grid.to_vec())
        }
        Benchmark::IceSlider => {
            use crate::envs::{IceBoard, IceCell, ICE_CLASS_AGENT, ICE_CLASS_GOAL, ICE_CLASS_ROCK, ICE_SIDE};
            let mut cells = [[IceCell::Ice; ICE_SIDE]; ICE_SIDE];
            let mut agent = None;
            let mut goal_seen = false;
            for (i, &l) in truth.iter().enumerate() {
                let (r, c) = (i / ICE_SIDE, i % ICE_SIDE);
                match l {
                    ICE_CLASS_ROCK => cells[r][c] = IceCell::Rock,
                    ICE_CLASS_GOAL => {
                        cells[r][c] = IceCell::Goal;
                        goal_seen = true;
                    }
                    ICE_CLASS_AGENT => agent = Some((r, c)),
                    _ => {}
                }
            }
            let agent = agent?;
            let board = IceBoard { cells, agent };
            let next = ice_step(&board, action);
            let mut labels = next.labels().to_vec();
            // a goal hidden under the agent reappears once the agent leaves
            if !goal_seen && next.agent != agent {
                labels[agent.0 * ICE_SIDE + agent.1] = ICE_CLASS_GOAL;
            }
            Some(labels)
        }
    }
}

// ---------------------------------------------------------------------------
// Splits

pub fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// One split, stored frame-wise with u8 intensities in (C, H, W) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub benchmark: Benchmark,
    pub seed: u64,
    pub frames: Vec<u8>,
    pub truths: Vec<u8>,
    pub actions: Vec<u8>,
    pub obs_index: Vec<u32>,
    /// Exemplar ids of the digit pool this split was rendered from.
    pub digit_ids: Vec<u64>,
}

impl Split {
    fn empty(name: &str, benchmark: Benchmark, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            benchmark,
            seed,
            frames: Vec::new(),
            truths: Vec::new(),
            actions: Vec::new(),
            obs_index: Vec::new(),
            digit_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.benchmark.frame_len()
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.benchmark.frame_len();
        &self.frames[f * n..(f + 1) * n]
    }

    pub fn frame_truth(&self, f: usize) -> &[u8] {
        let n = self.benchmark.cells();
        &self.truths[f * n..(f + 1) * n]
    }

    pub fn truth(&self, i: usize) -> &[u8] {
        self.frame_truth(self.obs_index[i] as usize)
    }

    pub fn truth_next(&self, i: usize) -> &[u8] {
        self.frame_truth(self.obs_index[i] as usize + 1)
    }

    pub fn record(&self, i: usize) -> TransitionRecord {
        let f = self.obs_index[i] as usize;
        TransitionRecord {
            obs: self.frame(f).iter().map(|&b| dequantize(b)).collect(),
            action: self.actions[i],
            next_obs: self.frame(f + 1).iter().map(|&b| dequantize(b)).collect(),
            truth: self.frame_truth(f).to_vec(),
            truth_next: self.frame_truth(f + 1).to_vec(),
        }
    }

    /// Dequantized current (or next) observations of `indices`, concatenated.
    pub fn gather<T: dwmr_ndcore::Real>(&self, indices: &[usize], next: bool) -> Vec<T> {
        let n = self.benchmark.frame_len();
        let mut lut = [T::zero(); 256];
        for (b, v) in lut.iter_mut().enumerate() {
            *v = T::lit(b as f64 / 255.0);
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            let f = self.obs_index[i] as usize + next as usize;
            out.extend(self.frame(f).iter().map(|&b| lut[b as usize]));
        }
        out
    }

    fn push_episode(&mut self, ep: &Episode, keep: usize) {
        let base = self.num_frames() as u32;
        for f in &ep.frames[..=keep] {
            self.frames.extend(f.iter().map(|&x| quantize(x)));
        }
        for t in &ep.truths[..=keep] {
            self.truths.extend_from_slice(t);
        }
        for (i, &a) in ep.actions[..keep].iter().enumerate() {
            self.actions.push(a);
            self.obs_index.push(base + i as u32);
        }
    }

    fn validate(&self) -> Result<()> {
        let nf = self.num_frames();
        let bad = self.frames.len() != nf * self.benchmark.frame_len()
            || self.truths.len() != nf * self.benchmark.cells()
            || self.obs_index.len() != self.actions.len()
            || self.obs_index.iter().any(|&f| f as usize + 1 >= nf)
            || self.actions.iter().any(|&a| a > 3);
        if bad {
            return Err(CoreError::Format(format!("split `{}` is internally inconsistent", self.name)));
        }
        Ok(())
    }
}

/// Everything `build_splits` needs.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub benchmark: Benchmark,
    /// Transitions in train / val / test.
    pub sizes: [usize; 3],
    /// Transitions per trajectory (IceSlider episodes are 20 actions).
    pub traj_len: usize,
    pub seeds: [u64; 3],
    pub noise: Option<NoiseSpec>,
    pub digits_per_class: usize,
    pub digit_seed: u64,
    pub rock_density: f64,
    /// Directory searched for MNIST training files.
    pub mnist_dir: Option<PathBuf>,
}

impl DataSpec {
    pub fn paper(benchmark: Benchmark) -> Self {
        let (sizes, traj_len) = match benchmark {
            Benchmark::Puzzle => ([30_000, 6_000, 6_000], 100),
            Benchmark::IceSlider => ([40_000, 10_000, 10_000], 20),
        };
        Self {
            benchmark,
            sizes,
            traj_len,
            seeds: [1, 2, 3],
            noise: None,
            digits_per_class: DEFAULT_DIGITS_PER_CLASS,
            digit_seed: 0xD161_7500,
            rock_density: DEFAULT_ROCK_DENSITY,
            mnist_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub benchmark: Benchmark,
    pub noise: Option<NoiseSpec>,
    pub provenance: Option<DigitProvenance>,
    pub splits: [Split; 3],
}

impl SplitSet {
    pub fn train(&self) -> &Split {
        &self.splits[0]
    }

    pub fn val(&self) -> &Split {
        &self.splits[1]
    }

    pub fn test(&self) -> &Split {
        &self.splits[2]
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn digit_sources(spec: &DataSpec) -> Result<[DigitSource; 3]> {
    if let Some((img_path, lbl_path)) = spec.mnist_dir.as_deref().and_then(find_mnist) {
        let images = parse_idx_images(&fs::read(img_path)?)?;
        let labels = parse_idx_labels(&fs::read(lbl_path)?)?;
        let n = images.count;
        let (a, b) = (n * 5 / 7, n * 6 / 7);
        return Ok([
            idx_digit_source(&images, &labels, 0..a)?,
            idx_digit_source(&images, &labels, a..b)?,
            idx_digit_source(&images, &labels, b..n)?,
        ]);
    }
    let p = spec.digits_per_class as u64;
    Ok([
        synth_glyph_source(spec.digit_seed, 0, spec.digits_per_class)?,
        synth_glyph_source(spec.digit_seed, p, spec.digits_per_class)?,
        synth_glyph_source(spec.digit_seed, 2 * p, spec.digits_per_class)?,
    ])
}

/// Generates train / val / test with distinct seeds and (for the puzzle)
/// disjoint digit pools. Noise is applied once here and stored.
pub fn build_splits(spec: &DataSpec) -> Result<SplitSet> {
    let [s0, s1, s2] = spec.seeds;
    if s0 == s1 || s1 == s2 || s0 == s2 {
        return Err(CoreError::Invalid(format!("split seeds must be distinct, got {:?}", spec.seeds)));
    }
    if spec.traj_len == 0 {
        return Err(CoreError::Invalid("trajectory length must be positive".into()));
    }
    let sources = match spec.benchmark {
        Benchmark::Puzzle => Some(digit_sources(spec)?),
        Benchmark::IceSlider => None,
    };
    let mut splits = Vec::with_capacity(3);
    for s in 0..3 {
        let mut split = Split::empty(SPLIT_NAMES[s], spec.benchmark, spec.seeds[s]);
        let digits = sources.as_ref().map(|src| &src[s]);
        if let Some(d) = digits {
            split.digit_ids = d.exemplar_ids();
        }
        let mut t = 0u64;
        while split.len() < spec.sizes[s] {
            let mut rng = seeding::stream(spec.seeds[s], t);
            let ep = generate_trajectory(spec.benchmark, spec.traj_len, &mut rng, spec.noise, digits, spec.rock_density)?;
            let keep = spec.traj_len.min(spec.sizes[s] - split.len());
            split.push_episode(&ep, keep);
            t += 1;
        }
        splits.push(split);
    }
    Ok(SplitSet {
        benchmark: spec.benchmark,
        noise: spec.noise,
        provenance: sources.as_ref().map(|s| s[0].provenance),
        splits: splits.try_into().expect("three splits"),
    })
}

// ---------------------------------------------------------------------------
// Container

const FORMAT: &str = "dwmr-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub name: String,
    pub seed: u64,
    pub records: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub name: String,
    pub dtype: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub benchmark: Benchmark,
    pub frame_shape: [usize; 3],
    pub layout: String,
    pub cells: usize,
    pub noise: bool,
    pub noise_scale: Option<f64>,
    pub noise_mode: Option<NoiseScale>,
    pub digit_provenance: Option<DigitProvenance>,
    pub splits: Vec<SplitHeader>,
    pub sections: Vec<SectionHeader>,
}

fn section(name: String, dtype: &str, count: usize) -> SectionHeader {
    SectionHeader {
        name,
        dtype: dtype.into(),
        count,
    }
}

pub fn dataset_header(set: &SplitSet) -> DatasetHeader {
    let mut sections = Vec::new();
    for s in &set.splits {
        sections.push(section(format!("{}.frames", s.name), "u8", s.frames.len()));
        sections.push(section(format!("{}.truths", s.name), "u8", s.truths.len()));
        sections.push(section(format!("{}.actions", s.name), "u8", s.actions.len()));
        sections.push(section(format!("{}.obs_index", s.name), "u32", s.obs_index.len()));
        sections.push(section(format!("{}.digit_ids", s.name), "u64", s.digit_ids.len()));
    }
    DatasetHeader {
        format: FORMAT.into(),
        version: VERSION,
        benchmark: set.benchmark,
        frame_shape: set.benchmark.frame_shape(),
        layout: "chw".into(),
        cells: set.benchmark.cells(),
        noise: set.noise.is_some(),
        noise_scale: set.noise.map(|n| n.scale),
        noise_mode: set.noise.map(|n| n.mode),
        digit_provenance: set.provenance,
        splits: set
            .splits
            .iter()
            .map(|s| SplitHeader {
                name: s.name.clone(),
                seed: s.seed,
                records: s.len(),
                frames: s.num_frames(),
            })
            .collect(),
        sections,
    }
}

/// Layout: u32 LE header length, JSON header ending in `\n`, then the
/// sections in header order as raw little-endian values.
pub fn write_dataset<W: Write>(mut w: W, set: &SplitSet) -> Result<()> {
    let mut json = serde_json::to_vec(&dataset_header(set))?;
    json.push(b'\n');
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for s in &set.splits {
        w.write_all(&s.frames)?;
        w.write_all(&s.truths)?;
        w.write_all(&s.actions)?;
        let idx: Vec<u8> = s.obs_index.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&idx)?;
        let ids: Vec<u8> = s.digit_ids.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&ids)?;
    }
    w.flush()?;
    Ok(())
}

fn take<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::Format(format!("dataset truncated in section `{what}`")))?;
    Ok(buf)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<SplitSet> {
    let len = u32::from_le_bytes(take(&mut r, 4, "header length")?.try_into().unwrap()) as usize;
    let json = take(&mut r, len, "header")?;
    if json.last() != Some(&b'\n') {
        return Err(CoreError::Format("dataset header is not newline-terminated".into()));
    }
    let header: DatasetHeader = serde_json::from_slice(&json[..len - 1])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CoreError::Format(format!(
            "unsupported dataset format {} v{}",
            header.format, header.version
        )));
    }
    if header.frame_shape != header.benchmark.frame_shape() || header.splits.len() != 3 {
        return Err(CoreError::Format("dataset header does not match its benchmark".into()));
    }
    let noise = match (header.noise, header.noise_scale, header.noise_mode) {
        (false, _, _) => None,
        (true, Some(scale), Some(mode)) => Some(NoiseSpec { scale, mode }),
        _ => return Err(CoreError::Format("noise flag set without parameters".into())),
    };
    let mut sections = header.sections.iter();
    let mut next_section = |expect: &str, dtype: &str| -> Result<usize> {
        let s = sections
            .next()
            .ok_or_else(|| CoreError::Format(format!("missing section `{expect}`")))?;
        if s.name != expect || s.dtype != dtype {
            return Err(CoreError::Format(format!(
                "expected section `{expect}` ({dtype}), found `{}` ({})",
                s.name, s.dtype
            )));
        }
        Ok(s.count)
    };
    let mut splits = Vec::with_capacity(3);
    for sh in &header.splits {
        let mut s = Split::empty(&sh.name, header.benchmark, sh.seed);
        let n = next_section(&format!("{}.frames", sh.name), "u8")?;
        s.frames = take(&mut r, n, "frames")?;
        let n = next_section(&format!("{}.truths", sh.name), "u8")?;
        s.truths = take(&mut r, n, "truths")?;
        let n = next_section(&format!("{}.actions", sh.name), "u8")?;
        s.actions = take(&mut r, n, "actions")?;
        let n = next_section(&format!("{}.obs_index", sh.name), "u32")?;
        s.obs_index = take(&mut r, n * 4, "obs_index")?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n = next_section(&format!("{}.digit_ids", sh.name), "u64")?;
        s.digit_ids = take(&mut r, n * 8, "digit_ids")?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        s.validate()?;
        if s.len() != sh.records || s.num_frames() != sh.frames {
            return Err(CoreError::Format(format!("split `{}` counts disagree with header", sh.name)));
        }
        splits.push(s);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CoreError::Format(format!("{} trailing bytes after last section", rest.len())));
    }
    Ok(SplitSet {
        benchmark: header.benchmark,
        noise,
        provenance: header.digit_provenance,
        splits: splits.try_into().expect("three splits"),
    })
}

pub fn save_dataset(path: &Path, set: &SplitSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_dataset(std::io::BufWriter::new(fs::File::create(path)?), set)
}

pub fn load_dataset(path: &Path) -> Result<SplitSet> {
    read_dataset(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(b: Benchmark) -> DataSpec {
        let mut spec = DataSpec::paper(b);
        spec.sizes = [45, 12, 12];
        spec.traj_len = if b == Benchmark::Puzzle { 10 } else { 20 };
        spec.digits_per_class = 5;
        spec
    }

    #[test]
    fn idx_magics() {
        assert_eq!(IDX_IMAGES_MAGIC, 2051);
        assert_eq!(IDX_LABELS_MAGIC, 2049);
    }

    #[test]
    fn idx_round_trip_and_truncation() {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16],
        };
        let bytes = serialize_idx_images(&images);
        assert_eq!(parse_idx_images(&bytes).unwrap(), images);
        assert!(parse_idx_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx_labels(&bytes).is_err());
        let labels = serialize_idx_labels(&[3, 1]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![3, 1]);
        assert!(parse_idx_labels(&labels[..9]).is_err());
        assert_eq!(images.image(0)[1], 1.0);
    }

    #[test]
    fn default_pool_size_and_range() {
        let src = synth_glyph_source(1, 0, DEFAULT_DIGITS_PER_CLASS).unwrap();
        for c in 1..=8 {
            let pool = src.pool(c).unwrap();
            assert_eq!(pool.len(), 200);
            assert!(pool.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(src.pool(0).is_err() && src.pool(9).is_err());
    }

    #[test]
    fn glyphs_match_their_own_template() {
        let src = synth_glyph_source(3, 0, 30).unwrap();
        let masks: Vec<Vec<f32>> = (1..=8).map(glyph_mask).collect();
        let score = |g: &[f32], m: &[f32]| -> f32 {
            // best normalized overlap over the jitter range
            let mut best = f32::MIN;
            for dy in -2i32..=2 {
                for dx in -2i32..=2 {
                    let (mut dot, mut norm) = (0.0, 0.0);
                    for y in 0..28i32 {
                        for x in 0..28i32 {
                            let (sy, sx) = (y - dy, x - dx);
                            if (0..28).contains(&sy) && (0..28).contains(&sx) {
                                let mv = m[(sy * 28 + sx) as usize];
                                dot += g[(y * 28 + x) as usize] * mv;
                                norm += mv;
                            }
                        }
                    }
                    let gs: f32 = g.iter().sum();
                    best = best.max(dot / (norm.sqrt() * gs.sqrt() + 1e-6));
                }
            }
            best
        };
        for c in 1..=8u8 {
            for g in src.pool(c).unwrap() {
                let scores: Vec<f32> = masks.iter().map(|m| score(g, m)).collect();
                let arg = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(arg + 1, c as usize, "class {c}: {scores:?}");
            }
        }
    }

    #[test]
    fn trajectories_chain() {
        let digits = synth_glyph_source(0, 0, 5).unwrap();
        let mut rng = seeding::stream(9, 0);
        let ep = generate_trajectory(Benchmark::Puzzle, 30, &mut rng, None, Some(&digits), 0.2).unwrap();
        let recs = ep.records();
        assert_eq!(recs.len(), 30);
        for w in recs.windows(2) {
            assert_eq!(w[0].truth_next, w[1].truth);
        }
        for r in &recs {
            assert_eq!(resimulate(Benchmark::Puzzle, &r.truth, r.action), Some(r.truth_next.clone()));
        }
        let mut rng = seeding::stream(9, 1);
        let ep = generate_trajectory(Benchmark::IceSlider, 20, &mut rng, None, None, 0.2).unwrap();
        assert_eq!(ep.records().len(), 20);
    }

    #[test]
    fn splits_have_sizes_and_disjoint_pools() {
        let set = build_splits(&small_spec(Benchmark::Puzzle)).unwrap();
        assert_eq!(set.splits.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![45, 12, 12]);
        let a: std::collections::HashSet<_> = set.train().digit_ids.iter().collect();
        assert!(set.val().digit_ids.iter().all(|i| !a.contains(i)));
        assert!(set.test().digit_ids.iter().all(|i| !a.contains(i)));
        let mut bad = small_spec(Benchmark::Puzzle);
        bad.seeds = [1, 1, 2];
        assert!(build_splits(&bad).is_err());
    }

    #[test]
    fn container_round_trip() {
        let mut spec = small_spec(Benchmark::IceSlider);
        spec.noise = Some(NoiseSpec::PAPER);
        let set = build_splits(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &set).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, set);
        let mut again = Vec::new();
        write_dataset(&mut again, &back).unwrap();
        assert_eq!(again, buf);
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dataset(&extra[..]).is_err());
    }

    #[test]
    fn quantization_error_bound() {
        for i in 0..=10_000 {
            let x = i as f32 / 10_000.0;
            assert!((x - dequantize(quantize(x))).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }
}
