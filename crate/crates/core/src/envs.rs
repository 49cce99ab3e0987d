//! Deterministic simulators and pixel renderers for the 8-puzzle and
//! IceSlider benchmarks.

use std::collections::VecDeque;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datasets::DigitSource;
use crate::error::{CoreError, Result};

/// Moves, with the fixed one-hot order up, down, left, right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    /// (row, col) displacement.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }

    pub fn inverse(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Action {
        Self::ALL[rng.random_range(0..4)]
    }
}

/// The two benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Puzzle,
    IceSlider,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Puzzle => "puzzle",
            Benchmark::IceSlider => "ice_slider",
        }
    }

    pub fn parse(s: &str) -> Option<Benchmark> {
        match s {
            "puzzle" | "mnist_puzzle" | "8puzzle" => Some(Benchmark::Puzzle),
            "ice_slider" | "iceslider" | "ice" => Some(Benchmark::IceSlider),
            _ => None,
        }
    }

    /// Observation shape as (channels, height, width).
    pub fn frame_shape(self) -> [usize; 3] {
        match self {
            Benchmark::Puzzle => [1, PUZZLE_IMAGE, PUZZLE_IMAGE],
            Benchmark::IceSlider => [3, ICE_IMAGE, ICE_IMAGE],
        }
    }

    pub fn frame_len(self) -> usize {
        self.frame_shape().iter().product()
    }

    /// Number of probed grid cells.
    pub fn cells(self) -> usize {
        match self {
            Benchmark::Puzzle => PUZZLE_CELLS,
            Benchmark::IceSlider => ICE_SIDE * ICE_SIDE,
        }
    }

    /// Classes per probed cell.
    pub fn classes(self) -> usize {
        match self {
            Benchmark::Puzzle => 9,
            Benchmark::IceSlider => 4,
        }
    }
}

// ---------------------------------------------------------------------------
// 8-puzzle

pub const PUZZLE_SIDE: usize = 3;
pub const PUZZLE_CELLS: usize = 9;
pub const PUZZLE_TILE_PX: usize = 28;
pub const PUZZLE_IMAGE: usize = 88;

/// Row-major 3×3 grid of tile ids; 0 is the blank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PuzzleState {
    pub grid: [u8; 9],
}

impl PuzzleState {
    pub const GOAL: PuzzleState = PuzzleState {
        grid: [0, 1, 2, 3, 4, 5, 6, 7, 8],
    };

    pub fn new(grid: [u8; 9]) -> Result<Self> {
        let mut seen = [false; 9];
        for &t in &grid {
            if t > 8 || seen[t as usize] {
                return Err(CoreError::Invalid(format!("not a permutation of 0..8: {grid:?}")));
            }
            seen[t as usize] = true;
        }
        Ok(Self { grid })
    }

    pub fn blank(&self) -> usize {
        self.grid.iter().position(|&t| t == 0).expect("valid state has a blank")
    }
}

/// Moves the blank one cell in the action direction; `None` when it would
/// leave the grid.
pub fn puzzle_step(state: &PuzzleState, action: Action) -> Option<PuzzleState> {
    let b = state.blank();
    let (r, c) = ((b / 3) as isize, (b % 3) as isize);
    let (dr, dc) = action.delta();
    let (nr, nc) = (r + dr, c + dc);
    if !(0..3).contains(&nr) || !(0..3).contains(&nc) {
        return None;
    }
    let target = (nr * 3 + nc) as usize;
    let mut next = *state;
    next.grid.swap(b, target);
    Some(next)
}

/// Inversion-parity rule: even number of inversions among tiles 1–8 read
/// row-major, blank excluded.
pub fn puzzle_is_solvable(state: &PuzzleState) -> bool {
    let tiles: Vec<u8> = state.grid.iter().copied().filter(|&t| t != 0).collect();
    let mut inversions = 0;
    for i in 0..tiles.len() {
        for j in i + 1..tiles.len() {
            if tiles[i] > tiles[j] {
                inversions += 1;
            }
        }
    }
    inversions % 2 == 0
}

/// Uniform over solvable permutations: shuffle, then fix parity by swapping
/// two non-blank tiles.
pub fn sample_solvable_state<R: Rng + ?Sized>(rng: &mut R) -> PuzzleState {
    let mut grid = PuzzleState::GOAL.grid;
    grid.shuffle(rng);
    let mut state = PuzzleState { grid };
    if !puzzle_is_solvable(&state) {
        let nonblank: Vec<usize> = (0..9).filter(|&i| grid[i] != 0).take(2).collect();
        state.grid.swap(nonblank[0], nonblank[1]);
    }
    state
}

/// Pixel offset of cell `i` along one axis.
pub fn puzzle_cell_origin(i: usize) -> usize {
    1 + i * (PUZZLE_TILE_PX + 1)
}

/// Renders an 88×88 single-channel image with 1-px black gutters, a fresh
/// digit exemplar for every tile and a black blank cell.
pub fn render_puzzle<R: Rng + ?Sized>(
    state: &PuzzleState,
    digits: &DigitSource,
    rng: &mut R,
    noise: Option<NoiseSpec>,
) -> Result<Vec<f32>> {
    let mut img = vec![0.0f32; PUZZLE_IMAGE * PUZZLE_IMAGE];
    for (cell, &tile) in state.grid.iter().enumerate() {
        if tile == 0 {
            continue;
        }
        let glyph = digits.sample(tile, rng)?;
        let (oy, ox) = (puzzle_cell_origin(cell / 3), puzzle_cell_origin(cell % 3));
        for y in 0..PUZZLE_TILE_PX {
            let row = (oy + y) * PUZZLE_IMAGE + ox;
            img[row..row + PUZZLE_TILE_PX]
                .copy_from_slice(&glyph[y * PUZZLE_TILE_PX..(y + 1) * PUZZLE_TILE_PX]);
        }
    }
    if let Some(spec) = noise {
        add_noise(&mut img, spec, rng);
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// IceSlider

pub const ICE_SIDE: usize = 8;
pub const ICE_PATCH: usize = 8;
pub const ICE_IMAGE: usize = ICE_SIDE * ICE_PATCH;
pub const DEFAULT_ROCK_DENSITY: f64 = 0.2;
const LEVEL_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IceCell {
    Ice,
    Rock,
    Goal,
}

/// Probe classes per cell; the agent label overrides the cell underneath.
pub const ICE_CLASS_ICE: u8 = 0;
pub const ICE_CLASS_ROCK: u8 = 1;
pub const ICE_CLASS_AGENT: u8 = 2;
pub const ICE_CLASS_GOAL: u8 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IceBoard {
    pub cells: [[IceCell; ICE_SIDE]; ICE_SIDE],
    pub agent: (usize, usize),
}

impl IceBoard {
    /// Board with only ice, a goal and the agent.
    pub fn empty(agent: (usize, usize), goal: (usize, usize)) -> Self {
        let mut cells = [[IceCell::Ice; ICE_SIDE]; ICE_SIDE];
        cells[goal.0][goal.1] = IceCell::Goal;
        Self { cells, agent }
    }

    pub fn goal(&self) -> Option<(usize, usize)> {
        (0..ICE_SIDE)
            .flat_map(|r| (0..ICE_SIDE).map(move |c| (r, c)))
            .find(|&(r, c)| self.cells[r][c] == IceCell::Goal)
    }

    pub fn labels(&self) -> [u8; ICE_SIDE * ICE_SIDE] {
        let mut out = [0u8; ICE_SIDE * ICE_SIDE];
        for r in 0..ICE_SIDE {
            for c in 0..ICE_SIDE {
                out[r * ICE_SIDE + c] = match self.cells[r][c] {
                    IceCell::Ice => ICE_CLASS_ICE,
                    IceCell::Rock => ICE_CLASS_ROCK,
                    IceCell::Goal => ICE_CLASS_GOAL,
                };
            }
        }
        out[self.agent.0 * ICE_SIDE + self.agent.1] = ICE_CLASS_AGENT;
        out
    }
}

/// Slides the agent until the next cell is a rock or off the board.
pub fn ice_step(board: &IceBoard, action: Action) -> IceBoard {
    let (dr, dc) = action.delta();
    let (mut r, mut c) = (board.agent.0 as isize, board.agent.1 as isize);
    loop {
        let (nr, nc) = (r + dr, c + dc);
        if !(0..ICE_SIDE as isize).contains(&nr)
            || !(0..ICE_SIDE as isize).contains(&nc)
            || board.cells[nr as usize][nc as usize] == IceCell::Rock
        {
            break;
        }
        r = nr;
        c = nc;
    }
    IceBoard {
        cells: board.cells,
        agent: (r as usize, c as usize),
    }
}

/// BFS over agent positions under slide dynamics.
pub fn ice_goal_reachable(board: &IceBoard) -> bool {
    let Some(goal) = board.goal() else {
        return false;
    };
    let mut seen = [[false; ICE_SIDE]; ICE_SIDE];
    let mut queue = VecDeque::from([board.agent]);
    seen[board.agent.0][board.agent.1] = true;
    while let Some(pos) = queue.pop_front() {
        if pos == goal {
            return true;
        }
        let b = IceBoard {
            cells: board.cells,
            agent: pos,
        };
        for a in Action::ALL {
            let n = ice_step(&b, a).agent;
            if !seen[n.0][n.1] {
                seen[n.0][n.1] = true;
                queue.push_back(n);
            }
        }
    }
    false
}

/// Random level: each cell independently a rock with probability
/// `rock_density`, agent and goal on distinct free cells, goal reachable.
pub fn generate_ice_level<R: Rng + ?Sized>(rng: &mut R, rock_density: f64) -> Result<IceBoard> {
    if !(0.0..1.0).contains(&rock_density) {
        return Err(CoreError::Invalid(format!("rock density {rock_density} outside [0, 1)")));
    }
    for _ in 0..LEVEL_RETRIES {
        let mut cells = [[IceCell::Ice; ICE_SIDE]; ICE_SIDE];
        for row in cells.iter_mut() {
            for cell in row.iter_mut() {
                if rng.random_bool(rock_density) {
                    *cell = IceCell::Rock;
                }
            }
        }
        let free: Vec<(usize, usize)> = (0..ICE_SIDE)
            .flat_map(|r| (0..ICE_SIDE).map(move |c| (r, c)))
            .filter(|&(r, c)| cells[r][c] == IceCell::Ice)
            .collect();
        if free.len() < 2 {
            continue;
        }
        let picks: Vec<_> = free.choose_multiple(rng, 2).copied().collect();
        let (agent, goal) = (picks[0], picks[1]);
        cells[goal.0][goal.1] = IceCell::Goal;
        let board = IceBoard { cells, agent };
        if ice_goal_reachable(&board) {
            return Ok(board);
        }
    }
    Err(CoreError::Generation(format!(
        "no solvable IceSlider level after {LEVEL_RETRIES} attempts"
    )))
}

const ICE_RGB: [f32; 3] = [1.0, 1.0, 1.0];
const ROCK_RGB: [f32; 3] = [0.3, 0.3, 0.3];
const GOAL_RGB: [f32; 3] = [0.0, 0.8, 0.0];
const AGENT_RGB: [f32; 3] = [0.9, 0.0, 0.0];

fn paint(img: &mut [f32], r: usize, c: usize, inset: usize, rgb: [f32; 3]) {
    for (ch, &v) in rgb.iter().enumerate() {
        let plane = &mut img[ch * ICE_IMAGE * ICE_IMAGE..(ch + 1) * ICE_IMAGE * ICE_IMAGE];
        for y in inset..ICE_PATCH - inset {
            let row = (r * ICE_PATCH + y) * ICE_IMAGE + c * ICE_PATCH;
            plane[row + inset..row + ICE_PATCH - inset].fill(v);
        }
    }
}

/// 64×64 RGB image in channel-major (C, H, W) order. The agent is a 6×6
/// square drawn over its cell's patch.
pub fn render_ice<R: Rng + ?Sized>(board: &IceBoard, noise: Option<NoiseSpec>, rng: &mut R) -> Vec<f32> {
    let mut img = vec![0.0f32; 3 * ICE_IMAGE * ICE_IMAGE];
    for r in 0..ICE_SIDE {
        for c in 0..ICE_SIDE {
            let rgb = match board.cells[r][c] {
                IceCell::Ice => ICE_RGB,
                IceCell::Rock => ROCK_RGB,
                IceCell::Goal => GOAL_RGB,
            };
            paint(&mut img, r, c, 0, rgb);
        }
    }
    paint(&mut img, board.agent.0, board.agent.1, 1, AGENT_RGB);
    if let Some(spec) = noise {
        add_noise(&mut img, spec, rng);
    }
    img
}

// ---------------------------------------------------------------------------
// Noise

/// How the second parameter of N(0, 0.5) is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    Std,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub scale: f64,
    pub mode: NoiseScale,
}

impl NoiseSpec {
    pub const PAPER: NoiseSpec = NoiseSpec {
        scale: 0.5,
        mode: NoiseScale::Std,
    };

    pub fn std(&self) -> f64 {
        match self.mode {
            NoiseScale::Std => self.scale,
            NoiseScale::Variance => self.scale.sqrt(),
        }
    }
}

/// Adds i.i.d. Gaussian noise to every pixel and clips to [0, 1].
pub fn add_noise<R: Rng + ?Sized>(img: &mut [f32], spec: NoiseSpec, rng: &mut R) {
    let normal = Normal::new(0.0, spec.std()).expect("finite std");
    for v in img.iter_mut() {
        let x = *v as f64 + normal.sample(rng);
        *v = x.clamp(0.0, 1.0) as f32;
    }
}
