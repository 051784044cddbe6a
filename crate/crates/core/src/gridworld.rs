//! Turtle grid-world program synthesis benchmark.
//!
//! An instance is five (start, stop) pairs of 8x8 worlds plus the program
//! that maps every start to its stop. Sequences are 662 tokens: ten grids of
//! 64 row-major cell tokens (start, stop, start, stop, ..), the program,
//! EOS, then PAD. The turtle's cell is a single token carrying both its
//! direction and the underlying score.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch_padded, Batch};
use crate::error::{Error, Result};
use crate::inference::{greedy, NextTokenLm};
use crate::training::BatchSource;

pub const SIZE: usize = 8;
pub const CELLS: usize = SIZE * SIZE;
pub const PAIRS: usize = 5;
pub const MAX_SCORE: u8 = 10;
pub const MAX_PROGRAM: usize = 10;
pub const GRID_TOKENS: usize = 2 * PAIRS * CELLS;
pub const SEQ_LEN: usize = 662;

pub const OBST: u32 = 0;
const SCORE_BASE: u32 = 1;
const TURTLE_BASE: u32 = SCORE_BASE + 11;
pub const MOVE: u32 = TURTLE_BASE + 44;
pub const LEFT: u32 = MOVE + 1;
pub const RIGHT: u32 = MOVE + 2;
pub const MARK: u32 = MOVE + 3;
pub const UNMARK: u32 = MOVE + 4;
pub const EOS: u32 = MOVE + 5;
pub const PAD: u32 = MOVE + 6;
pub const VOCAB: usize = PAD as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    Obstruction,
    Score(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    fn index(self) -> u32 {
        self as u32
    }

    pub fn left(self) -> Dir {
        Dir::ALL[(self as usize + 3) % 4]
    }

    pub fn right(self) -> Dir {
        Dir::ALL[(self as usize + 1) % 4]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Dir::N => (-1, 0),
            Dir::E => (0, 1),
            Dir::S => (1, 0),
            Dir::W => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Instruction {
    Move,
    Left,
    Right,
    Mark,
    Unmark,
}

impl Instruction {
    pub const ALL: [Instruction; 5] = [
        Instruction::Move,
        Instruction::Left,
        Instruction::Right,
        Instruction::Mark,
        Instruction::Unmark,
    ];

    pub fn token(self) -> u32 {
        MOVE + self as u32
    }

    pub fn from_token(t: u32) -> Option<Self> {
        (MOVE..=UNMARK)
            .contains(&t)
            .then(|| Self::ALL[(t - MOVE) as usize])
    }

    /// One-letter form: `M`, `L`, `R`, `+` (mark), `-` (unmark).
    pub fn letter(self) -> char {
        ['M', 'L', 'R', '+', '-'][self as usize]
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.letter() == c)
    }
}

pub type Program = Vec<Instruction>;

pub fn program_string(p: &[Instruction]) -> String {
    p.iter().map(|i| i.letter()).collect()
}

pub fn parse_program(s: &str) -> Result<Program> {
    s.chars()
        .enumerate()
        .map(|(i, c)| {
            Instruction::from_letter(c)
                .ok_or_else(|| Error::Config(format!("bad instruction {c:?} at {i}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct World {
    pub grid: [[Cell; SIZE]; SIZE],
    pub pos: (usize, usize),
    pub dir: Dir,
}

impl World {
    /// All-zero interior inside an obstruction border.
    pub fn empty(pos: (usize, usize), dir: Dir) -> Self {
        let mut grid = [[Cell::Score(0); SIZE]; SIZE];
        for (r, row) in grid.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                if r == 0 || c == 0 || r == SIZE - 1 || c == SIZE - 1 {
                    *cell = Cell::Obstruction;
                }
            }
        }
        Self { grid, pos, dir }
    }

    pub fn is_valid(&self) -> bool {
        let border = (0..SIZE).all(|i| {
            [
                self.grid[0][i],
                self.grid[SIZE - 1][i],
                self.grid[i][0],
                self.grid[i][SIZE - 1],
            ]
            .iter()
            .all(|&c| c == Cell::Obstruction)
        });
        let scores = self.grid.iter().flatten().all(|c| match c {
            Cell::Score(s) => *s <= MAX_SCORE,
            Cell::Obstruction => true,
        });
        let (r, c) = self.pos;
        border && scores && r < SIZE && c < SIZE && self.grid[r][c] != Cell::Obstruction
    }

    /// Two characters per cell: `##` obstruction, right-aligned score, or a
    /// turtle arrow (`^ > v <`) followed by the score in hex.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in 0..SIZE {
            for c in 0..SIZE {
                let cell = self.grid[r][c];
                if (r, c) == self.pos {
                    let arrow = ['^', '>', 'v', '<'][self.dir as usize];
                    let v = if let Cell::Score(v) = cell { v } else { 0 };
                    s.push(arrow);
                    s.push(core::char::from_digit(v as u32, 16).unwrap_or('?'));
                } else {
                    match cell {
                        Cell::Obstruction => s.push_str("##"),
                        Cell::Score(v) => s.push_str(&format!("{v:>2}")),
                    }
                }
                if c + 1 < SIZE {
                    s.push(' ');
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Execute one instruction. Cells other than the turtle's never change.
pub fn step(w: &World, i: Instruction) -> World {
    let mut out = w.clone();
    let (r, c) = w.pos;
    match i {
        Instruction::Move => {
            let (dr, dc) = w.dir.delta();
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if (0..SIZE as isize).contains(&nr) && (0..SIZE as isize).contains(&nc) {
                let (nr, nc) = (nr as usize, nc as usize);
                if w.grid[nr][nc] != Cell::Obstruction {
                    out.pos = (nr, nc);
                }
            }
        }
        Instruction::Left => out.dir = w.dir.left(),
        Instruction::Right => out.dir = w.dir.right(),
        Instruction::Mark | Instruction::Unmark => {
            if let Cell::Score(s) = w.grid[r][c] {
                let v = if i == Instruction::Mark {
                    (s + 1).min(MAX_SCORE)
                } else {
                    s.saturating_sub(1)
                };
                out.grid[r][c] = Cell::Score(v);
            }
        }
    }
    out
}

pub fn run(w: &World, p: &[Instruction]) -> World {
    p.iter().fold(w.clone(), |acc, &i| step(&acc, i))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    /// Probability that an interior cell is an obstruction.
    pub p_obstruction: f64,
    /// Probability that a free cell scores 0; otherwise uniform in 1..=10.
    pub p_zero: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            p_obstruction: 0.15,
            p_zero: 0.7,
        }
    }
}

const WORLD_RETRIES: usize = 100;

pub fn random_world<R: Rng + ?Sized>(rng: &mut R, params: &WorldParams) -> Result<World> {
    for _ in 0..WORLD_RETRIES {
        let mut w = World::empty((1, 1), Dir::N);
        let mut free = Vec::new();
        for r in 1..SIZE - 1 {
            for c in 1..SIZE - 1 {
                w.grid[r][c] = if rng.gen_bool(params.p_obstruction.clamp(0.0, 1.0)) {
                    Cell::Obstruction
                } else {
                    free.push((r, c));
                    if rng.gen_bool(params.p_zero.clamp(0.0, 1.0)) {
                        Cell::Score(0)
                    } else {
                        Cell::Score(rng.gen_range(1..=MAX_SCORE))
                    }
                };
            }
        }
        if let Some(&pos) = free.choose(rng) {
            w.pos = pos;
            w.dir = Dir::ALL[rng.gen_range(0..4)];
            return Ok(w);
        }
    }
    Err(Error::Generation(format!(
        "no free cell after {WORLD_RETRIES} attempts (p_obstruction {})",
        params.p_obstruction
    )))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridInstance {
    pub pairs: Vec<(World, World)>,
    pub program: Program,
}

impl GridInstance {
    pub fn is_consistent(&self) -> bool {
        self.pairs.len() == PAIRS && self.pairs.iter().all(|(s, e)| run(s, &self.program) == *e)
    }

    /// Whether `p` maps every start to its stop.
    pub fn accepts(&self, p: &[Instruction]) -> bool {
        self.pairs.iter().all(|(s, e)| run(s, p) == *e)
    }
}

fn check_range(range: (usize, usize)) -> Result<()> {
    if range.0 == 0 || range.0 > range.1 || range.1 > MAX_PROGRAM {
        return Err(Error::Config(format!(
            "program length range {range:?} not within 1..={MAX_PROGRAM}"
        )));
    }
    Ok(())
}

pub fn random_program<R: Rng + ?Sized>(rng: &mut R, len_range: (usize, usize)) -> Program {
    let len = rng.gen_range(len_range.0..=len_range.1);
    (0..len)
        .map(|_| Instruction::ALL[rng.gen_range(0..5)])
        .collect()
}

fn instance_for<R: Rng + ?Sized>(
    rng: &mut R,
    program: Program,
    params: &WorldParams,
) -> Result<GridInstance> {
    let pairs = (0..PAIRS)
        .map(|_| {
            let s = random_world(rng, params)?;
            let e = run(&s, &program);
            Ok((s, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridInstance { pairs, program })
}

pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    len_range: (usize, usize),
    params: &WorldParams,
) -> Result<GridInstance> {
    check_range(len_range)?;
    let program = random_program(rng, len_range);
    instance_for(rng, program, params)
}

/// Number of distinct programs with lengths in `range`.
pub fn program_capacity(range: (usize, usize)) -> u128 {
    (range.0..=range.1).map(|l| 5u128.pow(l as u32)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub len_train: (usize, usize),
    pub len_test: (usize, usize),
    pub world: WorldParams,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_train: 50_000,
            n_test: 1_000,
            seed: 0,
            len_train: (6, 10),
            len_test: (1, 10),
            world: WorldParams::default(),
        }
    }
}

fn unique_instances<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    range: (usize, usize),
    params: &WorldParams,
    seen: &mut BTreeSet<Program>,
) -> Result<Vec<GridInstance>> {
    let mut out = Vec::with_capacity(n);
    // generous bound; capacity was checked, so this only trips on bad luck
    let mut budget = 1000usize.saturating_mul(n.max(1)).saturating_add(1_000_000);
    while out.len() < n {
        if budget == 0 {
            return Err(Error::Generation(format!(
                "could not draw {n} unique programs in {range:?}"
            )));
        }
        budget -= 1;
        let p = random_program(rng, range);
        if seen.insert(p.clone()) {
            out.push(instance_for(rng, p, params)?);
        }
    }
    Ok(out)
}

/// Train and test sets whose programs are pairwise distinct across both.
pub fn generate_dataset(p: &DatasetParams) -> Result<(Vec<GridInstance>, Vec<GridInstance>)> {
    check_range(p.len_train)?;
    check_range(p.len_test)?;
    let cap_train = program_capacity(p.len_train);
    if p.n_train as u128 > cap_train {
        return Err(Error::Capacity {
            requested: p.n_train as u128,
            available: cap_train,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut seen = BTreeSet::new();
    let train = unique_instances(&mut rng, p.n_train, p.len_train, &p.world, &mut seen)?;
    let used = seen
        .iter()
        .filter(|q| (p.len_test.0..=p.len_test.1).contains(&q.len()))
        .count() as u128;
    let cap_test = program_capacity(p.len_test) - used;
    if p.n_test as u128 > cap_test {
        return Err(Error::Capacity {
            requested: p.n_test as u128,
            available: cap_test,
        });
    }
    let test = unique_instances(&mut rng, p.n_test, p.len_test, &p.world, &mut seen)?;
    Ok((train, test))
}

pub fn cell_token(w: &World, r: usize, c: usize) -> u32 {
    match w.grid[r][c] {
        Cell::Obstruction => OBST,
        Cell::Score(s) if (r, c) == w.pos => TURTLE_BASE + w.dir.index() * 11 + s as u32,
        Cell::Score(s) => SCORE_BASE + s as u32,
    }
}

pub fn encode_world(w: &World) -> Vec<u32> {
    (0..CELLS)
        .map(|i| cell_token(w, i / SIZE, i % SIZE))
        .collect()
}

/// Inverse of `encode_world` for exactly one turtle token.
pub fn decode_world(tokens: &[u32]) -> Result<World> {
    if tokens.len() != CELLS {
        return Err(Error::shape("decode_world", &[tokens.len()], &[CELLS]));
    }
    let mut w = World::empty((0, 0), Dir::N);
    let mut turtle = None;
    for (i, &t) in tokens.iter().enumerate() {
        let (r, c) = (i / SIZE, i % SIZE);
        w.grid[r][c] = match t {
            OBST => Cell::Obstruction,
            t if (SCORE_BASE..TURTLE_BASE).contains(&t) => Cell::Score((t - SCORE_BASE) as u8),
            t if (TURTLE_BASE..MOVE).contains(&t) && turtle.is_none() => {
                let k = t - TURTLE_BASE;
                turtle = Some(((r, c), Dir::ALL[(k / 11) as usize]));
                Cell::Score((k % 11) as u8)
            }
            _ => {
                return Err(Error::Decode {
                    position: i,
                    token: t,
                })
            }
        };
    }
    let (pos, dir) = turtle.ok_or(Error::Decode {
        position: CELLS,
        token: PAD,
    })?;
    w.pos = pos;
    w.dir = dir;
    Ok(w)
}

/// The 640 grid tokens that serve as the generation prompt.
pub fn encode_prompt(inst: &GridInstance) -> Vec<u32> {
    let mut out = Vec::with_capacity(GRID_TOKENS);
    for (s, e) in &inst.pairs {
        out.extend(encode_world(s));
        out.extend(encode_world(e));
    }
    out
}

pub fn encode_instance(inst: &GridInstance) -> Vec<u32> {
    let mut out = encode_prompt(inst);
    out.extend(inst.program.iter().map(|i| i.token()));
    out.push(EOS);
    out.resize(SEQ_LEN, PAD);
    out
}

/// Inverse of `encode_instance`. Trailing slots after EOS must be PAD.
pub fn decode_instance(ids: &[u32]) -> Result<GridInstance> {
    if ids.len() != SEQ_LEN {
        return Err(Error::shape("decode_instance", &[ids.len()], &[SEQ_LEN]));
    }
    let pairs = ids[..GRID_TOKENS]
        .chunks(2 * CELLS)
        .enumerate()
        .map(|(i, c)| {
            let at = |e: Error, off: usize| match e {
                Error::Decode { position, token } => Error::Decode {
                    position: position + off,
                    token,
                },
                other => other,
            };
            let off = i * 2 * CELLS;
            let start = decode_world(&c[..CELLS]).map_err(|e| at(e, off))?;
            let stop = decode_world(&c[CELLS..]).map_err(|e| at(e, off + CELLS))?;
            Ok((start, stop))
        })
        .collect::<Result<Vec<_>>>()?;
    let program = decode_program(ids)?;
    let tail = GRID_TOKENS + program.len() + 1;
    if let Some(i) = ids[tail..].iter().position(|&t| t != PAD) {
        return Err(Error::Decode {
            position: tail + i,
            token: ids[tail + i],
        });
    }
    Ok(GridInstance { pairs, program })
}

/// Instructions from the program region `ids[640..]` up to the first EOS.
pub fn decode_program(ids: &[u32]) -> Result<Program> {
    decode_generated(ids.get(GRID_TOKENS..).unwrap_or(&[])).map_err(|e| match e {
        Error::Decode { position, token } => Error::Decode {
            position: position + GRID_TOKENS,
            token,
        },
        other => other,
    })
}

/// Parse a generated program region: 1..=10 instructions then EOS. Error
/// positions are relative to the region start.
pub fn decode_generated(region: &[u32]) -> Result<Program> {
    let mut prog = Vec::new();
    for (i, &t) in region.iter().enumerate() {
        if t == EOS {
            if prog.is_empty() {
                return Err(Error::Decode {
                    position: i,
                    token: t,
                });
            }
            return Ok(prog);
        }
        match Instruction::from_token(t) {
            Some(ins) if prog.len() < MAX_PROGRAM => prog.push(ins),
            _ => {
                return Err(Error::Decode {
                    position: i,
                    token: t,
                })
            }
        }
    }
    Err(Error::Decode {
        position: region.len(),
        token: PAD,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LengthStats {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub fraction_correct: f64,
    pub fraction_unique: f64,
    /// Indexed by ground-truth program length (index 0 unused).
    pub per_length: Vec<LengthStats>,
}

/// Greedy-decode a program for `inst` (up to 10 instructions plus EOS).
pub fn generate_program<M: NextTokenLm + ?Sized>(
    model: &M,
    inst: &GridInstance,
) -> Result<Vec<u32>> {
    greedy(model, &encode_prompt(inst), MAX_PROGRAM + 1, EOS)
}

/// Semantic correctness and uniqueness of greedily generated programs.
pub fn evaluate<M: NextTokenLm + ?Sized>(model: &M, test: &[GridInstance]) -> Result<EvalReport> {
    let outputs = test
        .iter()
        .map(|inst| generate_program(model, inst))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_outputs(test, &outputs))
}

/// Metrics for already generated program regions, one per instance.
pub fn score_outputs(test: &[GridInstance], outputs: &[Vec<u32>]) -> EvalReport {
    let mut per_length = alloc::vec![LengthStats::default(); MAX_PROGRAM + 1];
    let mut correct = 0;
    for (inst, out) in test.iter().zip(outputs) {
        let ok = decode_generated(out)
            .map(|p| inst.accepts(&p))
            .unwrap_or(false);
        let s = &mut per_length[inst.program.len().min(MAX_PROGRAM)];
        s.total += 1;
        if ok {
            s.correct += 1;
            correct += 1;
        }
    }
    let distinct: BTreeSet<&Vec<u32>> = outputs.iter().collect();
    let n = test.len();
    let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    EvalReport {
        n,
        fraction_correct: frac(correct),
        fraction_unique: frac(distinct.len()),
        per_length,
    }
}

/// Which next-token targets contribute to the grid training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossRegion {
    /// Every non-PAD target (grids, program and EOS).
    Full,
    /// Only program and EOS targets.
    Program,
}

impl LossRegion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossRegion::Full),
            "program" => Ok(LossRegion::Program),
            _ => Err(Error::Config(format!("unknown loss region {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossRegion::Full => "full",
            LossRegion::Program => "program",
        }
    }
}

/// Encoder length for grid training: the last target worth predicting is
/// the EOS after a ten-instruction program.
pub const TRAIN_LEN: usize = GRID_TOKENS + MAX_PROGRAM;

/// Training batch over encoded instances with `n` decoder tokens.
pub fn grid_batch(instances: &[&GridInstance], n: usize, region: LossRegion) -> Result<Batch> {
    let windows: Vec<Vec<u32>> = instances
        .iter()
        .map(|inst| {
            let mut w = encode_instance(inst);
            w.resize(TRAIN_LEN + n, PAD);
            w
        })
        .collect();
    let mut batch = make_batch_padded(&windows, TRAIN_LEN, n, Some(PAD))?;
    if region == LossRegion::Program {
        let t = batch.t;
        for (i, m) in batch.loss_mask.iter_mut().enumerate() {
            let (pos, k) = ((i / n) % t, i % n);
            if pos + k + 1 < GRID_TOKENS {
                *m = 0;
            }
        }
    }
    Ok(batch)
}

/// Epoch-ordered batches over a fixed instance list. The order within each
/// epoch is a shuffle seeded by `(seed, epoch)`, so any step can be
/// reconstructed without replaying earlier ones.
pub struct GridSource<'a> {
    pub instances: &'a [GridInstance],
    pub batch_size: usize,
    pub accumulation: usize,
    pub n: usize,
    pub region: LossRegion,
    pub seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl<'a> GridSource<'a> {
    pub fn new(
        instances: &'a [GridInstance],
        batch_size: usize,
        accumulation: usize,
        n: usize,
        region: LossRegion,
        seed: u64,
    ) -> Self {
        Self {
            instances,
            batch_size,
            accumulation,
            n,
            region,
            seed,
            cached: None,
        }
    }

    /// Optimizer steps per pass over the data (rounded up).
    pub fn steps_per_epoch(&self) -> u64 {
        let per_step = (self.batch_size * self.accumulation) as u64;
        (self.instances.len() as u64).div_ceil(per_step.max(1))
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.instances.len()).collect();
            let mut r =
                ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            idx.shuffle(&mut r);
            self.cached = Some((epoch, idx));
        }
        &self.cached.as_ref().expect("just filled").1
    }
}

impl BatchSource for GridSource<'_> {
    fn batch(&mut self, step: u64, micro: usize, _rng: &mut ChaCha8Rng) -> Result<Batch> {
        let len = self.instances.len();
        if len == 0 {
            return Err(Error::contract("empty grid dataset"));
        }
        let spe = self.steps_per_epoch();
        let epoch = (step - 1) / spe;
        let in_epoch = ((step - 1) % spe) as usize;
        let start = (in_epoch * self.accumulation + micro) * self.batch_size;
        let bs = self.batch_size;
        let picks: Vec<usize> = {
            let order = self.order(epoch);
            (start..start + bs).map(|i| order[i % len]).collect()
        };
        let chosen: Vec<&GridInstance> = picks.iter().map(|&i| &self.instances[i]).collect();
        grid_batch(&chosen, self.n, self.region)
    }
}
