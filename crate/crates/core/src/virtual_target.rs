//! Deterministic in-process GUI applications used as headless test targets.
//!
//! Each variant renders into an RGBA [`Frame`] and accepts actions through
//! [`ExecutorBackend`]. Buggy variants reproduce two classes of silent
//! failure: pipes without collision, and tile numbers drawn in the tile's
//! own colour.
//!
//! Time is logical: one tick per second of requested wait, so a session's
//! frames and probes are a pure function of (variant, seed, actions).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Direction, Key, ScreenBounds};
use crate::executor::{AbortFlag, BackendError, ExecutorBackend};
use crate::observer::{Frame, ObserverBackend, ObserverError, Rect};
use crate::sandbox::LogLine;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TargetError {
    #[error("the game is over")]
    GameOver,
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
}

/// xorshift64* (Vigna 2014): shifts 12/25/27, multiplier 0x2545F4914F6CDD1D.
/// The state is seeded through one round of splitmix64 so that small
/// seeds still start far from zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self {
            state: if z == 0 { 0x2545_F491_4F6C_DD1D } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `0..n` (multiply-shift; `n` must be positive).
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

// ---------------------------------------------------------------------------
// 2048

pub type Grid = [[u32; 4]; 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Board2048 {
    grid: Grid,
    score: u64,
    rng: XorShift64Star,
    over: bool,
    moves: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveOutcome {
    pub changed: bool,
    pub score_delta: u64,
    /// Cells (row, col) that received a merged tile.
    pub merged: Vec<(usize, usize)>,
    pub spawned: Option<(usize, usize, u32)>,
}

/// Slides and merges without spawning. Returns the new grid, the score
/// gained and the cells holding a merged tile.
pub fn slide(grid: &Grid, direction: Direction) -> (Grid, u64, Vec<(usize, usize)>) {
    let mut out = [[0u32; 4]; 4];
    let mut delta = 0;
    let mut merged = Vec::new();
    for lane in 0..4 {
        // Cell coordinates from the edge the tiles move toward.
        let cells: [(usize, usize); 4] = std::array::from_fn(|i| match direction {
            Direction::Left => (lane, i),
            Direction::Right => (lane, 3 - i),
            Direction::Up => (i, lane),
            Direction::Down => (3 - i, lane),
        });
        let mut write = 0;
        let mut pending: Option<u32> = None;
        for &(r, c) in &cells {
            let v = grid[r][c];
            if v == 0 {
                continue;
            }
            match pending {
                Some(p) if p == v => {
                    let (wr, wc) = cells[write];
                    out[wr][wc] = p * 2;
                    delta += (p * 2) as u64;
                    merged.push((wr, wc));
                    write += 1;
                    pending = None;
                }
                Some(p) => {
                    let (wr, wc) = cells[write];
                    out[wr][wc] = p;
                    write += 1;
                    pending = Some(v);
                }
                None => pending = Some(v),
            }
        }
        if let Some(p) = pending {
            let (wr, wc) = cells[write];
            out[wr][wc] = p;
        }
    }
    merged.sort_unstable();
    (out, delta, merged)
}

impl Board2048 {
    /// Fresh game with two spawned tiles.
    pub fn new(seed: u64) -> Self {
        let mut board = Self::from_grid([[0; 4]; 4], seed);
        board.spawn();
        board.spawn();
        board.over = !board.can_move();
        board
    }

    pub fn from_grid(grid: Grid, seed: u64) -> Self {
        let mut board = Self {
            grid,
            score: 0,
            rng: XorShift64Star::new(seed),
            over: false,
            moves: 0,
        };
        board.over = !board.can_move();
        board
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn score(&self) -> u64 {
        self.score
    }

    pub fn is_over(&self) -> bool {
        self.over
    }

    pub fn moves(&self) -> u64 {
        self.moves
    }

    pub fn can_move(&self) -> bool {
        Direction::ALL
            .iter()
            .any(|&d| slide(&self.grid, d).0 != self.grid)
    }

    fn spawn(&mut self) -> Option<(usize, usize, u32)> {
        let empty: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| self.grid[r][c] == 0)
            .collect();
        if empty.is_empty() {
            return None;
        }
        let (r, c) = empty[self.rng.below(empty.len() as u64) as usize];
        let value = if self.rng.unit() < 0.9 { 2 } else { 4 };
        self.grid[r][c] = value;
        Some((r, c, value))
    }

    pub fn step(&mut self, direction: Direction) -> Result<MoveOutcome, TargetError> {
        if self.over {
            return Err(TargetError::GameOver);
        }
        let (next, delta, merged) = slide(&self.grid, direction);
        if next == self.grid {
            return Ok(MoveOutcome {
                changed: false,
                score_delta: 0,
                merged: Vec::new(),
                spawned: None,
            });
        }
        self.grid = next;
        self.score += delta;
        self.moves += 1;
        let spawned = self.spawn();
        self.over = !self.can_move();
        Ok(MoveOutcome {
            changed: true,
            score_delta: delta,
            merged,
            spawned,
        })
    }
}

// ---------------------------------------------------------------------------
// Flappy

pub const FLAPPY_WIDTH: u32 = 288;
pub const FLAPPY_HEIGHT: u32 = 512;
pub const GROUND_Y: i64 = 448;
pub const GRAVITY: i64 = 1;
pub const FLAP_VELOCITY: i64 = -8;
pub const PIPE_SPEED: i64 = 2;
pub const PIPE_WIDTH: i64 = 52;
pub const PIPE_GAP: i64 = 120;
pub const PIPE_SPACING: i64 = 160;
pub const BIRD_X: i64 = 60;
pub const BIRD_SIZE: i64 = 24;
const BIRD_START_Y: i64 = 200;
const FIRST_PIPE_X: i64 = 110;
const FIRST_GAP_TOP: i64 = 120;
const GAP_MARGIN: i64 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipe {
    pub x: i64,
    pub gap_top: i64,
    pub gap_bottom: i64,
    pub passed: bool,
}

impl Pipe {
    fn overlaps_bird(&self, bird_y: i64) -> bool {
        let horizontal = self.x < BIRD_X + BIRD_SIZE && BIRD_X < self.x + PIPE_WIDTH;
        let in_gap = bird_y >= self.gap_top && bird_y + BIRD_SIZE <= self.gap_bottom;
        horizontal && !in_gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathCause {
    Pipe,
    Ground,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlappyState {
    pub bird_y: i64,
    pub velocity: i64,
    pub pipes: Vec<Pipe>,
    pub score: u32,
    pub alive: bool,
    pub tick: u64,
    pub death: Option<DeathCause>,
    rng: XorShift64Star,
}

/// What happened during one physics tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickReport {
    pub tick: u64,
    pub pipe_overlap: bool,
    pub alive: bool,
    pub died: Option<DeathCause>,
    pub scored: bool,
}

impl FlappyState {
    pub fn new(seed: u64) -> Self {
        Self {
            bird_y: BIRD_START_Y,
            velocity: 0,
            pipes: vec![Pipe {
                x: FIRST_PIPE_X,
                gap_top: FIRST_GAP_TOP,
                gap_bottom: FIRST_GAP_TOP + PIPE_GAP,
                passed: false,
            }],
            score: 0,
            alive: true,
            tick: 0,
            death: None,
            rng: XorShift64Star::new(seed),
        }
    }

    pub fn overlapping_pipe(&self) -> bool {
        self.pipes.iter().any(|p| p.overlaps_bird(self.bird_y))
    }
}

/// Advances one tick. A dead bird is frozen.
pub fn step_flappy(state: &mut FlappyState, flap: bool, variant: TargetVariant) -> TickReport {
    if !state.alive {
        return TickReport {
            tick: state.tick,
            pipe_overlap: state.overlapping_pipe(),
            alive: false,
            died: None,
            scored: false,
        };
    }
    state.tick += 1;
    if flap {
        state.velocity = FLAP_VELOCITY;
    } else {
        state.velocity += GRAVITY;
    }
    state.bird_y += state.velocity;
    if state.bird_y < 0 {
        state.bird_y = 0;
        state.velocity = 0;
    }

    for pipe in &mut state.pipes {
        pipe.x -= PIPE_SPEED;
    }
    state.pipes.retain(|p| p.x + PIPE_WIDTH > 0);
    let last_x = state.pipes.last().map_or(i64::MIN, |p| p.x);
    if last_x <= FLAPPY_WIDTH as i64 - PIPE_SPACING {
        let span = (GROUND_Y - PIPE_GAP - 2 * GAP_MARGIN) as u64;
        let gap_top = GAP_MARGIN + state.rng.below(span + 1) as i64;
        state.pipes.push(Pipe {
            x: last_x.max(0) + PIPE_SPACING,
            gap_top,
            gap_bottom: gap_top + PIPE_GAP,
            passed: false,
        });
    }

    let mut scored = false;
    for pipe in &mut state.pipes {
        if !pipe.passed && pipe.x + PIPE_WIDTH <= BIRD_X {
            pipe.passed = true;
            state.score += 1;
            scored = true;
        }
    }

    let pipe_overlap = state.overlapping_pipe();
    let ground = state.bird_y + BIRD_SIZE >= GROUND_Y;
    let collides = pipe_overlap && variant != TargetVariant::FlappyPassthrough;
    let died = if collides {
        Some(DeathCause::Pipe)
    } else if ground {
        Some(DeathCause::Ground)
    } else {
        None
    };
    if let Some(cause) = died {
        state.alive = false;
        state.death = Some(cause);
        if cause == DeathCause::Ground {
            state.bird_y = GROUND_Y - BIRD_SIZE;
        }
    }
    TickReport {
        tick: state.tick,
        pipe_overlap,
        alive: state.alive,
        died,
        scored,
    }
}

// ---------------------------------------------------------------------------
// Variants, probes and rendering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetVariant {
    Game2048Ok,
    Game2048WhiteOnWhite,
    FlappyOk,
    FlappyPassthrough,
}

impl TargetVariant {
    pub const ALL: [TargetVariant; 4] = [
        TargetVariant::Game2048Ok,
        TargetVariant::Game2048WhiteOnWhite,
        TargetVariant::FlappyOk,
        TargetVariant::FlappyPassthrough,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TargetVariant::Game2048Ok => "game2048_ok",
            TargetVariant::Game2048WhiteOnWhite => "game2048_white_on_white",
            TargetVariant::FlappyOk => "flappy_ok",
            TargetVariant::FlappyPassthrough => "flappy_passthrough",
        }
    }

    pub fn is_2048(self) -> bool {
        matches!(self, TargetVariant::Game2048Ok | TargetVariant::Game2048WhiteOnWhite)
    }

    pub fn canvas(self) -> (u32, u32) {
        if self.is_2048() {
            (BOARD_CANVAS, BOARD_CANVAS)
        } else {
            (FLAPPY_WIDTH, FLAPPY_HEIGHT)
        }
    }
}

impl fmt::Display for TargetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TargetVariant {
    type Err = TargetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TargetVariant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| TargetError::UnknownTarget(s.to_string()))
    }
}

/// Oracle view of a target's internal state. Never shown to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "game", rename_all = "snake_case")]
pub enum StateProbe {
    Game2048 {
        grid: Grid,
        score: u64,
        over: bool,
        moves: u64,
    },
    Flappy {
        bird_y: i64,
        velocity: i64,
        pipes: Vec<Pipe>,
        score: u32,
        alive: bool,
        tick: u64,
        overlapping: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum GameState {
    Board(Board2048),
    Flappy(FlappyState),
}

pub const BOARD_CANVAS: u32 = 400;
pub const CELL_SIZE: u32 = 80;
pub const CELL_GAP: u32 = 16;
/// Inset of the glyph box inside a 2048 cell.
pub const GLYPH_INSET: u32 = 8;

const BOARD_BG: [u8; 4] = [187, 173, 160, 255];
const EMPTY_CELL: [u8; 4] = [205, 193, 180, 255];
const DARK_TEXT: [u8; 4] = [119, 110, 101, 255];
const LIGHT_TEXT: [u8; 4] = [249, 246, 242, 255];
const WHITE: [u8; 4] = [255, 255, 255, 255];
const SKY: [u8; 4] = [112, 197, 206, 255];
const PIPE_GREEN: [u8; 4] = [83, 160, 60, 255];
const GROUND: [u8; 4] = [222, 216, 149, 255];
const BIRD: [u8; 4] = [250, 200, 40, 255];
const OVERLAY: [u8; 4] = [40, 40, 40, 255];

fn tile_color(value: u32) -> [u8; 4] {
    match value {
        2 => [238, 228, 218, 255],
        4 => [237, 224, 200, 255],
        8 => [242, 177, 121, 255],
        16 => [245, 149, 99, 255],
        32 => [246, 124, 95, 255],
        64 => [246, 94, 59, 255],
        128 => [237, 207, 114, 255],
        256 => [237, 204, 97, 255],
        512 => [237, 200, 80, 255],
        1024 => [237, 197, 63, 255],
        2048 => [237, 194, 46, 255],
        _ => [60, 58, 50, 255],
    }
}

/// Pixel rectangle of a 2048 cell.
pub fn cell_rect(row: usize, col: usize) -> Rect {
    Rect::new(
        CELL_GAP + col as u32 * (CELL_SIZE + CELL_GAP),
        CELL_GAP + row as u32 * (CELL_SIZE + CELL_GAP),
        CELL_SIZE,
        CELL_SIZE,
    )
}

/// Area of a cell where the tile number is drawn.
pub fn glyph_rect(row: usize, col: usize) -> Rect {
    let cell = cell_rect(row, col);
    Rect::new(
        cell.x + GLYPH_INSET,
        cell.y + GLYPH_INSET,
        cell.width - 2 * GLYPH_INSET,
        cell.height - 2 * GLYPH_INSET,
    )
}

// 3x5 bitmap digits, one row per byte, bit 2 = leftmost column.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Draws `text` (digits only) centred in `area`, shrinking to fit.
fn draw_number(frame: &mut Frame, area: Rect, value: u64, color: [u8; 4]) {
    let text = value.to_string();
    let chars = text.len() as u32;
    let mut scale = 6;
    while scale > 1 && (chars * 4 - 1) * scale > area.width {
        scale -= 1;
    }
    let width = (chars * 4 - 1) * scale;
    let height = 5 * scale;
    let x0 = area.x + area.width.saturating_sub(width) / 2;
    let y0 = area.y + area.height.saturating_sub(height) / 2;
    for (i, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let gx = x0 + i as u32 * 4 * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) != 0 {
                    frame.fill_rect(
                        (gx + col * scale) as i64,
                        (y0 + row as u32 * scale) as i64,
                        scale as i64,
                        scale as i64,
                        color,
                    );
                }
            }
        }
    }
}

fn render_board(board: &Board2048, variant: TargetVariant) -> Frame {
    let mut frame = Frame::filled(BOARD_CANVAS, BOARD_CANVAS, BOARD_BG);
    let invisible = variant == TargetVariant::Game2048WhiteOnWhite;
    for r in 0..4 {
        for c in 0..4 {
            let cell = cell_rect(r, c);
            let value = board.grid[r][c];
            let fill = match (value, invisible) {
                (0, _) => EMPTY_CELL,
                (_, true) => WHITE,
                (v, false) => tile_color(v),
            };
            frame.fill_rect(cell.x as i64, cell.y as i64, cell.width as i64, cell.height as i64, fill);
            if value != 0 {
                let text = if invisible {
                    fill
                } else if value <= 4 {
                    DARK_TEXT
                } else {
                    LIGHT_TEXT
                };
                draw_number(&mut frame, glyph_rect(r, c), value as u64, text);
            }
        }
    }
    frame
}

fn render_flappy(state: &FlappyState) -> Frame {
    let mut frame = Frame::filled(FLAPPY_WIDTH, FLAPPY_HEIGHT, SKY);
    for pipe in &state.pipes {
        frame.fill_rect(pipe.x, 0, PIPE_WIDTH, pipe.gap_top, PIPE_GREEN);
        frame.fill_rect(pipe.x, pipe.gap_bottom, PIPE_WIDTH, GROUND_Y - pipe.gap_bottom, PIPE_GREEN);
    }
    frame.fill_rect(0, GROUND_Y, FLAPPY_WIDTH as i64, FLAPPY_HEIGHT as i64 - GROUND_Y, GROUND);
    frame.fill_rect(BIRD_X, state.bird_y, BIRD_SIZE, BIRD_SIZE, BIRD);
    draw_number(
        &mut frame,
        Rect::new(0, 16, FLAPPY_WIDTH, 40),
        state.score as u64,
        WHITE,
    );
    if !state.alive {
        frame.fill_rect(24, 200, FLAPPY_WIDTH as i64 - 48, 80, OVERLAY);
        draw_number(&mut frame, Rect::new(24, 210, FLAPPY_WIDTH - 48, 60), state.score as u64, WHITE);
    }
    frame
}

/// An in-process target: a game variant plus logical clock and log buffer.
#[derive(Debug, Clone)]
pub struct VirtualTarget {
    variant: TargetVariant,
    seed: u64,
    state: GameState,
    clock_ms: u64,
    pending_flap: bool,
    logs: Vec<LogLine>,
}

pub const TICK_MS: u64 = 1000;

impl VirtualTarget {
    pub fn new(variant: TargetVariant, seed: u64) -> Self {
        let state = if variant.is_2048() {
            GameState::Board(Board2048::new(seed))
        } else {
            GameState::Flappy(FlappyState::new(seed))
        };
        let mut target = Self {
            variant,
            seed,
            state,
            clock_ms: 0,
            pending_flap: false,
            logs: Vec::new(),
        };
        target.log(LogLine::new("INFO", "start").field("target", variant).field("seed", seed));
        target
    }

    pub fn variant(&self) -> TargetVariant {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn render(&self) -> Frame {
        match &self.state {
            GameState::Board(b) => render_board(b, self.variant),
            GameState::Flappy(f) => render_flappy(f),
        }
    }

    pub fn probe(&self) -> StateProbe {
        match &self.state {
            GameState::Board(b) => StateProbe::Game2048 {
                grid: b.grid,
                score: b.score,
                over: b.over,
                moves: b.moves,
            },
            GameState::Flappy(f) => StateProbe::Flappy {
                bird_y: f.bird_y,
                velocity: f.velocity,
                pipes: f.pipes.clone(),
                score: f.score,
                alive: f.alive,
                tick: f.tick,
                overlapping: f.overlapping_pipe(),
            },
        }
    }

    /// Stable digest of the full internal state.
    pub fn state_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(&self.state).expect("state serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn drain_logs(&mut self) -> Vec<LogLine> {
        std::mem::take(&mut self.logs)
    }

    fn log(&mut self, line: LogLine) {
        self.logs.push(line);
    }

    fn swipe(&mut self, direction: Direction) {
        let GameState::Board(board) = &mut self.state else {
            return;
        };
        match board.step(direction) {
            Ok(outcome) => {
                let line = LogLine::new("INFO", "move")
                    .field("dir", direction.as_str())
                    .field("changed", outcome.changed)
                    .field("delta", outcome.score_delta)
                    .field("score", board.score);
                let over = board.over;
                self.log(line);
                if over {
                    self.log(LogLine::new("INFO", "game_over"));
                }
            }
            Err(_) => self.log(LogLine::new("WARN", "move_rejected").field("reason", "game_over")),
        }
    }

    fn tick(&mut self) {
        self.clock_ms += TICK_MS;
        let flap = std::mem::take(&mut self.pending_flap);
        let variant = self.variant;
        let GameState::Flappy(state) = &mut self.state else {
            return;
        };
        if !state.alive {
            return;
        }
        let report = step_flappy(state, flap, variant);
        let score = state.score;
        if report.pipe_overlap {
            self.log(
                LogLine::new("INFO", "pipe_overlap")
                    .field("tick", report.tick)
                    .field("alive", report.alive),
            );
        }
        if let Some(cause) = report.died {
            let cause = match cause {
                DeathCause::Pipe => "pipe",
                DeathCause::Ground => "ground",
            };
            self.log(
                LogLine::new("INFO", "game_over")
                    .field("tick", report.tick)
                    .field("cause", cause)
                    .field("score", score),
            );
        }
    }

    /// Applies one input directly (used by the standalone runner too).
    fn input_flap(&mut self) {
        if matches!(self.state, GameState::Flappy(_)) {
            self.pending_flap = true;
        }
    }
}

impl ObserverBackend for VirtualTarget {
    fn screen_size(&self) -> (u32, u32) {
        self.variant.canvas()
    }

    fn grab(&mut self) -> Result<Frame, ObserverError> {
        Ok(self.render())
    }

    fn now_ms(&self) -> u64 {
        self.clock_ms
    }
}

impl ExecutorBackend for VirtualTarget {
    fn bounds(&self) -> ScreenBounds {
        let (w, h) = self.variant.canvas();
        ScreenBounds { width: w, height: h }
    }

    fn click(&mut self, _x: i64, _y: i64) -> Result<(), BackendError> {
        self.input_flap();
        Ok(())
    }

    fn type_text(&mut self, _text: &str) -> Result<(), BackendError> {
        Ok(())
    }

    fn key_chord(&mut self, _keys: &[Key]) -> Result<(), BackendError> {
        Ok(())
    }

    fn press(&mut self, key: &Key) -> Result<(), BackendError> {
        if self.variant.is_2048() {
            if let Some(direction) = key.direction() {
                self.swipe(direction);
            }
        } else if matches!(key.as_str(), "space" | "up") {
            self.input_flap();
        }
        Ok(())
    }

    fn scroll(&mut self, _x: i64, _y: i64, _direction: Direction) -> Result<(), BackendError> {
        Ok(())
    }

    fn idle(&mut self, seconds: f64, abort: &AbortFlag) -> Result<bool, BackendError> {
        let ticks = (seconds.ceil() as u64).max(1);
        for _ in 0..ticks {
            if abort.is_raised() {
                return Ok(false);
            }
            self.tick();
        }
        Ok(true)
    }

    fn now_ms(&self) -> u64 {
        self.clock_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::{diff, diff_region};

    #[test]
    fn rng_is_reproducible_and_seed_sensitive() {
        let mut a = XorShift64Star::new(7);
        let mut b = XorShift64Star::new(7);
        let mut c = XorShift64Star::new(8);
        let xs: Vec<_> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<_> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs[0], c.next_u64());
        let mut z = XorShift64Star::new(0);
        assert_ne!(z.next_u64(), 0);
        for _ in 0..1000 {
            assert!(a.below(5) < 5);
            let u = a.unit();
            assert!((0.0..1.0).contains(&u));
        }
    }

    fn case_study_grid() -> Grid {
        // Rows/columns are 1-based in the case description: r3c1=2, r3c4=2, r4c4=4.
        let mut g = [[0; 4]; 4];
        g[2][0] = 2;
        g[2][3] = 2;
        g[3][3] = 4;
        g
    }

    #[test]
    fn case_study_right_move() {
        let (next, delta, merged) = slide(&case_study_grid(), Direction::Right);
        assert_eq!(next[2], [0, 0, 0, 4]);
        assert_eq!(next[3], [0, 0, 0, 4]);
        assert_eq!(delta, 4);
        assert_eq!(merged, vec![(2, 3)]);

        let mut board = Board2048::from_grid(case_study_grid(), 1);
        let outcome = board.step(Direction::Right).unwrap();
        assert_eq!(outcome.score_delta, 4);
        assert_eq!(board.score(), 4);
        assert!(outcome.spawned.is_some());
    }

    #[test]
    fn single_merge_per_tile() {
        let mut g = [[0; 4]; 4];
        g[0] = [2, 2, 2, 2];
        g[1] = [4, 4, 8, 0];
        let (next, delta, _) = slide(&g, Direction::Left);
        assert_eq!(next[0], [4, 4, 0, 0]);
        assert_eq!(next[1], [8, 8, 0, 0]);
        assert_eq!(delta, 16);
    }

    #[test]
    fn noop_move_spawns_nothing() {
        let mut g = [[0; 4]; 4];
        g[0][0] = 2;
        let mut board = Board2048::from_grid(g, 3);
        let outcome = board.step(Direction::Left).unwrap();
        assert!(!outcome.changed);
        assert_eq!(board.grid(), &g);
    }

    #[test]
    fn finished_board_rejects_moves() {
        let g = [[2, 4, 2, 4], [4, 2, 4, 2], [2, 4, 2, 4], [4, 2, 4, 2]];
        let mut board = Board2048::from_grid(g, 0);
        assert!(board.is_over());
        assert_eq!(board.step(Direction::Up), Err(TargetError::GameOver));
    }

    #[test]
    fn fresh_board_has_two_tiles() {
        for seed in 0..50 {
            let board = Board2048::new(seed);
            let tiles = board.grid().iter().flatten().filter(|v| **v != 0).count();
            assert_eq!(tiles, 2, "seed {seed}");
        }
    }

    #[test]
    fn free_fall_adds_gravity_each_tick() {
        let mut s = FlappyState::new(1);
        let mut v = s.velocity;
        for _ in 0..5 {
            step_flappy(&mut s, false, TargetVariant::FlappyOk);
            assert_eq!(s.velocity, v + GRAVITY);
            v = s.velocity;
        }
        step_flappy(&mut s, true, TargetVariant::FlappyOk);
        assert_eq!(s.velocity, FLAP_VELOCITY);
    }

    fn overlapping_state() -> FlappyState {
        let mut s = FlappyState::new(1);
        // Pipe directly on the bird, bird below the gap, falling slowly.
        s.pipes = vec![Pipe {
            x: BIRD_X - 10,
            gap_top: 40,
            gap_bottom: 160,
            passed: false,
        }];
        s.bird_y = 300;
        s.velocity = -1;
        s
    }

    #[test]
    fn collision_depends_on_variant() {
        let mut ok = overlapping_state();
        let report = step_flappy(&mut ok, false, TargetVariant::FlappyOk);
        assert!(report.pipe_overlap);
        assert!(!ok.alive);
        assert_eq!(ok.death, Some(DeathCause::Pipe));

        let mut bug = overlapping_state();
        let report = step_flappy(&mut bug, false, TargetVariant::FlappyPassthrough);
        assert!(report.pipe_overlap);
        assert!(bug.alive);
    }

    #[test]
    fn ground_still_kills_passthrough_bird() {
        let mut s = FlappyState::new(1);
        s.pipes.clear();
        for _ in 0..100 {
            step_flappy(&mut s, false, TargetVariant::FlappyPassthrough);
        }
        assert!(!s.alive);
        assert_eq!(s.death, Some(DeathCause::Ground));
    }

    #[test]
    fn render_is_deterministic() {
        for variant in TargetVariant::ALL {
            let a = VirtualTarget::new(variant, 7);
            let b = VirtualTarget::new(variant, 7);
            assert_eq!(a.render(), b.render());
            assert_eq!(a.render().width, variant.canvas().0);
        }
    }

    fn merge_frames(variant: TargetVariant) -> (Frame, Frame) {
        let board = Board2048::from_grid(case_study_grid(), 1);
        let before = render_board(&board, variant);
        let (next, _, _) = slide(board.grid(), Direction::Right);
        let after = render_board(&Board2048::from_grid(next, 1), variant);
        (before, after)
    }

    #[test]
    fn white_on_white_hides_merge() {
        let (before, after) = merge_frames(TargetVariant::Game2048WhiteOnWhite);
        // The vacated r3c1 tile changes, the merged r3c4 glyph does not.
        assert!(!diff_region(&before, &after, cell_rect(2, 0), 0).unwrap().unchanged());
        assert!(diff_region(&before, &after, glyph_rect(2, 3), 0).unwrap().unchanged());
        assert!(!diff(&before, &after, 0).unwrap().unchanged());
    }

    #[test]
    fn ok_variant_shows_merge() {
        let (before, after) = merge_frames(TargetVariant::Game2048Ok);
        assert!(!diff_region(&before, &after, glyph_rect(2, 3), 0).unwrap().unchanged());
    }

    #[test]
    fn probe_is_side_effect_free() {
        let t = VirtualTarget::new(TargetVariant::FlappyOk, 3);
        let h = t.state_hash();
        let _ = t.probe();
        assert_eq!(t.state_hash(), h);
    }

    #[test]
    fn flappy_probe_matches_overlay() {
        let mut t = VirtualTarget::new(TargetVariant::FlappyOk, 3);
        let alive_frame = t.render();
        t.idle(40.0, &AbortFlag::new()).unwrap();
        let StateProbe::Flappy { alive, .. } = t.probe() else {
            panic!("flappy probe expected")
        };
        assert!(!alive);
        let dead_frame = t.render();
        assert_eq!(dead_frame.pixel(30, 240), OVERLAY);
        assert_ne!(alive_frame.pixel(30, 240), OVERLAY);
    }

    #[test]
    fn variant_ids_round_trip() {
        for v in TargetVariant::ALL {
            assert_eq!(v.id().parse::<TargetVariant>().unwrap(), v);
        }
        assert!("pong".parse::<TargetVariant>().is_err());
    }
}
