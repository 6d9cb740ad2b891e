//! Deterministic toy arcade environments with frame-stacked image
//! observations and a variation system (recoloring, lazy opponent).
//!
//! Physics is pure float arithmetic driven by a per-episode ChaCha stream
//! drawn only at reset/serve time, so (seed, variation, action sequence)
//! fully determines every step result, bit-exactly. Recolors only touch the
//! rendering palette, never the dynamics.

mod minibreakout;
mod minipong;

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const FRAME_H: usize = 24;
pub const FRAME_W: usize = 24;
pub const FRAME_CHANNELS: usize = 3;
/// Frames stacked into one observation.
pub const STACK: usize = 4;
/// Channels of a stacked observation.
pub const OBS_CHANNELS: usize = FRAME_CHANNELS * STACK;
/// Hard per-episode step cap.
pub const STEP_CAP: u32 = 1000;

/// Recolor palette: black-substitute (dark gray so entities never vanish
/// into the zero background), white, red, blue, green.
pub const PALETTE: [[f32; 3]; 5] = [
    [0.15, 0.15, 0.15],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
];

pub const DEFAULT_PLAYER_COLOR: [f32; 3] = [0.9, 0.9, 0.3];
pub const DEFAULT_BLOCK_COLOR: [f32; 3] = [0.9, 0.4, 0.15];
pub const OPPONENT_COLOR: [f32; 3] = [0.9, 0.45, 0.1];
pub const BALL_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GameId {
    MiniPong,
    MiniBreakout,
}

impl GameId {
    pub fn parse(s: &str) -> Result<GameId> {
        match s {
            "minipong" => Ok(GameId::MiniPong),
            "minibreakout" => Ok(GameId::MiniBreakout),
            other => Err(CoreError::Config(format!("unknown env id '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GameId::MiniPong => "minipong",
            GameId::MiniBreakout => "minibreakout",
        }
    }

    /// Actions are {noop, up, down} for minipong and {noop, left, right}
    /// for minibreakout.
    pub fn action_count(self) -> usize {
        3
    }
}

/// Controlled environment perturbation. Palette indices select from
/// [`PALETTE`]; `lazy_enemy` alters the minipong opponent only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Variation {
    pub player_color: Option<u8>,
    pub block_color: Option<u8>,
    pub lazy_enemy: bool,
}

impl Variation {
    pub fn validate(&self, game: GameId) -> Result<()> {
        if let Some(c) = self.player_color {
            if c > 4 {
                return Err(CoreError::Config(format!("player_color {c} out of [0,4]")));
            }
        }
        if let Some(c) = self.block_color {
            if c > 4 {
                return Err(CoreError::Config(format!("block_color {c} out of [0,4]")));
            }
            if game == GameId::MiniPong {
                return Err(CoreError::Config(
                    "block_color is invalid for minipong (no blocks)".into(),
                ));
            }
        }
        if self.lazy_enemy && game == GameId::MiniBreakout {
            return Err(CoreError::Config(
                "lazy_enemy is invalid for minibreakout (no opponent)".into(),
            ));
        }
        Ok(())
    }

    pub fn is_default(&self) -> bool {
        *self == Variation::default()
    }
}

/// One rendered game screen: `[3, 24, 24]`, values in [0, 1], background 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Tensor<f32>);

impl Frame {
    fn new(t: Tensor<f32>) -> Frame {
        debug_assert_eq!(t.shape(), &[FRAME_CHANNELS, FRAME_H, FRAME_W]);
        Frame(t)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}

/// Four stacked frames, newest last: `[12, 24, 24]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(Tensor<f32>);

impl Observation {
    fn from_frames(frames: &[Frame; STACK]) -> Observation {
        let mut data = Vec::with_capacity(OBS_CHANNELS * FRAME_H * FRAME_W);
        for f in frames {
            data.extend_from_slice(f.tensor().data());
        }
        Observation(Tensor::from_vec(&[OBS_CHANNELS, FRAME_H, FRAME_W], data).unwrap())
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    /// Channels of the i-th stacked frame (0 = oldest).
    pub fn frame_slice(&self, i: usize) -> &[f32] {
        let plane = FRAME_CHANNELS * FRAME_H * FRAME_W;
        &self.0.data()[i * plane..(i + 1) * plane]
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// True object coordinates (normalized centers) and game counters.
    pub info: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
enum GameState {
    Pong(minipong::PongState),
    Breakout(minibreakout::BreakoutState),
}

/// A single environment instance. Single-threaded; a vectorized driver may
/// step N independent instances, each with its own stream.
#[derive(Debug, Clone)]
pub struct Env {
    game: GameId,
    variation: Variation,
    state: Option<GameState>,
    frames: Option<[Frame; STACK]>,
    steps: u32,
    score: i32,
    done: bool,
}

impl Env {
    pub fn new(game: GameId) -> Env {
        Env {
            game,
            variation: Variation::default(),
            state: None,
            frames: None,
            steps: 0,
            score: 0,
            done: true,
        }
    }

    pub fn game(&self) -> GameId {
        self.game
    }

    pub fn variation(&self) -> &Variation {
        &self.variation
    }

    pub fn action_count(&self) -> usize {
        self.game.action_count()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn score(&self) -> i32 {
        self.score
    }

    /// Switch variation between episodes. Rendering palette and/or opponent
    /// policy change; physics is otherwise identical.
    pub fn apply_variation(&mut self, v: Variation) -> Result<()> {
        v.validate(self.game)?;
        if self.state.is_some() && !self.done {
            return Err(CoreError::State(
                "variation change mid-episode; apply at reset".into(),
            ));
        }
        self.variation = v;
        Ok(())
    }

    /// Deterministic initial state for (seed, variation).
    pub fn reset(&mut self, seed: u64, variation: Variation) -> Result<Observation> {
        variation.validate(self.game)?;
        self.variation = variation;
        let stream = rng::stream(seed, &[0x45_4e_56, self.game as u64]);
        let state = match self.game {
            GameId::MiniPong => GameState::Pong(minipong::PongState::new(stream)),
            GameId::MiniBreakout => GameState::Breakout(minibreakout::BreakoutState::new(stream)),
        };
        self.state = Some(state);
        self.steps = 0;
        self.score = 0;
        self.done = false;
        let frame = self.render();
        self.frames = Some([frame.clone(), frame.clone(), frame.clone(), frame]);
        Ok(Observation::from_frames(self.frames.as_ref().unwrap()))
    }

    /// Advance physics one tick.
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done || self.state.is_none() {
            return Err(CoreError::State(
                "step on finished episode; reset first".into(),
            ));
        }
        if action >= self.game.action_count() {
            return Err(CoreError::Config(format!(
                "action {action} out of range for {}",
                self.game.name()
            )));
        }
        let lazy = self.variation.lazy_enemy;
        let (reward, terminal) = match self.state.as_mut().unwrap() {
            GameState::Pong(s) => s.step(action, lazy),
            GameState::Breakout(s) => s.step(action),
        };
        self.steps += 1;
        self.score += reward as i32;
        let pong_win = self.game == GameId::MiniPong && self.score.abs() >= 5;
        let capped = self.steps >= STEP_CAP;
        self.done = terminal || pong_win || capped;
        let frame = self.render();
        let frames = self.frames.as_mut().unwrap();
        frames.rotate_left(1);
        frames[STACK - 1] = frame;
        Ok(StepResult {
            observation: Observation::from_frames(self.frames.as_ref().unwrap()),
            reward,
            done: self.done,
            info: self.object_info(),
        })
    }

    /// Scripted heuristic: move the paddle toward the ball's predicted
    /// intercept. Used to gather expert data.
    pub fn expert_action(&self) -> usize {
        match self.state.as_ref() {
            Some(GameState::Pong(s)) => s.expert_action(),
            Some(GameState::Breakout(s)) => s.expert_action(),
            None => 0,
        }
    }

    /// Remaining block count (minibreakout only).
    pub fn block_count(&self) -> Option<usize> {
        match self.state.as_ref() {
            Some(GameState::Breakout(s)) => Some(s.block_count()),
            _ => None,
        }
    }

    /// Normalized object center coordinates plus game counters.
    pub fn object_info(&self) -> BTreeMap<String, f64> {
        let mut info = BTreeMap::new();
        match self.state.as_ref() {
            Some(GameState::Pong(s)) => s.fill_info(&mut info),
            Some(GameState::Breakout(s)) => s.fill_info(&mut info),
            None => {}
        }
        info.insert("score".into(), self.score as f64);
        info
    }

    pub fn render(&self) -> Frame {
        let mut data = vec![0.0f32; FRAME_CHANNELS * FRAME_H * FRAME_W];
        let player = self
            .variation
            .player_color
            .map(|c| PALETTE[c as usize])
            .unwrap_or(DEFAULT_PLAYER_COLOR);
        let block = self
            .variation
            .block_color
            .map(|c| PALETTE[c as usize])
            .unwrap_or(DEFAULT_BLOCK_COLOR);
        match self.state.as_ref() {
            Some(GameState::Pong(s)) => s.render(&mut data, player),
            Some(GameState::Breakout(s)) => s.render(&mut data, player, block),
            None => {}
        }
        Frame::new(Tensor::from_vec(&[FRAME_CHANNELS, FRAME_H, FRAME_W], data).unwrap())
    }
}

/// Fill an axis-aligned rectangle in all three channels, clipped to the frame.
pub(crate) fn fill_rect(data: &mut [f32], x: f64, y: f64, w: usize, h: usize, color: [f32; 3]) {
    let x0 = (x + 0.5).floor() as isize;
    let y0 = (y + 0.5).floor() as isize;
    for c in 0..FRAME_CHANNELS {
        let plane = c * FRAME_H * FRAME_W;
        for dy in 0..h as isize {
            let py = y0 + dy;
            if py < 0 || py >= FRAME_H as isize {
                continue;
            }
            for dx in 0..w as isize {
                let px = x0 + dx;
                if px < 0 || px >= FRAME_W as isize {
                    continue;
                }
                data[plane + py as usize * FRAME_W + px as usize] = color[c];
            }
        }
    }
}

/// Fold a free-flight coordinate into [0, limit] with wall reflections.
pub(crate) fn reflect(pos: f64, limit: f64) -> f64 {
    let period = 2.0 * limit;
    let mut m = pos % period;
    if m < 0.0 {
        m += period;
    }
    if m <= limit {
        m
    } else {
        period - m
    }
}
