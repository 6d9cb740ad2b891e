//! Block-breaking game on a 24x24 field: 3 rows x 8 columns of blocks, a
//! bottom paddle, one life. Reward +1 per destroyed block; the episode ends
//! on ball loss or a cleared field.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fill_rect, reflect, BALL_COLOR, FRAME_H, FRAME_W};

pub const ROWS: usize = 3;
pub const COLS: usize = 8;
pub const BLOCK_W: usize = 3;
pub const BLOCK_H: usize = 2;
/// Top pixel row of the block grid.
pub const GRID_TOP: usize = 4;
pub const PADDLE_W: f64 = 5.0;
pub const PADDLE_Y: f64 = 22.0;
pub const PADDLE_SPEED: f64 = 1.4;
pub const BALL_SIZE: f64 = 2.0;
pub const BALL_SPEED_Y: f64 = 0.8;
pub const MAX_BALL_VX: f64 = 1.0;

const X_LIMIT: f64 = FRAME_W as f64 - BALL_SIZE;
const PADDLE_LIMIT: f64 = FRAME_W as f64 - PADDLE_W;

#[derive(Debug, Clone)]
pub struct BreakoutState {
    blocks: [bool; ROWS * COLS],
    ball_x: f64,
    ball_y: f64,
    vx: f64,
    vy: f64,
    paddle_x: f64,
}

impl BreakoutState {
    pub fn new(mut rng: ChaCha8Rng) -> BreakoutState {
        let ball_x = 4.0 + rng.gen_range(0..15) as f64;
        let vx = [-0.7, -0.35, 0.35, 0.7][rng.gen_range(0..4)];
        BreakoutState {
            blocks: [true; ROWS * COLS],
            ball_x,
            ball_y: 12.0,
            vx,
            vy: BALL_SPEED_Y,
            paddle_x: (FRAME_W as f64 - PADDLE_W) / 2.0,
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.iter().filter(|&&b| b).count()
    }

    pub fn step(&mut self, action: usize) -> (f64, bool) {
        match action {
            1 => self.paddle_x = (self.paddle_x - PADDLE_SPEED).max(0.0),
            2 => self.paddle_x = (self.paddle_x + PADDLE_SPEED).min(PADDLE_LIMIT),
            _ => {}
        }
        self.ball_x += self.vx;
        self.ball_y += self.vy;
        if self.ball_x < 0.0 {
            self.ball_x = -self.ball_x;
            self.vx = -self.vx;
        } else if self.ball_x > X_LIMIT {
            self.ball_x = 2.0 * X_LIMIT - self.ball_x;
            self.vx = -self.vx;
        }
        if self.ball_y < 0.0 {
            self.ball_y = -self.ball_y;
            self.vy = self.vy.abs();
        }

        // Block hits: destroy every overlapped block, bounce once.
        let mut reward = 0.0;
        if self.ball_y < (GRID_TOP + ROWS * BLOCK_H) as f64 + BALL_SIZE {
            let mut hit = false;
            for r in 0..ROWS {
                for c in 0..COLS {
                    if !self.blocks[r * COLS + c] {
                        continue;
                    }
                    let bx = (c * BLOCK_W) as f64;
                    let by = (GRID_TOP + r * BLOCK_H) as f64;
                    let overlap_x =
                        self.ball_x + BALL_SIZE > bx && self.ball_x < bx + BLOCK_W as f64;
                    let overlap_y =
                        self.ball_y + BALL_SIZE > by && self.ball_y < by + BLOCK_H as f64;
                    if overlap_x && overlap_y {
                        self.blocks[r * COLS + c] = false;
                        reward += 1.0;
                        hit = true;
                    }
                }
            }
            if hit {
                self.vy = -self.vy;
            }
        }

        // Paddle bounce; contact point steers the ball.
        if self.vy > 0.0
            && self.ball_y + BALL_SIZE >= PADDLE_Y
            && self.ball_y < PADDLE_Y + 1.0
            && self.ball_x + BALL_SIZE > self.paddle_x
            && self.ball_x < self.paddle_x + PADDLE_W
        {
            self.vy = -self.vy.abs();
            self.ball_y = PADDLE_Y - BALL_SIZE;
            let rel = (self.ball_x + BALL_SIZE / 2.0) - (self.paddle_x + PADDLE_W / 2.0);
            self.vx = (rel / (PADDLE_W / 2.0 + BALL_SIZE / 2.0) * MAX_BALL_VX)
                .clamp(-MAX_BALL_VX, MAX_BALL_VX);
        }

        if self.ball_y > FRAME_H as f64 {
            return (reward, true); // ball lost, single life
        }
        if self.block_count() == 0 {
            return (reward, true);
        }
        (reward, false)
    }

    pub fn expert_action(&self) -> usize {
        let paddle_center = self.paddle_x + PADDLE_W / 2.0;
        let target = if self.vy > 0.0 {
            let ticks = (PADDLE_Y - BALL_SIZE - self.ball_y) / self.vy;
            reflect(self.ball_x + self.vx * ticks.max(0.0), X_LIMIT) + BALL_SIZE / 2.0
        } else {
            self.ball_x + BALL_SIZE / 2.0
        };
        if target < paddle_center - 0.75 {
            1
        } else if target > paddle_center + 0.75 {
            2
        } else {
            0
        }
    }

    pub fn fill_info(&self, info: &mut BTreeMap<String, f64>) {
        let norm = (FRAME_W - 1) as f64;
        info.insert("ball_x".into(), (self.ball_x + BALL_SIZE / 2.0) / norm);
        info.insert("ball_y".into(), (self.ball_y + BALL_SIZE / 2.0) / norm);
        info.insert("player_x".into(), (self.paddle_x + PADDLE_W / 2.0) / norm);
        info.insert("player_y".into(), (PADDLE_Y + 0.5) / norm);
        info.insert("blocks".into(), self.block_count() as f64);
    }

    pub fn render(&self, data: &mut [f32], player_color: [f32; 3], block_color: [f32; 3]) {
        for r in 0..ROWS {
            for c in 0..COLS {
                if self.blocks[r * COLS + c] {
                    fill_rect(
                        data,
                        (c * BLOCK_W) as f64,
                        (GRID_TOP + r * BLOCK_H) as f64,
                        BLOCK_W,
                        BLOCK_H,
                        block_color,
                    );
                }
            }
        }
        fill_rect(
            data,
            self.paddle_x,
            PADDLE_Y,
            PADDLE_W as usize,
            1,
            player_color,
        );
        fill_rect(
            data,
            self.ball_x,
            self.ball_y,
            BALL_SIZE as usize,
            BALL_SIZE as usize,
            BALL_COLOR,
        );
    }
}
