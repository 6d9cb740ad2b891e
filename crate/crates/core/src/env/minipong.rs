//! Two-paddle ball game on a 24x24 field. The agent controls the right
//! paddle; the opponent is a proportional ball-tracker with capped speed so
//! the game is winnable. Reward +1 when the opponent misses, -1 when the
//! player misses; the episode ends at |score| = 5.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fill_rect, reflect, BALL_COLOR, FRAME_H, FRAME_W, OPPONENT_COLOR};

pub const PADDLE_H: f64 = 5.0;
pub const PADDLE_W: usize = 2;
pub const BALL_SIZE: f64 = 2.0;
/// Paddle x positions (left edge).
pub const PLAYER_X: f64 = 21.0;
pub const OPPONENT_X: f64 = 1.0;
pub const BALL_SPEED_X: f64 = 0.8;
/// Opponent tracking speed cap: 80% of the ball's horizontal speed.
pub const OPPONENT_SPEED: f64 = 0.8 * BALL_SPEED_X;
/// Proportional gain of the opponent controller. Steep shots build up more
/// tracking lag than the controller closes, which keeps the game winnable.
pub const OPPONENT_GAIN: f64 = 0.22;
pub const PLAYER_SPEED: f64 = 1.0;
/// Max vertical ball speed imparted by an off-center paddle hit.
pub const MAX_BALL_VY: f64 = 1.1;

const Y_LIMIT: f64 = FRAME_H as f64 - BALL_SIZE; // ball top-edge range
const PADDLE_LIMIT: f64 = FRAME_H as f64 - PADDLE_H;

#[derive(Debug, Clone)]
pub struct PongState {
    rng: ChaCha8Rng,
    ball_x: f64,
    ball_y: f64,
    vx: f64,
    vy: f64,
    player_y: f64,
    opponent_y: f64,
    /// Set once the player returns the ball in the current rally; gates the
    /// opponent when the lazy-enemy variation is active.
    player_hit_this_rally: bool,
}

impl PongState {
    pub fn new(rng: ChaCha8Rng) -> PongState {
        let mut s = PongState {
            rng,
            ball_x: 0.0,
            ball_y: 0.0,
            vx: 0.0,
            vy: 0.0,
            player_y: (FRAME_H as f64 - PADDLE_H) / 2.0,
            opponent_y: (FRAME_H as f64 - PADDLE_H) / 2.0,
            player_hit_this_rally: false,
        };
        s.serve();
        s
    }

    fn serve(&mut self) {
        self.ball_x = (FRAME_W as f64 - BALL_SIZE) / 2.0;
        self.ball_y = 6.0 + self.rng.gen_range(0..11) as f64;
        self.vx = if self.rng.gen::<bool>() {
            BALL_SPEED_X
        } else {
            -BALL_SPEED_X
        };
        self.vy = [-0.6, -0.3, 0.3, 0.6][self.rng.gen_range(0..4)];
        self.player_hit_this_rally = false;
    }

    /// One tick. Returns (reward, terminal); terminal scoring is handled by
    /// the caller via the cumulative score.
    pub fn step(&mut self, action: usize, lazy_enemy: bool) -> (f64, bool) {
        match action {
            1 => self.player_y = (self.player_y - PLAYER_SPEED).max(0.0),
            2 => self.player_y = (self.player_y + PLAYER_SPEED).min(PADDLE_LIMIT),
            _ => {}
        }

        let opponent_active = !lazy_enemy || self.player_hit_this_rally;
        if opponent_active {
            let target = self.ball_y + BALL_SIZE / 2.0 - PADDLE_H / 2.0;
            let delta =
                (OPPONENT_GAIN * (target - self.opponent_y)).clamp(-OPPONENT_SPEED, OPPONENT_SPEED);
            self.opponent_y = (self.opponent_y + delta).clamp(0.0, PADDLE_LIMIT);
        }

        self.ball_x += self.vx;
        self.ball_y += self.vy;
        if self.ball_y < 0.0 {
            self.ball_y = -self.ball_y;
            self.vy = -self.vy;
        } else if self.ball_y > Y_LIMIT {
            self.ball_y = 2.0 * Y_LIMIT - self.ball_y;
            self.vy = -self.vy;
        }

        // Player paddle (right side), ball moving right.
        if self.vx > 0.0
            && self.ball_x + BALL_SIZE >= PLAYER_X
            && self.ball_x < PLAYER_X + PADDLE_W as f64
            && overlaps(self.ball_y, self.player_y)
        {
            self.vx = -self.vx;
            self.ball_x = PLAYER_X - BALL_SIZE;
            self.vy = hit_offset(self.ball_y, self.player_y);
            self.player_hit_this_rally = true;
        }
        // Opponent paddle (left side), ball moving left.
        if self.vx < 0.0
            && self.ball_x <= OPPONENT_X + PADDLE_W as f64
            && self.ball_x + BALL_SIZE > OPPONENT_X
            && overlaps(self.ball_y, self.opponent_y)
        {
            self.vx = -self.vx;
            self.ball_x = OPPONENT_X + PADDLE_W as f64;
            self.vy = hit_offset(self.ball_y, self.opponent_y);
        }

        // Out on the left: opponent missed, player point.
        if self.ball_x + BALL_SIZE < 0.0 {
            self.serve();
            return (1.0, false);
        }
        // Out on the right: player missed.
        if self.ball_x > FRAME_W as f64 {
            self.serve();
            return (-1.0, false);
        }
        (0.0, false)
    }

    pub fn expert_action(&self) -> usize {
        let paddle_center = self.player_y + PADDLE_H / 2.0;
        let target = if self.vx > 0.0 {
            // Predicted ball-center y at the player column, then a contact
            // offset chosen so the return lands at the far corner without
            // folding. The tracking opponent cannot cover that distance.
            let ticks = (PLAYER_X - BALL_SIZE - self.ball_x) / self.vx;
            let pred = reflect(self.ball_y + self.vy * ticks.max(0.0), Y_LIMIT) + BALL_SIZE / 2.0;
            let ticks_back = (PLAYER_X - BALL_SIZE - (OPPONENT_X + PADDLE_W as f64)) / BALL_SPEED_X;
            let corner = if pred >= FRAME_H as f64 / 2.0 { 2.0 } else { 20.0 };
            let vy_desired = (corner - pred) / ticks_back;
            let rel = (vy_desired / MAX_BALL_VY * (PADDLE_H / 2.0 + BALL_SIZE / 2.0))
                .clamp(-3.2, 3.2);
            pred - rel
        } else {
            FRAME_H as f64 / 2.0
        };
        if target < paddle_center - 0.5 {
            1
        } else if target > paddle_center + 0.5 {
            2
        } else {
            0
        }
    }

    pub fn fill_info(&self, info: &mut BTreeMap<String, f64>) {
        let norm = (FRAME_W - 1) as f64;
        info.insert("ball_x".into(), (self.ball_x + BALL_SIZE / 2.0) / norm);
        info.insert("ball_y".into(), (self.ball_y + BALL_SIZE / 2.0) / norm);
        info.insert(
            "player_x".into(),
            (PLAYER_X + PADDLE_W as f64 / 2.0) / norm,
        );
        info.insert("player_y".into(), (self.player_y + PADDLE_H / 2.0) / norm);
    }

    pub fn render(&self, data: &mut [f32], player_color: [f32; 3]) {
        fill_rect(
            data,
            OPPONENT_X,
            self.opponent_y,
            PADDLE_W,
            PADDLE_H as usize,
            OPPONENT_COLOR,
        );
        fill_rect(
            data,
            PLAYER_X,
            self.player_y,
            PADDLE_W,
            PADDLE_H as usize,
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

fn overlaps(ball_y: f64, paddle_y: f64) -> bool {
    ball_y + BALL_SIZE > paddle_y && ball_y < paddle_y + PADDLE_H
}

/// Vertical speed from the contact point: center hits return flat, edge hits
/// return steep.
fn hit_offset(ball_y: f64, paddle_y: f64) -> f64 {
    let rel = (ball_y + BALL_SIZE / 2.0) - (paddle_y + PADDLE_H / 2.0);
    (rel / (PADDLE_H / 2.0 + BALL_SIZE / 2.0) * MAX_BALL_VY).clamp(-MAX_BALL_VY, MAX_BALL_VY)
}
