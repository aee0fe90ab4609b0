//! Deterministic side-scrolling world: a bird under gravity that can flap,
//! and a stream of pipes with openings it has to fly through.
//!
//! Coordinates are logical pixels with the y-axis pointing down, so gravity
//! is a positive velocity increment and a flap a negative one. Velocities are
//! in pixels per tick.

mod episode;
mod render;

pub use episode::{
    read_frames, read_log, run_episode, write_frames, write_log, TickRecord, TrajectoryLog,
};
pub use render::{
    downsample_box, preprocess, render, Frame, FrameHistory, FrameStack, STACK_DEPTH, STACK_SIDE,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream used by environments, planners and training.
pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Action {
    Flap = 0,
    Noop = 1,
}

impl Action {
    pub const COUNT: usize = 2;
    pub const ALL: [Action; Action::COUNT] = [Action::Flap, Action::Noop];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Action {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Action::from_index(v as usize).ok_or_else(|| format!("unknown action index {v}"))
    }
}

/// Game constants. The defaults put the hover flap rate `g / dv` at 0.072.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub gravity_g: f64,
    pub flap_impulse_dv: f64,
    /// Standard deviation of an additive Gaussian on every velocity update.
    pub action_noise_sigma: f64,
    pub terminal_velocity: f64,
    pub world_width: f64,
    pub world_height: f64,
    pub bird_x: f64,
    pub bird_radius: f64,
    pub start_y: f64,
    pub scroll_speed: f64,
    pub pipe_spacing: f64,
    pub pipe_width: f64,
    pub gap_half_height: f64,
    pub gap_center_range: [f64; 2],
    /// Left edge of the first pipe at tick 0.
    pub first_obstacle_x: f64,
    pub obstacles_enabled: bool,
    pub rng_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            gravity_g: 0.36,
            flap_impulse_dv: 5.0,
            action_noise_sigma: 0.0,
            terminal_velocity: 5.0,
            world_width: 256.0,
            world_height: 256.0,
            bird_x: 64.0,
            bird_radius: 6.0,
            start_y: 128.0,
            scroll_speed: 2.0,
            pipe_spacing: 128.0,
            pipe_width: 32.0,
            gap_half_height: 48.0,
            gap_center_range: [64.0, 192.0],
            first_obstacle_x: 256.0,
            obstacles_enabled: true,
            rng_seed: 0,
        }
    }
}

impl EnvConfig {
    /// Flap probability at which the expected velocity change per tick is zero.
    pub fn hover_flap_probability(&self) -> f64 {
        self.gravity_g / self.flap_impulse_dv
    }

    /// Velocity change caused by an action, before gravity and noise.
    pub fn impact(&self, action: Action) -> f64 {
        match action {
            Action::Flap => -self.flap_impulse_dv,
            Action::Noop => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gravity_g", self.gravity_g),
            ("flap_impulse_dv", self.flap_impulse_dv),
            ("terminal_velocity", self.terminal_velocity),
            ("world_width", self.world_width),
            ("world_height", self.world_height),
            ("bird_radius", self.bird_radius),
            ("pipe_spacing", self.pipe_spacing),
            ("pipe_width", self.pipe_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.action_noise_sigma >= 0.0) {
            return Err(Error::Config("action_noise_sigma must be >= 0".into()));
        }
        if !(self.scroll_speed >= 0.0) {
            return Err(Error::Config("scroll_speed must be >= 0".into()));
        }
        if self.gap_half_height <= self.bird_radius {
            return Err(Error::Config(format!(
                "gap_half_height ({}) must exceed bird radius ({})",
                self.gap_half_height, self.bird_radius
            )));
        }
        let [lo, hi] = self.gap_center_range;
        if lo > hi || lo - self.gap_half_height <= 0.0 || hi + self.gap_half_height >= self.world_height
        {
            return Err(Error::Config(format!(
                "gap_center_range [{lo}, {hi}] does not keep gaps inside the world"
            )));
        }
        Ok(())
    }
}

/// A pipe pair: solid above and below an opening.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub gap_center_y: f64,
    pub gap_half_height: f64,
    pub width: f64,
}

impl Obstacle {
    pub fn gap_top(&self) -> f64 {
        self.gap_center_y - self.gap_half_height
    }

    pub fn gap_bottom(&self) -> f64 {
        self.gap_center_y + self.gap_half_height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub bird_y: f64,
    pub bird_vy: f64,
    pub bird_x: f64,
    /// Sorted by `x`.
    pub obstacles: Vec<Obstacle>,
    pub tick: u64,
    pub score: u64,
    pub alive: bool,
}

impl WorldState {
    /// A bird at rest at `y` in an empty sky.
    pub fn open_sky(cfg: &EnvConfig, y: f64) -> Self {
        WorldState {
            bird_y: y,
            bird_vy: 0.0,
            bird_x: cfg.bird_x,
            obstacles: Vec::new(),
            tick: 0,
            score: 0,
            alive: true,
        }
    }
}

/// Initial state of an episode; draws the first gap from `rng`.
pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> WorldState {
    let mut state = WorldState::open_sky(cfg, cfg.start_y);
    if cfg.obstacles_enabled {
        state.obstacles.push(spawn_obstacle(cfg, cfg.first_obstacle_x, rng));
        spawn_due(&mut state.obstacles, cfg, rng);
    }
    state.alive = !collided_with(&state, cfg);
    state
}

fn spawn_obstacle<R: Rng + ?Sized>(cfg: &EnvConfig, x: f64, rng: &mut R) -> Obstacle {
    let [lo, hi] = cfg.gap_center_range;
    let gap_center_y = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    Obstacle {
        x,
        gap_center_y,
        gap_half_height: cfg.gap_half_height,
        width: cfg.pipe_width,
    }
}

fn spawn_due<R: Rng + ?Sized>(obstacles: &mut Vec<Obstacle>, cfg: &EnvConfig, rng: &mut R) {
    while let Some(last) = obstacles.last() {
        if last.x > cfg.world_width - cfg.pipe_spacing {
            break;
        }
        let x = last.x + cfg.pipe_spacing;
        obstacles.push(spawn_obstacle(cfg, x, rng));
    }
}

/// Advance the world one tick.
///
/// Velocity update is additive: `vy + g + impact(action) + noise`, clamped to
/// the terminal velocity. The noise draw only touches `rng` when the
/// configured sigma is non-zero.
pub fn step<R: Rng + ?Sized>(
    state: &WorldState,
    action: Action,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<WorldState> {
    if !state.alive {
        return Err(Error::Contract(format!(
            "step called on terminal state at tick {}",
            state.tick
        )));
    }
    let noise = if cfg.action_noise_sigma > 0.0 {
        cfg.action_noise_sigma * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    let tv = cfg.terminal_velocity;
    let mut next = state.clone();
    next.bird_vy = (state.bird_vy + cfg.gravity_g + cfg.impact(action) + noise).clamp(-tv, tv);
    next.bird_y = state.bird_y + next.bird_vy;

    for ob in next.obstacles.iter_mut() {
        let old_right = ob.x + ob.width;
        ob.x -= cfg.scroll_speed;
        if old_right >= next.bird_x && ob.x + ob.width < next.bird_x {
            next.score += 1;
        }
    }
    next.obstacles.retain(|ob| ob.x + ob.width >= 0.0);
    if cfg.obstacles_enabled {
        if next.obstacles.is_empty() {
            next.obstacles.push(spawn_obstacle(cfg, cfg.world_width, rng));
        }
        spawn_due(&mut next.obstacles, cfg, rng);
    }
    next.tick += 1;
    next.alive = !collided_with(&next, cfg);
    Ok(next)
}

/// True iff the bird overlaps the floor, the ceiling or a pipe body.
/// Touching without overlap does not count.
pub fn collided(state: &WorldState, cfg: &EnvConfig) -> bool {
    collided_with(state, cfg)
}

fn collided_with(state: &WorldState, cfg: &EnvConfig) -> bool {
    bird_hits(cfg, state.bird_x, state.bird_y, &state.obstacles, 0.0)
}

/// Collision test for a bird at `(bird_x, y)` against `obstacles` shifted left
/// by `shift` pixels. Shared by the environment and planner rollouts.
#[inline]
pub(crate) fn bird_hits(cfg: &EnvConfig, bird_x: f64, y: f64, obstacles: &[Obstacle], shift: f64) -> bool {
    let r = cfg.bird_radius;
    if y + r > cfg.world_height || y - r < 0.0 {
        return true;
    }
    let r2 = r * r;
    for ob in obstacles {
        let x0 = ob.x - shift;
        let x1 = x0 + ob.width;
        if x0 > bird_x + r {
            // sorted by x, nothing further right can touch
            break;
        }
        if x1 < bird_x - r {
            continue;
        }
        let dx = bird_x - bird_x.clamp(x0, x1);
        let top = ob.gap_top();
        let bottom = ob.gap_bottom();
        let dy_top = y - y.clamp(0.0, top);
        let dy_bottom = y - y.clamp(bottom, cfg.world_height);
        let d2 = dx * dx + (dy_top * dy_top).min(dy_bottom * dy_bottom);
        if d2 < r2 {
            return true;
        }
    }
    false
}

/// An environment instance owning its state and random stream.
#[derive(Clone, Debug)]
pub struct Env {
    cfg: EnvConfig,
    state: WorldState,
    rng: SimRng,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = SimRng::seed_from_u64(cfg.rng_seed);
        let state = reset(&cfg, &mut rng);
        Ok(Env { cfg, state, rng })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn step(&mut self, action: Action) -> Result<&WorldState> {
        self.state = step(&self.state, action, &self.cfg, &mut self.rng)?;
        Ok(&self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn still(cfg: &EnvConfig) -> WorldState {
        WorldState::open_sky(cfg, 128.0)
    }

    fn no_pipes() -> EnvConfig {
        EnvConfig {
            obstacles_enabled: false,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn pure_gravity_step() {
        let cfg = no_pipes();
        let mut rng = SimRng::seed_from_u64(1);
        let s = still(&cfg);
        let n = step(&s, Action::Noop, &cfg, &mut rng).unwrap();
        assert_eq!(n.bird_vy, 0.36);
        assert_eq!(n.bird_y, 128.0 + 0.36);
    }

    #[test]
    fn flap_is_additive() {
        let cfg = no_pipes();
        let mut rng = SimRng::seed_from_u64(1);
        let n = step(&still(&cfg), Action::Flap, &cfg, &mut rng).unwrap();
        assert_eq!(n.bird_vy, 0.0 + 0.36 - 5.0);
        assert!((n.bird_vy - -4.64).abs() < 1e-12);
    }

    #[test]
    fn hover_probability_is_0_072() {
        assert_eq!(EnvConfig::default().hover_flap_probability(), 0.072);
    }

    #[test]
    fn terminal_velocity_clamps() {
        let cfg = no_pipes();
        let mut rng = SimRng::seed_from_u64(1);
        let mut s = still(&cfg);
        s.bird_vy = 4.9;
        let n = step(&s, Action::Noop, &cfg, &mut rng).unwrap();
        assert_eq!(n.bird_vy, 5.0);
        s.bird_vy = -4.0;
        let n = step(&s, Action::Flap, &cfg, &mut rng).unwrap();
        assert_eq!(n.bird_vy, -5.0);
    }

    #[test]
    fn stepping_terminal_state_is_rejected() {
        let cfg = no_pipes();
        let mut rng = SimRng::seed_from_u64(1);
        let mut s = still(&cfg);
        s.alive = false;
        assert!(matches!(
            step(&s, Action::Noop, &cfg, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn floor_and_ceiling() {
        let cfg = no_pipes();
        let mut s = still(&cfg);
        s.bird_y = cfg.world_height;
        assert!(collided(&s, &cfg));
        s.bird_y = 0.0;
        assert!(collided(&s, &cfg));
        s.bird_y = cfg.bird_radius;
        assert!(!collided(&s, &cfg), "touching is not overlapping");
    }

    fn pipe_at_bird(cfg: &EnvConfig) -> Obstacle {
        Obstacle {
            x: cfg.bird_x - 10.0,
            gap_center_y: 128.0,
            gap_half_height: 36.0,
            width: 32.0,
        }
    }

    #[test]
    fn centred_in_gap_is_safe() {
        let cfg = EnvConfig::default();
        let mut s = still(&cfg);
        s.obstacles.push(pipe_at_bird(&cfg));
        s.bird_y = 128.0;
        assert!(!collided(&s, &cfg));
    }

    #[test]
    fn one_pixel_into_lower_pipe_collides() {
        let cfg = EnvConfig::default();
        let mut s = still(&cfg);
        let ob = pipe_at_bird(&cfg);
        s.obstacles.push(ob);
        s.bird_y = ob.gap_center_y + ob.gap_half_height - cfg.bird_radius + 1.0;
        assert!(collided(&s, &cfg));
        s.bird_y = ob.gap_center_y - ob.gap_half_height + cfg.bird_radius - 1.0;
        assert!(collided(&s, &cfg));
        s.bird_y = ob.gap_center_y + ob.gap_half_height - cfg.bird_radius - 1.0;
        assert!(!collided(&s, &cfg));
    }

    #[test]
    fn pipe_corner_uses_circle_distance() {
        let cfg = EnvConfig::default();
        let mut s = still(&cfg);
        let ob = Obstacle {
            x: cfg.bird_x + 4.0,
            ..pipe_at_bird(&cfg)
        };
        s.obstacles.push(ob);
        // corner at (bird_x + 4, gap_bottom); centre 4 px left and 4 px above
        s.bird_y = ob.gap_bottom() - 4.0;
        assert!(collided(&s, &cfg)); // distance sqrt(32) < 6
        s.bird_y = ob.gap_bottom() - 5.0;
        assert!(!collided(&s, &cfg)); // distance sqrt(41) > 6
    }

    #[test]
    fn score_counts_each_pipe_once() {
        let cfg = EnvConfig {
            gap_center_range: [128.0, 128.0],
            ..EnvConfig::default()
        };
        let mut env = Env::new(cfg.clone()).unwrap();
        let mut last = 0;
        let mut increments = 0;
        // hold altitude: flap whenever below 140 and falling
        for _ in 0..600 {
            let s = env.state().clone();
            let a = if s.bird_y > 140.0 && s.bird_vy > 0.0 {
                Action::Flap
            } else {
                Action::Noop
            };
            let s = env.step(a).unwrap().clone();
            assert!(s.alive, "controller crashed at tick {}", s.tick);
            assert!(s.score >= last);
            if s.score > last {
                assert_eq!(s.score, last + 1);
                increments += 1;
            }
            last = s.score;
            assert!(s.obstacles.windows(2).all(|w| w[0].x < w[1].x));
        }
        // first pipe right edge passes bird_x after (256 + 32 - 64) / 2 ticks, then every 64
        let expected = (600 - 113) / 64 + 1;
        assert_eq!(increments, expected);
    }

    #[test]
    fn new_pipes_enter_at_right_edge() {
        let cfg = EnvConfig::default();
        let mut rng = SimRng::seed_from_u64(3);
        let mut s = reset(&cfg, &mut rng);
        assert_eq!(s.obstacles.len(), 1);
        for _ in 0..64 {
            s.bird_y = 128.0;
            s.bird_vy = 0.0;
            s.obstacles.iter_mut().for_each(|o| o.gap_center_y = 128.0);
            s = step(&s, Action::Noop, &cfg, &mut rng).unwrap();
        }
        assert_eq!(s.obstacles.len(), 2);
        assert_eq!(s.obstacles[1].x, cfg.world_width);
    }

    #[test]
    fn noise_only_consumes_rng_when_enabled() {
        let cfg = no_pipes();
        let mut a = SimRng::seed_from_u64(9);
        let b = a.clone();
        step(&still(&cfg), Action::Noop, &cfg, &mut a).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(EnvConfig::default().validate().is_ok());
        let bad = EnvConfig {
            gap_half_height: 5.0,
            ..EnvConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EnvConfig {
            gravity_g: 0.0,
            ..EnvConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn action_serializes_as_index() {
        assert_eq!(serde_json::to_string(&Action::Noop).unwrap(), "1");
        assert_eq!(serde_json::from_str::<Action>("0").unwrap(), Action::Flap);
        assert!(serde_json::from_str::<Action>("2").is_err());
    }
}
