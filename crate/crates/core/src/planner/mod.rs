//! Budgeted plan sampling with survival conditioning.
//!
//! Each decision draws action probabilities from a Dirichlet, samples an
//! action plan of the current horizon, rolls it forward through the estimated
//! dynamics and keeps it only if the bird survives. Every surviving plan adds
//! its action counts to α and widens the horizon. When the budget runs out the
//! first actions of the kept plans are tallied and the most frequent wins.

pub mod dirichlet;

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{sample_impact, EstimatedDynamics};
use crate::env::{bird_hits, Action, EnvConfig, WorldState};
use crate::error::{Error, Result};

pub use dirichlet::{categorical_sample, dirichlet_sample, gamma_sample, ln_gamma_sample};

/// Dirichlet concentration, one strictly positive entry per action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != Action::COUNT {
            return Err(Error::Shape(format!(
                "alpha has {} entries, expected {}",
                alpha.len(),
                Action::COUNT
            )));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Contract(format!("alpha entries must be positive, got {a}")));
        }
        Ok(DirichletParams { alpha })
    }

    /// The all-ones prior (PB-Uniform).
    pub fn uniform() -> Self {
        DirichletParams {
            alpha: vec![1.0; Action::COUNT],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn total(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let s = self.total();
        self.alpha.iter().map(|a| a / s).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        dirichlet_sample(&self.alpha, rng)
    }
}

/// All-ones concentration for `n_actions` actions.
pub fn uniform_prior(n_actions: usize) -> Result<Vec<f64>> {
    if n_actions < 2 {
        return Err(Error::Config("a prior needs at least two actions".into()));
    }
    Ok(vec![1.0; n_actions])
}

/// One sampled plan and its rollout outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanSample {
    pub actions: Vec<Action>,
    pub impacts: Vec<f64>,
    pub horizon: usize,
    pub collided: bool,
}

impl PlanSample {
    pub fn first_action(&self) -> Action {
        self.actions[0]
    }

    pub fn counts(&self) -> [u64; Action::COUNT] {
        let mut c = [0u64; Action::COUNT];
        for a in &self.actions {
            c[a.index()] += 1;
        }
        c
    }
}

/// Collision-free plans in the order they were found.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleStore {
    plans: Vec<PlanSample>,
}

impl SampleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, plan: PlanSample) -> Result<()> {
        if plan.collided {
            return Err(Error::Contract("sample store only accepts surviving plans".into()));
        }
        self.plans.push(plan);
        Ok(())
    }

    pub fn plans(&self) -> &[PlanSample] {
        &self.plans
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Stop after this many sampled plans.
    Samples(u64),
    /// Stop sampling before the next rollout would run past this many
    /// milliseconds.
    Ms(f64),
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Budget::Samples(0) => Err(Error::Config("sample budget must be positive".into())),
            Budget::Ms(ms) if !(ms > 0.0 && ms.is_finite()) => {
                Err(Error::Config(format!("time budget must be positive, got {ms} ms")))
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Budget::Samples(_) => "samples",
            Budget::Ms(_) => "ms",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Budget::Samples(n) => n as f64,
            Budget::Ms(ms) => ms,
        }
    }
}

/// What to do when the sample store cannot decide (empty, or tied counts).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRule {
    /// Largest prior mean α_i / Σα, lowest index on exact ties.
    #[default]
    PriorMean,
    /// Always this action (among tied candidates if it is one).
    Fixed(Action),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub initial_horizon: usize,
    pub horizon_increment: usize,
    pub budget: Budget,
    pub fallback: FallbackRule,
    pub rng_seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            initial_horizon: 30,
            horizon_increment: 1,
            budget: Budget::Samples(64),
            fallback: FallbackRule::PriorMean,
            rng_seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_horizon < 1 {
            return Err(Error::Config("initial horizon must be at least 1".into()));
        }
        self.budget.validate()
    }
}

/// Empirical distribution of the first action over surviving plans.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub counts: [u64; Action::COUNT],
    /// `None` when the store was empty.
    pub probabilities: Option<[f64; Action::COUNT]>,
}

impl ActionDistribution {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_undefined(&self) -> bool {
        self.probabilities.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerDiagnostics {
    pub samples: u64,
    pub survivors: u64,
    pub final_h: usize,
    pub final_alpha: Vec<f64>,
    pub elapsed_us: u64,
    /// Set when the fallback rule picked the action (no survivors or a tie).
    pub fallback: bool,
}

/// The planner's forward model: world geometry plus the estimated dynamics.
#[derive(Clone, Copy, Debug)]
pub struct ForwardModel<'a> {
    pub env: &'a EnvConfig,
    pub dynamics: &'a EstimatedDynamics,
}

/// Roll `impacts` forward from `s`; true iff any visited state collides.
///
/// Only obstacles already in `s` are simulated (pipes that have not spawned
/// yet are unknown). `s` is not modified.
pub fn simulate(s: &WorldState, impacts: &[f64], model: ForwardModel<'_>) -> bool {
    let tv = model.env.terminal_velocity;
    let g = model.dynamics.g_hat;
    let (mut y, mut vy) = (s.bird_y, s.bird_vy);
    for (k, gamma) in impacts.iter().enumerate() {
        vy = (vy + g + gamma).clamp(-tv, tv);
        y += vy;
        let shift = (k + 1) as f64 * model.env.scroll_speed;
        if bird_hits(model.env, s.bird_x, y, &s.obstacles, shift) {
            return true;
        }
    }
    false
}

/// Draw θ ~ Dir(α), `h` i.i.d. actions from θ, their velocity impacts, and
/// simulate the plan.
pub fn sample_actions<R: Rng + ?Sized>(
    s: &WorldState,
    alpha: &DirichletParams,
    h: usize,
    model: ForwardModel<'_>,
    rng: &mut R,
) -> PlanSample {
    debug_assert!(h >= 1);
    let theta = alpha.sample(rng);
    let actions: Vec<Action> = (0..h)
        .map(|_| Action::ALL[categorical_sample(&theta, rng)])
        .collect();
    let impacts: Vec<f64> = actions
        .iter()
        .map(|&a| sample_impact(model.dynamics, a, rng))
        .collect();
    let collided = simulate(s, &impacts, model);
    PlanSample {
        horizon: h,
        actions,
        impacts,
        collided,
    }
}

/// Add the plan's action counts to α. Colliding plans are rejected.
pub fn update_alpha(alpha: &DirichletParams, plan: &PlanSample) -> Result<DirichletParams> {
    if plan.collided {
        return Err(Error::Contract("alpha update with a colliding plan".into()));
    }
    let counts = plan.counts();
    let alpha = alpha
        .alpha
        .iter()
        .zip(counts)
        .map(|(a, c)| a + c as f64)
        .collect();
    Ok(DirichletParams { alpha })
}

/// Tally the first action of every stored plan.
pub fn estimate_conditional(m: &SampleStore) -> ActionDistribution {
    let mut counts = [0u64; Action::COUNT];
    for plan in m.plans() {
        counts[plan.first_action().index()] += 1;
    }
    let total: u64 = counts.iter().sum();
    let probabilities = (total > 0).then(|| counts.map(|c| c as f64 / total as f64));
    ActionDistribution {
        counts,
        probabilities,
    }
}

/// Pick the most frequent first action. Returns the action and whether the
/// fallback rule had to break an empty store or a tie.
pub fn select_action(
    dist: &ActionDistribution,
    prior: &DirichletParams,
    rule: FallbackRule,
) -> (Action, bool) {
    let candidates: Vec<Action> = if dist.total() == 0 {
        Action::ALL.to_vec()
    } else {
        let best = *dist.counts.iter().max().unwrap();
        Action::ALL
            .into_iter()
            .filter(|a| dist.counts[a.index()] == best)
            .collect()
    };
    if candidates.len() == 1 {
        return (candidates[0], false);
    }
    let pick = match rule {
        FallbackRule::Fixed(a) if candidates.contains(&a) => a,
        _ => {
            let mean = prior.mean();
            // strict comparison keeps the lowest index on exact ties
            candidates
                .iter()
                .copied()
                .reduce(|best, a| if mean[a.index()] > mean[best.index()] { a } else { best })
                .unwrap()
        }
    };
    (pick, true)
}

/// Everything a planning call produced.
#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub action: Action,
    pub diagnostics: PlannerDiagnostics,
    pub store: SampleStore,
    pub conditional: ActionDistribution,
}

/// Sample, simulate and condition until the budget is spent, then choose.
///
/// `prior` is left untouched; α updates only live for this call.
pub fn plan<R: Rng + ?Sized>(
    s: &WorldState,
    prior: &DirichletParams,
    cfg: &PlannerConfig,
    model: ForwardModel<'_>,
    rng: &mut R,
) -> Result<PlanOutcome> {
    if !s.alive {
        return Err(Error::Contract("planning from a terminal state".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let deadline = match cfg.budget {
        Budget::Ms(ms) => Some(Duration::from_secs_f64(ms / 1000.0)),
        Budget::Samples(_) => None,
    };
    let mut alpha = prior.clone();
    let mut h = cfg.initial_horizon;
    let mut store = SampleStore::new();
    let mut samples = 0u64;
    // longest iteration so far, the estimate for the next one (colliding plans
    // stop early, so the latest can be much shorter than the next)
    let mut longest = Duration::ZERO;
    let mut before = Duration::ZERO;
    loop {
        let now = start.elapsed();
        if samples > 0 {
            longest = longest.max(now - before);
        }
        before = now;
        match (cfg.budget, deadline) {
            (Budget::Samples(n), _) if samples >= n => break,
            (_, Some(d)) if now + longest >= d => break,
            _ => {}
        }
        let sample = sample_actions(s, &alpha, h, model, rng);
        samples += 1;
        if !sample.collided {
            alpha = update_alpha(&alpha, &sample)?;
            store.push(sample)?;
            h += cfg.horizon_increment;
        }
    }
    let conditional = estimate_conditional(&store);
    let (action, fallback) = select_action(&conditional, prior, cfg.fallback);
    let diagnostics = PlannerDiagnostics {
        samples,
        survivors: store.len() as u64,
        final_h: h,
        final_alpha: alpha.alpha.clone(),
        elapsed_us: start.elapsed().as_micros() as u64,
        fallback,
    };
    Ok(PlanOutcome {
        action,
        diagnostics,
        store,
        conditional,
    })
}

/// [`plan`] reduced to the chosen action and its diagnostics.
pub fn get_action<R: Rng + ?Sized>(
    s: &WorldState,
    prior: &DirichletParams,
    cfg: &PlannerConfig,
    model: ForwardModel<'_>,
    rng: &mut R,
) -> Result<(Action, PlannerDiagnostics)> {
    plan(s, prior, cfg, model, rng).map(|o| (o.action, o.diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Obstacle, SimRng};
    use rand::SeedableRng;

    fn env() -> EnvConfig {
        EnvConfig::default()
    }

    fn plan_of(actions: &[Action]) -> PlanSample {
        PlanSample {
            actions: actions.to_vec(),
            impacts: vec![0.0; actions.len()],
            horizon: actions.len(),
            collided: false,
        }
    }

    #[test]
    fn alpha_update_counts() {
        use Action::*;
        let a = DirichletParams::uniform();
        let b = update_alpha(&a, &plan_of(&[Flap, Noop, Noop])).unwrap();
        assert_eq!(b.as_slice(), &[2.0, 3.0]);
        let a = DirichletParams::new(vec![3.6, 16.8]).unwrap();
        let b = update_alpha(&a, &plan_of(&[Noop; 5])).unwrap();
        assert_eq!(b.as_slice(), &[3.6, 21.8]);
    }

    #[test]
    fn alpha_update_rejects_collisions() {
        let mut p = plan_of(&[Action::Noop]);
        p.collided = true;
        assert!(matches!(
            update_alpha(&DirichletParams::uniform(), &p),
            Err(Error::Contract(_))
        ));
        assert!(SampleStore::new().push(p).is_err());
    }

    #[test]
    fn dirichlet_params_validation() {
        assert!(DirichletParams::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletParams::new(vec![1.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, f64::NAN]).is_err());
        assert_eq!(uniform_prior(2).unwrap(), vec![1.0, 1.0]);
        assert!(uniform_prior(1).is_err());
        assert_eq!(DirichletParams::uniform().mean(), vec![0.5, 0.5]);
    }

    #[test]
    fn conditional_counts_first_actions() {
        use Action::*;
        let mut m = SampleStore::new();
        for first in [Flap, Flap, Noop] {
            m.push(plan_of(&[first, Noop])).unwrap();
        }
        let d = estimate_conditional(&m);
        assert_eq!(d.counts, [2, 1]);
        let p = d.probabilities.unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);

        let d = estimate_conditional(&SampleStore::new());
        assert_eq!(d.counts, [0, 0]);
        assert!(d.is_undefined());
    }

    #[test]
    fn fallback_prefers_prior_mean() {
        let empty = estimate_conditional(&SampleStore::new());
        let prior = DirichletParams::new(vec![0.7, 19.7]).unwrap();
        assert_eq!(select_action(&empty, &prior, FallbackRule::PriorMean), (Action::Noop, true));
        let prior = DirichletParams::new(vec![3.0, 3.0]).unwrap();
        assert_eq!(select_action(&empty, &prior, FallbackRule::PriorMean), (Action::Flap, true));
        assert_eq!(
            select_action(&empty, &prior, FallbackRule::Fixed(Action::Noop)),
            (Action::Noop, true)
        );
        let decided = ActionDistribution {
            counts: [1, 4],
            probabilities: Some([0.2, 0.8]),
        };
        assert_eq!(select_action(&decided, &prior, FallbackRule::PriorMean), (Action::Noop, false));
    }

    #[test]
    fn simulate_free_fall_clearance() {
        let cfg = EnvConfig {
            terminal_velocity: 10.0,
            ..env()
        };
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let s = WorldState::open_sky(&cfg, 128.0);
        // fall after k ticks = 0.36 k (k + 1) / 2; clearance to floor is 122
        // k = 25 -> 117 (safe), k = 26 -> 126.36 (hit)
        assert!(!simulate(&s, &[0.0; 25], model));
        assert!(simulate(&s, &[0.0; 26], model));
    }

    #[test]
    fn simulate_one_pixel_above_floor() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let s = WorldState::open_sky(&cfg, cfg.world_height - cfg.bird_radius - 1.0);
        let mut s = s;
        s.bird_vy = 1.0;
        assert!(simulate(&s, &[0.0], model));
        let mut rng = SimRng::seed_from_u64(0);
        // a sampled Noop at h = 1 must collide
        let noop_heavy = DirichletParams::new(vec![1e-3, 1e6]).unwrap();
        let p = sample_actions(&s, &noop_heavy, 1, model, &mut rng);
        assert_eq!(p.actions, vec![Action::Noop]);
        assert!(p.collided);
    }

    #[test]
    fn simulate_matches_environment_step() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let mut rng = SimRng::seed_from_u64(8);
        let mut s = crate::env::reset(&cfg, &mut rng);
        s.obstacles[0].x = 100.0;
        let actions = [Action::Noop, Action::Flap, Action::Noop, Action::Noop, Action::Flap];
        let impacts: Vec<f64> = actions.iter().map(|&a| cfg.impact(a)).collect();
        for h in 1..=actions.len() {
            let mut cur = s.clone();
            let mut hit = false;
            for &a in &actions[..h] {
                cur = crate::env::step(&cur, a, &cfg, &mut rng).unwrap();
                if !cur.alive {
                    hit = true;
                    break;
                }
            }
            assert_eq!(simulate(&s, &impacts[..h], model), hit);
        }
    }

    #[test]
    fn simulate_sees_pipes() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let mut s = WorldState::open_sky(&cfg, 128.0);
        s.obstacles.push(Obstacle {
            x: cfg.bird_x + 20.0,
            gap_center_y: 60.0,
            gap_half_height: 36.0,
            width: 32.0,
        });
        // hovering at 128 runs into the lower pipe within ~8 ticks
        let hover: Vec<f64> = vec![-0.36; 12];
        let hover_dyn = EstimatedDynamics { g_hat: 0.36, ..dyn_ };
        let model2 = ForwardModel { env: &cfg, dynamics: &hover_dyn };
        assert!(simulate(&s, &hover, model2));
        assert!(simulate(&s, &hover, model));
        let state_before = s.clone();
        simulate(&s, &hover, model);
        assert_eq!(s, state_before);
    }

    #[test]
    fn near_certain_flap_prior_gives_all_flap_plans() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let s = WorldState::open_sky(&cfg, 128.0);
        let alpha = DirichletParams::new(vec![1e6, 1.0]).unwrap();
        let mut rng = SimRng::seed_from_u64(21);
        let all_flap = (0..1000)
            .filter(|_| sample_actions(&s, &alpha, 1, model, &mut rng).actions == [Action::Flap])
            .count();
        assert!(all_flap >= 990);
    }

    #[test]
    fn plan_lengths_match_horizon() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let s = WorldState::open_sky(&cfg, 128.0);
        let mut rng = SimRng::seed_from_u64(2);
        for h in 1..40 {
            let p = sample_actions(&s, &DirichletParams::uniform(), h, model, &mut rng);
            assert_eq!((p.actions.len(), p.impacts.len(), p.horizon), (h, h, h));
        }
    }

    #[test]
    fn boxed_in_bird_falls_back() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        // at terminal speed 0.2 px above the floor: even a flap leaves vy = 0.36
        let mut s = WorldState::open_sky(&cfg, cfg.world_height - cfg.bird_radius - 0.2);
        s.bird_vy = cfg.terminal_velocity;
        let prior = DirichletParams::new(vec![3.6, 16.8]).unwrap();
        let pc = PlannerConfig {
            budget: Budget::Samples(200),
            ..Default::default()
        };
        let mut rng = SimRng::seed_from_u64(0);
        let (a, d) = get_action(&s, &prior, &pc, model, &mut rng).unwrap();
        assert_eq!(a, Action::Noop);
        assert!(d.fallback);
        assert_eq!((d.samples, d.survivors, d.final_h), (200, 0, 30));
        assert_eq!(d.final_alpha, vec![3.6, 16.8]);
    }

    #[test]
    fn sample_budget_is_deterministic() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let mut rng = SimRng::seed_from_u64(4);
        let s = crate::env::reset(&cfg, &mut rng);
        let pc = PlannerConfig {
            budget: Budget::Samples(300),
            ..Default::default()
        };
        let run = |seed| {
            let mut rng = SimRng::seed_from_u64(seed);
            let mut d = plan(&s, &DirichletParams::uniform(), &pc, model, &mut rng).unwrap();
            d.diagnostics.elapsed_us = 0;
            (d.action, d.diagnostics, d.store)
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn dead_state_is_rejected() {
        let cfg = env();
        let dyn_ = EstimatedDynamics::ground_truth(&cfg);
        let model = ForwardModel { env: &cfg, dynamics: &dyn_ };
        let mut s = WorldState::open_sky(&cfg, 128.0);
        s.alive = false;
        let mut rng = SimRng::seed_from_u64(0);
        assert!(get_action(&s, &DirichletParams::uniform(), &PlannerConfig::default(), model, &mut rng).is_err());
    }

    #[test]
    fn diagnostics_json_fields() {
        let d = PlannerDiagnostics {
            samples: 3,
            survivors: 1,
            final_h: 11,
            final_alpha: vec![1.0, 11.0],
            elapsed_us: 42,
            fallback: false,
        };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"samples":3,"survivors":1,"final_h":11,"final_alpha":[1.0,11.0],"elapsed_us":42,"fallback":false}"#
        );
    }

    #[test]
    fn budget_validation() {
        assert!(Budget::Samples(0).validate().is_err());
        assert!(Budget::Ms(0.0).validate().is_err());
        assert!(Budget::Ms(1.5).validate().is_ok());
        let pc = PlannerConfig {
            initial_horizon: 0,
            ..Default::default()
        };
        assert!(pc.validate().is_err());
    }
}
