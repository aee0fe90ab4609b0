use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Frame, FrameStack, SimRng, TrajectoryLog, STACK_DEPTH};
use crate::error::{Error, Result};
use crate::prior::cnn::{CnnParams, DEFAULT_ALPHA_FLOOR, INPUT_LEN};
use crate::prior::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    /// Window length Δ, in ticks, over which action counts form the target.
    pub delta_window: usize,
    pub rng_seed: u64,
    pub alpha_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            minibatch_size: 32,
            epochs: 4,
            delta_window: 10,
            rng_seed: 0,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.minibatch_size == 0 || self.epochs == 0 || self.delta_window == 0 {
            return Err(Error::Config(
                "minibatch_size, epochs and delta_window must be positive".into(),
            ));
        }
        if !(self.alpha_floor > 0.0) {
            return Err(Error::Config("alpha_floor must be positive".into()));
        }
        Ok(())
    }
}

/// One `(φ(s), α)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub input: FrameStack,
    /// Action counts over the Δ ticks starting at `s`.
    pub target_alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct ExampleRef {
    frames: [usize; STACK_DEPTH],
    target: [f64; Action::COUNT],
}

/// Training examples sharing one frame pool, so overlapping stacks are not
/// copied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    frames: Vec<Frame>,
    examples: Vec<ExampleRef>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example(&self, i: usize) -> TrainingExample {
        let e = &self.examples[i];
        let frames = e.frames.map(|f| self.frames[f].clone());
        TrainingExample {
            input: FrameStack::new(frames).expect("dataset frames are 80x80"),
            target_alpha: e.target.to_vec(),
        }
    }

    pub fn push(&mut self, example: TrainingExample) {
        let base = self.frames.len();
        self.frames.extend(example.input.frames().iter().cloned());
        let mut target = [0.0; Action::COUNT];
        target.copy_from_slice(&example.target_alpha);
        self.examples.push(ExampleRef {
            frames: std::array::from_fn(|i| base + i),
            target,
        });
    }

    pub fn targets(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.examples.iter().map(|e| &e.target[..])
    }

    /// Copy examples `idx` into contiguous input and target buffers.
    pub fn fill_batch<F: Scalar>(&self, idx: &[usize], inputs: &mut Vec<F>, targets: &mut Vec<F>) {
        let plane = INPUT_LEN / STACK_DEPTH;
        inputs.clear();
        targets.clear();
        inputs.reserve(idx.len() * INPUT_LEN);
        for &i in idx {
            let e = &self.examples[i];
            for &f in &e.frames {
                let px = &self.frames[f].pixels;
                debug_assert_eq!(px.len(), plane);
                inputs.extend(px.iter().map(|&p| F::of(p as f64)));
            }
            targets.extend(e.target.iter().map(|&t| F::of(t)));
        }
    }
}

/// Turn logged episodes into `(frame stack, action counts)` examples.
///
/// For each tick `t` with a full window, the target counts each action over
/// ticks `t .. t + Δ - 1` (the decision at `t` included). Windows containing a
/// negative reward are dropped.
pub fn build_dataset(logs: &[TrajectoryLog], delta: usize) -> Result<Dataset> {
    if delta == 0 {
        return Err(Error::Config("delta window must be at least 1".into()));
    }
    let mut data = Dataset::default();
    for log in logs {
        if log.records.is_empty() {
            continue;
        }
        if log.frames.is_empty() {
            return Err(Error::Format("trajectory log has no frames".into()));
        }
        log.validate()?;
        let base = data.frames.len();
        data.frames.extend(log.frames.iter().cloned());
        let recs = &log.records;
        for t in 0..recs.len().saturating_sub(delta - 1) {
            let window = &recs[t..t + delta];
            if window.iter().any(|r| r.reward < 0) {
                continue;
            }
            let mut target = [0.0; Action::COUNT];
            for r in window {
                target[r.action.index()] += 1.0;
            }
            let frames = std::array::from_fn(|k| {
                let back = STACK_DEPTH - 1 - k;
                base + recs[t.saturating_sub(back)].frame_idx as usize
            });
            data.examples.push(ExampleRef { frames, target });
        }
    }
    Ok(data)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub params: CnnParams<F>,
    /// Mean minibatch loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Shuffled minibatch SGD on the squared concentration error.
pub fn sgd_fit<F: Scalar>(
    kappa: &CnnParams<F>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientObservations(
            "training set is empty".into(),
        ));
    }
    let mut params = kappa.clone();
    let mut rng = SimRng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let lr = F::of(cfg.learning_rate);
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.minibatch_size) {
            data.fill_batch(chunk, &mut inputs, &mut targets);
            let (loss, grad) = params.loss_and_grad(&inputs, &targets, chunk.len())?;
            let loss = loss.f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            sum += loss * chunk.len() as f64;
            params.sgd_step(&grad, lr);
        }
        let mean = sum / data.len() as f64;
        if !params.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        history.push(mean);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

/// Mean loss over the whole dataset, evaluated in chunks.
pub fn dataset_loss<F: Scalar>(kappa: &CnnParams<F>, data: &Dataset, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("loss of an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    let mut sum = 0.0;
    for c in idx.chunks(chunk.max(1)) {
        data.fill_batch(c, &mut inputs, &mut targets);
        sum += kappa.loss(&inputs, &targets, c.len())?.f64() * c.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TickRecord;

    fn log_of(actions: &[Action], rewards: &[i32]) -> TrajectoryLog {
        let records = actions
            .iter()
            .zip(rewards)
            .enumerate()
            .map(|(t, (&action, &reward))| TickRecord {
                tick: t as u64,
                y: 0.0,
                vy: 0.0,
                action,
                reward,
                collision: reward < 0,
                frame_idx: t as u64,
            })
            .collect();
        let frames = (0..actions.len())
            .map(|t| Frame::filled(80, 80, t as f32 / 100.0))
            .collect();
        TrajectoryLog {
            records,
            frames,
            final_score: 0,
        }
    }

    #[test]
    fn window_counts_include_current_tick() {
        use Action::*;
        let log = log_of(&[Flap, Noop, Noop, Noop, Noop], &[0; 5]);
        let d = build_dataset(&[log], 4).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.example(0).target_alpha, vec![1.0, 3.0]);
        assert_eq!(d.example(1).target_alpha, vec![0.0, 4.0]);
    }

    #[test]
    fn stacks_pad_at_episode_start() {
        use Action::*;
        let log = log_of(&[Noop; 8], &[0; 8]);
        let d = build_dataset(&[log], 2).unwrap();
        let level = |e: &TrainingExample| -> Vec<f32> {
            e.input.frames().iter().map(|f| f.pixels[0]).collect()
        };
        assert_eq!(level(&d.example(0)), vec![0.0, 0.0, 0.0, 0.0]);
        assert_eq!(level(&d.example(2)), vec![0.0, 0.0, 0.01, 0.02]);
        assert_eq!(level(&d.example(5)), vec![0.02, 0.03, 0.04, 0.05]);
    }

    #[test]
    fn negative_windows_are_excluded() {
        use Action::*;
        let log = log_of(&[Noop, Flap, Noop, Noop, Noop, Noop], &[0, 0, 1, 0, 0, -1]);
        let d = build_dataset(&[log], 3).unwrap();
        // windows starting at 0, 1, 2 avoid tick 5; 3 does not
        assert_eq!(d.len(), 3);
        for t in d.targets() {
            assert_eq!(t.iter().sum::<f64>(), 3.0);
        }
    }

    #[test]
    fn zero_delta_is_rejected() {
        assert!(build_dataset(&[], 0).is_err());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        use Action::*;
        let log = log_of(&[Flap, Noop, Noop, Noop, Noop, Noop], &[0; 6]);
        let d = build_dataset(&[log], 2).unwrap();
        let k = CnnParams::<f32>::init(2, 0.01, 0);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            minibatch_size: 2,
            ..Default::default()
        };
        let out = sgd_fit(&k, &d, &cfg).unwrap();
        assert_eq!(out.params, k);
        assert_eq!(out.loss_history.len(), 2);
    }

    #[test]
    fn divergence_is_reported() {
        use Action::*;
        let log = log_of(&[Flap, Noop, Noop, Noop, Noop, Noop], &[0; 6]);
        let d = build_dataset(&[log], 5).unwrap();
        let k = CnnParams::<f32>::init(2, 0.01, 0);
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(sgd_fit(&k, &d, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let k = CnnParams::<f32>::zeros(2, 0.01);
        assert!(sgd_fit(&k, &Dataset::default(), &TrainConfig::default()).is_err());
    }
}
