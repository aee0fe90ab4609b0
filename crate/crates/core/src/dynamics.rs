//! Forward-model identification from logged play.
//!
//! Gravity is the mean second difference of position over ticks where the
//! bird did nothing; each action's effect on velocity is then a Gaussian fitted
//! to the velocity changes left over once gravity is removed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, TickRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionImpact {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DynamicsDoc", into = "DynamicsDoc")]
pub struct EstimatedDynamics {
    pub g_hat: f64,
    /// Indexed by [`Action::index`].
    pub impacts: [ActionImpact; Action::COUNT],
}

impl EstimatedDynamics {
    /// The environment's true forward model, for ablations.
    pub fn ground_truth(cfg: &EnvConfig) -> Self {
        let impacts = Action::ALL.map(|a| ActionImpact {
            mu: cfg.impact(a),
            sigma: cfg.action_noise_sigma,
        });
        EstimatedDynamics {
            g_hat: cfg.gravity_g,
            impacts,
        }
    }

    pub fn impact(&self, a: Action) -> ActionImpact {
        self.impacts[a.index()]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                what: "dynamics JSON".into(),
                path: path.to_path_buf(),
            },
            _ => e.into(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// On-disk form: `{"g": .., "impacts": {"0": {"mu", "sigma"}, "1": {..}}}`.
#[derive(Serialize, Deserialize)]
struct DynamicsDoc {
    g: f64,
    impacts: BTreeMap<String, ActionImpact>,
}

impl From<EstimatedDynamics> for DynamicsDoc {
    fn from(d: EstimatedDynamics) -> Self {
        let impacts = Action::ALL
            .iter()
            .map(|a| (a.index().to_string(), d.impacts[a.index()]))
            .collect();
        DynamicsDoc { g: d.g_hat, impacts }
    }
}

impl TryFrom<DynamicsDoc> for EstimatedDynamics {
    type Error = String;

    fn try_from(doc: DynamicsDoc) -> std::result::Result<Self, String> {
        let mut impacts = [ActionImpact { mu: 0.0, sigma: 0.0 }; Action::COUNT];
        for a in Action::ALL {
            let key = a.index().to_string();
            let imp = doc
                .impacts
                .get(&key)
                .ok_or_else(|| format!("dynamics document has no impact for action {key}"))?;
            if !(imp.sigma >= 0.0) {
                return Err(format!("negative sigma for action {key}"));
            }
            impacts[a.index()] = *imp;
        }
        Ok(EstimatedDynamics {
            g_hat: doc.g,
            impacts,
        })
    }
}

/// Where the per-tick velocity comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VelocitySource {
    /// The logged `vy` field.
    #[default]
    Recorded,
    /// First differences of logged `y`; costs one extra leading tick per run.
    Positions,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions {
    pub source: VelocitySource,
    /// Transitions that end at (or beyond) this speed are dropped.
    pub terminal_velocity: Option<f64>,
}

/// A velocity change `dv` caused by `action` on one tick.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Transition {
    action: Action,
    dv: f64,
}

fn transitions(logs: &[Vec<TickRecord>], opts: &FitOptions) -> Vec<Transition> {
    let mut out = Vec::new();
    for log in logs {
        for (i, w) in log.windows(2).enumerate() {
            let (cur, next) = (&w[0], &w[1]);
            if cur.collision || next.tick != cur.tick + 1 {
                continue;
            }
            let (v0, v1) = match opts.source {
                VelocitySource::Recorded => (cur.vy, next.vy),
                VelocitySource::Positions => {
                    let Some(prev) = i.checked_sub(1).map(|j| &log[j]) else {
                        continue;
                    };
                    if prev.tick + 1 != cur.tick {
                        continue;
                    }
                    (cur.y - prev.y, next.y - cur.y)
                }
            };
            if let Some(tv) = opts.terminal_velocity {
                if v1.abs() >= tv {
                    continue;
                }
            }
            out.push(Transition {
                action: cur.action,
                dv: v1 - v0,
            });
        }
    }
    out
}

/// Least-squares gravity: the mean velocity change over Noop ticks.
pub fn estimate_gravity(logs: &[Vec<TickRecord>], opts: &FitOptions) -> Result<f64> {
    let dvs: Vec<f64> = transitions(logs, opts)
        .into_iter()
        .filter(|t| t.action == Action::Noop)
        .map(|t| t.dv)
        .collect();
    if dvs.is_empty() {
        return Err(Error::InsufficientObservations(
            "no unclamped non-terminal Noop transitions to estimate gravity from".into(),
        ));
    }
    Ok(mean(&dvs))
}

/// Per action, mean and unbiased standard deviation of `dv - g_hat`.
pub fn fit_action_gaussians(
    logs: &[Vec<TickRecord>],
    g_hat: f64,
    opts: &FitOptions,
) -> Result<EstimatedDynamics> {
    let trans = transitions(logs, opts);
    let mut impacts = [ActionImpact { mu: 0.0, sigma: 0.0 }; Action::COUNT];
    for a in Action::ALL {
        let residuals: Vec<f64> = trans
            .iter()
            .filter(|t| t.action == a)
            .map(|t| t.dv - g_hat)
            .collect();
        impacts[a.index()] = gaussian_fit(&residuals).ok_or_else(|| {
            Error::InsufficientObservations(format!(
                "insufficient observations for action {a:?}: {} (need 2)",
                residuals.len()
            ))
        })?;
    }
    Ok(EstimatedDynamics { g_hat, impacts })
}

/// Gravity then per-action Gaussians.
pub fn estimate_dynamics(logs: &[Vec<TickRecord>], opts: &FitOptions) -> Result<EstimatedDynamics> {
    let g = estimate_gravity(logs, opts)?;
    fit_action_gaussians(logs, g, opts)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn gaussian_fit(xs: &[f64]) -> Option<ActionImpact> {
    if xs.len() < 2 {
        return None;
    }
    let mu = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum();
    Some(ActionImpact {
        mu,
        sigma: (ss / (xs.len() - 1) as f64).sqrt(),
    })
}

/// Draw a velocity impact for `a`. A zero sigma returns `mu` without touching `rng`.
pub fn sample_impact<R: Rng + ?Sized>(dyn_: &EstimatedDynamics, a: Action, rng: &mut R) -> f64 {
    let ActionImpact { mu, sigma } = dyn_.impact(a);
    if sigma == 0.0 {
        mu
    } else {
        mu + sigma * rng.sample::<f64, _>(StandardNormal)
    }
}
