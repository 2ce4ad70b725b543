//! Global-best particle swarm optimization over box-bounded spaces with
//! linear or log10 dimensions.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    /// Searched uniformly in the exponent.
    Log10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl Dimension {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        Dimension {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Linear,
        }
    }

    pub fn log10(name: &str, lower: f64, upper: f64) -> Self {
        Dimension {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Log10,
        }
    }

    /// Bounds in search coordinates.
    pub fn internal_bounds(&self) -> (f64, f64) {
        match self.scale {
            Scale::Linear => (self.lower, self.upper),
            Scale::Log10 => (self.lower.log10(), self.upper.log10()),
        }
    }

    pub fn decode(&self, x: f64) -> f64 {
        match self.scale {
            Scale::Linear => x,
            Scale::Log10 => 10f64.powf(x).clamp(self.lower, self.upper),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::config("search space needs at least one dimension"));
        }
        for d in &dims {
            if !(d.lower.is_finite() && d.upper.is_finite() && d.lower < d.upper) {
                return Err(Error::config(format!(
                    "dimension `{}` needs finite lower < upper, got [{}, {}]",
                    d.name, d.lower, d.upper
                )));
            }
            if d.scale == Scale::Log10 && d.lower <= 0.0 {
                return Err(Error::config(format!(
                    "log-scale dimension `{}` needs positive bounds",
                    d.name
                )));
            }
        }
        Ok(SearchSpace { dims })
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn decode(&self, position: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(position).map(|(d, &x)| d.decode(x)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Velocity limit as a fraction of each dimension's range.
    pub velocity_clamp: f64,
    pub seed: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            particles: 20,
            iterations: 30,
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            velocity_clamp: 0.5,
            seed: 0,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::config("swarm needs at least 2 particles"));
        }
        if self.iterations == 0 {
            return Err(Error::config("swarm needs at least 1 iteration"));
        }
        for (name, v) in [
            ("inertia", self.inertia),
            ("cognitive", self.cognitive),
            ("social", self.social),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("swarm {name} {v} must be non-negative")));
            }
        }
        if !(self.velocity_clamp > 0.0 && self.velocity_clamp.is_finite()) {
            return Err(Error::config("swarm velocity_clamp must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    /// Search coordinates (log10 for log dimensions).
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub best_position: Vec<f64>,
    pub best_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub best_value: f64,
    /// Decoded position of the global best.
    pub best: Vec<f64>,
}

fn evaluate_all<F>(objective: &F, space: &SearchSpace, positions: Vec<Vec<f64>>) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    positions
        .into_par_iter()
        .map(|p| {
            let v = objective(&space.decode(&p));
            if v.is_nan() {
                log::warn!("objective returned NaN at {:?}; scoring it +inf", space.decode(&p));
                f64::INFINITY
            } else {
                v
            }
        })
        .collect()
}

pub struct Swarm {
    space: SearchSpace,
    cfg: SwarmConfig,
    rng: ChaCha8Rng,
    particles: Vec<Particle>,
    best_position: Vec<f64>,
    best_value: f64,
    iteration: usize,
}

impl Swarm {
    /// Draws and scores the initial swarm.
    pub fn new<F>(space: SearchSpace, cfg: SwarmConfig, objective: &F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, Stream::Swarm);
        let mut particles = Vec::with_capacity(cfg.particles);
        for _ in 0..cfg.particles {
            let mut position = Vec::with_capacity(space.dims.len());
            let mut velocity = Vec::with_capacity(space.dims.len());
            for d in &space.dims {
                let (lo, hi) = d.internal_bounds();
                let vmax = cfg.velocity_clamp * (hi - lo);
                position.push(rng.gen_range(lo..=hi));
                velocity.push(rng.gen_range(-vmax..=vmax));
            }
            particles.push(Particle {
                best_position: position.clone(),
                position,
                velocity,
                best_value: f64::INFINITY,
            });
        }
        let mut swarm = Swarm {
            space,
            cfg,
            rng,
            particles,
            best_position: Vec::new(),
            best_value: f64::INFINITY,
            iteration: 0,
        };
        swarm.score(objective);
        Ok(swarm)
    }

    fn score<F>(&mut self, objective: &F)
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let positions: Vec<Vec<f64>> = self.particles.iter().map(|p| p.position.clone()).collect();
        let values = evaluate_all(objective, &self.space, positions);
        for (p, v) in self.particles.iter_mut().zip(values) {
            if v < p.best_value {
                p.best_value = v;
                p.best_position = p.position.clone();
            }
            if p.best_value < self.best_value || self.best_position.is_empty() {
                self.best_value = p.best_value;
                self.best_position = p.best_position.clone();
            }
        }
    }

    /// One velocity/position update of every particle followed by scoring.
    pub fn step<F>(&mut self, objective: &F)
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let cfg = &self.cfg;
        for p in &mut self.particles {
            for (j, d) in self.space.dims.iter().enumerate() {
                let (lo, hi) = d.internal_bounds();
                let vmax = cfg.velocity_clamp * (hi - lo);
                let r1: f64 = self.rng.gen();
                let r2: f64 = self.rng.gen();
                let v = cfg.inertia * p.velocity[j]
                    + cfg.cognitive * r1 * (p.best_position[j] - p.position[j])
                    + cfg.social * r2 * (self.best_position[j] - p.position[j]);
                p.velocity[j] = v.clamp(-vmax, vmax);
                let x = p.position[j] + p.velocity[j];
                if x < lo || x > hi {
                    p.position[j] = x.clamp(lo, hi);
                    p.velocity[j] = 0.0;
                } else {
                    p.position[j] = x;
                }
            }
        }
        self.iteration += 1;
        self.score(objective);
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn best_value(&self) -> f64 {
        self.best_value
    }

    /// Decoded global-best position.
    pub fn best(&self) -> Vec<f64> {
        self.space.decode(&self.best_position)
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn trace_row(&self) -> TraceRow {
        TraceRow {
            iteration: self.iteration,
            best_value: self.best_value,
            best: self.best(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsoResult {
    /// Decoded best position.
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Row 0 is the initial swarm, then one row per iteration.
    pub trace: Vec<TraceRow>,
}

/// Minimizes `objective`, which receives decoded coordinates.
pub fn pso_optimize<F>(objective: F, space: &SearchSpace, cfg: &SwarmConfig) -> Result<PsoResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut swarm = Swarm::new(space.clone(), cfg.clone(), &objective)?;
    let mut trace = vec![swarm.trace_row()];
    for _ in 0..cfg.iterations {
        swarm.step(&objective);
        trace.push(swarm.trace_row());
    }
    Ok(PsoResult {
        best: swarm.best(),
        best_value: swarm.best_value(),
        trace,
    })
}

pub const LR_RANGE: (f64, f64) = (1e-5, 1e-2);
pub const DROPOUT_RANGE: (f64, f64) = (0.3, 0.7);
pub const TRACE_HEADER: &str = "iteration,best_fitness,best_lr,best_dropout";

pub fn hyperparameter_space() -> SearchSpace {
    SearchSpace::new(vec![
        Dimension::log10("lr", LR_RANGE.0, LR_RANGE.1),
        Dimension::linear("dropout", DROPOUT_RANGE.0, DROPOUT_RANGE.1),
    ])
    .expect("static bounds are valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub lr: f64,
    pub dropout: f64,
    pub best_value: f64,
    pub trace: Vec<TraceRow>,
}

impl TuneResult {
    pub fn trace_csv(&self) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{},{},{}", r.iteration, r.best_value, r.best[0], r.best[1]);
        }
        s
    }
}

/// Searches learning rate (log scale) and dropout for the lowest validation
/// loss reported by `train_fn`. Failed runs score `+inf`.
pub fn pso_tune_hyperparams<F>(train_fn: F, cfg: &SwarmConfig) -> Result<TuneResult>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    let objective = |x: &[f64]| match train_fn(x[0], x[1]) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("fitness run (lr {}, dropout {}) failed: {e}", x[0], x[1]);
            f64::INFINITY
        }
    };
    let r = pso_optimize(objective, &hyperparameter_space(), cfg)?;
    Ok(TuneResult {
        lr: r.best[0],
        dropout: r.best[1],
        best_value: r.best_value,
        trace: r.trace,
    })
}

/// Smooth stand-in for a training run with its minimum at lr 1e-3, dropout 0.5.
pub fn mock_fitness(lr: f64, dropout: f64) -> f64 {
    (lr.log10() + 3.0).powi(2) + (dropout - 0.5).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere() {
        let space = SearchSpace::new(vec![Dimension::linear("x", -5.0, 5.0), Dimension::linear("y", -5.0, 5.0)]).unwrap();
        let cfg = SwarmConfig {
            iterations: 50,
            seed: 3,
            ..SwarmConfig::default()
        };
        let r = pso_optimize(|x: &[f64]| x[0] * x[0] + x[1] * x[1], &space, &cfg).unwrap();
        assert!(r.best_value < 1e-4, "{}", r.best_value);
        assert!(r.trace.windows(2).all(|w| w[1].best_value <= w[0].best_value));
    }

    #[test]
    fn nan_is_infinite() {
        let space = SearchSpace::new(vec![Dimension::linear("x", 0.0, 1.0)]).unwrap();
        let r = pso_optimize(|x: &[f64]| if x[0] < 0.5 { f64::NAN } else { x[0] }, &space, &SwarmConfig::default()).unwrap();
        assert!(r.best_value >= 0.5 && r.best_value.is_finite());
    }

    #[test]
    fn bad_spaces() {
        assert!(SearchSpace::new(vec![Dimension::linear("x", 1.0, 1.0)]).is_err());
        assert!(SearchSpace::new(vec![Dimension::log10("x", 0.0, 1.0)]).is_err());
        let cfg = SwarmConfig {
            particles: 1,
            ..SwarmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
