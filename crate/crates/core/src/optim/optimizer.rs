use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    #[serde(rename = "rmsprop")]
    RmsProp {
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_rho() -> f64 {
    0.9
}
fn default_epsilon() -> f64 {
    1e-7
}

impl Rule {
    pub fn sgd() -> Self {
        Rule::SgdMomentum {
            momentum: default_momentum(),
        }
    }

    pub fn adam() -> Self {
        Rule::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn rmsprop() -> Self {
        Rule::RmsProp {
            rho: default_rho(),
            epsilon: default_epsilon(),
        }
    }

    /// Conventional starting learning rate for the rule.
    pub fn default_lr(&self) -> f64 {
        match self {
            Rule::SgdMomentum { .. } => 0.01,
            Rule::Adam { .. } | Rule::RmsProp { .. } => 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} {v} must be in [0, 1)")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} {v} must be positive")))
            }
        };
        match *self {
            Rule::SgdMomentum { momentum } => unit("momentum", momentum),
            Rule::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                positive("epsilon", epsilon)
            }
            Rule::RmsProp { rho, epsilon } => {
                unit("rho", rho)?;
                positive("epsilon", epsilon)
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Slots {
    Velocity(Vec<f64>),
    Moments { m: Vec<f64>, v: Vec<f64> },
    Square(Vec<f64>),
}

/// Per-parameter optimizer state. Slots are created on first use and keep
/// the shape of their parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub rule: Rule,
    pub lr: f64,
    step: u64,
    slots: BTreeMap<String, Slots>,
}

impl Optimizer {
    pub fn new(rule: Rule, lr: f64) -> Result<Self> {
        rule.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be positive")));
        }
        Ok(Optimizer {
            rule,
            lr,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        for (name, p) in params.iter_mut() {
            if !p.role.trainable() {
                continue;
            }
            if let Some(g) = grads.get(name) {
                self.apply(name, &mut p.value, g)?;
            }
        }
        Ok(())
    }

    /// Advances the step counter and updates a single tensor, for callers
    /// that manage their own parameters.
    pub fn step_one<T: Real>(&mut self, name: &str, w: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
        self.step += 1;
        self.apply(name, w, g)
    }

    fn apply<T: Real>(&mut self, name: &str, w: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
        if w.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                w.shape()
            )));
        }
        let n = w.len();
        let slots = self.slots.entry(name.to_string()).or_insert_with(|| match self.rule {
            Rule::SgdMomentum { .. } => Slots::Velocity(vec![0.0; n]),
            Rule::Adam { .. } => Slots::Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            Rule::RmsProp { .. } => Slots::Square(vec![0.0; n]),
        });
        let lr = self.lr;
        let weights = w.data_mut().iter_mut();
        let grads = g.data().iter().map(|v| v.as_f64());
        match (self.rule, slots) {
            (Rule::SgdMomentum { momentum }, Slots::Velocity(vel)) => {
                for ((w, g), v) in weights.zip(grads).zip(vel.iter_mut()) {
                    *v = momentum * *v - lr * g;
                    *w = T::lit(w.as_f64() + *v);
                }
            }
            (
                Rule::Adam {
                    beta1,
                    beta2,
                    epsilon,
                },
                Slots::Moments { m, v },
            ) => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, g), m), v) in weights.zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    *w = T::lit(w.as_f64() - update);
                }
            }
            (Rule::RmsProp { rho, epsilon }, Slots::Square(s)) => {
                for ((w, g), s) in weights.zip(grads).zip(s.iter_mut()) {
                    *s = rho * *s + (1.0 - rho) * g * g;
                    *w = T::lit(w.as_f64() - lr * g / (*s + epsilon).sqrt());
                }
            }
            _ => unreachable!("slot kind always matches the rule"),
        }
        if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("update produced a non-finite value in `{name}`[{i}]")));
        }
        Ok(())
    }
}
