use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::rng::{self, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

/// One layer of a model graph with its kind-specific hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Input,
    Conv {
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    AvgPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Dense {
        units: usize,
        /// Kernel participates in the L2 penalty.
        regularized: bool,
    },
    BatchNorm,
    Dropout {
        rate: f64,
    },
    Gap,
    L2Norm,
    Concat,
    Flatten,
    Activation(Activation),
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel: (kernel, kernel),
            stride: 1,
            padding: Padding::Valid,
        }
    }

    pub fn maxpool(size: usize) -> Self {
        LayerSpec::MaxPool {
            window: (size, size),
            stride: (size, size),
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            regularized: false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input => "input",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Gap => "gap",
            LayerSpec::L2Norm => "l2norm",
            LayerSpec::Concat => "concat",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Activation(_) => "activation",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{} layer: {what} must be positive", self.kind())))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                ..
            } => {
                positive("filters", filters)?;
                positive("kernel height", kernel.0)?;
                positive("kernel width", kernel.1)?;
                positive("stride", stride)
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                positive("window height", window.0)?;
                positive("window width", window.1)?;
                positive("stride height", stride.0)?;
                positive("stride width", stride.1)
            }
            LayerSpec::Dense { units, .. } => positive("units", units),
            LayerSpec::Dropout { rate } => crate::tape::check_dropout_rate(rate),
            _ => Ok(()),
        }
    }

    /// Per-sample output shape (no batch axis) given per-sample input shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        self.validate()?;
        let single = || -> Result<&[usize]> {
            match inputs {
                [one] => Ok(*one),
                _ => Err(Error::config(format!(
                    "{} layer takes exactly one input, got {}",
                    self.kind(),
                    inputs.len()
                ))),
            }
        };
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::shape(format!(
                    "{} layer needs an [H, W, C] input, got {s:?}",
                    self.kind()
                ))),
            }
        };
        match *self {
            LayerSpec::Input => Err(Error::config("input layer has no upstream shape")),
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w, c) = spatial(single()?)?;
                let g = crate::kernels::ConvGeometry::new(
                    &[1, h, w, c],
                    &[kernel.0, kernel.1, c, filters],
                    stride,
                    padding,
                )?;
                Ok(vec![g.out_h, g.out_w, filters])
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                let (h, w, c) = spatial(single()?)?;
                let g = crate::kernels::PoolGeometry::new(&[1, h, w, c], window, stride)?;
                Ok(vec![g.out_h, g.out_w, c])
            }
            LayerSpec::Dense { units, .. } => match single()? {
                [_] => Ok(vec![units]),
                s => Err(Error::shape(format!("dense layer needs a flat input, got {s:?}"))),
            },
            LayerSpec::Gap => {
                let (_, _, c) = spatial(single()?)?;
                Ok(vec![c])
            }
            LayerSpec::Flatten => Ok(vec![single()?.iter().product()]),
            LayerSpec::Concat => {
                let first = inputs
                    .first()
                    .ok_or_else(|| Error::config("concat layer needs inputs"))?;
                let lead = &first[..first.len().saturating_sub(1)];
                let mut total = 0;
                for s in inputs {
                    let (w, l) = s
                        .split_last()
                        .ok_or_else(|| Error::shape("concat of a rank-0 input"))?;
                    if l != lead {
                        return Err(Error::shape(format!(
                            "concat inputs disagree on leading extents: {s:?} vs {first:?}"
                        )));
                    }
                    total += w;
                }
                let mut out = lead.to_vec();
                out.push(total);
                Ok(out)
            }
            LayerSpec::BatchNorm
            | LayerSpec::Dropout { .. }
            | LayerSpec::L2Norm
            | LayerSpec::Activation(_) => Ok(single()?.to_vec()),
        }
    }

    /// Parameter tensors owned by this layer for a given per-sample input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>, ParamRole)> {
        match *self {
            LayerSpec::Conv {
                filters, kernel, ..
            } => {
                let c = *input.last().unwrap_or(&0);
                vec![
                    (
                        "kernel",
                        vec![kernel.0, kernel.1, c, filters],
                        ParamRole::Kernel { regularized: false },
                    ),
                    ("bias", vec![filters], ParamRole::Bias),
                ]
            }
            LayerSpec::Dense { units, regularized } => {
                let n = *input.last().unwrap_or(&0);
                vec![
                    ("kernel", vec![n, units], ParamRole::Kernel { regularized }),
                    ("bias", vec![units], ParamRole::Bias),
                ]
            }
            LayerSpec::BatchNorm => {
                let c = *input.last().unwrap_or(&0);
                vec![
                    ("gamma", vec![c], ParamRole::Gamma),
                    ("beta", vec![c], ParamRole::Beta),
                    ("moving_mean", vec![c], ParamRole::RunningMean),
                    ("moving_var", vec![c], ParamRole::RunningVar),
                ]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Kernel { regularized: bool },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Updated by the optimizer (running statistics are not).
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    pub fn regularized(self) -> bool {
        matches!(self, ParamRole::Kernel { regularized: true })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub role: ParamRole,
}

/// Named parameter tensors, keyed `"<layer>.<slot>"` and iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn insert(&mut self, name: String, param: Param<T>) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values across all tensors, including running statistics.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            role: p.role,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// A layer together with the per-sample shape of its (first) input.
pub struct ShapedLayer<'a> {
    pub name: &'a str,
    pub spec: &'a LayerSpec,
    pub input_shape: &'a [usize],
}

/// Glorot-uniform kernels, zero biases, unit gamma, zero beta, and running
/// statistics at mean 0 / variance 1. Draws happen in layer order,
/// kernel before bias, from the seed's init stream.
pub fn init_params<T: Real>(layers: &[ShapedLayer<'_>], seed: u64) -> Result<ParamSet<T>> {
    let mut rng = rng::stream(seed, Stream::Init);
    let mut params = ParamSet::default();
    for layer in layers {
        layer.spec.validate()?;
        for (slot, shape, role) in layer.spec.param_shapes(layer.input_shape) {
            if shape.iter().any(|&e| e == 0) {
                return Err(Error::config(format!(
                    "layer `{}` would own an empty {slot} tensor {shape:?}",
                    layer.name
                )));
            }
            let value = match role {
                ParamRole::Kernel { .. } => {
                    let (fan_in, fan_out) = fans(&shape);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-limit..=limit)))
                }
                ParamRole::Gamma | ParamRole::RunningVar => Tensor::ones(&shape),
                ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(&shape),
            };
            params.insert(format!("{}.{slot}", layer.name), Param { value, role })?;
        }
    }
    Ok(params)
}

/// Glorot fan-in / fan-out: dense `[n, m]` → `(n, m)`; conv `[kh, kw, cin, cout]`
/// → `(kh*kw*cin, kh*kw*cout)`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n, m] => (*n, *m),
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

/// `lambda * sum(w^2)` over regularized kernels. No one-half factor.
pub fn l2_penalty<T: Real>(params: &ParamSet<T>, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let sum: f64 = params
        .iter()
        .filter(|(_, p)| p.role.regularized())
        .flat_map(|(_, p)| p.value.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    lambda * sum
}
