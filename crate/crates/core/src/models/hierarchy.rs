use serde::Serialize;

use crate::data::{Subtype, TumorClass};
use crate::error::{Error, Result};
use crate::models::graph::ModelGraph;
use crate::tensor::{Real, Tensor};

/// Anything that maps an image batch to class-probability rows.
pub trait Classifier {
    /// Per-sample `[H, W, C]`.
    fn input_shape(&self) -> [usize; 3];
    /// One probability row per sample of an `[N, H, W, C]` batch.
    fn class_probabilities(&self, batch: &Tensor<f32>) -> Result<Vec<Vec<f64>>>;
}

impl<T: Real> Classifier for ModelGraph<T> {
    fn input_shape(&self) -> [usize; 3] {
        ModelGraph::input_shape(self)
    }

    fn class_probabilities(&self, batch: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        self.predict_proba(&batch.cast())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnosis {
    pub class: TumorClass,
    /// `[benign, malignant]`.
    pub binary_probs: Vec<f64>,
    pub subtype: Subtype,
    /// In the predicted class's subtype order.
    pub subtype_probs: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_input(name: &str, m: &dyn Classifier, shape: &[usize]) -> Result<()> {
    if m.input_shape()[..] != shape[1..] {
        return Err(Error::shape(format!(
            "{name} model expects {:?} images, got {:?}",
            m.input_shape(),
            &shape[1..]
        )));
    }
    Ok(())
}

fn check_width(name: &str, rows: &[Vec<f64>], k: usize) -> Result<()> {
    match rows.iter().find(|r| r.len() != k) {
        Some(r) => Err(Error::shape(format!(
            "{name} model produced {} probabilities, expected {k}",
            r.len()
        ))),
        None => Ok(()),
    }
}

/// Scores a batch with the binary model, then sends each sample to exactly
/// one subtype model chosen by the binary argmax.
pub fn hierarchical_predict_batch(
    binary: &dyn Classifier,
    benign: &dyn Classifier,
    malignant: &dyn Classifier,
    batch: &Tensor<f32>,
) -> Result<Vec<Diagnosis>> {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected an [N, H, W, C] batch, got {shape:?}")));
    }
    check_input("binary", binary, &shape)?;
    check_input("benign", benign, &shape)?;
    check_input("malignant", malignant, &shape)?;
    let binary_probs = binary.class_probabilities(batch)?;
    check_width("binary", &binary_probs, 2)?;
    let routes: Vec<TumorClass> = binary_probs
        .iter()
        .map(|p| TumorClass::from_index(argmax(p)).expect("argmax of a 2-vector"))
        .collect();
    let mut subtype_probs: Vec<Vec<f64>> = vec![Vec::new(); routes.len()];
    for (class, model) in [(TumorClass::Benign, benign), (TumorClass::Malignant, malignant)] {
        let members: Vec<usize> = (0..routes.len()).filter(|&i| routes[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let rows: Vec<Tensor<f32>> = members.iter().map(|&i| batch.row(i)).collect::<Result<_>>()?;
        let sub = Tensor::stack(&rows.iter().collect::<Vec<_>>())?;
        let probs = model.class_probabilities(&sub)?;
        check_width(class.name(), &probs, 4)?;
        for (&i, p) in members.iter().zip(probs) {
            subtype_probs[i] = p;
        }
    }
    Ok(routes
        .into_iter()
        .zip(binary_probs)
        .zip(subtype_probs)
        .map(|((class, binary_probs), subtype_probs)| Diagnosis {
            class,
            subtype: class.subtypes()[argmax(&subtype_probs)],
            binary_probs,
            subtype_probs,
        })
        .collect())
}

/// Single-image form; `image` is `[H, W, C]` or a batch of one.
pub fn hierarchical_predict(
    binary: &dyn Classifier,
    benign: &dyn Classifier,
    malignant: &dyn Classifier,
    image: &Tensor<f32>,
) -> Result<Diagnosis> {
    let batch = match image.rank() {
        3 => Tensor::stack(&[image])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(Error::shape(format!(
                "expected one [H, W, C] image, got {:?}",
                image.shape()
            )))
        }
    };
    Ok(hierarchical_predict_batch(binary, benign, malignant, &batch)?.remove(0))
}
