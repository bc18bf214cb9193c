//! Test-set error and the predict-the-mean baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rmse: f64,
    /// Population standard deviation of the truths: the RMSE of always
    /// predicting their mean.
    pub sd_baseline: f64,
}

fn check(predictions: &[f64], truths: &[f64]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension {
            expected: truths.len(),
            got: predictions.len(),
            context: "predictions vs truths",
        });
    }
    if truths.is_empty() {
        return Err(Error::input("cannot evaluate zero predictions"));
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check(predictions, truths)?;
    let sse: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / truths.len() as f64).sqrt())
}

pub fn population_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

pub fn evaluate(predictions: &[f64], truths: &[f64]) -> Result<Evaluation> {
    Ok(Evaluation {
        rmse: rmse(predictions, truths)?,
        sd_baseline: population_sd(truths),
    })
}
