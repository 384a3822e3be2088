//! Pooled combination head, answer classifier, losses and accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::attention::Linear;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombineWeights {
    pub alpha: f64,
    pub theta: f64,
    pub beta: f64,
}

impl Default for CombineWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            theta: 0.1,
            beta: 0.1,
        }
    }
}

impl CombineWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("theta", self.theta), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// `X_F = α·mean(X̂_II) + θ·mean(F_FI) + β·mean(F_FL)` as a `1×d` row.
/// Terms with zero weight (or absent) are left off the graph entirely.
pub fn combine(tape: &mut Tape, x_hat_ii: Option<Var>, f_fi: Var, f_fl: Var, w: &CombineWeights, mask_l: Option<&[bool]>) -> Result<Var> {
    w.validate()?;
    let d = tape.value(f_fi).cols();
    for v in [Some(f_fl), x_hat_ii].into_iter().flatten() {
        if tape.value(v).cols() != d {
            return Err(Error::Shape {
                op: "combine",
                lhs: tape.value(f_fi).shape().to_vec(),
                rhs: tape.value(v).shape().to_vec(),
            });
        }
    }
    let terms = [(x_hat_ii, w.alpha, None), (Some(f_fi), w.theta, None), (Some(f_fl), w.beta, mask_l)];
    let mut acc: Option<Var> = None;
    for (v, weight, mask) in terms {
        let Some(v) = v else { continue };
        if weight == 0.0 {
            continue;
        }
        let pooled = tape.mean_rows(v, mask)?;
        let scaled = if weight == 1.0 { pooled } else { tape.scale(pooled, weight)? };
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant(Tensor::zeros(1, d)),
    }
}

/// One logit per vocabulary answer.
pub fn classify(tape: &mut Tape, x_f: Var, head: &Linear) -> Result<Var> {
    head.forward(tape, x_f)
}

/// One-hot answer target `F_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTarget {
    values: Vec<f64>,
}

impl AnswerTarget {
    pub fn one_hot(index: usize, classes: usize) -> Result<Self> {
        if index >= classes {
            return Err(Error::contract(format!("answer {index} outside {classes} classes")));
        }
        let mut values = vec![0.0; classes];
        values[index] = 1.0;
        Ok(Self { values })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let ones = values.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("target is not one-hot"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self) -> usize {
        self.values.iter().position(|&v| v == 1.0).expect("one-hot")
    }
}

/// Mean sigmoid binary cross-entropy over classes.
pub fn bce_loss(tape: &mut Tape, logits: Var, target: &AnswerTarget) -> Result<Var> {
    tape.bce_with_logits(logits, target.values())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eta: 0.1 }
    }
}

/// `L_T = L_BCE + η·L_CS`.
pub fn total_loss(tape: &mut Tape, bce: Var, cs: Option<Var>, lw: &LossWeights) -> Result<Var> {
    if !lw.eta.is_finite() || lw.eta < 0.0 {
        return Err(Error::config(format!("eta = {} must be finite and non-negative", lw.eta)));
    }
    match cs {
        Some(cs) if lw.eta != 0.0 => {
            let w = tape.scale(cs, lw.eta)?;
            tape.add(bce, w)
        }
        _ => Ok(bce),
    }
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub open_acc: Option<f64>,
    #[serde(default)]
    pub closed_acc: Option<f64>,
    pub overall_acc: f64,
    pub n_open: usize,
    pub n_closed: usize,
}

/// Accuracy percentages from `(is_open, correct)` outcomes.
pub fn evaluate(outcomes: &[(bool, bool)]) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let (mut n_open, mut ok_open, mut n_closed, mut ok_closed) = (0usize, 0usize, 0usize, 0usize);
    for &(open, correct) in outcomes {
        if open {
            n_open += 1;
            ok_open += usize::from(correct);
        } else {
            n_closed += 1;
            ok_closed += usize::from(correct);
        }
    }
    let pct = |ok: usize, n: usize| (n > 0).then(|| 100.0 * ok as f64 / n as f64);
    Ok(EvalReport {
        open_acc: pct(ok_open, n_open),
        closed_acc: pct(ok_closed, n_closed),
        overall_acc: 100.0 * (ok_open + ok_closed) as f64 / outcomes.len() as f64,
        n_open,
        n_closed,
    })
}
