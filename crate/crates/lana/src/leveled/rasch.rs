//! One-parameter logistic (Rasch) ability/difficulty estimation.

use std::collections::BTreeMap;

use crate::dataio::Interaction;
use crate::error::{Error, Result};

use super::sigmoid;

/// Default iteration count for [`fit_rasch`].
pub const DEFAULT_RASCH_ITERATIONS: usize = 200;
/// Default gradient-ascent step size for [`fit_rasch`].
pub const DEFAULT_RASCH_STEP: f64 = 0.05;
/// Default L2 penalty strength for [`fit_rasch`].
pub const DEFAULT_RASCH_L2: f64 = 0.01;

/// Fitted Rasch parameters: one ability per student, one difficulty per
/// question, both in logit units. The probability of student `s` answering
/// question `q` correctly is modeled as `sigmoid(ability_s - difficulty_q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaschFit {
    pub abilities: BTreeMap<u32, f64>,
    /// Mean-centered: the difficulties average to zero, pinning the
    /// shift freedom shared by abilities and difficulties.
    pub difficulties: BTreeMap<u32, f64>,
    /// Data log-likelihood `Σ log sigmoid((2r-1)(a_s - d_q))` at the returned
    /// parameters. Depends only on ability-difficulty gaps, so the
    /// mean-centering does not change it. NaN when the fit was reconstructed
    /// from an abilities file rather than computed.
    pub log_likelihood: f64,
    /// Penalized ascent objective after each iteration, recorded before the
    /// final centering. Nondecreasing for step sizes within the stable range.
    pub objective_trace: Vec<f64>,
}

impl RaschFit {
    /// Rebuilds a fit from exported abilities alone, e.g. for inference-time
    /// membership lookups. Difficulties are left empty and the log-likelihood
    /// is NaN (unknown).
    pub fn from_abilities(abilities: BTreeMap<u32, f64>) -> Result<Self> {
        if abilities.is_empty() {
            return Err(Error::contract("cannot build a fit from zero abilities"));
        }
        for (&id, &a) in &abilities {
            if !a.is_finite() {
                return Err(Error::contract(format!("ability of student {id} is {a}")));
            }
        }
        Ok(RaschFit {
            abilities,
            difficulties: BTreeMap::new(),
            log_likelihood: f64::NAN,
            objective_trace: Vec::new(),
        })
    }

    /// Mean of the fitted abilities — the fallback for unseen students.
    pub fn mean_ability(&self) -> f64 {
        let n = self.abilities.len();
        self.abilities.values().sum::<f64>() / n as f64
    }
}

/// Ability for `student_id`: the fitted value if the student was seen during
/// fitting, otherwise the population mean.
pub fn cold_start_ability(fit: &RaschFit, student_id: u32) -> f64 {
    fit.abilities
        .get(&student_id)
        .copied()
        .unwrap_or_else(|| fit.mean_ability())
}

/// `log(sigmoid(z))`, stable for large negative `z`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Fits a Rasch model by alternating full-batch gradient ascent on the
/// penalized log-likelihood
///
/// ```text
/// Σ log sigmoid((2r-1)(a_s - d_q)) - l2_reg (‖a‖² + ‖d‖²)
/// ```
///
/// Each iteration first updates every ability with difficulties held fixed,
/// then every difficulty with abilities held fixed. All parameters start at
/// zero, and after the final iteration the difficulties are re-centered to
/// mean zero (abilities shift by the same amount, leaving every
/// ability-difficulty gap untouched).
pub fn fit_rasch(
    records: &[Interaction],
    iterations: usize,
    l2_reg: f64,
    step: f64,
) -> Result<RaschFit> {
    if records.is_empty() {
        return Err(Error::contract("cannot fit a Rasch model on zero interactions"));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::contract(format!("step size must be positive and finite, got {step}")));
    }
    if !(l2_reg.is_finite() && l2_reg >= 0.0) {
        return Err(Error::contract(format!(
            "penalty strength must be nonnegative and finite, got {l2_reg}"
        )));
    }

    // Dense indices in ascending id order keep the arithmetic sequence
    // deterministic and the output maps sorted.
    let mut student_idx: BTreeMap<u32, usize> =
        records.iter().map(|r| (r.student_id, 0)).collect();
    for (i, v) in student_idx.values_mut().enumerate() {
        *v = i;
    }
    let mut question_idx: BTreeMap<u32, usize> =
        records.iter().map(|r| (r.question_id, 0)).collect();
    for (i, v) in question_idx.values_mut().enumerate() {
        *v = i;
    }
    let n_s = student_idx.len();
    let n_q = question_idx.len();
    let encoded: Vec<(usize, usize, f64)> = records
        .iter()
        .map(|r| {
            let sign = if r.correct { 1.0 } else { -1.0 };
            (student_idx[&r.student_id], question_idx[&r.question_id], sign)
        })
        .collect();

    let mut a = vec![0.0_f64; n_s];
    let mut d = vec![0.0_f64; n_q];
    let objective = |a: &[f64], d: &[f64]| -> f64 {
        let data: f64 = encoded
            .iter()
            .map(|&(s, q, sign)| log_sigmoid(sign * (a[s] - d[q])))
            .sum();
        let penalty: f64 = a.iter().map(|x| x * x).sum::<f64>()
            + d.iter().map(|x| x * x).sum::<f64>();
        data - l2_reg * penalty
    };

    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut grad_a: Vec<f64> = a.iter().map(|x| -2.0 * l2_reg * x).collect();
        for &(s, q, sign) in &encoded {
            let z = sign * (a[s] - d[q]);
            grad_a[s] += sign * (1.0 - sigmoid(z));
        }
        for (x, g) in a.iter_mut().zip(&grad_a) {
            *x += step * g;
        }

        let mut grad_d: Vec<f64> = d.iter().map(|x| -2.0 * l2_reg * x).collect();
        for &(s, q, sign) in &encoded {
            let z = sign * (a[s] - d[q]);
            grad_d[q] -= sign * (1.0 - sigmoid(z));
        }
        for (x, g) in d.iter_mut().zip(&grad_d) {
            *x += step * g;
        }

        trace.push(objective(&a, &d));
    }

    let mean_d = d.iter().sum::<f64>() / n_q as f64;
    for x in &mut d {
        *x -= mean_d;
    }
    for x in &mut a {
        *x -= mean_d;
    }

    for (i, x) in a.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::numeric(format!(
                "ability {i} diverged to {x}; lower the step size or raise the penalty"
            )));
        }
    }
    if let Some(x) = d.iter().find(|x| !x.is_finite()) {
        return Err(Error::numeric(format!(
            "a difficulty diverged to {x}; lower the step size or raise the penalty"
        )));
    }

    let log_likelihood: f64 = encoded
        .iter()
        .map(|&(s, q, sign)| log_sigmoid(sign * (a[s] - d[q])))
        .sum();

    Ok(RaschFit {
        abilities: student_idx.iter().map(|(&id, &i)| (id, a[i])).collect(),
        difficulties: question_idx.iter().map(|(&id, &i)| (id, d[i])).collect(),
        log_likelihood,
        objective_trace: trace,
    })
}
