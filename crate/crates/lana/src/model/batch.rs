//! Turning windows into the dense index/mask/target tensors one forward pass
//! consumes.

use std::sync::Arc;

use crate::dataio::Window;
use crate::error::{Error, Result};
use crate::model::{
    LanaHyper, ELAPSED_VOCAB, INTERVAL_VOCAB, PART_VOCAB, PREV_RESPONSE_VOCAB, PRIOR_VIEWED_VOCAB,
};
use crate::pivot::{AttnMask, MASK_EXCLUDED};
use crate::tensor::Array;

/// One forward-ready batch of equally sized windows.
///
/// Lane ids are flattened `[batch * seq]` embedding indices (raw value + 1,
/// pad = 0). `mask` combines causality with key validity; `dis` holds minutes
/// between interactions for every allowed (query, key) pair and zero
/// elsewhere. `weights` carries the per-window training weight into every
/// valid position and zero into pads.
#[derive(Clone)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub question_ids: Arc<Vec<usize>>,
    pub part_ids: Arc<Vec<usize>>,
    pub prev_response_ids: Arc<Vec<usize>>,
    pub elapsed_ids: Arc<Vec<usize>>,
    pub interval_ids: Arc<Vec<usize>>,
    pub prior_viewed_ids: Arc<Vec<usize>>,
    pub pos_ids: Arc<Vec<usize>>,
    pub mask: AttnMask,
    pub dis: Arc<Array>,
    pub targets: Vec<f64>,
    pub valid: Vec<bool>,
    pub weights: Vec<f64>,
    pub students: Vec<u32>,
    pub window_indices: Vec<usize>,
}

fn lane_id(raw: usize, vocab: usize, lane: &str, valid: bool) -> Result<usize> {
    if !valid {
        return Ok(0);
    }
    let idx = raw + 1;
    if idx >= vocab {
        return Err(Error::contract(format!(
            "{lane} value {raw} outside embedding range (vocab {vocab})"
        )));
    }
    Ok(idx)
}

impl Batch {
    /// Assembles a batch. Every window must have length `hyper.seq_len`;
    /// `weights`, when given, supplies one training weight per window.
    pub fn build(windows: &[&Window], weights: Option<&[f64]>, hyper: &LanaHyper) -> Result<Batch> {
        hyper.validate()?;
        if windows.is_empty() {
            return Err(Error::contract("cannot build an empty batch"));
        }
        if let Some(w) = weights {
            if w.len() != windows.len() {
                return Err(Error::contract(format!(
                    "{} weights for {} windows",
                    w.len(),
                    windows.len()
                )));
            }
            if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(Error::contract(format!("window weight {bad} is not a finite non-negative number")));
            }
        }
        let (b, s) = (windows.len(), hyper.seq_len);
        let n = b * s;
        let mut question_ids = vec![0usize; n];
        let mut part_ids = vec![0usize; n];
        let mut prev_response_ids = vec![0usize; n];
        let mut elapsed_ids = vec![0usize; n];
        let mut interval_ids = vec![0usize; n];
        let mut prior_viewed_ids = vec![0usize; n];
        let mut targets = vec![0.0; n];
        let mut valid = vec![false; n];
        let mut pos_weights = vec![0.0; n];
        let mut students = Vec::with_capacity(b);
        let mut window_indices = Vec::with_capacity(b);
        let mut bias = Array::zeros(&[b, s, s]);
        let mut dis = Array::zeros(&[b, s, s]);

        for (wi, win) in windows.iter().enumerate() {
            if win.seq_len() != s {
                return Err(Error::contract(format!(
                    "window of length {} in a batch of seq_len {s}",
                    win.seq_len()
                )));
            }
            students.push(win.student_id);
            window_indices.push(win.index);
            let w_weight = weights.map_or(1.0, |w| w[wi]);
            for t in 0..s {
                let flat = wi * s + t;
                let v = win.valid[t];
                valid[flat] = v;
                question_ids[flat] =
                    lane_id(win.question_id[t] as usize, hyper.question_vocab(), "question id", v)?;
                part_ids[flat] = lane_id(win.part[t] as usize, PART_VOCAB, "part", v)?;
                prev_response_ids[flat] =
                    lane_id(win.prev_response[t] as usize, PREV_RESPONSE_VOCAB, "previous response", v)?;
                elapsed_ids[flat] = lane_id(win.elapsed_s[t] as usize, ELAPSED_VOCAB, "elapsed seconds", v)?;
                interval_ids[flat] =
                    lane_id(win.interval_min[t] as usize, INTERVAL_VOCAB, "interval minutes", v)?;
                prior_viewed_ids[flat] =
                    lane_id(win.prior_viewed[t] as usize, PRIOR_VIEWED_VOCAB, "prior viewed", v)?;
                if v {
                    targets[flat] = win.target[t] as f64;
                    pos_weights[flat] = w_weight;
                }
            }
            for j in 0..s {
                for k in 0..s {
                    let cell = (wi * s + j) * s + k;
                    if k <= j && win.valid[j] && win.valid[k] {
                        let minutes =
                            (win.timestamp_ms[j] - win.timestamp_ms[k]) as f64 / 60_000.0;
                        if minutes < 0.0 {
                            return Err(Error::contract(format!(
                                "timestamps go backwards inside window {} of student {}",
                                win.index, win.student_id
                            )));
                        }
                        dis.data_mut()[cell] = minutes;
                    } else {
                        bias.data_mut()[cell] = MASK_EXCLUDED;
                    }
                }
            }
        }

        let mut pos_ids = Vec::with_capacity(n);
        for _ in 0..b {
            pos_ids.extend(0..s);
        }

        Ok(Batch {
            batch_size: b,
            seq_len: s,
            question_ids: Arc::new(question_ids),
            part_ids: Arc::new(part_ids),
            prev_response_ids: Arc::new(prev_response_ids),
            elapsed_ids: Arc::new(elapsed_ids),
            interval_ids: Arc::new(interval_ids),
            prior_viewed_ids: Arc::new(prior_viewed_ids),
            pos_ids: Arc::new(pos_ids),
            mask: AttnMask { bias: Arc::new(bias), query_valid: Some(valid.clone()) },
            dis: Arc::new(dis),
            targets,
            valid,
            weights: pos_weights,
            students,
            window_indices,
        })
    }
}
