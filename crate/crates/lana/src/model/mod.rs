//! The network: hyperparameters, the named parameter set, batches, and the
//! forward pass.

mod batch;
mod net;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use batch::Batch;
pub use net::{model_forward, ForwardOutput};

use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Tensor};

/// Embedding vocabulary sizes for the fixed-range lanes. Index 0 is the pad
/// token and raw lane values are shifted up by one.
pub const PART_VOCAB: usize = 9;
pub const PREV_RESPONSE_VOCAB: usize = 4;
pub const INTERVAL_VOCAB: usize = 1442;
pub const ELAPSED_VOCAB: usize = 302;
pub const PRIOR_VIEWED_VOCAB: usize = 3;

/// Model shape. Feed-forward blocks use a hidden width of `d_model`,
/// matching the pivot block's inner width so ablations swap like for like.
#[derive(Clone, Debug, PartialEq)]
pub struct LanaHyper {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Window length every batch must match.
    pub seq_len: usize,
    /// Width of the performance features driving pivot weights.
    pub d_piv: usize,
    /// Number of distinct question ids (`0..n_questions`).
    pub n_questions: usize,
    pub dropout: f64,
}

impl LanaHyper {
    /// Desk-scale defaults for a dataset of `n_questions` questions.
    pub fn desk(n_questions: usize) -> Self {
        LanaHyper {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            seq_len: 100,
            d_piv: 8,
            n_questions,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_piv < 1 {
            return Err(Error::contract("d_piv must be at least 1"));
        }
        if self.seq_len < 2 {
            return Err(Error::contract("seq_len must be at least 2"));
        }
        if self.n_questions == 0 {
            return Err(Error::contract("n_questions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn question_vocab(&self) -> usize {
        self.n_questions + 1
    }
}

/// Which architecture pieces are switched off. All three flags together give
/// the plain encoder-decoder baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Sum embeddings with positional encoding at the input instead of
    /// concatenation + projection with per-module positional projections.
    pub no_bm: bool,
    /// Use standard cross-attention instead of the decay-aware variant.
    pub no_pma: bool,
    /// Use a plain feed-forward block instead of the pivot-conditioned one.
    pub no_pcffn: bool,
}

impl AblationFlags {
    /// Everything disabled: the baseline architecture.
    pub fn baseline() -> Self {
        AblationFlags { no_bm: true, no_pma: true, no_pcffn: true }
    }

    /// Everything enabled.
    pub fn full() -> Self {
        AblationFlags::default()
    }
}

enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, times `scale`.
    Uniform { fan_in: usize, scale: f64 },
    Zero,
    One,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![d_in, d_out],
        init: Init::Uniform { fan_in: d_in, scale: 1.0 },
    });
    specs.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![d_out], init: Init::Zero });
}

fn pivot_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d_y: usize, d_x: usize, d_p: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![d_y, d_x, d_p],
        init: Init::Uniform { fan_in: d_x * d_p, scale: 0.1 },
    });
    specs.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![d_y], init: Init::Zero });
}

fn layernorm_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec { name: format!("{prefix}.g"), shape: vec![d], init: Init::One });
    specs.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![d], init: Init::Zero });
}

fn attention_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, with_pos: bool) {
    for gate in ["wq", "wk", "wv", "wo"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.{gate}"),
            shape: vec![d, d],
            init: Init::Uniform { fan_in: d, scale: 1.0 },
        });
    }
    for gate in ["bq", "bk", "bv", "bo"] {
        specs.push(ParamSpec { name: format!("{prefix}.{gate}"), shape: vec![d], init: Init::Zero });
    }
    if with_pos {
        specs.push(ParamSpec {
            name: format!("{prefix}.pos_w"),
            shape: vec![d, d],
            init: Init::Uniform { fan_in: d, scale: 1.0 },
        });
    }
}

fn srfe_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, d_out: usize, with_pos: bool) {
    attention_spec(specs, &format!("{prefix}.attn"), d, with_pos);
    linear_spec(specs, &format!("{prefix}.lin1"), d, d);
    linear_spec(specs, &format!("{prefix}.lin2"), d, d_out);
}

fn param_specs(hyper: &LanaHyper, flags: &AblationFlags) -> Vec<ParamSpec> {
    let d = hyper.d_model;
    let mut specs = Vec::new();
    let emb = |name: &str, vocab: usize| ParamSpec {
        name: format!("emb.{name}"),
        shape: vec![vocab, d],
        init: Init::Uniform { fan_in: d, scale: 1.0 },
    };
    specs.push(emb("question", hyper.question_vocab()));
    specs.push(emb("part", PART_VOCAB));
    specs.push(emb("prev_response", PREV_RESPONSE_VOCAB));
    specs.push(emb("elapsed", ELAPSED_VOCAB));
    specs.push(emb("interval", INTERVAL_VOCAB));
    specs.push(emb("prior_viewed", PRIOR_VIEWED_VOCAB));
    specs.push(ParamSpec {
        name: "emb.pos".into(),
        shape: vec![hyper.seq_len, d],
        init: Init::Uniform { fan_in: d, scale: 1.0 },
    });

    let with_pos = !flags.no_bm;
    if with_pos {
        linear_spec(&mut specs, "enc_in.proj", 2 * d, d);
        linear_spec(&mut specs, "dec_in.proj", 4 * d, d);
    }

    for i in 0..hyper.n_encoder_layers {
        attention_spec(&mut specs, &format!("enc.{i}.attn"), d, with_pos);
        layernorm_spec(&mut specs, &format!("enc.{i}.ln1"), d);
        linear_spec(&mut specs, &format!("enc.{i}.ffn.l1"), d, d);
        linear_spec(&mut specs, &format!("enc.{i}.ffn.l2"), d, d);
        layernorm_spec(&mut specs, &format!("enc.{i}.ln2"), d);
    }

    if !flags.no_pma {
        srfe_spec(&mut specs, "srfe_mem", d, hyper.n_heads, with_pos);
    }
    if !flags.no_pcffn {
        srfe_spec(&mut specs, "srfe_perf", d, hyper.d_piv, with_pos);
    }

    for i in 0..hyper.n_decoder_layers {
        attention_spec(&mut specs, &format!("dec.{i}.self_attn"), d, with_pos);
        layernorm_spec(&mut specs, &format!("dec.{i}.ln1"), d);
        attention_spec(&mut specs, &format!("dec.{i}.cross"), d, with_pos);
        if !flags.no_pma {
            specs.push(ParamSpec {
                name: format!("dec.{i}.cross.theta"),
                shape: vec![1],
                init: Init::Zero,
            });
        }
        layernorm_spec(&mut specs, &format!("dec.{i}.ln2"), d);
        if flags.no_pcffn {
            linear_spec(&mut specs, &format!("dec.{i}.ffn.l1"), d, d);
            linear_spec(&mut specs, &format!("dec.{i}.ffn.l2"), d, d);
        } else {
            pivot_spec(&mut specs, &format!("dec.{i}.pcffn.p1"), d, d, hyper.d_piv);
            pivot_spec(&mut specs, &format!("dec.{i}.pcffn.p2"), d, d, hyper.d_piv);
        }
        layernorm_spec(&mut specs, &format!("dec.{i}.ln3"), d);
    }

    linear_spec(&mut specs, "head", d, 1);
    specs
}

/// The complete named parameter set of one model instance.
///
/// Matrices draw from a uniform `±1/sqrt(fan_in)` at initialization, biases
/// and the decay offsets start at zero, layer norms at identity, and the
/// rank-3 pivot tensors are scaled by an extra 0.1 so per-position weight
/// matrices start near zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LanaParams {
    pub(crate) map: BTreeMap<String, Array>,
}

impl LanaParams {
    /// Seeded initialization for the given shape and flag set.
    pub fn init(hyper: &LanaHyper, flags: &AblationFlags, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for spec in param_specs(hyper, flags) {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Uniform { fan_in, scale } => {
                    let bound = scale / (fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Zero => vec![0.0; numel],
                Init::One => vec![1.0; numel],
            };
            map.insert(spec.name, Array::new(spec.shape, data)?);
        }
        Ok(LanaParams { map })
    }

    /// Expected parameter names and shapes for the given configuration.
    pub fn expected_shapes(hyper: &LanaHyper, flags: &AblationFlags) -> BTreeMap<String, Vec<usize>> {
        param_specs(hyper, flags).into_iter().map(|s| (s.name, s.shape)).collect()
    }

    /// Builds a parameter set from raw named arrays, verifying that names
    /// and shapes exactly match the configuration.
    pub fn from_map(
        hyper: &LanaHyper,
        flags: &AblationFlags,
        map: BTreeMap<String, Array>,
    ) -> Result<Self> {
        hyper.validate()?;
        let expected = Self::expected_shapes(hyper, flags);
        for (name, shape) in &expected {
            match map.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter {name:?}")));
                }
                Some(a) if a.shape() != &shape[..] => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        a.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = map.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra:?}")));
        }
        Ok(LanaParams { map })
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Array::numel).sum()
    }

    /// Overwrites one tensor in place; the shape must not change.
    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::contract(format!(
                "parameter {name:?} has shape {:?}, refusing to store {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// Places every parameter on a tape.
///
/// `trainable` decides per name whether the leaf accumulates gradients;
/// evaluation passes `|_| false`, fine-tuning with frozen groups passes a
/// prefix filter.
pub fn bind(
    tape: &Tape,
    params: &LanaParams,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, Tensor> {
    params
        .map
        .iter()
        .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), trainable(name))))
        .collect()
}
