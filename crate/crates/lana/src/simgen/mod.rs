//! Synthetic interaction generator with known ground truth.
//!
//! Real tutoring logs never come with the latent quantities a knowledge-tracing
//! model is supposed to recover, which makes it impossible to say whether a
//! given architectural choice finds signal or noise. This module generates
//! interaction histories from an item-response model that plants exactly the
//! three effects the LANA architecture claims to exploit, so experiments have
//! an answer key:
//!
//! * **heterogeneous ability** — each student `s` has a latent ability
//!   `a_s ~ N(ability_mean, 1)` and each question `q` a latent difficulty
//!   `d_q ~ N(0, 1)`;
//! * **ability drift** — a student's effective ability grows by
//!   `drift_per_100` after every 100 answered questions, modelling learning
//!   over the course of the log;
//! * **exponential memory decay** — answering a question of some part
//!   correctly leaves a short-lived trace: a later question of the *same part*
//!   gets a logit boost `beta * exp(-rho_s * dt_min)` where `dt_min` is the
//!   minutes elapsed since that answer and `rho_s ~ LogNormal(ln 0.05, 0.5)`
//!   is the student's personal per-minute forgetting rate. The trace is keyed
//!   on the question's part — the only concept proxy in the schema — so the
//!   decay signal generalizes across question ids, and it expires after 24
//!   hours.
//!
//! The probability of a correct answer is a guess-floored sigmoid:
//!
//! ```text
//! P(correct) = guess + (1 - guess) * sigmoid(a_s + drift - d_q + boost)
//! ```
//!
//! [`generate`] emits records in the [`crate::dataio`] schema (grouped by
//! student, timestamps strictly increasing within a student), and
//! [`describe`] reproduces the latent parameters behind the same seed so
//! tests can score recovery against the truth. Response time and the
//! prior-answer-viewed flag are independent nuisance lanes: elapsed time is
//! `LogNormal(ln 20 s, 0.6)` and the flag is Bernoulli(0.3).
//!
//! # Determinism and parallel generation
//!
//! All randomness flows from `SimConfig::seed` through fixed, named
//! sub-streams (see [`sub_seed`]): one stream each for abilities,
//! difficulties, and decay rates, plus one independent stream per student.
//! Two consequences are load-bearing and covered by tests:
//!
//! * the same config produces byte-identical CSV output, and
//! * student `s`'s records depend only on the master seed and `s`, so
//!   students can be generated in any order (or in parallel) without changing
//!   the output, and growing `n_students` leaves existing students' records
//!   untouched.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};

use crate::dataio::{Interaction, MAX_PART};
use crate::error::{Error, Result};
use crate::leveled::sigmoid;


/// Simulated logs start at this epoch instant (2020-09-13T12:26:40Z).
pub const BASE_TIMESTAMP_MS: i64 = 1_600_000_000_000;

/// Each student's history starts at a uniform offset within this span, so
/// students interleave in wall-clock time instead of marching in lockstep.
const START_SPREAD_MS: i64 = 30 * 24 * 60 * 60 * 1000;

/// A correct same-part answer stops boosting after this long (one day).
const MEMORY_HORIZON_MIN: f64 = 1440.0;

/// Sub-stream label for the per-student ability draw.
const STREAM_ABILITIES: u64 = 1;
/// Sub-stream label for the per-question difficulty draw.
const STREAM_DIFFICULTIES: u64 = 2;
/// Sub-stream label for the per-student decay-rate draw.
const STREAM_DECAY: u64 = 3;
/// Student `s` draws everything else from stream `STREAM_STUDENT_BASE + s`.
const STREAM_STUDENT_BASE: u64 = 4;

/// Header line of the ground-truth CSV written by [`write_ground_truth`].
pub const GROUND_TRUTH_HEADER: &str = "kind,id,value";

/// Settings for one simulated dataset.
///
/// The default is the desk-scale setup used by the ablation experiments:
/// 2,000 students answering roughly 200 questions each out of a pool of 800,
/// with all three planted effects switched on.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Number of students; ids are `0..n_students`.
    pub n_students: u32,
    /// Size of the question pool; ids are `0..n_questions`.
    pub n_questions: u32,
    /// Mean interactions per student.
    pub interactions_mean: u32,
    /// Per-student count is uniform in `mean - jitter ..= mean + jitter`.
    pub interactions_jitter: u32,
    /// Mean of the student ability distribution `N(ability_mean, 1)`.
    ///
    /// Kept configurable so paired-seed experiments can shift every ability
    /// by a constant while all other draws stay identical.
    pub ability_mean: f64,
    /// Ability gained per 100 answered questions (the drift effect).
    pub drift_per_100: f64,
    /// Number of question parts; question `q` belongs to part
    /// `q % n_parts + 1`.
    pub n_parts: u8,
    /// Amplitude of the same-part memory boost, in logits.
    pub beta: f64,
    /// Guess floor: even a hopeless student answers correctly with at least
    /// this probability.
    pub guess: f64,
    /// Mean of the exponential inter-arrival gap between a student's
    /// consecutive interactions, in minutes.
    pub gap_mean_min: f64,
    /// Master seed; every random draw derives from it.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_students: 2000,
            n_questions: 800,
            interactions_mean: 200,
            interactions_jitter: 40,
            ability_mean: 0.0,
            drift_per_100: 0.3,
            n_parts: 7,
            beta: 1.0,
            guess: 0.1,
            gap_mean_min: 5.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Checks that every field is usable; returns a contract error otherwise.
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0 {
            return Err(Error::contract("n_students must be at least 1"));
        }
        if self.n_questions == 0 {
            return Err(Error::contract("n_questions must be at least 1"));
        }
        if self.interactions_mean == 0 {
            return Err(Error::contract("interactions_mean must be at least 1"));
        }
        if self.interactions_jitter >= self.interactions_mean {
            return Err(Error::contract(format!(
                "interactions_jitter ({}) must be smaller than interactions_mean ({}) \
                 so every student answers at least one question",
                self.interactions_jitter, self.interactions_mean
            )));
        }
        if self.n_parts == 0 || self.n_parts > MAX_PART {
            return Err(Error::contract(format!(
                "n_parts must be in 1..={MAX_PART}, got {}",
                self.n_parts
            )));
        }
        if !self.ability_mean.is_finite() {
            return Err(Error::contract("ability_mean must be finite"));
        }
        if !self.drift_per_100.is_finite() {
            return Err(Error::contract("drift_per_100 must be finite"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::contract(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        if !self.guess.is_finite() || !(0.0..0.5).contains(&self.guess) {
            return Err(Error::contract(format!(
                "guess must lie in [0, 0.5), got {}",
                self.guess
            )));
        }
        if !self.gap_mean_min.is_finite() || self.gap_mean_min <= 0.0 {
            return Err(Error::contract(format!(
                "gap_mean_min must be finite and positive, got {}",
                self.gap_mean_min
            )));
        }
        Ok(())
    }
}

/// The latent parameters behind one simulated dataset.
///
/// One entry per student in `abilities` and `decay_rates`, one per question
/// in `difficulties`; conceptually one table row per entity, so
/// `abilities.len() + difficulties.len()` rows in total.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Student id → latent ability `a_s`.
    pub abilities: BTreeMap<u32, f64>,
    /// Student id → per-minute memory decay rate `rho_s`.
    pub decay_rates: BTreeMap<u32, f64>,
    /// Question id → latent difficulty `d_q`.
    pub difficulties: BTreeMap<u32, f64>,
}

/// Derives the seed of a named sub-stream from the master seed.
///
/// SplitMix64 finalizer over the master advanced by `stream` golden-ratio
/// steps; distinct streams decorrelate even for adjacent labels.
fn sub_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Latent vectors indexed by entity id (position `i` is id `i`).
struct Latents {
    abilities: Vec<f64>,
    decay_rates: Vec<f64>,
    difficulties: Vec<f64>,
}

fn draw_latents(config: &SimConfig) -> Latents {
    let n_s = config.n_students as usize;
    let n_q = config.n_questions as usize;

    let ability_dist =
        Normal::new(config.ability_mean, 1.0).expect("unit standard deviation is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_ABILITIES));
    let abilities: Vec<f64> = (0..n_s).map(|_| ability_dist.sample(&mut rng)).collect();

    let difficulty_dist = Normal::new(0.0, 1.0).expect("unit standard deviation is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_DIFFICULTIES));
    let difficulties: Vec<f64> = (0..n_q)
        .map(|_| difficulty_dist.sample(&mut rng))
        .collect();

    let decay_dist =
        LogNormal::new(0.05_f64.ln(), 0.5).expect("positive shape parameter is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_DECAY));
    let decay_rates: Vec<f64> = (0..n_s).map(|_| decay_dist.sample(&mut rng)).collect();

    Latents {
        abilities,
        decay_rates,
        difficulties,
    }
}

/// Returns the latent parameters the generator uses for `config`.
///
/// Drawn from the latent sub-streams only, so the result matches the values
/// [`generate`] uses for the same config without generating any interactions.
pub fn describe(config: &SimConfig) -> Result<GroundTruth> {
    config.validate()?;
    let latents = draw_latents(config);
    Ok(GroundTruth {
        abilities: to_id_map(&latents.abilities),
        decay_rates: to_id_map(&latents.decay_rates),
        difficulties: to_id_map(&latents.difficulties),
    })
}

fn to_id_map(values: &[f64]) -> BTreeMap<u32, f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as u32, v))
        .collect()
}

/// Generates one simulated dataset.
///
/// Records come grouped by ascending student id with strictly increasing
/// timestamps within each student, ready for [`crate::dataio::windows`].
pub fn generate(config: &SimConfig) -> Result<Vec<Interaction>> {
    config.validate()?;
    let latents = draw_latents(config);

    let gap_dist = Exp::new(1.0 / config.gap_mean_min).expect("validated positive mean gap");
    let elapsed_dist =
        LogNormal::new(20.0_f64.ln(), 0.6).expect("positive shape parameter is valid");

    let mut records =
        Vec::with_capacity(config.n_students as usize * config.interactions_mean as usize);
    for s in 0..config.n_students {
        let a_s = latents.abilities[s as usize];
        let rho_s = latents.decay_rates[s as usize];
        let mut rng =
            ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_STUDENT_BASE + u64::from(s)));

        let lo = config.interactions_mean - config.interactions_jitter;
        let hi = config.interactions_mean + config.interactions_jitter;
        let count = rng.gen_range(lo..=hi);
        let mut ts = BASE_TIMESTAMP_MS + rng.gen_range(0..START_SPREAD_MS);

        // Most recent interaction per part: (timestamp, correct). Index 0 is
        // unused padding so parts index directly.
        let mut last_part: Vec<Option<(i64, bool)>> = vec![None; usize::from(config.n_parts) + 1];

        for t in 0..count {
            // The per-interaction draw order — gap, question, elapsed,
            // viewed, correctness — is part of the output format: reordering
            // it changes every seed's dataset.
            if t > 0 {
                let gap_min: f64 = gap_dist.sample(&mut rng);
                let gap_ms = ((gap_min * 60_000.0).round() as i64).max(1);
                ts += gap_ms;
            }
            let q = rng.gen_range(0..config.n_questions);
            let part = (q % u32::from(config.n_parts)) as u8 + 1;
            let elapsed_s: f64 = elapsed_dist.sample(&mut rng);
            let elapsed_ms = ((elapsed_s * 1000.0).round() as u64).max(1);
            let prior_answer_viewed = rng.gen_bool(0.3);

            let boost = match last_part[usize::from(part)] {
                Some((prev_ts, true)) => {
                    let dt_min = (ts - prev_ts) as f64 / 60_000.0;
                    if dt_min <= MEMORY_HORIZON_MIN {
                        config.beta * (-rho_s * dt_min).exp()
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            };
            let drift = config.drift_per_100 * f64::from(t / 100);
            let d_q = latents.difficulties[q as usize];
            let p = config.guess + (1.0 - config.guess) * sigmoid(a_s + drift - d_q + boost);
            let correct = rng.gen_bool(p);
            last_part[usize::from(part)] = Some((ts, correct));

            records.push(Interaction {
                student_id: s,
                question_id: q,
                part,
                timestamp_ms: ts,
                elapsed_ms,
                correct,
                prior_answer_viewed,
            });
        }
    }
    Ok(records)
}

/// Writes the ground-truth table as CSV: header `kind,id,value`, then one
/// `ability` and one `decay` row per student and one `difficulty` row per
/// question, ids ascending within each kind.
///
/// Values are printed with the shortest representation that parses back to
/// the identical bits, so [`read_ground_truth`] is a lossless inverse.
pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(out, "{GROUND_TRUTH_HEADER}").map_err(io_err)?;
    for (kind, table) in [
        ("ability", &truth.abilities),
        ("decay", &truth.decay_rates),
        ("difficulty", &truth.difficulties),
    ] {
        for (id, value) in table {
            writeln!(out, "{kind},{id},{value}").map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// Reads a ground-truth CSV written by [`write_ground_truth`].
///
/// Strict by design: the header must match exactly, every row must be
/// `kind,id,value` with a known kind, a parseable id, and a finite value,
/// duplicate `(kind, id)` pairs are rejected, and the three tables must be
/// coherent (at least one student and one question, and exactly one decay
/// rate per ability). Row order is otherwise free.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file: expected a header line"))?;
    let header = header.map_err(|e| Error::io(path.display().to_string(), e))?;
    if header != GROUND_TRUTH_HEADER {
        return Err(Error::parse(
            1,
            format!("expected header {GROUND_TRUTH_HEADER:?}, got {header:?}"),
        ));
    }

    let mut truth = GroundTruth {
        abilities: BTreeMap::new(),
        decay_rates: BTreeMap::new(),
        difficulties: BTreeMap::new(),
    };
    for (index, line) in lines {
        let line_no = index + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut fields = line.split(',');
        let (Some(kind), Some(id), Some(value), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::parse(
                line_no,
                format!("expected exactly 3 comma-separated fields, got {line:?}"),
            ));
        };
        let id: u32 = id
            .parse()
            .map_err(|e| Error::parse(line_no, format!("bad id {id:?}: {e}")))?;
        let value: f64 = value
            .parse()
            .map_err(|e| Error::parse(line_no, format!("bad value {value:?}: {e}")))?;
        if !value.is_finite() {
            return Err(Error::parse(
                line_no,
                format!("value must be finite, got {value}"),
            ));
        }
        let table = match kind {
            "ability" => &mut truth.abilities,
            "decay" => &mut truth.decay_rates,
            "difficulty" => &mut truth.difficulties,
            other => {
                return Err(Error::parse(
                    line_no,
                    format!("unknown kind {other:?}: expected ability, decay, or difficulty"),
                ));
            }
        };
        if table.insert(id, value).is_some() {
            return Err(Error::parse(
                line_no,
                format!("duplicate {kind} row for id {id}"),
            ));
        }
    }

    if truth.abilities.is_empty() {
        return Err(Error::parse(1, "no ability rows"));
    }
    if truth.difficulties.is_empty() {
        return Err(Error::parse(1, "no difficulty rows"));
    }
    if truth.decay_rates.keys().ne(truth.abilities.keys()) {
        return Err(Error::parse(
            1,
            "decay rows must cover exactly the same student ids as ability rows",
        ));
    }
    Ok(truth)
}
