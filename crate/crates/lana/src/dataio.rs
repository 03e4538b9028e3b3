//! Interaction-log ingestion: CSV parsing, fixed-length windowing, and
//! student-level train/validation splits.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Exact header line every interaction CSV must start with.
pub const CSV_HEADER: &str =
    "student_id,question_id,part,timestamp_ms,elapsed_ms,correct,prior_answer_viewed";

/// Highest part label a question can carry.
pub const MAX_PART: u8 = 7;

/// Interval lane saturation, in whole minutes (one day).
pub const MAX_INTERVAL_MIN: u32 = 1440;

/// Elapsed lane saturation, in whole seconds (five minutes).
pub const MAX_ELAPSED_S: u32 = 300;

/// One answered question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub student_id: u32,
    pub question_id: u32,
    /// Question part, `1..=7`.
    pub part: u8,
    pub timestamp_ms: i64,
    /// Time spent answering, in milliseconds.
    pub elapsed_ms: u64,
    pub correct: bool,
    pub prior_answer_viewed: bool,
}

/// Previous-response lane value meaning "no previous interaction".
pub const PREV_START: u8 = 2;

/// A fixed-length training window for one student.
///
/// All lane vectors have length `seq_len()`. A window shorter than the target
/// length is padded at the front: positions `0..pad_count` hold zeros and are
/// marked invalid. The previous-response lane is shifted by one interaction
/// (`prev_response[t]` describes interaction `t-1`), with [`PREV_START`] at
/// the first interaction of the student's history; lanes that look backwards
/// (previous response, interval) carry over across window boundaries, so
/// windows after the first continue seamlessly from their predecessor.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub student_id: u32,
    /// Position of this window within the student's history, from 0.
    pub index: usize,
    pub question_id: Vec<u32>,
    pub part: Vec<u8>,
    /// 0 = previous answer incorrect, 1 = correct, [`PREV_START`] = none.
    pub prev_response: Vec<u8>,
    /// Whole minutes since the previous interaction, clipped to
    /// `0..=MAX_INTERVAL_MIN`; 0 at the first interaction of a history.
    pub interval_min: Vec<u32>,
    /// Whole seconds spent answering, clipped to `0..=MAX_ELAPSED_S`.
    pub elapsed_s: Vec<u32>,
    pub prior_viewed: Vec<u8>,
    /// Raw timestamps, used to compute attention distances.
    pub timestamp_ms: Vec<i64>,
    /// Correctness of the interaction at each position.
    pub target: Vec<u8>,
    pub valid: Vec<bool>,
    pub pad_count: usize,
}

impl Window {
    /// Window length including padding.
    pub fn seq_len(&self) -> usize {
        self.valid.len()
    }

    /// Number of real (non-pad) positions.
    pub fn n_valid(&self) -> usize {
        self.seq_len() - self.pad_count
    }
}

// ── parsing ─────────────────────────────────────────────────────────────────

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| Error::parse(line, format!("{name}: invalid integer {raw:?}")))
}

fn parse_flag(line: usize, name: &str, raw: &str) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::parse(line, format!("{name} must be 0 or 1, got {raw:?}"))),
    }
}

/// Parses interaction CSV text.
///
/// The header must match [`CSV_HEADER`] exactly. Rows of one student must
/// appear in non-decreasing timestamp order, though students may interleave.
/// The result is grouped by ascending student id, each group in file order.
pub fn parse_interactions_text(text: &str) -> Result<Vec<Interaction>> {
    let mut lines = text.lines();
    match lines.next().map(|l| l.trim_end_matches('\r')) {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => {
            return Err(Error::parse(1, format!("expected header {CSV_HEADER:?}, got {h:?}")))
        }
        None => return Err(Error::parse(1, "empty input, expected a header line")),
    }

    let mut by_student: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();
    for (i, raw_line) in lines.enumerate() {
        let lineno = i + 2;
        let line = raw_line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::parse(lineno, format!("expected 7 fields, got {}", fields.len())));
        }
        let student_id: u32 = parse_field(lineno, "student_id", fields[0])?;
        let question_id: u32 = parse_field(lineno, "question_id", fields[1])?;
        let part: u8 = parse_field(lineno, "part", fields[2])?;
        if !(1..=MAX_PART).contains(&part) {
            return Err(Error::parse(lineno, format!("part must be 1..={MAX_PART}, got {part}")));
        }
        let timestamp_ms: i64 = parse_field(lineno, "timestamp_ms", fields[3])?;
        if timestamp_ms < 0 {
            return Err(Error::parse(lineno, format!("timestamp_ms is negative: {timestamp_ms}")));
        }
        let elapsed_ms: u64 = parse_field(lineno, "elapsed_ms", fields[4])?;
        let correct = parse_flag(lineno, "correct", fields[5])?;
        let prior_answer_viewed = parse_flag(lineno, "prior_answer_viewed", fields[6])?;

        let group = by_student.entry(student_id).or_default();
        if let Some(last) = group.last() {
            if timestamp_ms < last.timestamp_ms {
                return Err(Error::parse(
                    lineno,
                    format!(
                        "timestamps of student {student_id} decrease: {} after {}",
                        timestamp_ms, last.timestamp_ms
                    ),
                ));
            }
        }
        group.push(Interaction {
            student_id,
            question_id,
            part,
            timestamp_ms,
            elapsed_ms,
            correct,
            prior_answer_viewed,
        });
    }
    Ok(by_student.into_values().flatten().collect())
}

/// Reads and parses an interaction CSV from disk.
pub fn parse_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_interactions_text(&text)
}

/// Writes interactions as CSV in the canonical column order.
pub fn write_interactions(path: &Path, records: &[Interaction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(out, "{CSV_HEADER}").map_err(io_err)?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.student_id,
            r.question_id,
            r.part,
            r.timestamp_ms,
            r.elapsed_ms,
            r.correct as u8,
            r.prior_answer_viewed as u8
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Splits grouped records into per-student slices, ascending by student id.
pub fn group_by_student(records: &[Interaction]) -> Vec<(u32, &[Interaction])> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].student_id != records[start].student_id {
            groups.push((records[start].student_id, &records[start..i]));
            start = i;
        }
    }
    groups
}

// ── windowing ───────────────────────────────────────────────────────────────

/// Cuts one student's history into consecutive windows of length `n`.
///
/// Every window except possibly the last covers exactly `n` interactions; a
/// shorter final window is front-padded. The history must be non-empty,
/// belong to a single student, and be sorted by timestamp.
pub fn window_student(history: &[Interaction], n: usize) -> Result<Vec<Window>> {
    if n < 2 {
        return Err(Error::contract(format!("window length must be at least 2, got {n}")));
    }
    if history.is_empty() {
        return Err(Error::contract("cannot window an empty history"));
    }
    let student_id = history[0].student_id;
    for pair in history.windows(2) {
        if pair[1].student_id != student_id {
            return Err(Error::contract(format!(
                "history mixes students {student_id} and {}",
                pair[1].student_id
            )));
        }
        if pair[1].timestamp_ms < pair[0].timestamp_ms {
            return Err(Error::contract(format!(
                "history of student {student_id} is not sorted by timestamp"
            )));
        }
    }

    let t_total = history.len();
    let n_windows = t_total.div_ceil(n);
    let mut out = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let lo = w * n;
        let hi = ((w + 1) * n).min(t_total);
        let pad_count = n - (hi - lo);
        let mut win = Window {
            student_id,
            index: w,
            question_id: vec![0; n],
            part: vec![0; n],
            prev_response: vec![0; n],
            interval_min: vec![0; n],
            elapsed_s: vec![0; n],
            prior_viewed: vec![0; n],
            timestamp_ms: vec![0; n],
            target: vec![0; n],
            valid: vec![false; n],
            pad_count,
        };
        for (slot, t) in (lo..hi).enumerate() {
            let pos = pad_count + slot;
            let rec = &history[t];
            win.question_id[pos] = rec.question_id;
            win.part[pos] = rec.part;
            win.prev_response[pos] = if t == 0 {
                PREV_START
            } else {
                history[t - 1].correct as u8
            };
            win.interval_min[pos] = if t == 0 {
                0
            } else {
                let gap_ms = rec.timestamp_ms - history[t - 1].timestamp_ms;
                ((gap_ms / 60_000) as u64).min(MAX_INTERVAL_MIN as u64) as u32
            };
            win.elapsed_s[pos] = (rec.elapsed_ms / 1000).min(MAX_ELAPSED_S as u64) as u32;
            win.prior_viewed[pos] = rec.prior_answer_viewed as u8;
            win.timestamp_ms[pos] = rec.timestamp_ms;
            win.target[pos] = rec.correct as u8;
            win.valid[pos] = true;
        }
        out.push(win);
    }
    Ok(out)
}

/// Windows every student of a grouped record list (see
/// [`parse_interactions`] for the grouping invariant).
pub fn windows(records: &[Interaction], n: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for (_, history) in group_by_student(records) {
        out.extend(window_student(history, n)?);
    }
    Ok(out)
}

// ── splitting ───────────────────────────────────────────────────────────────

/// Splits records into train and validation sets by student.
///
/// The validation set receives `max(1, min(n_students - 1,
/// round(valid_fraction * n_students)))` students, chosen by a seeded
/// shuffle, so both sides are always non-empty. Requires at least two
/// students and a fraction strictly inside `(0, 1)`.
pub fn split_by_student(
    records: &[Interaction],
    valid_fraction: f64,
    seed: u64,
) -> Result<(Vec<Interaction>, Vec<Interaction>)> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::contract(format!(
            "valid_fraction must be in (0, 1), got {valid_fraction}"
        )));
    }
    let groups = group_by_student(records);
    let n_students = groups.len();
    if n_students < 2 {
        return Err(Error::contract(format!(
            "need at least 2 students to split, got {n_students}"
        )));
    }
    let n_valid = ((valid_fraction * n_students as f64 + 0.5).floor() as usize)
        .max(1)
        .min(n_students - 1);

    let mut ids: Vec<u32> = groups.iter().map(|(id, _)| *id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let valid_ids: std::collections::BTreeSet<u32> = ids[..n_valid].iter().copied().collect();

    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (id, history) in groups {
        if valid_ids.contains(&id) {
            valid.extend_from_slice(history);
        } else {
            train.extend_from_slice(history);
        }
    }
    Ok((train, valid))
}
