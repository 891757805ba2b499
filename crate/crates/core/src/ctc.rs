//! Connectionist temporal classification over a per-frame log-probability
//! lattice: exact loss and gradient by the forward-backward recursion, a
//! brute-force path-enumeration oracle, greedy decoding and forced
//! alignment.
//!
//! Class 0 is the blank; labels are `1..=V`. All recursions run in log space.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Real, Result};

pub const BLANK: usize = 0;

/// Largest `(V+1)^T` the brute-force oracle will enumerate.
pub const ORACLE_LIMIT: u128 = 10_000_000;

/// `T × (V+1)` log-probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    frames: usize,
    classes: usize,
    data: Vec<Real>,
}

impl LogProbLattice {
    pub fn new(frames: usize, classes: usize, data: Vec<Real>) -> Result<Self> {
        if frames == 0 || classes < 2 || data.len() != frames * classes {
            return Err(Error::shape(format!(
                "lattice {frames}×{classes} with {} values",
                data.len()
            )));
        }
        Ok(LogProbLattice {
            frames,
            classes,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape(format!("lattice must be rank 2, got {:?}", t.shape())));
        }
        Self::new(t.shape()[0], t.shape()[1], t.to_vec())
    }

    /// Normalizes each row of raw scores with a log-softmax.
    pub fn from_logits(frames: usize, classes: usize, logits: &[Real]) -> Result<Self> {
        let mut data = logits.to_vec();
        for row in data.chunks_mut(classes) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Self::new(frames, classes, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[Real] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn at(&self, t: usize, k: usize) -> Real {
        self.data[t * self.classes + k]
    }

    /// Largest deviation of a row's log-sum-exp from 0.
    pub fn normalization_error(&self) -> Real {
        (0..self.frames)
            .map(|t| log_sum_exp(self.row(t)).abs())
            .fold(0.0, Real::max)
    }

    /// Log-probability of one explicit path.
    pub fn path_log_prob(&self, path: &[usize]) -> Real {
        path.iter().enumerate().map(|(t, &k)| self.at(t, k)).sum()
    }
}

/// Per-frame class choice whose collapse is the reference label sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    /// Class id per frame (0 = blank).
    pub classes: Vec<usize>,
    /// Index into the blank-interleaved label per frame.
    pub states: Vec<usize>,
}

fn log_add(a: Real, b: Real) -> Real {
    if a == Real::NEG_INFINITY {
        return b;
    }
    if b == Real::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[Real]) -> Real {
    let max = xs.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if max == Real::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<Real>().ln()
}

/// Minimum frame count for `labels`: one per label plus a separating blank
/// between each adjacent equal pair.
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn check_labels(labels: &[usize], frames: usize, classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&k| k == BLANK || k >= classes) {
        return Err(Error::DataFault(format!(
            "label id {bad} outside 1..{classes}"
        )));
    }
    let required = required_frames(labels);
    if frames < required {
        return Err(Error::InfeasibleLabel {
            label_len: labels.len(),
            required,
            frames,
        });
    }
    Ok(())
}

fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Whether the trellis may jump from `s − 2` to `s`.
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// `−ln P(z|x)` and its gradient with respect to every lattice entry.
pub fn ctc_loss_grad(lattice: &LogProbLattice, labels: &[usize]) -> Result<(Real, Vec<Real>)> {
    loss_and_grad_raw(&lattice.data, lattice.frames, lattice.classes, labels)
}

pub(crate) fn loss_and_grad_raw(
    lp: &[Real],
    frames: usize,
    classes: usize,
    labels: &[usize],
) -> Result<(Real, Vec<Real>)> {
    check_labels(labels, frames, classes)?;
    let ext = extended(labels);
    let s_len = ext.len();
    let at = |t: usize, k: usize| lp[t * classes + k];
    let neg = Real::NEG_INFINITY;

    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(&ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg { neg } else { acc + at(t, ext[s]) };
        }
    }

    let mut beta = vec![neg; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = at(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = at(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = if acc == neg { neg } else { acc + at(t, ext[s]) };
        }
    }

    let end = last * s_len;
    let mut log_p = alpha[end + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[end + s_len - 2]);
    }
    let mut grad = vec![0.0; frames * classes];
    if log_p == neg {
        return Ok((Real::INFINITY, grad));
    }
    let mut occupancy = vec![neg; classes];
    for t in 0..frames {
        occupancy.fill(neg);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], v);
        }
        for (k, &occ) in occupancy.iter().enumerate() {
            if occ != neg {
                grad[t * classes + k] = -(occ - at(t, k) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// `−ln` of the summed probability of every class sequence that collapses
/// to `labels`, by exhaustive enumeration.
pub fn ctc_brute_force(lattice: &LogProbLattice, labels: &[usize]) -> Result<Real> {
    let (frames, classes) = (lattice.frames, lattice.classes);
    let space = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if space > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge(space));
    }
    let mut path = vec![0usize; frames];
    let mut total = Real::NEG_INFINITY;
    loop {
        if collapse(&path) == labels {
            total = log_add(total, lattice.path_log_prob(&path));
        }
        // odometer increment, last frame fastest
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(-total);
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Best-path decoding: per-frame argmax (lowest id on ties), then collapse.
pub fn ctc_greedy_decode(lattice: &LogProbLattice) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.frames)
        .map(|t| {
            let row = lattice.row(t);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Most probable path within the set collapsing to `labels` (Viterbi over
/// the blank-interleaved trellis). Ties prefer staying in the current state.
pub fn ctc_forced_align(lattice: &LogProbLattice, labels: &[usize]) -> Result<Alignment> {
    let (frames, classes) = (lattice.frames, lattice.classes);
    check_labels(labels, frames, classes)?;
    let ext = extended(labels);
    let s_len = ext.len();
    let neg = Real::NEG_INFINITY;

    let mut score = vec![neg; frames * s_len];
    // back[t][s] = how many states the path advanced into (t, s): 0, 1 or 2
    let mut back = vec![0u8; frames * s_len];
    score[0] = lattice.at(0, ext[0]);
    if s_len > 1 {
        score[1] = lattice.at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let mut best = score[prev + s];
            let mut step = 0u8;
            if s >= 1 && score[prev + s - 1] > best {
                best = score[prev + s - 1];
                step = 1;
            }
            if can_skip(&ext, s) && score[prev + s - 2] > best {
                best = score[prev + s - 2];
                step = 2;
            }
            if best != neg {
                score[t * s_len + s] = best + lattice.at(t, ext[s]);
                back[t * s_len + s] = step;
            }
        }
    }

    let last = (frames - 1) * s_len;
    let mut s = s_len - 1;
    if s_len > 1 && score[last + s_len - 2] > score[last + s_len - 1] {
        s = s_len - 2;
    }
    if score[last + s] == neg {
        return Err(Error::InfeasibleLabel {
            label_len: labels.len(),
            required: required_frames(labels),
            frames,
        });
    }
    let mut states = vec![0usize; frames];
    for t in (0..frames).rev() {
        states[t] = s;
        s -= back[t * s_len + s] as usize;
    }
    let classes = states.iter().map(|&s| ext[s]).collect();
    Ok(Alignment { classes, states })
}

/// One line per utterance: `utt_id<TAB>space-separated class ids`.
pub fn write_alignment_table(path: &Path, table: &BTreeMap<String, Vec<usize>>) -> Result<()> {
    let mut text = String::new();
    for (utt, classes) in table {
        let ids: Vec<String> = classes.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(text, "{utt}\t{}", ids.join(" "));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_alignment_table(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fault = |msg: &str| Error::ParseFault {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (utt, ids) = line.split_once('\t').ok_or_else(|| fault("missing tab"))?;
        let classes = ids
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| fault("bad class id")))
            .collect::<Result<Vec<_>>>()?;
        if table.insert(utt.to_string(), classes).is_some() {
            return Err(Error::DuplicateId(utt.to_string()));
        }
    }
    Ok(table)
}
