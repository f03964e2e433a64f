//! Input signals: IDX (MNIST) files, raw-label to state assignment, synthetic
//! Gaussian clusters, CSV import/export and held-out splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw unsigned-byte images from an IDX file, row-major per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

fn read_header(bytes: &[u8], words: usize, what: &str) -> Result<Vec<u32>> {
    let need = 4 * words;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "{what}: header needs {need} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok(bytes[..need]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize, what: &str) -> Result<()> {
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::Format(format!(
            "{what}: expected {expected} payload bytes, found {actual}"
        )));
    }
    Ok(())
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes, 4, "idx images")?;
        if header[0] != IDX_IMAGES_MAGIC {
            return Err(Error::Format(format!(
                "idx images: bad magic {:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
                header[0]
            )));
        }
        let (count, rows, cols) = (header[1] as usize, header[2] as usize, header[3] as usize);
        let expected = count
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .ok_or_else(|| Error::Format("idx images: dimensions overflow".into()))?;
        check_payload(bytes, 16, expected, "idx images")?;
        Ok(IdxImages {
            count,
            rows,
            cols,
            pixels: bytes[16..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for word in [IDX_IMAGES_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&word.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.pixels_per_image();
        &self.pixels[i * d..(i + 1) * d]
    }
}

impl IdxLabels {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes, 2, "idx labels")?;
        if header[0] != IDX_LABELS_MAGIC {
            return Err(Error::Format(format!(
                "idx labels: bad magic {:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
                header[0]
            )));
        }
        check_payload(bytes, 8, header[1] as usize, "idx labels")?;
        Ok(IdxLabels {
            labels: bytes[8..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    IdxImages::parse(&bytes).map_err(|e| in_file(e, path.as_ref()))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<IdxLabels> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    IdxLabels::parse(&bytes).map_err(|e| in_file(e, path.as_ref()))
}

fn in_file(err: Error, path: &Path) -> Error {
    match err {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Flattens paired images into `[0, 1]`-scaled signals, one row per image.
pub fn pair_idx(images: &IdxImages, labels: &IdxLabels) -> Result<(Vec<f64>, usize)> {
    if images.count != labels.labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.labels.len()
        )));
    }
    let signals = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((signals, images.pixels_per_image()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Idx,
    Synthetic,
    Csv,
}

/// `n × d` signals with a state label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalDataset {
    signals: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    state_count: usize,
    pub provenance: Provenance,
}

impl SignalDataset {
    /// Every state in `[0, state_count)` must have at least one sample.
    pub fn new(
        signals: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        state_count: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("signal dimension must be positive"));
        }
        if signals.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "{} values do not form {} signals of dimension {dim}",
                signals.len(),
                labels.len()
            )));
        }
        if signals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("signals must be finite"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= state_count) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {state_count})"
            )));
        }
        let ds = SignalDataset {
            signals,
            dim,
            labels,
            state_count,
            provenance,
        };
        if let Some(missing) = ds.state_counts().iter().position(|&c| c == 0) {
            return Err(Error::InsufficientData(format!("state {missing} has no samples")));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn signal(&self, i: usize) -> &[f64] {
        &self.signals[i * self.dim..(i + 1) * self.dim]
    }

    pub fn state_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.state_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Sample indices grouped by state.
    pub fn indices_by_state(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.state_count];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.signals)
    }

    pub fn rows(&self, indices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            indices.len(),
            self.dim,
            indices.iter().flat_map(|&i| self.signal(i).iter().copied()),
        )
    }

    /// Subset by index; states may become empty, so this is not validated
    /// against `state_count`.
    fn subset(&self, indices: &[usize]) -> SignalDataset {
        SignalDataset {
            signals: indices.iter().flat_map(|&i| self.signal(i).iter().copied()).collect(),
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            state_count: self.state_count,
            provenance: self.provenance,
        }
    }

    /// Stratified seeded split into `(train, test)`. Each state keeps at least
    /// one sample on both sides when it has two or more.
    pub fn split_holdout(&self, test_fraction: f64, seed: u64) -> Result<(SignalDataset, SignalDataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::invalid(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for mut group in self.indices_by_state() {
            if group.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "state {} needs at least 2 samples to split",
                    self.labels[group[0]]
                )));
            }
            group.shuffle(&mut rng);
            let n_test = ((group.len() as f64 * test_fraction).round() as usize).clamp(1, group.len() - 1);
            test.extend_from_slice(&group[..n_test]);
            train.extend_from_slice(&group[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// A copy with `offset` added to every signal of `state`.
    pub fn shift_state(&self, state: usize, offset: &[f64]) -> Result<SignalDataset> {
        if offset.len() != self.dim {
            return Err(Error::invalid("offset width does not match signal dimension"));
        }
        let mut out = self.clone();
        for (i, &l) in self.labels.iter().enumerate() {
            if l == state {
                for (v, o) in out.signals[i * self.dim..(i + 1) * self.dim].iter_mut().zip(offset) {
                    *v += o;
                }
            }
        }
        Ok(out)
    }

    /// `label,x0,...,x{d-1}` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for k in 0..self.dim {
            let _ = write!(out, ",x{k}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.signal(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`SignalDataset::to_csv`]. The state count
    /// is `max label + 1` unless given.
    pub fn from_csv(text: &str, state_count: Option<usize>) -> Result<Self> {
        let mut labels = Vec::new();
        let mut signals = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("label") {
                continue;
            }
            let mut fields = line.split(',');
            let label: usize = fields
                .next()
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad label", lineno + 1)))?;
            let values = parse_floats(fields, lineno)?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Format(format!(
                        "line {}: {} values, expected {d}",
                        lineno + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            labels.push(label);
            signals.extend(values);
        }
        let dim = dim.ok_or_else(|| Error::Format("dataset csv has no rows".into()))?;
        let states = state_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        SignalDataset::new(signals, dim, labels, states, Provenance::Csv)
    }
}

fn parse_floats<'a>(fields: impl Iterator<Item = &'a str>, lineno: usize) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad number {f:?}", lineno + 1)))
        })
        .collect()
}

/// Unlabelled signal rows, one per line, comma separated. Lines that do not
/// start with a number (headers) are skipped.
pub fn parse_signal_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || !line.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '.' || c == '+') {
            continue;
        }
        rows.push(parse_floats(line.split(','), lineno)?);
    }
    Ok(rows)
}

/// Maps raw labels (e.g. digits) to state ids; raw labels without an entry are
/// dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<u8, usize>", into = "BTreeMap<u8, usize>")]
pub struct StateAssignment {
    mapping: BTreeMap<u8, usize>,
    state_count: usize,
}

impl TryFrom<BTreeMap<u8, usize>> for StateAssignment {
    type Error = Error;

    fn try_from(mapping: BTreeMap<u8, usize>) -> Result<Self> {
        StateAssignment::new(mapping)
    }
}

impl From<StateAssignment> for BTreeMap<u8, usize> {
    fn from(a: StateAssignment) -> Self {
        a.mapping
    }
}

impl StateAssignment {
    /// Mapped state ids must cover `[0, s)` without gaps.
    pub fn new(mapping: BTreeMap<u8, usize>) -> Result<Self> {
        let state_count = mapping.values().max().map_or(0, |m| m + 1);
        let mut used = vec![false; state_count];
        for &s in mapping.values() {
            used[s] = true;
        }
        if state_count == 0 || used.contains(&false) {
            return Err(Error::invalid(
                "state assignment must map onto a contiguous range of state ids starting at 0",
            ));
        }
        Ok(StateAssignment { mapping, state_count })
    }

    /// Raw label `k` of `raw_labels` becomes state `k` (e.g. digits 0..s).
    pub fn ascending(raw_labels: &[u8]) -> Result<Self> {
        StateAssignment::new(raw_labels.iter().enumerate().map(|(s, &r)| (r, s)).collect())
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn state_of(&self, raw: u8) -> Option<usize> {
        self.mapping.get(&raw).copied()
    }
}

/// Keeps the samples whose raw label is mapped, relabelled to state ids.
pub fn assign_states(
    signals: &[f64],
    dim: usize,
    raw_labels: &[u8],
    assignment: &StateAssignment,
    provenance: Provenance,
) -> Result<SignalDataset> {
    if signals.len() != dim * raw_labels.len() {
        return Err(Error::Consistency(format!(
            "{} labels for {} signal values of dimension {dim}",
            raw_labels.len(),
            signals.len()
        )));
    }
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    for (i, &raw) in raw_labels.iter().enumerate() {
        if let Some(state) = assignment.state_of(raw) {
            kept.extend_from_slice(&signals[i * dim..(i + 1) * dim]);
            labels.push(state);
        }
    }
    SignalDataset::new(kept, dim, labels, assignment.state_count(), provenance)
}

/// Loads an IDX image/label pair and applies the assignment.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    assignment: &StateAssignment,
) -> Result<SignalDataset> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    let (signals, dim) = pair_idx(&images, &labels)?;
    assign_states(&signals, dim, &labels.labels, assignment, Provenance::Idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub states: usize,
    pub per_state: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticParams {
    /// 4 states, d = 20, 500 per state, separation 6, seed 1.
    pub fn reference(states: usize) -> Self {
        SyntheticParams {
            states,
            per_state: 500,
            dim: 20,
            separation: 6.0,
            seed: 1,
        }
    }

    pub fn generate(&self) -> Result<SignalDataset> {
        synth_gaussian_dataset(self.states, self.per_state, self.dim, self.separation, self.seed)
    }
}

/// Center of state `i`: `separation · e_i`.
pub fn synthetic_center(state: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    c[state % dim] = separation;
    c
}

/// Isotropic unit-variance Gaussian clusters, state `i` centered at
/// `separation · e_i`, so distinct centers are `separation · √2` apart.
/// Samples are stored state by state.
pub fn synth_gaussian_dataset(
    states: usize,
    per_state: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<SignalDataset> {
    if states < 2 {
        return Err(Error::invalid(format!("need at least 2 states, got {states}")));
    }
    if dim < states {
        return Err(Error::invalid(format!(
            "{states} distinct centers need d >= {states}, got d = {dim}"
        )));
    }
    if per_state == 0 || !separation.is_finite() {
        return Err(Error::invalid("need per_state >= 1 and a finite separation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signals = Vec::with_capacity(states * per_state * dim);
    let mut labels = Vec::with_capacity(states * per_state);
    for s in 0..states {
        let center = synthetic_center(s, dim, separation);
        for _ in 0..per_state {
            signals.extend(center.iter().map(|c| { let z: f64 = StandardNormal.sample(&mut rng); c + z }));
            labels.push(s);
        }
    }
    SignalDataset::new(signals, dim, labels, states, Provenance::Synthetic)
}
