//! States, margin matrices and manifold/mind specifications.
//!
//! A manifold's geometry is fixed up front by its [`MarginMatrix`]: the desired
//! distance between every pair of states in the embedding space. Margins are
//! dimensionless. Only their relative size matters to the learned geometry; the
//! absolute scale changes how fast training converges, nothing else.
//!
//! Choosing the embedding dimensionality `p` is left to the caller. A larger `p`
//! gives the network more room, `p = 2` is convenient for plotting, and
//! [`embeddability_check`] tells whether the margins can be realized exactly
//! as Euclidean distances in `p` dimensions at all.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffectiveState {
    pub id: usize,
    pub name: String,
}

/// Symmetric matrix of desired inter-state distances with a zero diagonal and
/// strictly positive off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl MarginMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if size < 2 {
            return Err(Error::invalid(format!(
                "margin matrix needs at least 2 states, got {size}"
            )));
        }
        let mut entries = Vec::with_capacity(size * size);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(Error::invalid(format!(
                    "margin matrix row {i} has {} entries, expected {size}",
                    row.len()
                )));
            }
            entries.extend_from_slice(row);
        }
        let m = MarginMatrix { size, entries };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let s = self.size;
        for i in 0..s {
            if self.get(i, i) != 0.0 {
                return Err(Error::invalid(format!(
                    "margin matrix diagonal entry ({i},{i}) is {}, expected 0",
                    self.get(i, i)
                )));
            }
            for j in (i + 1)..s {
                let (a, b) = (self.get(i, j), self.get(j, i));
                if a != b {
                    return Err(Error::invalid(format!(
                        "margin matrix is not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::invalid(format!(
                        "margin between states {i} and {j} must be finite and positive, got {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.size).map(<[f64]>::to_vec).collect()
    }

    /// Smallest off-diagonal margin.
    pub fn min_margin(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.size {
            for j in (i + 1)..self.size {
                min = min.min(self.get(i, j));
            }
        }
        min
    }

    pub fn max_abs_diff(&self, other: &MarginMatrix) -> Option<f64> {
        if self.size != other.size {
            return None;
        }
        Some(
            self.entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

impl fmt::Display for MarginMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.entries.chunks(self.size) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

impl Serialize for MarginMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MarginMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        MarginMatrix::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// 2-D design coordinates of the states; pairwise distances become margins.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    coords: Vec<[f64; 2]>,
}

impl StateLayout {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::invalid("a layout needs at least 2 points"));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("layout coordinates must be finite"));
        }
        for i in 0..coords.len() {
            for j in (i + 1)..coords.len() {
                if coords[i] == coords[j] {
                    return Err(Error::invalid(format!(
                        "layout points {i} and {j} coincide at {:?}",
                        coords[i]
                    )));
                }
            }
        }
        Ok(StateLayout { coords })
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Four states on a unit-spaced chain that bends by the same interior
    /// angle (in degrees) at the two middle states. 180° is a straight line.
    pub fn bent_chain(interior_angle_deg: f64) -> Result<Self> {
        let turn = (180.0 - interior_angle_deg).to_radians();
        let (sin, cos) = turn.sin_cos();
        StateLayout::new(vec![[-cos, sin], [0.0, 0.0], [1.0, 0.0], [1.0 + cos, sin]])
    }

    /// Recovers 2-D coordinates from a margin matrix by classical MDS.
    pub fn from_margins(margins: &MarginMatrix) -> Result<Self> {
        let points = classical_mds(margins, 2);
        StateLayout::new(points.into_iter().map(|p| [p[0], p[1]]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ManifoldSpecDoc", into = "ManifoldSpecDoc")]
pub struct ManifoldSpec {
    pub name: String,
    pub states: Vec<AffectiveState>,
    pub margins: MarginMatrix,
    pub embedding_dim: usize,
    pub input_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifoldSpecDoc {
    name: String,
    states: Vec<String>,
    margins: MarginMatrix,
    embedding_dim: usize,
    input_dim: usize,
}

impl TryFrom<ManifoldSpecDoc> for ManifoldSpec {
    type Error = Error;

    fn try_from(doc: ManifoldSpecDoc) -> Result<Self> {
        ManifoldSpec::new(doc.name, &doc.states, doc.margins, doc.embedding_dim, doc.input_dim)
    }
}

impl From<ManifoldSpec> for ManifoldSpecDoc {
    fn from(spec: ManifoldSpec) -> Self {
        ManifoldSpecDoc {
            name: spec.name,
            states: spec.states.into_iter().map(|s| s.name).collect(),
            margins: spec.margins,
            embedding_dim: spec.embedding_dim,
            input_dim: spec.input_dim,
        }
    }
}

impl ManifoldSpec {
    pub fn new<S: AsRef<str>>(
        name: impl Into<String>,
        state_names: &[S],
        margins: MarginMatrix,
        embedding_dim: usize,
        input_dim: usize,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("manifold name must not be empty"));
        }
        let mut seen = HashSet::new();
        for s in state_names {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::invalid(format!("manifold {name}: empty state name")));
            }
            if !seen.insert(s) {
                return Err(Error::invalid(format!(
                    "manifold {name}: duplicate state name {s:?}"
                )));
            }
        }
        if margins.size() != state_names.len() {
            return Err(Error::invalid(format!(
                "manifold {name}: {} states but a {}x{} margin matrix",
                state_names.len(),
                margins.size(),
                margins.size()
            )));
        }
        if embedding_dim == 0 || embedding_dim > input_dim {
            return Err(Error::invalid(format!(
                "manifold {name}: need 1 <= p <= d, got p = {embedding_dim}, d = {input_dim}"
            )));
        }
        let states = state_names
            .iter()
            .enumerate()
            .map(|(id, s)| AffectiveState {
                id,
                name: s.as_ref().to_string(),
            })
            .collect();
        Ok(ManifoldSpec {
            name,
            states,
            margins,
            embedding_dim,
            input_dim,
        })
    }

    /// One of the built-in manifolds with its conventional state names.
    pub fn canonical(which: Canonical, embedding_dim: usize, input_dim: usize) -> Result<Self> {
        ManifoldSpec::new(
            which.manifold_name(),
            which.state_names(),
            canonical_margins(which),
            embedding_dim,
            input_dim,
        )
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn state_names(&self) -> Vec<&str> {
        self.states.iter().map(|s| s.name.as_str()).collect()
    }
}

/// A set of manifolds. State names may repeat across manifolds (a state can be
/// shared between characteristic groups); manifold names may not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MindSpecDoc")]
pub struct MindSpec {
    pub manifolds: Vec<ManifoldSpec>,
}

#[derive(Deserialize)]
struct MindSpecDoc {
    manifolds: Vec<ManifoldSpec>,
}

impl TryFrom<MindSpecDoc> for MindSpec {
    type Error = Error;

    fn try_from(doc: MindSpecDoc) -> Result<Self> {
        MindSpec::new(doc.manifolds)
    }
}

impl MindSpec {
    pub fn new(manifolds: Vec<ManifoldSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &manifolds {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::invalid(format!("duplicate manifold name {:?}", m.name)));
            }
        }
        Ok(MindSpec { manifolds })
    }
}

/// `entries[i][j] = unit * |i - j|`: states evenly spaced on a line.
pub fn linear_chain_margins(states: usize, unit: f64) -> Result<MarginMatrix> {
    if states < 2 {
        return Err(Error::invalid(format!("need at least 2 states, got {states}")));
    }
    if !(unit > 0.0 && unit.is_finite()) {
        return Err(Error::invalid(format!("unit must be positive, got {unit}")));
    }
    let rows = (0..states)
        .map(|i| (0..states).map(|j| unit * i.abs_diff(j) as f64).collect())
        .collect();
    MarginMatrix::from_rows(rows)
}

pub fn layout_to_margins(layout: &StateLayout) -> Result<MarginMatrix> {
    let c = layout.coords();
    let rows = c
        .iter()
        .map(|a| c.iter().map(|b| (a[0] - b[0]).hypot(a[1] - b[1])).collect())
        .collect();
    MarginMatrix::from_rows(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum Canonical {
    LoveLinear,
    LoveNonlinear,
    Joy,
}

impl Canonical {
    pub const ALL: [Canonical; 3] = [Canonical::LoveLinear, Canonical::LoveNonlinear, Canonical::Joy];

    pub fn as_str(self) -> &'static str {
        match self {
            Canonical::LoveLinear => "love_linear",
            Canonical::LoveNonlinear => "love_nonlinear",
            Canonical::Joy => "joy",
        }
    }

    pub fn manifold_name(self) -> &'static str {
        match self {
            Canonical::LoveLinear | Canonical::LoveNonlinear => "love",
            Canonical::Joy => "joy",
        }
    }

    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            Canonical::LoveLinear | Canonical::LoveNonlinear => &["hate", "dislike", "like", "love"],
            Canonical::Joy => &["suffered", "feared", "worried", "enjoying", "relaxed", "bored"],
        }
    }
}

impl FromStr for Canonical {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Canonical::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown canonical manifold {s:?} (expected love_linear, love_nonlinear or joy)"
                ))
            })
    }
}

impl TryFrom<String> for Canonical {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Canonical> for &'static str {
    fn from(c: Canonical) -> Self {
        c.as_str()
    }
}

impl fmt::Display for Canonical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const LOVE_NONLINEAR: [[f64; 4]; 4] = [
    [0.0, 1.0, 1.848, 2.404],
    [1.0, 0.0, 1.0, 1.848],
    [1.848, 1.0, 0.0, 1.0],
    [2.404, 1.848, 1.0, 0.0],
];

const JOY: [[f64; 6]; 6] = [
    [0.0, 1.0, 1.414, 2.414, 3.318, 3.318],
    [1.0, 0.0, 1.0, 1.788, 2.573, 2.761],
    [1.414, 1.0, 0.0, 1.0, 1.932, 1.932],
    [2.414, 1.788, 1.0, 0.0, 1.0, 1.0],
    [3.318, 2.573, 1.932, 1.0, 0.0, 1.0],
    [3.318, 2.761, 1.932, 1.0, 1.0, 0.0],
];

/// The published margin matrices, stored exactly as printed.
pub fn canonical_margins(which: Canonical) -> MarginMatrix {
    let rows: Vec<Vec<f64>> = match which {
        Canonical::LoveLinear => (0..4)
            .map(|i: usize| (0..4).map(|j: usize| i.abs_diff(j) as f64).collect())
            .collect(),
        Canonical::LoveNonlinear => LOVE_NONLINEAR.iter().map(|r| r.to_vec()).collect(),
        Canonical::Joy => JOY.iter().map(|r| r.to_vec()).collect(),
    };
    MarginMatrix::from_rows(rows).expect("built-in margin matrices are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddabilityReport {
    pub embeddable: bool,
    /// Eigenvalues of the double-centered Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
}

fn centered_gram(margins: &MarginMatrix) -> DMatrix<f64> {
    let s = margins.size();
    let sq = DMatrix::from_fn(s, s, |i, j| margins.get(i, j).powi(2));
    let centering = DMatrix::identity(s, s) - DMatrix::from_element(s, s, 1.0 / s as f64);
    &centering * sq * &centering * -0.5
}

fn sorted_eigen(gram: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(gram);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &val)| (val, eig.eigenvectors.column(k).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Can the margins be realized as Euclidean distances in `p` dimensions?
///
/// Embeddable iff the centered Gram matrix has no eigenvalue below `-tol` and
/// at most `p` above `+tol`, with `tol = 1e-6 * largest eigenvalue`.
pub fn embeddability_check(margins: &MarginMatrix, p: usize) -> EmbeddabilityReport {
    let eigenvalues: Vec<f64> = sorted_eigen(centered_gram(margins))
        .into_iter()
        .map(|(v, _)| v)
        .collect();
    let tol = 1e-6 * eigenvalues[0].abs();
    let negative = eigenvalues.iter().any(|&v| v < -tol);
    let positive = eigenvalues.iter().filter(|&&v| v > tol).count();
    EmbeddabilityReport {
        embeddable: !negative && positive <= p,
        eigenvalues,
    }
}

/// Classical (Torgerson) MDS: coordinates in `p` dimensions from the top
/// eigenpairs of the centered Gram matrix. Negative eigenvalues are clamped.
pub fn classical_mds(margins: &MarginMatrix, p: usize) -> Vec<Vec<f64>> {
    let s = margins.size();
    let pairs = sorted_eigen(centered_gram(margins));
    (0..s)
        .map(|i| {
            (0..p)
                .map(|k| match pairs.get(k) {
                    Some((val, vec)) => val.max(0.0).sqrt() * vec[i],
                    None => 0.0,
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_valid(m: &MarginMatrix) {
        for i in 0..m.size() {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..m.size() {
                assert_eq!(m.get(i, j), m.get(j, i));
                if i != j {
                    assert!(m.get(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn linear_chain_examples() {
        let m = linear_chain_margins(4, 1.0).unwrap();
        assert_eq!(
            m.rows(),
            vec![
                vec![0.0, 1.0, 2.0, 3.0],
                vec![1.0, 0.0, 1.0, 2.0],
                vec![2.0, 1.0, 0.0, 1.0],
                vec![3.0, 2.0, 1.0, 0.0],
            ]
        );
        assert_eq!(linear_chain_margins(2, 1.0).unwrap().rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(
            linear_chain_margins(3, 2.0).unwrap().rows(),
            vec![vec![0.0, 2.0, 4.0], vec![2.0, 0.0, 2.0], vec![4.0, 2.0, 0.0]]
        );
    }

    #[test]
    fn linear_chain_rejects_bad_arguments() {
        assert!(matches!(linear_chain_margins(1, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(linear_chain_margins(3, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(linear_chain_margins(3, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn canonical_matrices_are_valid_and_verbatim() {
        for c in Canonical::ALL {
            assert_valid(&canonical_margins(c));
        }
        let love = canonical_margins(Canonical::LoveNonlinear);
        assert_eq!(love.get(0, 3), 2.404);
        assert_eq!(love.get(0, 2), 1.848);
        let joy = canonical_margins(Canonical::Joy);
        assert_eq!(joy.get(0, 4), 3.318);
        assert_eq!(joy.get(1, 3), 1.788);
        assert_eq!(joy.get(2, 4), 1.932);
        assert_eq!(
            canonical_margins(Canonical::LoveLinear),
            linear_chain_margins(4, 1.0).unwrap()
        );
        assert!("sadness".parse::<Canonical>().is_err());
        assert_eq!("joy".parse::<Canonical>().unwrap(), Canonical::Joy);
    }

    #[test]
    fn margin_matrix_rejects_invalid_entries() {
        assert!(MarginMatrix::from_rows(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(MarginMatrix::from_rows(vec![vec![1.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(MarginMatrix::from_rows(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(MarginMatrix::from_rows(vec![vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn collinear_layout_is_linear_chain() {
        let layout = StateLayout::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).unwrap();
        assert_eq!(layout_to_margins(&layout).unwrap(), linear_chain_margins(4, 1.0).unwrap());
    }

    #[test]
    fn bent_chain_against_printed_love_matrix() {
        let layout = StateLayout::bent_chain(135.0).unwrap();
        let m = layout_to_margins(&layout).unwrap();
        assert!((m.get(0, 3) - (1.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!((m.get(0, 2) - (2.0 + 2f64.sqrt()).sqrt()).abs() < 1e-12);
        let diff = m.max_abs_diff(&canonical_margins(Canonical::LoveNonlinear)).unwrap();
        assert!(diff < 0.011, "{diff}");
        // the printed 2.404 is not what a 135 degree bend gives
        assert!(diff > 0.009);
    }

    #[test]
    fn duplicate_layout_points_rejected() {
        assert!(StateLayout::new(vec![[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn embeddability_examples() {
        let chain = embeddability_check(&linear_chain_margins(4, 1.0).unwrap(), 1);
        assert!(chain.embeddable, "{:?}", chain.eigenvalues);
        let bad = MarginMatrix::from_rows(vec![
            vec![0.0, 1.0, 3.0],
            vec![1.0, 0.0, 1.0],
            vec![3.0, 1.0, 0.0],
        ])
        .unwrap();
        assert!(!embeddability_check(&bad, 2).embeddable);
        let square = layout_to_margins(
            &StateLayout::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        assert!(embeddability_check(&square, 2).embeddable);
        assert!(!embeddability_check(&square, 1).embeddable);
    }

    #[test]
    fn printed_matrices_are_only_approximately_planar() {
        // Rounded to three decimals, both printed nonlinear matrices pick up a
        // small negative Gram eigenvalue, far beyond the 1e-6 relative tolerance.
        for c in [Canonical::LoveNonlinear, Canonical::Joy] {
            let report = embeddability_check(&canonical_margins(c), 2);
            assert!(!report.embeddable, "{c}: {:?}", report.eigenvalues);
            let largest = report.eigenvalues[0];
            let smallest = *report.eigenvalues.last().unwrap();
            assert!(smallest < 0.0 && smallest.abs() < 0.01 * largest);
        }
    }

    #[test]
    fn spec_json_shape() {
        let spec = ManifoldSpec::canonical(Canonical::LoveLinear, 2, 20).unwrap();
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["states"][0], "hate");
        assert_eq!(json["margins"][0][3], 3.0);
        assert_eq!(json["embedding_dim"], 2);
        let back: ManifoldSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_validation() {
        let m = linear_chain_margins(2, 1.0).unwrap();
        assert!(ManifoldSpec::new("x", &["a", "a"], m.clone(), 1, 2).is_err());
        assert!(ManifoldSpec::new("x", &["a", ""], m.clone(), 1, 2).is_err());
        assert!(ManifoldSpec::new("x", &["a", "b", "c"], m.clone(), 1, 2).is_err());
        assert!(ManifoldSpec::new("x", &["a", "b"], m.clone(), 3, 2).is_err());
        assert!(ManifoldSpec::new("x", &["a", "b"], m.clone(), 0, 2).is_err());
        let spec = ManifoldSpec::new("x", &["a", "b"], m, 2, 2).unwrap();
        assert_eq!(spec.states[1], AffectiveState { id: 1, name: "b".into() });
    }

    #[test]
    fn mind_names_unique_but_states_may_repeat() {
        let a = ManifoldSpec::new("lips", &["frown", "laugh"], linear_chain_margins(2, 1.0).unwrap(), 1, 3).unwrap();
        let b = ManifoldSpec::new("fun", &["worried", "laugh"], linear_chain_margins(2, 1.0).unwrap(), 1, 3).unwrap();
        assert!(MindSpec::new(vec![a.clone(), b]).is_ok());
        assert!(MindSpec::new(vec![a.clone(), a]).is_err());
    }
}
