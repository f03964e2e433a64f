//! Nearest-centroid state inference and the mind pipeline.
//!
//! A signal's state is the one whose training centroid is closest to its
//! embedding (ties go to the lowest state id). Alongside the hard decision,
//! a softmin over the distances gives a per-state confidence.

use std::collections::HashSet;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::SignalDataset;
use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::network::EmbeddingNetwork;

pub const COVARIANCE_RIDGE: f64 = 1e-6;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// A trained network with the per-state embedding centroids used for
/// inference. Covariances, when present, already include the ridge term and
/// are stored row-major `p × p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrainedManifoldDoc")]
pub struct TrainedManifold {
    pub spec: ManifoldSpec,
    #[serde(flatten)]
    pub network: EmbeddingNetwork,
    pub state_means: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<f64>>>,
    pub steps_trained: u64,
}

#[derive(Deserialize)]
struct TrainedManifoldDoc {
    spec: ManifoldSpec,
    #[serde(flatten)]
    network: EmbeddingNetwork,
    state_means: Vec<Vec<f64>>,
    #[serde(default)]
    covariances: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    steps_trained: u64,
}

impl TryFrom<TrainedManifoldDoc> for TrainedManifold {
    type Error = Error;

    fn try_from(doc: TrainedManifoldDoc) -> Result<Self> {
        Ok(TrainedManifold::new(doc.spec, doc.network, doc.state_means, doc.covariances)?.with_steps(doc.steps_trained))
    }
}

impl TrainedManifold {
    pub fn new(
        spec: ManifoldSpec,
        network: EmbeddingNetwork,
        state_means: Vec<Vec<f64>>,
        covariances: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let (s, p) = (spec.state_count(), spec.embedding_dim);
        if network.input_dim() != spec.input_dim || network.output_dim() != p {
            return Err(Error::invalid(format!(
                "network maps {} -> {}, manifold {} needs {} -> {p}",
                network.input_dim(),
                network.output_dim(),
                spec.name,
                spec.input_dim
            )));
        }
        if state_means.len() != s || state_means.iter().any(|m| m.len() != p || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!(
                "manifold {} needs {s} finite state means of dimension {p}",
                spec.name
            )));
        }
        if let Some(covs) = &covariances {
            if covs.len() != s {
                return Err(Error::invalid(format!("expected {s} covariance matrices, got {}", covs.len())));
            }
            for (i, c) in covs.iter().enumerate() {
                if c.len() != p * p {
                    return Err(Error::invalid(format!("covariance {i} is not {p}x{p}")));
                }
                let m = DMatrix::from_row_slice(p, p, c);
                if (&m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) || m.cholesky().is_none() {
                    return Err(Error::invalid(format!(
                        "covariance {i} is not symmetric positive definite"
                    )));
                }
            }
        }
        Ok(TrainedManifold {
            spec,
            network,
            state_means,
            covariances,
            steps_trained: 0,
        })
    }

    pub(crate) fn with_steps(mut self, steps: u64) -> Self {
        self.steps_trained = steps;
        self
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

/// Per-state eval-mode embedding means and ridge-regularized sample
/// covariances (row-major), for states `0..state_count` of `dataset`.
pub fn state_statistics(
    net: &EmbeddingNetwork,
    dataset: &SignalDataset,
    state_count: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let emb = net.embed(&dataset.to_matrix())?;
    let p = emb.ncols();
    let groups = dataset.indices_by_state();
    let mut means = Vec::with_capacity(state_count);
    let mut covs = Vec::with_capacity(state_count);
    for group in groups.iter().take(state_count) {
        let n = group.len();
        if n == 0 {
            return Err(Error::InsufficientData("a state has no samples".into()));
        }
        let mut mean = DVector::zeros(p);
        for &i in group {
            mean += emb.row(i).transpose();
        }
        mean /= n as f64;
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for &i in group {
            let c = emb.row(i).transpose() - &mean;
            cov += &c * c.transpose();
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        for k in 0..p {
            cov[(k, k)] += COVARIANCE_RIDGE;
        }
        means.push(mean.iter().copied().collect());
        covs.push(cov.transpose().iter().copied().collect());
    }
    Ok((means, covs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub manifold: String,
    pub state_id: usize,
    pub state: String,
    pub distances: Vec<f64>,
    pub confidence: Vec<f64>,
}

/// `exp(-d_i / τ)` normalized; shifted by the minimum distance for stability.
pub fn softmin(distances: &[f64], temperature: f64) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = distances.iter().map(|d| (-(d - min) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// First index of the smallest distance.
pub fn argmin(distances: &[f64]) -> usize {
    let mut best = 0;
    for (i, d) in distances.iter().enumerate() {
        if *d < distances[best] {
            best = i;
        }
    }
    best
}

fn result_from_distances(model: &TrainedManifold, distances: Vec<f64>, temperature: f64) -> InferenceResult {
    let state_id = argmin(&distances);
    InferenceResult {
        manifold: model.spec.name.clone(),
        state_id,
        state: model.spec.states[state_id].name.clone(),
        confidence: softmin(&distances, temperature),
        distances,
    }
}

fn embed_checked(model: &TrainedManifold, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.spec.input_dim {
        return Err(Error::invalid(format!(
            "signal has {} values, manifold {} expects {}",
            x.len(),
            model.spec.name,
            model.spec.input_dim
        )));
    }
    model.network.embed_one(x)
}

pub fn euclidean_distances(point: &[f64], means: &[Vec<f64>]) -> Vec<f64> {
    means
        .iter()
        .map(|m| m.iter().zip(point).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect()
}

pub fn infer_state(model: &TrainedManifold, x: &[f64]) -> Result<InferenceResult> {
    infer_state_with_temperature(model, x, DEFAULT_TEMPERATURE)
}

pub fn infer_state_with_temperature(model: &TrainedManifold, x: &[f64], temperature: f64) -> Result<InferenceResult> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("softmin temperature must be positive"));
    }
    let point = embed_checked(model, x)?;
    Ok(result_from_distances(model, euclidean_distances(&point, &model.state_means), temperature))
}

/// `sqrt((e - s_i)ᵀ Σ_i⁻¹ (e - s_i))` against each state's stored covariance.
pub fn mahalanobis_distances(point: &[f64], means: &[Vec<f64>], covariances: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = point.len();
    means
        .iter()
        .zip(covariances)
        .map(|(mean, cov)| {
            let chol = DMatrix::from_row_slice(p, p, cov)
                .cholesky()
                .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
            let diff = DVector::from_iterator(p, point.iter().zip(mean).map(|(a, b)| a - b));
            let solved = chol.solve(&diff);
            Ok(diff.dot(&solved).max(0.0).sqrt())
        })
        .collect()
}

pub fn infer_state_mahalanobis(model: &TrainedManifold, x: &[f64]) -> Result<InferenceResult> {
    let covs = model.covariances.as_ref().ok_or_else(|| {
        Error::UnsupportedOperation(format!("manifold {} has no state covariances", model.spec.name))
    })?;
    let point = embed_checked(model, x)?;
    let distances = mahalanobis_distances(&point, &model.state_means, covs)?;
    Ok(result_from_distances(model, distances, DEFAULT_TEMPERATURE))
}

/// Eval-mode embeddings of every signal in the dataset, as rows.
pub fn embed_dataset(model: &TrainedManifold, dataset: &SignalDataset) -> Result<DMatrix<f64>> {
    if dataset.dim() != model.spec.input_dim {
        return Err(Error::invalid(format!(
            "dataset dimension {} does not match manifold input dimension {}",
            dataset.dim(),
            model.spec.input_dim
        )));
    }
    model.network.embed(&dataset.to_matrix())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MindMember {
    pub model: TrainedManifold,
    /// Slice of the signal this manifold reads; the whole signal when `None`.
    pub input: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mind {
    members: Vec<MindMember>,
}

impl Mind {
    pub fn new(members: Vec<MindMember>) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert(m.model.name().to_string()) {
                return Err(Error::invalid(format!("duplicate manifold name {:?} in mind", m.model.name())));
            }
            if let Some(r) = &m.input {
                if r.len() != m.model.spec.input_dim {
                    return Err(Error::invalid(format!(
                        "manifold {}: input slice {r:?} has width {}, expected {}",
                        m.model.name(),
                        r.len(),
                        m.model.spec.input_dim
                    )));
                }
            }
        }
        Ok(Mind { members })
    }

    /// Every manifold reads the whole signal.
    pub fn from_models(models: Vec<TrainedManifold>) -> Result<Self> {
        Mind::new(models.into_iter().map(|model| MindMember { model, input: None }).collect())
    }

    pub fn members(&self) -> &[MindMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Per-manifold results in mind order; serializes as a JSON object keyed by
/// manifold name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MindReaction {
    pub entries: Vec<(String, InferenceResult)>,
}

impl MindReaction {
    pub fn get(&self, manifold: &str) -> Option<&InferenceResult> {
        self.entries.iter().find(|(n, _)| n == manifold).map(|(_, r)| r)
    }
}

impl Serialize for MindReaction {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (name, result) in &self.entries {
            map.serialize_entry(name, result)?;
        }
        map.end()
    }
}

/// Routes one signal to every manifold of the mind.
pub fn mind_react(mind: &Mind, x: &[f64]) -> Result<MindReaction> {
    let mut entries = Vec::with_capacity(mind.len());
    for member in &mind.members {
        let name = member.model.name();
        let input = match &member.input {
            Some(r) if r.end <= x.len() => &x[r.clone()],
            Some(r) => {
                return Err(Error::invalid(format!(
                    "manifold {name}: input slice {r:?} exceeds signal length {}",
                    x.len()
                )))
            }
            None => x,
        };
        let result = infer_state(&member.model, input)
            .map_err(|e| Error::invalid(format!("manifold {name}: {e}")))?;
        entries.push((name.to_string(), result));
    }
    Ok(MindReaction { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{canonical_margins, Canonical};
    use crate::network::LayerSpec;

    /// Identity network on R^p so embeddings equal inputs.
    fn identity_model(spec: ManifoldSpec, means: Vec<Vec<f64>>, covs: Option<Vec<Vec<f64>>>) -> TrainedManifold {
        let p = spec.embedding_dim;
        let mut params = vec![0.0; p * p + p];
        for k in 0..p {
            params[k * p + k] = 1.0;
        }
        let net = EmbeddingNetwork::from_parts(vec![LayerSpec::Dense { in_width: p, out_width: p }], 0, params).unwrap();
        TrainedManifold::new(spec, net, means, covs).unwrap()
    }

    fn two_state_spec() -> ManifoldSpec {
        let m = crate::manifold::linear_chain_margins(2, 6.0).unwrap();
        ManifoldSpec::new("toy", &["a", "b"], m, 2, 2).unwrap()
    }

    fn love_model() -> TrainedManifold {
        let spec = ManifoldSpec::canonical(Canonical::LoveLinear, 2, 2).unwrap();
        identity_model(spec, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]], None)
    }

    #[test]
    fn zero_distance_winner() {
        let r = infer_state(&love_model(), &[2.0, 0.0]).unwrap();
        assert_eq!(r.state_id, 2);
        assert_eq!(r.state, "like");
        assert_eq!(r.distances[2], 0.0);
        assert!((r.confidence.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmin(&r.distances), 2);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let r = infer_state(&love_model(), &[1.5, 0.0]).unwrap();
        assert_eq!(r.distances[1], r.distances[2]);
        assert_eq!(r.state_id, 1);
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(matches!(infer_state(&love_model(), &[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mahalanobis_needs_covariances() {
        assert!(matches!(
            infer_state_mahalanobis(&love_model(), &[0.0, 0.0]),
            Err(Error::UnsupportedOperation(_))
        ));
    }

    #[test]
    fn anisotropic_case_flips_decision() {
        let covs = vec![vec![100.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]];
        let model = identity_model(two_state_spec(), vec![vec![0.0, 0.0], vec![6.0, 0.0]], Some(covs));
        let x = [5.0, 0.0];
        let euclid = infer_state(&model, &x).unwrap();
        let maha = infer_state_mahalanobis(&model, &x).unwrap();
        assert_eq!(euclid.state, "b");
        assert_eq!(maha.state, "a");
        assert!((maha.distances[0] - 0.5).abs() < 1e-12);
        assert!((maha.distances[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_zero_vector() {
        let covs = vec![vec![3.0, 1.0, 1.0, 2.0], vec![0.5, 0.0, 0.0, 9.0]];
        let model = identity_model(two_state_spec(), vec![vec![1.0, 2.0], vec![-1.0, 0.5]], Some(covs));
        let r = infer_state_mahalanobis(&model, &[-1.0, 0.5]).unwrap();
        assert_eq!(r.distances[1], 0.0);
        assert_eq!(r.state_id, 1);
    }

    #[test]
    fn covariances_must_be_positive_definite() {
        let spec = two_state_spec();
        let bad = vec![vec![1.0, 0.0, 0.0, -1.0], vec![1.0, 0.0, 0.0, 1.0]];
        let net = identity_model(spec.clone(), vec![vec![0.0; 2]; 2], None).network;
        assert!(TrainedManifold::new(spec, net, vec![vec![0.0; 2]; 2], Some(bad)).is_err());
    }

    #[test]
    fn softmin_is_monotone() {
        let c = softmin(&[0.5, 2.0, 1.0, 3.5], 1.0);
        assert!(c[0] > c[2] && c[2] > c[1] && c[1] > c[3]);
        assert!(c.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mind_reactions() {
        let love = love_model();
        let single = Mind::from_models(vec![love.clone()]).unwrap();
        let r = mind_react(&single, &[0.2, 0.1]).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.get("love").unwrap(), &infer_state(&love, &[0.2, 0.1]).unwrap());

        assert!(mind_react(&Mind::default(), &[1.0]).unwrap().entries.is_empty());

        let joy_spec = ManifoldSpec::new("joy", &Canonical::Joy.state_names()[..2], crate::manifold::linear_chain_margins(2, 1.0).unwrap(), 2, 2).unwrap();
        let joy = identity_model(joy_spec, vec![vec![0.0, 0.0], vec![0.0, 1.0]], None);
        let mind = Mind::new(vec![
            MindMember { model: love.clone(), input: Some(0..2) },
            MindMember { model: joy, input: Some(2..4) },
        ])
        .unwrap();
        let r = mind_react(&mind, &[3.0, 0.0, 0.0, 0.9]).unwrap();
        assert_eq!(r.entries[0].0, "love");
        assert_eq!(r.get("love").unwrap().state, "love");
        assert_eq!(r.get("joy").unwrap().state, "feared");
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with("{\"love\":{\"manifold\":\"love\""));
        let err = mind_react(&mind, &[3.0, 0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("joy"));

        assert!(Mind::from_models(vec![love.clone(), love]).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let spec = ManifoldSpec::canonical(Canonical::LoveNonlinear, 2, 2).unwrap();
        let covs = Some(vec![vec![1.0, 0.0, 0.0, 1.0]; 4]);
        let model = identity_model(spec, vec![vec![0.1, 0.2]; 4], covs);
        let json = serde_json::to_value(&model).unwrap();
        assert!(json["params"].is_array());
        assert!(json["state_means"].is_array());
        assert_eq!(json["spec"]["margins"][0][3], canonical_margins(Canonical::LoveNonlinear).get(0, 3));
        let back: TrainedManifold = serde_json::from_value(json).unwrap();
        assert_eq!(back, model);
    }
}
