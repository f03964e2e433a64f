//! Triplet sampling, the margin loss and the optimization loop.
//!
//! For a mini-batch of `b` triplets the loss is
//!
//! ```text
//! L  = λp·Lp + λn·Ln
//! Lp = (1/b) Σ_j ‖f(a_j) − f(p_j)‖²
//! Ln = (1/b) Σ_j (‖f(a_j) − f(n_j)‖ − m[s(a_j)][s(n_j)])²
//! ```
//!
//! `Lp` collapses every state onto a point and `Ln` pins each pair of states at
//! exactly its margin, in both directions: unlike the usual hinge-style triplet
//! loss, states that drift too far apart are pulled back in. The three triplet
//! roles share one network (the Siamese arrangement), so the batch is evaluated
//! as a single `3b × d` matrix with anchors, positives and negatives stacked.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SignalDataset;
use crate::error::{Error, Result};
use crate::inference::{state_statistics, TrainedManifold};
use crate::manifold::{ManifoldSpec, MarginMatrix};
use crate::network::{EmbeddingNetwork, Mode};

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub anchor_state: usize,
    pub negative_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    triplets: Vec<Triplet>,
}

impl MiniBatch {
    pub fn new(triplets: Vec<Triplet>) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::invalid("a mini-batch needs at least one triplet"));
        }
        let d = triplets[0].anchor.len();
        for t in &triplets {
            if t.anchor_state == t.negative_state {
                return Err(Error::invalid("negative must come from a different state than the anchor"));
            }
            if t.anchor.len() != d || t.positive.len() != d || t.negative.len() != d {
                return Err(Error::invalid("triplet signals differ in width"));
            }
        }
        Ok(MiniBatch { triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Anchors, then positives, then negatives: a `3b × d` matrix.
    pub fn stacked_signals(&self) -> DMatrix<f64> {
        let d = self.triplets[0].anchor.len();
        let rows = self
            .triplets
            .iter()
            .map(|t| &t.anchor)
            .chain(self.triplets.iter().map(|t| &t.positive))
            .chain(self.triplets.iter().map(|t| &t.negative));
        DMatrix::from_row_iterator(3 * self.len(), d, rows.flat_map(|r| r.iter().copied()))
    }

    /// `(anchor_state, negative_state)` per triplet.
    pub fn state_pairs(&self) -> Vec<(usize, usize)> {
        self.triplets.iter().map(|t| (t.anchor_state, t.negative_state)).collect()
    }
}

/// Uniform triplet sampler over a dataset.
#[derive(Debug, Clone)]
pub struct TripletSampler<'a> {
    dataset: &'a SignalDataset,
    groups: Vec<Vec<usize>>,
}

impl<'a> TripletSampler<'a> {
    /// Every state needs at least two samples and there must be two states.
    pub fn new(dataset: &'a SignalDataset) -> Result<Self> {
        let groups = dataset.indices_by_state();
        if groups.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "triplets need at least 2 states, dataset has {}",
                groups.len()
            )));
        }
        if let Some(s) = groups.iter().position(|g| g.len() < 2) {
            return Err(Error::InsufficientData(format!(
                "state {s} has {} sample(s); triplets need at least 2 per state",
                groups[s].len()
            )));
        }
        Ok(TripletSampler { dataset, groups })
    }

    /// Anchor state uniform, positive drawn without replacement from the
    /// anchor's state, negative state uniform over the other states.
    pub fn sample<R: Rng>(&self, b: usize, rng: &mut R) -> MiniBatch {
        let triplets = (0..b)
            .map(|_| {
                let state = rng.gen_range(0..self.groups.len());
                draw_triplet(self.dataset, &self.groups, state, rng)
            })
            .collect();
        MiniBatch { triplets }
    }
}

fn draw_triplet<R: Rng>(dataset: &SignalDataset, groups: &[Vec<usize>], state: usize, rng: &mut R) -> Triplet {
    let members = &groups[state];
    let a = rng.gen_range(0..members.len());
    let mut p = rng.gen_range(0..members.len() - 1);
    if p >= a {
        p += 1;
    }
    let mut neg_state = rng.gen_range(0..groups.len() - 1);
    if neg_state >= state {
        neg_state += 1;
    }
    let negatives = &groups[neg_state];
    let n = negatives[rng.gen_range(0..negatives.len())];
    Triplet {
        anchor: dataset.signal(members[a]).to_vec(),
        positive: dataset.signal(members[p]).to_vec(),
        negative: dataset.signal(n).to_vec(),
        anchor_state: state,
        negative_state: neg_state,
    }
}

/// One triplet with a fixed anchor state. Only that state needs two samples;
/// the negative may come from any other non-empty state.
pub fn sample_triplet_for_state(dataset: &SignalDataset, state: usize, seed: u64) -> Result<Triplet> {
    let groups = dataset.indices_by_state();
    if state >= groups.len() {
        return Err(Error::invalid(format!("state {state} out of range")));
    }
    if groups.len() < 2 {
        return Err(Error::InsufficientData("no other state to draw a negative from".into()));
    }
    if groups[state].len() < 2 {
        return Err(Error::InsufficientData(format!(
            "state {state} needs 2 samples for an anchor-positive pair"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_triplet(dataset, &groups, state, &mut rng))
}

pub fn sample_triplets(dataset: &SignalDataset, b: usize, seed: u64) -> Result<MiniBatch> {
    let sampler = TripletSampler::new(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(b, &mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lambda_p: f64,
    pub lambda_n: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub distance_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lambda_p: 1.0,
            lambda_n: 1.0,
            epochs: 10,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            distance_epsilon: 1e-12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lambda_p > 0.0 && self.lambda_n > 0.0) {
            return Err(Error::invalid("lambda_p and lambda_n must both be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.distance_epsilon >= 0.0) {
            return Err(Error::invalid("distance epsilon must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub positive: f64,
    pub negative: f64,
}

fn row_distance(emb: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (emb.row(i) - emb.row(j)).norm()
}

fn batch_size_of(emb: &DMatrix<f64>) -> usize {
    assert!(emb.nrows() % 3 == 0 && emb.nrows() > 0, "stacked triplet embeddings have 3b rows");
    emb.nrows() / 3
}

/// Mean squared anchor-positive distance over stacked `3b × p` embeddings.
pub fn positive_loss(emb: &DMatrix<f64>) -> f64 {
    let b = batch_size_of(emb);
    (0..b).map(|j| row_distance(emb, j, b + j).powi(2)).sum::<f64>() / b as f64
}

/// Mean squared deviation of anchor-negative distances from their margins.
pub fn negative_loss(emb: &DMatrix<f64>, margins: &MarginMatrix, states: &[(usize, usize)]) -> Result<f64> {
    let b = batch_size_of(emb);
    check_states(margins, states, b)?;
    Ok((0..b)
        .map(|j| {
            let (sa, sn) = states[j];
            (row_distance(emb, j, 2 * b + j) - margins.get(sa, sn)).powi(2)
        })
        .sum::<f64>()
        / b as f64)
}

fn check_states(margins: &MarginMatrix, states: &[(usize, usize)], b: usize) -> Result<()> {
    if states.len() != b {
        return Err(Error::invalid(format!("{} state pairs for {b} triplets", states.len())));
    }
    if let Some(&(a, n)) = states.iter().find(|(a, n)| *a >= margins.size() || *n >= margins.size()) {
        return Err(Error::invalid(format!(
            "state pair ({a}, {n}) outside the {}-state margin matrix",
            margins.size()
        )));
    }
    Ok(())
}

pub fn weighted_loss(positive: f64, negative: f64, config: &TrainConfig) -> f64 {
    config.lambda_p * positive + config.lambda_n * negative
}

/// Loss and its gradient with respect to the stacked embeddings.
pub fn embedding_loss(
    emb: &DMatrix<f64>,
    margins: &MarginMatrix,
    states: &[(usize, usize)],
    config: &TrainConfig,
) -> Result<(LossBreakdown, DMatrix<f64>)> {
    let b = batch_size_of(emb);
    check_states(margins, states, b)?;
    let scale = 2.0 / b as f64;
    let mut grad = DMatrix::zeros(emb.nrows(), emb.ncols());
    let (mut lp, mut ln) = (0.0, 0.0);
    for j in 0..b {
        let ap = emb.row(j) - emb.row(b + j);
        lp += ap.norm_squared();
        let g = &ap * (config.lambda_p * scale);
        let mut row = grad.row_mut(j);
        row += &g;
        let mut row = grad.row_mut(b + j);
        row -= &g;

        let an = emb.row(j) - emb.row(2 * b + j);
        let dist = an.norm();
        let (sa, sn) = states[j];
        let gap = dist - margins.get(sa, sn);
        ln += gap * gap;
        // below the epsilon the direction is undefined; zero is a valid subgradient
        if dist >= config.distance_epsilon && dist > 0.0 {
            let g = &an * (config.lambda_n * scale * gap / dist);
            let mut row = grad.row_mut(j);
            row += &g;
            let mut row = grad.row_mut(2 * b + j);
            row -= &g;
        }
    }
    let positive = lp / b as f64;
    let negative = ln / b as f64;
    Ok((
        LossBreakdown {
            total: weighted_loss(positive, negative, config),
            positive,
            negative,
        },
        grad,
    ))
}

/// Eval-mode loss of the network on a batch.
pub fn total_loss(
    batch: &MiniBatch,
    net: &EmbeddingNetwork,
    margins: &MarginMatrix,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let emb = net.embed(&batch.stacked_signals())?;
    Ok(embedding_loss(&emb, margins, &batch.state_pairs(), config)?.0)
}

/// Eval-mode loss and parameter gradient on a batch.
pub fn loss_gradient(
    batch: &MiniBatch,
    net: &EmbeddingNetwork,
    margins: &MarginMatrix,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    loss_gradient_in_mode(batch, net, margins, config, Mode::Eval, 0)
}

pub fn loss_gradient_in_mode(
    batch: &MiniBatch,
    net: &EmbeddingNetwork,
    margins: &MarginMatrix,
    config: &TrainConfig,
    mode: Mode,
    step_seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (emb, trace) = net.forward(&batch.stacked_signals(), mode, step_seed)?;
    let (loss, emb_grad) = embedding_loss(&emb, margins, &batch.state_pairs(), config)?;
    Ok((loss, net.backward(&trace, &emb_grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        OptimizerState {
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], config: &TrainConfig) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grad.len(), self.first.len());
        self.step += 1;
        let lr = config.learning_rate;
        match config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                let (b1, b2) = (config.beta1, config.beta2);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for k in 0..params.len() {
                    self.first[k] = b1 * self.first[k] + (1.0 - b1) * grad[k];
                    self.second[k] = b2 * self.second[k] + (1.0 - b2) * grad[k] * grad[k];
                    let m_hat = self.first[k] / c1;
                    let v_hat = self.second[k] / c2;
                    params[k] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far, counting earlier runs of a continued model.
    pub step: u64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "epoch,k,total_loss,Lp,Ln";

    /// `epoch,k,total_loss,Lp,Ln`, where `k` is the cumulative step count.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.step, r.loss.total, r.loss.positive, r.loss.negative
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedManifold,
    pub log: TrainingLog,
}

/// Trains `net` on `dataset` so that its embeddings follow `spec`'s margins.
pub fn train(
    dataset: &SignalDataset,
    spec: &ManifoldSpec,
    config: &TrainConfig,
    net: EmbeddingNetwork,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.state_count() != spec.state_count() {
        return Err(Error::InsufficientData(format!(
            "dataset covers {} states, manifold {} has {}",
            dataset.state_count(),
            spec.name,
            spec.state_count()
        )));
    }
    check_shapes(dataset, spec, &net)?;
    let sampler = TripletSampler::new(dataset)?;
    let (net, log, steps) = optimize(&sampler, dataset.len(), spec, config, net, 0)?;
    let (state_means, covariances) = state_statistics(&net, dataset, spec.state_count())?;
    let model = TrainedManifold::new(spec.clone(), net, state_means, Some(covariances))?.with_steps(steps);
    Ok(TrainOutcome { model, log })
}

/// Resumes training of an existing model on new signals with a fresh optimizer.
/// Means of the states present in `new_dataset` are recomputed; the others are
/// kept.
pub fn continue_train(model: &TrainedManifold, new_dataset: &SignalDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = &model.spec;
    if new_dataset.state_count() > spec.state_count() {
        return Err(Error::invalid(format!(
            "dataset has labels up to {}, manifold {} only has {} states",
            new_dataset.state_count() - 1,
            spec.name,
            spec.state_count()
        )));
    }
    check_shapes(new_dataset, spec, &model.network)?;
    let sampler = TripletSampler::new(new_dataset)?;
    let (net, log, steps) = optimize(
        &sampler,
        new_dataset.len(),
        spec,
        config,
        model.network.clone(),
        model.steps_trained,
    )?;
    let (fresh_means, fresh_covs) = state_statistics(&net, new_dataset, new_dataset.state_count())?;
    let mut means = model.state_means.clone();
    let mut covs = model.covariances.clone();
    for (s, mean) in fresh_means.into_iter().enumerate() {
        means[s] = mean;
    }
    if let Some(covs) = covs.as_mut() {
        for (s, cov) in fresh_covs.into_iter().enumerate() {
            covs[s] = cov;
        }
    }
    let model = TrainedManifold::new(spec.clone(), net, means, covs)?.with_steps(steps);
    Ok(TrainOutcome { model, log })
}

fn check_shapes(dataset: &SignalDataset, spec: &ManifoldSpec, net: &EmbeddingNetwork) -> Result<()> {
    if dataset.dim() != spec.input_dim || net.input_dim() != spec.input_dim {
        return Err(Error::invalid(format!(
            "input dimension mismatch: dataset {}, manifold {}, network {}",
            dataset.dim(),
            spec.input_dim,
            net.input_dim()
        )));
    }
    if net.output_dim() != spec.embedding_dim {
        return Err(Error::invalid(format!(
            "network output dimension {} does not match manifold p = {}",
            net.output_dim(),
            spec.embedding_dim
        )));
    }
    Ok(())
}

/// One epoch is `n / b` freshly sampled batches. The sampling stream and the
/// dropout step seeds continue from `start_step` so a continued model never
/// replays its earlier randomness.
fn optimize(
    sampler: &TripletSampler<'_>,
    n_samples: usize,
    spec: &ManifoldSpec,
    config: &TrainConfig,
    mut net: EmbeddingNetwork,
    start_step: u64,
) -> Result<(EmbeddingNetwork, TrainingLog, u64)> {
    let steps_per_epoch = (n_samples / config.batch_size).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(start_step);
    let mut opt = OptimizerState::new(net.params().len());
    let mut log = TrainingLog::default();
    let mut step = start_step;
    for epoch in 1..=config.epochs {
        let mut sum = LossBreakdown::default();
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample(config.batch_size, &mut rng);
            let (loss, grad) = loss_gradient_in_mode(&batch, &net, &spec.margins, config, Mode::Train, step)
                .map_err(|e| match e {
                    // shapes were checked up front, so this is an overflowed activation
                    Error::InvalidArgument(_) => Error::Diverged { step: step as usize },
                    other => other,
                })?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step: step as usize });
            }
            opt.apply(net.params_mut(), &grad, config);
            if net.params().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: step as usize });
            }
            sum.total += loss.total;
            sum.positive += loss.positive;
            sum.negative += loss.negative;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        log.epochs.push(EpochRecord {
            epoch,
            step,
            loss: LossBreakdown {
                total: sum.total / k,
                positive: sum.positive / k,
                negative: sum.negative / k,
            },
        });
    }
    Ok((net, log, step))
}

/// Eval-mode loss averaged over `batches` seeded mini-batches: a fixed probe
/// for comparing models on the same triplets.
pub fn probe_loss(
    model: &TrainedManifold,
    dataset: &SignalDataset,
    config: &TrainConfig,
    batches: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let sampler = TripletSampler::new(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = LossBreakdown::default();
    for _ in 0..batches {
        let batch = sampler.sample(config.batch_size, &mut rng);
        let l = total_loss(&batch, &model.network, &model.spec.margins, config)?;
        sum.total += l.total;
        sum.positive += l.positive;
        sum.negative += l.negative;
    }
    let k = batches.max(1) as f64;
    Ok(LossBreakdown {
        total: sum.total / k,
        positive: sum.positive / k,
        negative: sum.negative / k,
    })
}
