//! Feedforward embedding network `f(θ): R^d → R^p`.
//!
//! Layers are dense, per-channel PReLU, and inverted dropout. All parameters live
//! in one flat vector, layer-major: dense weights (row-major, `in × out`), then
//! dense biases, then PReLU slopes. A dense layer maps a row `x` to `Wᵀx + b`.
//!
//! Gradients are derived by hand in [`EmbeddingNetwork::backward`] and checked
//! against central finite differences by [`gradient_check`].

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRELU_INIT_SLOPE: f64 = 0.25;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_width: usize, out_width: usize },
    Prelu { channels: usize },
    Dropout { rate: f64 },
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_width, out_width } => in_width * out_width + out_width,
            LayerSpec::Prelu { channels } => channels,
            LayerSpec::Dropout { .. } => 0,
        }
    }
}

/// Dense layers of the given widths with PReLU (and dropout when `dropout > 0`)
/// after every hidden layer. `widths = [d, h1, ..., p]`.
pub fn mlp_layers(widths: &[usize], dropout: f64) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (k, pair) in widths.windows(2).enumerate() {
        layers.push(LayerSpec::Dense {
            in_width: pair[0],
            out_width: pair[1],
        });
        if k + 2 < widths.len() {
            layers.push(LayerSpec::Prelu { channels: pair[1] });
            if dropout > 0.0 {
                layers.push(LayerSpec::Dropout { rate: dropout });
            }
        }
    }
    layers
}

/// Returns `(input_dim, output_dim)` of a valid layer chain.
fn validate_layers(layers: &[LayerSpec]) -> Result<(usize, usize)> {
    let input_dim = match layers.first() {
        Some(LayerSpec::Dense { in_width, .. }) => *in_width,
        Some(_) => return Err(Error::invalid("the first layer must be dense")),
        None => return Err(Error::invalid("a network needs at least one layer")),
    };
    let mut width = input_dim;
    for (k, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { in_width, out_width } => {
                if in_width == 0 || out_width == 0 {
                    return Err(Error::invalid(format!("layer {k}: dense widths must be positive")));
                }
                if in_width != width {
                    return Err(Error::invalid(format!(
                        "layer {k}: dense input width {in_width} does not match previous width {width}"
                    )));
                }
                width = out_width;
            }
            LayerSpec::Prelu { channels } => {
                if channels != width {
                    return Err(Error::invalid(format!(
                        "layer {k}: prelu has {channels} slopes for width {width}"
                    )));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::invalid(format!(
                        "layer {k}: dropout rate {rate} outside [0, 1)"
                    )));
                }
            }
        }
    }
    Ok((input_dim, width))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDoc")]
pub struct EmbeddingNetwork {
    layers: Vec<LayerSpec>,
    seed: u64,
    params: Vec<f64>,
}

#[derive(Deserialize)]
struct NetworkDoc {
    layers: Vec<LayerSpec>,
    seed: u64,
    params: Vec<f64>,
}

impl TryFrom<NetworkDoc> for EmbeddingNetwork {
    type Error = Error;

    fn try_from(doc: NetworkDoc) -> Result<Self> {
        EmbeddingNetwork::from_parts(doc.layers, doc.seed, doc.params)
    }
}

/// Intermediate values of one forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[k]` is the value entering layer `k`.
    pub inputs: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
    /// Scaled keep-masks of the dropout layers that were active.
    pub masks: Vec<Option<DMatrix<f64>>>,
}

impl ForwardTrace {
    pub fn layer_count(&self) -> usize {
        self.inputs.len()
    }
}

impl EmbeddingNetwork {
    /// He-initialized weights, zero biases, PReLU slopes at 0.25.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.iter().map(LayerSpec::param_count).sum());
        for layer in &layers {
            match *layer {
                LayerSpec::Dense { in_width, out_width } => {
                    let normal = Normal::new(0.0, (2.0 / in_width as f64).sqrt())
                        .expect("positive standard deviation");
                    params.extend((0..in_width * out_width).map(|_| normal.sample(&mut rng)));
                    params.extend(std::iter::repeat_n(0.0, out_width));
                }
                LayerSpec::Prelu { channels } => {
                    params.extend(std::iter::repeat_n(PRELU_INIT_SLOPE, channels));
                }
                LayerSpec::Dropout { .. } => {}
            }
        }
        Ok(EmbeddingNetwork { layers, seed, params })
    }

    pub fn from_parts(layers: Vec<LayerSpec>, seed: u64, params: Vec<f64>) -> Result<Self> {
        validate_layers(&layers)?;
        let expected: usize = layers.iter().map(LayerSpec::param_count).sum();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "network expects {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("network parameters must be finite"));
        }
        Ok(EmbeddingNetwork { layers, seed, params })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        match self.layers[0] {
            LayerSpec::Dense { in_width, .. } => in_width,
            _ => unreachable!("validated: first layer is dense"),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                LayerSpec::Dense { out_width, .. } => Some(out_width),
                _ => None,
            })
            .expect("validated: at least one dense layer")
    }

    /// Eval-mode forward pass without keeping a trace.
    pub fn embed(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.forward(batch, Mode::Eval, 0).map(|(out, _)| out)
    }

    pub fn embed_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.embed(&batch)?.row(0).iter().copied().collect())
    }

    /// Dropout masks in train mode come from a stream keyed by
    /// `(network seed, step_seed)`; eval mode is deterministic.
    pub fn forward(
        &self,
        batch: &DMatrix<f64>,
        mode: Mode,
        step_seed: u64,
    ) -> Result<(DMatrix<f64>, ForwardTrace)> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input width {} does not match network input dimension {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input contains non-finite values"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step_seed);

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        let mut offset = 0;
        for layer in &self.layers {
            let next = match *layer {
                LayerSpec::Dense { in_width, out_width } => {
                    let w = DMatrix::from_row_slice(in_width, out_width, &self.params[offset..offset + in_width * out_width]);
                    let bias = &self.params[offset + in_width * out_width..offset + layer.param_count()];
                    let mut out = &current * w;
                    for (j, b) in bias.iter().enumerate() {
                        out.column_mut(j).add_scalar_mut(*b);
                    }
                    masks.push(None);
                    out
                }
                LayerSpec::Prelu { channels } => {
                    let slopes = &self.params[offset..offset + channels];
                    let mut out = current.clone();
                    for (j, mut col) in out.column_iter_mut().enumerate() {
                        for v in col.iter_mut() {
                            if *v <= 0.0 {
                                *v *= slopes[j];
                            }
                        }
                    }
                    masks.push(None);
                    out
                }
                LayerSpec::Dropout { rate } => {
                    if mode == Mode::Train && rate > 0.0 {
                        let keep = 1.0 / (1.0 - rate);
                        // row-major draw order so masks do not depend on storage layout
                        let mask = DMatrix::from_row_iterator(
                            current.nrows(),
                            current.ncols(),
                            (0..current.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }),
                        );
                        let out = current.component_mul(&mask);
                        masks.push(Some(mask));
                        out
                    } else {
                        masks.push(None);
                        current.clone()
                    }
                }
            };
            offset += layer.param_count();
            inputs.push(std::mem::replace(&mut current, next));
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("network produced non-finite embeddings"));
        }
        let trace = ForwardTrace {
            inputs,
            output: current.clone(),
            masks,
        };
        Ok((current, trace))
    }

    /// Gradient of a scalar loss with respect to all parameters, given the
    /// loss gradient with respect to the network output.
    pub fn backward(&self, trace: &ForwardTrace, output_gradient: &DMatrix<f64>) -> Result<Vec<f64>> {
        if trace.layer_count() != self.layers.len() || trace.masks.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "trace has {} layers, network has {}",
                trace.layer_count(),
                self.layers.len()
            )));
        }
        if output_gradient.shape() != trace.output.shape() {
            return Err(Error::invalid(format!(
                "output gradient shape {:?} does not match output shape {:?}",
                output_gradient.shape(),
                trace.output.shape()
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut upstream = output_gradient.clone();
        let mut end = self.params.len();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let start = end - layer.param_count();
            let input = &trace.inputs[k];
            match *layer {
                LayerSpec::Dense { in_width, out_width } => {
                    if input.ncols() != in_width {
                        return Err(Error::invalid(format!("trace layer {k} width mismatch")));
                    }
                    let dw = input.transpose() * &upstream;
                    let g = &mut grad[start..end];
                    for i in 0..in_width {
                        for j in 0..out_width {
                            g[i * out_width + j] = dw[(i, j)];
                        }
                    }
                    for j in 0..out_width {
                        g[in_width * out_width + j] = upstream.column(j).sum();
                    }
                    let w = DMatrix::from_row_slice(in_width, out_width, &self.params[start..start + in_width * out_width]);
                    upstream *= w.transpose();
                }
                LayerSpec::Prelu { channels } => {
                    if input.ncols() != channels {
                        return Err(Error::invalid(format!("trace layer {k} width mismatch")));
                    }
                    let slopes = &self.params[start..end];
                    for j in 0..channels {
                        let mut slope_grad = 0.0;
                        for i in 0..input.nrows() {
                            let x = input[(i, j)];
                            if x <= 0.0 {
                                slope_grad += upstream[(i, j)] * x;
                                upstream[(i, j)] *= slopes[j];
                            }
                        }
                        grad[start + j] = slope_grad;
                    }
                }
                LayerSpec::Dropout { .. } => {
                    if let Some(mask) = &trace.masks[k] {
                        upstream.component_mul_assign(mask);
                    }
                }
            }
            end = start;
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index of the parameter with the largest relative error.
    pub worst_param: usize,
    pub checked: usize,
    /// Parameters skipped because a perturbation moved a PReLU input across zero.
    pub skipped_at_kink: usize,
}

pub const GRADIENT_CHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

fn prelu_signs(net: &EmbeddingNetwork, trace: &ForwardTrace) -> Vec<bool> {
    net.layers
        .iter()
        .zip(&trace.inputs)
        .filter(|(l, _)| matches!(l, LayerSpec::Prelu { .. }))
        .flat_map(|(_, input)| input.iter().map(|v| *v > 0.0).collect::<Vec<_>>())
        .collect()
}

/// Compares the analytic parameter gradient of `loss` (evaluated on the
/// network output) against central finite differences. Dropout is disabled:
/// every pass runs in eval mode.
///
/// `loss` returns the scalar loss and its gradient with respect to the output.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn gradient_check<F>(net: &EmbeddingNetwork, batch: &DMatrix<f64>, loss: F) -> Result<GradientCheckReport>
where
    F: Fn(&DMatrix<f64>) -> (f64, DMatrix<f64>),
{
    let (out, trace) = net.forward(batch, Mode::Eval, 0)?;
    let (_, out_grad) = loss(&out);
    let analytic = net.backward(&trace, &out_grad)?;

    let mut probe = net.clone();
    let mut report = GradientCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: 0,
        checked: 0,
        skipped_at_kink: 0,
    };
    for k in 0..net.params.len() {
        let original = net.params[k];
        probe.params[k] = original + GRADIENT_CHECK_STEP;
        let (plus_out, plus_trace) = probe.forward(batch, Mode::Eval, 0)?;
        probe.params[k] = original - GRADIENT_CHECK_STEP;
        let (minus_out, minus_trace) = probe.forward(batch, Mode::Eval, 0)?;
        probe.params[k] = original;

        if prelu_signs(net, &plus_trace) != prelu_signs(net, &minus_trace) {
            report.skipped_at_kink += 1;
            continue;
        }
        let numeric = (loss(&plus_out).0 - loss(&minus_out).0) / (2.0 * GRADIENT_CHECK_STEP);
        let abs = (analytic[k] - numeric).abs();
        let rel = abs / analytic[k].abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = k;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_counts_params() {
        let layers = vec![LayerSpec::Dense { in_width: 3, out_width: 2 }];
        let a = EmbeddingNetwork::init(layers.clone(), 7).unwrap();
        let b = EmbeddingNetwork::init(layers.clone(), 7).unwrap();
        assert_eq!(a.params().len(), 8);
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(&a.params()[6..], &[0.0, 0.0]);
        let c = EmbeddingNetwork::init(layers, 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn prelu_slopes_start_at_quarter() {
        let layers = vec![
            LayerSpec::Dense { in_width: 20, out_width: 64 },
            LayerSpec::Prelu { channels: 64 },
            LayerSpec::Dense { in_width: 64, out_width: 2 },
        ];
        let net = EmbeddingNetwork::init(layers, 3).unwrap();
        let slopes = &net.params()[20 * 64 + 64..20 * 64 + 64 + 64];
        assert_eq!(slopes.len(), 64);
        assert!(slopes.iter().all(|&s| s == 0.25));
        assert_eq!(net.params().len(), 20 * 64 + 64 + 64 + 64 * 2 + 2);
    }

    #[test]
    fn param_count_formula_matches_flat_length() {
        for widths in [vec![5, 3], vec![20, 16, 8, 2], vec![4, 64, 32, 3]] {
            let layers = mlp_layers(&widths, 0.1);
            let net = EmbeddingNetwork::init(layers, 1).unwrap();
            let dense: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            let prelu: usize = widths[1..widths.len() - 1].iter().sum();
            assert_eq!(net.params().len(), dense + prelu);
            assert_eq!(net.input_dim(), widths[0]);
            assert_eq!(net.output_dim(), *widths.last().unwrap());
        }
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let bad = vec![
            LayerSpec::Dense { in_width: 3, out_width: 4 },
            LayerSpec::Dense { in_width: 5, out_width: 2 },
        ];
        assert!(matches!(EmbeddingNetwork::init(bad, 0), Err(Error::InvalidArgument(_))));
        let bad_prelu = vec![
            LayerSpec::Dense { in_width: 3, out_width: 4 },
            LayerSpec::Prelu { channels: 3 },
        ];
        assert!(EmbeddingNetwork::init(bad_prelu, 0).is_err());
        let bad_rate = vec![
            LayerSpec::Dense { in_width: 3, out_width: 4 },
            LayerSpec::Dropout { rate: 1.0 },
        ];
        assert!(EmbeddingNetwork::init(bad_rate, 0).is_err());
        assert!(EmbeddingNetwork::init(vec![], 0).is_err());
    }

    #[test]
    fn dense_layer_is_affine() {
        let layers = vec![LayerSpec::Dense { in_width: 3, out_width: 2 }];
        // W is 3x2 row-major, then bias
        let params = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -1.0];
        let net = EmbeddingNetwork::from_parts(layers, 0, params).unwrap();
        let y = net.embed_one(&[1.0, -1.0, 2.0]).unwrap();
        // Wᵀx + b = (1 - 3 + 10 + 0.5, 2 - 4 + 12 - 1)
        assert_eq!(y, vec![8.5, 9.0]);
    }

    #[test]
    fn prelu_definition() {
        let layers = vec![
            LayerSpec::Dense { in_width: 1, out_width: 1 },
            LayerSpec::Prelu { channels: 1 },
        ];
        let net = EmbeddingNetwork::from_parts(layers, 0, vec![1.0, 0.0, 0.3]).unwrap();
        assert_eq!(net.embed_one(&[-2.0]).unwrap(), vec![-2.0 * 0.3]);
        assert_eq!(net.embed_one(&[3.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn zero_rate_dropout_matches_eval() {
        let net = EmbeddingNetwork::init(mlp_layers(&[6, 8, 2], 0.0), 4).unwrap();
        let layers = vec![
            LayerSpec::Dense { in_width: 6, out_width: 8 },
            LayerSpec::Prelu { channels: 8 },
            LayerSpec::Dropout { rate: 0.0 },
            LayerSpec::Dense { in_width: 8, out_width: 2 },
        ];
        let with_dropout = EmbeddingNetwork::from_parts(layers, 4, net.params().to_vec()).unwrap();
        let x = random_batch(5, 6, 9);
        let (train, _) = with_dropout.forward(&x, Mode::Train, 17).unwrap();
        let (eval, _) = with_dropout.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn dropout_masks_follow_step_seed() {
        let net = EmbeddingNetwork::init(mlp_layers(&[6, 32, 2], 0.5), 4).unwrap();
        let x = random_batch(4, 6, 1);
        let (a, _) = net.forward(&x, Mode::Train, 1).unwrap();
        let (b, _) = net.forward(&x, Mode::Train, 1).unwrap();
        let (c, _) = net.forward(&x, Mode::Train, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let (e1, _) = net.forward(&x, Mode::Eval, 1).unwrap();
        let (e2, _) = net.forward(&x, Mode::Eval, 2).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = EmbeddingNetwork::init(mlp_layers(&[3, 2], 0.0), 0).unwrap();
        assert!(net.embed(&DMatrix::zeros(2, 4)).is_err());
        let mut x = DMatrix::zeros(1, 3);
        x[(0, 1)] = f64::NAN;
        assert!(net.embed(&x).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let net = EmbeddingNetwork::init(mlp_layers(&[5, 7, 3], 0.2), 2).unwrap();
        let x = random_batch(4, 5, 3);
        let (out, trace) = net.forward(&x, Mode::Train, 5).unwrap();
        let g = net.backward(&trace, &DMatrix::zeros(out.nrows(), out.ncols())).unwrap();
        assert_eq!(g.len(), net.params().len());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_dense_weight_gradient_is_outer_product() {
        let net = EmbeddingNetwork::init(vec![LayerSpec::Dense { in_width: 3, out_width: 2 }], 5).unwrap();
        let x = DMatrix::from_row_slice(1, 3, &[0.5, -2.0, 1.5]);
        let upstream = DMatrix::from_row_slice(1, 2, &[3.0, -1.0]);
        let (_, trace) = net.forward(&x, Mode::Eval, 0).unwrap();
        let g = net.backward(&trace, &upstream).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(g[i * 2 + j], x[(0, i)] * upstream[(0, j)]);
            }
        }
        assert_eq!(&g[6..], &[3.0, -1.0]);
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = EmbeddingNetwork::init(mlp_layers(&[3, 4, 2], 0.0), 0).unwrap();
        let b = EmbeddingNetwork::init(mlp_layers(&[3, 2], 0.0), 0).unwrap();
        let (out, trace) = a.forward(&random_batch(2, 3, 0), Mode::Eval, 0).unwrap();
        assert!(b.backward(&trace, &DMatrix::zeros(out.nrows(), out.ncols())).is_err());
    }

    #[test]
    fn sum_loss_gradient_check() {
        let net = EmbeddingNetwork::init(mlp_layers(&[20, 8, 2], 0.1), 11).unwrap();
        let x = random_batch(6, 20, 12);
        let sum_loss = |out: &DMatrix<f64>| (out.sum(), DMatrix::from_element(out.nrows(), out.ncols(), 1.0));
        let report = gradient_check(&net, &x, sum_loss).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked + report.skipped_at_kink, net.params().len());
        assert_eq!(report, gradient_check(&net, &x, sum_loss).unwrap());
    }

    #[test]
    fn squared_loss_gradient_check_with_prelu() {
        let net = EmbeddingNetwork::init(mlp_layers(&[20, 8, 2], 0.0), 21).unwrap();
        let x = random_batch(10, 20, 22);
        let report = gradient_check(&net, &x, |out| (0.5 * out.norm_squared(), out.clone())).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn json_round_trip() {
        let net = EmbeddingNetwork::init(mlp_layers(&[4, 3, 2], 0.1), 99).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        assert!(json.contains("\"kind\":\"dense\""));
        let back: EmbeddingNetwork = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        let mut short: serde_json::Value = serde_json::from_str(&json).unwrap();
        short["params"].as_array_mut().unwrap().pop();
        assert!(serde_json::from_value::<EmbeddingNetwork>(short).is_err());
    }
}
