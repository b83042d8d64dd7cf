//! Mean-field Bayesian MLP trained by variational inference.
//!
//! Every scalar weight (biases included) has an independent Gaussian posterior
//! `N(mu, softplus(rho)^2)`. Training minimises the Monte-Carlo negative ELBO
//!
//! ```text
//! loss = mean_i NLL(batch | w_i) + (lambda / 2) * KL(q || prior) / num_batches
//! ```
//!
//! with `w_i = mu + softplus(rho) * eps_i` and exact reverse-mode gradients
//! through that reparameterization.

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSplit;
use crate::numerics::{
    adam_step, inverse_softplus, log_softmax_in_place, sigmoid, softplus, AdamState, Matrix,
    RngStream,
};
use crate::{Error, Result, TaskId};

/// Layer widths of an MLP, input first. Each layer stores an
/// `(in + 1) x out` weight matrix whose last row is the bias.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    dims: Vec<usize>,
}

impl Architecture {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "an architecture needs at least input and output widths".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {dims:?}")));
        }
        Ok(Self { dims })
    }

    /// Input, hidden layers, output.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        Self::new(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(rows, cols)` of each layer's weight matrix, bias row included.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[0] + 1, w[1]))
    }

    /// Number of scalar weights, biases included.
    pub fn num_weights(&self) -> usize {
        self.layer_shapes().map(|(r, c)| r * c).sum()
    }

    /// Splits a flat parameter vector into per-layer matrices.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<Matrix>> {
        if flat.len() != self.num_weights() {
            return Err(Error::Shape(format!(
                "{} values for an architecture with {} weights",
                flat.len(),
                self.num_weights()
            )));
        }
        let mut offset = 0;
        self.layer_shapes()
            .map(|(r, c)| {
                let m = Matrix::from_vec(r, c, flat[offset..offset + r * c].to_vec());
                offset += r * c;
                m
            })
            .collect()
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

pub fn flatten(layers: &[Matrix]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// Prior and initialization of the variational parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub mu_std: f64,
    pub rho: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mu_std: 0.1,
            rho: -3.0,
            prior_mean: 0.0,
            prior_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub mu: Matrix,
    pub rho: Matrix,
}

impl VariationalLayer {
    pub fn in_dim(&self) -> usize {
        self.mu.rows() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn sigma(&self) -> Matrix {
        let data = self.rho.as_slice().iter().map(|&r| softplus(r)).collect();
        Matrix::from_vec(self.rho.rows(), self.rho.cols(), data).expect("same shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    arch: Architecture,
    pub layers: Vec<VariationalLayer>,
    pub activation: Activation,
    pub prior_mean: f64,
    pub prior_std: f64,
}

impl VariationalNet {
    /// Fresh network with `mu ~ N(0, init.mu_std^2)` and constant `rho`.
    pub fn new(arch: Architecture, init: &InitConfig, rng: &mut RngStream) -> Result<Self> {
        if !(init.prior_std > 0.0) {
            return Err(Error::Config(format!(
                "prior_std must be > 0, got {}",
                init.prior_std
            )));
        }
        let layers = arch
            .layer_shapes()
            .map(|(r, c)| {
                let mu = Matrix::from_vec(r, c, rng.sample_gaussian(0.0, init.mu_std, r * c)?)?;
                let rho = Matrix::from_vec(r, c, vec![init.rho; r * c])?;
                Ok(VariationalLayer { mu, rho })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            layers,
            activation: Activation::Relu,
            prior_mean: init.prior_mean,
            prior_std: init.prior_std,
        })
    }

    /// Network whose posterior is given by flat means and standard deviations.
    pub fn from_posterior(
        arch: Architecture,
        mean: &[f64],
        sigma: &[f64],
        prior_mean: f64,
        prior_std: f64,
    ) -> Result<Self> {
        let mus = arch.unflatten(mean)?;
        let rhos: Vec<f64> = sigma.iter().map(|&s| inverse_softplus(s)).collect();
        let rhos = arch.unflatten(&rhos)?;
        Ok(Self {
            arch,
            layers: mus
                .into_iter()
                .zip(rhos)
                .map(|(mu, rho)| VariationalLayer { mu, rho })
                .collect(),
            activation: Activation::Relu,
            prior_mean,
            prior_std,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_weights(&self) -> usize {
        self.arch.num_weights()
    }

    pub fn flat_mu(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.mu.as_slice().iter().copied())
            .collect()
    }

    pub fn flat_sigma(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.rho.as_slice().iter().map(|&r| softplus(r)))
            .collect()
    }
}

/// One draw of the weights together with the standard-normal noise behind it.
#[derive(Debug, Clone)]
pub struct WeightSample {
    pub weights: Vec<Matrix>,
    pub noise: Vec<Matrix>,
}

pub fn sample_weights(net: &VariationalNet, rng: &mut RngStream) -> WeightSample {
    let noise: Vec<Matrix> = net
        .layers
        .iter()
        .map(|l| {
            let mut eps = Matrix::zeros(l.mu.rows(), l.mu.cols());
            rng.fill_standard_normal(eps.as_mut_slice());
            eps
        })
        .collect();
    let weights = weights_from_noise(net, &noise);
    WeightSample { weights, noise }
}

fn weights_from_noise(net: &VariationalNet, noise: &[Matrix]) -> Vec<Matrix> {
    net.layers
        .iter()
        .zip(noise)
        .map(|(l, eps)| {
            let data = l
                .mu
                .as_slice()
                .iter()
                .zip(l.rho.as_slice())
                .zip(eps.as_slice())
                .map(|((&m, &r), &e)| m + softplus(r) * e)
                .collect();
            Matrix::from_vec(l.mu.rows(), l.mu.cols(), data).expect("same shape")
        })
        .collect()
}

/// Activations of every layer for a batch; `acts[0]` is the input and the
/// last entry holds log-probabilities.
struct ForwardTrace {
    acts: Vec<Matrix>,
}

fn check_weights(weights: &[Matrix], x: &Matrix) -> Result<()> {
    let first = weights
        .first()
        .ok_or_else(|| Error::Shape("network without layers".into()))?;
    if x.cols() + 1 != first.rows() {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            x.cols(),
            first.rows() - 1
        )));
    }
    for pair in weights.windows(2) {
        if pair[0].cols() + 1 != pair[1].rows() {
            return Err(Error::Shape("layer widths do not chain".into()));
        }
    }
    Ok(())
}

/// `x * W[..in] + W[in]` for a weight matrix with a trailing bias row.
fn affine(x: &Matrix, w: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let out_dim = w.cols();
    let mut z = Matrix::zeros(n, out_dim);
    let bias = w.row(d);
    for r in 0..n {
        z.row_mut(r).copy_from_slice(bias);
    }
    crate::numerics::matmul_into(
        x.as_slice(),
        &w.as_slice()[..d * out_dim],
        z.as_mut_slice(),
        n,
        d,
        out_dim,
    );
    z
}

fn forward_trace(weights: &[Matrix], x: &Matrix) -> Result<ForwardTrace> {
    check_weights(weights, x)?;
    let mut acts = Vec::with_capacity(weights.len() + 1);
    acts.push(x.clone());
    for (i, w) in weights.iter().enumerate() {
        let mut z = affine(acts.last().expect("non-empty"), w);
        if i + 1 < weights.len() {
            for v in z.as_mut_slice() {
                *v = v.max(0.0);
            }
        } else {
            for r in 0..z.rows() {
                log_softmax_in_place(z.row_mut(r));
            }
        }
        acts.push(z);
    }
    Ok(ForwardTrace { acts })
}

/// Per-row class log-probabilities of a concrete weight set.
pub fn forward_weights(weights: &[Matrix], x: &Matrix) -> Result<Matrix> {
    Ok(forward_trace(weights, x)?
        .acts
        .pop()
        .expect("at least one layer"))
}

pub fn forward(net: &VariationalNet, weights: &[Matrix], x: &Matrix) -> Result<Matrix> {
    if weights.len() != net.layers.len() {
        return Err(Error::Shape(format!(
            "{} weight matrices for a {}-layer network",
            weights.len(),
            net.layers.len()
        )));
    }
    forward_weights(weights, x)
}

fn kl_scalar(mu: f64, sigma: f64, prior_mean: f64, prior_std: f64) -> f64 {
    let d = mu - prior_mean;
    (prior_std / sigma).ln() + (sigma * sigma + d * d) / (2.0 * prior_std * prior_std) - 0.5
}

/// Closed-form `KL(q || prior)` summed over every scalar weight.
pub fn kl_term(net: &VariationalNet) -> f64 {
    net.layers
        .iter()
        .flat_map(|l| l.mu.as_slice().iter().zip(l.rho.as_slice()))
        .map(|(&m, &r)| kl_scalar(m, softplus(r), net.prior_mean, net.prior_std))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Analytic Gaussian KL.
    #[default]
    ClosedForm,
    /// Single-sample estimate `log q(w) - log p(w)` at each weight draw.
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The `lambda` weighting of the KL term.
    pub kl_weight: f64,
    pub mc_samples_per_step: usize,
    pub kl_mode: KlMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            kl_weight: 1.0,
            mc_samples_per_step: 1,
            kl_mode: KlMode::ClosedForm,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mc_samples_per_step == 0 {
            return Err(Error::Config(
                "batch_size and mc_samples_per_step must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config(
                "learning_rate must be > 0 and kl_weight >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Gradients of the loss with respect to every `mu` and `rho`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub mu: Vec<Matrix>,
    pub rho: Vec<Matrix>,
}

/// Summed negative log-likelihood of a batch and its gradient with respect to
/// the concrete weights.
fn nll_and_weight_grads(weights: &[Matrix], x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Matrix>)> {
    let trace = forward_trace(weights, x)?;
    let log_probs = trace.acts.last().expect("output layer");
    let classes = log_probs.cols();
    let mut nll = 0.0;
    let mut delta = Matrix::zeros(log_probs.rows(), classes);
    for (r, &y) in labels.iter().enumerate() {
        let lp = log_probs.row(r);
        nll -= lp[y];
        let d = delta.row_mut(r);
        for (dc, &l) in d.iter_mut().zip(lp) {
            *dc = l.exp();
        }
        d[y] -= 1.0;
    }

    let mut grads: Vec<Matrix> = weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    for layer in (0..weights.len()).rev() {
        let input = &trace.acts[layer];
        let (n, d) = input.shape();
        let out_dim = delta.cols();
        let g = grads[layer].as_mut_slice();
        for r in 0..n {
            let dz = delta.row(r);
            for (i, &a) in input.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let gi = &mut g[i * out_dim..(i + 1) * out_dim];
                for (gv, &dv) in gi.iter_mut().zip(dz) {
                    *gv += a * dv;
                }
            }
            let gb = &mut g[d * out_dim..(d + 1) * out_dim];
            for (gv, &dv) in gb.iter_mut().zip(dz) {
                *gv += dv;
            }
        }
        if layer == 0 {
            break;
        }
        // Back through W and the ReLU of the previous layer.
        let w = &weights[layer];
        let mut prev = Matrix::zeros(n, d);
        for r in 0..n {
            let dz = delta.row(r);
            let act = input.row(r);
            let out = prev.row_mut(r);
            for i in 0..d {
                if act[i] <= 0.0 {
                    continue;
                }
                out[i] = w.row(i).iter().zip(dz).map(|(a, b)| a * b).sum();
            }
        }
        delta = prev;
    }
    Ok((nll, grads))
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Negative ELBO of one minibatch and its exact gradients, given the noise of
/// each Monte-Carlo sample (`noise[i][layer]`).
pub fn elbo_loss_with_noise(
    net: &VariationalNet,
    x: &Matrix,
    labels: &[usize],
    config: &TrainConfig,
    num_batches: usize,
    noise: &[Vec<Matrix>],
) -> Result<(f64, Gradients)> {
    check_labels(labels, net.arch.output_dim(), x.rows())?;
    if noise.is_empty() {
        return Err(Error::Config("at least one Monte-Carlo sample is required".into()));
    }
    let samples = noise.len() as f64;
    let kl_scale = 0.5 * config.kl_weight / num_batches.max(1) as f64;
    let (pm, ps) = (net.prior_mean, net.prior_std);
    let prior_var = ps * ps;

    let mut grad_mu: Vec<Matrix> = net
        .layers
        .iter()
        .map(|l| Matrix::zeros(l.mu.rows(), l.mu.cols()))
        .collect();
    let mut grad_rho = grad_mu.clone();
    let mut loss = 0.0;

    for eps in noise {
        let weights = weights_from_noise(net, eps);
        let (nll, gw) = nll_and_weight_grads(&weights, x, labels)?;
        loss += nll / samples;
        for (li, layer) in net.layers.iter().enumerate() {
            let gm = grad_mu[li].as_mut_slice();
            let gr = grad_rho[li].as_mut_slice();
            let iter = layer
                .mu
                .as_slice()
                .iter()
                .zip(layer.rho.as_slice())
                .zip(eps[li].as_slice())
                .zip(gw[li].as_slice())
                .enumerate();
            for (k, (((&mu, &rho), &e), &g)) in iter {
                let sigma = softplus(rho);
                let dsigma_drho = sigmoid(rho);
                let mut dmu = g;
                let mut dsigma = g * e;
                if config.kl_mode == KlMode::MonteCarlo {
                    // d/d(theta) of log q(w) - log p(w) along w = mu + sigma * e.
                    let w = mu + sigma * e;
                    let q_logpdf = -(sigma.ln()) - 0.5 * e * e;
                    let p_logpdf = -0.5 * (ps.ln() * 2.0 + (w - pm) * (w - pm) / prior_var);
                    loss += kl_scale * (q_logpdf - p_logpdf) / samples;
                    dmu += kl_scale * (w - pm) / prior_var;
                    dsigma += kl_scale * (-1.0 / sigma + e * (w - pm) / prior_var);
                }
                gm[k] += dmu / samples;
                gr[k] += dsigma * dsigma_drho / samples;
            }
        }
    }

    if config.kl_mode == KlMode::ClosedForm {
        loss += kl_scale * kl_term(net);
        for (li, layer) in net.layers.iter().enumerate() {
            let gm = grad_mu[li].as_mut_slice();
            let gr = grad_rho[li].as_mut_slice();
            for (k, (&mu, &rho)) in layer.mu.as_slice().iter().zip(layer.rho.as_slice()).enumerate() {
                let sigma = softplus(rho);
                gm[k] += kl_scale * (mu - pm) / prior_var;
                gr[k] += kl_scale * (-1.0 / sigma + sigma / prior_var) * sigmoid(rho);
            }
        }
    }
    Ok((loss, Gradients { mu: grad_mu, rho: grad_rho }))
}

/// Negative ELBO of one minibatch, drawing `mc_samples_per_step` weight
/// samples from `rng`.
pub fn elbo_loss(
    net: &VariationalNet,
    x: &Matrix,
    labels: &[usize],
    config: &TrainConfig,
    num_batches: usize,
    rng: &mut RngStream,
) -> Result<(f64, Gradients)> {
    let noise: Vec<Vec<Matrix>> = (0..config.mc_samples_per_step)
        .map(|_| sample_weights(net, rng).noise)
        .collect();
    elbo_loss_with_noise(net, x, labels, config, num_batches, &noise)
}

/// Posterior of one trained task: flat per-weight means and standard
/// deviations plus the task's label map. Immutable once created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSnapshot {
    pub task_id: TaskId,
    pub arch: Architecture,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Local class index to global label.
    pub label_map: Vec<usize>,
}

impl TaskSnapshot {
    pub fn from_net(net: &VariationalNet, task_id: TaskId, label_map: Vec<usize>) -> Self {
        Self {
            task_id,
            arch: net.architecture().clone(),
            mean: net.flat_mu(),
            sigma: net.flat_sigma(),
            label_map,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
    /// Mean NLL per example of the posterior-mean network on a held-out
    /// minibatch, before and after training.
    pub heldout_nll_before: f64,
    pub heldout_nll_after: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedTask {
    pub net: VariationalNet,
    pub snapshot: TaskSnapshot,
    pub summary: TrainSummary,
}

const HELDOUT_ROWS: usize = 256;

fn mean_nll(weights: &[Matrix], x: &Matrix, labels: &[usize]) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let lp = forward_weights(weights, x)?;
    let total: f64 = labels.iter().enumerate().map(|(r, &y)| -lp.get(r, y)).sum();
    Ok(total / x.rows() as f64)
}

fn mean_weights(net: &VariationalNet) -> Vec<Matrix> {
    net.layers.iter().map(|l| l.mu.clone()).collect()
}

/// Trains `net` on the training half of `task` and snapshots the posterior.
pub fn train_task(mut net: VariationalNet, task: &DatasetSplit, config: &TrainConfig) -> Result<TrainedTask> {
    config.validate()?;
    let n = task.train_x.rows();
    if net.arch.input_dim() != task.train_x.cols() {
        return Err(Error::Shape(format!(
            "task {} has {} features, network expects {}",
            task.task_id,
            task.train_x.cols(),
            net.arch.input_dim()
        )));
    }
    check_labels(&task.train_y, net.arch.output_dim(), n)?;

    let (held_x, held_y) = if task.test_x.rows() > 0 {
        let k = task.test_x.rows().min(HELDOUT_ROWS);
        let idx: Vec<usize> = (0..k).collect();
        (task.test_x.select_rows(&idx), task.test_y[..k].to_vec())
    } else {
        let k = n.min(HELDOUT_ROWS);
        let idx: Vec<usize> = (0..k).collect();
        (task.train_x.select_rows(&idx), task.train_y[..k].to_vec())
    };
    check_labels(&held_y, net.arch.output_dim(), held_x.rows())?;
    let heldout_nll_before = mean_nll(&mean_weights(&net), &held_x, &held_y)?;

    let mut rng = RngStream::new(config.seed);
    let mut adam_mu: Vec<AdamState> = net.layers.iter().map(|l| AdamState::new(l.mu.as_slice().len())).collect();
    let mut adam_rho = adam_mu.clone();
    let num_batches = n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let x = task.train_x.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| task.train_y[i]).collect();
            let (loss, grads) = elbo_loss(&net, &x, &y, config, num_batches, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            epoch_loss += loss;
            for (li, layer) in net.layers.iter_mut().enumerate() {
                adam_step(layer.mu.as_mut_slice(), grads.mu[li].as_slice(), &mut adam_mu[li], config.learning_rate)?;
                adam_step(layer.rho.as_mut_slice(), grads.rho[li].as_slice(), &mut adam_rho[li], config.learning_rate)?;
            }
            steps += 1;
        }
        epoch_losses.push(epoch_loss);
    }

    let heldout_nll_after = mean_nll(&mean_weights(&net), &held_x, &held_y)?;
    let snapshot = TaskSnapshot::from_net(&net, task.task_id, task.label_map.clone());
    Ok(TrainedTask {
        net,
        snapshot,
        summary: TrainSummary {
            epoch_losses,
            heldout_nll_before,
            heldout_nll_after,
            steps,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(dims: Vec<usize>, seed: u64) -> VariationalNet {
        let init = InitConfig {
            mu_std: 0.5,
            rho: -1.0,
            ..InitConfig::default()
        };
        VariationalNet::new(Architecture::new(dims).unwrap(), &init, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn weight_counts() {
        let a = Architecture::mlp(784, &[10, 10], 10).unwrap();
        assert_eq!(a.num_weights(), 8070);
        let a = Architecture::mlp(784, &[10, 10], 5).unwrap();
        assert_eq!(a.num_weights(), 8015);
        assert_eq!(a.to_string(), "784-10-10-5");
    }

    #[test]
    fn vanishing_sigma_gives_mean_weights() {
        let mut net = tiny_net(vec![3, 4, 2], 1);
        for l in &mut net.layers {
            for r in l.rho.as_mut_slice() {
                *r = -40.0;
            }
        }
        let s = sample_weights(&net, &mut RngStream::new(2));
        for (w, l) in s.weights.iter().zip(&net.layers) {
            for (a, b) in w.as_slice().iter().zip(l.mu.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let net = tiny_net(vec![3, 4, 2], 1);
        let a = sample_weights(&net, &mut RngStream::new(7));
        let b = sample_weights(&net, &mut RngStream::new(7));
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn weight_sample_moments() {
        let mut net = tiny_net(vec![1, 1], 1);
        net.layers[0].mu.set(0, 0, 2.0);
        net.layers[0].rho.set(0, 0, -0.5);
        let sigma = softplus(-0.5);
        let mut rng = RngStream::new(99);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_weights(&net, &mut rng).weights[0].get(0, 0))
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean / 2.0 - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let arch = Architecture::new(vec![3, 5, 4]).unwrap();
        let weights: Vec<Matrix> = arch.layer_shapes().map(|(r, c)| Matrix::zeros(r, c)).collect();
        let x = Matrix::from_rows(&[vec![0.2, 0.5, 1.0], vec![1.0, 0.0, 0.3]]).unwrap();
        let lp = forward_weights(&weights, &x).unwrap();
        for v in lp.as_slice() {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_hand_case() {
        // Inputs (1, 2); logits = (1*1 + 2*0 + 0.5, 1*(-1) + 2*1 + 0) = (1.5, 1.0).
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 1.0], vec![0.5, 0.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let lp = forward_weights(&[w], &x).unwrap();
        let norm = (1.5f64.exp() + 1.0f64.exp()).ln();
        assert!((lp.get(0, 0) - (1.5 - norm)).abs() < 1e-14);
        assert!((lp.get(0, 1) - (1.0 - norm)).abs() < 1e-14);
    }

    #[test]
    fn forward_rows_normalize() {
        let net = tiny_net(vec![4, 6, 3], 5);
        let s = sample_weights(&net, &mut RngStream::new(1));
        let mut rng = RngStream::new(2);
        let x = Matrix::from_vec(7, 4, rng.sample_gaussian(0.0, 3.0, 28).unwrap()).unwrap();
        let lp = forward(&net, &s.weights, &x).unwrap();
        for r in 0..lp.rows() {
            let total: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let net = tiny_net(vec![4, 3], 5);
        let s = sample_weights(&net, &mut RngStream::new(1));
        assert!(matches!(forward(&net, &s.weights, &Matrix::zeros(2, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_of_prior_is_zero() {
        let mut net = tiny_net(vec![2, 2], 1);
        for l in &mut net.layers {
            l.mu.as_mut_slice().fill(0.0);
            l.rho.as_mut_slice().fill(inverse_softplus(1.0));
        }
        assert!(kl_term(&net).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form_value() {
        assert!((kl_scalar(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
    }

    // Independent check: average of log q(w) - log p(w) over draws from q.
    #[test]
    fn kl_matches_monte_carlo() {
        let net = tiny_net(vec![2, 2], 3);
        let mut rng = RngStream::new(17);
        let (pm, ps) = (net.prior_mean, net.prior_std);
        let draws = 1_000_000 / net.num_weights();
        let mut mc = 0.0;
        for l in &net.layers {
            for (&m, &r) in l.mu.as_slice().iter().zip(l.rho.as_slice()) {
                let s = softplus(r);
                let mut acc = 0.0;
                for _ in 0..draws {
                    let w = m + s * rng.standard_normal();
                    let lq = crate::numerics::gaussian_log_pdf(w, m, s * s).unwrap();
                    let lp = crate::numerics::gaussian_log_pdf(w, pm, ps * ps).unwrap();
                    acc += lq - lp;
                }
                mc += acc / draws as f64;
            }
        }
        let exact = kl_term(&net);
        assert!((mc - exact).abs() < 0.01 * exact, "mc {mc} exact {exact}");
    }

    #[test]
    fn uniform_nll_without_kl() {
        let arch = Architecture::new(vec![3, 4, 5]).unwrap();
        let mut net = VariationalNet::new(arch, &InitConfig::default(), &mut RngStream::new(1)).unwrap();
        for l in &mut net.layers {
            l.mu.as_mut_slice().fill(0.0);
            l.rho.as_mut_slice().fill(-60.0);
        }
        let cfg = TrainConfig {
            kl_weight: 0.0,
            ..TrainConfig::default()
        };
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, 0.0, 0.5]]).unwrap();
        let (loss, _) = elbo_loss(&net, &x, &[0, 4], &cfg, 1, &mut RngStream::new(3)).unwrap();
        assert!((loss - 2.0 * 5f64.ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn label_out_of_range() {
        let net = tiny_net(vec![2, 3], 1);
        let x = Matrix::zeros(1, 2);
        let err = elbo_loss(&net, &x, &[3], &TrainConfig::default(), 1, &mut RngStream::new(1));
        assert!(matches!(err, Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    }

    fn finite_difference_check(kl_mode: KlMode) {
        let net = tiny_net(vec![4, 2, 2], 21);
        let mut rng = RngStream::new(4);
        let x = Matrix::from_vec(5, 4, rng.sample_gaussian(0.0, 1.0, 20).unwrap()).unwrap();
        let y = vec![0, 1, 1, 0, 1];
        let cfg = TrainConfig {
            kl_weight: 1.0,
            mc_samples_per_step: 2,
            kl_mode,
            ..TrainConfig::default()
        };
        let noise: Vec<Vec<Matrix>> = (0..2).map(|_| sample_weights(&net, &mut rng).noise).collect();
        let (_, grads) = elbo_loss_with_noise(&net, &x, &y, &cfg, 3, &noise).unwrap();
        let h = 1e-5;
        let loss_at = |n: &VariationalNet| elbo_loss_with_noise(n, &x, &y, &cfg, 3, &noise).unwrap().0;
        for li in 0..net.layers.len() {
            for k in 0..net.layers[li].mu.as_slice().len() {
                for which in 0..2 {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    let (p, m, analytic) = if which == 0 {
                        (&mut plus.layers[li].mu, &mut minus.layers[li].mu, grads.mu[li].as_slice()[k])
                    } else {
                        (&mut plus.layers[li].rho, &mut minus.layers[li].rho, grads.rho[li].as_slice()[k])
                    };
                    p.as_mut_slice()[k] += h;
                    m.as_mut_slice()[k] -= h;
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "layer {li} idx {k} param {which}: {analytic} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(KlMode::ClosedForm);
    }

    #[test]
    fn monte_carlo_kl_gradients_match_finite_differences() {
        finite_difference_check(KlMode::MonteCarlo);
    }
}
