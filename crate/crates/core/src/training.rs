//! Supervised training of a [`Network`] on a classification [`Dataset`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate;
use crate::data::Dataset;
use crate::error::{KanError, Result};
use crate::network::{standardize, AdherenceTally, ForwardTrace, Network};
use crate::spline::{silu, silu_derivative};

/// How the output layer is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// One logit per class, softmax cross-entropy.
    #[default]
    Softmax,
    /// A single output regressed onto the class index with squared error;
    /// predictions are rounded to the nearest valid class.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub trace_adherence: bool,
    pub head: Head,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 32,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            trace_adherence: false,
            head: Head::Softmax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(KanError::config("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(KanError::config("batch size must be at least 1"));
        }
        // zero is accepted so a run can be replayed without moving the parameters
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(KanError::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(KanError::config("adam betas must lie in [0, 1) and epsilon must be positive"));
        }
        Ok(())
    }
}

/// Loss and gradient of softmax cross-entropy for one sample.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(KanError::invalid(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(KanError::invalid("logits must be finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `(output - label)^2` for a single-output network.
pub fn squared_error_on_index(output: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if output.len() != 1 {
        return Err(KanError::invalid(format!(
            "regression head expects one output, got {}",
            output.len()
        )));
    }
    let diff = output[0] - label as f64;
    Ok((diff * diff, vec![2.0 * diff]))
}

fn head_loss(head: Head, output: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    match head {
        Head::Softmax => softmax_cross_entropy(output, label),
        Head::Regression => squared_error_on_index(output, label),
    }
}

/// Predicted class for one output vector; argmax ties go to the lowest index.
pub fn predict_class(output: &[f64], head: Head, n_classes: usize) -> usize {
    match head {
        Head::Softmax => {
            let mut best = 0;
            for (i, &v) in output.iter().enumerate().skip(1) {
                if v > output[best] {
                    best = i;
                }
            }
            best
        }
        Head::Regression => {
            let v = output[0];
            if v.is_nan() {
                0
            } else {
                v.round().clamp(0.0, n_classes.saturating_sub(1) as f64) as usize
            }
        }
    }
}

/// Gradients of the batch-mean loss, laid out like [`Network::parameters`].
///
/// `traces[i]` and `d_outputs[i]` belong to sample `i`; each trace must come
/// from a forward call on this exact network state.
pub fn backward(net: &Network, traces: &[ForwardTrace], d_outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if traces.len() != d_outputs.len() {
        return Err(KanError::Consistency(format!(
            "{} traces but {} output gradients",
            traces.len(),
            d_outputs.len()
        )));
    }
    let mut grad = vec![0.0; net.param_count()];
    if traces.is_empty() {
        return Ok(grad);
    }
    let mut work = BackwardScratch::default();
    for (trace, d_out) in traces.iter().zip(d_outputs) {
        check_trace(net, trace, d_out)?;
        backward_one(net, trace, d_out, &mut grad, &mut work);
    }
    let scale = 1.0 / traces.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

fn check_trace(net: &Network, trace: &ForwardTrace, d_out: &[f64]) -> Result<()> {
    if trace.version != net.version() {
        return Err(KanError::Consistency(
            "trace was recorded before the network parameters changed".into(),
        ));
    }
    if trace.layers.len() != net.layers().len() {
        return Err(KanError::Consistency("trace layer count does not match the network".into()));
    }
    for (lt, layer) in trace.layers.iter().zip(net.layers()) {
        if lt.inputs.len() != layer.n_in()
            || lt.nodes.len() != layer.n_out()
            || lt.edge_outputs.len() != layer.n_in() * layer.n_out()
            || lt.normalized.is_some() != layer.norm().is_some()
        {
            return Err(KanError::Consistency("trace shapes do not match the network".into()));
        }
    }
    if d_out.len() != net.n_outputs() {
        return Err(KanError::Consistency(format!(
            "output gradient has length {}, network has {} outputs",
            d_out.len(),
            net.n_outputs()
        )));
    }
    Ok(())
}

#[derive(Default)]
struct BackwardScratch {
    basis: Vec<f64>,
    derivs: Vec<f64>,
    d_edges: Vec<f64>,
}

fn backward_one(net: &Network, trace: &ForwardTrace, d_out: &[f64], grad: &mut [f64], work: &mut BackwardScratch) {
    let layers = net.layers();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for layer in layers {
        offsets.push(off);
        off += layer.param_count();
    }

    let mut upstream = d_out.to_vec();
    for (l, layer) in layers.iter().enumerate().rev() {
        let lt = &trace.layers[l];
        let (n_in, n_out) = (layer.n_in(), layer.n_out());
        let nb = layer.grid().basis_count();
        let per_edge = nb + 2;
        let edge_base = offsets[l];

        // upstream is d(loss)/d(layer output); move it back through the norm
        let d_nodes = match layer.norm() {
            Some(norm) => {
                let norm_base = edge_base + n_in * n_out * per_edge;
                let (z, inv_std) = standardize(&lt.nodes, norm.eps);
                let dz: Vec<f64> = upstream.iter().zip(&norm.gain).map(|(u, g)| u * g).collect();
                for q in 0..n_out {
                    grad[norm_base + q] += upstream[q] * z[q];
                    grad[norm_base + n_out + q] += upstream[q];
                }
                let n = n_out as f64;
                let mean_dz = dz.iter().sum::<f64>() / n;
                let mean_dz_z = dz.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / n;
                dz.iter()
                    .zip(&z)
                    .map(|(d, zi)| inv_std * (d - mean_dz - zi * mean_dz_z))
                    .collect()
            }
            None => upstream,
        };

        work.d_edges.resize(n_in * n_out, 0.0);
        for q in 0..n_out {
            let row = &lt.edge_outputs[q * n_in..(q + 1) * n_in];
            aggregate::backward_into(row, layer.aggregator(), d_nodes[q], &mut work.d_edges[q * n_in..(q + 1) * n_in]);
        }

        work.basis.resize(n_in * nb, 0.0);
        work.derivs.resize(n_in * nb, 0.0);
        for (p, &x) in lt.inputs.iter().enumerate() {
            layer
                .grid()
                .eval_into(x, &mut work.basis[p * nb..(p + 1) * nb], Some(&mut work.derivs[p * nb..(p + 1) * nb]));
        }

        let mut d_inputs = vec![0.0; n_in];
        for q in 0..n_out {
            for p in 0..n_in {
                let up = work.d_edges[q * n_in + p];
                if up == 0.0 {
                    continue;
                }
                let x = lt.inputs[p];
                let e = layer.edge(q, p);
                let basis = &work.basis[p * nb..(p + 1) * nb];
                let derivs = &work.derivs[p * nb..(p + 1) * nb];
                let g = &mut grad[edge_base + (q * n_in + p) * per_edge..][..per_edge];
                let scaled = up * e.w_spline;
                let mut spline = 0.0;
                let mut spline_dx = 0.0;
                for i in 0..nb {
                    g[i] += scaled * basis[i];
                    spline += e.coeffs[i] * basis[i];
                    spline_dx += e.coeffs[i] * derivs[i];
                }
                g[nb] += up * silu(x);
                g[nb + 1] += up * spline;
                d_inputs[p] += up * (e.w_base * silu_derivative(x) + e.w_spline * spline_dx);
            }
        }
        upstream = d_inputs;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(KanError::invalid(format!(
            "adam shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(net: &Network, features: &[Vec<f64>], labels: &[usize], head: Head, n_classes: usize) -> Result<f64> {
    if features.is_empty() {
        return Err(KanError::invalid("cannot evaluate on an empty set"));
    }
    if features.len() != labels.len() {
        return Err(KanError::invalid(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (x, &y) in features.iter().zip(labels) {
        let out = net.predict(x)?;
        if predict_class(&out, head, n_classes) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub lo: f64,
    pub hi: f64,
    /// Pooled over every traced training sample, one entry per hidden layer.
    pub per_layer: Vec<f64>,
    pub inside: Vec<u64>,
    pub total: Vec<u64>,
    /// Per-iteration fractions for diagnostics: `per_iteration[it][layer]`.
    pub per_iteration: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of each iteration's mini-batch.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub adherence: Option<AdherenceReport>,
}

/// Trains `net` in place: one Adam step per iteration on one mini-batch drawn
/// from a seeded shuffle of the training split, reshuffled every epoch.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(net, data, cfg.head)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = data.train.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let hidden = net.layers().len() - 1;
    let (lo, hi) = (net.config().range_lo, net.config().range_hi);
    let mut pooled = AdherenceTally::new(lo, hi, hidden);
    let mut per_iteration = Vec::new();

    let mut params = net.parameters();
    let mut adam = AdamState::new(params.len());
    let mut loss_curve = Vec::with_capacity(cfg.iterations);

    let mut traces = Vec::with_capacity(cfg.batch_size);
    let mut d_outputs = Vec::with_capacity(cfg.batch_size);
    for iteration in 0..cfg.iterations {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;

        traces.clear();
        d_outputs.clear();
        let mut batch_loss = 0.0;
        let mut tally = AdherenceTally::new(lo, hi, hidden);
        for &row in batch {
            let (out, trace) = net.forward(&data.features[row], true)?;
            let trace = trace.expect("tracing requested");
            let (loss, d_out) = match head_loss(cfg.head, &out, data.labels[row]) {
                Ok(v) => v,
                Err(_) => return Err(KanError::Diverged { iteration }),
            };
            batch_loss += loss;
            if cfg.trace_adherence {
                tally.record(&trace)?;
            }
            traces.push(trace);
            d_outputs.push(d_out);
        }
        batch_loss /= batch.len() as f64;
        if !batch_loss.is_finite() {
            return Err(KanError::Diverged { iteration });
        }
        loss_curve.push(batch_loss);
        if cfg.trace_adherence {
            pooled.merge(&tally);
            per_iteration.push(tally.fractions());
        }

        let grads = backward(net, &traces, &d_outputs)?;
        adam_step(&mut params, &grads, &mut adam, cfg)?;
        net.set_parameters(&params)?;
    }

    let acc = |rows: &[usize]| -> Result<f64> {
        let xs: Vec<Vec<f64>> = rows.iter().map(|&r| data.features[r].clone()).collect();
        let ys: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
        evaluate(net, &xs, &ys, cfg.head, data.n_classes)
    };
    Ok(TrainReport {
        loss_curve,
        train_accuracy: acc(&data.train)?,
        val_accuracy: acc(&data.val)?,
        test_accuracy: acc(&data.test)?,
        adherence: cfg.trace_adherence.then(|| AdherenceReport {
            lo,
            hi,
            per_layer: pooled.fractions(),
            inside: pooled.inside.clone(),
            total: pooled.total.clone(),
            per_iteration,
        }),
    })
}

fn check_compatible(net: &Network, data: &Dataset, head: Head) -> Result<()> {
    if data.n_features() != net.n_inputs() {
        return Err(KanError::config(format!(
            "dataset has {} features, network expects {}",
            data.n_features(),
            net.n_inputs()
        )));
    }
    match head {
        Head::Softmax if net.n_outputs() != data.n_classes => Err(KanError::config(format!(
            "softmax head needs {} outputs, network has {}",
            data.n_classes,
            net.n_outputs()
        ))),
        Head::Regression if net.n_outputs() != 1 => Err(KanError::config(format!(
            "regression head needs one output, network has {}",
            net.n_outputs()
        ))),
        _ if data.labels.iter().any(|&y| y >= data.n_classes) => {
            Err(KanError::config("dataset label out of range"))
        }
        _ if data.train.is_empty() => Err(KanError::config("training split is empty")),
        _ => Ok(()),
    }
}
