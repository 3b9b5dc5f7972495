//! Stacks of KAN layers.
//!
//! A layer maps `n_in` inputs to `n_out` nodes through an `n_out x n_in`
//! matrix of [`EdgeActivation`]s; node `q` reduces `{phi_{q,p}(x_p)}_p` with
//! the layer's [`Aggregator`]. Hidden layers may normalize their node vector
//! before it reaches the next layer's splines. The last layer returns raw
//! logits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, Aggregator};
use crate::error::{KanError, Result};
use crate::spline::{silu, EdgeActivation, KnotGrid};

/// Epsilon added to the variance in hidden-layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const CHECKPOINT_FORMAT: &str = "kan-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
    /// One node function per layer transition.
    pub aggregators: Vec<Aggregator>,
    pub layer_norm: bool,
    pub grid_size: usize,
    pub degree: usize,
    pub range_lo: f64,
    pub range_hi: f64,
    pub seed: u64,
}

impl NetworkConfig {
    /// Grid 3, cubic splines on `[-1, 1]`, the same aggregator in every layer.
    pub fn new(widths: Vec<usize>, aggregator: Aggregator) -> Self {
        let layers = widths.len().saturating_sub(1);
        NetworkConfig {
            widths,
            aggregators: vec![aggregator; layers],
            layer_norm: false,
            grid_size: 3,
            degree: 3,
            range_lo: -1.0,
            range_hi: 1.0,
            seed: 0,
        }
    }

    pub fn with_aggregators(mut self, aggregators: Vec<Aggregator>) -> Self {
        self.aggregators = aggregators;
        self
    }

    pub fn with_layer_norm(mut self, enabled: bool) -> Self {
        self.layer_norm = enabled;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(KanError::config("network needs at least an input and an output width"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(KanError::config(format!("all widths must be positive, got {:?}", self.widths)));
        }
        if self.aggregators.len() != self.widths.len() - 1 {
            return Err(KanError::config(format!(
                "{} aggregators given for {} layers",
                self.aggregators.len(),
                self.widths.len() - 1
            )));
        }
        KnotGrid::new(self.range_lo, self.range_hi, self.grid_size, self.degree)
            .map_err(|e| KanError::config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<KnotGrid> {
        KnotGrid::new(self.range_lo, self.range_hi, self.grid_size, self.degree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        LayerNormParams {
            gain: vec![1.0; width],
            bias: vec![0.0; width],
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        layer_norm(v, &self.gain, &self.bias, self.eps)
    }
}

/// `(v - mean) / sqrt(popvar + eps) * gain + bias`, elementwise.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(KanError::invalid("layer norm of an empty vector"));
    }
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(KanError::invalid(format!(
            "layer norm shape mismatch: input {}, gain {}, bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(KanError::invalid("layer norm epsilon must be positive"));
    }
    let (z, _) = standardize(v, eps);
    Ok(z.iter().zip(gain).zip(bias).map(|((z, g), b)| z * g + b).collect())
}

/// Standardized values and `1 / sqrt(popvar + eps)`.
pub(crate) fn standardize(v: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (v.iter().map(|x| (x - mean) * inv_std).collect(), inv_std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    pub(crate) n_in: usize,
    pub(crate) n_out: usize,
    pub(crate) aggregator: Aggregator,
    pub(crate) grid: KnotGrid,
    /// Row-major: edge `(q, p)` lives at `q * n_in + p`.
    pub(crate) edges: Vec<EdgeActivation>,
    pub(crate) norm: Option<LayerNormParams>,
}

impl KanLayer {
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn aggregator(&self) -> Aggregator {
        self.aggregator
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn edges(&self) -> &[EdgeActivation] {
        &self.edges
    }

    pub fn edge(&self, q: usize, p: usize) -> &EdgeActivation {
        &self.edges[q * self.n_in + p]
    }

    pub fn edge_mut(&mut self, q: usize, p: usize) -> &mut EdgeActivation {
        &mut self.edges[q * self.n_in + p]
    }

    pub fn norm(&self) -> Option<&LayerNormParams> {
        self.norm.as_ref()
    }

    pub fn norm_mut(&mut self) -> Option<&mut LayerNormParams> {
        self.norm.as_mut()
    }

    pub fn set_aggregator(&mut self, aggregator: Aggregator) {
        self.aggregator = aggregator;
    }

    pub fn param_count(&self) -> usize {
        self.edges.len() * (self.grid.basis_count() + 2) + self.norm.as_ref().map_or(0, |_| 2 * self.n_out)
    }

    /// Evaluates every edge for one input vector. Basis functions are shared
    /// by all edges leaving the same input, so they are computed once per input.
    fn edge_outputs(&self, x: &[f64], basis: &mut Vec<f64>, out: &mut [f64]) {
        let nb = self.grid.basis_count();
        basis.resize(self.n_in * nb, 0.0);
        for (p, &xp) in x.iter().enumerate() {
            self.grid.eval_into(xp, &mut basis[p * nb..(p + 1) * nb], None);
        }
        for q in 0..self.n_out {
            for p in 0..self.n_in {
                let e = &self.edges[q * self.n_in + p];
                let spline: f64 = e.coeffs.iter().zip(&basis[p * nb..(p + 1) * nb]).map(|(c, b)| c * b).sum();
                out[q * self.n_in + p] = e.w_base * silu(x[p]) + e.w_spline * spline;
            }
        }
    }
}

/// Everything one forward pass computed, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub inputs: Vec<f64>,
    /// Row-major `n_out x n_in` edge activations before aggregation.
    pub edge_outputs: Vec<f64>,
    pub nodes: Vec<f64>,
    /// Present on hidden layers when normalization is enabled.
    pub normalized: Option<Vec<f64>>,
}

impl LayerTrace {
    /// Values handed to the next layer (normalized when normalization ran).
    pub fn outputs(&self) -> &[f64] {
        self.normalized.as_deref().unwrap_or(&self.nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub(crate) version: u64,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map(|l| l.nodes.as_slice()).unwrap_or(&[])
    }

    /// Values feeding the splines of the following layers: every layer's
    /// outputs except the last.
    pub fn hidden_outputs(&self) -> impl Iterator<Item = &[f64]> {
        let n = self.layers.len().saturating_sub(1);
        self.layers[..n].iter().map(LayerTrace::outputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<KanLayer>,
    /// Bumped on every mutable access to parameters; traces remember it.
    #[serde(skip)]
    version: u64,
}

impl Network {
    /// Builds and initializes a network. Identical configs (including the
    /// seed) produce bit-identical parameters.
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_layers = config.widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (n_in, n_out) = (config.widths[l], config.widths[l + 1]);
                let edges = (0..n_in * n_out).map(|_| EdgeActivation::init(&grid, &mut rng)).collect();
                let norm = (config.layer_norm && l + 1 < n_layers).then(|| LayerNormParams::identity(n_out));
                KanLayer {
                    n_in,
                    n_out,
                    aggregator: config.aggregators[l],
                    grid: grid.clone(),
                    edges,
                    norm,
                }
            })
            .collect();
        Ok(Network { config, layers, version: 0 })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    /// Mutable layer access. Traces recorded before this call become stale.
    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn set_aggregators(&mut self, aggregators: &[Aggregator]) -> Result<()> {
        if aggregators.len() != self.layers.len() {
            return Err(KanError::config(format!(
                "{} aggregators given for {} layers",
                aggregators.len(),
                self.layers.len()
            )));
        }
        for (layer, &a) in self.layers.iter_mut().zip(aggregators) {
            layer.aggregator = a;
        }
        self.config.aggregators = aggregators.to_vec();
        self.version += 1;
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.config.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.config.widths.last().expect("validated widths")
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(KanLayer::param_count).sum()
    }

    /// Flat parameter vector. Per layer: every edge in row-major order as
    /// `(coeffs.., w_base, w_spline)`, then normalization gain and bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for e in &layer.edges {
                out.extend_from_slice(&e.coeffs);
                out.push(e.w_base);
                out.push(e.w_spline);
            }
            if let Some(norm) = &layer.norm {
                out.extend_from_slice(&norm.gain);
                out.extend_from_slice(&norm.bias);
            }
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(KanError::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for e in &mut layer.edges {
                e.coeffs.iter_mut().for_each(|c| *c = it.next().unwrap());
                e.w_base = it.next().unwrap();
                e.w_spline = it.next().unwrap();
            }
            if let Some(norm) = &mut layer.norm {
                norm.gain.iter_mut().for_each(|g| *g = it.next().unwrap());
                norm.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, false).map(|(out, _)| out)
    }

    pub fn forward(&self, x: &[f64], trace: bool) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
        if x.len() != self.n_inputs() {
            return Err(KanError::invalid(format!(
                "expected {} inputs, got {}",
                self.n_inputs(),
                x.len()
            )));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(KanError::invalid(format!("network input must be finite, got {bad}")));
        }
        let mut traces = trace.then(|| Vec::with_capacity(self.layers.len()));
        let mut current = x.to_vec();
        let mut basis = Vec::new();
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut edge_out = vec![0.0; layer.n_in * layer.n_out];
            layer.edge_outputs(&current, &mut basis, &mut edge_out);
            let nodes: Vec<f64> = edge_out
                .chunks_exact(layer.n_in)
                .map(|row| aggregate::forward_unchecked(row, layer.aggregator))
                .collect();
            let normalized = match &layer.norm {
                Some(norm) if l + 1 < n_layers => Some(apply_norm(norm, &nodes)),
                _ => None,
            };
            let next = normalized.clone().unwrap_or_else(|| nodes.clone());
            if let Some(t) = traces.as_mut() {
                t.push(LayerTrace {
                    inputs: std::mem::take(&mut current),
                    edge_outputs: edge_out,
                    nodes,
                    normalized,
                });
            }
            current = next;
        }
        let trace = traces.map(|layers| ForwardTrace {
            layers,
            version: self.version,
        });
        Ok((current, trace))
    }

    /// Copy in which every Mean layer becomes a Sum layer whose edge functions
    /// are divided by the layer fan-in. Forward outputs are unchanged.
    pub fn mean_as_scaled_sum(&self) -> Network {
        let mut net = self.clone();
        for (l, layer) in net.layers.iter_mut().enumerate() {
            if layer.aggregator == Aggregator::Mean {
                let factor = 1.0 / layer.n_in as f64;
                layer.edges.iter_mut().for_each(|e| e.scale(factor));
                layer.aggregator = Aggregator::Sum;
                net.config.aggregators[l] = Aggregator::Sum;
            }
        }
        net.version += 1;
        net
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| KanError::Serde(e.to_string()))
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(text).map_err(|e| KanError::Serde(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(KanError::Serde(format!(
                "unsupported checkpoint {} v{}",
                doc.format, doc.version
            )));
        }
        doc.network.check_shapes()?;
        Ok(doc.network)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Network::from_checkpoint(&std::fs::read_to_string(path)?)
    }

    fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let grid = self.config.grid()?;
        if self.layers.len() != self.config.widths.len() - 1 {
            return Err(KanError::config("layer count does not match widths"));
        }
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (self.config.widths[l], self.config.widths[l + 1]);
            let norm_ok = match &layer.norm {
                Some(n) => self.config.layer_norm && l + 1 < n_layers && n.gain.len() == n_out && n.bias.len() == n_out,
                None => !(self.config.layer_norm && l + 1 < n_layers),
            };
            if layer.n_in != n_in
                || layer.n_out != n_out
                || layer.grid != grid
                || layer.aggregator != self.config.aggregators[l]
                || layer.edges.len() != n_in * n_out
                || layer.edges.iter().any(|e| e.coeffs.len() != grid.basis_count())
                || !norm_ok
            {
                return Err(KanError::config(format!("layer {l} does not match the network config")));
            }
        }
        Ok(())
    }
}

fn apply_norm(norm: &LayerNormParams, nodes: &[f64]) -> Vec<f64> {
    let (z, _) = standardize(nodes, norm.eps);
    z.iter()
        .zip(&norm.gain)
        .zip(&norm.bias)
        .map(|((z, g), b)| z * g + b)
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    network: Network,
}

/// Running count of hidden-layer values inside `[lo, hi]` (inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceTally {
    pub lo: f64,
    pub hi: f64,
    pub inside: Vec<u64>,
    pub total: Vec<u64>,
}

impl AdherenceTally {
    pub fn new(lo: f64, hi: f64, hidden_layers: usize) -> Self {
        AdherenceTally {
            lo,
            hi,
            inside: vec![0; hidden_layers],
            total: vec![0; hidden_layers],
        }
    }

    pub fn record(&mut self, trace: &ForwardTrace) -> Result<()> {
        let hidden = trace.layers.len().saturating_sub(1);
        if hidden != self.inside.len() {
            return Err(KanError::invalid(format!(
                "trace has {hidden} hidden layers, tally expects {}",
                self.inside.len()
            )));
        }
        for (l, values) in trace.hidden_outputs().enumerate() {
            self.record_values(l, values);
        }
        Ok(())
    }

    pub fn record_values(&mut self, layer: usize, values: &[f64]) {
        let (lo, hi) = (self.lo, self.hi);
        self.inside[layer] += values.iter().filter(|&&v| lo <= v && v <= hi).count() as u64;
        self.total[layer] += values.len() as u64;
    }

    pub fn merge(&mut self, other: &AdherenceTally) {
        for l in 0..self.inside.len() {
            self.inside[l] += other.inside[l];
            self.total[l] += other.total[l];
        }
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.inside
            .iter()
            .zip(&self.total)
            .map(|(&i, &t)| if t == 0 { f64::NAN } else { i as f64 / t as f64 })
            .collect()
    }
}

/// Fraction of hidden-node outputs (post-normalization) within `[lo, hi]`,
/// pooled over all traces, one entry per hidden layer.
pub fn range_adherence(traces: &[ForwardTrace], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let first = traces
        .first()
        .ok_or_else(|| KanError::invalid("no traces to measure"))?;
    let hidden = first.layers.len().saturating_sub(1);
    if hidden == 0 {
        return Err(KanError::invalid("traces have no hidden layer"));
    }
    let mut tally = AdherenceTally::new(lo, hi, hidden);
    for t in traces {
        tally.record(t)?;
    }
    Ok(tally.fractions())
}
