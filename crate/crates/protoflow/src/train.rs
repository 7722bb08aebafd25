//! Joint training of the flow network, prototype means, and scoring heads.
//!
//! One iteration samples a normal and an anomaly batch, draws a shared
//! timestep, builds the total loss on a tape, and applies one
//! decoupled-weight-decay Adam update to every trainable tensor:
//!
//! `L = L_local + L_pooled + L_residual + L_global + L_flow_n + L_flow_a
//!    + lambda * L_mi`
//!
//! Scoring losses run over the combined batch; the flow losses split by
//! class; the mutual-information term sees transformed normals only.

use crate::error::{Error, Result};
use crate::flow::{
    loss_flow_anomaly_on, loss_flow_normal_on, EndpointSource, FlowDraw, FlowModel, FlowVars,
};
use crate::gmm::GmPrototype;
use crate::mutual_info::{mutual_info_loss_on, MarginalSource, MutualInfoReport};
use crate::nn::MlpVars;
use crate::reverse::psi_on;
use crate::rng::derive_rng;
use crate::scoring::{
    binary_loss_on, raw_global_calibrated_on, raw_local_on, raw_normal_on, raw_residual_on,
    FeatureSample, HeadVars, ScoringHeads,
};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Numeric precision profile. Only the 64-bit profile is provided; the
/// field exists so configurations state it explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

/// Hyperparameters and mode flags for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Mixture components.
    pub k: usize,
    /// Weight of the mutual-information regularizer.
    pub mi_weight: f64,
    /// Fraction of patch scores aggregated by the local head.
    pub top_fraction: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub normal_batch: usize,
    pub anomaly_batch: usize,
    pub seed: u64,
    /// Euler steps of the forward transport map.
    pub psi_steps: usize,
    /// Lower bound on the anomaly repulsion term.
    pub repulsion_clip: f64,
    /// Lower bound on sampled times.
    pub t_min: f64,
    /// Hidden layer sizes of the velocity network.
    pub hidden: Vec<usize>,
    /// Hidden layer sizes of the scoring heads.
    pub head_hidden: Vec<usize>,
    pub precision: Precision,
    /// Add the regularizer with the sign as printed in its entropy
    /// decomposition (minimizes the MI estimate) instead of the default
    /// intent-consistent sign.
    pub literal_mi_sign: bool,
    /// Compute the marginal entropy from batch responsibilities.
    pub batch_marginal_mi: bool,
    /// Draw one timestep per sample instead of one per iteration.
    pub per_sample_t: bool,
    /// Single-step transport map.
    pub one_step_psi: bool,
    pub endpoint_source: EndpointSource,
    /// Checkpoint every N steps (0 = never); honored by callers that pass
    /// an observer to [`train_with`].
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 32,
            mi_weight: 0.1,
            top_fraction: 0.10,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            epochs: 50,
            iterations_per_epoch: 20,
            normal_batch: 32,
            anomaly_batch: 32,
            seed: 0,
            psi_steps: 8,
            repulsion_clip: 50.0,
            t_min: 1e-3,
            hidden: vec![64, 64],
            head_hidden: vec![32],
            precision: Precision::F64,
            literal_mi_sign: false,
            batch_marginal_mi: false,
            per_sample_t: false,
            one_step_psi: false,
            endpoint_source: EndpointSource::Prior,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k as f64),
            ("learning_rate", self.learning_rate),
            ("normal_batch", self.normal_batch as f64),
            ("anomaly_batch", self.anomaly_batch as f64),
            ("psi_steps", self.psi_steps as f64),
            ("repulsion_clip", self.repulsion_clip),
            ("t_min", self.t_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.mi_weight < 0.0 {
            return Err(Error::Config(format!(
                "mi_weight must be nonnegative, got {}",
                self.mi_weight
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "top_fraction must lie in (0, 1], got {}",
                self.top_fraction
            )));
        }
        if self.t_min >= 1.0 {
            return Err(Error::Config(format!("t_min must be below 1, got {}", self.t_min)));
        }
        Ok(())
    }

    pub fn marginal_source(&self) -> MarginalSource {
        if self.batch_marginal_mi {
            MarginalSource::BatchAverage
        } else {
            MarginalSource::PrototypeWeights
        }
    }
}

/// Adaptive moment estimation with decoupled weight decay
/// (betas 0.9 / 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before updating the parameter tensors.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter tensor in place. `idx` identifies the slot
    /// whose first/second moments belong to this tensor.
    pub fn update(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor) {
        while self.m.len() <= idx {
            self.m.push(Tensor::zeros(param.shape().to_vec()));
            self.v.push(Tensor::zeros(param.shape().to_vec()));
        }
        debug_assert_eq!(self.m[idx].shape(), param.shape());
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let m = self.m[idx].data_mut();
        let v = self.v[idx].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            let g = grad.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            p[j] -= lr * wd * p[j];
        }
    }
}

/// Visits every trainable tensor in the canonical order: velocity network
/// (weight, bias per layer), prototype means, then the heads.
pub fn for_each_trainable(
    model: &mut FlowModel,
    heads: &mut ScoringHeads,
    f: &mut dyn FnMut(&mut Tensor),
) {
    model.velocity_net.for_each_param_mut(f);
    f(model.prototype.means_mut());
    heads.for_each_param_mut(f);
}

/// Clones every trainable tensor in canonical order.
pub fn collect_trainable(model: &FlowModel, heads: &ScoringHeads) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.velocity_net.for_each_param(&mut |p| out.push(p.clone()));
    out.push(model.prototype.means().clone());
    heads.for_each_param(&mut |p| out.push(p.clone()));
    out
}

/// Tape registration of all trainables, with the flat var list in
/// canonical order.
pub struct TrainableVars {
    pub flow: FlowVars,
    pub heads: HeadVars,
    pub all: Vec<Var>,
}

pub fn register_trainable(
    tape: &mut Tape,
    model: &FlowModel,
    heads: &ScoringHeads,
) -> TrainableVars {
    let flow = model.flow_vars(tape);
    let hv = heads.vars(tape);
    let all = flatten_vars(&flow, &hv);
    TrainableVars {
        flow,
        heads: hv,
        all,
    }
}

fn flatten_mlp(vars: &MlpVars, out: &mut Vec<Var>) {
    for l in 0..vars.weights.len() {
        out.push(vars.weights[l]);
        out.push(vars.biases[l]);
    }
}

fn flatten_vars(flow: &FlowVars, heads: &HeadVars) -> Vec<Var> {
    let mut all = Vec::new();
    flatten_mlp(&flow.net, &mut all);
    all.push(flow.proto_means);
    flatten_mlp(&heads.patch, &mut all);
    flatten_mlp(&heads.pooled, &mut all);
    flatten_mlp(&heads.residual, &mut all);
    all.push(heads.gain);
    all.push(heads.bias);
    all
}

/// Rebuilds the structured var handles from a flat canonical slice (the
/// layout produced by [`register_trainable`] / [`collect_trainable`]).
pub fn trainable_vars_from_slice(
    model: &FlowModel,
    heads: &ScoringHeads,
    vs: &[Var],
) -> TrainableVars {
    let mut cursor = 0usize;
    let take_mlp = |n_layers: usize, cursor: &mut usize| {
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            weights.push(vs[*cursor]);
            biases.push(vs[*cursor + 1]);
            *cursor += 2;
        }
        MlpVars { weights, biases }
    };
    let net = take_mlp(model.velocity_net.sizes().len() - 1, &mut cursor);
    let proto_means = vs[cursor];
    cursor += 1;
    let patch = take_mlp(heads.patch_head.sizes().len() - 1, &mut cursor);
    let pooled = take_mlp(heads.pooled_head.sizes().len() - 1, &mut cursor);
    let residual = take_mlp(heads.residual_head.sizes().len() - 1, &mut cursor);
    let gain = vs[cursor];
    let bias = vs[cursor + 1];
    let flow = FlowVars { net, proto_means };
    let hv = HeadVars {
        patch,
        pooled,
        residual,
        gain,
        bias,
    };
    let all = flatten_vars(&flow, &hv);
    TrainableVars {
        flow,
        heads: hv,
        all,
    }
}

/// Extracts gradients in canonical order.
pub fn collect_gradients(tape: &Tape, grads: &Gradients, tv: &TrainableVars) -> Vec<Tensor> {
    tv.all.iter().map(|&v| grads.get(tape, v)).collect()
}

/// One optimizer step over all trainables. A non-finite gradient aborts
/// the step with the state unchanged.
pub fn optimizer_step(
    opt: &mut AdamW,
    model: &mut FlowModel,
    heads: &mut ScoringHeads,
    grads: &[Tensor],
) -> Result<()> {
    let mut count = 0usize;
    for_each_trainable(model, heads, &mut |_| count += 1);
    if grads.len() != count {
        return Err(Error::ContractViolation(format!(
            "expected {count} gradient tensors, got {}",
            grads.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFault("non-finite gradient".into()));
    }
    opt.begin_step();
    let mut idx = 0usize;
    for_each_trainable(model, heads, &mut |p| {
        opt.update(idx, p, &grads[idx]);
        idx += 1;
    });
    Ok(())
}

/// Per-term loss values of one iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub local: f64,
    pub pooled: f64,
    pub residual: f64,
    pub global: f64,
    pub flow_normal: f64,
    pub flow_anomaly: f64,
    pub mi: MutualInfoReport,
    pub total: f64,
    /// Batch-averaged responsibilities of transformed normal features.
    pub usage: Vec<f64>,
}

/// Pre-drawn randomness for one iteration.
pub struct BatchDraws {
    pub normal: Vec<FlowDraw>,
    pub anomaly: Vec<FlowDraw>,
}

impl BatchDraws {
    /// Draws times and endpoints for both batches. With `shared_t` one
    /// timestep is drawn first and reused everywhere.
    pub fn sample<R: Rng>(
        cfg: &TrainConfig,
        proto: &GmPrototype,
        normal: &[&FeatureSample],
        anomaly: &[&FeatureSample],
        rng: &mut R,
    ) -> Result<Self> {
        let shared_t = if cfg.per_sample_t {
            None
        } else {
            Some(rng.gen_range(cfg.t_min..1.0))
        };
        let draw = |s: &FeatureSample, rng: &mut R| {
            FlowDraw::sample(
                proto,
                &s.pooled,
                cfg.endpoint_source,
                shared_t,
                cfg.t_min,
                rng,
            )
        };
        let normal = normal
            .iter()
            .map(|s| draw(s, rng))
            .collect::<Result<Vec<_>>>()?;
        let anomaly = anomaly
            .iter()
            .map(|s| draw(s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { normal, anomaly })
    }
}

/// Tape nodes of the individual loss terms.
pub struct LossTerms {
    pub local: Var,
    pub pooled: Var,
    pub residual: Var,
    pub global: Var,
    pub flow_normal: Var,
    pub flow_anomaly: Var,
    /// The regularizer before weighting and sign selection.
    pub mi: Var,
    pub total: Var,
}

/// Builds the total loss on the tape and reports each term.
pub fn total_loss_on(
    tape: &mut Tape,
    model: &FlowModel,
    heads: &ScoringHeads,
    tv: &TrainableVars,
    normal: &[&FeatureSample],
    anomaly: &[&FeatureSample],
    draws: &BatchDraws,
    cfg: &TrainConfig,
) -> Result<(LossTerms, LossReport)> {
    if normal.is_empty() {
        return Err(Error::RejectedInput("empty normal batch".into()));
    }
    if anomaly.is_empty() {
        return Err(Error::RejectedInput("empty anomaly batch".into()));
    }
    if normal.iter().any(|s| s.label != 0) {
        return Err(Error::ContractViolation(
            "anomalous sample in the normal batch".into(),
        ));
    }
    if anomaly.iter().any(|s| s.label != 1) {
        return Err(Error::ContractViolation(
            "normal sample in the anomaly batch".into(),
        ));
    }

    let proto = &model.prototype;
    let log_w = proto.log_weights().to_vec();
    let std = proto.std();

    // flow-matching terms on pooled features
    let normal_pooled: Vec<&[f64]> = normal.iter().map(|s| s.pooled.as_slice()).collect();
    let anomaly_pooled: Vec<&[f64]> = anomaly.iter().map(|s| s.pooled.as_slice()).collect();
    let flow_n = loss_flow_normal_on(tape, model, &tv.flow, &normal_pooled, &draws.normal)?;
    let flow_a = loss_flow_anomaly_on(
        tape,
        model,
        &tv.flow,
        &anomaly_pooled,
        &draws.anomaly,
        cfg.repulsion_clip,
    )?;

    // scoring losses over the combined batch; transport each pooled
    // feature once and reuse it for the global and residual heads
    let mut l_local = Vec::new();
    let mut l_pooled = Vec::new();
    let mut l_residual = Vec::new();
    let mut l_global = Vec::new();
    let mut normal_psi = Vec::with_capacity(normal.len());
    for (sample, is_normal) in normal
        .iter()
        .map(|s| (*s, true))
        .chain(anomaly.iter().map(|s| (*s, false)))
    {
        let pooled = tape.leaf_vector(&sample.pooled);
        let psi_y = psi_on(model, tape, &tv.flow.net, pooled);
        if is_normal {
            normal_psi.push(psi_y);
        }

        let nll = tape.gm_nll_fixed_w(tv.flow.proto_means, psi_y, &log_w, std);
        let raw_g = raw_global_calibrated_on(tape, &tv.heads, nll);
        l_global.push(binary_loss_on(tape, raw_g, sample.label));

        let raw_a = raw_local_on(tape, heads, &tv.heads, sample, cfg.top_fraction)?;
        l_local.push(binary_loss_on(tape, raw_a, sample.label));

        let raw_n = raw_normal_on(tape, heads, &tv.heads, sample);
        l_pooled.push(binary_loss_on(tape, raw_n, sample.label));

        let raw_r = raw_residual_on(tape, model, heads, &tv.heads, tv.flow.proto_means, psi_y);
        l_residual.push(binary_loss_on(tape, raw_r, sample.label));
    }
    let n_total = (normal.len() + anomaly.len()) as f64;
    let mean_of = |tape: &mut Tape, terms: &[Var]| {
        let s = tape.add_n(terms);
        tape.scale(s, 1.0 / n_total)
    };
    let m_local = mean_of(tape, &l_local);
    let m_pooled = mean_of(tape, &l_pooled);
    let m_residual = mean_of(tape, &l_residual);
    let m_global = mean_of(tape, &l_global);

    // regularizer on transformed normals only
    let (mi_loss, mi_report) = mutual_info_loss_on(
        tape,
        proto,
        tv.flow.proto_means,
        &normal_psi,
        cfg.marginal_source(),
    )?;
    let mi_sign = if cfg.literal_mi_sign { -1.0 } else { 1.0 };
    let mi_term = tape.scale(mi_loss, mi_sign * cfg.mi_weight);

    let base = tape.add_n(&[m_local, m_pooled, m_residual, m_global, flow_n, flow_a]);
    let total = tape.add(base, mi_term);

    // usage histogram from the current values
    let mut usage = vec![0.0; proto.k()];
    for &y in &normal_psi {
        let r = proto.responsibilities(tape.value(y).data())?;
        for (u, p) in usage.iter_mut().zip(r.values()) {
            *u += p;
        }
    }
    usage.iter_mut().for_each(|u| *u /= normal_psi.len() as f64);

    let report = LossReport {
        local: tape.item(m_local),
        pooled: tape.item(m_pooled),
        residual: tape.item(m_residual),
        global: tape.item(m_global),
        flow_normal: tape.item(flow_n),
        flow_anomaly: tape.item(flow_a),
        mi: mi_report,
        total: tape.item(total),
        usage,
    };
    let terms = LossTerms {
        local: m_local,
        pooled: m_pooled,
        residual: m_residual,
        global: m_global,
        flow_normal: flow_n,
        flow_anomaly: flow_a,
        mi: mi_loss,
        total,
    };
    Ok((terms, report))
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_local: f64,
    pub loss_pooled: f64,
    pub loss_residual: f64,
    pub loss_global: f64,
    pub loss_flow_normal: f64,
    pub loss_flow_anomaly: f64,
    pub mi_loss: f64,
    pub mi_estimate: f64,
    pub usage: Vec<f64>,
}

impl MetricsRecord {
    fn from_report(step: u64, epoch: usize, iteration: usize, r: &LossReport) -> Self {
        Self {
            step,
            epoch,
            iteration,
            loss_total: r.total,
            loss_local: r.local,
            loss_pooled: r.pooled,
            loss_residual: r.residual,
            loss_global: r.global,
            loss_flow_normal: r.flow_normal,
            loss_flow_anomaly: r.flow_anomaly,
            mi_loss: r.mi.loss,
            mi_estimate: r.mi.mi_estimate,
            usage: r.usage.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.loss_total,
            self.loss_local,
            self.loss_pooled,
            self.loss_residual,
            self.loss_global,
            self.loss_flow_normal,
            self.loss_flow_anomaly,
            self.mi_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A finished (or aborted) training run.
pub struct TrainOutput {
    pub model: FlowModel,
    pub heads: ScoringHeads,
    pub metrics: Vec<MetricsRecord>,
    /// Step at which a numeric fault stopped training, if any; the model
    /// and heads then hold the last valid state.
    pub aborted_at: Option<u64>,
}

/// Trains with the fixed epoch x iteration budget from the config.
pub fn train(
    cfg: &TrainConfig,
    normal: &[FeatureSample],
    anomaly: &[FeatureSample],
) -> Result<TrainOutput> {
    train_with(cfg, normal, anomaly, |_, _, _| Ok(()))
}

/// Like [`train`] but invokes `observer(model, heads, record)` after every
/// completed iteration (for metrics streaming and checkpoints).
pub fn train_with<F>(
    cfg: &TrainConfig,
    normal: &[FeatureSample],
    anomaly: &[FeatureSample],
    mut observer: F,
) -> Result<TrainOutput>
where
    F: FnMut(&FlowModel, &ScoringHeads, &MetricsRecord) -> Result<()>,
{
    cfg.validate()?;
    if anomaly.is_empty() {
        return Err(Error::RejectedInput(
            "training needs at least one anomalous sample".into(),
        ));
    }
    if normal.iter().any(|s| s.label != 0) {
        return Err(Error::ContractViolation(
            "normal training set contains an anomalous label".into(),
        ));
    }
    if anomaly.iter().any(|s| s.label != 1) {
        return Err(Error::ContractViolation(
            "anomaly training set contains a normal label".into(),
        ));
    }

    let pooled: Vec<Vec<f64>> = normal.iter().map(|s| s.pooled.clone()).collect();
    let prototype = GmPrototype::kmeanspp_init(&pooled, cfg.k, cfg.seed)?;
    let dim = prototype.dim();

    let mut init_rng = derive_rng(cfg.seed, 1, 0);
    let mut model = FlowModel::new(prototype, &cfg.hidden, cfg.psi_steps, &mut init_rng);
    model.t_min = cfg.t_min;
    model.one_step_psi = cfg.one_step_psi;
    let mut heads = ScoringHeads::new(dim, dim, &cfg.head_hidden, &mut init_rng);

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut loop_rng = derive_rng(cfg.seed, 2, 0);
    let mut tape = Tape::new();
    let mut metrics = Vec::with_capacity(cfg.epochs * cfg.iterations_per_epoch);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        for iteration in 0..cfg.iterations_per_epoch {
            step += 1;
            let normal_batch: Vec<&FeatureSample> = (0..cfg.normal_batch)
                .map(|_| &normal[loop_rng.gen_range(0..normal.len())])
                .collect();
            let anomaly_batch: Vec<&FeatureSample> = (0..cfg.anomaly_batch)
                .map(|_| &anomaly[loop_rng.gen_range(0..anomaly.len())])
                .collect();
            let draws = BatchDraws::sample(
                cfg,
                &model.prototype,
                &normal_batch,
                &anomaly_batch,
                &mut loop_rng,
            )?;

            tape.reset();
            let tv = register_trainable(&mut tape, &model, &heads);
            let (terms, report) = total_loss_on(
                &mut tape,
                &model,
                &heads,
                &tv,
                &normal_batch,
                &anomaly_batch,
                &draws,
                cfg,
            )?;
            let record = MetricsRecord::from_report(step, epoch, iteration, &report);
            if !record.all_finite() {
                metrics.push(record);
                return Ok(TrainOutput {
                    model,
                    heads,
                    metrics,
                    aborted_at: Some(step),
                });
            }

            let grads = tape.backward(terms.total)?;
            let grad_tensors = collect_gradients(&tape, &grads, &tv);
            match optimizer_step(&mut opt, &mut model, &mut heads, &grad_tensors) {
                Ok(()) => {}
                Err(Error::NumericFault(_)) => {
                    metrics.push(record);
                    return Ok(TrainOutput {
                        model,
                        heads,
                        metrics,
                        aborted_at: Some(step),
                    });
                }
                Err(e) => return Err(e),
            }
            observer(&model, &heads, &record)?;
            metrics.push(record);
        }
    }

    Ok(TrainOutput {
        model,
        heads,
        metrics,
        aborted_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tape::finite_diff_check;
    use rand::Rng;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            k: 2,
            hidden: vec![4],
            head_hidden: vec![4],
            normal_batch: 3,
            anomaly_batch: 2,
            epochs: 2,
            iterations_per_epoch: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn synthetic_samples(n: usize, dim: usize, label: u8, offset: f64, seed: u64) -> Vec<FeatureSample> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let rows: Vec<f64> = (0..3 * dim)
                    .map(|_| rng.gen_range(-1.0..1.0) + offset)
                    .collect();
                FeatureSample::new(
                    i as u64,
                    Tensor::matrix(3, dim, rows).unwrap(),
                    label,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn adamw_leaves_params_alone_without_gradients_or_decay() {
        let mut opt = AdamW::new(1e-2, 0.0);
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        opt.begin_step();
        opt.update(0, &mut p, &Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adamw_decay_scales_params_without_gradients() {
        let (lr, wd) = (1e-2, 0.5);
        let mut opt = AdamW::new(lr, wd);
        let mut p = Tensor::vector(vec![2.0, -4.0]);
        opt.begin_step();
        opt.update(0, &mut p, &Tensor::vector(vec![0.0, 0.0]));
        assert!((p.data()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_a_reference_recurrence_on_a_scalar() {
        let (lr, wd, g) = (1e-2, 0.1, 0.3);
        let mut opt = AdamW::new(lr, wd);
        let mut p = Tensor::scalar(1.5);

        // independent reference implementation of the recurrences
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.5f64);
        for t in 1..=25 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            x -= lr * wd * x;

            opt.begin_step();
            opt.update(0, &mut p, &Tensor::scalar(g));
            assert!((p.item() - x).abs() < 1e-14, "step {t}: {} vs {x}", p.item());
        }
    }

    #[test]
    fn optimizer_step_aborts_on_non_finite_gradients() {
        let cfg = tiny_config();
        let normal = synthetic_samples(6, 2, 0, 0.0, 1);
        let anomaly = synthetic_samples(2, 2, 1, 3.0, 2);
        let out = train(&TrainConfig { epochs: 0, ..cfg }, &normal, &anomaly).unwrap();
        let mut model = out.model;
        let mut heads = out.heads;
        let before = collect_trainable(&model, &heads);

        let mut grads: Vec<Tensor> = before.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        grads[0].data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(1e-3, 0.0);
        let err = optimizer_step(&mut opt, &mut model, &mut heads, &grads);
        assert!(matches!(err, Err(Error::NumericFault(_))));
        let after = collect_trainable(&model, &heads);
        assert_eq!(before, after);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn zero_epochs_returns_initialized_but_untrained_state() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let normal = synthetic_samples(8, 2, 0, 0.0, 3);
        let anomaly = synthetic_samples(2, 2, 1, 3.0, 4);
        let out = train(&cfg, &normal, &anomaly).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.model.k(), cfg.k);
        // untrained heads emit exactly zero
        let s = &normal[0];
        assert_eq!(crate::scoring::score_normal(&out.heads, s).unwrap(), 0.0);
        // prototype is the k-means fit, not the uninformed default
        assert!(out
            .model
            .prototype
            .means()
            .data()
            .iter()
            .any(|&m| m != 0.0));
    }

    #[test]
    fn fresh_model_scoring_losses_start_at_log_two() {
        let cfg = tiny_config();
        let normal = synthetic_samples(6, 2, 0, 0.0, 5);
        let anomaly = synthetic_samples(2, 2, 1, 3.0, 6);
        let out = train(&TrainConfig { epochs: 0, ..cfg.clone() }, &normal, &anomaly).unwrap();

        let normal_refs: Vec<&FeatureSample> = normal.iter().take(3).collect();
        let anomaly_refs: Vec<&FeatureSample> = anomaly.iter().take(2).collect();
        let mut rng = rng_from_seed(7);
        let draws =
            BatchDraws::sample(&cfg, &out.model.prototype, &normal_refs, &anomaly_refs, &mut rng)
                .unwrap();
        let mut tape = Tape::new();
        let tv = register_trainable(&mut tape, &out.model, &out.heads);
        let (_, report) = total_loss_on(
            &mut tape,
            &out.model,
            &out.heads,
            &tv,
            &normal_refs,
            &anomaly_refs,
            &draws,
            &cfg,
        )
        .unwrap();
        let ln2 = 2f64.ln();
        for (name, v) in [
            ("local", report.local),
            ("pooled", report.pooled),
            ("residual", report.residual),
            ("global", report.global),
        ] {
            assert!((v - ln2).abs() < 1e-12, "{name} = {v}");
        }
    }

    #[test]
    fn zero_mi_weight_makes_the_total_the_plain_sum() {
        let cfg = TrainConfig {
            mi_weight: 0.0,
            ..tiny_config()
        };
        let normal = synthetic_samples(6, 2, 0, 0.0, 8);
        let anomaly = synthetic_samples(2, 2, 1, 3.0, 9);
        let out = train(&TrainConfig { epochs: 0, ..cfg.clone() }, &normal, &anomaly).unwrap();

        let normal_refs: Vec<&FeatureSample> = normal.iter().take(4).collect();
        let anomaly_refs: Vec<&FeatureSample> = anomaly.iter().take(2).collect();
        let mut rng = rng_from_seed(10);
        let draws =
            BatchDraws::sample(&cfg, &out.model.prototype, &normal_refs, &anomaly_refs, &mut rng)
                .unwrap();
        let mut tape = Tape::new();
        let tv = register_trainable(&mut tape, &out.model, &out.heads);
        let (_, report) = total_loss_on(
            &mut tape,
            &out.model,
            &out.heads,
            &tv,
            &normal_refs,
            &anomaly_refs,
            &draws,
            &cfg,
        )
        .unwrap();
        let sum = report.local
            + report.pooled
            + report.residual
            + report.global
            + report.flow_normal
            + report.flow_anomaly;
        assert_eq!(report.total, sum);
    }

    #[test]
    fn total_loss_passes_the_finite_difference_check() {
        let cfg = TrainConfig {
            psi_steps: 4,
            ..tiny_config()
        };
        let normal = synthetic_samples(4, 2, 0, 0.0, 11);
        let anomaly = synthetic_samples(2, 2, 1, 2.0, 12);
        let out = train(&TrainConfig { epochs: 0, ..cfg.clone() }, &normal, &anomaly).unwrap();
        let mut model = out.model;
        let mut heads = out.heads;
        // move off the zero-output initialization so no gradient component
        // is structurally zero
        let mut rng = rng_from_seed(13);
        model.velocity_net.init_fan_in(&mut rng, false);
        heads.patch_head.init_fan_in(&mut rng, false);
        heads.pooled_head.init_fan_in(&mut rng, false);
        heads.residual_head.init_fan_in(&mut rng, false);
        heads.global_gain.data_mut()[0] = 0.3;
        heads.global_bias.data_mut()[0] = -0.1;

        let normal_refs: Vec<&FeatureSample> = normal.iter().take(2).collect();
        let anomaly_refs: Vec<&FeatureSample> = anomaly.iter().take(2).collect();
        let draws =
            BatchDraws::sample(&cfg, &model.prototype, &normal_refs, &anomaly_refs, &mut rng)
                .unwrap();

        let params = collect_trainable(&model, &heads);
        let err = finite_diff_check(&params, 1e-5, |tape, vs| {
            let tv = trainable_vars_from_slice(&model, &heads, vs);
            let (terms, _) = total_loss_on(
                tape,
                &model,
                &heads,
                &tv,
                &normal_refs,
                &anomaly_refs,
                &draws,
                &cfg,
            )?;
            Ok(terms.total)
        })
        .unwrap();
        assert!(err < 1e-4, "fd error {err}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = tiny_config();
        let normal = synthetic_samples(8, 2, 0, 0.0, 14);
        let anomaly = synthetic_samples(3, 2, 1, 3.0, 15);
        let a = train(&cfg, &normal, &anomaly).unwrap();
        let b = train(&cfg, &normal, &anomaly).unwrap();
        assert_eq!(collect_trainable(&a.model, &a.heads), collect_trainable(&b.model, &b.heads));
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.loss_total.to_bits(), rb.loss_total.to_bits());
        }
        assert!(a.aborted_at.is_none());
    }

    #[test]
    fn every_logged_loss_is_finite_on_a_healthy_run() {
        let cfg = tiny_config();
        let normal = synthetic_samples(8, 2, 0, 0.0, 16);
        let anomaly = synthetic_samples(3, 2, 1, 3.0, 17);
        let out = train(&cfg, &normal, &anomaly).unwrap();
        assert_eq!(out.metrics.len(), cfg.epochs * cfg.iterations_per_epoch);
        for r in &out.metrics {
            assert!(r.all_finite(), "non-finite loss at step {}", r.step);
            let sum: f64 = r.usage.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mislabeled_batches_are_contract_violations() {
        let cfg = tiny_config();
        let normal = synthetic_samples(6, 2, 0, 0.0, 18);
        let anomaly = synthetic_samples(2, 2, 1, 3.0, 19);
        assert!(matches!(
            train(&cfg, &anomaly, &normal),
            Err(Error::ContractViolation(_))
        ));
        assert!(train(&cfg, &normal, &[]).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_config();
        cfg.mi_weight = -0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.top_fraction = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.t_min = 1.5;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }
}
