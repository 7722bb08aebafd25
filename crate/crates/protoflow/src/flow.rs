//! The Gaussian-mixture velocity field, the linear noise schedule, path
//! interpolation, and the flow-matching losses for normal and anomalous
//! samples.
//!
//! On the linear schedule the path endpoints determine the velocity
//! exactly: `u = z_T - z_0`, and `(z_t - z_0) / sigma_t = u` for every
//! `t > 0`.

use crate::error::{Error, Result};
use crate::gmm::GmPrototype;
use crate::nn::{Activation, Mlp, MlpVars};
use crate::tape::{gm_nll_value, log_softmax, softmax, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Default lower bound on sampled times; keeps `sigma_t` away from zero.
pub const T_MIN_DEFAULT: f64 = 1e-3;

/// Default clip bound for the anomaly repulsion term.
pub const B_REP_DEFAULT: f64 = 50.0;

/// The linear noise schedule `alpha_t = 1 - t`, `sigma_t = t` on `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoiseSchedule;

impl NoiseSchedule {
    /// `(alpha_t, sigma_t)`; rejects times outside `[0, 1]`.
    pub fn at(self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::RejectedInput(format!("time {t} outside [0, 1]")));
        }
        Ok((1.0 - t, t))
    }
}

/// `(alpha_t, sigma_t)` under the linear schedule.
pub fn schedule_at(t: f64) -> Result<(f64, f64)> {
    NoiseSchedule.at(t)
}

/// Convex path point `(1 - t) z0 + t zT`.
pub fn interpolate(z0: &[f64], z_end: &[f64], t: f64) -> Result<Vec<f64>> {
    if z0.len() != z_end.len() {
        return Err(Error::RejectedInput(format!(
            "interpolation endpoints have dimensions {} and {}",
            z0.len(),
            z_end.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::RejectedInput(format!("time {t} outside [0, 1]")));
    }
    Ok(z0
        .iter()
        .zip(z_end)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// Path velocity on the linear schedule: `z_end - z0`.
pub fn true_velocity(z0: &[f64], z_end: &[f64]) -> Vec<f64> {
    debug_assert_eq!(z0.len(), z_end.len());
    z0.iter().zip(z_end).map(|(a, b)| b - a).collect()
}

/// One conditional velocity prediction: a Gaussian mixture over velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct GmVelocity {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    /// `[k, dim]` predicted component means.
    means: Tensor,
    std: f64,
}

impl GmVelocity {
    pub fn new(weights: Vec<f64>, means: Tensor, std: f64) -> Result<Self> {
        let k = weights.len();
        if means.shape().len() != 2 || means.shape()[0] != k {
            return Err(Error::RejectedInput(format!(
                "means shape {:?} does not match {k} weights",
                means.shape()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::RejectedInput(format!(
                "velocity weights must lie on the simplex (sum = {sum})"
            )));
        }
        if !std.is_finite() || std <= 0.0 {
            return Err(Error::RejectedInput(format!("std must be positive, got {std}")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            means,
            std,
        })
    }

    fn from_logits(logits: &[f64], means: Tensor, std: f64) -> Self {
        let log_weights = log_softmax(logits);
        let weights = softmax(logits);
        Self {
            weights,
            log_weights,
            means,
            std,
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn mean_row(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.means.data()[k * d..(k + 1) * d]
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// `sum_k w_k mu_k`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (ki, w) in self.weights.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * self.means.data()[ki * d + j];
            }
        }
        out
    }
}

/// `-log sum_k w_k N(u; mu_k, s^2 I)` in log-sum-exp form.
pub fn gm_nll(pred: &GmVelocity, u: &[f64]) -> Result<f64> {
    if u.len() != pred.dim() {
        return Err(Error::RejectedInput(format!(
            "velocity has dimension {}, prediction has {}",
            u.len(),
            pred.dim()
        )));
    }
    Ok(gm_nll_value(
        &pred.log_weights,
        pred.means.data(),
        u,
        pred.std,
    ))
}

/// Where training endpoints `z_T` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointSource {
    /// Draw from the Gaussian-mixture prototype prior (default).
    #[default]
    Prior,
    /// Pure standard Gaussian noise.
    Gaussian,
    /// The prototype mean the sample is currently assigned to.
    AssignedMean,
}

/// The random choices behind one flow-matching term. Endpoints that depend
/// on the prototype means are kept in factored form so a training step can
/// rebuild `z_T` differentiably from the current means.
#[derive(Debug, Clone)]
pub struct FlowDraw {
    pub t: f64,
    pub endpoint: EndpointDraw,
}

#[derive(Debug, Clone)]
pub enum EndpointDraw {
    /// `z_T = mu_component + std * noise`.
    Component { component: usize, noise: Vec<f64> },
    /// `z_T = point` (prototype-independent).
    Free { point: Vec<f64> },
    /// `z_T = mu_component`.
    Assigned { component: usize },
}

impl FlowDraw {
    /// Samples one draw for the sample `z0`. `t_shared` fixes the time
    /// (batch-shared mode); otherwise `t ~ U(t_min, 1)`.
    pub fn sample<R: Rng>(
        proto: &GmPrototype,
        z0: &[f64],
        source: EndpointSource,
        t_shared: Option<f64>,
        t_min: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let t = match t_shared {
            Some(t) => t,
            None => rng.gen_range(t_min..1.0),
        };
        let endpoint = match source {
            EndpointSource::Prior => {
                let component = proto.draw_component(rng);
                let noise = (0..proto.dim())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                EndpointDraw::Component { component, noise }
            }
            EndpointSource::Gaussian => {
                let point = (0..proto.dim())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                EndpointDraw::Free { point }
            }
            EndpointSource::AssignedMean => {
                let component = proto.responsibilities(z0)?.argmax();
                EndpointDraw::Assigned { component }
            }
        };
        Ok(Self { t, endpoint })
    }
}

/// The deployable model: velocity network, schedule, prototype, and the
/// transport-map integration policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub velocity_net: Mlp,
    pub schedule: NoiseSchedule,
    pub prototype: GmPrototype,
    /// Euler steps for the forward transport map.
    pub psi_steps: usize,
    /// Replace integration with a single mixture-mean step at `t = 0`.
    pub one_step_psi: bool,
    /// Lower bound for sampled times.
    pub t_min: f64,
}

impl FlowModel {
    /// Builds a model around a prototype with a freshly initialized
    /// velocity network (`dim + 1` inputs, `k + k * dim` outputs; hidden
    /// layers fan-in initialized, output layer zeroed).
    pub fn new<R: Rng>(
        prototype: GmPrototype,
        hidden: &[usize],
        psi_steps: usize,
        rng: &mut R,
    ) -> Self {
        let (k, dim) = (prototype.k(), prototype.dim());
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(k + k * dim);
        let mut net = Mlp::new(&sizes, Activation::Tanh);
        net.init_fan_in(rng, true);
        Self {
            velocity_net: net,
            schedule: NoiseSchedule,
            prototype,
            psi_steps,
            one_step_psi: false,
            t_min: T_MIN_DEFAULT,
        }
    }

    /// A fully data-independent baseline: uninformed prototype and a
    /// zero velocity network.
    pub fn untrained(k: usize, dim: usize, hidden: &[usize], psi_steps: usize) -> Self {
        let prototype = GmPrototype::uninformed(k, dim);
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(k + k * dim);
        let net = Mlp::new(&sizes, Activation::Tanh);
        Self {
            velocity_net: net,
            schedule: NoiseSchedule,
            prototype,
            psi_steps,
            one_step_psi: false,
            t_min: T_MIN_DEFAULT,
        }
    }

    pub fn k(&self) -> usize {
        self.prototype.k()
    }

    pub fn dim(&self) -> usize {
        self.prototype.dim()
    }

    /// The velocity mixture at `(z_t, t)`: softmax weights, reshaped means,
    /// and the prototype's shared deviation.
    pub fn predict_velocity(&self, z_t: &[f64], t: f64) -> Result<GmVelocity> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::RejectedInput(format!("time {t} outside [0, 1]")));
        }
        let (k, dim) = (self.k(), self.dim());
        let mut input = Vec::with_capacity(dim + 1);
        input.extend_from_slice(z_t);
        input.push(t);
        let out = self.velocity_net.forward(&input)?;
        let logits = &out[..k];
        let means = Tensor::matrix(k, dim, out[k..].to_vec())?;
        Ok(GmVelocity::from_logits(logits, means, self.prototype.std()))
    }

    /// Registers velocity-net parameters and prototype means on a tape.
    pub fn flow_vars(&self, tape: &mut Tape) -> FlowVars {
        FlowVars {
            net: self.velocity_net.vars(tape),
            proto_means: tape.leaf(self.prototype.means().clone()),
        }
    }

    /// Tape-side velocity prediction: returns `(logits, means)` nodes.
    pub fn predict_parts_on(
        &self,
        tape: &mut Tape,
        net: &MlpVars,
        z_t: Var,
        t: f64,
    ) -> (Var, Var) {
        let k = self.k();
        let dim = self.dim();
        let t_leaf = tape.leaf_scalar(t);
        let input = tape.concat(z_t, t_leaf);
        let out = self.velocity_net.forward_on(tape, net, input);
        let logits = tape.slice(out, 0, k);
        let means = tape.slice(out, k, k * dim);
        (logits, means)
    }
}

/// Tape handles for the flow-side trainable parameters.
pub struct FlowVars {
    pub net: MlpVars,
    /// Prototype means as one `[k, dim]` leaf.
    pub proto_means: Var,
}

/// Builds `z_T` on the tape from a factored endpoint draw.
pub fn endpoint_on(tape: &mut Tape, vars: &FlowVars, proto: &GmPrototype, e: &EndpointDraw) -> Var {
    let dim = proto.dim();
    match e {
        EndpointDraw::Component { component, noise } => {
            let mu = tape.slice(vars.proto_means, component * dim, dim);
            let scaled: Vec<f64> = noise.iter().map(|n| n * proto.std()).collect();
            let eps = tape.leaf_vector(&scaled);
            tape.add(mu, eps)
        }
        EndpointDraw::Free { point } => tape.leaf_vector(point),
        EndpointDraw::Assigned { component } => tape.slice(vars.proto_means, component * dim, dim),
    }
}

/// One flow-matching NLL term on the tape:
/// `gm_nll(predict(z_t, t), z_T - z_0)` with `z_t = (1-t) z_0 + t z_T`.
pub fn flow_nll_term_on(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &FlowVars,
    z0: &[f64],
    draw: &FlowDraw,
) -> Var {
    let z0_leaf = tape.leaf_vector(z0);
    let z_end = endpoint_on(tape, vars, &model.prototype, &draw.endpoint);
    let a = tape.scale(z0_leaf, 1.0 - draw.t);
    let b = tape.scale(z_end, draw.t);
    let z_t = tape.add(a, b);
    let u = tape.sub(z_end, z0_leaf);
    let (logits, means) = model.predict_parts_on(tape, &vars.net, z_t, draw.t);
    tape.gm_nll_logits(logits, means, u, model.prototype.std())
}

/// Mean NLL over a batch of normal samples (tape side).
pub fn loss_flow_normal_on(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &FlowVars,
    batch: &[&[f64]],
    draws: &[FlowDraw],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::RejectedInput("empty normal batch".into()));
    }
    debug_assert_eq!(batch.len(), draws.len());
    let terms: Vec<Var> = batch
        .iter()
        .zip(draws)
        .map(|(z0, d)| flow_nll_term_on(tape, model, vars, z0, d))
        .collect();
    let total = tape.add_n(&terms);
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Mean clipped repulsion over a batch of anomalous samples (tape side):
/// `max(-nll, -b_rep)` per sample, i.e. `+log q` bounded below.
pub fn loss_flow_anomaly_on(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &FlowVars,
    batch: &[&[f64]],
    draws: &[FlowDraw],
    b_rep: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::RejectedInput("empty anomaly batch".into()));
    }
    debug_assert_eq!(batch.len(), draws.len());
    let terms: Vec<Var> = batch
        .iter()
        .zip(draws)
        .map(|(z0, d)| {
            let nll = flow_nll_term_on(tape, model, vars, z0, d);
            let neg = tape.neg(nll);
            tape.max_const(neg, -b_rep)
        })
        .collect();
    let total = tape.add_n(&terms);
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

fn sample_draws<R: Rng>(
    model: &FlowModel,
    batch: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<FlowDraw>> {
    batch
        .iter()
        .map(|z0| {
            FlowDraw::sample(
                &model.prototype,
                z0,
                EndpointSource::Prior,
                None,
                model.t_min,
                rng,
            )
        })
        .collect()
}

/// Flow-matching loss over normal samples with per-sample `t ~ U(t_min, 1)`
/// and prior endpoints.
pub fn loss_flow_normal<R: Rng>(
    model: &FlowModel,
    batch: &[Vec<f64>],
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::RejectedInput("empty normal batch".into()));
    }
    let draws = sample_draws(model, batch, rng)?;
    let refs: Vec<&[f64]> = batch.iter().map(|b| b.as_slice()).collect();
    let mut tape = Tape::new();
    let vars = model.flow_vars(&mut tape);
    let loss = loss_flow_normal_on(&mut tape, model, &vars, &refs, &draws)?;
    Ok(tape.item(loss))
}

/// Clipped repulsion loss over anomalous samples, endpoints drawn the same
/// way as for normals.
pub fn loss_flow_anomaly<R: Rng>(
    model: &FlowModel,
    batch: &[Vec<f64>],
    b_rep: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::RejectedInput("empty anomaly batch".into()));
    }
    let draws = sample_draws(model, batch, rng)?;
    let refs: Vec<&[f64]> = batch.iter().map(|b| b.as_slice()).collect();
    let mut tape = Tape::new();
    let vars = model.flow_vars(&mut tape);
    let loss = loss_flow_anomaly_on(&mut tape, model, &vars, &refs, &draws, b_rep)?;
    Ok(tape.item(loss))
}
