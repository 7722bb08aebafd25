//! Closed-form reverse-time transitions and the forward transport map.
//!
//! Under the linear schedule, one reverse step from `t` to `t - dt` is a
//! Gaussian mixture whose coefficients come straight from the schedule:
//! no ODE integration is needed for sampling. The forward transport `psi`
//! integrates the mixture-mean velocity with explicit Euler steps and is
//! fully deterministic.

use crate::error::{Error, Result};
use crate::flow::{schedule_at, FlowModel, GmVelocity};
use crate::nn::MlpVars;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Schedule-determined constants of the one-step reverse kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Forward transition variance over the step.
    pub beta: f64,
    pub t: f64,
    pub dt: f64,
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= t && t <= 1.0) {
        return Err(Error::RejectedInput(format!(
            "reverse step requires 0 < dt <= t <= 1, got t={t}, dt={dt}"
        )));
    }
    Ok(())
}

/// Forward transition variance
/// `sigma_t^2 - (alpha_t^2 / alpha_{t-dt}^2) sigma_{t-dt}^2`.
pub fn beta(t: f64, dt: f64) -> Result<f64> {
    check_step(t, dt)?;
    let (a_t, s_t) = schedule_at(t)?;
    let (a_p, s_p) = schedule_at(t - dt)?;
    let ratio = a_t / a_p;
    let b = s_t * s_t - ratio * ratio * s_p * s_p;
    // nonnegative on the linear schedule; guard rounding
    Ok(b.max(0.0))
}

/// The `(c1, c2, c3)` triple of the reverse kernel, plus `beta`.
pub fn reverse_coefficients(t: f64, dt: f64) -> Result<ReverseCoefficients> {
    check_step(t, dt)?;
    let (a_t, s_t) = schedule_at(t)?;
    let (a_p, s_p) = schedule_at(t - dt)?;
    let b = beta(t, dt)?;
    let st2 = s_t * s_t;
    let c1 = (s_p * s_p / st2) * (a_t / a_p);
    let c2 = (b / st2) * a_p;
    let c3 = (b / st2) * (s_p * s_p);
    Ok(ReverseCoefficients {
        c1,
        c2,
        c3,
        beta: b,
        t,
        dt,
    })
}

/// The mixture over clean states implied by a velocity prediction via the
/// affine map `z_0 = z_t - sigma_t u`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointPosterior {
    weights: Vec<f64>,
    /// `[k, dim]`: per-component `mu_zk = z_t - sigma_t mu_k`.
    means_z: Tensor,
    /// `s_z = sigma_t s`.
    std_z: f64,
}

impl EndpointPosterior {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means_z(&self) -> &Tensor {
        &self.means_z
    }

    pub fn mean_row(&self, k: usize) -> &[f64] {
        let d = self.means_z.shape()[1];
        &self.means_z.data()[k * d..(k + 1) * d]
    }

    pub fn std_z(&self) -> f64 {
        self.std_z
    }

    /// Draws `z_0`: component from the weights, then an isotropic Gaussian.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let k = draw_categorical(&self.weights, rng);
        let mu = self.mean_row(k);
        mu.iter()
            .map(|m| m + self.std_z * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn draw_categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Endpoint posterior at `(z_t, t)`: `mu_zk = z_t - sigma_t mu_k`,
/// `s_z = sigma_t s`, weights copied from the prediction.
pub fn endpoint_posterior(pred: &GmVelocity, z_t: &[f64], t: f64) -> Result<EndpointPosterior> {
    if t == 0.0 {
        return Err(Error::DegenerateTime(
            "endpoint posterior is undefined at t = 0".into(),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::RejectedInput(format!("time {t} outside [0, 1]")));
    }
    if z_t.len() != pred.dim() {
        return Err(Error::RejectedInput(format!(
            "state has dimension {}, prediction has {}",
            z_t.len(),
            pred.dim()
        )));
    }
    let (_, sigma_t) = schedule_at(t)?;
    let (k, dim) = (pred.k(), pred.dim());
    let mut means = Vec::with_capacity(k * dim);
    for ki in 0..k {
        let mu = pred.mean_row(ki);
        for j in 0..dim {
            means.push(z_t[j] - sigma_t * mu[j]);
        }
    }
    Ok(EndpointPosterior {
        weights: pred.weights().to_vec(),
        means_z: Tensor::matrix(k, dim, means)?,
        std_z: sigma_t * pred.std(),
    })
}

/// One reverse transition draw: component `k` from the predicted weights,
/// then a Gaussian with mean `c1 z_t + c2 mu_zk` and variance
/// `(c3 + c2^2 s_z^2) I`.
pub fn reverse_step<R: Rng>(
    pred: &GmVelocity,
    z_t: &[f64],
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let coef = reverse_coefficients(t, dt)?;
    let post = endpoint_posterior(pred, z_t, t)?;
    let k = draw_categorical(post.weights(), rng);
    let mu_z = post.mean_row(k);
    let var = coef.c3 + coef.c2 * coef.c2 * post.std_z() * post.std_z();
    let std = var.sqrt();
    Ok(z_t
        .iter()
        .zip(mu_z)
        .map(|(z, m)| coef.c1 * z + coef.c2 * m + std * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Runs reverse transitions on a uniform grid from `t = 1` down to `t = 0`,
/// refreshing the velocity prediction at every grid point.
pub fn sample_reverse_trajectory<R: Rng>(
    model: &FlowModel,
    z_start: &[f64],
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::RejectedInput("trajectory needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z_start.to_vec();
    for i in 0..steps {
        let t = (steps - i) as f64 / steps as f64;
        let pred = model.predict_velocity(&z, t)?;
        z = reverse_step(&pred, &z, t, dt, rng)?;
    }
    Ok(z)
}

/// Deterministic forward transport: explicit Euler integration of the
/// mixture-mean velocity from `t = 0` to `t = 1`.
pub fn push_forward_psi(model: &FlowModel, z0: &[f64]) -> Result<Vec<f64>> {
    if z0.len() != model.dim() {
        return Err(Error::RejectedInput(format!(
            "input has dimension {}, model has {}",
            z0.len(),
            model.dim()
        )));
    }
    if model.one_step_psi {
        let pred = model.predict_velocity(z0, 0.0)?;
        let v = pred.mixture_mean();
        return Ok(z0.iter().zip(&v).map(|(z, u)| z + u).collect());
    }
    let steps = model.psi_steps;
    let h = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let pred = model.predict_velocity(&z, t)?;
        let v = pred.mixture_mean();
        for (zj, vj) in z.iter_mut().zip(&v) {
            *zj += h * vj;
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault(format!(
                "transport state became non-finite at step {i}"
            )));
        }
    }
    Ok(z)
}

/// Tape-side transport map; the arithmetic mirrors [`push_forward_psi`]
/// step for step so values agree bit for bit.
pub fn psi_on(model: &FlowModel, tape: &mut Tape, net: &MlpVars, z0: Var) -> Var {
    if model.one_step_psi {
        let (logits, means) = model.predict_parts_on(tape, net, z0, 0.0);
        let v = tape.mixture_mean(logits, means);
        return tape.add(z0, v);
    }
    let steps = model.psi_steps;
    let h = 1.0 / steps as f64;
    let mut z = z0;
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let (logits, means) = model.predict_parts_on(tape, net, z, t);
        let v = tape.mixture_mean(logits, means);
        let step = tape.scale(v, h);
        z = tape.add(z, step);
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmPrototype;
    use crate::nn::{Activation, Mlp};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn beta_examples() {
        // full jump from t = 1
        assert!((beta(1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        // hand substitution at (0.5, 0.25)
        let b = beta(0.5, 0.25).unwrap();
        assert!((b - 0.222_222_222_222_222_2).abs() < 1e-12, "{b}");
        // dt -> 0 limit
        assert!(beta(0.5, 1e-9).unwrap() < 1e-8);
        // rejected inputs
        assert!(beta(0.5, 0.0).is_err());
        assert!(beta(0.5, 0.6).is_err());
        assert!(beta(1.5, 0.5).is_err());
    }

    #[test]
    fn full_jump_collapses_to_the_endpoint_posterior() {
        let c = reverse_coefficients(0.7, 0.7).unwrap();
        assert_eq!(c.c1, 0.0);
        assert_eq!(c.c2, 1.0);
        assert_eq!(c.c3, 0.0);
    }

    #[test]
    fn hand_computed_coefficients_at_half_quarter() {
        let c = reverse_coefficients(0.5, 0.25).unwrap();
        assert!((c.c1 - 0.166_666_666_666_666_6).abs() < 1e-6);
        assert!((c.c2 - 0.666_666_666_666_666_6).abs() < 1e-6);
        assert!((c.c3 - 0.055_555_555_555_555_55).abs() < 1e-6);
    }

    #[test]
    fn chain_identities_hold_over_random_steps() {
        let mut rng = rng_from_seed(101);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(1e-6..=1.0);
            let dt: f64 = rng.gen_range(0.0..t).max(t * 1e-6);
            let c = reverse_coefficients(t, dt).unwrap();
            let (a_t, s_t) = schedule_at(t).unwrap();
            let (a_p, s_p) = schedule_at(t - dt).unwrap();
            assert!(
                (c.c1 * a_t + c.c2 - a_p).abs() < 1e-12,
                "mean identity at t={t}, dt={dt}"
            );
            assert!(
                (c.c1 * c.c1 * s_t * s_t + c.c3 - s_p * s_p).abs() < 1e-12,
                "variance identity at t={t}, dt={dt}"
            );
            assert!(c.c3 >= 0.0 && c.beta >= 0.0);
        }
    }

    fn pred_of(weights: Vec<f64>, means: Vec<f64>, k: usize, dim: usize, s: f64) -> GmVelocity {
        GmVelocity::new(weights, Tensor::matrix(k, dim, means).unwrap(), s).unwrap()
    }

    #[test]
    fn endpoint_posterior_direct_substitution() {
        // K=1, d=1, z_t = 2, t = 0.5, mu = 2, s = 0.2
        let pred = pred_of(vec![1.0], vec![2.0], 1, 1, 0.2);
        let post = endpoint_posterior(&pred, &[2.0], 0.5).unwrap();
        assert!((post.mean_row(0)[0] - 1.0).abs() < 1e-15);
        assert!((post.std_z() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn endpoint_posterior_collapses_near_t_zero() {
        let t_min = 1e-3;
        let pred = pred_of(vec![0.5, 0.5], vec![1.0, -1.0], 2, 1, 0.3);
        let z_t = [0.42];
        let post = endpoint_posterior(&pred, &z_t, t_min).unwrap();
        assert!((post.std_z() - t_min * 0.3).abs() < 1e-18);
        for k in 0..2 {
            assert!((post.mean_row(k)[0] - z_t[0]).abs() < 2.0 * t_min);
        }
    }

    #[test]
    fn endpoint_posterior_rejects_t_zero() {
        let pred = pred_of(vec![1.0], vec![0.0], 1, 1, 0.5);
        assert!(matches!(
            endpoint_posterior(&pred, &[0.0], 0.0),
            Err(Error::DegenerateTime(_))
        ));
    }

    #[test]
    fn posterior_samples_recover_the_velocity_mixture() {
        // affine closure: u = (z_t - z0) / sigma_t with z0 from the
        // posterior must reproduce the velocity mixture's moments
        let pred = pred_of(vec![0.3, 0.7], vec![1.0, 0.5, -2.0, 0.0], 2, 2, 0.4);
        let z_t = [0.2, -0.6];
        let t = 0.8;
        let post = endpoint_posterior(&pred, &z_t, t).unwrap();
        let mut rng = rng_from_seed(7);
        let n = 100_000;
        let mut mean = [0.0f64; 2];
        let mut var = [0.0f64; 2];
        let mut us = Vec::with_capacity(n);
        for _ in 0..n {
            let z0 = post.sample(&mut rng);
            let u: Vec<f64> = z_t.iter().zip(&z0).map(|(zt, z0)| (zt - z0) / t).collect();
            mean[0] += u[0];
            mean[1] += u[1];
            us.push(u);
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for u in &us {
            var[0] += (u[0] - mean[0]).powi(2);
            var[1] += (u[1] - mean[1]).powi(2);
        }
        var[0] /= n as f64;
        var[1] /= n as f64;

        let expected_mean = pred.mixture_mean();
        // per-coordinate mixture variance: s^2 + sum w (mu - mean)^2
        for j in 0..2 {
            let mut ev = pred.std() * pred.std();
            for ki in 0..2 {
                let d = pred.mean_row(ki)[j] - expected_mean[j];
                ev += pred.weights()[ki] * d * d;
            }
            assert!(
                (mean[j] - expected_mean[j]).abs() < 4.0 * (ev / n as f64).sqrt() + 1e-3,
                "mean coordinate {j}"
            );
            assert!((var[j] - ev).abs() / ev < 0.03, "variance coordinate {j}");
        }
    }

    #[test]
    fn full_jump_step_equals_posterior_draw_bit_for_bit() {
        let pred = pred_of(vec![0.4, 0.6], vec![0.3, -0.7, 1.2, 0.1], 2, 2, 0.25);
        let z_t = [0.9, -0.4];
        let t = 0.6;
        let post = endpoint_posterior(&pred, &z_t, t).unwrap();

        let mut rng_a = rng_from_seed(55);
        let step = reverse_step(&pred, &z_t, t, t, &mut rng_a).unwrap();
        let mut rng_b = rng_from_seed(55);
        let direct = post.sample(&mut rng_b);
        assert_eq!(step, direct);
    }

    #[test]
    fn single_component_floor_std_step_has_closed_form_moments() {
        let s = crate::gmm::STD_FLOOR;
        let mu = 1.5;
        let pred = pred_of(vec![1.0], vec![mu], 1, 1, s);
        let z_t = [2.0];
        let (t, dt) = (0.5, 0.25);
        let c = reverse_coefficients(t, dt).unwrap();
        let post = endpoint_posterior(&pred, &z_t, t).unwrap();
        let expected_mean = c.c1 * z_t[0] + c.c2 * post.mean_row(0)[0];

        let mut rng = rng_from_seed(23);
        let n = 50_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = reverse_step(&pred, &z_t, t, dt, &mut rng).unwrap();
            acc += z[0];
            acc2 += z[0] * z[0];
        }
        let emp_mean = acc / n as f64;
        let emp_var = acc2 / n as f64 - emp_mean * emp_mean;
        // variance is essentially c3 at the floor std
        assert!((emp_mean - expected_mean).abs() < 4.0 * (c.c3 / n as f64).sqrt());
        assert!((emp_var - c.c3).abs() / c.c3 < 0.05);
    }

    #[test]
    fn one_step_trajectory_is_the_full_jump() {
        let proto = GmPrototype::uninformed(2, 2);
        let mut rng = rng_from_seed(3);
        let mut model = FlowModel::new(proto, &[5], 8, &mut rng);
        model.velocity_net.init_fan_in(&mut rng, false);
        let z1 = [0.4, 0.8];

        let mut rng_a = rng_from_seed(90);
        let traj = sample_reverse_trajectory(&model, &z1, 1, &mut rng_a).unwrap();

        let pred = model.predict_velocity(&z1, 1.0).unwrap();
        let mut rng_b = rng_from_seed(90);
        let jump = reverse_step(&pred, &z1, 1.0, 1.0, &mut rng_b).unwrap();
        assert_eq!(traj, jump);
    }

    #[test]
    fn zero_velocity_chain_matches_the_analytic_gaussian() {
        // zero network, K=1, mu = 0: each step is
        // z' = (c1 + c2) z + sqrt(c3 + c2^2 sigma_t^2 s^2) eps
        let proto = GmPrototype::uninformed(1, 1);
        let model = FlowModel::untrained(1, 1, &[4], 8);
        let s = proto.std();
        let steps = 4;
        let dt = 1.0 / steps as f64;
        let z_start = 1.7;

        let mut mean_coef = 1.0;
        let mut var = 0.0;
        for i in 0..steps {
            let t = (steps - i) as f64 / steps as f64;
            let c = reverse_coefficients(t, dt).unwrap();
            let (_, sigma_t) = schedule_at(t).unwrap();
            let f = c.c1 + c.c2;
            var = f * f * var + c.c3 + c.c2 * c.c2 * sigma_t * sigma_t * s * s;
            mean_coef *= f;
        }
        let expected_mean = mean_coef * z_start;

        let mut rng = rng_from_seed(14);
        let n = 50_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = sample_reverse_trajectory(&model, &[z_start], steps, &mut rng).unwrap();
            acc += z[0];
            acc2 += z[0] * z[0];
        }
        let emp_mean = acc / n as f64;
        let emp_var = acc2 / n as f64 - emp_mean * emp_mean;
        assert!(
            (emp_mean - expected_mean).abs() < 4.0 * (var / n as f64).sqrt(),
            "{emp_mean} vs {expected_mean}"
        );
        assert!((emp_var - var).abs() / var < 0.05, "{emp_var} vs {var}");
    }

    #[test]
    fn constant_velocity_field_translates_exactly_under_euler() {
        let k = 3;
        let dim = 2;
        let u_star = [0.8, -1.1];
        let proto = GmPrototype::uninformed(k, dim);
        let mut rng = rng_from_seed(1);
        let mut model = FlowModel::new(proto, &[4], 8, &mut rng);
        model.velocity_net = Mlp::new(&[dim + 1, k + k * dim], Activation::Tanh);
        let mut bias = vec![0.0; k + k * dim];
        bias[0] = 0.3; // arbitrary non-uniform weights
        for ki in 0..k {
            for j in 0..dim {
                bias[k + ki * dim + j] = u_star[j];
            }
        }
        model.velocity_net.for_each_param_mut(&mut |p| {
            if p.shape().len() == 1 && p.len() == bias.len() {
                p.data_mut().copy_from_slice(&bias);
            }
        });

        let z0 = [2.0, -0.5];
        let out = push_forward_psi(&model, &z0).unwrap();
        for j in 0..dim {
            assert!((out[j] - (z0[j] + u_star[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_velocity_transport_is_the_identity() {
        let model = FlowModel::untrained(3, 2, &[6], 8);
        let z0 = [0.123, -4.56];
        assert_eq!(push_forward_psi(&model, &z0).unwrap(), z0.to_vec());
    }

    #[test]
    fn transport_is_deterministic_and_tape_exact() {
        let proto = GmPrototype::uninformed(2, 3);
        let mut rng = rng_from_seed(8);
        let mut model = FlowModel::new(proto, &[7, 7], 8, &mut rng);
        model.velocity_net.init_fan_in(&mut rng, false);
        let z0 = [0.4, -0.2, 1.0];

        let a = push_forward_psi(&model, &z0).unwrap();
        let b = push_forward_psi(&model, &z0).unwrap();
        assert_eq!(a, b);

        let mut tape = Tape::new();
        let net = model.velocity_net.vars(&mut tape);
        let z0_leaf = tape.leaf_vector(&z0);
        let out = psi_on(&model, &mut tape, &net, z0_leaf);
        assert_eq!(tape.value(out).data(), a.as_slice());
    }

    #[test]
    fn doubling_integration_steps_barely_moves_the_output() {
        let proto = GmPrototype::uninformed(2, 2);
        let mut rng = rng_from_seed(19);
        let mut model = FlowModel::new(proto, &[8], 8, &mut rng);
        model.velocity_net.init_fan_in(&mut rng, false);
        let z0 = [0.9, -1.3];

        model.psi_steps = 8;
        let coarse = push_forward_psi(&model, &z0).unwrap();
        model.psi_steps = 16;
        let fine = push_forward_psi(&model, &z0).unwrap();
        let diff: f64 = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 0.02, "step-halving moved psi by {diff}");
    }

    #[test]
    fn one_step_mode_matches_single_euler_update() {
        let proto = GmPrototype::uninformed(2, 2);
        let mut rng = rng_from_seed(29);
        let mut model = FlowModel::new(proto, &[6], 8, &mut rng);
        model.velocity_net.init_fan_in(&mut rng, false);
        model.one_step_psi = true;
        let z0 = [0.5, 0.5];
        let pred = model.predict_velocity(&z0, 0.0).unwrap();
        let v = pred.mixture_mean();
        let expected: Vec<f64> = z0.iter().zip(&v).map(|(z, u)| z + u).collect();
        assert_eq!(push_forward_psi(&model, &z0).unwrap(), expected);
    }
}
