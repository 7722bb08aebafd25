//! The four anomaly scoring heads and the combined inference score.
//!
//! - global: negative prototype log-likelihood of the transported pooled
//!   feature (no network; a learnable affine calibration feeds its
//!   training loss),
//! - local: mean of the top-O per-patch head outputs,
//! - normal: a head on the pooled patch mean, subtracted at inference,
//! - residual: a head on the standardized offset from the most probable
//!   prototype component.
//!
//! `combined = global + local + residual - normal`, exactly.

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{Activation, Mlp, MlpVars};
use crate::reverse::push_forward_psi;
use crate::tape::{Tape, Var};
use crate::tensor::{sq_dist, softplus, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One data point: a grid of patch feature vectors plus its pooled mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub id: u64,
    /// `[patches, channels]`.
    pub patches: Tensor,
    /// Arithmetic mean over patch rows.
    pub pooled: Vec<f64>,
    /// 0 = normal, 1 = anomaly.
    pub label: u8,
}

impl FeatureSample {
    pub fn new(id: u64, patches: Tensor, label: u8) -> Result<Self> {
        if patches.shape().len() != 2 || patches.shape()[0] == 0 {
            return Err(Error::RejectedInput(format!(
                "patches must be a non-empty 2-d grid, got shape {:?}",
                patches.shape()
            )));
        }
        if label > 1 {
            return Err(Error::RejectedInput(format!("label must be 0 or 1, got {label}")));
        }
        if !patches.is_finite() {
            return Err(Error::RejectedInput("non-finite patch value".into()));
        }
        let (p, c) = (patches.shape()[0], patches.shape()[1]);
        let mut pooled = vec![0.0; c];
        for i in 0..p {
            for (j, acc) in pooled.iter_mut().enumerate() {
                *acc += patches.data()[i * c + j];
            }
        }
        pooled.iter_mut().for_each(|v| *v /= p as f64);
        Ok(Self {
            id,
            patches,
            pooled,
            label,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn patch_row(&self, i: usize) -> &[f64] {
        let c = self.feature_dim();
        &self.patches.data()[i * c..(i + 1) * c]
    }
}

/// The three scoring networks plus the affine calibration applied to the
/// global score during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringHeads {
    /// Per-patch scorer, `channels -> 1`.
    pub patch_head: Mlp,
    /// Pooled-feature scorer, `channels -> 1`.
    pub pooled_head: Mlp,
    /// Standardized-residual scorer, `dim -> 1`.
    pub residual_head: Mlp,
    /// Calibration gain for the global training loss; `[1]`.
    pub global_gain: Tensor,
    /// Calibration bias for the global training loss; `[1]`.
    pub global_bias: Tensor,
}

/// Tape handles for one registration of the heads.
pub struct HeadVars {
    pub patch: MlpVars,
    pub pooled: MlpVars,
    pub residual: MlpVars,
    pub gain: Var,
    pub bias: Var,
}

impl ScoringHeads {
    /// Heads with fan-in hidden layers and zero output layers: every raw
    /// score of a fresh model is exactly zero.
    pub fn new<R: Rng>(feature_dim: usize, dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mk = |input: usize, rng: &mut R| {
            let mut sizes = vec![input];
            sizes.extend_from_slice(hidden);
            sizes.push(1);
            let mut net = Mlp::new(&sizes, Activation::Tanh);
            net.init_fan_in(rng, true);
            net
        };
        Self {
            patch_head: mk(feature_dim, rng),
            pooled_head: mk(feature_dim, rng),
            residual_head: mk(dim, rng),
            global_gain: Tensor::zeros(vec![1]),
            global_bias: Tensor::zeros(vec![1]),
        }
    }

    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.patch_head.for_each_param(f);
        self.pooled_head.for_each_param(f);
        self.residual_head.for_each_param(f);
        f(&self.global_gain);
        f(&self.global_bias);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.patch_head.for_each_param_mut(f);
        self.pooled_head.for_each_param_mut(f);
        self.residual_head.for_each_param_mut(f);
        f(&mut self.global_gain);
        f(&mut self.global_bias);
    }

    pub fn vars(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            patch: self.patch_head.vars(tape),
            pooled: self.pooled_head.vars(tape),
            residual: self.residual_head.vars(tape),
            gain: tape.leaf(self.global_gain.clone()),
            bias: tape.leaf(self.global_bias.clone()),
        }
    }
}

/// Per-sample score breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub id: u64,
    pub global: f64,
    pub local: f64,
    pub normal: f64,
    pub residual: f64,
    pub combined: f64,
    pub label: Option<u8>,
}

/// `global + local + residual - normal`.
pub fn combine(global: f64, local: f64, normal: f64, residual: f64) -> f64 {
    global + local + residual - normal
}

/// Number of patches aggregated by the local head.
pub fn top_count(o_fraction: f64, patch_count: usize) -> Result<usize> {
    if !(o_fraction > 0.0 && o_fraction <= 1.0) {
        return Err(Error::RejectedInput(format!(
            "top fraction must lie in (0, 1], got {o_fraction}"
        )));
    }
    Ok(((o_fraction * patch_count as f64).ceil() as usize).max(1))
}

/// Mean of the `count` largest scores, ties toward the lower index.
fn top_k_mean(scores: &[f64], count: usize) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("non-finite patch score")
            .then(a.cmp(&b))
    });
    idx[..count].iter().map(|&i| scores[i]).sum::<f64>() / count as f64
}

/// Negative prototype log-likelihood of the transported pooled feature.
pub fn score_global(model: &FlowModel, sample: &FeatureSample) -> Result<f64> {
    let y = push_forward_psi(model, &sample.pooled)?;
    Ok(-model.prototype.log_density(&y)?)
}

/// Mean of the top-O per-patch head scores.
pub fn score_local(heads: &ScoringHeads, sample: &FeatureSample, o_fraction: f64) -> Result<f64> {
    let p = sample.patch_count();
    let count = top_count(o_fraction, p)?;
    let mut scores = Vec::with_capacity(p);
    for i in 0..p {
        scores.push(heads.patch_head.forward(sample.patch_row(i))?[0]);
    }
    Ok(top_k_mean(&scores, count))
}

/// Head output on the pooled patch mean.
pub fn score_normal(heads: &ScoringHeads, sample: &FeatureSample) -> Result<f64> {
    Ok(heads.pooled_head.forward(&sample.pooled)?[0])
}

/// Index of the most probable component for a point: with the shared
/// deviation this is the nearest mean, ties toward the lower index.
pub fn most_probable_component(model: &FlowModel, y: &[f64]) -> usize {
    let proto = &model.prototype;
    let mut best = 0;
    let mut best_d = sq_dist(y, proto.mean_row(0));
    for k in 1..proto.k() {
        let d = sq_dist(y, proto.mean_row(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Head output on the standardized residual from the most probable
/// component.
pub fn score_residual(
    model: &FlowModel,
    heads: &ScoringHeads,
    sample: &FeatureSample,
) -> Result<f64> {
    let y = push_forward_psi(model, &sample.pooled)?;
    let c = most_probable_component(model, &y);
    let mu = model.prototype.mean_row(c);
    let s = model.prototype.std();
    let resid: Vec<f64> = y.iter().zip(mu).map(|(a, b)| (a - b) / s).collect();
    Ok(heads.residual_head.forward(&resid)?[0])
}

/// All four scores and their signed combination.
pub fn combined_score(
    model: &FlowModel,
    heads: &ScoringHeads,
    sample: &FeatureSample,
    o_fraction: f64,
) -> Result<ScoreBreakdown> {
    let y = push_forward_psi(model, &sample.pooled)?;
    let global = -model.prototype.log_density(&y)?;
    let local = score_local(heads, sample, o_fraction)?;
    let normal = score_normal(heads, sample)?;
    let c = most_probable_component(model, &y);
    let mu = model.prototype.mean_row(c);
    let s = model.prototype.std();
    let resid: Vec<f64> = y.iter().zip(mu).map(|(a, b)| (a - b) / s).collect();
    let residual = heads.residual_head.forward(&resid)?[0];
    Ok(ScoreBreakdown {
        id: sample.id,
        global,
        local,
        normal,
        residual,
        combined: combine(global, local, normal, residual),
        label: Some(sample.label),
    })
}

/// Scores a whole dataset sample by sample.
pub fn score_samples(
    model: &FlowModel,
    heads: &ScoringHeads,
    samples: &[FeatureSample],
    o_fraction: f64,
) -> Result<Vec<ScoreBreakdown>> {
    samples
        .iter()
        .map(|s| combined_score(model, heads, s, o_fraction))
        .collect()
}

/// Logistic loss on a raw score: `softplus(raw) - y * raw`.
pub fn binary_score_loss(raw: f64, label: u8) -> Result<f64> {
    if label > 1 {
        return Err(Error::RejectedInput(format!("label must be 0 or 1, got {label}")));
    }
    Ok(softplus(raw) - f64::from(label) * raw)
}

/// Tape-side logistic loss.
pub fn binary_loss_on(tape: &mut Tape, raw: Var, label: u8) -> Var {
    let sp = tape.softplus(raw);
    if label == 1 {
        tape.sub(sp, raw)
    } else {
        sp
    }
}

/// Tape-side local raw score (patches are constants).
pub fn raw_local_on(
    tape: &mut Tape,
    heads: &ScoringHeads,
    hv: &HeadVars,
    sample: &FeatureSample,
    o_fraction: f64,
) -> Result<Var> {
    let p = sample.patch_count();
    let count = top_count(o_fraction, p)?;
    let scores: Vec<Var> = (0..p)
        .map(|i| {
            let x = tape.leaf_vector(sample.patch_row(i));
            heads.patch_head.forward_on(tape, &hv.patch, x)
        })
        .collect();
    // gather the scalar head outputs into one vector node
    let mut stacked = scores[0];
    for s in &scores[1..] {
        stacked = tape.concat(stacked, *s);
    }
    Ok(tape.mean_top_k(stacked, count))
}

/// Tape-side pooled raw score.
pub fn raw_normal_on(
    tape: &mut Tape,
    heads: &ScoringHeads,
    hv: &HeadVars,
    sample: &FeatureSample,
) -> Var {
    let x = tape.leaf_vector(&sample.pooled);
    heads.pooled_head.forward_on(tape, &hv.pooled, x)
}

/// Tape-side residual raw score; the component index is chosen from the
/// current values and held fixed, gradients flow through the chosen mean.
pub fn raw_residual_on(
    tape: &mut Tape,
    model: &FlowModel,
    heads: &ScoringHeads,
    hv: &HeadVars,
    proto_means: Var,
    psi_y: Var,
) -> Var {
    let dim = model.dim();
    let y_val = tape.value(psi_y).data().to_vec();
    let c = most_probable_component(model, &y_val);
    let mu = tape.slice(proto_means, c * dim, dim);
    let diff = tape.sub(psi_y, mu);
    let resid = tape.scale(diff, 1.0 / model.prototype.std());
    heads.residual_head.forward_on(tape, &hv.residual, resid)
}

/// Tape-side calibrated global raw score: `gain * nll + bias`.
pub fn raw_global_calibrated_on(tape: &mut Tape, hv: &HeadVars, nll: Var) -> Var {
    let scaled = tape.mul(hv.gain, nll);
    tape.add(scaled, hv.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmPrototype;
    use crate::rng::rng_from_seed;
    use crate::tape::finite_diff_check;
    use rand::Rng;

    fn sample_from_rows(id: u64, rows: Vec<Vec<f64>>, label: u8) -> FeatureSample {
        let p = rows.len();
        let c = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        FeatureSample::new(id, Tensor::matrix(p, c, flat).unwrap(), label).unwrap()
    }

    fn random_model(k: usize, dim: usize, seed: u64) -> FlowModel {
        let mut rng = rng_from_seed(seed);
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let means: Vec<f64> = (0..k * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let proto = GmPrototype::new(
            w,
            Tensor::matrix(k, dim, means).unwrap(),
            rng.gen_range(0.3..0.8),
        )
        .unwrap();
        let mut model = FlowModel::new(proto, &[6], 8, &mut rng);
        model.velocity_net.init_fan_in(&mut rng, false);
        model
    }

    #[test]
    fn pooled_is_the_patch_mean() {
        let s = sample_from_rows(0, vec![vec![1.0, 3.0], vec![3.0, 5.0]], 0);
        assert_eq!(s.pooled, vec![2.0, 4.0]);
    }

    #[test]
    fn identity_transport_scores_the_standard_normal_mode() {
        // zero velocity network => psi = identity; pooled feature exactly at
        // the single unit-deviation prototype mean
        let model = FlowModel::untrained(1, 1, &[4], 8);
        let sample = sample_from_rows(0, vec![vec![0.0]], 0);
        let s_g = score_global(&model, &sample).unwrap();
        assert!((s_g - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn global_score_grows_radially_from_a_single_prototype() {
        let model = FlowModel::untrained(1, 2, &[4], 8);
        let mut last = f64::NEG_INFINITY;
        for r in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let sample = sample_from_rows(0, vec![vec![r, 0.0]], 0);
            let s = score_global(&model, &sample).unwrap();
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn global_score_matches_the_composition_oracle() {
        let model = random_model(3, 2, 7);
        let mut rng = rng_from_seed(8);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let sample = sample_from_rows(0, rows, 0);
            let got = score_global(&model, &sample).unwrap();
            let expected =
                -model
                    .prototype
                    .log_density(&push_forward_psi(&model, &sample.pooled).unwrap())
                    .unwrap();
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_patch_scores_pass_through_any_fraction() {
        let mut rng = rng_from_seed(2);
        let mut heads = ScoringHeads::new(2, 2, &[4], &mut rng);
        // bias-only head returning 0.75 for every patch
        heads.patch_head = Mlp::new(&[2, 1], Activation::Tanh);
        heads.patch_head.for_each_param_mut(&mut |p| {
            if p.len() == 1 {
                p.data_mut()[0] = 0.75;
            }
        });
        let sample = sample_from_rows(0, vec![vec![0.0, 0.0]; 6], 0);
        for o in [0.1, 0.3, 1.0] {
            assert!((score_local(&heads, &sample, o).unwrap() - 0.75).abs() < 1e-15);
        }
    }

    /// Heads whose patch head returns the first channel of the patch.
    fn passthrough_heads() -> ScoringHeads {
        let mut heads = ScoringHeads {
            patch_head: Mlp::new(&[1, 1], Activation::Tanh),
            pooled_head: Mlp::new(&[1, 1], Activation::Tanh),
            residual_head: Mlp::new(&[1, 1], Activation::Tanh),
            global_gain: Tensor::zeros(vec![1]),
            global_bias: Tensor::zeros(vec![1]),
        };
        heads.patch_head.for_each_param_mut(&mut |p| {
            if p.shape().len() == 2 {
                p.data_mut()[0] = 1.0;
            }
        });
        heads
    }

    #[test]
    fn top_fraction_selects_the_largest_patch_scores() {
        let heads = passthrough_heads();
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let sample = sample_from_rows(0, rows, 0);
        // ceil(0.1 * 10) = 1 -> the maximum
        assert_eq!(score_local(&heads, &sample, 0.10).unwrap(), 9.0);
        // ceil(0.3 * 10) = 3 -> mean of {9, 8, 7}
        assert_eq!(score_local(&heads, &sample, 0.30).unwrap(), 8.0);
        assert!(score_local(&heads, &sample, 0.0).is_err());
        assert!(score_local(&heads, &sample, 1.5).is_err());
    }

    #[test]
    fn local_score_ignores_patch_order_and_is_monotone() {
        let heads = passthrough_heads();
        let rows: Vec<Vec<f64>> = vec![
            vec![3.0],
            vec![-1.0],
            vec![7.0],
            vec![0.5],
        ];
        let sample = sample_from_rows(0, rows.clone(), 0);
        let mut shuffled = rows.clone();
        shuffled.swap(0, 2);
        shuffled.swap(1, 3);
        let sample_sh = sample_from_rows(0, shuffled, 0);
        let a = score_local(&heads, &sample, 0.5).unwrap();
        let b = score_local(&heads, &sample_sh, 0.5).unwrap();
        assert_eq!(a, b);

        // raising one patch score never lowers the aggregate
        let mut bumped = rows;
        bumped[1][0] += 10.0;
        let sample_b = sample_from_rows(0, bumped, 0);
        assert!(score_local(&heads, &sample_b, 0.5).unwrap() >= a);
    }

    #[test]
    fn zero_head_normal_score_and_pooling_invariance() {
        let mut rng = rng_from_seed(5);
        let heads = ScoringHeads::new(2, 2, &[4], &mut rng);
        let rows = vec![vec![1.0, -2.0], vec![3.0, 4.0]];
        let sample = sample_from_rows(0, rows.clone(), 0);
        assert_eq!(score_normal(&heads, &sample).unwrap(), 0.0);

        // duplicating every patch leaves the pooled mean unchanged
        let mut doubled = rows.clone();
        doubled.extend(rows);
        let sample_d = sample_from_rows(0, doubled, 0);
        for (a, b) in sample.pooled.iter().zip(&sample_d.pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_at_the_chosen_mean_is_zero() {
        let model = FlowModel::untrained(2, 2, &[4], 8);
        let mut rng = rng_from_seed(6);
        let heads = ScoringHeads::new(2, 2, &[4], &mut rng);
        let sample = sample_from_rows(0, vec![vec![0.0, 0.0]], 0);
        // psi = identity, pooled = 0 = both prototype means; head zero-init
        assert_eq!(score_residual(&model, &heads, &sample).unwrap(), 0.0);
    }

    #[test]
    fn standardized_residual_is_scale_consistent() {
        // doubling the deviation and doubling the offset produce the same
        // standardized head input
        let mk = |std: f64, offset: f64| {
            let proto = GmPrototype::new(
                vec![1.0],
                Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                std,
            )
            .unwrap();
            let mut model = FlowModel::untrained(1, 1, &[4], 8);
            model.prototype = proto;
            let heads = passthrough_heads_residual();
            let sample = sample_from_rows(0, vec![vec![offset]], 0);
            score_residual(&model, &heads, &sample).unwrap()
        };
        let a = mk(0.5, 1.0);
        let b = mk(1.0, 2.0);
        assert!((a - b).abs() < 1e-14);
    }

    fn passthrough_heads_residual() -> ScoringHeads {
        let mut heads = ScoringHeads {
            patch_head: Mlp::new(&[1, 1], Activation::Tanh),
            pooled_head: Mlp::new(&[1, 1], Activation::Tanh),
            residual_head: Mlp::new(&[1, 1], Activation::Tanh),
            global_gain: Tensor::zeros(vec![1]),
            global_bias: Tensor::zeros(vec![1]),
        };
        heads.residual_head.for_each_param_mut(&mut |p| {
            if p.shape().len() == 2 {
                p.data_mut()[0] = 1.0;
            }
        });
        heads
    }

    #[test]
    fn most_probable_component_tracks_responsibilities_under_equal_weights() {
        let mut rng = rng_from_seed(11);
        for _ in 0..30 {
            let k = 4;
            let means: Vec<f64> = (0..k * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let proto = GmPrototype::new(
                vec![0.25; 4],
                Tensor::matrix(k, 2, means).unwrap(),
                rng.gen_range(0.2..1.0),
            )
            .unwrap();
            let mut model = FlowModel::untrained(k, 2, &[4], 8);
            model.prototype = proto;
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let c = most_probable_component(&model, &y);
            let r = model.prototype.responsibilities(&y).unwrap();
            assert_eq!(c, r.argmax());
        }
    }

    #[test]
    fn combined_is_the_exact_signed_sum() {
        assert_eq!(combine(1.0, 2.0, 4.0, 3.0), 2.0);

        let model = random_model(2, 2, 21);
        let mut rng = rng_from_seed(22);
        let mut heads = ScoringHeads::new(2, 2, &[4], &mut rng);
        heads.patch_head.init_fan_in(&mut rng, false);
        heads.pooled_head.init_fan_in(&mut rng, false);
        heads.residual_head.init_fan_in(&mut rng, false);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let sample = sample_from_rows(3, rows, 1);
            let b = combined_score(&model, &heads, &sample, 0.25).unwrap();
            assert_eq!(b.combined, b.global + b.local + b.residual - b.normal);
            assert_eq!(b.global, score_global(&model, &sample).unwrap());
            assert_eq!(b.local, score_local(&heads, &sample, 0.25).unwrap());
            assert_eq!(b.normal, score_normal(&heads, &sample).unwrap());
            assert_eq!(b.residual, score_residual(&model, &heads, &sample).unwrap());
        }
    }

    #[test]
    fn batch_scoring_equals_per_sample_scoring() {
        let model = random_model(2, 2, 31);
        let mut rng = rng_from_seed(32);
        let heads = ScoringHeads::new(2, 2, &[4], &mut rng);
        let samples: Vec<FeatureSample> = (0..6)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..4)
                    .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                sample_from_rows(i, rows, (i % 2) as u8)
            })
            .collect();
        let batch = score_samples(&model, &heads, &samples, 0.5).unwrap();
        for (b, s) in batch.iter().zip(&samples) {
            let single = combined_score(&model, &heads, s, 0.5).unwrap();
            assert_eq!(*b, single);
        }
    }

    #[test]
    fn binary_loss_cases() {
        let ln2 = 2f64.ln();
        assert!((binary_score_loss(0.0, 0).unwrap() - ln2).abs() < 1e-15);
        assert!((binary_score_loss(0.0, 1).unwrap() - ln2).abs() < 1e-15);
        assert!(binary_score_loss(40.0, 1).unwrap() < 1e-12);
        assert!(binary_score_loss(-40.0, 0).unwrap() < 1e-12);
        assert!(binary_score_loss(0.3, 2).is_err());
    }

    #[test]
    fn binary_loss_gradient_is_sigmoid_minus_label() {
        for (raw, label) in [(0.7, 0u8), (-1.3, 1u8), (2.5, 1u8)] {
            let params = [Tensor::scalar(raw)];
            let err = finite_diff_check(&params, 1e-6, |tape, vs| {
                Ok(binary_loss_on(tape, vs[0], label))
            })
            .unwrap();
            assert!(err < 1e-8, "fd err {err}");

            let mut tape = Tape::new();
            let r = tape.leaf_scalar(raw);
            let loss = binary_loss_on(&mut tape, r, label);
            let g = tape.backward(loss).unwrap();
            let expected = crate::tensor::sigmoid(raw) - f64::from(label);
            assert!((g.get(&tape, r).item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_raw_scores_match_plain_scores() {
        let model = random_model(3, 2, 41);
        let mut rng = rng_from_seed(42);
        let mut heads = ScoringHeads::new(2, 2, &[5], &mut rng);
        heads.patch_head.init_fan_in(&mut rng, false);
        heads.pooled_head.init_fan_in(&mut rng, false);
        heads.residual_head.init_fan_in(&mut rng, false);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let sample = sample_from_rows(0, rows, 0);

        let mut tape = Tape::new();
        let hv = heads.vars(&mut tape);
        let fv = model.flow_vars(&mut tape);
        let local = raw_local_on(&mut tape, &heads, &hv, &sample, 0.5).unwrap();
        let normal = raw_normal_on(&mut tape, &heads, &hv, &sample);
        let pooled = tape.leaf_vector(&sample.pooled);
        let psi_y = crate::reverse::psi_on(&model, &mut tape, &fv.net, pooled);
        let residual = raw_residual_on(&mut tape, &model, &heads, &hv, fv.proto_means, psi_y);

        assert_eq!(tape.item(local), score_local(&heads, &sample, 0.5).unwrap());
        assert_eq!(tape.item(normal), score_normal(&heads, &sample).unwrap());
        assert_eq!(
            tape.item(residual),
            score_residual(&model, &heads, &sample).unwrap()
        );
    }
}
