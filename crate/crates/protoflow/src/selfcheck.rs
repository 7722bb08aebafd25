//! Built-in invariant suite behind the `check` CLI command: fast numeric
//! verifications of the closed-form identities, metric arithmetic, and
//! gradient correctness. Each check returns a pass/fail line.

use crate::data::SyntheticSpec;
use crate::error::Result;
use crate::eval::roc_auc;
use crate::flow::{gm_nll, interpolate, schedule_at, true_velocity, GmVelocity};
use crate::gmm::GmPrototype;
use crate::mutual_info::{mutual_info_loss, MarginalSource};
use crate::reverse::{endpoint_posterior, reverse_coefficients, reverse_step};
use crate::rng::rng_from_seed;
use crate::scoring::{combined_score, FeatureSample, ScoringHeads};
use crate::tape::finite_diff_check;
use crate::tensor::Tensor;
use crate::train::{
    total_loss_on, trainable_vars_from_slice, collect_trainable, train, BatchDraws, TrainConfig,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one invariant check.
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn ok(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: false,
            detail: detail.into(),
        }
    }
}

fn random_proto(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> GmPrototype {
    let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let means: Vec<f64> = (0..k * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    GmPrototype::new(
        w,
        Tensor::matrix(k, dim, means).expect("proto means"),
        rng.gen_range(0.2..1.0),
    )
    .expect("random prototype")
}

fn check_schedule() -> CheckResult {
    let name = "schedule-boundaries";
    let cases = [
        (0.0, (1.0, 0.0)),
        (1.0, (0.0, 1.0)),
        (0.25, (0.75, 0.25)),
    ];
    for (t, expected) in cases {
        match schedule_at(t) {
            Ok(got) if got == expected => {}
            other => return CheckResult::fail(name, format!("schedule({t}) = {other:?}")),
        }
    }
    CheckResult::ok(name, "linear schedule endpoints and midpoint")
}

fn check_coefficients(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "reverse-coefficient-algebra";
    let c = match reverse_coefficients(0.5, 0.25) {
        Ok(c) => c,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    if (c.c1 - 1.0 / 6.0).abs() > 1e-6
        || (c.c2 - 2.0 / 3.0).abs() > 1e-6
        || (c.c3 - 1.0 / 18.0).abs() > 1e-6
    {
        return CheckResult::fail(name, format!("hand case gave ({}, {}, {})", c.c1, c.c2, c.c3));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t: f64 = rng.gen_range(1e-6..=1.0);
        let dt: f64 = rng.gen_range(0.0..t).max(t * 1e-6);
        let c = match reverse_coefficients(t, dt) {
            Ok(c) => c,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        let (a_t, s_t) = schedule_at(t).expect("t in range");
        let (a_p, s_p) = schedule_at(t - dt).expect("t - dt in range");
        worst = worst
            .max((c.c1 * a_t + c.c2 - a_p).abs())
            .max((c.c1 * c.c1 * s_t * s_t + c.c3 - s_p * s_p).abs());
    }
    if worst > 1e-12 {
        return CheckResult::fail(name, format!("chain identity residual {worst:.2e}"));
    }
    CheckResult::ok(name, format!("chain identities within {worst:.2e}"))
}

fn check_full_jump(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "full-jump-reverse";
    let proto = random_proto(rng, 3, 2);
    let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let means: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = crate::tape::softmax(&logits);
    let pred = GmVelocity::new(
        w,
        Tensor::matrix(3, 2, means).expect("means"),
        proto.std(),
    )
    .expect("velocity");
    let z_t = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let t = rng.gen_range(0.3..1.0);
    let post = match endpoint_posterior(&pred, &z_t, t) {
        Ok(p) => p,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    let mut rng_a = rng_from_seed(4242);
    let mut rng_b = rng_from_seed(4242);
    let step = match reverse_step(&pred, &z_t, t, t, &mut rng_a) {
        Ok(s) => s,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    let direct = post.sample(&mut rng_b);
    if step != direct {
        return CheckResult::fail(name, "full jump differs from posterior draw".to_string());
    }
    CheckResult::ok(name, "full jump equals an endpoint-posterior draw bit for bit")
}

fn check_velocity_identity(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "path-velocity-identity";
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let d = rng.gen_range(1..5);
        let z0: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z1: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: f64 = rng.gen_range(1e-3..=1.0);
        let u = true_velocity(&z0, &z1);
        let zt = interpolate(&z0, &z1, t).expect("valid time");
        for j in 0..d {
            worst = worst.max(((zt[j] - z0[j]) / t - u[j]).abs());
        }
    }
    if worst > 1e-12 {
        return CheckResult::fail(name, format!("identity residual {worst:.2e}"));
    }
    CheckResult::ok(name, format!("(z_t - z0)/t = u within {worst:.2e}"))
}

fn check_k1_proportionality(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "single-component-gradient-ratio";
    for _ in 0..20 {
        let dim = rng.gen_range(1..4);
        let s = rng.gen_range(0.2..1.5);
        let mu: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = crate::tape::Tape::new();
        let means = tape.leaf_vector(&mu);
        let target = tape.leaf_vector(&u);
        let nll = tape.gm_nll_fixed_w(means, target, &[0.0], s);
        let g_nll = tape.backward(nll).expect("scalar");
        let diff = tape.sub(means, target);
        let sq = tape.sq_norm(diff);
        let l2 = tape.scale(sq, 0.5);
        let g_l2 = tape.backward(l2).expect("scalar");

        let a = g_nll.get(&tape, means);
        let b = g_l2.get(&tape, means);
        for j in 0..dim {
            let expected = b.data()[j] / (s * s);
            let rel = (a.data()[j] - expected).abs() / (expected.abs() + 1e-12);
            if rel > 1e-10 {
                return CheckResult::fail(name, format!("relative deviation {rel:.2e}"));
            }
        }
    }
    CheckResult::ok(name, "gm_nll gradient = L2 gradient / s^2 at K = 1")
}

fn check_mi_arithmetic(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "mutual-information-arithmetic";
    let proto = GmPrototype::new(
        vec![0.25; 4],
        Tensor::matrix(
            4,
            2,
            vec![0.0, 0.0, 50.0, 0.0, 0.0, 50.0, 50.0, 50.0],
        )
        .expect("means"),
        0.1,
    )
    .expect("prototype");
    let batch: Vec<Vec<f64>> = (0..4).map(|k| proto.mean_row(k).to_vec()).collect();
    let rep = match mutual_info_loss(&proto, &batch, MarginalSource::PrototypeWeights) {
        Ok(r) => r,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    if (rep.loss + 4f64.ln()).abs() > 1e-12 || rep.mi_estimate != -rep.loss {
        return CheckResult::fail(name, format!("one-hot case gave loss {}", rep.loss));
    }
    for _ in 0..200 {
        let k = rng.gen_range(2..6);
        let proto = random_proto(rng, k, 2);
        let batch: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect();
        let rep = match mutual_info_loss(&proto, &batch, MarginalSource::PrototypeWeights) {
            Ok(r) => r,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        let bound = (k as f64).ln();
        if rep.loss < -bound || rep.loss > bound || rep.mi_estimate != -rep.loss {
            return CheckResult::fail(name, format!("bounds violated: {}", rep.loss));
        }
    }
    CheckResult::ok(name, "one-hot case, bounds, and estimate negation")
}

fn check_auc(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "rank-auc-oracle";
    for _ in 0..200 {
        let n = rng.gen_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[n - 1] = 0;

        let mut num = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let fast = match roc_auc(&scores, &labels) {
            Ok(v) => v,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        if fast != num / pairs {
            return CheckResult::fail(name, format!("{fast} vs oracle {}", num / pairs));
        }
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let complement = roc_auc(&neg, &labels).expect("valid inputs");
        if fast + complement != 1.0 {
            return CheckResult::fail(name, "complement identity violated".to_string());
        }
    }
    CheckResult::ok(name, "rank AUC equals pairwise counting; complement exact")
}

fn check_scoring_identity(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "combined-score-identity";
    let proto = random_proto(rng, 3, 2);
    let mut model = crate::flow::FlowModel::new(proto, &[6], 4, rng);
    model.velocity_net.init_fan_in(rng, false);
    let mut heads = ScoringHeads::new(2, 2, &[4], rng);
    heads.patch_head.init_fan_in(rng, false);
    heads.pooled_head.init_fan_in(rng, false);
    heads.residual_head.init_fan_in(rng, false);
    for _ in 0..50 {
        let rows: Vec<f64> = (0..10 * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sample = FeatureSample::new(0, Tensor::matrix(10, 2, rows).expect("grid"), 0)
            .expect("sample");
        let b = match combined_score(&model, &heads, &sample, 0.10) {
            Ok(b) => b,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        if b.combined != b.global + b.local + b.residual - b.normal {
            return CheckResult::fail(name, "signed sum violated".to_string());
        }
    }
    CheckResult::ok(name, "S = S_g + S_a + S_r - S_n on random models")
}

fn check_responsibilities(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "responsibility-normalization";
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.gen_range(1..6);
        let proto = random_proto(rng, k, 3);
        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let r = proto.responsibilities(&y).expect("valid point");
        let sum: f64 = r.values().iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    if worst > 1e-12 {
        return CheckResult::fail(name, format!("sum deviation {worst:.2e}"));
    }
    CheckResult::ok(name, format!("simplex within {worst:.2e}"))
}

fn check_total_loss_gradient(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "total-loss-gradient";
    let cfg = TrainConfig {
        k: 2,
        hidden: vec![4],
        head_hidden: vec![4],
        psi_steps: 4,
        epochs: 0,
        ..TrainConfig::default()
    };
    let mk = |n: usize, label: u8, offset: f64, rng: &mut ChaCha8Rng| -> Vec<FeatureSample> {
        (0..n)
            .map(|i| {
                let rows: Vec<f64> = (0..3 * 2).map(|_| rng.gen_range(-1.0..1.0) + offset).collect();
                FeatureSample::new(i as u64, Tensor::matrix(3, 2, rows).expect("grid"), label)
                    .expect("sample")
            })
            .collect()
    };
    let normal = mk(4, 0, 0.0, rng);
    let anomaly = mk(2, 1, 2.0, rng);
    let out = match train(&cfg, &normal, &anomaly) {
        Ok(o) => o,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    let mut model = out.model;
    let mut heads = out.heads;
    model.velocity_net.init_fan_in(rng, false);
    heads.patch_head.init_fan_in(rng, false);
    heads.pooled_head.init_fan_in(rng, false);
    heads.residual_head.init_fan_in(rng, false);
    heads.global_gain.data_mut()[0] = 0.4;

    let normal_refs: Vec<&FeatureSample> = normal.iter().take(2).collect();
    let anomaly_refs: Vec<&FeatureSample> = anomaly.iter().take(2).collect();
    let draws = match BatchDraws::sample(&cfg, &model.prototype, &normal_refs, &anomaly_refs, rng) {
        Ok(d) => d,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
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
    });
    match err {
        Ok(e) if e < 1e-4 => CheckResult::ok(name, format!("finite-difference error {e:.2e}")),
        Ok(e) => CheckResult::fail(name, format!("finite-difference error {e:.2e}")),
        Err(e) => CheckResult::fail(name, e.to_string()),
    }
}

fn check_data_determinism() -> CheckResult {
    let name = "generator-determinism";
    let spec = SyntheticSpec {
        train_normal: 20,
        train_anomaly: 3,
        test_normal: 10,
        test_anomaly: 5,
        ..SyntheticSpec::default()
    };
    let a = crate::data::generate(&spec);
    let b = crate::data::generate(&spec);
    match (a, b) {
        (Ok(a), Ok(b)) if a == b => CheckResult::ok(name, "same seed, identical datasets"),
        (Ok(_), Ok(_)) => CheckResult::fail(name, "datasets differ under one seed".to_string()),
        (Err(e), _) | (_, Err(e)) => CheckResult::fail(name, e.to_string()),
    }
}

fn check_gm_nll_far_component() -> CheckResult {
    let name = "far-component-negligibility";
    let s = 0.1;
    let pred = GmVelocity::new(
        vec![0.2, 0.5, 0.3],
        Tensor::matrix(3, 2, vec![0.0, 0.0, 5.0, 0.0, 0.0, -4.0]).expect("means"),
        s,
    )
    .expect("velocity");
    let expected = -(0.2f64.ln()) + (2.0 / 2.0) * (2.0 * std::f64::consts::PI * s * s).ln();
    match gm_nll(&pred, &[0.0, 0.0]) {
        Ok(v) if (v - expected).abs() < 1e-9 => {
            CheckResult::ok(name, "distant components vanish from the likelihood")
        }
        Ok(v) => CheckResult::fail(name, format!("{v} vs expected {expected}")),
        Err(e) => CheckResult::fail(name, e.to_string()),
    }
}

/// Runs the whole suite; deterministic given `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng_from_seed(seed);
    Ok(vec![
        check_schedule(),
        check_coefficients(&mut rng),
        check_full_jump(&mut rng),
        check_velocity_identity(&mut rng),
        check_k1_proportionality(&mut rng),
        check_mi_arithmetic(&mut rng),
        check_auc(&mut rng),
        check_scoring_identity(&mut rng),
        check_responsibilities(&mut rng),
        check_total_loss_gradient(&mut rng),
        check_data_determinism(),
        check_gm_nll_far_component(),
    ])
}
