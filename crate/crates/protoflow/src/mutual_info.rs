//! Mutual-information regularization over transformed normal features.
//!
//! The regularizer rewards confident prototype assignments (low
//! conditional entropy) against balanced component usage (high marginal
//! entropy). The loss is `H(c|y) - H(c)`; adding it to a minimized total
//! maximizes the plug-in mutual-information estimate `H(c) - H(c|y)`.
//!
//! The marginal entropy defaults to the frozen prototype weights. The
//! batch-average mode recomputes it from batch responsibilities, which
//! actively penalizes component collapse.

use crate::error::{Error, Result};
use crate::gmm::GmPrototype;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Where the marginal entropy `H(c)` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginalSource {
    /// Fixed prototype weights.
    #[default]
    PrototypeWeights,
    /// Batch-averaged responsibilities.
    BatchAverage,
}

/// Entropy breakdown of one regularizer evaluation. Entropies are in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutualInfoReport {
    /// `H(c|y)`: batch-mean assignment entropy.
    pub conditional_entropy: f64,
    /// `H(c)`: marginal assignment entropy.
    pub marginal_entropy: f64,
    /// `H(c|y) - H(c)`.
    pub loss: f64,
    /// `H(c) - H(c|y)`; exactly `-loss`.
    pub mi_estimate: f64,
}

fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| if p == 0.0 { 0.0 } else { p * p.ln() })
        .sum::<f64>()
}

/// Regularizer over a batch of transformed normal features.
pub fn mutual_info_loss(
    proto: &GmPrototype,
    batch: &[Vec<f64>],
    marginal: MarginalSource,
) -> Result<MutualInfoReport> {
    if batch.is_empty() {
        return Err(Error::RejectedInput("empty batch".into()));
    }
    let k = proto.k();
    let mut cond = 0.0;
    let mut avg_resp = vec![0.0; k];
    for y in batch {
        let r = proto.responsibilities(y)?;
        cond += entropy(r.values());
        for (a, p) in avg_resp.iter_mut().zip(r.values()) {
            *a += p;
        }
    }
    cond /= batch.len() as f64;
    avg_resp.iter_mut().for_each(|a| *a /= batch.len() as f64);

    let marg = match marginal {
        MarginalSource::PrototypeWeights => entropy(proto.weights()),
        MarginalSource::BatchAverage => entropy(&avg_resp),
    };
    let loss = cond - marg;
    Ok(MutualInfoReport {
        conditional_entropy: cond,
        marginal_entropy: marg,
        loss,
        mi_estimate: -loss,
    })
}

/// Labeled wrapper: rejects any anomalous sample in the batch, since the
/// regularizer is defined on normal samples only.
pub fn mutual_info_loss_labeled(
    proto: &GmPrototype,
    batch: &[(Vec<f64>, u8)],
    marginal: MarginalSource,
) -> Result<MutualInfoReport> {
    if batch.iter().any(|(_, label)| *label != 0) {
        return Err(Error::ContractViolation(
            "regularizer batch contains anomalous samples".into(),
        ));
    }
    let features: Vec<Vec<f64>> = batch.iter().map(|(y, _)| y.clone()).collect();
    mutual_info_loss(proto, &features, marginal)
}

/// Plug-in mutual-information estimate `H(c) - H(c|y)`; the exact negation
/// of [`mutual_info_loss`].
pub fn mutual_info_estimate(proto: &GmPrototype, batch: &[Vec<f64>]) -> Result<f64> {
    Ok(mutual_info_loss(proto, batch, MarginalSource::PrototypeWeights)?.mi_estimate)
}

/// Tape-side regularizer for training. `ys` are transformed normal features
/// already on the tape (gradients flow into both the features and the
/// prototype means). Returns the loss node and a value-level report.
pub fn mutual_info_loss_on(
    tape: &mut Tape,
    proto: &GmPrototype,
    proto_means: Var,
    ys: &[Var],
    marginal: MarginalSource,
) -> Result<(Var, MutualInfoReport)> {
    if ys.is_empty() {
        return Err(Error::RejectedInput("empty batch".into()));
    }
    let log_w = proto.log_weights().to_vec();
    let std = proto.std();
    let n = ys.len() as f64;

    let ents: Vec<Var> = ys
        .iter()
        .map(|&y| tape.gm_entropy(proto_means, y, &log_w, std))
        .collect();
    let ent_sum = tape.add_n(&ents);
    let cond = tape.scale(ent_sum, 1.0 / n);

    let loss = match marginal {
        MarginalSource::PrototypeWeights => {
            let marg = entropy(proto.weights());
            tape.add_const(cond, -marg)
        }
        MarginalSource::BatchAverage => {
            let resps: Vec<Var> = ys
                .iter()
                .map(|&y| tape.gm_responsibilities(proto_means, y, &log_w, std))
                .collect();
            let resp_sum = tape.add_n(&resps);
            let avg = tape.scale(resp_sum, 1.0 / n);
            let xlx = tape.x_log_x(avg);
            let neg_marg = tape.sum(xlx);
            tape.add(cond, neg_marg)
        }
    };

    let cond_v = tape.item(cond);
    let loss_v = tape.item(loss);
    let report = MutualInfoReport {
        conditional_entropy: cond_v,
        marginal_entropy: cond_v - loss_v,
        loss: loss_v,
        mi_estimate: -loss_v,
    };
    Ok((loss, report))
}
