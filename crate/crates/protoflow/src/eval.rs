//! Rank-based ROC-AUC and score-file I/O.

use crate::error::{Error, Result};
use crate::scoring::ScoreBreakdown;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Mann-Whitney AUC with average-rank tie handling: the fraction of
/// (positive, negative) pairs ranked correctly, ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::RejectedInput(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::RejectedInput("non-finite score".into()));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(Error::RejectedInput("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // average ranks over tie groups (1-based)
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }

    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l == 1)
        .map(|(_, r)| *r)
        .sum();
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Summary of one experiment (possibly repeated over seeds).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean combined-score AUC over the seeds.
    pub auc: f64,
    /// Sample standard deviation over the seeds (0 for a single run).
    pub auc_std: f64,
    pub runs: usize,
    pub per_seed_auc: Vec<f64>,
    pub score_count: usize,
    pub positive_count: usize,
    /// Mean per-head AUCs over the seeds.
    pub head_auc: HeadAucs,
    /// Combined-score AUC of the data-independent baseline model.
    pub untrained_auc: f64,
    pub config_digest: String,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct HeadAucs {
    pub global: f64,
    pub local: f64,
    pub normal: f64,
    pub residual: f64,
}

/// Mean and sample standard deviation (n - 1; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const SCORE_HEADER: &str =
    "sample_id,score_global,score_local,score_normal,score_residual,score_combined,label";

/// Writes one record per sample under a fixed header; unknown labels leave
/// the last field empty.
pub fn write_scores(scores: &[ScoreBreakdown], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{SCORE_HEADER}")?;
    for s in scores {
        let mut line = format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},",
            s.id, s.global, s.local, s.normal, s.residual, s.combined
        );
        if let Some(label) = s.label {
            let _ = write!(line, "{label}");
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a score file back.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreBreakdown>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let path_str = path.display().to_string();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != SCORE_HEADER {
        return Err(Error::Parse {
            path: path_str,
            line: 1,
            msg: format!("expected header {SCORE_HEADER:?}"),
        });
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line_num = lineno + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: line_num,
            msg,
        };
        if fields.len() != 7 {
            return Err(parse_err(format!("expected 7 fields, found {}", fields.len())));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid sample id {:?}", fields[0])))?;
        let mut nums = [0.0f64; 5];
        for (slot, f) in nums.iter_mut().zip(&fields[1..6]) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(format!("non-numeric score field {f:?}")))?;
        }
        let label = if fields[6].is_empty() {
            None
        } else {
            let l: u8 = fields[6]
                .parse()
                .map_err(|_| parse_err(format!("invalid label {:?}", fields[6])))?;
            if l > 1 {
                return Err(parse_err(format!("label must be 0 or 1, got {l}")));
            }
            Some(l)
        };
        out.push(ScoreBreakdown {
            id,
            global: nums[0],
            local: nums[1],
            normal: nums[2],
            residual: nums[3],
            combined: nums[4],
            label,
        });
    }
    Ok(out)
}
