//! Experiment orchestration: data, training, scoring, and AUC evaluation
//! over one or more seeds.

use crate::config::RunConfig;
use crate::data::{generate, load, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{mean_std, roc_auc, write_scores, EvalReport, HeadAucs};
use crate::flow::FlowModel;
use crate::scoring::{score_samples, FeatureSample, ScoreBreakdown, ScoringHeads};
use crate::snapshot::save_model;
use crate::train::{train_with, MetricsRecord, TrainConfig, TrainOutput};
use std::io::Write;
use std::path::Path;

/// The three splits of one experiment.
pub struct ExperimentData {
    pub train_normal: Dataset,
    pub train_anomaly: Dataset,
    pub test: Dataset,
}

/// Loads the splits from explicit paths or generates them from the spec.
pub fn load_or_generate(cfg: &RunConfig) -> Result<ExperimentData> {
    if cfg.paths.all_set() {
        let train_normal = load(
            cfg.paths.train_normal.as_ref().unwrap(),
            Split::TrainNormal,
        )?;
        let train_anomaly = load(
            cfg.paths.train_anomaly.as_ref().unwrap(),
            Split::TrainAnomaly,
        )?;
        let test = load(cfg.paths.test.as_ref().unwrap(), Split::Test)?;
        Ok(ExperimentData {
            train_normal,
            train_anomaly,
            test,
        })
    } else {
        let (train_normal, train_anomaly, test) = generate(&cfg.data)?;
        Ok(ExperimentData {
            train_normal,
            train_anomaly,
            test,
        })
    }
}

/// AUCs of one scored test split.
#[derive(Debug, Clone, Copy)]
pub struct ScoredAucs {
    pub combined: f64,
    pub heads: HeadAucs,
}

/// Computes combined and per-head AUCs from labeled breakdowns.
pub fn aucs_from_scores(scores: &[ScoreBreakdown]) -> Result<ScoredAucs> {
    let labels: Vec<u8> = scores
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                Error::UndefinedMetric("AUC evaluation needs labeled scores".into())
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    let col = |f: &dyn Fn(&ScoreBreakdown) -> f64| -> Vec<f64> { scores.iter().map(f).collect() };
    Ok(ScoredAucs {
        combined: roc_auc(&col(&|s| s.combined), &labels)?,
        heads: HeadAucs {
            global: roc_auc(&col(&|s| s.global), &labels)?,
            local: roc_auc(&col(&|s| s.local), &labels)?,
            normal: roc_auc(&col(&|s| s.normal), &labels)?,
            residual: roc_auc(&col(&|s| s.residual), &labels)?,
        },
    })
}

/// The data-independent baseline: uninformed prototype, zero velocity
/// network, zero heads.
pub fn untrained_baseline(cfg: &TrainConfig, dim: usize) -> (FlowModel, ScoringHeads) {
    let mut model = FlowModel::untrained(cfg.k, dim, &cfg.hidden, cfg.psi_steps);
    model.t_min = cfg.t_min;
    model.one_step_psi = cfg.one_step_psi;
    let mut sizes = vec![dim];
    sizes.extend_from_slice(&cfg.head_hidden);
    sizes.push(1);
    let heads = ScoringHeads {
        patch_head: crate::nn::Mlp::new(&sizes, crate::nn::Activation::Tanh),
        pooled_head: crate::nn::Mlp::new(&sizes, crate::nn::Activation::Tanh),
        residual_head: crate::nn::Mlp::new(&sizes, crate::nn::Activation::Tanh),
        global_gain: crate::tensor::Tensor::zeros(vec![1]),
        global_bias: crate::tensor::Tensor::zeros(vec![1]),
    };
    (model, heads)
}

/// One seeded run within an experiment.
pub struct SeedRun {
    pub seed: u64,
    pub output: TrainOutput,
    pub scores: Vec<ScoreBreakdown>,
    pub aucs: ScoredAucs,
}

/// Trains on the given data with `seed` substituted into the train config
/// and scores the test split.
pub fn run_seed(cfg: &RunConfig, data: &ExperimentData, seed: u64) -> Result<SeedRun> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let output = train_with(
        &train_cfg,
        &data.train_normal.samples,
        &data.train_anomaly.samples,
        |_, _, _| Ok(()),
    )?;
    let scores = score_samples(
        &output.model,
        &output.heads,
        &data.test.samples,
        cfg.train.top_fraction,
    )?;
    let aucs = aucs_from_scores(&scores)?;
    Ok(SeedRun {
        seed,
        output,
        scores,
        aucs,
    })
}

/// Scores the test split under the untrained baseline.
pub fn untrained_auc(cfg: &RunConfig, data: &ExperimentData) -> Result<f64> {
    let dim = data.test.feature_dim;
    let (model, heads) = untrained_baseline(&cfg.train, dim);
    let scores = score_samples(&model, &heads, &data.test.samples, cfg.train.top_fraction)?;
    Ok(aucs_from_scores(&scores)?.combined)
}

/// Full protocol: data, `repeat` seeded runs (seeds `base, base+1, ...`),
/// aggregation, and optional artifacts (per-seed scores, metrics, models,
/// and the report) under `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_or_generate(cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let base_seed = cfg.train.seed;
    let mut per_seed_auc = Vec::with_capacity(cfg.repeat);
    let mut head_sums = HeadAucs::default();
    for r in 0..cfg.repeat {
        let seed = base_seed + r as u64;
        let run = run_seed_with_artifacts(cfg, &data, seed, out_dir)?;
        per_seed_auc.push(run.aucs.combined);
        head_sums.global += run.aucs.heads.global;
        head_sums.local += run.aucs.heads.local;
        head_sums.normal += run.aucs.heads.normal;
        head_sums.residual += run.aucs.heads.residual;
    }
    let n = cfg.repeat as f64;
    let (auc, auc_std) = mean_std(&per_seed_auc);
    let report = EvalReport {
        auc,
        auc_std,
        runs: cfg.repeat,
        per_seed_auc,
        score_count: data.test.len(),
        positive_count: data.test.samples.iter().filter(|s| s.label == 1).count(),
        head_auc: HeadAucs {
            global: head_sums.global / n,
            local: head_sums.local / n,
            normal: head_sums.normal / n,
            residual: head_sums.residual / n,
        },
        untrained_auc: untrained_auc(cfg, &data)?,
        config_digest: cfg.digest(),
        base_seed,
    };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
        std::fs::write(dir.join("eval_report.json"), json)?;
    }
    Ok(report)
}

fn run_seed_with_artifacts(
    cfg: &RunConfig,
    data: &ExperimentData,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<SeedRun> {
    let Some(dir) = out_dir else {
        return run_seed(cfg, data, seed);
    };

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let metrics_path = dir.join(format!("metrics_seed{seed}.jsonl"));
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let checkpoint_interval = cfg.train.checkpoint_interval;
    let output = train_with(
        &train_cfg,
        &data.train_normal.samples,
        &data.train_anomaly.samples,
        |model, heads, record: &MetricsRecord| {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::Config(format!("metrics serialization failed: {e}")))?;
            writeln!(metrics_file, "{line}")?;
            if checkpoint_interval > 0 && record.step % checkpoint_interval as u64 == 0 {
                save_model(
                    model,
                    heads,
                    &dir.join(format!("checkpoint_seed{seed}_step{}.bin", record.step)),
                )?;
            }
            Ok(())
        },
    )?;
    save_model(
        &output.model,
        &output.heads,
        &dir.join(format!("model_seed{seed}.bin")),
    )?;
    let scores = score_samples(
        &output.model,
        &output.heads,
        &data.test.samples,
        cfg.train.top_fraction,
    )?;
    write_scores(&scores, &dir.join(format!("scores_seed{seed}.csv")))?;
    let aucs = aucs_from_scores(&scores)?;
    Ok(SeedRun {
        seed,
        output,
        scores,
        aucs,
    })
}

/// Convenience for scoring a loaded dataset with a loaded model.
pub fn score_dataset(
    model: &FlowModel,
    heads: &ScoringHeads,
    samples: &[FeatureSample],
    top_fraction: f64,
) -> Result<Vec<ScoreBreakdown>> {
    score_samples(model, heads, samples, top_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn quick_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train.k = 4;
        cfg.train.hidden = vec![8];
        cfg.train.head_hidden = vec![8];
        cfg.train.epochs = 2;
        cfg.train.iterations_per_epoch = 4;
        cfg.train.normal_batch = 8;
        cfg.train.anomaly_batch = 4;
        cfg.train.psi_steps = 4;
        cfg.data = SyntheticSpec {
            train_normal: 80,
            train_anomaly: 6,
            test_normal: 40,
            test_anomaly: 20,
            ..SyntheticSpec::default()
        };
        cfg
    }

    #[test]
    fn experiment_produces_a_complete_report() {
        let cfg = quick_config();
        let report = run_experiment(&cfg, None).unwrap();
        assert_eq!(report.runs, 1);
        assert_eq!(report.per_seed_auc.len(), 1);
        assert_eq!(report.score_count, 60);
        assert_eq!(report.positive_count, 20);
        assert!(report.auc >= 0.0 && report.auc <= 1.0);
        assert_eq!(report.auc_std, 0.0);
        assert_eq!(report.config_digest.len(), 64);
    }

    #[test]
    fn repeat_runs_report_mean_and_std_over_exact_seed_count() {
        let mut cfg = quick_config();
        cfg.repeat = 3;
        cfg.train.epochs = 1;
        let report = run_experiment(&cfg, None).unwrap();
        assert_eq!(report.runs, 3);
        assert_eq!(report.per_seed_auc.len(), 3);
        let (m, s) = mean_std(&report.per_seed_auc);
        assert_eq!(report.auc, m);
        assert_eq!(report.auc_std, s);
    }

    #[test]
    fn artifacts_land_in_the_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config();
        cfg.train.epochs = 1;
        let report = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert!(dir.path().join("eval_report.json").exists());
        let seed = report.base_seed;
        assert!(dir.path().join(format!("model_seed{seed}.bin")).exists());
        assert!(dir.path().join(format!("scores_seed{seed}.csv")).exists());
        let metrics =
            std::fs::read_to_string(dir.path().join(format!("metrics_seed{seed}.jsonl"))).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        let first: MetricsRecord = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 1);
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_auc_bit_for_bit() {
        let cfg = quick_config();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.auc.to_bits(), b.auc.to_bits());
        assert_eq!(a.untrained_auc.to_bits(), b.untrained_auc.to_bits());
    }
}
