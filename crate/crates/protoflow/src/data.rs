//! Synthetic multi-modal datasets for desk-scale open-set experiments,
//! plus the dataset text format.
//!
//! Normal samples draw their patches around one of `mode_count` mode
//! centers placed on axis directions at equal norm. Anomalies replace a
//! random subset of patches with patches around a center rotated toward an
//! auxiliary axis: the rotation keeps the center norm, so anomalies are
//! not separable by distance from the origin, only by distance from the
//! normal modes. Training (seen) and test (unseen) anomalies rotate toward
//! different auxiliary axes, so the test anomaly distribution never
//! appears during training.

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scoring::FeatureSample;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// How unseen (test) anomalies differ from the seen (training) ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnseenKind {
    /// Rotate toward a different auxiliary axis than the seen anomalies.
    #[default]
    RotatedAux,
    /// Draw anomalous patches around a held-out mode center.
    HeldOutMode,
}

/// Generator settings for one synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub patches: usize,
    pub mode_count: usize,
    /// Minimum pairwise distance between mode centers.
    pub mode_distance: f64,
    /// Patch spread around a mode center.
    pub mode_spread: f64,
    /// Fraction of patches replaced in an anomalous sample.
    pub anomaly_patch_fraction: f64,
    /// Center displacement of seen (training) anomalies.
    pub seen_offset: f64,
    /// Center displacement of unseen (test) anomalies.
    pub unseen_offset: f64,
    pub unseen_kind: UnseenKind,
    pub train_normal: usize,
    pub train_anomaly: usize,
    pub test_normal: usize,
    pub test_anomaly: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            patches: 16,
            mode_count: 4,
            mode_distance: 10.0,
            mode_spread: 1.0,
            anomaly_patch_fraction: 0.5,
            seen_offset: 6.0,
            unseen_offset: 6.0,
            unseen_kind: UnseenKind::RotatedAux,
            train_normal: 2000,
            train_anomaly: 10,
            test_normal: 400,
            test_anomaly: 200,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let aux_dims = match self.unseen_kind {
            UnseenKind::RotatedAux => 2,
            UnseenKind::HeldOutMode => 3,
        };
        if self.feature_dim < self.mode_count + aux_dims {
            return Err(Error::RejectedInput(format!(
                "feature_dim {} too small for {} modes plus {aux_dims} auxiliary axes",
                self.feature_dim, self.mode_count
            )));
        }
        if self.mode_count == 0 || self.patches == 0 {
            return Err(Error::RejectedInput("mode_count and patches must be positive".into()));
        }
        if self.mode_spread < 0.0 || self.mode_distance <= 0.0 {
            return Err(Error::RejectedInput("invalid mode geometry".into()));
        }
        if self.mode_count > 1 && self.mode_distance < 6.0 * self.mode_spread {
            return Err(Error::RejectedInput(format!(
                "modes must be separated by at least 6 spreads ({} < {})",
                self.mode_distance,
                6.0 * self.mode_spread
            )));
        }
        if !(self.anomaly_patch_fraction > 0.0 && self.anomaly_patch_fraction <= 1.0) {
            return Err(Error::RejectedInput(
                "anomaly_patch_fraction must lie in (0, 1]".into(),
            ));
        }
        let radius = self.center_norm();
        for (name, offset) in [("seen", self.seen_offset), ("unseen", self.unseen_offset)] {
            if offset <= 0.0 || offset > 2.0 * radius {
                return Err(Error::RejectedInput(format!(
                    "{name}_offset must lie in (0, {}]",
                    2.0 * radius
                )));
            }
        }
        if self.train_normal == 0 || self.test_normal == 0 || self.test_anomaly == 0 {
            return Err(Error::RejectedInput("sample counts must be positive".into()));
        }
        Ok(())
    }

    /// Norm of every mode center; axis placement makes the pairwise
    /// distance `center_norm * sqrt(2)`.
    pub fn center_norm(&self) -> f64 {
        self.mode_distance / 2f64.sqrt()
    }

    /// Mode center `k`: the scaled `k`-th axis.
    pub fn mode_center(&self, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.feature_dim];
        c[k] = self.center_norm();
        c
    }

    fn seen_aux_axis(&self) -> usize {
        self.mode_count
    }

    fn unseen_aux_axis(&self) -> usize {
        self.mode_count + 1
    }

    fn held_out_axis(&self) -> usize {
        self.feature_dim - 1
    }

    /// The seen anomaly center for mode `k`: the mode center rotated in
    /// the `(mode axis, aux axis)` plane so it moves by `offset` while
    /// keeping its norm.
    fn rotated_center(&self, k: usize, aux_axis: usize, offset: f64) -> Vec<f64> {
        let a = self.center_norm();
        let phi = 2.0 * (offset / (2.0 * a)).asin();
        let mut c = vec![0.0; self.feature_dim];
        c[k] = a * phi.cos();
        c[aux_axis] = a * phi.sin();
        c
    }

    fn anomaly_center(&self, k: usize, seen: bool) -> Vec<f64> {
        if seen {
            return self.rotated_center(k, self.seen_aux_axis(), self.seen_offset);
        }
        match self.unseen_kind {
            UnseenKind::RotatedAux => {
                self.rotated_center(k, self.unseen_aux_axis(), self.unseen_offset)
            }
            UnseenKind::HeldOutMode => {
                let mut c = vec![0.0; self.feature_dim];
                c[self.held_out_axis()] = self.center_norm();
                c
            }
        }
    }
}

/// Which portion of an experiment a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainNormal,
    TrainAnomaly,
    Test,
}

/// An immutable collection of feature samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FeatureSample>,
    pub split: Split,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<FeatureSample>, split: Split, feature_dim: usize) -> Result<Self> {
        if split == Split::TrainNormal && samples.iter().any(|s| s.label != 0) {
            return Err(Error::ContractViolation(
                "train-normal split contains an anomalous label".into(),
            ));
        }
        if split == Split::TrainAnomaly && samples.iter().any(|s| s.label != 1) {
            return Err(Error::ContractViolation(
                "train-anomaly split contains a normal label".into(),
            ));
        }
        let mut ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != samples.len() {
            return Err(Error::ContractViolation("duplicate sample ids".into()));
        }
        if samples.iter().any(|s| s.feature_dim() != feature_dim) {
            return Err(Error::RejectedInput("inconsistent feature dimension".into()));
        }
        Ok(Self {
            samples,
            split,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn draw_patch<R: Rng>(center: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normal_sample(spec: &SyntheticSpec, id: u64, rng: &mut ChaCha8Rng) -> FeatureSample {
    let mode = rng.gen_range(0..spec.mode_count);
    let center = spec.mode_center(mode);
    let mut rows = Vec::with_capacity(spec.patches * spec.feature_dim);
    for _ in 0..spec.patches {
        rows.extend(draw_patch(&center, spec.mode_spread, rng));
    }
    FeatureSample::new(
        id,
        Tensor::matrix(spec.patches, spec.feature_dim, rows).expect("patch grid"),
        0,
    )
    .expect("generated sample")
}

fn anomaly_sample(spec: &SyntheticSpec, id: u64, seen: bool, rng: &mut ChaCha8Rng) -> FeatureSample {
    let mode = rng.gen_range(0..spec.mode_count);
    let center = spec.mode_center(mode);
    let anomaly_center = spec.anomaly_center(mode, seen);
    let n_anom = ((spec.anomaly_patch_fraction * spec.patches as f64).ceil() as usize)
        .clamp(1, spec.patches);
    let mut idx: Vec<usize> = (0..spec.patches).collect();
    idx.shuffle(rng);
    let mut is_anom = vec![false; spec.patches];
    for &i in &idx[..n_anom] {
        is_anom[i] = true;
    }
    let mut rows = Vec::with_capacity(spec.patches * spec.feature_dim);
    for flag in is_anom {
        let c = if flag { &anomaly_center } else { &center };
        rows.extend(draw_patch(c, spec.mode_spread, rng));
    }
    FeatureSample::new(
        id,
        Tensor::matrix(spec.patches, spec.feature_dim, rows).expect("patch grid"),
        1,
    )
    .expect("generated sample")
}

/// Generates the three splits deterministically from the spec seed. Test
/// anomalies come exclusively from the unseen generator.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let mut next_id = 0u64;
    let mut take_id = || {
        let id = next_id;
        next_id += 1;
        id
    };

    let train_normal: Vec<FeatureSample> = (0..spec.train_normal)
        .map(|_| normal_sample(spec, take_id(), &mut rng))
        .collect();
    let train_anomaly: Vec<FeatureSample> = (0..spec.train_anomaly)
        .map(|_| anomaly_sample(spec, take_id(), true, &mut rng))
        .collect();
    let mut test: Vec<FeatureSample> = (0..spec.test_normal)
        .map(|_| normal_sample(spec, take_id(), &mut rng))
        .collect();
    test.extend((0..spec.test_anomaly).map(|_| anomaly_sample(spec, take_id(), false, &mut rng)));

    Ok((
        Dataset::new(train_normal, Split::TrainNormal, spec.feature_dim)?,
        Dataset::new(train_anomaly, Split::TrainAnomaly, spec.feature_dim)?,
        Dataset::new(test, Split::Test, spec.feature_dim)?,
    ))
}

fn header_for(feature_dim: usize) -> String {
    let mut h = String::from("sample_id,patch_id,label");
    for j in 0..feature_dim {
        let _ = write!(h, ",f{j}");
    }
    h
}

/// Writes the dataset as delimited text: one row per patch, 17 significant
/// digits, rows ascending by `(sample_id, patch_id)`.
pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header_for(dataset.feature_dim))?;
    let mut samples: Vec<&FeatureSample> = dataset.samples.iter().collect();
    samples.sort_by_key(|s| s.id);
    for s in samples {
        for p in 0..s.patch_count() {
            let mut line = format!("{},{},{}", s.id, p, s.label);
            for v in s.patch_row(p) {
                let _ = write!(line, ",{v:.16e}");
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset back; the split tag is supplied by the caller (the
/// format stores rows only) and its label constraints are re-validated.
pub fn load(path: &Path, split: Split) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let path_str = path.display().to_string();

    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                path: path_str,
                line: 1,
                msg: "empty file, expected a header".into(),
            })
        }
    };
    if !header.starts_with("sample_id,patch_id,label") {
        return Err(Error::FormatVersion {
            path: path_str,
            expected: 1,
            got: 0,
        });
    }
    let feature_dim = header.split(',').count().saturating_sub(3);
    if header != header_for(feature_dim) {
        return Err(Error::Parse {
            path: path_str,
            line: 1,
            msg: format!("malformed header {header:?}"),
        });
    }

    struct Pending {
        id: u64,
        label: u8,
        rows: Vec<f64>,
        patch_count: usize,
    }
    let mut samples: Vec<FeatureSample> = Vec::new();
    let mut pending: Option<Pending> = None;
    let finish = |p: Pending, samples: &mut Vec<FeatureSample>| -> Result<()> {
        let t = Tensor::matrix(p.patch_count, feature_dim, p.rows)
            .map_err(|e| Error::ContractViolation(format!("internal grid error: {e}")))?;
        samples.push(FeatureSample::new(p.id, t, p.label)?);
        Ok(())
    };

    let mut last_key: Option<(u64, usize)> = None;
    for (lineno, line) in lines.enumerate() {
        let line_num = lineno + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: line_num,
            msg,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != feature_dim + 3 {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                feature_dim + 3,
                fields.len()
            )));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid sample id {:?}", fields[0])))?;
        let patch: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("invalid patch id {:?}", fields[1])))?;
        let label: u8 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("invalid label {:?}", fields[2])))?;
        if label > 1 {
            return Err(parse_err(format!("label must be 0 or 1, got {label}")));
        }
        let mut values = Vec::with_capacity(feature_dim);
        for f in &fields[3..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("non-numeric feature field {f:?}")))?;
            values.push(v);
        }

        if let Some((last_id, last_patch)) = last_key {
            let ascending = id > last_id || (id == last_id && patch > last_patch);
            if !ascending {
                return Err(parse_err(format!(
                    "rows must ascend by (sample_id, patch_id); saw ({id}, {patch}) after ({last_id}, {last_patch})"
                )));
            }
        }
        last_key = Some((id, patch));

        match pending.as_mut() {
            Some(p) if p.id == id => {
                if label != p.label {
                    return Err(parse_err(format!(
                        "conflicting labels for sample {id}: {} then {label}",
                        p.label
                    )));
                }
                if patch != p.patch_count {
                    return Err(parse_err(format!(
                        "expected patch id {}, found {patch}",
                        p.patch_count
                    )));
                }
                p.rows.extend(values);
                p.patch_count += 1;
            }
            _ => {
                if let Some(done) = pending.take() {
                    finish(done, &mut samples)?;
                }
                if patch != 0 {
                    return Err(parse_err(format!(
                        "sample {id} must start at patch id 0, found {patch}"
                    )));
                }
                pending = Some(Pending {
                    id,
                    label,
                    rows: values,
                    patch_count: 1,
                });
            }
        }
    }
    if let Some(done) = pending.take() {
        finish(done, &mut samples)?;
    }
    Dataset::new(samples, split, feature_dim)
}
