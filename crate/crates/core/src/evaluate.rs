//! Patient-level splits, slice metrics, slice voting and multi-seed reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::cnn::{evaluate_samples, train, CnnError, CnnModel, Sample, TrainConfig, TrainHistory, DECISION_THRESHOLD};
use crate::dicom::Label;
use crate::grid::UnitSlice;
use crate::preprocess::VariantId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no patients of class {0:?}")]
    EmptyClass(Label),
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("duplicate patient id {0}")]
    DuplicatePatient(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("vote threshold t={t} must satisfy 1 <= t <= k={k}")]
    BadThreshold { k: usize, t: usize },
    #[error("experiment needs at least one seed")]
    NoRuns,
    #[error("{split} split has no patients")]
    EmptySplit { split: Split },
    #[error("training failed for seed {seed}: {source}")]
    Training { seed: u64, source: CnnError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    /// Patient ids of one split, sorted.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.assignment.get(id).copied()
    }
}

/// Assigns every patient to train/val/test, separately per class: each class
/// is sorted by id, shuffled with the seeded generator, and cut into
/// `round(r_train·n)`, `round(r_val·n)` and the remainder.
pub fn stratified_split(
    patients: &[(String, Label)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, EvalError> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b >= 0.0 && c >= 0.0 && ((a + b + c) - 1.0).abs() < 1e-9) {
        return Err(EvalError::BadRatios(ratios));
    }
    let mut seen = BTreeSet::new();
    for (id, _) in patients {
        if !seen.insert(id.as_str()) {
            return Err(EvalError::DuplicatePatient(id.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for class in [Label::Negative, Label::Positive] {
        let mut ids: Vec<&String> = patients
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| id)
            .collect();
        if ids.is_empty() {
            return Err(EvalError::EmptyClass(class));
        }
        ids.sort();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = ((a * n as f64).round() as usize).min(n);
        let n_val = ((b * n as f64).round() as usize).min(n - n_train);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            assignment.insert(id.clone(), split);
        }
    }
    Ok(SplitAssignment {
        seed,
        ratios,
        assignment,
    })
}

fn check_lengths(pred: &[Label], truth: &[Label]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    Ok(())
}

/// Fraction of matching labels.
pub fn binary_accuracy(pred: &[Label], truth: &[Label]) -> Result<f64, EvalError> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

pub fn confusion(pred: &[Label], truth: &[Label]) -> Result<Confusion, EvalError> {
    check_lengths(pred, truth)?;
    let mut c = Confusion::default();
    for (p, t) in pred.iter().zip(truth) {
        match (p.is_positive(), t.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Patient decision from `k` slice decisions: positive when more than `t`
/// slices are positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteConfig {
    pub k: usize,
    pub t: usize,
}

impl VoteConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k == 0 || self.t == 0 || self.t > self.k {
            return Err(EvalError::BadThreshold {
                k: self.k,
                t: self.t,
            });
        }
        Ok(())
    }
}

pub fn patient_vote(slice_preds: &[Label], cfg: &VoteConfig) -> Result<Label, EvalError> {
    cfg.validate()?;
    if slice_preds.len() != cfg.k {
        return Err(EvalError::LengthMismatch(slice_preds.len(), cfg.k));
    }
    let positives = slice_preds.iter().filter(|l| l.is_positive()).count();
    Ok(Label::from_bool(positives > cfg.t))
}

pub fn threshold_label(probability: f64) -> Label {
    Label::from_bool(probability >= DECISION_THRESHOLD)
}

/// One patient's preprocessed slices at network resolution.
#[derive(Debug, Clone)]
pub struct PatientSlices {
    pub patient_id: String,
    pub label: Label,
    pub slices: Vec<UnitSlice>,
}

impl PatientSlices {
    fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        self.slices.iter().map(|s| Sample {
            image: s.clone(),
            label: self.label,
        })
    }
}

/// Patients of each split.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub train: Vec<PatientSlices>,
    pub val: Vec<PatientSlices>,
    pub test: Vec<PatientSlices>,
}

impl SplitData {
    pub fn get(&self, split: Split) -> &[PatientSlices] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.get(split).iter().flat_map(PatientSlices::samples).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub vote: VoteConfig,
    pub accuracy: f64,
    pub confusion: Confusion,
}

/// Metrics of one trained model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: VariantId,
    pub model: String,
    pub seed: u64,
    pub split: Split,
    pub slice: SliceMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient: Option<PatientMetrics>,
}

/// Slice metrics and optional voting metrics of `model` on `patients`.
pub fn evaluate_patients(
    model: &CnnModel,
    patients: &[PatientSlices],
    vote: Option<&VoteConfig>,
) -> Result<(SliceMetrics, Option<PatientMetrics>), EvalError> {
    let samples: Vec<Sample> = patients.iter().flat_map(PatientSlices::samples).collect();
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let summary = evaluate_samples(model, &samples, 64).map_err(|source| EvalError::Training {
        seed: 0,
        source,
    })?;
    let pred: Vec<Label> = summary.probabilities.iter().map(|&p| threshold_label(p)).collect();
    let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let slice = SliceMetrics {
        accuracy: summary.accuracy,
        loss: summary.loss,
        confusion: confusion(&pred, &truth)?,
    };
    let patient = match vote {
        None => None,
        Some(cfg) => {
            let mut offset = 0;
            let mut votes = Vec::with_capacity(patients.len());
            for p in patients {
                let preds = &pred[offset..offset + p.slices.len()];
                offset += p.slices.len();
                votes.push(patient_vote(preds, cfg)?);
            }
            let truth: Vec<Label> = patients.iter().map(|p| p.label).collect();
            Some(PatientMetrics {
                vote: *cfg,
                accuracy: binary_accuracy(&votes, &truth)?,
                confusion: confusion(&votes, &truth)?,
            })
        }
    };
    Ok((slice, patient))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub variant: VariantId,
    pub model_name: String,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub augment: Option<AugmentConfig>,
    pub vote: Option<VoteConfig>,
}

pub const MODEL_NAME: &str = "tinycnn";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub model: CnnModel,
    pub history: TrainHistory,
    pub metrics: Vec<RunMetrics>,
}

/// Trains one model per seed on the same data and evaluates each on the
/// validation and test splits.
pub fn run_experiment(
    data: &SplitData,
    spec: &ExperimentSpec,
) -> Result<(MetricsReport, Vec<RunOutcome>), EvalError> {
    if spec.seeds.is_empty() {
        return Err(EvalError::NoRuns);
    }
    for split in Split::ALL {
        if data.get(split).is_empty() {
            return Err(EvalError::EmptySplit { split });
        }
    }
    if let Some(v) = &spec.vote {
        v.validate()?;
    }
    let train_set = data.samples(Split::Train);
    let val_set = data.samples(Split::Val);
    let mut runs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let cfg = TrainConfig {
            seed,
            ..spec.train
        };
        let (model, history) = train(&train_set, &val_set, &cfg, spec.augment.as_ref())
            .map_err(|source| EvalError::Training { seed, source })?;
        let mut metrics = Vec::new();
        for split in [Split::Val, Split::Test] {
            let (slice, patient) = evaluate_patients(&model, data.get(split), spec.vote.as_ref())?;
            metrics.push(RunMetrics {
                variant: spec.variant,
                model: spec.model_name.clone(),
                seed,
                split,
                slice,
                patient,
            });
        }
        runs.push(RunOutcome {
            seed,
            model,
            history,
            metrics,
        });
    }
    let report = MetricsReport::new(runs.iter().flat_map(|r| r.metrics.iter().cloned()).collect());
    Ok((report, runs))
}

/// Per-run rows plus AVG and BEST aggregates per (variant, model, split).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
}

pub const REPORT_HEADER: &str = "variant,model,run_seed,split,slice_accuracy,loss,tp,fp,tn,fn";
pub const PATIENT_REPORT_HEADER: &str =
    "variant,model,run_seed,split,k,t,patient_accuracy,tp,fp,tn,fn";

/// Mean over runs of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Average {
    pub accuracy: f64,
    pub loss: f64,
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    pub fn_: f64,
}

type GroupKey = (VariantId, String, Split);

impl MetricsReport {
    pub fn new(runs: Vec<RunMetrics>) -> Self {
        Self { runs }
    }

    /// Runs grouped by variant, model and split, in sorted group order and
    /// original run order within a group.
    fn groups(&self) -> BTreeMap<GroupKey, Vec<&RunMetrics>> {
        let mut g: BTreeMap<GroupKey, Vec<&RunMetrics>> = BTreeMap::new();
        for r in &self.runs {
            g.entry((r.variant, r.model.clone(), r.split)).or_default().push(r);
        }
        g
    }

    fn average(runs: &[&RunMetrics]) -> Average {
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
        Average {
            accuracy: mean(&|r| r.slice.accuracy),
            loss: mean(&|r| r.slice.loss),
            tp: mean(&|r| r.slice.confusion.tp as f64),
            fp: mean(&|r| r.slice.confusion.fp as f64),
            tn: mean(&|r| r.slice.confusion.tn as f64),
            fn_: mean(&|r| r.slice.confusion.fn_ as f64),
        }
    }

    /// Highest accuracy; ties go to the lower loss, then the lower seed.
    fn best<'a>(runs: &[&'a RunMetrics]) -> &'a RunMetrics {
        let key = |r: &RunMetrics| (r.slice.accuracy, -r.slice.loss);
        let mut best = runs[0];
        for &r in &runs[1..] {
            let (a, b) = (key(r), key(best));
            let better = a.0 > b.0 || (a.0 == b.0 && (a.1 > b.1 || (a.1 == b.1 && r.seed < best.seed)));
            if better {
                best = r;
            }
        }
        best
    }

    pub fn avg_for(&self, variant: VariantId, split: Split) -> Option<Average> {
        let runs: Vec<&RunMetrics> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant && r.split == split)
            .collect();
        (!runs.is_empty()).then(|| Self::average(&runs))
    }

    pub fn best_for(&self, variant: VariantId, split: Split) -> Option<&RunMetrics> {
        let runs: Vec<&RunMetrics> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant && r.split == split)
            .collect();
        (!runs.is_empty()).then(|| Self::best(&runs))
    }

    /// The slice-level report. Run rows come first in input order, then one
    /// AVG and one BEST row per (variant, model, split) group.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").unwrap();
        for r in &self.runs {
            let c = r.slice.confusion;
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{},{},{},{}",
                r.variant, r.model, r.seed, r.split, r.slice.accuracy, r.slice.loss, c.tp, c.fp, c.tn, c.fn_
            )
            .unwrap();
        }
        let groups = self.groups();
        for ((variant, model, split), runs) in &groups {
            let a = Self::average(runs);
            writeln!(
                out,
                "{variant},{model},AVG,{split},{:.6},{:.6},{:.2},{:.2},{:.2},{:.2}",
                a.accuracy, a.loss, a.tp, a.fp, a.tn, a.fn_
            )
            .unwrap();
        }
        for ((variant, model, split), runs) in &groups {
            let b = Self::best(runs);
            let c = b.slice.confusion;
            writeln!(
                out,
                "{variant},{model},BEST,{split},{:.6},{:.6},{},{},{},{}",
                b.slice.accuracy, b.slice.loss, c.tp, c.fp, c.tn, c.fn_
            )
            .unwrap();
        }
        out
    }

    /// Patient-level voting report; `None` when no run carries voting metrics.
    pub fn patient_csv(&self) -> Option<String> {
        let runs: Vec<&RunMetrics> = self.runs.iter().filter(|r| r.patient.is_some()).collect();
        if runs.is_empty() {
            return None;
        }
        let mut out = String::new();
        writeln!(out, "{PATIENT_REPORT_HEADER}").unwrap();
        for r in runs {
            let p = r.patient.expect("filtered");
            let c = p.confusion;
            writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{},{},{},{}",
                r.variant, r.model, r.seed, r.split, p.vote.k, p.vote.t, p.accuracy, c.tp, c.fp, c.tn, c.fn_
            )
            .unwrap();
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Negative as N, Positive as P};

    fn run(seed: u64, split: Split, acc: f64, loss: f64) -> RunMetrics {
        RunMetrics {
            variant: VariantId::A,
            model: MODEL_NAME.into(),
            seed,
            split,
            slice: SliceMetrics {
                accuracy: acc,
                loss,
                confusion: Confusion {
                    tp: 1,
                    fp: 0,
                    tn: 1,
                    fn_: 0,
                },
            },
            patient: None,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(binary_accuracy(&[P, N], &[P, N]).unwrap(), 1.0);
        assert_eq!(binary_accuracy(&[P, N], &[N, P]).unwrap(), 0.0);
        assert_eq!(binary_accuracy(&[P, P, N, N], &[P, P, N, P]).unwrap(), 0.75);
        assert!(matches!(binary_accuracy(&[], &[]), Err(EvalError::EmptyInput)));
        assert!(matches!(binary_accuracy(&[P], &[]), Err(EvalError::LengthMismatch(1, 0))));
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[P, P], &[P, N]).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 0, 0));
        let c = confusion(&[N; 4], &[P; 4]).unwrap();
        assert_eq!(c.fn_, 4);
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn vote_examples() {
        let preds = [P, P, P, N, N];
        assert_eq!(patient_vote(&preds, &VoteConfig { k: 5, t: 2 }).unwrap(), P);
        assert_eq!(patient_vote(&preds, &VoteConfig { k: 5, t: 3 }).unwrap(), N);
        assert!(matches!(
            patient_vote(&preds, &VoteConfig { k: 5, t: 0 }),
            Err(EvalError::BadThreshold { k: 5, t: 0 })
        ));
        assert!(matches!(
            patient_vote(&preds, &VoteConfig { k: 5, t: 6 }),
            Err(EvalError::BadThreshold { k: 5, t: 6 })
        ));
    }

    #[test]
    fn hundred_patient_split() {
        let roster: Vec<(String, Label)> = (0..100)
            .map(|i| (format!("p{i:03}"), Label::from_bool(i % 2 == 0)))
            .collect();
        let s = stratified_split(&roster, DEFAULT_RATIOS, 7).unwrap();
        assert_eq!(s.ids(Split::Train).len(), 70);
        let val = s.ids(Split::Val).len();
        assert!((14..=16).contains(&val));
        assert_eq!(s, stratified_split(&roster, DEFAULT_RATIOS, 7).unwrap());
    }

    #[test]
    fn split_needs_both_classes() {
        let roster = vec![("a".to_string(), P), ("b".to_string(), P)];
        assert!(matches!(
            stratified_split(&roster, DEFAULT_RATIOS, 0),
            Err(EvalError::EmptyClass(N))
        ));
    }

    #[test]
    fn single_run_avg_equals_best() {
        let r = MetricsReport::new(vec![run(3, Split::Val, 0.75, 0.5)]);
        let avg = r.avg_for(VariantId::A, Split::Val).unwrap();
        let best = r.best_for(VariantId::A, Split::Val).unwrap();
        assert_eq!(avg.accuracy, best.slice.accuracy);
        assert_eq!(avg.loss, best.slice.loss);
    }

    #[test]
    fn best_tie_breaks() {
        let r = MetricsReport::new(vec![
            run(5, Split::Val, 0.9, 0.3),
            run(2, Split::Val, 0.9, 0.2),
            run(1, Split::Val, 0.9, 0.2),
            run(0, Split::Val, 0.8, 0.1),
        ]);
        assert_eq!(r.best_for(VariantId::A, Split::Val).unwrap().seed, 1);
    }
}
