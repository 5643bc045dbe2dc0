use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{largest_remainder, CohortManifest};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl Fold {
    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        }
    }
}

/// Subject-level fold assignment. Every row of a subject inherits its fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: BTreeMap<String, Fold>,
    /// knee_id -> subject_id, so feature rows can be routed by knee.
    pub knee_subject: BTreeMap<String, String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitPlan {
    pub fn fold_of_subject(&self, subject: &str) -> Option<Fold> {
        self.folds.get(subject).copied()
    }

    pub fn fold_of_knee(&self, knee_id: &str) -> Option<Fold> {
        self.knee_subject.get(knee_id).and_then(|s| self.fold_of_subject(s))
    }

    pub fn subjects(&self, fold: Fold) -> Vec<&str> {
        self.folds.iter().filter(|(_, f)| **f == fold).map(|(s, _)| s.as_str()).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for f in self.folds.values() {
            c[*f as usize] += 1;
        }
        c
    }

    /// Errors unless every knee in `knee_ids` belongs to a `fold` subject.
    pub fn assert_fold(&self, knee_ids: &[&str], fold: Fold) -> Result<()> {
        for k in knee_ids {
            match self.fold_of_knee(k) {
                Some(f) if f == fold => {}
                Some(f) => {
                    return Err(Error::Data(format!(
                        "leakage: knee {k} belongs to the {} fold, expected {}",
                        f.as_str(),
                        fold.as_str()
                    )))
                }
                None => return Err(Error::Data(format!("knee {k} is not in the split plan"))),
            }
        }
        Ok(())
    }
}

/// Seeded shuffle of subject ids, then contiguous train/val/test blocks
/// sized by largest-remainder rounding.
pub fn split_subjects(manifest: &CohortManifest, fractions: [f64; 3], seed: u64) -> Result<SplitPlan> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Split(format!("fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let subjects: BTreeSet<&str> = manifest.records.iter().map(|r| r.subject_id.as_str()).collect();
    if subjects.len() < 3 {
        return Err(Error::Split(format!("need at least 3 subjects, found {}", subjects.len())));
    }
    let mut order: Vec<&str> = subjects.into_iter().collect();
    order.shuffle(&mut seed::substream(seed, &["split"]));
    let sizes = largest_remainder(&fractions, order.len())?;
    let mut folds = BTreeMap::new();
    let mut it = order.into_iter();
    for (fold, n) in [Fold::Train, Fold::Val, Fold::Test].into_iter().zip(sizes) {
        for s in it.by_ref().take(n) {
            folds.insert(s.to_string(), fold);
        }
    }
    let knee_subject = manifest.records.iter().map(|r| (r.knee_id.clone(), r.subject_id.clone())).collect();
    Ok(SplitPlan { folds, knee_subject, fractions, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortSpec};
    use crate::projector::ResolutionProfile;

    #[test]
    fn default_cohort_split() {
        let m = generate_cohort(&CohortSpec::default_for(&ResolutionProfile::desk(), 3)).unwrap();
        let plan = split_subjects(&m, [0.7, 0.15, 0.15], 11).unwrap();
        assert_eq!(plan.counts(), [126, 27, 27]);
        assert_eq!(plan, split_subjects(&m, [0.7, 0.15, 0.15], 11).unwrap());
        for r in &m.records {
            assert_eq!(plan.fold_of_knee(&r.knee_id), plan.fold_of_subject(&r.subject_id));
        }
        let test: Vec<&str> = m.records.iter().filter(|r| plan.fold_of_knee(&r.knee_id) == Some(Fold::Test)).map(|r| r.knee_id.as_str()).collect();
        assert!(plan.assert_fold(&test, Fold::Test).is_ok());
        assert!(plan.assert_fold(&test, Fold::Train).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let mut spec = CohortSpec::default_for(&ResolutionProfile::desk(), 3);
        let m = generate_cohort(&spec).unwrap();
        assert!(matches!(split_subjects(&m, [0.5, 0.2, 0.2], 1), Err(Error::Split(_))));
        spec.n_subjects = 2;
        spec.n_knees = 2;
        let small = generate_cohort(&spec).unwrap();
        assert!(matches!(split_subjects(&small, [0.7, 0.15, 0.15], 1), Err(Error::Split(_))));
    }
}
