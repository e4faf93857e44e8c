//! Scoring: Main Role Accuracy, Exact Match Ratio, and dataset statistics.
//!
//! Exact match compares fine roles as sets with no partial credit; the
//! likelihood ordering of a prediction is a prompt instruction, not part of
//! the gold annotation.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::corpus::GoldLabel;
use crate::inference::Prediction;
use crate::taxonomy::MainRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MainRoleCounts {
    /// Instances whose gold main role is this role.
    pub gold: usize,
    /// Of those, how many predictions got the main role right.
    pub correct_main: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    /// Main Role Accuracy.
    pub mra: f64,
    /// Exact Match Ratio.
    pub emr: f64,
    pub main_matches: usize,
    pub exact_matches: usize,
    pub per_main: BTreeMap<MainRole, MainRoleCounts>,
    pub flagged_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty instance set")]
    EmptyInput,
}

/// True iff the main role matches and the fine-role sets are equal.
pub fn exact_match(pred: &Prediction, gold: &GoldLabel) -> bool {
    if pred.main != gold.main {
        return false;
    }
    let predicted: BTreeSet<_> = pred.fine.iter().collect();
    let golden: BTreeSet<_> = gold.fine.iter().collect();
    predicted == golden
}

/// Score aligned (prediction, gold) pairs.
pub fn evaluate(pairs: &[(Prediction, GoldLabel)]) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = pairs.len();
    let mut main_matches = 0;
    let mut exact_matches = 0;
    let mut flagged_count = 0;
    let mut per_main: BTreeMap<MainRole, MainRoleCounts> = MainRole::ALL
        .into_iter()
        .map(|m| {
            (
                m,
                MainRoleCounts {
                    gold: 0,
                    correct_main: 0,
                },
            )
        })
        .collect();
    for (pred, gold) in pairs {
        let counts = per_main.get_mut(&gold.main).expect("all mains present");
        counts.gold += 1;
        if pred.main == gold.main {
            main_matches += 1;
            counts.correct_main += 1;
        }
        if exact_match(pred, gold) {
            exact_matches += 1;
        }
        if pred.flagged {
            flagged_count += 1;
        }
    }
    Ok(EvalReport {
        n,
        mra: main_matches as f64 / n as f64,
        emr: exact_matches as f64 / n as f64,
        main_matches,
        exact_matches,
        per_main,
        flagged_count,
    })
}

/// Arithmetic mean of gold fine-role list lengths.
pub fn avg_fine_roles(golds: &[GoldLabel]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let total: usize = golds.iter().map(|g| g.fine.len()).sum();
    Ok(total as f64 / golds.len() as f64)
}
