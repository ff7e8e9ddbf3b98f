//! Counting metrics (rooted MSE, MAE, NAE), cross-task averaging, and the
//! after-each-task evaluation matrix.

use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::CoreError;
use crate::network::ModelState;
use crate::Result;

/// One scored test sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task: usize,
    pub sample_id: String,
    pub predicted: f64,
    pub actual: f64,
}

/// sqrt of the mean squared count error.
pub fn rmse(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::EmptyRecords);
    }
    let mean_sq = records
        .iter()
        .map(|r| (r.predicted - r.actual).powi(2))
        .sum::<f64>()
        / records.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Mean absolute count error.
pub fn mae(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::EmptyRecords);
    }
    Ok(records
        .iter()
        .map(|r| (r.predicted - r.actual).abs())
        .sum::<f64>()
        / records.len() as f64)
}

/// Mean of |predicted - actual| / actual; rejects zero ground truths with
/// the offending sample id.
pub fn nae(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::EmptyRecords);
    }
    for r in records {
        if r.actual == 0.0 {
            return Err(CoreError::ZeroGroundTruth {
                sample_id: r.sample_id.clone(),
            });
        }
    }
    Ok(records
        .iter()
        .map(|r| (r.predicted - r.actual).abs() / r.actual)
        .sum::<f64>()
        / records.len() as f64)
}

/// Unweighted mean over per-task NAE values.
pub fn avg_nae(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(CoreError::EmptyRecords);
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub nae: f64,
}

/// Metrics for every seen task after finishing task `t_eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub t_eval: usize,
    /// Index tau-1 holds task tau's metrics.
    pub per_task: Vec<TaskMetrics>,
    /// Unweighted mean NAE over the seen tasks.
    pub avg_nae: f64,
    /// Test samples excluded from NAE for zero ground truth.
    pub excluded_zero_gt: usize,
}

/// The triangular after-each-task record behind the result tables and
/// forgetting curves.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<EvalRow>,
}

impl MetricsReport {
    /// NAE matrix entry `[t_eval][tau]` (both 1-based).
    pub fn nae_at(&self, t_eval: usize, tau: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.t_eval == t_eval)
            .and_then(|r| r.per_task.get(tau - 1))
            .map(|m| m.nae)
    }

    pub fn final_row(&self) -> Option<&EvalRow> {
        self.rows.last()
    }
}

/// Score every task seen so far: runs task-aware inference over each test
/// split and aggregates the three metrics plus the running NAE average.
pub fn sequence_eval(
    state: &ModelState,
    test_sets: &[TaskDataset],
    t_eval: usize,
) -> Result<EvalRow> {
    if t_eval == 0 || t_eval > state.completed_tasks {
        return Err(CoreError::UnknownTask {
            index: t_eval,
            completed: state.completed_tasks,
        });
    }
    if test_sets.len() < t_eval {
        return Err(CoreError::MissingTestSet {
            task: test_sets.len() + 1,
        });
    }
    let mut per_task = Vec::with_capacity(t_eval);
    let mut excluded = 0;
    for tau in 1..=t_eval {
        let split = &test_sets[tau - 1].test;
        if split.is_empty() {
            return Err(CoreError::MissingTestSet { task: tau });
        }
        let mut records = Vec::with_capacity(split.len());
        for sample in split {
            let (_, count) = state.infer_task(&sample.image, tau)?;
            records.push(PredictionRecord {
                task: tau,
                sample_id: sample.source_id.clone(),
                predicted: count,
                actual: sample.points.len() as f64,
            });
        }
        let nae_records: Vec<PredictionRecord> = records
            .iter()
            .filter(|r| r.actual > 0.0)
            .cloned()
            .collect();
        excluded += records.len() - nae_records.len();
        per_task.push(TaskMetrics {
            rmse: rmse(&records)?,
            mae: mae(&records)?,
            nae: if nae_records.is_empty() {
                f64::NAN
            } else {
                nae(&nae_records)?
            },
        });
    }
    let naes: Vec<f64> = per_task.iter().map(|m| m.nae).collect();
    Ok(EvalRow {
        t_eval,
        avg_nae: avg_nae(&naes)?,
        per_task,
        excluded_zero_gt: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, predicted: f64, actual: f64) -> PredictionRecord {
        PredictionRecord {
            task: 1,
            sample_id: id.into(),
            predicted,
            actual,
        }
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let rs = vec![rec("a", 5.0, 5.0), rec("b", 9.0, 9.0)];
        assert_eq!(rmse(&rs).unwrap(), 0.0);
        assert_eq!(mae(&rs).unwrap(), 0.0);
        assert_eq!(nae(&rs).unwrap(), 0.0);
    }

    #[test]
    fn single_all_zero_prediction() {
        let rs = vec![rec("a", 0.0, 10.0)];
        assert_eq!(rmse(&rs).unwrap(), 10.0);
        assert_eq!(mae(&rs).unwrap(), 10.0);
        assert_eq!(nae(&rs).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_pair() {
        let rs = vec![rec("a", 8.0, 10.0), rec("b", 12.0, 10.0)];
        assert_eq!(rmse(&rs).unwrap(), 2.0);
        assert_eq!(mae(&rs).unwrap(), 2.0);
        assert!((nae(&rs).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn all_zero_predictor_nae_is_exactly_one() {
        let rs: Vec<PredictionRecord> = (1..=7)
            .map(|i| rec(&format!("s{i}"), 0.0, (i * 3) as f64))
            .collect();
        assert_eq!(nae(&rs).unwrap(), 1.0);
    }

    #[test]
    fn zero_ground_truth_is_rejected_with_id() {
        let rs = vec![rec("good", 1.0, 2.0), rec("offender", 1.0, 0.0)];
        match nae(&rs) {
            Err(CoreError::ZeroGroundTruth { sample_id }) => assert_eq!(sample_id, "offender"),
            other => panic!("expected ZeroGroundTruth, got {other:?}"),
        }
    }

    #[test]
    fn rmse_dominates_mae() {
        // power-mean inequality on a few fixed record sets
        let sets = [
            vec![rec("a", 1.0, 4.0), rec("b", 9.0, 2.0), rec("c", 3.0, 3.0)],
            vec![rec("a", 0.5, 1.0), rec("b", 10.0, 3.0)],
            vec![rec("a", 2.0, 2.0)],
        ];
        for rs in &sets {
            let r = rmse(rs).unwrap();
            let m = mae(rs).unwrap();
            assert!(r >= m && m >= 0.0, "rmse {r} mae {m}");
        }
    }

    #[test]
    fn averages() {
        assert_eq!(avg_nae(&[0.2, 0.2, 0.2]).unwrap(), 0.2);
        assert_eq!(avg_nae(&[0.0, 1.0]).unwrap(), 0.5);
        let four = [0.12, 0.5, 0.31, 0.07];
        let hand = (0.12 + 0.5 + 0.31 + 0.07) / 4.0;
        assert!((avg_nae(&four).unwrap() - hand).abs() < 1e-12);
        assert!(matches!(avg_nae(&[]), Err(CoreError::EmptyRecords)));
        assert!(matches!(rmse(&[]), Err(CoreError::EmptyRecords)));
    }
}
