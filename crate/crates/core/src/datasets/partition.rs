use serde::{Deserialize, Serialize};

use super::{slice_id, DataError, Family};

/// Measured pair accuracy of one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAccuracy {
    pub family: Family,
    pub n_distractors: usize,
    pub cue_position: usize,
    pub accuracy: f64,
    pub pairs: usize,
}

impl SliceAccuracy {
    pub fn slice_id(&self) -> String {
        slice_id(self.family, self.n_distractors, self.cue_position)
    }
}

// Accuracies are ratios of pair counts; quantizing keeps 0.45 and 0.55 tied.
fn distance(accuracy: f64) -> i64 {
    ((accuracy - 0.5).abs() * 1e9).round() as i64
}

/// The slice whose accuracy is nearest 0.5; ties go to fewer distractors,
/// then the lower cue position.
pub fn select_partition(results: &[SliceAccuracy]) -> Result<&SliceAccuracy, DataError> {
    results
        .iter()
        .min_by(|a, b| {
            distance(a.accuracy)
                .cmp(&distance(b.accuracy))
                .then(a.n_distractors.cmp(&b.n_distractors))
                .then(a.cue_position.cmp(&b.cue_position))
        })
        .ok_or_else(|| DataError::Parameter("no slice accuracies to choose from".into()))
}
