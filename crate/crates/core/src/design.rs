//! Covariate rows shared by the attendance models and outcome regressions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{SubjectRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::regime::Arm;

/// Which optional time-varying covariates a dataset records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub has_w1: bool,
    pub has_w2: bool,
}

impl Layout {
    pub fn of(data: &TrialDataset) -> Self {
        Layout {
            has_w1: data.has_w1(),
            has_w2: data.has_w2(),
        }
    }

    /// Number of features for the history through visit `t - 1`.
    pub fn width(&self, t: usize) -> usize {
        match t {
            1 => 4,
            2 => 7 + usize::from(self.has_w1),
            _ => 8 + usize::from(self.has_w1) + usize::from(self.has_w2),
        }
    }
}

fn ind(b: bool) -> f64 {
    f64::from(u8::from(b))
}

/// Arm indicators plus main terms for the history available before visit
/// `t`, with the arms set to `(a0, a1)` rather than the recorded ones.
///
/// * `t = 1`: `1(a0=1), 1(a0=2), w0, y0`
/// * `t = 2`: `1(1,1), 1(2,2), 1(1,3), 1(2,3), w0, y0, [w1], y1`
/// * `t = 3`: the above plus `[w2], y2`
pub fn history_features(
    t: usize,
    a0: Arm,
    a1: Arm,
    record: &SubjectRecord,
    layout: Layout,
) -> Result<Vec<f64>> {
    let missing = |what: &str| {
        Error::Validation {
            ids: vec![record.id.clone()],
            reason: format!("{what} needed for the visit-{t} history but absent"),
        }
    };
    if t == 1 {
        return Ok(vec![
            ind(a0 == Arm::Text),
            ind(a0 == Arm::Webapp),
            record.w0,
            f64::from(record.y0),
        ]);
    }
    let mut row = vec![
        ind(a0 == Arm::Text && a1 == Arm::Text),
        ind(a0 == Arm::Webapp && a1 == Arm::Webapp),
        ind(a0 == Arm::Text && a1 == Arm::ECoaching),
        ind(a0 == Arm::Webapp && a1 == Arm::ECoaching),
        record.w0,
        f64::from(record.y0),
    ];
    if layout.has_w1 {
        row.push(record.w1.ok_or_else(|| missing("w1"))?);
    }
    row.push(f64::from(record.y1.ok_or_else(|| missing("y1"))?));
    if t >= 3 {
        if layout.has_w2 {
            row.push(record.w2.ok_or_else(|| missing("w2"))?);
        }
        row.push(f64::from(record.y2.ok_or_else(|| missing("y2"))?));
    }
    Ok(row)
}

pub fn to_matrix(rows: &[Vec<f64>], width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::record;

    #[test]
    fn feature_rows() {
        let r = record(1, 2, Some(5), Some(3));
        let layout = Layout { has_w1: false, has_w2: false };
        assert_eq!(history_features(1, Arm::Text, Arm::Text, &r, layout).unwrap(), vec![1.0, 0.0, r.w0, 2.0]);
        let f2 = history_features(2, Arm::Text, Arm::ECoaching, &r, layout).unwrap();
        assert_eq!(f2, vec![0.0, 0.0, 1.0, 0.0, r.w0, 2.0, 5.0]);
        assert_eq!(f2.len(), layout.width(2));
        let f0 = history_features(2, Arm::Control, Arm::Control, &r, layout).unwrap();
        assert_eq!(&f0[..4], &[0.0; 4]);
    }
}
