use std::collections::BTreeMap;

use super::{RunRecord, SweepMode};
use crate::metrics::MetricsRecord;
use crate::suite::Category;

/// Aggregated metrics, in column order.
pub const METRIC_NAMES: [&str; 7] = ["ta1", "ta2", "ta_mean", "ic", "bc", "occupancy2", "turning_frame"];

fn metric_values(m: &MetricsRecord) -> [Option<f64>; 7] {
    [
        Some(m.ta1),
        Some(m.ta2),
        Some(m.ta_mean),
        Some(m.ic),
        Some(m.bc),
        Some(m.occupancy2),
        m.turning_frame.map(|t| t as f64),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub mode: SweepMode,
    pub category: Category,
    pub x: f64,
    pub setting: u8,
    /// Successful runs in the group.
    pub n: usize,
    /// Per metric, in [`METRIC_NAMES`] order. `NaN` when no run reported the
    /// metric (a turning frame is undefined for parallel headings).
    pub mean: [f64; 7],
    /// Population standard deviation.
    pub std: [f64; 7],
}

impl AggregateRow {
    pub fn metric(&self, name: &str) -> Option<(f64, f64)> {
        let i = METRIC_NAMES.iter().position(|m| *m == name)?;
        Some((self.mean[i], self.std[i]))
    }
}

fn x_key(x: f64) -> u64 {
    // Grid values are non-negative, where bit order equals numeric order.
    (x + 0.0).to_bits()
}

/// Groups successful runs by `(mode, category, x, setting)`. Output is sorted
/// by that key and each group is reduced in `run_id` order, so the result does
/// not depend on input order.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(SweepMode, Category, u64, u8), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metrics.is_some()) {
        groups
            .entry((r.mode, r.category, x_key(r.x), r.setting))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((mode, category, xk, setting), mut rs)| {
            rs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
            let mut mean = [f64::NAN; 7];
            let mut std = [f64::NAN; 7];
            for k in 0..METRIC_NAMES.len() {
                let vals: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| metric_values(r.metrics.as_ref().expect("filtered"))[k])
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let n = vals.len() as f64;
                let mu = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                mean[k] = mu;
                std[k] = var.sqrt();
            }
            AggregateRow {
                mode,
                category,
                x: f64::from_bits(xk),
                setting,
                n: rs.len(),
                mean,
                std,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::View;

    pub(crate) fn rec(id: &str, x: f64, ta2: f64) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            mode: SweepMode::StepSwitch,
            category: Category::General,
            prompt_id: "p".into(),
            view: View::Third,
            x,
            setting: 0,
            seed: 0,
            metrics: Some(MetricsRecord {
                ta1: 0.5,
                ta2,
                ta_mean: (0.5 + ta2) / 2.0,
                ic: 1.0,
                bc: 1.0,
                turning_frame: None,
                occupancy2: 0.5,
            }),
            error: None,
            wall_time_ms: 0.0,
        }
    }

    #[test]
    fn two_record_mean_and_population_std() {
        let rows = aggregate(&[rec("a", 0.0, 0.2), rec("b", 0.0, 0.8)]);
        assert_eq!(rows.len(), 1);
        let (m, s) = rows[0].metric("ta2").unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert!((s - 0.3).abs() < 1e-15);
        assert!(rows[0].metric("turning_frame").unwrap().0.is_nan());
    }

    #[test]
    fn single_record_has_zero_std() {
        let rows = aggregate(&[rec("a", 0.4, 0.7)]);
        assert_eq!(rows[0].metric("ta2").unwrap(), (0.7, 0.0));
    }

    #[test]
    fn empty_and_failed_inputs() {
        assert!(aggregate(&[]).is_empty());
        let mut r = rec("a", 0.0, 0.1);
        r.metrics = None;
        assert!(aggregate(&[r]).is_empty());
    }

    #[test]
    fn sorted_by_key() {
        let rows = aggregate(&[rec("a", 0.9, 0.1), rec("b", 0.1, 0.1), rec("c", 0.5, 0.1)]);
        let xs: Vec<f64> = rows.iter().map(|r| r.x).collect();
        assert_eq!(xs, vec![0.1, 0.5, 0.9]);
    }
}
