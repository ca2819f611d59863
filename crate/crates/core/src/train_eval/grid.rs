use serde::{Deserialize, Serialize};

use super::cv::run_folds;
use super::train::TrainConfig;
use crate::data::{split, MultiRateSample, SplitPlan};
use crate::error::{Error, Result};

/// `0.1, 0.2, ..., 1.0`.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tau: f64,
    pub k: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_macro_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }
}

/// Index of the cell with the highest validation accuracy; ties go to the
/// lexicographically smallest `(tau, k)`.
pub fn select_best(cells: &[GridCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &cells[b];
                let better = c.val_accuracy > cur.val_accuracy
                    || (c.val_accuracy == cur.val_accuracy && (c.tau, c.k) < (cur.tau, cur.k));
                Some(if better { i } else { b })
            }
        };
    }
    best
}

const TABLE_HEADER: &str = "tau,k,val_accuracy,test_accuracy,test_macro_recall";

/// CSV rendering of the grid; floats use shortest round-trip formatting so the
/// table reproduces the selection exactly.
pub fn grid_table(cells: &[GridCell]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{},{}\n", c.tau, c.k, c.val_accuracy, c.test_accuracy, c.test_macro_recall));
    }
    out
}

pub fn parse_grid_table(text: &str) -> Result<Vec<GridCell>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TABLE_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("expected header '{TABLE_HEADER}'") }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v = l
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            if v.len() != 5 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected 5 fields, got {}", v.len()) });
            }
            Ok(GridCell { tau: v[0], k: v[1], val_accuracy: v[2], test_accuracy: v[3], test_macro_recall: v[4] })
        })
        .collect()
}

/// One cross-validation per `(tau, k)` pair, evaluated in `(tau, k)` order.
/// `epochs_per_cell` shortens each run for desk-scale searches.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    config: &TrainConfig,
    data: &[MultiRateSample],
    classes: usize,
    plan: &SplitPlan,
    taus: &[f64],
    ks: &[f64],
    epochs_per_cell: Option<usize>,
    jobs: usize,
) -> Result<GridResult> {
    if taus.is_empty() || ks.is_empty() {
        return Err(Error::Parameter("grid search needs non-empty tau and k grids".into()));
    }
    let folds = split(data, plan)?;
    let mut cells = Vec::with_capacity(taus.len() * ks.len());
    for &tau in taus {
        for &k in ks {
            let cfg = TrainConfig { tau, k, epochs: epochs_per_cell.unwrap_or(config.epochs), ..config.clone() };
            let cv = run_folds(&cfg, data, classes, &folds, jobs)?;
            cells.push(GridCell {
                tau,
                k,
                val_accuracy: cv.mean_val_accuracy,
                test_accuracy: cv.aggregate.accuracy,
                test_macro_recall: cv.aggregate.macro_recall,
            });
        }
    }
    let best = select_best(&cells).expect("non-empty grid");
    Ok(GridResult { cells, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(tau: f64, k: f64, val: f64) -> GridCell {
        GridCell { tau, k, val_accuracy: val, test_accuracy: 0.0, test_macro_recall: 0.0 }
    }

    #[test]
    fn default_grid_is_tenths() {
        let g = default_grid();
        assert_eq!(g.len() * g.len(), 100);
        assert!(g.contains(&0.4) && g.contains(&0.3));
        assert_eq!(g[0], 0.1);
        assert_eq!(g[9], 1.0);
    }

    #[test]
    fn ties_prefer_smallest_pair() {
        let cells = [cell(0.5, 0.1, 80.0), cell(0.2, 0.9, 80.0), cell(0.2, 0.3, 80.0), cell(0.9, 0.9, 70.0)];
        assert_eq!(select_best(&cells), Some(2));
        assert_eq!(select_best(&[cell(0.4, 0.3, 1.0)]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn table_parse_errors() {
        assert!(parse_grid_table("tau,k\n").is_err());
        let bad = format!("{TABLE_HEADER}\n0.1,0.2,x,1,1\n");
        assert!(matches!(parse_grid_table(&bad), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn table_round_trip_reproduces_selection(vals in prop::collection::vec(0u8..5, 1..30), seed in 0u64..1000) {
            let cells: Vec<GridCell> = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| GridCell {
                    tau: ((i as u64 * 7 + seed) % 10 + 1) as f64 / 10.0,
                    k: ((i as u64 * 3 + seed) % 10 + 1) as f64 / 10.0,
                    val_accuracy: 100.0 * v as f64 / 7.0,
                    test_accuracy: 1.0 / (i as f64 + 3.0),
                    test_macro_recall: 0.1 * i as f64,
                })
                .collect();
            let parsed = parse_grid_table(&grid_table(&cells)).unwrap();
            prop_assert_eq!(&parsed, &cells);
            prop_assert_eq!(select_best(&parsed), select_best(&cells));
        }
    }
}
