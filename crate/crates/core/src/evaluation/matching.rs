//! Optimal one-to-one assignment of predicted to ground-truth boxes.

use crate::boxes::BoundingBox;

/// Intersection over union of two boxes, by pixel area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// A prediction paired with a ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Result of [`match_boxes`]: the pairs plus the indices left over when the
/// two lists differ in length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<Match>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Assignment {
    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|m| m.iou).sum()
    }

    /// The pair covering ground truth `gt`, if any.
    pub fn for_gt(&self, gt: usize) -> Option<&Match> {
        self.pairs.iter().find(|m| m.gt == gt)
    }
}

/// Minimum-cost perfect matching of the rows of a `rows × cols` cost matrix
/// (`rows <= cols`) into distinct columns; returns the column of each row.
/// Shortest augmenting paths with row and column potentials, O(rows²·cols).
pub fn min_cost_assignment(
    rows: usize,
    cols: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> Vec<usize> {
    assert!(rows <= cols, "more rows than columns");
    // 1-based with column 0 as the virtual source, after the classic formulation.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut row_of = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; rows];
    for j in 1..=cols {
        if row_of[j] != 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

const TIE_TOLERANCE: f64 = 1e-9;

/// Best total IoU when the rows in `fixed` are pinned to their columns and
/// the remaining `free_rows` choose among `free_cols`.
fn best_total(weights: &[Vec<f64>], free_rows: &[usize], free_cols: &[usize]) -> f64 {
    if free_rows.is_empty() {
        return 0.0;
    }
    let assign = min_cost_assignment(free_rows.len(), free_cols.len(), |r, c| {
        -weights[free_rows[r]][free_cols[c]]
    });
    assign
        .iter()
        .enumerate()
        .map(|(r, &c)| weights[free_rows[r]][free_cols[c]])
        .sum()
}

/// Pairs predictions with ground truths so the total IoU is maximal. Pairs
/// with zero overlap are still reported as pairs.
///
/// Ties: read an assignment as the partner index of each entry of the shorter
/// list (predictions when the lists are equally long), in order. Among
/// optimal assignments the lexicographically smallest such sequence wins.
pub fn match_boxes(preds: &[BoundingBox], gts: &[BoundingBox]) -> Assignment {
    // Work with the shorter list as rows.
    let transpose = preds.len() > gts.len();
    let (rows, cols) = if transpose {
        (gts, preds)
    } else {
        (preds, gts)
    };
    let weights: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| cols.iter().map(|c| iou(r, c)).collect())
        .collect();

    let mut free_cols: Vec<usize> = (0..cols.len()).collect();
    let target = best_total(&weights, &(0..rows.len()).collect::<Vec<_>>(), &free_cols);
    let mut fixed_total = 0.0;
    let mut chosen = Vec::with_capacity(rows.len());
    // Pin each row to the lowest-index column that still allows an optimum.
    for r in 0..rows.len() {
        let rest: Vec<usize> = (r + 1..rows.len()).collect();
        let mut pick = None;
        for (pos, &c) in free_cols.iter().enumerate() {
            let mut remaining = free_cols.clone();
            remaining.remove(pos);
            let total = fixed_total + weights[r][c] + best_total(&weights, &rest, &remaining);
            if total >= target - TIE_TOLERANCE {
                pick = Some(pos);
                break;
            }
        }
        let pos = pick.expect("an optimal completion always exists");
        let c = free_cols.remove(pos);
        fixed_total += weights[r][c];
        chosen.push(c);
    }

    let mut pairs: Vec<Match> = chosen
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            let (pred, gt) = if transpose { (c, r) } else { (r, c) };
            Match {
                pred,
                gt,
                iou: weights[r][c],
            }
        })
        .collect();
    pairs.sort_by_key(|m| (m.pred, m.gt));
    let unmatched_preds = (0..preds.len())
        .filter(|p| pairs.iter().all(|m| m.pred != *p))
        .collect();
    let unmatched_gts = (0..gts.len())
        .filter(|g| pairs.iter().all(|m| m.gt != *g))
        .collect();
    Assignment {
        pairs,
        unmatched_preds,
        unmatched_gts,
    }
}
