//! Removal of linearly dependent equality rows.

/// Result of scanning equality rows for dependence.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum RowSelection {
    /// Indices of a maximal independent subset, in original order.
    Independent(Vec<usize>),
    /// Row `index` is a combination of earlier rows with a different right-hand side.
    Inconsistent { index: usize },
}

/// Gaussian elimination over dense copies of the rows. Kept rows are
/// returned by index so the caller retains the original sparse rows.
pub(crate) fn independent_rows(rows: &[(Vec<f64>, f64)], tol: f64) -> RowSelection {
    // Echelon basis: (pivot column, reduced row, reduced rhs).
    let mut basis: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    let mut keep = Vec::new();
    for (index, (row, rhs)) in rows.iter().enumerate() {
        let scale = row.iter().fold(0.0_f64, |m, a| m.max(a.abs())).max(1.0);
        let mut r = row.clone();
        let mut b = *rhs;
        for (pivot, brow, bb) in &basis {
            let f = r[*pivot] / brow[*pivot];
            if f != 0.0 {
                for (ri, bi) in r.iter_mut().zip(brow) {
                    *ri -= f * bi;
                }
                b -= f * bb;
            }
        }
        let (pivot, peak) = r
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |(pj, pv), (j, a)| if a.abs() > pv { (j, a.abs()) } else { (pj, pv) });
        if peak <= tol * scale {
            if b.abs() > tol * (1.0 + rhs.abs()) {
                return RowSelection::Inconsistent { index };
            }
            continue;
        }
        basis.push((pivot, r, b));
        keep.push(index);
    }
    RowSelection::Independent(keep)
}
