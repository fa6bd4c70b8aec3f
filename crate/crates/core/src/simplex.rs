//! Euclidean projections onto (weighted) probability simplices.

/// Projection of `v` onto `{ w >= 0, sum_i w_i = 1 }`.
pub fn project(v: &[f64]) -> Vec<f64> {
    project_weighted(v, &vec![1.0; v.len()])
}

/// Projection of `v` onto `{ w >= 0, sum_i a_i w_i = 1 }` for positive `a`.
///
/// The solution has the form `w_i = max(v_i - theta * a_i, 0)`; `theta` is
/// found by scanning the breakpoints `v_i / a_i` in decreasing order.
pub fn project_weighted(v: &[f64], a: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), a.len(), "weight vector length");
    assert!(a.iter().all(|&ai| ai > 0.0), "simplex weights must be positive");
    if v.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| (v[j] / a[j]).total_cmp(&(v[i] / a[i])));
    let mut num = -1.0;
    let mut den = 0.0;
    let mut theta = 0.0;
    // the largest ratio always stays in the support, so the scan sets theta
    for &i in &order {
        let cand_num = num + a[i] * v[i];
        let cand_den = den + a[i] * a[i];
        let cand = cand_num / cand_den;
        if v[i] - cand * a[i] > 0.0 {
            num = cand_num;
            den = cand_den;
            theta = cand;
        } else {
            break;
        }
    }
    v.iter().zip(a).map(|(&vi, &ai)| (vi - theta * ai).max(0.0)).collect()
}
