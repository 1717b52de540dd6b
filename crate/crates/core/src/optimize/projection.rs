/// Euclidean projection onto `{x >= 0, sum(x) <= cap}`, in place.
pub(crate) fn project_capped_simplex(x: &mut [f64], cap: f64) {
    let clamped: f64 = x.iter().map(|v| v.max(0.0)).sum();
    if clamped <= cap {
        for v in x.iter_mut() {
            *v = v.max(0.0);
        }
        return;
    }
    // projection onto the face sum(x) = cap
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - cap) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn inside_points_are_fixed() {
        let mut x = [0.1, 0.2, 0.0];
        project_capped_simplex(&mut x, 1.0);
        assert_eq!(x, [0.1, 0.2, 0.0]);
    }

    #[test]
    fn clamps_and_caps() {
        let mut x = [-1.0, 0.5];
        project_capped_simplex(&mut x, 1.0);
        assert_eq!(x, [0.0, 0.5]);
        let mut x = [1.0, 1.0];
        project_capped_simplex(&mut x, 1.0);
        assert_eq!(x, [0.5, 0.5]);
        let mut x = [2.0, 0.1, -3.0];
        project_capped_simplex(&mut x, 1.0);
        assert_eq!(x, [1.0, 0.0, 0.0]);
    }

    proptest! {
        // the projection is feasible and no feasible point is closer
        #[test]
        fn projection_is_optimal(
            x in proptest::collection::vec(-2.0f64..2.0, 1..8),
            probe in proptest::collection::vec(0.0f64..1.0, 8),
            cap in 0.1f64..1.5,
        ) {
            let mut p = x.clone();
            project_capped_simplex(&mut p, cap);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!(p.iter().sum::<f64>() <= cap + 1e-12);
            let mut q: Vec<f64> = probe[..x.len()].to_vec();
            let s: f64 = q.iter().sum();
            if s > cap {
                for v in &mut q { *v *= cap / s; }
            }
            let d = |a: &[f64]| a.iter().zip(&x).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            prop_assert!(d(&p) <= d(&q) + 1e-12);
        }
    }
}
