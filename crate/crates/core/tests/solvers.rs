mod common;

use num_rational::Ratio;
use rand::Rng;
use sampled_cbf::linalg::{Mat, Vector};
use sampled_cbf::opt::lp::{solve_lp, LpProblem, LpStatus, Sense};
use sampled_cbf::opt::polyfit::polyfit;
use sampled_cbf::opt::qp::{solve_qp, QpStatus};

type Q = Ratio<i128>;

/// Exact tableau simplex for max cᵀx s.t. Ax ≤ b, x ≥ 0 with b ≥ 0 (the origin is a
/// feasible basis). Bland's rule, so it terminates on degenerate data.
fn rational_simplex(c: &[i64], a: &[&[i64]], b: &[i64]) -> Option<Q> {
    let (m, n) = (a.len(), c.len());
    let w = n + m + 1;
    let mut t: Vec<Vec<Q>> = (0..m)
        .map(|i| {
            let mut row = vec![Q::from_integer(0); w];
            for j in 0..n {
                row[j] = Q::from_integer(a[i][j] as i128);
            }
            row[n + i] = Q::from_integer(1);
            row[w - 1] = Q::from_integer(b[i] as i128);
            row
        })
        .collect();
    // reduced costs of the maximization, objective value in the last column
    let mut z = vec![Q::from_integer(0); w];
    for j in 0..n {
        z[j] = Q::from_integer(-c[j] as i128);
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    loop {
        let Some(col) = (0..w - 1).find(|&j| z[j] < Q::from_integer(0)) else {
            return Some(z[w - 1]);
        };
        let mut pick: Option<(usize, Q)> = None;
        for i in 0..m {
            if t[i][col] > Q::from_integer(0) {
                let ratio = t[i][w - 1] / t[i][col];
                let better = match &pick {
                    None => true,
                    Some((r, best)) => ratio < *best || (ratio == *best && basis[i] < basis[*r]),
                };
                if better {
                    pick = Some((i, ratio));
                }
            }
        }
        let (r, _) = pick?;
        let p = t[r][col];
        for v in t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = t[r].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != r && row[col] != Q::from_integer(0) {
                let f = row[col];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        let f = z[col];
        for (v, pv) in z.iter_mut().zip(&pivot_row) {
            *v -= f * pv;
        }
        basis[r] = col;
    }
}

fn float_lp(c: &[i64], a: &[&[i64]], b: &[i64]) -> f64 {
    let n = c.len();
    let m = a.len();
    let mut am = Mat::zeros(m + n, n);
    let mut bv = Vector::zeros(m + n);
    for i in 0..m {
        for j in 0..n {
            am[(i, j)] = a[i][j] as f64;
        }
        bv[i] = b[i] as f64;
    }
    for j in 0..n {
        am[(m + j, j)] = -1.0;
    }
    let p = LpProblem::new(Vector::from_iterator(n, c.iter().map(|&v| v as f64))).with_inequalities(am, bv);
    let sol = solve_lp(&p, Sense::Maximize).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal);
    sol.value
}

#[test]
fn simplex_matches_exact_rational_pivoting() {
    let cases: [(&[i64], Vec<&[i64]>, &[i64]); 3] = [
        (&[3, 2], vec![&[1, 1], &[1, 3], &[1, 0]], &[4, 6, 3]),
        (&[2, 3, 1], vec![&[1, 1, 1], &[2, 1, 0], &[0, 1, 3], &[1, -1, 2]], &[10, 8, 9, 5]),
        // degenerate at the optimum: three constraints meet at (1, 1)
        (&[1, 1], vec![&[1, 0], &[0, 1], &[1, 1], &[1, -1]], &[1, 1, 2, 0]),
    ];
    for (c, a, b) in &cases {
        let exact = rational_simplex(c, a, b).expect("bounded");
        let exact = *exact.numer() as f64 / *exact.denom() as f64;
        let approx = float_lp(c, a, b);
        assert!((exact - approx).abs() <= 1e-9 * (1.0 + exact.abs()), "{exact} vs {approx}");
    }
}

#[test]
fn qp_matches_active_set_enumeration() {
    let mut rng = common::rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(1..=8);
        let mi = rng.random_range(0..=8);
        let me = rng.random_range(0..=d.min(2) - 1);
        let p = common::random_qp(&mut rng, d, mi, me);
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let oracle = common::brute_force_qp(&p).expect("feasible by construction");
        worst = worst.max((&sol.z - &oracle).amax());
    }
    assert!(worst <= 1e-7, "max deviation {worst:e}");
}

#[test]
fn polyfit_recovers_a_noisy_quadratic() {
    // 1 + 2x − 0.5y + 0.3x² − 0.7xy + 1.1y²
    let truth = |x: f64, y: f64| 1.0 + 2.0 * x - 0.5 * y + 0.3 * x * x - 0.7 * x * y + 1.1 * y * y;
    let mut rng = common::rng(5);
    let samples: Vec<(Vec<f64>, f64)> = (0..400)
        .map(|_| {
            let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (vec![x, y], truth(x, y) + rng.random_range(-1e-3..1e-3))
        })
        .collect();
    let fit = polyfit(&samples, 2).unwrap().polynomial;
    let expected = [(vec![0, 0], 1.0), (vec![1, 0], 2.0), (vec![0, 1], -0.5), (vec![2, 0], 0.3), (vec![1, 1], -0.7), (vec![0, 2], 1.1)];
    for (e, c) in expected {
        let k = fit.exponents.iter().position(|x| *x == e).unwrap();
        assert!((fit.coefficients[k] - c).abs() <= 1e-2, "{e:?}: {} vs {c}", fit.coefficients[k]);
    }
}
