#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sampled_cbf::linalg::{combinations, Mat, Vector};
use sampled_cbf::opt::qp::QpProblem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Strictly convex QP with `mi` inequalities and `me` equalities, feasible by construction.
pub fn random_qp(rng: &mut impl Rng, d: usize, mi: usize, me: usize) -> QpProblem {
    let m = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let h = &m * m.transpose() + Mat::identity(d, d) * 0.1;
    let g = uniform_vec(rng, d, -3.0, 3.0);
    let z0 = uniform_vec(rng, d, -1.0, 1.0);
    let a_in = Mat::from_fn(mi, d, |_, _| rng.random_range(-1.0..1.0));
    let b_in = &a_in * &z0 + uniform_vec(rng, mi, 0.0, 1.0);
    let a_eq = Mat::from_fn(me, d, |_, _| rng.random_range(-1.0..1.0));
    let b_eq = &a_eq * &z0;
    QpProblem::new(h, g).with_inequalities(a_in, b_in).with_equalities(a_eq, b_eq)
}

/// Minimizer over every guess of the active set: solve the equality-constrained QP for each
/// subset of inequalities, keep the best feasible candidate.
pub fn brute_force_qp(p: &QpProblem) -> Option<Vector> {
    let d = p.dim();
    let (me, mi) = (p.a_eq.nrows(), p.a_in.nrows());
    let mut best: Option<(f64, Vector)> = None;
    for k in 0..=mi.min(d.saturating_sub(me)) {
        for set in combinations(mi, k) {
            let r = me + set.len();
            let mut kkt = Mat::zeros(d + r, d + r);
            kkt.view_mut((0, 0), (d, d)).copy_from(&p.h);
            let mut rhs = Vector::zeros(d + r);
            rhs.rows_mut(0, d).copy_from(&(-&p.g));
            let rows = (0..me).map(|i| (p.a_eq.row(i).into_owned(), p.b_eq[i])).chain(set.iter().map(|&i| (p.a_in.row(i).into_owned(), p.b_in[i])));
            for (j, (row, b)) in rows.enumerate() {
                for c in 0..d {
                    kkt[(d + j, c)] = row[c];
                    kkt[(c, d + j)] = row[c];
                }
                rhs[d + j] = b;
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let z = sol.rows(0, d).into_owned();
            if !z.iter().all(|v| v.is_finite()) || p.max_violation(&z) > 1e-9 {
                continue;
            }
            let obj = p.objective(&z);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, z));
            }
        }
    }
    best.map(|(_, z)| z)
}
