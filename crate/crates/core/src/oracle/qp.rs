//! A small dense convex quadratic program solver.
//!
//! The oracle reduces every cell query to the same shape of problem:
//! find the point of a polyhedron closest to a target,
//!
//! ```text
//!     minimize   1/2 ||z - x||^2
//!     subject to g_i . z <= h_i          (given rows)
//!                0 <= z_j <= 1           (optional box)
//! ```
//!
//! This is solved with the dual active-set method of Goldfarb and
//! Idnani, specialized to an identity Hessian: start from the
//! unconstrained minimum `z = x`, repeatedly pick the most violated
//! constraint, and take primal/dual steps that keep the current iterate
//! optimal for the active equalities and the multipliers non-negative.
//! Adding a constraint takes a full step; a blocking multiplier that
//! would turn negative takes a partial step and drops its constraint.
//! If a violated constraint's normal lies in the span of the active
//! normals and no multiplier blocks, the dual is unbounded and the
//! polyhedron is empty.
//!
//! The active-set linear systems are small (at most the dimension), so
//! they are re-solved from scratch with a Cholesky factorization at each
//! step instead of incrementally updated; with the iterate rebuilt from
//! the active set after every addition, nothing drifts. Box constraints
//! are kept in implicit unit-vector form so that a high-dimensional box
//! costs nothing to scan.

use crate::error::{Error, Result};

/// Nearest-point problem over an intersection of halfspaces.
#[derive(Debug, Clone)]
pub struct Qp {
    /// The point to project.
    pub target: Vec<f64>,
    /// Constraint normals; row `i` demands `rows[i] . z <= rhs[i]`.
    pub rows: Vec<Vec<f64>>,
    /// Right-hand sides, one per row.
    pub rhs: Vec<f64>,
    /// Whether to additionally constrain `z` to the unit box.
    pub box01: bool,
}

/// Solution of a [`Qp`].
///
/// Constraint indices in `active` refer to `rows` for `i < rows.len()`,
/// to the upper box face `z_j <= 1` for `i == rows.len() + j`, and to
/// the lower box face `z_j >= 0` for `i == rows.len() + dim + j`.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// The nearest feasible point.
    pub point: Vec<f64>,
    /// `||point - target||`.
    pub norm: f64,
    /// Lagrange multipliers, parallel to `active`; all non-negative.
    pub multipliers: Vec<f64>,
    /// Indices of the binding constraints.
    pub active: Vec<usize>,
    /// Total primal/dual steps taken.
    pub iterations: usize,
    /// Largest violation among the first-order optimality conditions:
    /// stationarity, primal and dual feasibility, and complementary
    /// slackness.
    pub kkt_residual: f64,
}

/// Accepted (scaled) constraint violation at termination.
const FEAS_TOL: f64 = 1e-10;
/// Below this ratio of `||s||^2` to `||n||^2`, a normal counts as lying
/// in the span of the active set.
const SPAN_TOL: f64 = 1e-20;

/// One constraint normal: a dense row or an implicit box face.
#[derive(Debug, Clone, Copy)]
enum Normal<'a> {
    Dense(&'a [f64]),
    /// `z_j <= 1`.
    Upper(usize),
    /// `-z_j <= 0`.
    Lower(usize),
}

impl Normal<'_> {
    fn dot(&self, z: &[f64]) -> f64 {
        match self {
            Normal::Dense(g) => g.iter().zip(z).map(|(a, b)| a * b).sum(),
            Normal::Upper(j) => z[*j],
            Normal::Lower(j) => -z[*j],
        }
    }

    /// `out += coef * g`.
    fn axpy(&self, coef: f64, out: &mut [f64]) {
        match self {
            Normal::Dense(g) => {
                for (o, v) in out.iter_mut().zip(*g) {
                    *o += coef * v;
                }
            }
            Normal::Upper(j) => out[*j] += coef,
            Normal::Lower(j) => out[*j] -= coef,
        }
    }
}

fn pair_dot(a: &Normal<'_>, b: &Normal<'_>) -> f64 {
    match (a, b) {
        (Normal::Dense(g), _) => b.dot(g),
        (_, Normal::Dense(g)) => a.dot(g),
        (Normal::Upper(i), Normal::Upper(j)) | (Normal::Lower(i), Normal::Lower(j)) => {
            if i == j {
                1.0
            } else {
                0.0
            }
        }
        (Normal::Upper(i), Normal::Lower(j)) | (Normal::Lower(i), Normal::Upper(j)) => {
            if i == j {
                -1.0
            } else {
                0.0
            }
        }
    }
}

struct Con<'a> {
    normal: Normal<'a>,
    rhs: f64,
    norm2: f64,
    /// Scale for violation comparisons: `max(1, ||g||)`.
    scale: f64,
    /// Index reported in [`QpSolution::active`].
    public: usize,
}

/// Solves the in-place Cholesky system `a u = b` for symmetric positive
/// definite `a` (destroyed). Loss of definiteness is an internal error:
/// the caller maintains linearly independent active normals.
fn solve_spd(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = a.len();
    let max_diag = (0..n).map(|i| a[i][i]).fold(0.0f64, f64::max);
    for j in 0..n {
        let d = a[j][j] - a[j][..j].iter().map(|v| v * v).sum::<f64>();
        if d <= max_diag * 1e-15 {
            return Err(Error::Optimizer(
                "active-set system lost positive definiteness".into(),
            ));
        }
        let root = d.sqrt();
        a[j][j] = root;
        for i in j + 1..n {
            let dot: f64 = a[i][..j].iter().zip(&a[j][..j]).map(|(x, y)| x * y).sum();
            a[i][j] = (a[i][j] - dot) / root;
        }
    }
    // Forward substitution L y = b, then back substitution L^T u = y.
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i][k] * b[k];
        }
        b[i] /= a[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k][i] * b[k];
        }
        b[i] /= a[i][i];
    }
    Ok(b)
}

/// Solves the equality-constrained projection for the active set:
/// multipliers from the normal equations, then `z = x - N lambda`.
fn rebuild(cons: &[Con<'_>], active: &[usize], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = active.len();
    let mut gram = vec![vec![0.0; m]; m];
    for (i, &a) in active.iter().enumerate() {
        for (j, &b) in active.iter().enumerate().take(i + 1) {
            let v = pair_dot(&cons[a].normal, &cons[b].normal);
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let rhs: Vec<f64> = active
        .iter()
        .map(|&a| cons[a].normal.dot(x) - cons[a].rhs)
        .collect();
    let lam = solve_spd(gram, rhs)?;
    let mut z = x.to_vec();
    for (l, &a) in lam.iter().zip(active) {
        cons[a].normal.axpy(-l, &mut z);
    }
    Ok((lam, z))
}

/// Largest first-order optimality violation at `(z, lambda)`.
fn kkt_residual(cons: &[Con<'_>], active: &[usize], lam: &[f64], x: &[f64], z: &[f64]) -> f64 {
    let mut grad: Vec<f64> = z.iter().zip(x).map(|(a, b)| a - b).collect();
    for (l, &a) in lam.iter().zip(active) {
        cons[a].normal.axpy(*l, &mut grad);
    }
    let mut res = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for con in cons {
        res = res.max(con.normal.dot(z) - con.rhs);
    }
    for (l, &a) in lam.iter().zip(active) {
        res = res.max(-l);
        res = res.max((l * (cons[a].normal.dot(z) - cons[a].rhs)).abs());
    }
    res
}

/// Projects `qp.target` onto the feasible polyhedron.
///
/// Returns `Ok(None)` when the constraints are inconsistent (the
/// polyhedron is empty). Cycling in exactly degenerate instances is cut
/// off by an iteration guard and reported as an error.
pub fn solve_qp(qp: &Qp) -> Result<Option<QpSolution>> {
    solve_qp_with_cutoff(qp, None)
}

/// [`solve_qp`] that additionally gives up as soon as the (monotonically
/// growing) distance of the iterate from the target exceeds `cutoff`, in
/// which case the optimum provably cannot beat `cutoff` and `None` is
/// returned. Used by the search over cells to skip hopeless ones early.
pub(super) fn solve_qp_with_cutoff(qp: &Qp, cutoff: Option<f64>) -> Result<Option<QpSolution>> {
    let d = qp.target.len();
    if d == 0 {
        return Err(Error::Argument("the target must not be empty".into()));
    }
    if qp.target.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("the target must be finite".into()));
    }
    if qp.rows.len() != qp.rhs.len() {
        return Err(Error::Argument(format!(
            "{} rows but {} right-hand sides",
            qp.rows.len(),
            qp.rhs.len()
        )));
    }
    let mut cons: Vec<Con<'_>> = Vec::with_capacity(qp.rows.len() + 2 * d);
    for (i, (g, &h)) in qp.rows.iter().zip(&qp.rhs).enumerate() {
        if g.len() != d {
            return Err(Error::Argument(format!(
                "row {} has length {} but the target has dimension {}",
                i,
                g.len(),
                d
            )));
        }
        if g.iter().any(|v| !v.is_finite()) || !h.is_finite() {
            return Err(Error::Argument(format!("row {} is not finite", i)));
        }
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        if norm2 == 0.0 {
            // A zero normal constrains nothing: trivially satisfied or
            // trivially impossible.
            if h < 0.0 {
                return Ok(None);
            }
            continue;
        }
        cons.push(Con {
            normal: Normal::Dense(g),
            rhs: h,
            norm2,
            scale: norm2.sqrt().max(1.0),
            public: i,
        });
    }
    if qp.box01 {
        for j in 0..d {
            cons.push(Con {
                normal: Normal::Upper(j),
                rhs: 1.0,
                norm2: 1.0,
                scale: 1.0,
                public: qp.rows.len() + j,
            });
        }
        for j in 0..d {
            cons.push(Con {
                normal: Normal::Lower(j),
                rhs: 0.0,
                norm2: 1.0,
                scale: 1.0,
                public: qp.rows.len() + d + j,
            });
        }
    }

    let x = &qp.target;
    let mut z = x.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    let mut iterations = 0usize;
    let max_iterations = 100 + 10 * (cons.len() + d);

    loop {
        // Most violated constraint, scale-normalized.
        let mut worst: Option<(usize, f64)> = None;
        for (i, con) in cons.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let v = (con.normal.dot(&z) - con.rhs) / con.scale;
            if v > FEAS_TOL && worst.is_none_or(|(_, w)| v > w) {
                worst = Some((i, v));
            }
        }
        let Some((p, _)) = worst else { break };

        // Resolve constraint p: take full/partial steps until it joins
        // the active set or infeasibility is established.
        let mut lam_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(Error::Optimizer(format!(
                    "no convergence after {} active-set steps",
                    max_iterations
                )));
            }
            let u = if active.is_empty() {
                Vec::new()
            } else {
                let m = active.len();
                let mut gram = vec![vec![0.0; m]; m];
                for (i, &a) in active.iter().enumerate() {
                    for (j, &b) in active.iter().enumerate().take(i + 1) {
                        let v = pair_dot(&cons[a].normal, &cons[b].normal);
                        gram[i][j] = v;
                        gram[j][i] = v;
                    }
                }
                let rhs: Vec<f64> = active
                    .iter()
                    .map(|&a| pair_dot(&cons[a].normal, &cons[p].normal))
                    .collect();
                solve_spd(gram, rhs)?
            };
            // Primal direction: the part of the new normal orthogonal to
            // the active normals. Stepping z along -s reduces the
            // violation without disturbing active equalities.
            let mut s = vec![0.0; d];
            cons[p].normal.axpy(1.0, &mut s);
            for (ui, &a) in u.iter().zip(&active) {
                cons[a].normal.axpy(-ui, &mut s);
            }
            let s2: f64 = s.iter().map(|v| v * v).sum();
            let independent = s2 > cons[p].norm2 * SPAN_TOL;
            let violation = cons[p].normal.dot(&z) - cons[p].rhs;
            let t1 = if independent {
                violation / s2
            } else {
                f64::INFINITY
            };
            let blocking = u
                .iter()
                .zip(active.iter().enumerate())
                .filter(|(ui, _)| **ui > 0.0)
                .map(|(ui, (slot, _))| (lam[slot] / ui, slot))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let t2 = blocking.map_or(f64::INFINITY, |(t, _)| t);
            let t = t1.min(t2);
            if !t.is_finite() {
                // The dual ray is unbounded: no feasible point exists.
                return Ok(None);
            }
            if t > 0.0 {
                for (zj, sj) in z.iter_mut().zip(&s) {
                    *zj -= t * sj;
                }
                for (l, ui) in lam.iter_mut().zip(&u) {
                    *l -= t * ui;
                }
                lam_plus += t;
            }
            if t2 < t1 {
                let (_, slot) = blocking.expect("t2 finite implies a blocker");
                active.remove(slot);
                lam.remove(slot);
            } else {
                active.push(p);
                lam.push(lam_plus);
                break;
            }
        }
        // Re-solve the equality system exactly so numerical drift from
        // the incremental steps cannot accumulate.
        let (l, zz) = rebuild(&cons, &active, x)?;
        lam = l;
        z = zz;
        if let Some(c) = cutoff {
            let dist2: f64 = z.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist2 > c * c {
                return Ok(None);
            }
        }
    }

    let norm = z
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let residual = kkt_residual(&cons, &active, &lam, x, &z);
    Ok(Some(QpSolution {
        point: z,
        norm,
        multipliers: lam,
        active: active.iter().map(|&a| cons[a].public).collect(),
        iterations,
        kkt_residual: residual,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp(target: &[f64], rows: &[&[f64]], rhs: &[f64], box01: bool) -> Qp {
        Qp {
            target: target.to_vec(),
            rows: rows.iter().map(|r| r.to_vec()).collect(),
            rhs: rhs.to_vec(),
            box01,
        }
    }

    #[test]
    fn unconstrained_projection_is_the_target() {
        let sol = solve_qp(&qp(&[0.3, -0.7], &[], &[], false))
            .unwrap()
            .unwrap();
        assert_eq!(sol.point, vec![0.3, -0.7]);
        assert_eq!(sol.norm, 0.0);
        assert!(sol.active.is_empty());
        assert_eq!(sol.kkt_residual, 0.0);
    }

    #[test]
    fn single_halfspace_projects_onto_the_plane() {
        // Project (1, 1) onto z1 + z2 <= 1: the foot is (1/2, 1/2) with
        // multiplier (g.x - h) / ||g||^2 = 1/2.
        let sol = solve_qp(&qp(&[1.0, 1.0], &[&[1.0, 1.0]], &[1.0], false))
            .unwrap()
            .unwrap();
        assert!((sol.point[0] - 0.5).abs() < 1e-12);
        assert!((sol.point[1] - 0.5).abs() < 1e-12);
        assert!((sol.norm - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(sol.active, vec![0]);
        assert!((sol.multipliers[0] - 0.5).abs() < 1e-12);
        assert!(sol.kkt_residual <= 1e-8);
        assert!(sol.iterations >= 1);
    }

    #[test]
    fn satisfied_constraints_stay_inactive() {
        let sol = solve_qp(&qp(
            &[1.0, 1.0],
            &[&[1.0, 1.0], &[1.0, 0.0]],
            &[1.0, 5.0],
            false,
        ))
        .unwrap()
        .unwrap();
        assert_eq!(sol.active, vec![0]);
        assert!((sol.point[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_halfspaces_meet_in_a_corner() {
        let sol = solve_qp(&qp(
            &[1.0, 1.0],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[0.0, 0.0],
            false,
        ))
        .unwrap()
        .unwrap();
        assert!(sol.point[0].abs() < 1e-12 && sol.point[1].abs() < 1e-12);
        assert!((sol.norm - 2.0f64.sqrt()).abs() < 1e-12);
        let mut active = sol.active.clone();
        active.sort_unstable();
        assert_eq!(active, vec![0, 1]);
        for l in &sol.multipliers {
            assert!((l - 1.0).abs() < 1e-12);
        }
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn contradictory_halfspaces_are_infeasible() {
        // z <= 0 and z >= 1.
        let res = solve_qp(&qp(&[0.5], &[&[1.0], &[-1.0]], &[0.0, -1.0], false)).unwrap();
        assert!(res.is_none());
    }

    #[test]
    fn box_clamps_an_outside_target() {
        let sol = solve_qp(&qp(&[1.5, -0.5], &[], &[], true))
            .unwrap()
            .unwrap();
        assert_eq!(sol.point, vec![1.0, 0.0]);
        assert!((sol.norm - 0.5f64.sqrt()).abs() < 1e-12);
        // Upper face of coordinate 0 and lower face of coordinate 1.
        let mut active = sol.active.clone();
        active.sort_unstable();
        assert_eq!(active, vec![0, 2 + 1]);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn rows_and_box_bind_together() {
        // Inside the box, the diagonal constraint pushes the point into
        // the face z2 = 0: minimize from (0.9, -0.2) with z1 + z2 <= 0.5.
        let sol = solve_qp(&qp(&[0.9, -0.2], &[&[1.0, 1.0]], &[0.5], true))
            .unwrap()
            .unwrap();
        assert!((sol.point[0] - 0.5).abs() < 1e-9);
        assert!(sol.point[1].abs() < 1e-9);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn zero_rows_are_trivial_or_impossible() {
        let sol = solve_qp(&qp(&[0.5], &[&[0.0]], &[1.0], false))
            .unwrap()
            .unwrap();
        assert_eq!(sol.point, vec![0.5]);
        let res = solve_qp(&qp(&[0.5], &[&[0.0]], &[-1.0], false)).unwrap();
        assert!(res.is_none());
    }

    #[test]
    fn shape_errors_are_rejected() {
        assert!(matches!(
            solve_qp(&qp(&[0.5, 0.5], &[&[1.0]], &[0.0], false)).unwrap_err(),
            Error::Argument(_)
        ));
        assert!(matches!(
            solve_qp(&Qp {
                target: vec![0.5],
                rows: vec![vec![1.0]],
                rhs: vec![],
                box01: false,
            })
            .unwrap_err(),
            Error::Argument(_)
        ));
        assert!(matches!(
            solve_qp(&qp(&[f64::NAN], &[], &[], false)).unwrap_err(),
            Error::Argument(_)
        ));
    }

    #[test]
    fn cutoff_abandons_expensive_projections() {
        let q = qp(&[1.0, 1.0], &[&[1.0, 1.0]], &[1.0], false);
        // True distance is sqrt(1/2) ~ 0.707.
        assert!(solve_qp_with_cutoff(&q, Some(0.1)).unwrap().is_none());
        assert!(solve_qp_with_cutoff(&q, Some(1.0)).unwrap().is_some());
    }

    /// Random feasible polyhedra: the solution must satisfy first-order
    /// optimality tightly and beat every sampled feasible point.
    #[test]
    fn random_projections_are_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..25 {
            let d = 3;
            // An anchor strictly inside the box keeps the program
            // feasible by construction.
            let anchor: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..0.8)).collect();
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let rhs: Vec<f64> = rows
                .iter()
                .map(|g: &Vec<f64>| {
                    let gw: f64 = g.iter().zip(&anchor).map(|(a, b)| a * b).sum();
                    gw + rng.random_range(0.0..0.3)
                })
                .collect();
            let target: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.5)).collect();
            let q = Qp {
                target: target.clone(),
                rows: rows.clone(),
                rhs: rhs.clone(),
                box01: true,
            };
            let sol = solve_qp(&q).unwrap().expect("feasible by construction");
            assert!(sol.kkt_residual <= 1e-8, "kkt {}", sol.kkt_residual);
            for _ in 0..200 {
                let p: Vec<f64> = anchor
                    .iter()
                    .map(|a| (a + rng.random_range(-0.5..0.5)).clamp(0.0, 1.0))
                    .collect();
                let feasible = rows
                    .iter()
                    .zip(&rhs)
                    .all(|(g, h)| g.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() <= *h + 1e-12);
                if feasible {
                    let dist: f64 = p
                        .iter()
                        .zip(&target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    assert!(
                        dist >= sol.norm - 1e-9,
                        "sampled {} < solved {}",
                        dist,
                        sol.norm
                    );
                }
            }
        }
    }
}
