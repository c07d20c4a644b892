//! Exact minimum-distance adversarial points for plain kNN.
//!
//! For a kNN classifier on raw inputs with the Euclidean metric, the
//! decision regions are unions of polyhedral cells: fixing which k
//! training points are the nearest ones fixes the prediction, and the
//! set of inputs realizing a given k-subset is an intersection of
//! bisector halfspaces. The smallest adversarial perturbation is
//! therefore the minimum, over all k-subsets whose vote differs from
//! the true label, of the distance from the input to the subset's cell
//! — each distance a convex projection computed exactly by [`solve_qp`].
//!
//! The enumeration is pruned hard: subsets are generated over training
//! points sorted by distance from the input, branches whose nearest
//! member already lies too far are cut, every complete subset gets a
//! cheap bisector lower bound before its projection is attempted, and
//! the projections themselves abandon cells that move past the best
//! distance found so far. The first upper bound comes from the nearest
//! training point that the model itself misclassifies, when one exists.
//!
//! Returned points are certified by running the classifier on them; a
//! point that lands exactly on a cell boundary and loses the tie-break
//! is nudged outward by a hair before being accepted. The reported
//! distance is the certified point's, so it can exceed the true
//! infimum by up to the nudge length.

mod qp;

pub use qp::{solve_qp, Qp, QpSolution};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::knn::{KnnModel, Metric};

/// Outward nudge applied when a projection lands exactly on a decision
/// boundary and the tie-break resolves against the attacker.
const EPS_PUSH: f64 = 1e-7;
/// Refuse searches with more candidate subsets than this.
const MAX_SUBSETS: f64 = 1e6;

/// A certified minimum-distance adversarial point.
#[derive(Debug, Clone)]
pub struct OracleResult {
    /// The adversarial point; the classifier verifiably assigns it a
    /// class other than the true label.
    pub adv: Vec<f64>,
    /// `||adv - x||`.
    pub norm: f64,
    /// Number of complete k-subsets examined.
    pub subsets_examined: usize,
    /// Number of cell projections attempted.
    pub qps_solved: usize,
    /// Worst KKT residual over every solved projection; `0.0` when the
    /// search never reached a projection.
    pub max_kkt_residual: f64,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_plain(model: &KnnModel) -> Result<()> {
    if !matches!(model.map(), FeatureMap::Identity { .. }) {
        return Err(Error::Argument(
            "the exact search supports only raw-input models".into(),
        ));
    }
    if model.num_layers() != 1 || model.layers()[0].metric != Metric::Euclidean {
        return Err(Error::Argument(
            "the exact search supports only a single euclidean layer".into(),
        ));
    }
    Ok(())
}

fn check_input(model: &KnnModel, x: &[f64], y: usize) -> Result<()> {
    if x.len() != model.train().dim() {
        return Err(Error::Argument(format!(
            "input has dimension {} but the model expects {}",
            x.len(),
            model.train().dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::Argument("input must lie in [0, 1]".into()));
    }
    if y >= model.num_classes() {
        return Err(Error::Argument(format!(
            "label {} out of range for {} classes",
            y,
            model.num_classes()
        )));
    }
    Ok(())
}

struct Search<'a> {
    model: &'a KnnModel,
    x: &'a [f64],
    y: usize,
    /// Training indices sorted by distance from `x`.
    order: Vec<usize>,
    /// Distances from `x`, parallel to `order` (ascending).
    ds: Vec<f64>,
    /// Squared norms of the training rows.
    sq: Vec<f64>,
    best: Option<(Vec<f64>, f64)>,
    subsets_examined: usize,
    qps_solved: usize,
    max_kkt: f64,
}

impl Search<'_> {
    fn best_norm(&self) -> Option<f64> {
        self.best.as_ref().map(|(_, b)| *b)
    }

    /// Depth-first generation of k-subsets over sorted positions.
    /// `chosen` holds ascending positions into `order`.
    fn descend(&mut self, from: usize, chosen: &mut Vec<usize>) -> Result<()> {
        let k = self.model.k();
        let n = self.order.len();
        if chosen.len() == k {
            return self.examine(chosen);
        }
        let remaining = k - chosen.len();
        for pos in from..=n - remaining {
            // Any subset containing this position must reach at least to
            // ds[pos], while some point no farther than ds[k] stays
            // outside; crossing that bisector is then the floor cost.
            if k < n {
                if let Some(b) = self.best_norm() {
                    if (self.ds[pos] - self.ds[k]) / 2.0 >= b {
                        break;
                    }
                }
            }
            chosen.push(pos);
            self.descend(pos + 1, chosen)?;
            chosen.pop();
        }
        Ok(())
    }

    fn examine(&mut self, chosen: &[usize]) -> Result<()> {
        self.subsets_examined += 1;
        let train = self.model.train();
        let n = train.len();
        let idx: Vec<usize> = chosen.iter().map(|&p| self.order[p]).collect();

        let mut counts = vec![0usize; train.num_classes()];
        for &i in &idx {
            counts[train.label(i)] += 1;
        }
        let top = *counts.iter().max().expect("non-empty");
        let winners: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == top).collect();
        if winners == [self.y] {
            // The whole cell predicts the true label.
            return Ok(());
        }

        if chosen.len() < n {
            if let Some(b) = self.best_norm() {
                // Exact bisector bound: the farthest member must come
                // nearer than the nearest excluded point.
                let max_in = self.ds[*chosen.last().expect("k >= 1")];
                let min_out = (0..n)
                    .find(|j| chosen.get(*j) != Some(j))
                    .map(|j| self.ds[j])
                    .expect("some position is unchosen");
                if (max_in - min_out) / 2.0 >= b {
                    return Ok(());
                }
            }
        }

        // The cell: every member nearer than every excluded point.
        let mut in_set = vec![false; n];
        for &i in &idx {
            in_set[i] = true;
        }
        let d = self.x.len();
        let mut rows = Vec::with_capacity(idx.len() * (n - idx.len()));
        let mut rhs = Vec::with_capacity(rows.capacity());
        let mut row_bound = 0.0f64;
        for &s in &idx {
            let fs = train.feature(s);
            for t in (0..n).filter(|t| !in_set[*t]) {
                let ft = train.feature(t);
                let mut g = Vec::with_capacity(d);
                for j in 0..d {
                    g.push(2.0 * (ft[j] - fs[j]));
                }
                let h = self.sq[t] - self.sq[s];
                let viol: f64 = g.iter().zip(self.x).map(|(a, b)| a * b).sum::<f64>() - h;
                if viol > 0.0 {
                    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gn > 0.0 {
                        row_bound = row_bound.max(viol / gn);
                    }
                }
                rows.push(g);
                rhs.push(h);
            }
        }
        if let Some(b) = self.best_norm() {
            if row_bound >= b {
                return Ok(());
            }
        }

        if winners.len() == 1 || !winners.contains(&self.y) {
            // Every vote resolution in this cell is already a wrong
            // class; project onto the cell itself.
            return self.project(rows, rhs);
        }
        // The vote ties and includes the true label: the prediction is
        // the class of the nearest member among the tied classes. Force
        // each wrong tied class through each of its members in turn.
        let y = self.y;
        for c in winners
            .iter()
            .copied()
            .filter(|&c| c != y)
            .collect::<Vec<_>>()
        {
            let rivals: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&t| train.label(t) != c && winners.contains(&train.label(t)))
                .collect();
            let members: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&s| train.label(s) == c)
                .collect();
            for s in members {
                let fs = train.feature(s);
                let mut rows2 = rows.clone();
                let mut rhs2 = rhs.clone();
                for &t in &rivals {
                    let ft = train.feature(t);
                    let g: Vec<f64> = (0..d).map(|j| 2.0 * (ft[j] - fs[j])).collect();
                    rows2.push(g);
                    rhs2.push(self.sq[t] - self.sq[s]);
                }
                self.project(rows2, rhs2)?;
            }
        }
        Ok(())
    }

    fn project(&mut self, rows: Vec<Vec<f64>>, rhs: Vec<f64>) -> Result<()> {
        self.qps_solved += 1;
        let q = Qp {
            target: self.x.to_vec(),
            rows,
            rhs,
            box01: true,
        };
        let Some(sol) = qp::solve_qp_with_cutoff(&q, self.best_norm())? else {
            return Ok(());
        };
        self.max_kkt = self.max_kkt.max(sol.kkt_residual);
        if self.best_norm().is_some_and(|b| sol.norm >= b) {
            return Ok(());
        }
        if let Some((pt, norm)) = self.certify(&sol.point)? {
            if self.best_norm().is_none_or(|b| norm < b) {
                self.best = Some((pt, norm));
            }
        }
        Ok(())
    }

    /// Accepts a candidate only if the classifier actually mislabels
    /// it. A candidate sitting exactly on a boundary can lose the
    /// tie-break; nudging it away from the input lands it strictly
    /// inside the adversarial cell.
    fn certify(&self, z: &[f64]) -> Result<Option<(Vec<f64>, f64)>> {
        if self.model.classify(z)?.predicted != self.y {
            return Ok(Some((z.to_vec(), l2(z, self.x))));
        }
        let dist = l2(z, self.x);
        if dist == 0.0 {
            return Ok(None);
        }
        let pushed: Vec<f64> = z
            .iter()
            .zip(self.x)
            .map(|(zj, xj)| (zj + EPS_PUSH * (zj - xj) / dist).clamp(0.0, 1.0))
            .collect();
        if self.model.classify(&pushed)?.predicted != self.y {
            let norm = l2(&pushed, self.x);
            return Ok(Some((pushed, norm)));
        }
        log::debug!("projection at distance {} failed certification", dist);
        Ok(None)
    }
}

/// Finds the smallest perturbation of `x` (in L2, within the unit box)
/// that the model provably classifies as any class other than `y`.
///
/// Exhaustive over neighbor subsets, so only feasible for small
/// training sets and k — the search refuses instances with more than a
/// million subsets. An input the model already misclassifies yields a
/// zero-norm result; `None` means no adversarial point exists anywhere
/// in the box (for example, a single-class training set).
pub fn exact_min_attack(model: &KnnModel, x: &[f64], y: usize) -> Result<Option<OracleResult>> {
    check_plain(model)?;
    check_input(model, x, y)?;
    let train = model.train();
    let n = train.len();
    let k = model.k();
    let mut binom = 1.0f64;
    for i in 0..k {
        binom *= (n - i) as f64 / (i + 1) as f64;
    }
    if binom > MAX_SUBSETS {
        return Err(Error::Scale(format!(
            "{} choose {} is {:.1e} subsets; the exact search handles at most {:.0e}",
            n, k, binom, MAX_SUBSETS
        )));
    }

    if model.classify(x)?.predicted != y {
        return Ok(Some(OracleResult {
            adv: x.to_vec(),
            norm: 0.0,
            subsets_examined: 0,
            qps_solved: 0,
            max_kkt_residual: 0.0,
        }));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        l2(train.feature(a), x)
            .total_cmp(&l2(train.feature(b), x))
            .then_with(|| a.cmp(&b))
    });
    let ds: Vec<f64> = order.iter().map(|&i| l2(train.feature(i), x)).collect();
    let sq: Vec<f64> = (0..n)
        .map(|i| train.feature(i).iter().map(|v| v * v).sum())
        .collect();

    // A training point the model itself misclassifies is adversarial
    // as-is; the nearest one seeds the upper bound.
    let mut best = None;
    for (pos, &i) in order.iter().enumerate() {
        if model.train_prediction(i) != y {
            best = Some((train.feature(i).to_vec(), ds[pos]));
            break;
        }
    }

    let mut search = Search {
        model,
        x,
        y,
        order,
        ds,
        sq,
        best,
        subsets_examined: 0,
        qps_solved: 0,
        max_kkt: 0.0,
    };
    search.descend(0, &mut Vec::with_capacity(k))?;
    Ok(search.best.map(|(adv, norm)| OracleResult {
        adv,
        norm,
        subsets_examined: search.subsets_examined,
        qps_solved: search.qps_solved,
        max_kkt_residual: search.max_kkt,
    }))
}

/// Brute-force reference for two-dimensional models: classifies the
/// points of a `per_axis` x `per_axis` grid over the unit square in
/// order of distance from `x` and returns the first one labeled other
/// than `y`, with its distance. Works for any feature map and metric.
pub fn grid_verify_2d(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    per_axis: usize,
) -> Result<Option<(Vec<f64>, f64)>> {
    if model.train().dim() != 2 {
        return Err(Error::Argument(format!(
            "grid verification needs 2-d inputs, model has {}",
            model.train().dim()
        )));
    }
    check_input(model, x, y)?;
    if per_axis < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 grid points per axis, got {}",
            per_axis
        )));
    }
    let step = 1.0 / (per_axis - 1) as f64;
    let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(per_axis * per_axis);
    for i in 0..per_axis {
        for j in 0..per_axis {
            let p = [i as f64 * step, j as f64 * step];
            cells.push((l2(&p, x), i, j));
        }
    }
    cells.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });
    for (dist, i, j) in cells {
        let p = vec![i as f64 * step, j as f64 * step];
        if model.classify(&p)?.predicted != y {
            return Ok(Some((p, dist)));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_gaussian_blobs, Dataset, LabeledPoint};
    use crate::features::{train_mlp, FeatureMap, LayerHandle};
    use crate::knn::ModelLayer;

    fn plain_1d(values: &[(f64, usize)], num_classes: usize, k: usize) -> KnnModel {
        let points = values
            .iter()
            .map(|(v, y)| LabeledPoint { x: vec![*v], y: *y })
            .collect();
        let ds = Dataset::new(points, num_classes).unwrap();
        KnnModel::plain(ds, k, Metric::Euclidean).unwrap()
    }

    fn plain_2d(values: &[([f64; 2], usize)], num_classes: usize, k: usize) -> KnnModel {
        let points = values
            .iter()
            .map(|(v, y)| LabeledPoint {
                x: v.to_vec(),
                y: *y,
            })
            .collect();
        let ds = Dataset::new(points, num_classes).unwrap();
        KnnModel::plain(ds, k, Metric::Euclidean).unwrap()
    }

    #[test]
    fn bisector_crossing_in_one_dimension() {
        let model = plain_1d(&[(0.0, 0), (1.0, 1)], 2, 1);
        let res = exact_min_attack(&model, &[0.2], 0).unwrap().unwrap();
        // The cell boundary is at 0.5; the certified point sits a nudge
        // beyond it.
        assert!((res.norm - 0.3).abs() < 1e-6, "norm {}", res.norm);
        assert!(res.adv[0] > 0.5);
        assert_ne!(model.classify(&res.adv).unwrap().predicted, 0);
        assert!(res.subsets_examined >= 1);
        assert!(res.qps_solved >= 1);
    }

    #[test]
    fn removing_the_nearest_rival_pushes_the_boundary_out() {
        let near = plain_1d(&[(0.0, 0), (0.8, 1), (1.0, 1)], 2, 1);
        let far = plain_1d(&[(0.0, 0), (1.0, 1)], 2, 1);
        let a = exact_min_attack(&near, &[0.2], 0).unwrap().unwrap();
        let b = exact_min_attack(&far, &[0.2], 0).unwrap().unwrap();
        assert!((a.norm - 0.2).abs() < 1e-6, "norm {}", a.norm);
        assert!((b.norm - 0.3).abs() < 1e-6, "norm {}", b.norm);
    }

    #[test]
    fn diagonal_bisector_in_two_dimensions() {
        let model = plain_2d(&[([0.0, 0.0], 0), ([1.0, 1.0], 1)], 2, 1);
        let res = exact_min_attack(&model, &[0.1, 0.1], 0).unwrap().unwrap();
        let expect = 0.4 * 2.0f64.sqrt();
        assert!((res.norm - expect).abs() < 1e-6, "norm {}", res.norm);
    }

    #[test]
    fn misclassified_input_costs_nothing() {
        let model = plain_1d(&[(0.0, 0), (1.0, 1)], 2, 1);
        let res = exact_min_attack(&model, &[0.45], 1).unwrap().unwrap();
        assert_eq!(res.norm, 0.0);
        assert_eq!(res.adv, vec![0.45]);
    }

    #[test]
    fn single_class_has_no_adversarial_point() {
        let model = plain_1d(&[(0.2, 0), (0.8, 0)], 1, 1);
        assert!(exact_min_attack(&model, &[0.5], 0).unwrap().is_none());
    }

    #[test]
    fn tied_votes_fall_back_to_the_nearest_member() {
        // k = 2 over one point per class: every vote ties 1-1 and the
        // nearer point decides, so the boundary is still the bisector.
        let model = plain_1d(&[(0.0, 0), (1.0, 1)], 2, 2);
        let res = exact_min_attack(&model, &[0.2], 0).unwrap().unwrap();
        assert!((res.norm - 0.3).abs() < 1e-6, "norm {}", res.norm);
        assert_ne!(model.classify(&res.adv).unwrap().predicted, 0);
    }

    #[test]
    fn subset_explosion_is_refused() {
        let values: Vec<(f64, usize)> = (0..30)
            .map(|i| (i as f64 / 29.0, (i % 2) as usize))
            .collect();
        let model = plain_1d(&values, 2, 15);
        assert!(matches!(
            exact_min_attack(&model, &[0.5], 0).unwrap_err(),
            Error::Scale(_)
        ));
    }

    #[test]
    fn feature_space_models_are_rejected() {
        let ds = gen_gaussian_blobs(3, &[vec![0.3, 0.3], vec![0.7, 0.7]], 0.05, 8).unwrap();
        let (mlp, _) = train_mlp(&ds, &[2, 8, 2], 60, 0.3, 0).unwrap();
        let layers = vec![ModelLayer {
            handle: LayerHandle::post(0),
            metric: Metric::Euclidean,
        }];
        let model = KnnModel::new(ds.clone(), FeatureMap::Mlp(mlp), layers, 1).unwrap();
        assert!(matches!(
            exact_min_attack(&model, &[0.3, 0.3], 0).unwrap_err(),
            Error::Argument(_)
        ));
        let cosine = KnnModel::plain(ds, 1, Metric::Cosine).unwrap();
        assert!(matches!(
            exact_min_attack(&cosine, &[0.3, 0.3], 0).unwrap_err(),
            Error::Argument(_)
        ));
    }

    #[test]
    fn grid_reference_brackets_the_exact_answer() {
        for (seed, k) in [(17u64, 1usize), (18, 3)] {
            let ds =
                gen_gaussian_blobs(seed, &[vec![0.3, 0.35], vec![0.7, 0.6]], 0.09, 12).unwrap();
            let model = KnnModel::plain(ds, k, Metric::Euclidean).unwrap();
            let x = vec![0.32, 0.4];
            let y = model.classify(&x).unwrap().predicted;
            let exact = exact_min_attack(&model, &x, y).unwrap().unwrap();
            let step = 1.0 / 400.0;
            let (_, grid_norm) = grid_verify_2d(&model, &x, y, 401).unwrap().unwrap();
            // The grid point is feasible, so it cannot beat the exact
            // answer; and the exact answer has an adversarial grid point
            // within one cell diagonal.
            assert!(
                grid_norm >= exact.norm - 1e-9,
                "{} < {}",
                grid_norm,
                exact.norm
            );
            assert!(
                grid_norm <= exact.norm + step * 1.5,
                "{} vs {}",
                grid_norm,
                exact.norm
            );
        }
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        let model = plain_1d(&[(0.0, 0), (1.0, 1)], 2, 1);
        assert!(matches!(
            grid_verify_2d(&model, &[0.2], 0, 11).unwrap_err(),
            Error::Argument(_)
        ));
        let model2 = plain_2d(&[([0.0, 0.0], 0), ([1.0, 1.0], 1)], 2, 1);
        assert!(matches!(
            grid_verify_2d(&model2, &[0.2, 0.2], 0, 1).unwrap_err(),
            Error::Argument(_)
        ));
    }
}
