//! Exact k-nearest-neighbor search and voting.
//!
//! Neighbor search is an exhaustive linear scan — no approximate index is
//! ever used, so classifications are exact and deterministic. Ordering is
//! total: neighbors sort by `(distance, training index)`, which pins down
//! the result even with duplicate points.
//!
//! A [`KnnModel`] layers one or more feature spaces over a training set
//! and classifies by summing the per-layer votes. Majority ties resolve to
//! the class of the nearest neighbor among the tied classes (layers
//! scanned in order), falling back to the smallest label.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, LayerHandle};

/// Distance metric used by a neighbor index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Standard L2 distance.
    Euclidean,
    /// `1 - cos(u, v)`. Undefined (an error) for zero vectors.
    Cosine,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Euclidean => write!(f, "euclidean"),
            Metric::Cosine => write!(f, "cosine"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Argument(format!(
                "unknown metric {:?} (expected \"euclidean\" or \"cosine\")",
                other
            ))),
        }
    }
}

/// L2 distance between two equal-length vectors.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine distance `1 - (a . b) / (|a| |b|)`, clamped to be non-negative
/// against rounding. Errors if either vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Argument(
            "cosine distance is undefined for the zero vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).max(0.0))
}

/// Outcome of a (possibly multi-layer) k-NN vote.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    /// Votes per class, summed over all layers.
    pub counts: Vec<usize>,
    /// Winning class after tie resolution.
    pub predicted: usize,
    /// Fraction of all cast votes won by the predicted class
    /// (`counts[predicted] / (k * layers)`).
    pub fraction: f64,
}

/// An exact nearest-neighbor index over one feature space.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    data: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    metric: Metric,
    /// Cached row norms, used by the cosine metric only.
    row_norms: Vec<f64>,
}

impl NeighborIndex {
    /// Builds an index over explicit feature rows.
    pub fn build(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        metric: Metric,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("cannot index an empty set".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::Validation(
                "rows must have at least one feature".into(),
            ));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("rows have mixed dimensions".into()));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        let row_norms = match metric {
            Metric::Euclidean => Vec::new(),
            Metric::Cosine => {
                let norms: Vec<f64> = rows.iter().map(|r| l2_norm(r)).collect();
                if norms.contains(&0.0) {
                    return Err(Error::Argument(
                        "cosine metric cannot index a zero vector".into(),
                    ));
                }
                norms
            }
        };
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            data.extend_from_slice(row);
        }
        Ok(NeighborIndex {
            data,
            dim,
            labels,
            num_classes,
            metric,
            row_norms,
        })
    }

    /// Builds an index directly over a dataset in input space.
    pub fn from_dataset(ds: &Dataset, metric: Metric) -> Result<Self> {
        let rows = ds.points().iter().map(|p| p.x.clone()).collect();
        let labels = ds.points().iter().map(|p| p.y).collect();
        NeighborIndex::build(rows, labels, ds.num_classes(), metric)
    }

    /// Number of indexed rows.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false; kept for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension of the indexed space.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Metric in use.
    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Labels of the indexed rows.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature vector of row `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Argument(format!(
                "query has dimension {} but index has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::Argument(format!(
                "k must be in 1..={} (index size), got {}",
                self.len(),
                k
            )));
        }
        Ok(())
    }

    /// Distance from `x` to every indexed row, in row order.
    pub fn all_distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_query(x)?;
        match self.metric {
            Metric::Euclidean => Ok(self
                .data
                .chunks_exact(self.dim)
                .map(|row| euclidean_distance(row, x))
                .collect()),
            Metric::Cosine => {
                let nx = l2_norm(x);
                if nx == 0.0 {
                    return Err(Error::Argument(
                        "cosine distance is undefined for the zero vector".into(),
                    ));
                }
                Ok(self
                    .data
                    .chunks_exact(self.dim)
                    .zip(&self.row_norms)
                    .map(|(row, nr)| {
                        let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                        (1.0 - dot / (nr * nx)).max(0.0)
                    })
                    .collect())
            }
        }
    }

    /// The `k` nearest rows as `(row index, distance)`, sorted by
    /// `(distance, row index)` ascending.
    pub fn neighbors(&self, x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        self.check_k(k)?;
        let distances = self.all_distances(x)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_unstable_by(|&i, &j| {
            distances[i]
                .total_cmp(&distances[j])
                .then_with(|| i.cmp(&j))
        });
        Ok(order[..k].iter().map(|&i| (i, distances[i])).collect())
    }

    /// Distance to the `k`-th nearest row (1-based: `k = 1` is the nearest).
    pub fn kth_distance(&self, x: &[f64], k: usize) -> Result<f64> {
        self.check_k(k)?;
        let mut distances = self.all_distances(x)?;
        let (_, kth, _) = distances.select_nth_unstable_by(k - 1, f64::total_cmp);
        Ok(*kth)
    }

    /// Majority vote over the `k` nearest rows.
    pub fn classify(&self, x: &[f64], k: usize) -> Result<Vote> {
        let neighbors = self.neighbors(x, k)?;
        let mut counts = vec![0usize; self.num_classes];
        for (i, _) in &neighbors {
            counts[self.labels[*i]] += 1;
        }
        let max = *counts.iter().max().expect("at least one class");
        let tied: Vec<usize> = (0..self.num_classes)
            .filter(|c| counts[*c] == max)
            .collect();
        let predicted = if tied.len() == 1 {
            tied[0]
        } else {
            resolve_tie(&tied, std::iter::once(neighbors.as_slice()), &self.labels)
        };
        Ok(Vote {
            fraction: counts[predicted] as f64 / k as f64,
            predicted,
            counts,
        })
    }

    /// Fraction of the `k` nearest rows labeled `target`.
    pub fn vote_fraction(&self, x: &[f64], k: usize, target: usize) -> Result<f64> {
        if target >= self.num_classes {
            return Err(Error::Argument(format!(
                "target class {} out of range for {} classes",
                target, self.num_classes
            )));
        }
        let neighbors = self.neighbors(x, k)?;
        let hits = neighbors
            .iter()
            .filter(|(i, _)| self.labels[*i] == target)
            .count();
        Ok(hits as f64 / k as f64)
    }
}

/// Resolves a majority tie: the class of the first neighbor (lists scanned
/// in the given order, each already sorted by distance) whose label is one
/// of the tied classes; falls back to the smallest tied label.
fn resolve_tie<'a>(
    tied: &[usize],
    neighbor_lists: impl Iterator<Item = &'a [(usize, f64)]>,
    labels: &[usize],
) -> usize {
    for list in neighbor_lists {
        for (i, _) in list {
            if tied.contains(&labels[*i]) {
                return labels[*i];
            }
        }
    }
    *tied.iter().min().expect("tie set is non-empty")
}

/// One layer of a [`KnnModel`]: a feature-map layer plus the metric used
/// in that layer's space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelLayer {
    pub handle: LayerHandle,
    pub metric: Metric,
}

/// A k-NN classifier over one or more feature spaces.
///
/// Classification maps the query through every layer, takes the `k`
/// nearest training points in each layer's space, and sums the votes
/// across layers. Training-point features are precomputed at construction,
/// as are the model's own predictions on its training points (used to pick
/// attack starting points).
#[derive(Debug, Clone)]
pub struct KnnModel {
    train: Dataset,
    map: FeatureMap,
    layers: Vec<ModelLayer>,
    k: usize,
    indices: Vec<NeighborIndex>,
    train_predictions: Vec<usize>,
}

impl KnnModel {
    /// Builds a model, embedding every training point through every layer
    /// and precomputing training-set predictions.
    pub fn new(train: Dataset, map: FeatureMap, layers: Vec<ModelLayer>, k: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("model needs at least one layer".into()));
        }
        if train.dim() != map.input_dim() {
            return Err(Error::Argument(format!(
                "training data has dimension {} but map expects {}",
                train.dim(),
                map.input_dim()
            )));
        }
        if k == 0 || k > train.len() {
            return Err(Error::Argument(format!(
                "k must be in 1..={} (training size), got {}",
                train.len(),
                k
            )));
        }
        for layer in &layers {
            map.check_handle(layer.handle)?;
        }
        let handles: Vec<LayerHandle> = layers.iter().map(|l| l.handle).collect();
        let labels: Vec<usize> = train.points().iter().map(|p| p.y).collect();
        let mut per_layer_rows: Vec<Vec<Vec<f64>>> = (0..layers.len())
            .map(|_| Vec::with_capacity(train.len()))
            .collect();
        for p in train.points() {
            let feats = map.forward_many(&p.x, &handles)?;
            for (rows, f) in per_layer_rows.iter_mut().zip(feats) {
                rows.push(f);
            }
        }
        let indices = per_layer_rows
            .into_iter()
            .zip(&layers)
            .map(|(rows, layer)| {
                NeighborIndex::build(rows, labels.clone(), train.num_classes(), layer.metric)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = KnnModel {
            train,
            map,
            layers,
            k,
            indices,
            train_predictions: Vec::new(),
        };
        let mut predictions = Vec::with_capacity(model.train.len());
        for p in model.train.points() {
            predictions.push(model.classify(&p.x)?.predicted);
        }
        model.train_predictions = predictions;
        Ok(model)
    }

    /// A single-layer model over raw inputs.
    pub fn plain(train: Dataset, k: usize, metric: Metric) -> Result<Self> {
        let dim = train.dim();
        KnnModel::new(
            train,
            FeatureMap::identity(dim),
            vec![ModelLayer {
                handle: LayerHandle::post(0),
                metric,
            }],
            k,
        )
    }

    /// Neighborhood size `k`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// The training dataset.
    pub fn train(&self) -> &Dataset {
        &self.train
    }

    /// The feature map.
    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    /// Layer descriptors in vote order.
    pub fn layers(&self) -> &[ModelLayer] {
        &self.layers
    }

    /// Number of layers.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// The neighbor index of layer `l`.
    pub fn neighbor_index(&self, l: usize) -> &NeighborIndex {
        &self.indices[l]
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    /// The model's own prediction on training point `i`.
    pub fn train_prediction(&self, i: usize) -> usize {
        self.train_predictions[i]
    }

    /// Maps a query through all layers (one forward evaluation).
    pub fn embed(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let handles: Vec<LayerHandle> = self.layers.iter().map(|l| l.handle).collect();
        self.map.forward_many(x, &handles)
    }

    /// Classifies `x` by summing k-NN votes across layers.
    pub fn classify(&self, x: &[f64]) -> Result<Vote> {
        let feats = self.embed(x)?;
        let mut counts = vec![0usize; self.num_classes()];
        let mut lists = Vec::with_capacity(self.indices.len());
        for (index, f) in self.indices.iter().zip(&feats) {
            let neighbors = index.neighbors(f, self.k)?;
            for (i, _) in &neighbors {
                counts[index.labels()[*i]] += 1;
            }
            lists.push(neighbors);
        }
        let max = *counts.iter().max().expect("at least one class");
        let tied: Vec<usize> = (0..self.num_classes())
            .filter(|c| counts[*c] == max)
            .collect();
        let predicted = if tied.len() == 1 {
            tied[0]
        } else {
            resolve_tie(
                &tied,
                lists.iter().map(|l| l.as_slice()),
                self.indices[0].labels(),
            )
        };
        let total = self.k * self.indices.len();
        Ok(Vote {
            fraction: counts[predicted] as f64 / total as f64,
            predicted,
            counts,
        })
    }

    /// Fraction of all cast votes (`k` per layer) going to `target`.
    pub fn vote_fraction(&self, x: &[f64], target: usize) -> Result<f64> {
        if target >= self.num_classes() {
            return Err(Error::Argument(format!(
                "target class {} out of range for {} classes",
                target,
                self.num_classes()
            )));
        }
        let feats = self.embed(x)?;
        let mut hits = 0usize;
        for (index, f) in self.indices.iter().zip(&feats) {
            let neighbors = index.neighbors(f, self.k)?;
            hits += neighbors
                .iter()
                .filter(|(i, _)| index.labels()[*i] == target)
                .count();
        }
        Ok(hits as f64 / (self.k * self.indices.len()) as f64)
    }

    /// Distance from `x` to its `k`-th nearest training point in each
    /// layer's space.
    pub fn thresholds(&self, x: &[f64]) -> Result<Vec<f64>> {
        let feats = self.embed(x)?;
        self.indices
            .iter()
            .zip(&feats)
            .map(|(index, f)| index.kth_distance(f, self.k))
            .collect()
    }

    /// Accuracy on a held-out set.
    pub fn accuracy(&self, test: &Dataset) -> Result<f64> {
        if test.dim() != self.train.dim() {
            return Err(Error::Argument(format!(
                "test data has dimension {} but model expects {}",
                test.dim(),
                self.train.dim()
            )));
        }
        let mut correct = 0usize;
        for p in test.points() {
            if self.classify(&p.x)?.predicted == p.y {
                correct += 1;
            }
        }
        Ok(correct as f64 / test.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledPoint;
    use proptest::prelude::*;

    fn index_1d(values: &[(f64, usize)], num_classes: usize) -> NeighborIndex {
        let rows = values.iter().map(|(v, _)| vec![*v]).collect();
        let labels = values.iter().map(|(_, y)| *y).collect();
        NeighborIndex::build(rows, labels, num_classes, Metric::Euclidean).unwrap()
    }

    #[test]
    fn neighbors_sort_by_distance_then_index() {
        let index = index_1d(&[(0.5, 0), (0.3, 1), (0.7, 0)], 2);
        // Query 0.0: distances 0.5, 0.3, 0.7.
        let n = index.neighbors(&[0.0], 3).unwrap();
        assert_eq!(n.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![1, 0, 2]);
        // Tie: rows 0 and 2 are equidistant from 0.6; lower index first.
        let n = index.neighbors(&[0.6], 3).unwrap();
        assert_eq!(n.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 2, 1]);
    }

    #[test]
    fn distance_zero_to_self() {
        let index = index_1d(&[(0.4, 0), (0.9, 1)], 2);
        let n = index.neighbors(&[0.4], 1).unwrap();
        assert_eq!(n, vec![(0, 0.0)]);
    }

    #[test]
    fn kth_distance_walks_the_order_statistics() {
        // Distances from 0.3: 0.0, 0.1, 0.4.
        let index = index_1d(&[(0.3, 0), (0.4, 1), (0.7, 0)], 2);
        assert_eq!(index.kth_distance(&[0.3], 1).unwrap(), 0.0);
        assert!((index.kth_distance(&[0.3], 2).unwrap() - 0.1).abs() < 1e-15);
        assert!((index.kth_distance(&[0.3], 3).unwrap() - 0.4).abs() < 1e-15);
        assert!(index.kth_distance(&[0.3], 4).is_err());
        assert!(index.kth_distance(&[0.3], 0).is_err());
    }

    #[test]
    fn majority_vote_and_fraction() {
        let index = index_1d(&[(0.1, 0), (0.2, 0), (0.3, 1), (0.9, 1)], 2);
        let vote = index.classify(&[0.0], 3).unwrap();
        assert_eq!(vote.predicted, 0);
        assert_eq!(vote.counts, vec![2, 1]);
        assert!((vote.fraction - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(index.vote_fraction(&[0.0], 3, 0).unwrap(), 2.0 / 3.0);
        assert_eq!(index.vote_fraction(&[0.0], 3, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(index.vote_fraction(&[0.0], 2, 1).unwrap(), 0.0);
        assert_eq!(index.vote_fraction(&[0.0], 2, 0).unwrap(), 1.0);
    }

    #[test]
    fn vote_tie_goes_to_nearest_tied_class() {
        // k = 4 from 0.0: labels in distance order are 1, 0, 0, 1 -> tie.
        // Nearest neighbor has label 1, so the tie resolves to 1.
        let index = index_1d(&[(0.1, 1), (0.2, 0), (0.3, 0), (0.4, 1)], 2);
        let vote = index.classify(&[0.0], 4).unwrap();
        assert_eq!(vote.counts, vec![2, 2]);
        assert_eq!(vote.predicted, 1);
        assert_eq!(vote.fraction, 0.5);
    }

    #[test]
    fn cosine_metric_behaves() {
        let rows = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
        let index = NeighborIndex::build(rows, vec![0, 1, 0], 2, Metric::Cosine).unwrap();
        // Parallel vectors have distance 0 regardless of magnitude.
        let d = index.all_distances(&[2.0, 0.0]).unwrap();
        assert!(d[0].abs() < 1e-12);
        // A 45-degree angle gives 1 - sqrt(2)/2; orthogonal gives 1.
        assert!((d[1] - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!((d[2] - 1.0).abs() < 1e-12);
        // Zero query is a domain error.
        assert!(matches!(
            index.all_distances(&[0.0, 0.0]).unwrap_err(),
            Error::Argument(_)
        ));
        // Zero row is rejected at build time.
        assert!(matches!(
            NeighborIndex::build(vec![vec![0.0, 0.0]], vec![0], 1, Metric::Cosine).unwrap_err(),
            Error::Argument(_)
        ));
        assert!(cosine_distance(&[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn plain_model_matches_its_single_index() {
        let points = vec![
            LabeledPoint {
                x: vec![0.1, 0.1],
                y: 0,
            },
            LabeledPoint {
                x: vec![0.2, 0.3],
                y: 0,
            },
            LabeledPoint {
                x: vec![0.8, 0.8],
                y: 1,
            },
            LabeledPoint {
                x: vec![0.7, 0.9],
                y: 1,
            },
        ];
        let ds = Dataset::new(points, 2).unwrap();
        let model = KnnModel::plain(ds, 3, Metric::Euclidean).unwrap();
        for q in [[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]] {
            let a = model.classify(&q).unwrap();
            let b = model.neighbor_index(0).classify(&q, 3).unwrap();
            assert_eq!(a, b);
        }
        // Training points classify correctly here, and the cached
        // predictions agree with fresh calls.
        for i in 0..model.train().len() {
            assert_eq!(
                model.train_prediction(i),
                model.classify(model.train().feature(i)).unwrap().predicted
            );
        }
    }

    #[test]
    fn multi_layer_votes_are_summed() {
        // Two layers over the same identity features, one euclidean and one
        // cosine. Near (0.5, 0.5): euclidean favors the class-0 point at
        // (0.55, 0.45); cosine favors the parallel class-1 point at
        // (0.9, 0.9). k = 1 per layer -> 1 vote each -> tie; the first
        // layer's nearest neighbor (class 0) wins.
        let points = vec![
            LabeledPoint {
                x: vec![0.55, 0.45],
                y: 0,
            },
            LabeledPoint {
                x: vec![0.9, 0.9],
                y: 1,
            },
        ];
        let ds = Dataset::new(points, 2).unwrap();
        let dim = ds.dim();
        let layers = |metrics: [Metric; 2]| {
            metrics
                .iter()
                .map(|m| ModelLayer {
                    handle: LayerHandle::post(0),
                    metric: *m,
                })
                .collect::<Vec<_>>()
        };
        let model = KnnModel::new(
            ds.clone(),
            FeatureMap::identity(dim),
            layers([Metric::Euclidean, Metric::Cosine]),
            1,
        )
        .unwrap();
        let vote = model.classify(&[0.5, 0.5]).unwrap();
        assert_eq!(vote.counts, vec![1, 1]);
        assert_eq!(vote.predicted, 0);
        assert_eq!(vote.fraction, 0.5);

        // Swapping the layer order flips the tie winner.
        let model = KnnModel::new(
            ds,
            FeatureMap::identity(dim),
            layers([Metric::Cosine, Metric::Euclidean]),
            1,
        )
        .unwrap();
        let vote = model.classify(&[0.5, 0.5]).unwrap();
        assert_eq!(vote.counts, vec![1, 1]);
        assert_eq!(vote.predicted, 1);
    }

    #[test]
    fn model_thresholds_are_per_layer_kth_distances() {
        let points = vec![
            LabeledPoint {
                x: vec![0.2, 0.2],
                y: 0,
            },
            LabeledPoint {
                x: vec![0.4, 0.4],
                y: 0,
            },
            LabeledPoint {
                x: vec![0.9, 0.9],
                y: 1,
            },
        ];
        let ds = Dataset::new(points, 2).unwrap();
        let model = KnnModel::plain(ds, 2, Metric::Euclidean).unwrap();
        let eta = model.thresholds(&[0.2, 0.2]).unwrap();
        assert_eq!(eta.len(), 1);
        assert!((eta[0] - euclidean_distance(&[0.2, 0.2], &[0.4, 0.4])).abs() < 1e-15);
        // At a training point the 1-NN threshold is zero.
        let model2 = KnnModel::plain(model.train().clone(), 1, Metric::Euclidean).unwrap();
        assert_eq!(model2.thresholds(&[0.2, 0.2]).unwrap(), vec![0.0]);
    }

    #[test]
    fn vote_fraction_aggregates_across_layers() {
        // Three layers, k = 2: 6 votes total.
        let points = vec![
            LabeledPoint {
                x: vec![0.45, 0.5],
                y: 0,
            },
            LabeledPoint {
                x: vec![0.55, 0.5],
                y: 1,
            },
            LabeledPoint {
                x: vec![0.9, 0.9],
                y: 1,
            },
        ];
        let ds = Dataset::new(points, 2).unwrap();
        let dim = ds.dim();
        let model = KnnModel::new(
            ds,
            FeatureMap::identity(dim),
            vec![
                ModelLayer {
                    handle: LayerHandle::post(0),
                    metric: Metric::Euclidean
                };
                3
            ],
            2,
        )
        .unwrap();
        // Each layer sees labels {0, 1} among its 2 nearest.
        let f = model.vote_fraction(&[0.5, 0.5], 1).unwrap();
        assert!((f - 0.5).abs() < 1e-15);
        let vote = model.classify(&[0.5, 0.5]).unwrap();
        assert_eq!(vote.counts, vec![3, 3]);
    }

    #[test]
    fn k_bounds_are_checked() {
        let index = index_1d(&[(0.5, 0)], 1);
        assert!(index.neighbors(&[0.0], 0).is_err());
        assert!(index.neighbors(&[0.0], 2).is_err());
        let ds = Dataset::new(vec![LabeledPoint { x: vec![0.5], y: 0 }], 1).unwrap();
        assert!(KnnModel::plain(ds, 2, Metric::Euclidean).is_err());
    }

    proptest! {
        /// Neighbor lists are sorted by (distance, index) and contain the
        /// true k smallest distances.
        #[test]
        fn neighbors_are_the_k_smallest(
            values in proptest::collection::vec((0.0f64..1.0, 0usize..3), 2..20),
            query in 0.0f64..1.0,
        ) {
            let k = 1 + values.len() / 2;
            let index = index_1d(&values, 3);
            let neighbors = index.neighbors(&[query], k).unwrap();
            // Sorted by (distance, index).
            for w in neighbors.windows(2) {
                prop_assert!(
                    w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)
                );
            }
            // The k-th distance matches kth_distance.
            let kth = index.kth_distance(&[query], k).unwrap();
            prop_assert_eq!(neighbors[k - 1].1, kth);
            // No excluded row is strictly closer than the k-th.
            let chosen: Vec<usize> = neighbors.iter().map(|(i, _)| *i).collect();
            for (i, (v, _)) in values.iter().enumerate() {
                if !chosen.contains(&i) {
                    prop_assert!((v - query).abs() >= kth);
                }
            }
        }

        /// The majority class never has fewer votes than any other class.
        #[test]
        fn predicted_class_has_max_count(
            values in proptest::collection::vec((0.0f64..1.0, 0usize..4), 3..20),
            query in 0.0f64..1.0,
        ) {
            let k = 1 + values.len() / 3;
            let index = index_1d(&values, 4);
            let vote = index.classify(&[query], k).unwrap();
            let max = *vote.counts.iter().max().unwrap();
            prop_assert_eq!(vote.counts[vote.predicted], max);
            prop_assert!((vote.fraction - max as f64 / k as f64).abs() < 1e-15);
        }
    }
}
