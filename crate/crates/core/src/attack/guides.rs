//! Guide selection.
//!
//! Guides are training points that shape the attack loss around the current
//! iterate: weight `+1` pulls the iterate toward a point (wrong class),
//! weight `-1` pushes it away (correct class). Candidates are ranked by
//! their distance to the iterate in the *first* layer's feature space;
//! per-layer thresholds `eta` are the distances to the k-th nearest
//! training point in each layer.

use crate::error::{Error, Result};
use crate::knn::KnnModel;

use super::{AttackMode, GuideHeuristic};

/// A selected set of guides together with the threshold vector they were
/// assembled with. `feats[l][i]` caches the feature vector of guide `i` in
/// layer `l`, copied out of the model's precomputed training embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideSet {
    /// Training-set indices of the guides.
    pub indices: Vec<usize>,
    /// `+1.0` or `-1.0` per guide.
    pub weights: Vec<f64>,
    /// Per-layer neighborhood threshold at the assembly point.
    pub eta: Vec<f64>,
    /// Per-layer, per-guide feature vectors.
    pub feats: Vec<Vec<Vec<f64>>>,
}

impl GuideSet {
    /// Number of guides.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// True when the set has no guides (never produced by selection).
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Builds a guide set from explicit indices and weights, filling in
    /// thresholds and cached features at `x`.
    pub fn assemble(
        model: &KnnModel,
        indices: Vec<usize>,
        weights: Vec<f64>,
        x: &[f64],
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Argument("guide set cannot be empty".into()));
        }
        if indices.len() != weights.len() {
            return Err(Error::Argument(format!(
                "{} indices but {} weights",
                indices.len(),
                weights.len()
            )));
        }
        if let Some(i) = indices.iter().find(|i| **i >= model.train().len()) {
            return Err(Error::Argument(format!(
                "guide index {} out of range for {} training points",
                i,
                model.train().len()
            )));
        }
        let eta = model.thresholds(x)?;
        let feats = (0..model.num_layers())
            .map(|l| {
                indices
                    .iter()
                    .map(|i| model.neighbor_index(l).row(*i).to_vec())
                    .collect()
            })
            .collect();
        Ok(GuideSet {
            indices,
            weights,
            eta,
            feats,
        })
    }
}

/// Per-layer distance from `x` to its k-th nearest training point — the
/// neighborhood thresholds used in the attack loss.
pub fn refresh_thresholds(model: &KnnModel, x: &[f64]) -> Result<Vec<f64>> {
    model.thresholds(x)
}

/// Indices of class `class`, sorted by `(first-layer distance, index)`.
fn class_by_distance(model: &KnnModel, dists: &[f64], class: usize) -> Vec<usize> {
    let labels = model.neighbor_index(0).labels();
    let mut members: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
    members.sort_unstable_by(|&i, &j| dists[i].total_cmp(&dists[j]).then_with(|| i.cmp(&j)));
    members
}

/// First-layer distances from `x` to every training point.
fn first_layer_distances(model: &KnnModel, x: &[f64]) -> Result<Vec<f64>> {
    let feats = model.embed(x)?;
    model.neighbor_index(0).all_distances(&feats[0])
}

fn check_label(model: &KnnModel, y: usize) -> Result<()> {
    if y >= model.num_classes() {
        return Err(Error::Argument(format!(
            "label {} out of range for {} classes",
            y,
            model.num_classes()
        )));
    }
    Ok(())
}

/// Selects `m` guides from the single most attractive wrong class: among
/// classes other than `y` with at least `m` training points, the one whose
/// `m` nearest points have the smallest summed first-layer distance to `x`
/// (ties broken by class id). All weights are `+1`.
pub fn select_guides_sw(model: &KnnModel, x: &[f64], y: usize, m: usize) -> Result<GuideSet> {
    check_label(model, y)?;
    let dists = first_layer_distances(model, x)?;
    let indices = sw_indices(model, &dists, y, m, None)?;
    GuideSet::assemble(model, indices, vec![1.0; m], x)
}

fn sw_indices(
    model: &KnnModel,
    dists: &[f64],
    y: usize,
    m: usize,
    forced_class: Option<usize>,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Argument("m must be positive".into()));
    }
    let candidates: Vec<usize> = match forced_class {
        Some(t) => vec![t],
        None => (0..model.num_classes()).filter(|c| *c != y).collect(),
    };
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for c in candidates {
        let members = class_by_distance(model, dists, c);
        if members.len() < m {
            continue;
        }
        let chosen: Vec<usize> = members[..m].to_vec();
        let sum: f64 = chosen.iter().map(|i| dists[*i]).sum();
        let better = match &best {
            None => true,
            Some((bs, bc, _)) => sum < *bs || (sum == *bs && c < *bc),
        };
        if better {
            best = Some((sum, c, chosen));
        }
    }
    match best {
        Some((_, _, chosen)) => Ok(chosen),
        None => Err(Error::Validation(format!(
            "no eligible class with {} guide candidates",
            m
        ))),
    }
}

/// Selects `m/2` nearest wrong-class guides (weight `+1`) and `m/2`
/// nearest same-class guides (weight `-1`), ranked by first-layer
/// distance. `m` must be even.
pub fn select_guides_half(model: &KnnModel, x: &[f64], y: usize, m: usize) -> Result<GuideSet> {
    check_label(model, y)?;
    let dists = first_layer_distances(model, x)?;
    let (indices, weights) = half_indices(model, &dists, y, m, None)?;
    GuideSet::assemble(model, indices, weights, x)
}

fn half_indices(
    model: &KnnModel,
    dists: &[f64],
    y: usize,
    m: usize,
    forced_class: Option<usize>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "half-half guides need an even, positive m, got {}",
            m
        )));
    }
    let half = m / 2;
    let labels = model.neighbor_index(0).labels();
    let wrong_pool: Vec<usize> = match forced_class {
        Some(t) => class_by_distance(model, dists, t),
        None => {
            let mut pool: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] != y).collect();
            pool.sort_unstable_by(|&i, &j| dists[i].total_cmp(&dists[j]).then_with(|| i.cmp(&j)));
            pool
        }
    };
    if wrong_pool.len() < half {
        return Err(Error::Validation(format!(
            "only {} wrong-class candidates, need {}",
            wrong_pool.len(),
            half
        )));
    }
    let same_pool = class_by_distance(model, dists, y);
    if same_pool.len() < half {
        return Err(Error::Validation(format!(
            "class {} has only {} candidates, need {}",
            y,
            same_pool.len(),
            half
        )));
    }
    let mut indices = wrong_pool[..half].to_vec();
    indices.extend_from_slice(&same_pool[..half]);
    let mut weights = vec![1.0; half];
    weights.extend(vec![-1.0; half]);
    Ok((indices, weights))
}

/// Guide selection with the wrong-class pool restricted to `target`.
pub fn select_guides_targeted(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    target: usize,
    m: usize,
    heuristic: GuideHeuristic,
) -> Result<GuideSet> {
    check_label(model, y)?;
    check_label(model, target)?;
    if target == y {
        return Err(Error::Argument(format!(
            "target class equals the true label {}",
            y
        )));
    }
    let dists = first_layer_distances(model, x)?;
    let (indices, weights) = match heuristic {
        GuideHeuristic::SwSameClass => {
            let idx = sw_indices(model, &dists, y, m, Some(target))?;
            let w = vec![1.0; idx.len()];
            (idx, w)
        }
        GuideHeuristic::HalfHalf => half_indices(model, &dists, y, m, Some(target))?,
    };
    GuideSet::assemble(model, indices, weights, x)
}

/// Dispatches guide selection for the given heuristic and mode.
pub(super) fn select(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    m: usize,
    heuristic: GuideHeuristic,
    mode: AttackMode,
) -> Result<GuideSet> {
    match mode {
        AttackMode::Targeted(t) => select_guides_targeted(model, x, y, t, m, heuristic),
        AttackMode::Untargeted | AttackMode::Credibility(_) => match heuristic {
            GuideHeuristic::SwSameClass => select_guides_sw(model, x, y, m),
            GuideHeuristic::HalfHalf => select_guides_half(model, x, y, m),
        },
    }
}
