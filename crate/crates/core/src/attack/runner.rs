//! The attack driver: restarts, the binary search over the norm weight,
//! and the per-run gradient loop.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::knn::{KnnModel, Vote};

use super::{
    binary_search_c, guides::select, m_floor, objective_and_grad, reparam_box, reparam_grad_factor,
    reparam_inverse, Adam, AttackConfig, AttackMode, GuideSet, RmsProp,
};

/// Outcome of one attack on one input.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Whether any verified adversarial point was found.
    pub success: bool,
    /// The best (smallest-norm) adversarial point found.
    pub adv: Option<Vec<f64>>,
    /// L2 norm of the best perturbation; `None` on failure.
    pub norm: Option<f64>,
    /// Total gradient steps spent across all runs.
    pub steps: usize,
    /// Number of starts actually attempted (including the initial one).
    pub restarts_used: usize,
    /// Wall-clock time of the whole attack.
    pub wall: Duration,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
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

/// Whether a vote satisfies the attack's success condition.
pub fn is_success(vote: &Vote, y: usize, mode: AttackMode) -> bool {
    match mode {
        AttackMode::Untargeted => vote.predicted != y,
        AttackMode::Targeted(t) => vote.predicted == t,
        AttackMode::Credibility(f) => vote.predicted != y && vote.fraction >= f,
    }
}

/// Classifies `xh`; on success, records it if it beats the best norm so far.
fn check_and_save(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    xh: &[f64],
    mode: AttackMode,
    best: &mut Option<(Vec<f64>, f64)>,
) -> Result<bool> {
    let vote = model.classify(xh)?;
    if !is_success(&vote, y, mode) {
        return Ok(false);
    }
    let norm = l2(xh, x);
    if best.as_ref().is_none_or(|(_, b)| norm < *b) {
        *best = Some((xh.to_vec(), norm));
    }
    Ok(true)
}

/// Start points for the attack: the input itself, followed by the
/// `cfg.restarts` nearest training points (by input-space L2 distance)
/// that the *model* classifies into an acceptable class — any class other
/// than `y`, or the target class in targeted mode. Points the model happens
/// to classify as `y` are skipped regardless of their labels. If fewer
/// candidates exist than requested, the list is simply shorter.
pub fn init_restarts(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
) -> Result<Vec<Vec<f64>>> {
    check_input(model, x, y)?;
    let mut starts = vec![x.to_vec()];
    if cfg.restarts == 0 {
        return Ok(starts);
    }
    let train = model.train();
    let wanted = |i: usize| -> bool {
        match cfg.mode {
            AttackMode::Targeted(t) => model.train_prediction(i) == t,
            AttackMode::Untargeted | AttackMode::Credibility(_) => model.train_prediction(i) != y,
        }
    };
    let mut candidates: Vec<(f64, usize)> = (0..train.len())
        .filter(|i| wanted(*i))
        .map(|i| (l2(train.feature(i), x), i))
        .collect();
    candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    if candidates.len() < cfg.restarts {
        log::debug!(
            "only {} of {} requested restart candidates available",
            candidates.len(),
            cfg.restarts
        );
    }
    starts.extend(
        candidates
            .iter()
            .take(cfg.restarts)
            .map(|(_, i)| train.feature(*i).to_vec()),
    );
    Ok(starts)
}

/// One gradient-descent run from `start` at a fixed norm weight `c`.
/// Returns whether any checked iterate was adversarial. Numerical
/// breakdown (non-finite loss or gradient) aborts the run and counts as
/// failure rather than an error.
#[allow(clippy::too_many_arguments)]
fn optimize_run(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    start: &[f64],
    c: f64,
    m: usize,
    cfg: &AttackConfig,
    best: &mut Option<(Vec<f64>, f64)>,
    steps_total: &mut usize,
) -> Result<bool> {
    let mut z = reparam_inverse(start);
    let mut xh = reparam_box(&z);
    let mut opt = RmsProp::new(z.len(), cfg.lr, cfg.rms_decay)?;
    let mut guides: Option<GuideSet> = None;
    let mut found = false;
    let mut checked_last = false;
    for step in 0..cfg.max_steps {
        if step % cfg.refresh_period == 0 {
            guides = Some(select(model, &xh, y, m, cfg.heuristic, cfg.mode)?);
        }
        let delta: Vec<f64> = xh.iter().zip(x).map(|(a, b)| a - b).collect();
        let (loss, grad_x) = objective_and_grad(
            model,
            guides.as_ref().expect("selected above"),
            x,
            &delta,
            c,
            cfg.margin,
            cfg.objective,
        )?;
        if !loss.is_finite() {
            log::debug!("aborting run: non-finite loss at step {}", step);
            return Ok(found);
        }
        let factor = reparam_grad_factor(&z);
        let grad_z: Vec<f64> = grad_x.iter().zip(&factor).map(|(g, f)| g * f).collect();
        if grad_z.iter().any(|g| !g.is_finite()) {
            log::debug!("aborting run: non-finite gradient at step {}", step);
            return Ok(found);
        }
        opt.step(&mut z, &grad_z)?;
        xh = reparam_box(&z);
        *steps_total += 1;
        checked_last = (step + 1) % cfg.check_period == 0;
        if checked_last {
            found |= check_and_save(model, x, y, &xh, cfg.mode, best)?;
        }
    }
    if !checked_last {
        found |= check_and_save(model, x, y, &xh, cfg.mode, best)?;
    }
    Ok(found)
}

/// The full minimum-norm attack.
///
/// Starts from the input and from [`init_restarts`] points, adds Gaussian
/// noise to every start, and for each start runs a binary search over the
/// norm weight `c`, optimizing the hinge loss with RMSprop under the tanh
/// box parameterization. Guides and thresholds are refreshed every
/// `refresh_period` steps, iterates are classified every `check_period`
/// steps, and the best verified adversarial point across all runs is
/// returned. After a start with at least one successful trial, the guide
/// count is reduced by 2 (never below `m_floor(k)`), focusing later starts.
/// An input the model already classifies as acceptable yields an immediate
/// zero-norm success. Failure is encoded in the result, not as an error.
pub fn run_attack(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate(model)?;
    check_input(model, x, y)?;
    if let AttackMode::Targeted(t) = cfg.mode {
        if t == y {
            return Err(Error::Argument(format!(
                "target class equals the true label {}",
                y
            )));
        }
    }
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::Argument(format!("bad noise parameters: {}", e)))?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut steps_total = 0usize;

    let clean = model.classify(x)?;
    if is_success(&clean, y, cfg.mode) {
        best = Some((x.to_vec(), 0.0));
    }

    let starts = init_restarts(model, x, y, cfg)?;
    let mut m_current = cfg.m;
    let floor = m_floor(model.k());
    let mut restarts_used = 0usize;
    for start in &starts {
        restarts_used += 1;
        let noisy: Vec<f64> = start
            .iter()
            .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        let trace = binary_search_c(cfg.c_init, cfg.c_lo, cfg.c_hi, cfg.bs_steps, |c| {
            optimize_run(
                model,
                x,
                y,
                &noisy,
                c,
                m_current,
                cfg,
                &mut best,
                &mut steps_total,
            )
        })?;
        if trace.iter().any(|(_, ok)| *ok) && m_current > floor {
            m_current = m_current.saturating_sub(2).max(floor);
        }
    }

    Ok(AttackResult {
        success: best.is_some(),
        norm: best.as_ref().map(|(_, n)| *n),
        adv: best.map(|(adv, _)| adv),
        steps: steps_total,
        restarts_used,
        wall: t0.elapsed(),
    })
}

/// The sigmoid-loss baseline attack.
///
/// Guides and thresholds are chosen once at the clean input and never
/// refreshed; there is a single start at the input itself with no noise;
/// optimization uses Adam; and only the final iterate of each `c` trial is
/// checked. The binary search over `c` and the best-norm bookkeeping match
/// the main attack. The config must select the sigmoid objective.
pub fn run_attack_sw_baseline(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate(model)?;
    check_input(model, x, y)?;
    if cfg.objective != super::ObjectiveKind::Sigmoid {
        return Err(Error::Argument(
            "the baseline attack uses the sigmoid objective".into(),
        ));
    }
    if let AttackMode::Targeted(t) = cfg.mode {
        if t == y {
            return Err(Error::Argument(format!(
                "target class equals the true label {}",
                y
            )));
        }
    }
    let t0 = Instant::now();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut steps_total = 0usize;

    let clean = model.classify(x)?;
    if is_success(&clean, y, cfg.mode) {
        best = Some((x.to_vec(), 0.0));
    }

    let guides = select(model, x, y, cfg.m, cfg.heuristic, cfg.mode)?;
    binary_search_c(cfg.c_init, cfg.c_lo, cfg.c_hi, cfg.bs_steps, |c| {
        let mut z = reparam_inverse(x);
        let mut xh = reparam_box(&z);
        let mut opt = Adam::new(z.len(), cfg.lr)?;
        for step in 0..cfg.max_steps {
            let delta: Vec<f64> = xh.iter().zip(x).map(|(a, b)| a - b).collect();
            let (loss, grad_x) =
                objective_and_grad(model, &guides, x, &delta, c, cfg.margin, cfg.objective)?;
            if !loss.is_finite() {
                log::debug!("aborting baseline run: non-finite loss at step {}", step);
                return Ok(false);
            }
            let factor = reparam_grad_factor(&z);
            let grad_z: Vec<f64> = grad_x.iter().zip(&factor).map(|(g, f)| g * f).collect();
            if grad_z.iter().any(|g| !g.is_finite()) {
                log::debug!(
                    "aborting baseline run: non-finite gradient at step {}",
                    step
                );
                return Ok(false);
            }
            opt.step(&mut z, &grad_z)?;
            xh = reparam_box(&z);
            steps_total += 1;
        }
        check_and_save(model, x, y, &xh, cfg.mode, &mut best)
    })?;

    Ok(AttackResult {
        success: best.is_some(),
        norm: best.as_ref().map(|(_, n)| *n),
        adv: best.map(|(adv, _)| adv),
        steps: steps_total,
        restarts_used: 1,
        wall: t0.elapsed(),
    })
}

/// [`run_attack`] with success restricted to a specific wrong class.
pub fn run_attack_targeted(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if target == y {
        return Err(Error::Argument(format!(
            "target class equals the true label {}",
            y
        )));
    }
    let cfg = AttackConfig {
        mode: AttackMode::Targeted(target),
        ..cfg.clone()
    };
    run_attack(model, x, y, &cfg)
}

/// [`run_attack`] with success additionally requiring the winning class to
/// take at least `min_fraction` of all cast votes. `min_fraction == 0`
/// reduces exactly to the plain attack.
pub fn run_attack_credibility(
    model: &KnnModel,
    x: &[f64],
    y: usize,
    min_fraction: f64,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Argument(format!(
            "min vote fraction must lie in [0, 1], got {}",
            min_fraction
        )));
    }
    let cfg = AttackConfig {
        mode: AttackMode::Credibility(min_fraction),
        ..cfg.clone()
    };
    run_attack(model, x, y, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{GuideHeuristic, ObjectiveKind};
    use crate::dataset::{gen_gaussian_blobs, Dataset, LabeledPoint};
    use crate::knn::Metric;

    fn model_1d(values: &[(f64, usize)], num_classes: usize, k: usize) -> KnnModel {
        let points = values
            .iter()
            .map(|(v, y)| LabeledPoint { x: vec![*v], y: *y })
            .collect();
        let ds = Dataset::new(points, num_classes).unwrap();
        KnnModel::plain(ds, k, Metric::Euclidean).unwrap()
    }

    /// Two points, one per class: the decision boundary is the midpoint
    /// 0.5, so the optimal perturbation from 0.2 has norm 0.3.
    fn bisector_model() -> KnnModel {
        model_1d(&[(0.0, 0), (1.0, 1)], 2, 1)
    }

    #[test]
    fn attack_crosses_the_bisector_tightly() {
        let model = bisector_model();
        let cfg = AttackConfig {
            restarts: 1,
            seed: 7,
            ..AttackConfig::for_k(1)
        };
        let res = run_attack(&model, &[0.2], 0, &cfg).unwrap();
        assert!(res.success);
        let norm = res.norm.unwrap();
        assert!(norm >= 0.3, "norm {} below the true minimum", norm);
        assert!(norm <= 0.3 * 1.05, "norm {} too loose", norm);
        // The returned point really is adversarial.
        let adv = res.adv.unwrap();
        assert_ne!(model.classify(&adv).unwrap().predicted, 0);
        assert!(res.steps > 0);
        assert_eq!(res.restarts_used, 2);
    }

    #[test]
    fn baseline_succeeds_but_never_beats_the_attack_here() {
        let model = bisector_model();
        let ours = run_attack(
            &model,
            &[0.2],
            0,
            &AttackConfig {
                restarts: 1,
                seed: 7,
                ..AttackConfig::for_k(1)
            },
        )
        .unwrap();
        let base = run_attack_sw_baseline(
            &model,
            &[0.2],
            0,
            &AttackConfig {
                m: 1,
                ..AttackConfig::sw_baseline(1)
            },
        )
        .unwrap();
        assert!(base.success);
        let (a, b) = (ours.norm.unwrap(), base.norm.unwrap());
        assert!(b >= 0.3, "baseline norm {}", b);
        assert!(a <= b + 1e-9, "ours {} vs baseline {}", a, b);
    }

    #[test]
    fn baseline_requires_the_sigmoid_objective() {
        let model = bisector_model();
        let cfg = AttackConfig {
            objective: ObjectiveKind::Relu,
            ..AttackConfig::sw_baseline(1)
        };
        assert!(matches!(
            run_attack_sw_baseline(&model, &[0.2], 0, &cfg).unwrap_err(),
            Error::Argument(_)
        ));
    }

    #[test]
    fn misclassified_input_is_a_zero_norm_success() {
        // x = 0.45 with label 1: the nearest neighbor is class 0.
        let model = bisector_model();
        let res = run_attack(&model, &[0.45], 1, &AttackConfig::for_k(1)).unwrap();
        assert!(res.success);
        assert_eq!(res.norm, Some(0.0));
        assert_eq!(res.adv.unwrap(), vec![0.45]);
    }

    #[test]
    fn attacks_are_deterministic_in_the_seed() {
        let model = bisector_model();
        let cfg = AttackConfig {
            restarts: 2,
            seed: 42,
            ..AttackConfig::for_k(1)
        };
        let a = run_attack(&model, &[0.2], 0, &cfg).unwrap();
        let b = run_attack(&model, &[0.2], 0, &cfg).unwrap();
        // Bit-identical apart from wall-clock time.
        assert_eq!(a.adv, b.adv);
        assert_eq!(a.norm, b.norm);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.restarts_used, b.restarts_used);
        let c = run_attack(&model, &[0.2], 0, &AttackConfig { seed: 43, ..cfg }).unwrap();
        // Same instance, different noise: the iterates differ even if the
        // final norms happen to be close.
        assert_ne!(a.adv, c.adv);
    }

    #[test]
    fn targeted_equals_untargeted_on_two_classes() {
        let model = bisector_model();
        let cfg = AttackConfig {
            seed: 5,
            ..AttackConfig::for_k(1)
        };
        let plain = run_attack(&model, &[0.2], 0, &cfg).unwrap();
        let targeted = run_attack_targeted(&model, &[0.2], 0, 1, &cfg).unwrap();
        assert_eq!(plain.norm, targeted.norm);
        assert_eq!(plain.adv, targeted.adv);
    }

    #[test]
    fn targeting_a_farther_class_costs_more() {
        // Classes 1 and 2 on opposite sides of class 0; class 2 is farther
        // from x, so forcing it costs a larger perturbation.
        let model = model_1d(
            &[
                (0.35, 0),
                (0.4, 0),
                (0.5, 1),
                (0.55, 1),
                (0.9, 2),
                (0.95, 2),
            ],
            3,
            1,
        );
        let cfg = AttackConfig {
            seed: 3,
            restarts: 2,
            ..AttackConfig::for_k(1)
        };
        let x = [0.38];
        let untargeted = run_attack(&model, &x, 0, &cfg).unwrap();
        let far = run_attack_targeted(&model, &x, 0, 2, &cfg).unwrap();
        assert!(untargeted.success && far.success);
        assert!(far.norm.unwrap() >= untargeted.norm.unwrap());
        // The targeted result really lands in class 2.
        let adv = far.adv.unwrap();
        assert_eq!(model.classify(&adv).unwrap().predicted, 2);

        assert!(matches!(
            run_attack_targeted(&model, &x, 0, 0, &cfg).unwrap_err(),
            Error::Argument(_)
        ));
    }

    #[test]
    fn credibility_zero_reduces_to_the_plain_attack() {
        let ds = gen_gaussian_blobs(13, &[vec![0.3, 0.3], vec![0.7, 0.7]], 0.08, 12).unwrap();
        let model = KnnModel::plain(ds, 3, Metric::Euclidean).unwrap();
        let cfg = AttackConfig {
            seed: 11,
            m: 4,
            ..AttackConfig::for_k(3)
        };
        let x = [0.32, 0.28];
        let plain = run_attack(&model, &x, 0, &cfg).unwrap();
        let cred = run_attack_credibility(&model, &x, 0, 0.0, &cfg).unwrap();
        assert_eq!(plain.adv, cred.adv);
        assert_eq!(plain.norm, cred.norm);
        assert_eq!(plain.steps, cred.steps);
    }

    #[test]
    fn credibility_bound_raises_the_cost_and_is_satisfied() {
        let ds = gen_gaussian_blobs(13, &[vec![0.3, 0.3], vec![0.7, 0.7]], 0.08, 12).unwrap();
        let model = KnnModel::plain(ds, 3, Metric::Euclidean).unwrap();
        let cfg = AttackConfig {
            seed: 11,
            m: 4,
            ..AttackConfig::for_k(3)
        };
        let x = [0.32, 0.28];
        let plain = run_attack(&model, &x, 0, &cfg).unwrap();
        let cred = run_attack_credibility(&model, &x, 0, 1.0, &cfg).unwrap();
        assert!(plain.success && cred.success);
        assert!(cred.norm.unwrap() >= plain.norm.unwrap());
        let adv = cred.adv.unwrap();
        let vote = model.classify(&adv).unwrap();
        assert_ne!(vote.predicted, 0);
        assert!(vote.fraction >= 1.0);
    }

    #[test]
    fn restarts_use_model_predictions_not_labels() {
        // The point at 0.22 is labeled 1 but classified 0 by 3-NN (its two
        // nearest neighbors are class 0). It must not be used as a start;
        // the nearest genuinely wrong-classified point is 0.8.
        let model = model_1d(
            &[
                (0.1, 0),
                (0.15, 0),
                (0.2, 0),
                (0.22, 1),
                (0.8, 1),
                (0.85, 1),
                (0.9, 1),
            ],
            2,
            3,
        );
        assert_eq!(model.train_prediction(3), 0);
        let cfg = AttackConfig {
            restarts: 1,
            ..AttackConfig::for_k(3)
        };
        let starts = init_restarts(&model, &[0.3], 0, &cfg).unwrap();
        assert_eq!(starts.len(), 2);
        assert_eq!(starts[0], vec![0.3]);
        assert_eq!(starts[1], vec![0.8]);
    }

    #[test]
    fn restarts_zero_keeps_only_the_input() {
        let model = bisector_model();
        let cfg = AttackConfig {
            restarts: 0,
            ..AttackConfig::for_k(1)
        };
        let starts = init_restarts(&model, &[0.2], 0, &cfg).unwrap();
        assert_eq!(starts, vec![vec![0.2]]);
    }

    #[test]
    fn zero_hinge_loss_certifies_a_flipped_vote() {
        // With half-half guides, m >= k + 1 and odd k, a zero hinge sum
        // means at least (k+1)/2 wrong-class points sit strictly inside the
        // k-NN radius: the vote must flip. Check at a point deep inside the
        // wrong cluster.
        let ds = gen_gaussian_blobs(29, &[vec![0.25, 0.25], vec![0.75, 0.75]], 0.05, 10).unwrap();
        let model = KnnModel::plain(ds, 3, Metric::Euclidean).unwrap();
        let x = [0.3, 0.3];
        let xh = [0.74, 0.76]; // deep inside class 1 territory
        let guides = crate::attack::select_guides_half(&model, &xh, 0, 4).unwrap();
        let delta: Vec<f64> = xh.iter().zip(&x).map(|(a, b)| a - b).collect();
        let (loss, _) =
            objective_and_grad(&model, &guides, &x, &delta, 0.0, 1e-5, ObjectiveKind::Relu)
                .unwrap();
        assert_eq!(loss, 0.0, "hinge loss should vanish deep in the cluster");
        assert_ne!(model.classify(&xh).unwrap().predicted, 0);
    }

    #[test]
    fn guide_count_never_drops_below_the_floor() {
        // Tiny classes: half-half with m = 4 and k = 1 (floor 2). After a
        // successful start, m drops to 2 and selection still works; the
        // attack stays successful end to end.
        let model = model_1d(&[(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)], 2, 1);
        let cfg = AttackConfig {
            m: 4,
            restarts: 2,
            seed: 1,
            ..AttackConfig::for_k(1)
        };
        let res = run_attack(&model, &[0.15], 0, &cfg).unwrap();
        assert!(res.success);
    }

    #[test]
    fn sw_heuristic_attack_works_end_to_end() {
        let model = model_1d(&[(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)], 2, 1);
        let cfg = AttackConfig {
            m: 2,
            heuristic: GuideHeuristic::SwSameClass,
            seed: 2,
            ..AttackConfig::for_k(1)
        };
        let res = run_attack(&model, &[0.15], 0, &cfg).unwrap();
        assert!(res.success);
        let adv = res.adv.unwrap();
        assert_eq!(model.classify(&adv).unwrap().predicted, 1);
    }
}
