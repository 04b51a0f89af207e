//! Classification of new observations by Monte Carlo estimates of
//! `E[g_θ(Ỹ | I = i, X) | Ỹ, I = i]` summed over the components of a label.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::DeformationModel;
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::model::{ModelParams, Observation};
use crate::rng::{stream_rng, Purpose};
use crate::sampler::{acceptance_probability, PosteriorTarget, ScaleAdaptation, Target};

/// Per-(observation, component) chain budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBudget {
    pub burn_in: usize,
    pub samples: usize,
    pub initial_scale: f64,
    pub target_acceptance: f64,
}

impl Default for McBudget {
    fn default() -> Self {
        Self {
            burn_in: 100,
            samples: 200,
            initial_scale: 0.5,
            target_acceptance: 0.4,
        }
    }
}

/// Component-to-label map `M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub labels: Vec<usize>,
    pub num_labels: usize,
}

impl ClassMapping {
    pub fn new(labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::invalid(format!("label {bad} outside 0..{num_labels}")));
        }
        Ok(Self { labels, num_labels })
    }

    /// Component `i` carries label `i`.
    pub fn identity(components: usize) -> Self {
        Self {
            labels: (0..components).collect(),
            num_labels: components,
        }
    }

    pub fn components_of(&self, label: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Log of the Monte Carlo estimate of `E[g(Ỹ | i, X) | Ỹ, I = i]` from a
/// random-walk chain on `π(X | Ỹ, I = i)` started at the prior mean.
/// `key` selects the random stream.
pub fn component_score(
    params: &ModelParams,
    model: &DeformationModel,
    y: &Observation,
    component: usize,
    budget: &McBudget,
    seed: u64,
    key: (u64, u64),
) -> Result<f64> {
    if budget.samples == 0 {
        return Err(Error::invalid("classification needs at least one sample"));
    }
    let target = PosteriorTarget::new(params, model, y)?;
    if component >= target.num_classes() {
        return Err(Error::invalid(format!("component {component} out of range")));
    }
    let mut rng = stream_rng(seed, Purpose::Classify, key.0, key.1);
    let (mut z, _) = target.prior_moments(component);
    let (mut lp, mut lg) = target.evaluate(component, &z)?;
    if !lp.is_finite() {
        return Err(Error::DeadState);
    }
    let mut scale = budget.initial_scale;
    let mut adapt = ScaleAdaptation::new(budget.target_acceptance, 1);
    let mut log_g = Vec::with_capacity(budget.samples);
    for k in 0..budget.burn_in + budget.samples {
        let (prop, log_q) = target.propose(component, &z, scale, &mut rng);
        let (plp, plg) = target.evaluate(component, &prop)?;
        let a = if plp == f64::NEG_INFINITY {
            0.0
        } else {
            acceptance_probability(plp - lp + log_q)
        };
        if rand::Rng::random::<f64>(&mut rng) < a {
            z = prop;
            lp = plp;
            lg = plg;
        }
        if k < budget.burn_in {
            adapt.update(0, &mut scale, a);
        } else {
            log_g.push(lg);
        }
    }
    Ok(log_sum_exp(&log_g) - (log_g.len() as f64).ln())
}

/// `log Σ_{i∈S} exp(component_score_i)`; `−∞` for an empty set.
pub fn class_score(
    params: &ModelParams,
    model: &DeformationModel,
    y: &Observation,
    components: &[usize],
    budget: &McBudget,
    seed: u64,
    obs_key: u64,
) -> Result<f64> {
    let scores = components
        .iter()
        .map(|&i| component_score(params, model, y, i, budget, seed, (obs_key, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    /// Log score of every label.
    pub scores: Vec<f64>,
}

/// Argmax over per-label scores; ties go to the smaller label.
pub fn argmax_label(scores: &[f64]) -> usize {
    let mut best = 0;
    for (l, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = l;
        }
    }
    best
}

/// Fully-unsupervised rule: every component of `params` scores for its
/// mapped label.
pub fn classify(
    params: &ModelParams,
    model: &DeformationModel,
    y: &Observation,
    mapping: &ClassMapping,
    budget: &McBudget,
    seed: u64,
    obs_key: u64,
) -> Result<Prediction> {
    if mapping.labels.len() != params.num_classes() {
        return Err(Error::invalid(format!(
            "mapping covers {} components, model has {}",
            mapping.labels.len(),
            params.num_classes()
        )));
    }
    let comp: Vec<f64> = (0..params.num_classes())
        .map(|i| component_score(params, model, y, i, budget, seed, (obs_key, i as u64)))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = (0..mapping.num_labels)
        .map(|l| {
            let s: Vec<f64> = mapping.components_of(l).iter().map(|&i| comp[i]).collect();
            log_sum_exp(&s)
        })
        .collect();
    Ok(Prediction {
        label: argmax_label(&scores),
        scores,
    })
}

/// Partially-supervised rule: label `v` is scored with its own parameter
/// bank.
pub fn classify_banks(
    banks: &[ModelParams],
    model: &DeformationModel,
    y: &Observation,
    budget: &McBudget,
    seed: u64,
    obs_key: u64,
) -> Result<Prediction> {
    if banks.is_empty() {
        return Err(Error::invalid("at least one label bank is required"));
    }
    let scores = banks
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let comps: Vec<f64> = (0..p.num_classes())
                .map(|i| {
                    let key = ((v as u64) << 20) | i as u64;
                    component_score(p, model, y, i, budget, seed, (obs_key, key))
                })
                .collect::<Result<_>>()?;
            Ok(log_sum_exp(&comps))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Prediction {
        label: argmax_label(&scores),
        scores,
    })
}

fn checkpoint_seed(seed: u64, t_index: u64) -> u64 {
    seed ^ t_index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Misclassification fraction on a labeled test set.
pub fn error_rate(
    params: &ModelParams,
    model: &DeformationModel,
    test: &[Observation],
    mapping: &ClassMapping,
    budget: &McBudget,
    seed: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let wrong = test
        .par_iter()
        .enumerate()
        .map(|(k, y)| {
            let truth = y
                .label
                .ok_or_else(|| Error::invalid(format!("test observation {k} has no label")))?;
            let p = classify(params, model, y, mapping, budget, seed, k as u64)?;
            Ok(usize::from(p.label != truth))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(wrong as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub t: f64,
    pub rho: f64,
}

/// `ρ_t` for every `(t, θ̂_t)` in `trajectory`. Observation `k` at
/// checkpoint index `s` uses the stream keyed by `(s, k)`.
pub fn live_error_rate(
    trajectory: &[(f64, ModelParams)],
    model: &DeformationModel,
    test: &[Observation],
    mapping: &ClassMapping,
    budget: &McBudget,
    seed: u64,
) -> Result<Vec<ErrorPoint>> {
    if trajectory.is_empty() {
        return Err(Error::invalid("trajectory is empty"));
    }
    trajectory
        .iter()
        .enumerate()
        .map(|(s, (t, params))| {
            let rho = error_rate(params, model, test, mapping, budget, checkpoint_seed(seed, s as u64))?;
            Ok(ErrorPoint { t: *t, rho })
        })
        .collect()
}

pub fn write_error_table<W: Write>(points: &[ErrorPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    w.write_record(["t", "rho"]).map_err(wrap)?;
    for p in points {
        w.write_record([crate::io::fmt_f64(p.t), crate::io::fmt_f64(p.rho)])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Convenience outside the model: maps each component to the most frequent
/// true label among calibration observations it wins (ties and unused
/// components go to the smaller label).
pub fn majority_vote_mapping(
    params: &ModelParams,
    model: &DeformationModel,
    calibration: &[Observation],
    num_labels: usize,
    budget: &McBudget,
    seed: u64,
) -> Result<ClassMapping> {
    let c = params.num_classes();
    let ident = ClassMapping::identity(c);
    let mut votes = vec![vec![0usize; num_labels]; c];
    for (k, y) in calibration.iter().enumerate() {
        let truth = y
            .label
            .ok_or_else(|| Error::invalid(format!("calibration observation {k} has no label")))?;
        if truth >= num_labels {
            return Err(Error::invalid(format!("label {truth} outside 0..{num_labels}")));
        }
        let p = classify(params, model, y, &ident, budget, seed, k as u64)?;
        votes[p.label][truth] += 1;
    }
    let labels = votes
        .iter()
        .map(|v| {
            let scores: Vec<f64> = v.iter().map(|&n| n as f64).collect();
            argmax_label(&scores)
        })
        .collect();
    ClassMapping::new(labels, num_labels)
}

/// Uninformative parameters for `L` labels: identical zero templates.
pub fn flat_templates(template: &ModelParams) -> ModelParams {
    let mut p = template.clone();
    for c in &mut p.classes {
        c.alpha = DVector::zeros(c.alpha.len());
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::{DesignGrid, KernelDictionary, Warp};
    use crate::model::{log_obs_density, sample_generative, ClassParams, HiddenState};
    use nalgebra::DMatrix;

    fn setup(scale_enabled: bool, warp: Warp) -> (ModelParams, DeformationModel) {
        let grid = DesignGrid::regular_line(0.0, 1.0, 12).unwrap();
        let dict = KernelDictionary::regular_line(0.0, 1.0, 4, 0.05).unwrap();
        let d = warp.beta_dim();
        let model = DeformationModel::new(dict, warp, grid).unwrap();
        let cls = |a: Vec<f64>, w| ClassParams {
            alpha: DVector::from_vec(a),
            gamma: DMatrix::identity(d, d) * 0.05,
            weight: w,
        };
        let params = ModelParams {
            classes: vec![
                cls(vec![1.0, 0.0, 0.0, 1.0], 0.5),
                cls(vec![0.0, 1.0, 1.0, 0.0], 0.5),
            ],
            sigma2: 0.02,
            gamma_a: 10.0,
            gamma_b: 10.0,
            beta_prior_mean: DVector::zeros(d),
            scale_enabled,
            nonnegative_templates: false,
        };
        (params, model)
    }

    #[test]
    fn degenerate_posterior_gives_exact_density() {
        let (params, model) = setup(false, Warp::Identity { beta_dim: 1 });
        let y = Observation::new(DVector::from_fn(12, |i, _| 0.05 * i as f64));
        let s = component_score(&params, &model, &y, 1, &McBudget::default(), 1, (0, 1)).unwrap();
        let state = HiddenState {
            class_index: 1,
            scale: 1.0,
            beta: DVector::zeros(1),
        };
        let phi = model.base_design_matrix();
        let want = log_obs_density(&params, &state, &y, &phi).unwrap();
        assert!((s - want).abs() < 1e-9, "{s} vs {want}");
    }

    #[test]
    fn scores_are_additive() {
        let (params, model) = setup(true, Warp::Identity { beta_dim: 1 });
        let y = Observation::new(DVector::from_element(12, 0.4));
        let b = McBudget::default();
        let both = class_score(&params, &model, &y, &[0, 1], &b, 3, 7).unwrap();
        let a0 = class_score(&params, &model, &y, &[0], &b, 3, 7).unwrap();
        let a1 = class_score(&params, &model, &y, &[1], &b, 3, 7).unwrap();
        assert!((both.exp() - (a0.exp() + a1.exp())).abs() <= 1e-12 * both.exp());
    }

    #[test]
    fn ties_go_to_smaller_label() {
        assert_eq!(argmax_label(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax_label(&[f64::NEG_INFINITY, -3.0]), 1);
        assert_eq!(argmax_label(&[2.0]), 0);
    }

    #[test]
    fn relabeling_swaps_predictions() {
        let (params, model) = setup(true, Warp::Identity { beta_dim: 1 });
        let mut rng = stream_rng(2, Purpose::Synthetic, 0, 0);
        let b = McBudget {
            burn_in: 20,
            samples: 30,
            ..Default::default()
        };
        let m = ClassMapping::new(vec![0, 1], 2).unwrap();
        let swapped = ClassMapping::new(vec![1, 0], 2).unwrap();
        for k in 0..10 {
            let (_, y) = sample_generative(&params, &model, &mut rng).unwrap();
            let a = classify(&params, &model, &y, &m, &b, 5, k).unwrap();
            let s = classify(&params, &model, &y, &swapped, &b, 5, k).unwrap();
            assert_eq!(a.label, 1 - s.label);
            assert_eq!(a.scores[0], s.scores[1]);
        }
    }

    #[test]
    fn oracle_parameters_classify_well_separated_draws() {
        let (params, model) = setup(true, Warp::Identity { beta_dim: 1 });
        let mut rng = stream_rng(4, Purpose::Synthetic, 0, 0);
        let test: Vec<Observation> = (0..200)
            .map(|_| sample_generative(&params, &model, &mut rng).unwrap().1)
            .collect();
        let b = McBudget {
            burn_in: 20,
            samples: 40,
            ..Default::default()
        };
        let rho = error_rate(&params, &model, &test, &ClassMapping::identity(2), &b, 1).unwrap();
        assert!(rho < 0.05, "{rho}");
        let again = error_rate(&params, &model, &test, &ClassMapping::identity(2), &b, 1).unwrap();
        assert_eq!(rho, again);
        let one = error_rate(&params, &model, &test[..1], &ClassMapping::identity(2), &b, 1).unwrap();
        assert!(one == 0.0 || one == 1.0);
    }

    #[test]
    fn single_label_always_wins() {
        let (params, model) = setup(false, Warp::Identity { beta_dim: 1 });
        let y = Observation::new(DVector::from_element(12, 0.1));
        let m = ClassMapping::new(vec![0, 0], 1).unwrap();
        let b = McBudget {
            burn_in: 5,
            samples: 5,
            ..Default::default()
        };
        assert_eq!(classify(&params, &model, &y, &m, &b, 1, 0).unwrap().label, 0);
    }

    #[test]
    fn error_table_csv() {
        let mut buf = Vec::new();
        write_error_table(&[ErrorPoint { t: 0.0, rho: 0.9 }, ErrorPoint { t: 1.5, rho: 0.25 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,rho\n0,0.9\n1.5,0.25\n");
    }

    #[test]
    fn one_dimensional_warp_matches_grid_quadrature() {
        use crate::deformation::CurveWarpModel;
        let kernels = KernelDictionary::new(1, vec![0.5], vec![0.1]).unwrap();
        let warp = CurveWarpModel::new((0.0, 1.0), (-0.5, 1.5), kernels, 256).unwrap();
        let (mut params, model) = setup(false, Warp::Curve(warp));
        for c in &mut params.classes {
            c.gamma = DMatrix::from_element(1, 1, 0.3);
        }
        params.sigma2 = 0.05;
        let mut rng = stream_rng(8, Purpose::Synthetic, 0, 0);
        let (_, y) = sample_generative(&params, &model, &mut rng).unwrap();

        let sd = 0.3f64.sqrt();
        let log_g = |b: f64| {
            let state = HiddenState {
                class_index: 0,
                scale: 1.0,
                beta: DVector::from_element(1, b),
            };
            let phi = model.design_matrix(&[b]).unwrap();
            log_obs_density(&params, &state, &y, &phi).unwrap()
        };
        let nodes: Vec<f64> = (0..=4000).map(|k| -8.0 * sd + 16.0 * sd * k as f64 / 4000.0).collect();
        let prior: Vec<f64> = nodes.iter().map(|b| -0.5 * b * b / 0.3).collect();
        let lg: Vec<f64> = nodes.iter().map(|&b| log_g(b)).collect();
        let num: Vec<f64> = lg.iter().zip(&prior).map(|(g, p)| 2.0 * g + p).collect();
        let den: Vec<f64> = lg.iter().zip(&prior).map(|(g, p)| g + p).collect();
        let want = log_sum_exp(&num) - log_sum_exp(&den);

        let b = McBudget {
            burn_in: 500,
            samples: 40_000,
            initial_scale: 1.0,
            target_acceptance: 0.4,
        };
        let got = component_score(&params, &model, &y, 0, &b, 11, (0, 0)).unwrap();
        assert!((got - want).abs() < 0.05, "{got} vs {want}");
    }
}
