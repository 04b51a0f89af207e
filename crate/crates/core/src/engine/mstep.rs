use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{nonneg_quadratic_min, solve_ridge, spd_floor};
use crate::model::{ModelParams, SuffStats, SIGMA2_FLOOR};

/// Constraint on each `Γ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceStructure {
    /// `Γ_j = s4_j / s1_j`
    Full,
    /// `Γ_j = γ_j² Id` with `γ_j² = tr(s4_j) / (d_β s1_j)`.
    Isotropic,
    /// `Γ_j = diag(v·Id_k, γ_j² M)`: the first `fixed_dim` coordinates keep a
    /// fixed variance and the rest scale a fixed matrix `M`.
    FixedPlusScaled {
        fixed_dim: usize,
        fixed_variance: f64,
        scaled: DMatrix<f64>,
    },
}

impl CovarianceStructure {
    /// Rigid block with variance `rigid_variance` and a tridiagonal `M`
    /// (ones on the diagonal, `off` next to it) over the local field.
    pub fn image(rigid_dim: usize, local_dim: usize, rigid_variance: f64, off: f64) -> Self {
        let n = 2 * local_dim;
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if i.abs_diff(j) == 1 {
                off
            } else {
                0.0
            }
        });
        CovarianceStructure::FixedPlusScaled {
            fixed_dim: rigid_dim,
            fixed_variance: rigid_variance,
            scaled,
        }
    }

    /// `Γ` for a given scale `γ²`.
    pub fn assemble(&self, d: usize, gamma2: f64) -> DMatrix<f64> {
        match self {
            CovarianceStructure::Full => DMatrix::identity(d, d) * gamma2,
            CovarianceStructure::Isotropic => DMatrix::identity(d, d) * gamma2,
            CovarianceStructure::FixedPlusScaled {
                fixed_dim,
                fixed_variance,
                scaled,
            } => {
                let mut g = DMatrix::zeros(d, d);
                for i in 0..*fixed_dim {
                    g[(i, i)] = *fixed_variance;
                }
                g.view_mut((*fixed_dim, *fixed_dim), scaled.shape())
                    .copy_from(&(scaled * gamma2));
                g
            }
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if let CovarianceStructure::FixedPlusScaled {
            fixed_dim,
            fixed_variance,
            scaled,
        } = self
        {
            check_dim("structured covariance size", d, fixed_dim + scaled.nrows())?;
            check_dim("structured covariance shape", scaled.nrows(), scaled.ncols())?;
            if !(*fixed_variance > 0.0) {
                return Err(Error::invalid("fixed variance must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MStepOptions {
    pub covariance: CovarianceStructure,
    /// Relative ridge `ε` in `s3 + ε·tr(s3)/m·Id`.
    pub ridge: f64,
    /// A class is frozen when `s1_j < weight_floor / C`.
    pub weight_floor: f64,
    /// Eigenvalue floor applied to every updated `Γ_j`.
    pub gamma_floor: f64,
}

impl Default for MStepOptions {
    fn default() -> Self {
        Self {
            covariance: CovarianceStructure::Full,
            ridge: 1e-8,
            weight_floor: 1e-3,
            gamma_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome {
    pub params: ModelParams,
    pub frozen: Vec<usize>,
}

fn template_gain(s2: &DVector<f64>, s3: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
    2.0 * a.dot(s2) - (a.transpose() * s3 * a)[(0, 0)]
}

/// Closed-form maximizer of `t(θ) + Σ_j ⟨r_j(θ), s_j⟩`.
///
/// ω is proportional to `s1`, `α_j` solves the ridge-regularized normal
/// equations (nonnegative least squares when templates are constrained),
/// `Γ_j` follows `options.covariance`, and σ² is the pooled residual.
/// Frozen classes keep their previous `(α_j, Γ_j, ω_j)`.
pub fn m_step(
    stats: &SuffStats,
    current: &ModelParams,
    grid_len: usize,
    options: &MStepOptions,
) -> Result<MStepOutcome> {
    let c = current.num_classes();
    let m = current.num_basis();
    let d = current.beta_dim();
    check_dim("statistics classes", c, stats.num_classes())?;
    options.covariance.validate(d)?;
    let threshold = options.weight_floor / c as f64;
    let frozen: Vec<usize> = (0..c).filter(|&j| !(stats.classes[j].s1 >= threshold)).collect();
    if frozen.len() == c {
        return Err(Error::DegenerateFit);
    }
    let mut next = current.clone();

    let frozen_weight: f64 = frozen.iter().map(|&j| current.classes[j].weight).sum();
    let active_mass: f64 = (0..c)
        .filter(|j| !frozen.contains(j))
        .map(|j| stats.classes[j].s1)
        .sum();
    for j in 0..c {
        if frozen.contains(&j) {
            continue;
        }
        let s = &stats.classes[j];
        check_dim("s2 length", m, s.s2.len())?;
        check_dim("s4 size", d, s.s4.nrows())?;
        let cls = &mut next.classes[j];
        cls.weight = (1.0 - frozen_weight) * s.s1 / active_mass;

        let candidate = if current.nonnegative_templates {
            let shift = options.ridge * s.s3.trace() / m as f64;
            let mut q = s.s3.clone();
            for i in 0..m {
                q[(i, i)] += shift;
            }
            nonneg_quadratic_min(&q, &s.s2, &current.classes[j].alpha, 10_000)
        } else {
            solve_ridge(&s.s3, &s.s2, options.ridge)?
        };
        let old = &current.classes[j].alpha;
        if template_gain(&s.s2, &s.s3, &candidate) >= template_gain(&s.s2, &s.s3, old) {
            cls.alpha = candidate;
        }

        cls.gamma = match &options.covariance {
            CovarianceStructure::Full => spd_floor(&(&s.s4 / s.s1), options.gamma_floor),
            CovarianceStructure::Isotropic => {
                let g2 = (s.s4.trace() / (d as f64 * s.s1)).max(options.gamma_floor);
                DMatrix::identity(d, d) * g2
            }
            CovarianceStructure::FixedPlusScaled {
                fixed_dim, scaled, ..
            } => {
                let k = scaled.nrows();
                let block = s.s4.view((*fixed_dim, *fixed_dim), (k, k)).into_owned();
                let inv = scaled
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::invalid("structured covariance matrix is not SPD"))?
                    .inverse();
                let g2 = ((inv * block).trace() / (k as f64 * s.s1)).max(options.gamma_floor);
                options.covariance.assemble(d, g2)
            }
        };
    }
    let total = stats.total_weight();
    let rss: f64 = stats
        .classes
        .iter()
        .zip(&next.classes)
        .map(|(s, cls)| s.s5 - 2.0 * cls.alpha.dot(&s.s2) + (cls.alpha.transpose() * &s.s3 * &cls.alpha)[(0, 0)])
        .sum();
    next.sigma2 = (rss / (grid_len as f64 * total)).max(SIGMA2_FLOOR);
    if !next.sigma2.is_finite() {
        return Err(Error::DegenerateFit);
    }
    Ok(MStepOutcome {
        params: next,
        frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::random_params;
    use crate::model::{stats_objective, ClassStats};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noiseless_linear_stats(alpha: &DVector<f64>, phi: &DMatrix<f64>, d: usize) -> SuffStats {
        let y = phi * alpha;
        let mut cs = ClassStats::zeros(alpha.len(), d);
        cs.s1 = 1.0;
        cs.s2 = phi.transpose() * &y;
        cs.s3 = phi.transpose() * phi;
        cs.s4 = DMatrix::identity(d, d) * 0.3;
        cs.s5 = y.norm_squared();
        cs.s6 = 1.0;
        SuffStats { classes: vec![cs] }
    }

    #[test]
    fn recovers_generating_template() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_params(1, 4, 2, false, &mut rng);
        let phi = DMatrix::from_fn(10, 4, |_, _| rng.random_range(0.0..1.0));
        let truth = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
        let stats = noiseless_linear_stats(&truth, &phi, 2);
        p.classes[0].alpha = DVector::zeros(4);
        let out = m_step(&stats, &p, 10, &MStepOptions::default()).unwrap();
        assert!((&out.params.classes[0].alpha - &truth).norm() < 1e-6);
        assert!(out.params.sigma2 < 1e-8);
    }

    #[test]
    fn weights_sum_to_one_and_improve_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let p = random_params(3, 3, 2, true, &mut rng);
            let phi = DMatrix::from_fn(6, 3, |_, _| rng.random_range(0.0..1.0));
            let mut stats = SuffStats::for_params(&p);
            for _ in 0..30 {
                let st = crate::model::HiddenState {
                    class_index: rng.random_range(0..3),
                    scale: rng.random_range(0.5..1.5),
                    beta: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                };
                let y = crate::model::Observation::new(DVector::from_fn(6, |_, _| {
                    rng.random_range(-1.0..2.0)
                }));
                stats.accumulate(&p, &st, &y, &phi, 1.0 / 30.0).unwrap();
            }
            let out = m_step(&stats, &p, 6, &MStepOptions::default()).unwrap();
            let w: f64 = out.params.classes.iter().map(|c| c.weight).sum();
            assert!((w - 1.0).abs() < 1e-12);
            let before = stats_objective(&p, &stats, 6).unwrap();
            let after = stats_objective(&out.params, &stats, 6).unwrap();
            assert!(after >= before - 1e-9);
        }
    }

    #[test]
    fn empty_class_is_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_params(2, 2, 1, false, &mut rng);
        let mut stats = SuffStats::for_params(&p);
        stats.classes[0].s1 = 1.0;
        stats.classes[0].s3 = DMatrix::identity(2, 2);
        stats.classes[0].s4 = DMatrix::identity(1, 1) * 0.5;
        stats.classes[0].s5 = 3.0;
        let out = m_step(&stats, &p, 4, &MStepOptions::default()).unwrap();
        assert_eq!(out.frozen, vec![1]);
        assert_eq!(out.params.classes[1], p.classes[1]);
        assert!((out.params.classes[0].weight - (1.0 - p.classes[1].weight)).abs() < 1e-15);

        let zero = SuffStats::for_params(&p);
        assert!(matches!(
            m_step(&zero, &p, 4, &MStepOptions::default()),
            Err(Error::DegenerateFit)
        ));
    }

    #[test]
    fn nonnegative_templates_stay_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = random_params(1, 3, 1, false, &mut rng);
        p.nonnegative_templates = true;
        p.classes[0].alpha = DVector::from_element(3, 0.5);
        let phi = DMatrix::identity(3, 3);
        let stats = noiseless_linear_stats(&DVector::from_vec(vec![1.0, -2.0, 0.5]), &phi, 1);
        let out = m_step(&stats, &p, 3, &MStepOptions::default()).unwrap();
        let a = &out.params.classes[0].alpha;
        assert!(a.iter().all(|&v| v >= 0.0));
        assert!((a[0] - 1.0).abs() < 1e-6 && a[1] == 0.0 && (a[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn structured_covariance_keeps_fixed_block() {
        let s = CovarianceStructure::image(6, 2, 0.1, 0.2);
        let g = s.assemble(10, 0.5);
        assert_eq!(g[(0, 0)], 0.1);
        assert_eq!(g[(6, 6)], 0.5);
        assert_eq!(g[(6, 7)], 0.1);
        assert_eq!(g[(6, 8)], 0.0);
        assert_eq!(g[(5, 6)], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_params(1, 2, 10, false, &mut rng);
        p.classes[0].gamma = s.assemble(10, 1.0);
        let mut stats = SuffStats::for_params(&p);
        stats.classes[0].s1 = 1.0;
        stats.classes[0].s3 = DMatrix::identity(2, 2);
        stats.classes[0].s4 = s.assemble(10, 0.04);
        let opts = MStepOptions {
            covariance: s,
            ..Default::default()
        };
        let out = m_step(&stats, &p, 4, &opts).unwrap();
        let g = &out.params.classes[0].gamma;
        // the MLE of γ² is exact when s4 has the assumed structure
        assert!((g[(7, 7)] - 0.04).abs() < 1e-12);
        assert_eq!(g[(2, 2)], 0.1);
    }
}
