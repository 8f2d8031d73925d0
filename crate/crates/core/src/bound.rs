//! Hybrid Cramér-Rao bound for `η = [θ; δ; σ²]`.
//!
//! The expected Fisher information is averaged by Monte Carlo over the
//! random parameters (anchor positions and delays) and added to the prior
//! information of those parameters. Node positions without a prior and
//! `σ²` are deterministic and contribute no prior information.
//!
//! Parameter order inside `η` follows the state vector: all positions by
//! node id, then the delays, then `σ²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimate::PriorSpec;
use crate::model::{Layout, ObservationSet, StateVector};
use crate::numerics::EquilibratedCholesky;
use crate::scenario::Scenario;
use crate::simulate::sample_truth;

/// Default number of draws for the expected Fisher information.
pub const DEFAULT_MC_SAMPLES: usize = 1000;

/// `η = [θ; δ; σ²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullParam {
    pub state: StateVector,
    pub sigma2: f64,
}

impl FullParam {
    pub fn new(state: StateVector, sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::Config(format!("σ² must be positive, got {sigma2}")));
        }
        Ok(Self { state, sigma2 })
    }

    pub fn eta(&self) -> DVector<f64> {
        let v = self.state.as_vector();
        let mut eta = DVector::zeros(v.len() + 1);
        eta.rows_mut(0, v.len()).copy_from(v);
        eta[v.len()] = self.sigma2;
        eta
    }
}

/// Fisher information `J^D(η)` of one realization:
/// `GᵀQ⁻¹G / σ²` on the state block, `M / (2σ⁴)` for `σ²`, zero coupling.
pub fn fisher_info(param: &FullParam, structure: &ObservationSet) -> Result<DMatrix<f64>> {
    let t = structure.layout.len();
    let g = structure.design_matrix(&param.state)?;
    let qinv_g = structure.q_factor().solve_matrix(&g)?;
    let block = g.transpose() * qinv_g / param.sigma2;
    let mut j = DMatrix::zeros(t + 1, t + 1);
    j.view_mut((0, 0), (t, t)).copy_from(&((&block + block.transpose()) * 0.5));
    j[(t, t)] = structure.len() as f64 / (2.0 * param.sigma2 * param.sigma2);
    Ok(j)
}

/// Prior information `J^P_η`: the prior precision padded with a zero row
/// and column for `σ²`.
pub fn prior_info(prior: &PriorSpec) -> DMatrix<f64> {
    let t = prior.len();
    let mut j = DMatrix::zeros(t + 1, t + 1);
    j.view_mut((0, 0), (t, t)).copy_from(&prior.precision);
    j
}

#[derive(Debug, Clone)]
pub struct BoundResult {
    pub layout: Layout,
    pub j_eta: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    /// Per-node `d × d` covariance lower bounds, indexed by `id - 1`.
    pub position_blocks: Vec<DMatrix<f64>>,
    pub delay_block: DMatrix<f64>,
    pub sigma2_var_bound: f64,
    pub mc_samples: usize,
}

impl BoundResult {
    fn from_information(layout: Layout, j_eta: DMatrix<f64>, mc_samples: usize) -> Result<Self> {
        let factor =
            EquilibratedCholesky::factor(&j_eta).map_err(|e| Error::SingularInformation(Box::new(e)))?;
        let inverse = factor.inverse();
        let d = layout.dim;
        let position_blocks = (1..=layout.nodes)
            .map(|id| {
                let o = layout.position_offset(id);
                inverse.view((o, o), (d, d)).into_owned()
            })
            .collect();
        let th = layout.theta_len();
        let delay_block = inverse.view((th, th), (layout.nodes - 1, layout.nodes - 1)).into_owned();
        let t = layout.len();
        Ok(Self {
            layout,
            sigma2_var_bound: inverse[(t, t)],
            j_eta,
            inverse,
            position_blocks,
            delay_block,
            mc_samples,
        })
    }

    pub fn position_block(&self, id: usize) -> &DMatrix<f64> {
        &self.position_blocks[id - 1]
    }

    /// `(1/N_ξ) √(Σ tr C_i)` over the given nodes' position bounds.
    pub fn position_rmse(&self, ids: &[usize]) -> f64 {
        let trace: f64 = ids.iter().map(|&id| self.position_block(id).trace()).sum();
        trace.max(0.0).sqrt() / ids.len() as f64
    }

    /// `(1/(N-1)) √tr C_δ` (s).
    pub fn delay_rmse(&self) -> f64 {
        rmse_metric(&self.delay_block, self.layout.nodes - 1)
    }
}

/// Hybrid bound from an explicit set of parameter draws: the Fisher
/// information is averaged over `draws` and `prior` is added.
pub fn hybrid_bound_from_draws<'a, I>(
    draws: I,
    sigma2: f64,
    structure: &ObservationSet,
    prior: &PriorSpec,
) -> Result<BoundResult>
where
    I: IntoIterator<Item = &'a StateVector>,
{
    let layout = structure.layout;
    let t = layout.len();
    let mut acc = DMatrix::zeros(t + 1, t + 1);
    let mut count = 0usize;
    for state in draws {
        let p = FullParam::new(state.clone(), sigma2)?;
        acc += fisher_info(&p, structure)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("hybrid bound needs at least one draw".into()));
    }
    acc /= count as f64;
    let j_eta = acc + prior_info(prior);
    BoundResult::from_information(layout, j_eta, count)
}

/// Hybrid Cramér-Rao bound for a scenario. Random parameters are drawn
/// from their true priors, deterministic ones are held at the scenario's
/// truth; `σ` is the scenario's noise std.
pub fn hcrb<R: Rng + ?Sized>(
    scenario: &Scenario,
    structure: &ObservationSet,
    mc_samples: usize,
    rng: &mut R,
) -> Result<BoundResult> {
    if mc_samples == 0 {
        return Err(Error::Config("mc_samples must be at least 1".into()));
    }
    let sigma2 = scenario.noise_std * scenario.noise_std;
    let draws = (0..mc_samples)
        .map(|_| sample_truth(scenario, rng).map(|t| t.state))
        .collect::<Result<Vec<_>>>()?;
    hybrid_bound_from_draws(draws.iter(), sigma2, structure, &PriorSpec::true_prior(scenario))
}

/// `(1/N_ξ) √tr C`.
pub fn rmse_metric(c: &DMatrix<f64>, n_xi: usize) -> f64 {
    c.trace().max(0.0).sqrt() / n_xi as f64
}

/// Confidence ellipse of a zero-mean 2-D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the major axis from the first coordinate axis (rad).
    pub orientation: f64,
    /// Chi-square (2 dof) quantile used to scale the axes.
    pub scale: f64,
}

/// Chi-square quantile with 2 degrees of freedom: `-2 ln(1 - p)`.
pub fn chi2_2dof_quantile(confidence: f64) -> f64 {
    -2.0 * (1.0 - confidence).ln()
}

pub fn error_ellipse(c: &DMatrix<f64>, confidence: f64) -> Ellipse {
    assert_eq!((c.nrows(), c.ncols()), (2, 2), "ellipses need a 2x2 covariance");
    let (a, b, d) = (c[(0, 0)], 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)]);
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (mean + radius, (mean - radius).max(0.0));
    let k = chi2_2dof_quantile(confidence);
    Ellipse {
        semi_major: (k * l1).sqrt(),
        semi_minor: (k * l2).sqrt(),
        orientation: 0.5 * (2.0 * b).atan2(a - d),
        scale: k,
    }
}
