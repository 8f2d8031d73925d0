//! Iterative MAP estimator of node positions and turn-around delays.
//!
//! The noise variance is maximized out analytically, leaving the
//! concentrated cost
//!
//! ```text
//! V(ϑ) = ½ ln ‖y - c⁻¹ H g(ϑ)‖²_{Q⁻¹} + (β/2) ‖μ - ϑ‖²_{P⁻¹},   β = 1/(M+2)
//! ```
//!
//! Each outer iteration linearizes `g` around the current estimate and
//! solves for the increment with the fixed-point map
//!
//! ```text
//! ϑ̃ ← (α GᵀQ⁻¹G + βP⁻¹)⁻¹ (α GᵀQ⁻¹ỹ + βP⁻¹μ̃),   α = 1/‖ỹ - Gϑ̃‖²_{Q⁻¹}
//! ```
//!
//! started from the zero increment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, Layout, ObservationSet, StateVector};
use crate::numerics::{least_squares, weighted_sq_norm, CholeskyFactor, PIVOT_TOLERANCE};
use crate::scenario::{Role, Scenario};

/// Floor on `‖·‖²_{Q⁻¹}` (s²) inside the log-cost and `α`.
pub const RESIDUAL_FLOOR: f64 = 1e-30;

/// Relative cost increase tolerated between outer iterations.
pub const COST_INCREASE_TOLERANCE: f64 = 1e-12;

/// Consecutive cost increases after which the estimate is declared divergent.
pub const MAX_COST_INCREASES: usize = 3;

/// Halvings tried on an outer step that raises the cost.
pub const MAX_STEP_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Convergence threshold on the 2-norm of successive iterates, shared
    /// by the inner and outer loops.
    pub epsilon: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Scale delay coordinates by `c` before taking step norms.
    pub unit_balanced: bool,
    /// Add a small relative ridge to the normal matrix.
    pub ridge: bool,
    pub ridge_scale: f64,
    /// Halve an outer step that raises the cost until it no longer does.
    /// Steps that already decrease the cost are taken unchanged.
    pub step_halving: bool,
    /// The inner loop additionally requires the gradient of the linearized
    /// cost to fall below `stationarity_tol × (1 + ‖gradient at 0‖)`.
    /// Zero disables the check and stops on the step norm alone.
    pub stationarity_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_outer: 50,
            max_inner: 100,
            unit_balanced: false,
            ridge: false,
            ridge_scale: 1e-10,
            step_halving: true,
            stationarity_tol: 1e-6,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("estimator.epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("estimator iteration caps must be at least 1".into()));
        }
        if !(self.ridge_scale.is_finite() && self.ridge_scale >= 0.0) {
            return Err(Error::Config("estimator.ridge_scale must be nonnegative".into()));
        }
        if !(self.stationarity_tol.is_finite() && self.stationarity_tol >= 0.0) {
            return Err(Error::Config("estimator.stationarity_tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Gaussian prior in information form. Zero blocks of `precision` encode
/// noninformative priors.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mu: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl PriorSpec {
    pub fn new(mu: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != mu.len() || precision.ncols() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: precision.nrows(),
            });
        }
        Ok(Self { mu, precision })
    }

    /// Prior assumed by the estimator (`prior_std` for anchors).
    pub fn from_scenario(scenario: &Scenario) -> Self {
        Self::build(scenario, |n| n.prior_std.expect("validated anchor"), scenario.delay.std)
    }

    /// Prior the truth is drawn from (`true_std`, falling back to
    /// `prior_std`). Used by the bound.
    pub fn true_prior(scenario: &Scenario) -> Self {
        Self::build(
            scenario,
            |n| n.true_std.or(n.prior_std).expect("validated anchor"),
            scenario.delay.sampling_std(),
        )
    }

    fn build(
        scenario: &Scenario,
        anchor_std: impl Fn(&crate::scenario::NodeSpec) -> f64,
        delay_std: f64,
    ) -> Self {
        let layout = scenario.layout();
        let mut mu = DVector::zeros(layout.len());
        let mut precision = DMatrix::zeros(layout.len(), layout.len());
        for node in &scenario.nodes {
            let o = layout.position_offset(node.id);
            if node.role == Role::Anchor {
                let p = node.position.as_ref().expect("validated anchor");
                let s = anchor_std(node);
                for k in 0..layout.dim {
                    mu[o + k] = p[k];
                    precision[(o + k, o + k)] = 1.0 / (s * s);
                }
            }
        }
        for id in 1..layout.nodes {
            let i = layout.delay_index(id);
            mu[i] = scenario.delay.nominal;
            precision[(i, i)] = 1.0 / (delay_std * delay_std);
        }
        Self { mu, precision }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Same means, precision scaled by `factor` on every anchor block
    /// (anchor std multiplied by `1/√factor`).
    pub fn with_anchor_precision_scaled(&self, scenario: &Scenario, factor: f64) -> Self {
        let layout = scenario.layout();
        let mut out = self.clone();
        for id in scenario.anchors() {
            let o = layout.position_offset(id);
            for k in 0..layout.dim {
                out.precision[(o + k, o + k)] *= factor;
            }
        }
        out
    }
}

/// Initial estimate: anchors at their prior means, the receiver at the
/// anchor centroid, auxiliary nodes at `init` when given and otherwise at
/// the centroid plus `auxiliary_offset` (rotated about the centroid for
/// each further auxiliary node so that no two coincide), delays at μ_δ.
pub fn default_init(scenario: &Scenario, prior: &PriorSpec) -> StateVector {
    let layout = scenario.layout();
    let centroid = scenario.anchor_centroid();
    let aux = scenario.ids_with_role(Role::Auxiliary);
    let mut init = StateVector::zeros(layout);
    for node in &scenario.nodes {
        let o = layout.position_offset(node.id);
        let p: Vec<f64> = match node.role {
            Role::Anchor => prior.mu.rows(o, layout.dim).iter().copied().collect(),
            Role::Receiver => centroid.clone(),
            Role::Auxiliary => match &node.init {
                Some(u) => u.clone(),
                None => {
                    let k = aux.iter().position(|&a| a == node.id).expect("auxiliary id");
                    let turn = std::f64::consts::TAU * k as f64 / aux.len() as f64;
                    let (s, c) = turn.sin_cos();
                    let off = &scenario.auxiliary_offset;
                    let mut u = centroid.clone();
                    u[0] += c * off[0] - s * off[1];
                    u[1] += s * off[0] + c * off[1];
                    for j in 2..layout.dim {
                        u[j] += off[j];
                    }
                    u
                }
            },
        };
        init.set_position(node.id, &p);
    }
    for id in 1..layout.nodes {
        init.set_delay(id, prior.mu[layout.delay_index(id)]);
    }
    init
}

/// A measurement model `y = h(ϑ) + w`, `w ~ N(0, σ²Q)`, as seen by the
/// estimator.
pub trait MeasurementModel {
    fn observations(&self) -> &DVector<f64>;
    fn noise_factor(&self) -> &CholeskyFactor;
    /// Noiseless observations `h(ϑ)`.
    fn predict(&self, state: &DVector<f64>) -> Result<DVector<f64>>;
    /// Jacobian of `h` at `state` (`G = c⁻¹ H Γ(ϑ)` for the network model).
    fn design_matrix(&self, state: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn len(&self) -> usize {
        self.observations().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn residual(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.observations() - self.predict(state)?)
    }
}

impl MeasurementModel for ObservationSet {
    fn observations(&self) -> &DVector<f64> {
        &self.y
    }

    fn noise_factor(&self) -> &CholeskyFactor {
        self.q_factor()
    }

    fn predict(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        let s = StateVector::new(self.layout, state.clone())?;
        predict(&s, &self.h, self.c)
    }

    fn design_matrix(&self, state: &DVector<f64>) -> Result<DMatrix<f64>> {
        let s = StateVector::new(self.layout, state.clone())?;
        ObservationSet::design_matrix(self, &s)
    }
}

/// `β = 1/(M+2)`.
pub fn beta(m: usize) -> f64 {
    1.0 / (m as f64 + 2.0)
}

/// `σ̂² = ‖y - c⁻¹Hg(ϑ)‖²_{Q⁻¹} / (M+2)`.
pub fn sigma2_hat<M: MeasurementModel + ?Sized>(model: &M, state: &DVector<f64>) -> Result<f64> {
    let r = model.residual(state)?;
    Ok(weighted_sq_norm(&r, model.noise_factor())? / (model.len() as f64 + 2.0))
}

/// Concentrated MAP cost `V(ϑ)`; lower is better.
pub fn cost_v<M: MeasurementModel + ?Sized>(
    model: &M,
    state: &DVector<f64>,
    prior: &PriorSpec,
    beta: f64,
) -> Result<f64> {
    let r = model.residual(state)?;
    let data = weighted_sq_norm(&r, model.noise_factor())?.max(RESIDUAL_FLOOR);
    let dev = &prior.mu - state;
    let prior_term = dev.dot(&(&prior.precision * &dev));
    Ok(0.5 * data.ln() + 0.5 * beta * prior_term)
}

/// Quantities of one linearization: `ỹ = y - h(ϑ̂)`, `G`, `μ̃ = μ - ϑ̂`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub y_tilde: DVector<f64>,
    pub g: DMatrix<f64>,
    pub mu_tilde: DVector<f64>,
}

impl Linearization {
    pub fn at<M: MeasurementModel + ?Sized>(
        model: &M,
        prior: &PriorSpec,
        state: &DVector<f64>,
    ) -> Result<Self> {
        Ok(Self {
            y_tilde: model.residual(state)?,
            g: model.design_matrix(state)?,
            mu_tilde: &prior.mu - state,
        })
    }

    /// Gradient of the linearized cost `V_ℓ` at `increment`.
    pub fn gradient(
        &self,
        increment: &DVector<f64>,
        precision: &DMatrix<f64>,
        beta: f64,
        q: &CholeskyFactor,
    ) -> Result<DVector<f64>> {
        let r = &self.y_tilde - &self.g * increment;
        let alpha = 1.0 / weighted_sq_norm(&r, q)?.max(RESIDUAL_FLOOR);
        let qr = q.solve(&r)?;
        Ok(-(self.g.transpose() * qr) * alpha + precision * (increment - &self.mu_tilde) * beta)
    }
}

/// Result of the inner fixed-point loop.
#[derive(Debug, Clone)]
pub struct Increment {
    pub step: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn step_norm(v: &DVector<f64>, weights: Option<&DVector<f64>>) -> f64 {
    match weights {
        Some(w) => v.component_mul(w).norm(),
        None => v.norm(),
    }
}

/// Rows `R` with `RᵀR = βP⁻¹` and the matching right-hand side `R μ̃`.
/// Zero directions of the precision produce no rows.
fn prior_rows(precision: &DMatrix<f64>, beta: f64, mu_tilde: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let t = precision.nrows();
    let diagonal = (0..t).all(|i| (0..t).all(|j| i == j || precision[(i, j)] == 0.0));
    let rows: Vec<DVector<f64>> = if diagonal {
        (0..t)
            .filter(|&i| precision[(i, i)] > 0.0)
            .map(|i| {
                let mut r = DVector::zeros(t);
                r[i] = (beta * precision[(i, i)]).sqrt();
                r
            })
            .collect()
    } else {
        let eig = precision.clone().symmetric_eigen();
        let top = eig.eigenvalues.amax();
        (0..t)
            .filter(|&k| eig.eigenvalues[k] > PIVOT_TOLERANCE * top)
            .map(|k| eig.eigenvectors.column(k) * (beta * eig.eigenvalues[k]).sqrt())
            .collect()
    };
    let mut a = DMatrix::zeros(rows.len(), t);
    for (k, r) in rows.iter().enumerate() {
        a.row_mut(k).copy_from(&r.transpose());
    }
    let b = &a * mu_tilde;
    (a, b)
}

/// Inner loop: iterates the fixed-point map from the zero increment until
/// successive iterates differ by less than `config.epsilon` and, unless
/// `config.stationarity_tol` is zero, the linearized cost is stationary.
///
/// Each iterate minimizes `α‖ỹ - Gϑ̃‖²_{Q⁻¹} + β‖μ̃ - ϑ̃‖²_{P⁻¹}`, whose
/// normal equations are the fixed-point map. It is solved as a stacked,
/// whitened least-squares problem rather than through the normal matrix:
/// near a zero residual `α` reaches `1/RESIDUAL_FLOOR` and the normal
/// matrix becomes too stiff to factor reliably.
pub fn fixed_point_increment(
    lin: &Linearization,
    precision: &DMatrix<f64>,
    beta: f64,
    q: &CholeskyFactor,
    config: &EstimatorConfig,
    weights: Option<&DVector<f64>>,
) -> Result<Increment> {
    let (m, t) = lin.g.shape();
    if precision.shape() != (t, t) || lin.mu_tilde.len() != t {
        return Err(Error::DimensionMismatch {
            expected: t,
            got: precision.nrows(),
        });
    }
    let singular = |e| Error::SingularNormalMatrix(Box::new(e));
    // whitened data block L⁻¹G, L⁻¹ỹ with L Lᵀ = Q
    let l = q.lower();
    let white_g = l
        .solve_lower_triangular(&lin.g)
        .ok_or_else(|| singular(Error::NotPositiveDefinite { index: 0, pivot: 0.0 }))?;
    let white_y = l
        .solve_lower_triangular(&lin.y_tilde)
        .ok_or_else(|| singular(Error::NotPositiveDefinite { index: 0, pivot: 0.0 }))?;
    let (p_rows, p_rhs) = prior_rows(precision, beta, &lin.mu_tilde);
    let p = p_rows.nrows();
    let extra = if config.ridge { t } else { 0 };
    let mut a = DMatrix::zeros(m + p + extra, t);
    let mut b = DVector::zeros(m + p + extra);
    a.view_mut((m, 0), (p, t)).copy_from(&p_rows);
    b.rows_mut(m, p).copy_from(&p_rhs);
    let data_sq: Vec<f64> = white_g.column_iter().map(|c| c.norm_squared()).collect();
    let prior_sq: Vec<f64> = p_rows.column_iter().map(|c| c.norm_squared()).collect();

    let mut x = DVector::zeros(t);
    // Near convergence the whole increment is below ε, so the step test
    // alone would stop after one pass with α still unsettled.
    let grad_limit = if config.stationarity_tol > 0.0 {
        let g0 = lin.gradient(&x, precision, beta, q)?.norm();
        Some(config.stationarity_tol * (1.0 + g0))
    } else {
        None
    };
    for k in 1..=config.max_inner {
        let r = &lin.y_tilde - &lin.g * &x;
        let alpha = 1.0 / weighted_sq_norm(&r, q)?.max(RESIDUAL_FLOOR);
        let root = alpha.sqrt();
        a.view_mut((0, 0), (m, t)).copy_from(&(&white_g * root));
        b.rows_mut(0, m).copy_from(&(&white_y * root));
        if config.ridge {
            // scale × diag of the normal matrix; mean diagonal for empty columns
            let diag: Vec<f64> = (0..t).map(|i| alpha * data_sq[i] + prior_sq[i]).collect();
            let mean = diag.iter().sum::<f64>() / t as f64;
            for (i, &d) in diag.iter().enumerate() {
                a[(m + p + i, i)] = (config.ridge_scale * if d > 0.0 { d } else { mean }).sqrt();
            }
        }
        let next = least_squares(&a, &b).map_err(singular)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate(k));
        }
        let delta = step_norm(&(&next - &x), weights);
        let stagnant = next == x;
        x = next;
        let stationary = || -> Result<bool> {
            Ok(match grad_limit {
                Some(limit) => stagnant || lin.gradient(&x, precision, beta, q)?.norm() <= limit,
                None => true,
            })
        };
        if delta < config.epsilon && stationary()? {
            return Ok(Increment {
                step: x,
                iterations: k,
                converged: true,
            });
        }
    }
    Ok(Increment {
        step: x,
        iterations: config.max_inner,
        converged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// The cost rose on several consecutive outer iterations.
    Diverging,
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    /// Final estimate `ϑ̂`.
    pub estimate: DVector<f64>,
    pub sigma2_hat: f64,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    pub converged: bool,
    pub termination: Termination,
    pub final_cost: f64,
    /// `ϑ̂_0, ϑ̂_1, …` including the initial point and the final estimate.
    pub iterates: Vec<DVector<f64>>,
}

impl EstimateResult {
    pub fn state(&self, layout: Layout) -> Result<StateVector> {
        StateVector::new(layout, self.estimate.clone())
    }
}

/// Outer relinearization loop. Stops when `‖ϑ̂_ℓ - ϑ̂_{ℓ-1}‖₂ < ε` or the
/// iteration cap is reached (returned with `converged = false`).
///
/// With `step_halving`, a full step that raises `V` is halved until it no
/// longer does; this breaks the two-cycles the undamped update can fall
/// into on weakly determined geometries.
pub fn map_estimate<M: MeasurementModel + ?Sized>(
    model: &M,
    prior: &PriorSpec,
    init: &DVector<f64>,
    config: &EstimatorConfig,
    weights: Option<&DVector<f64>>,
) -> Result<EstimateResult> {
    if init.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.len(),
            got: init.len(),
        });
    }
    let b = beta(model.len());
    let q = model.noise_factor();
    let mut x = init.clone();
    let mut cost = cost_v(model, &x, prior, b)?;
    let mut iterates = vec![x.clone()];
    let mut inner_total = 0;
    let mut increases = 0;
    let mut termination = Termination::MaxIterations;
    let mut outer = 0;

    while outer < config.max_outer {
        outer += 1;
        let lin = Linearization::at(model, prior, &x)?;
        let inc = fixed_point_increment(&lin, &prior.precision, b, q, config, weights)?;
        inner_total += inc.iterations;
        let mut delta = inc.step;
        let mut next = &x + &delta;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate(outer));
        }
        let limit = cost + COST_INCREASE_TOLERANCE * cost.abs();
        let mut new_cost = cost_v(model, &next, prior, b)?;
        if new_cost > limit && config.step_halving {
            let mut trial = delta.clone();
            for _ in 0..MAX_STEP_HALVINGS {
                trial *= 0.5;
                let candidate = &x + &trial;
                let c = cost_v(model, &candidate, prior, b)?;
                if c <= limit {
                    delta = trial;
                    next = candidate;
                    new_cost = c;
                    break;
                }
            }
        }
        if new_cost > limit {
            increases += 1;
        } else {
            increases = 0;
        }
        let step = step_norm(&delta, weights);
        x = next;
        cost = new_cost;
        iterates.push(x.clone());
        if step < config.epsilon {
            termination = Termination::Converged;
            break;
        }
        if increases >= MAX_COST_INCREASES {
            termination = Termination::Diverging;
            break;
        }
    }

    Ok(EstimateResult {
        sigma2_hat: sigma2_hat(model, &x)?,
        estimate: x,
        outer_iters: outer,
        inner_iters_total: inner_total,
        converged: termination == Termination::Converged,
        termination,
        final_cost: cost,
        iterates,
    })
}

/// Step-norm weights for the unit-balanced mode: delays scaled by `c`.
pub fn unit_balanced_weights(layout: Layout, c: f64) -> DVector<f64> {
    DVector::from_fn(layout.len(), |i, _| if i < layout.theta_len() { 1.0 } else { c })
}

/// [`map_estimate`] on a network observation set, honoring
/// `config.unit_balanced`.
pub fn estimate_network(
    obs: &ObservationSet,
    prior: &PriorSpec,
    init: &StateVector,
    config: &EstimatorConfig,
) -> Result<EstimateResult> {
    let weights = config
        .unit_balanced
        .then(|| unit_balanced_weights(obs.layout, obs.c));
    map_estimate(obs, prior, init.as_vector(), config, weights.as_ref())
}
