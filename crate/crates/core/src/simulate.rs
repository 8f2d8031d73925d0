//! Ground-truth draws and synthetic observation sets.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{pair_ranges, predict, ObservationSet, PairIndex, StateVector, MIN_RANGE};
use crate::numerics::sample_correlated_gaussian;
use crate::scenario::{Role, Scenario};

/// Independent purposes that draw from a campaign's master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Trial = 1,
    BoundSample = 2,
    Placement = 3,
}

/// Deterministic substream for `(master seed, purpose, index)`.
///
/// The purpose is folded into the ChaCha key, the index selects the
/// stream, so substreams never overlap and do not depend on the order in
/// which trials are evaluated.
pub fn substream(master_seed: u64, purpose: StreamPurpose, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthDraw {
    pub state: StateVector,
    /// True timing noise std (s).
    pub sigma: f64,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws anchor positions and delays from their (true) priors; auxiliary
/// and receiver positions are copied from the scenario.
pub fn sample_truth<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<TruthDraw> {
    let layout = scenario.layout();
    let mut state = StateVector::zeros(layout);
    for node in &scenario.nodes {
        let p = node.position.as_ref().ok_or(Error::MissingTruth(node.id))?;
        if node.role == Role::Anchor {
            let std = node
                .true_std
                .or(node.prior_std)
                .ok_or_else(|| Error::Config(format!("node {}: anchor without prior", node.id)))?;
            let drawn: Vec<f64> = p.iter().map(|&m| m + std * normal(rng)).collect();
            state.set_position(node.id, &drawn);
        } else {
            state.set_position(node.id, p);
        }
    }
    let dstd = scenario.delay.sampling_std();
    for id in 1..layout.nodes {
        state.set_delay(id, scenario.delay.nominal + dstd * normal(rng));
    }
    Ok(TruthDraw {
        state,
        sigma: scenario.noise_std,
    })
}

/// Anti-collision condition: every delay strictly exceeds the largest
/// transceiver-to-transceiver range divided by `c`.
pub fn validate_no_collision(truth: &TruthDraw, scenario: &Scenario) -> bool {
    let layout = truth.state.layout();
    let ranges = pair_ranges(&truth.state);
    let index = PairIndex::new(layout.nodes);
    let max_range = index
        .pairs()
        .zip(ranges.iter())
        .filter(|((_, b), _)| *b != layout.receiver())
        .map(|(_, &r)| r)
        .fold(0.0, f64::max);
    let limit = max_range / scenario.propagation_speed;
    truth.state.delays().iter().all(|&d| d > limit)
}

/// Error form of [`validate_no_collision`], for strict mode.
pub fn check_no_collision(truth: &TruthDraw, scenario: &Scenario) -> Result<()> {
    if validate_no_collision(truth, scenario) {
        return Ok(());
    }
    let ranges = pair_ranges(&truth.state);
    let layout = truth.state.layout();
    let max_range = PairIndex::new(layout.nodes)
        .pairs()
        .zip(ranges.iter())
        .filter(|((_, b), _)| *b != layout.receiver())
        .map(|(_, &r)| r)
        .fold(0.0, f64::max);
    Err(Error::Collision {
        min_delay: truth.state.delays().iter().copied().fold(f64::INFINITY, f64::min),
        limit: max_range / scenario.propagation_speed,
    })
}

/// Noiseless observation structure for a scenario (intervals at zero).
pub fn observation_structure(scenario: &Scenario) -> Result<ObservationSet> {
    let seq = scenario.transmission_sequence();
    let m = seq.len() - 1;
    ObservationSet::new(
        scenario.layout(),
        scenario.propagation_speed,
        seq,
        DVector::zeros(m),
    )
}

/// `y = c⁻¹ H g(ϑ) + w` with `w ~ N(0, σ² Q)`.
pub fn synthesize<R: Rng + ?Sized>(
    truth: &TruthDraw,
    scenario: &Scenario,
    rng: &mut R,
) -> Result<ObservationSet> {
    let structure = observation_structure(scenario)?;
    synthesize_with(truth, &structure, rng)
}

/// [`synthesize`] reusing a prebuilt observation structure.
pub fn synthesize_with<R: Rng + ?Sized>(
    truth: &TruthDraw,
    structure: &ObservationSet,
    rng: &mut R,
) -> Result<ObservationSet> {
    let ranges = pair_ranges(&truth.state);
    let index = PairIndex::new(structure.layout.nodes);
    for ((a, b), (&r, &used)) in index
        .pairs()
        .zip(ranges.iter().zip(structure.used_pairs()))
    {
        if used && r < MIN_RANGE {
            return Err(Error::DegenerateGeometry { a, b, range: r });
        }
    }
    let clean = predict(&truth.state, &structure.h, structure.c)?;
    let noise = sample_correlated_gaussian(structure.q_factor(), truth.sigma, rng);
    structure.with_intervals(clean + noise)
}
