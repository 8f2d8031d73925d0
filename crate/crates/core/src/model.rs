//! Network geometry and the deterministic part of the observation model.
//!
//! Node ids are 1-based: transceivers are `1..=N-1`, the passive receiver is
//! `N`. The stacked state is `[x_1 .. x_N, δ_1 .. δ_{N-1}]`, positions first.
//! The pairwise range vector is ordered lexicographically over unordered
//! pairs: `(1,2), (1,3), .., (1,N), (2,3), .., (N-1,N)`.
//!
//! An observation for the consecutive transmitters `(i, j)` of the sequence
//! is the interval
//!
//! ```text
//! y = ρ_ij / c + δ_j + ρ_jN / c - ρ_iN / c + w
//! ```
//!
//! and the mapping matrix `H` carries `c` in the delay columns so that
//! `c⁻¹ H g(ϑ)` reproduces the unscaled `δ_j` term.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_spd, CholeskyFactor};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Ranges below this (m) make the range gradient undefined.
pub const MIN_RANGE: f64 = 1e-9;

/// Dimensions of the stacked state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub dim: usize,
    pub nodes: usize,
}

impl Layout {
    pub fn new(dim: usize, nodes: usize) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
        }
        if nodes < 3 {
            return Err(Error::Config(format!("need at least 3 nodes, got {nodes}")));
        }
        Ok(Self { dim, nodes })
    }

    /// `T = dN + N - 1`.
    pub fn len(&self) -> usize {
        self.dim * self.nodes + self.nodes - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn receiver(&self) -> usize {
        self.nodes
    }

    pub fn num_pairs(&self) -> usize {
        self.nodes * (self.nodes - 1) / 2
    }

    /// Length of `g(ϑ)`: all pairwise ranges followed by the delays.
    pub fn g_len(&self) -> usize {
        self.num_pairs() + self.nodes - 1
    }

    /// First state index of node `id`'s position.
    pub fn position_offset(&self, id: usize) -> usize {
        debug_assert!((1..=self.nodes).contains(&id));
        (id - 1) * self.dim
    }

    /// State index of transceiver `id`'s delay.
    pub fn delay_index(&self, id: usize) -> usize {
        debug_assert!((1..self.nodes).contains(&id));
        self.dim * self.nodes + id - 1
    }

    pub fn theta_len(&self) -> usize {
        self.dim * self.nodes
    }
}

/// Bijection between unordered node pairs and range-vector slots.
#[derive(Debug, Clone, Copy)]
pub struct PairIndex {
    nodes: usize,
}

impl PairIndex {
    pub fn new(nodes: usize) -> Self {
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes * (self.nodes - 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 0-based slot of the pair `{a, b}` (1-based ids, `a != b`).
    pub fn slot(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        debug_assert!(a >= 1 && a < b && b <= self.nodes);
        // pairs starting with 1..a-1 come first
        let before = (a - 1) * self.nodes - (a - 1) * a / 2;
        before + (b - a - 1)
    }

    /// Pairs in slot order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.nodes;
        (1..n).flat_map(move |a| ((a + 1)..=n).map(move |b| (a, b)))
    }
}

/// The stacked parameter `[positions; delays]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    layout: Layout,
    values: DVector<f64>,
}

impl StateVector {
    pub fn new(layout: Layout, values: DVector<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("state vector has non-finite entries".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: DVector::zeros(layout.len()),
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.values
    }

    pub fn position(&self, id: usize) -> &[f64] {
        let o = self.layout.position_offset(id);
        &self.values.as_slice()[o..o + self.layout.dim]
    }

    pub fn set_position(&mut self, id: usize, p: &[f64]) {
        let o = self.layout.position_offset(id);
        self.values.as_mut_slice()[o..o + self.layout.dim].copy_from_slice(p);
    }

    pub fn delay(&self, id: usize) -> f64 {
        self.values[self.layout.delay_index(id)]
    }

    pub fn set_delay(&mut self, id: usize, v: f64) {
        let i = self.layout.delay_index(id);
        self.values[i] = v;
    }

    pub fn delays(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.theta_len()..]
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// All pairwise ranges `ρ_ab = ‖x_a - x_b‖` in slot order.
pub fn pair_ranges(state: &StateVector) -> DVector<f64> {
    let layout = state.layout();
    let index = PairIndex::new(layout.nodes);
    DVector::from_iterator(
        index.len(),
        index
            .pairs()
            .map(|(a, b)| distance(state.position(a), state.position(b))),
    )
}

/// `g(ϑ) = [ρ(θ); δ]`.
pub fn g(state: &StateVector) -> DVector<f64> {
    let layout = state.layout();
    let ranges = pair_ranges(state);
    let mut out = DVector::zeros(layout.g_len());
    out.rows_mut(0, ranges.len()).copy_from(&ranges);
    out.rows_mut(ranges.len(), layout.nodes - 1)
        .copy_from_slice(state.delays());
    out
}

/// Checks that a sequence only names transceivers and never repeats an id
/// back to back.
pub fn check_sequence(sequence: &[usize], nodes: usize) -> Result<()> {
    if sequence.len() < 2 {
        return Err(Error::InvalidSequence(format!(
            "need at least 2 transmissions, got {}",
            sequence.len()
        )));
    }
    for (k, &id) in sequence.iter().enumerate() {
        if id == 0 || id >= nodes {
            return Err(Error::InvalidSequence(format!(
                "entry {k} is node {id}; transmitters must be in 1..={}",
                nodes - 1
            )));
        }
    }
    if let Some(k) = sequence.windows(2).position(|w| w[0] == w[1]) {
        return Err(Error::InvalidSequence(format!(
            "node {} repeats at entries {k} and {}",
            sequence[k],
            k + 1
        )));
    }
    Ok(())
}

/// Mapping matrix `H` (M × (N(N-1)/2 + N-1)) for a transmission sequence.
pub fn build_h(sequence: &[usize], nodes: usize, c: f64) -> Result<DMatrix<f64>> {
    check_sequence(sequence, nodes)?;
    let index = PairIndex::new(nodes);
    let m = sequence.len() - 1;
    let mut h = DMatrix::zeros(m, index.len() + nodes - 1);
    for (row, w) in sequence.windows(2).enumerate() {
        let (i, j) = (w[0], w[1]);
        h[(row, index.slot(i, j))] += 1.0;
        h[(row, index.slot(j, nodes))] += 1.0;
        h[(row, index.slot(i, nodes))] -= 1.0;
        h[(row, index.len() + j - 1)] = c;
    }
    Ok(h)
}

/// Noise correlation matrix: unit diagonal, `1/3` on the first
/// off-diagonals.
pub fn build_q(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| match i.abs_diff(j) {
        0 => 1.0,
        1 => 1.0 / 3.0,
        _ => 0.0,
    })
}

/// Jacobian `Γ(ϑ)` of `g` with respect to the state. Every pair is
/// required to be non-coincident.
pub fn jacobian_gamma(state: &StateVector) -> Result<DMatrix<f64>> {
    let required = vec![true; state.layout().num_pairs()];
    jacobian_gamma_masked(state, &required)
}

/// Like [`jacobian_gamma`] but only the pairs flagged in `required` must
/// be non-coincident; rows of coincident unused pairs are left at zero.
pub fn jacobian_gamma_masked(state: &StateVector, required: &[bool]) -> Result<DMatrix<f64>> {
    let layout = state.layout();
    let index = PairIndex::new(layout.nodes);
    let d = layout.dim;
    let mut gamma = DMatrix::zeros(layout.g_len(), layout.len());
    for (slot, (a, b)) in index.pairs().enumerate() {
        let xa = state.position(a);
        let xb = state.position(b);
        let rho = distance(xa, xb);
        if rho < MIN_RANGE {
            if required[slot] {
                return Err(Error::DegenerateGeometry { a, b, range: rho });
            }
            continue;
        }
        let oa = layout.position_offset(a);
        let ob = layout.position_offset(b);
        for k in 0..d {
            let u = (xa[k] - xb[k]) / rho;
            gamma[(slot, oa + k)] = u;
            gamma[(slot, ob + k)] = -u;
        }
    }
    for j in 0..layout.nodes - 1 {
        gamma[(index.len() + j, layout.theta_len() + j)] = 1.0;
    }
    Ok(gamma)
}

/// Transmission sequence in which every unordered transceiver pair occurs
/// consecutively at least once: a star from node 1 (`1,2,1,3,..,1,N-1`)
/// followed by the remaining pairs in lexicographic order.
pub fn generate_sequence(nodes: usize) -> Vec<usize> {
    assert!(nodes >= 3, "need at least two transceivers");
    let tx = nodes - 1;
    let mut seq = vec![1];
    for j in 2..=tx {
        if j > 2 {
            seq.push(1);
        }
        seq.push(j);
    }
    for a in 2..=tx {
        for b in (a + 1)..=tx {
            let last = *seq.last().expect("non-empty");
            if last == a {
                seq.push(b);
            } else if last == b {
                seq.push(a);
            } else {
                seq.push(a);
                seq.push(b);
            }
        }
    }
    seq
}

/// True if every unordered pair of transceivers `1..=N-1` appears
/// consecutively somewhere in the sequence.
pub fn covers_all_pairs(sequence: &[usize], nodes: usize) -> bool {
    let tx = nodes - 1;
    let mut seen = vec![vec![false; tx + 1]; tx + 1];
    for w in sequence.windows(2) {
        let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
        if b <= tx {
            seen[a][b] = true;
        }
    }
    (1..=tx).all(|a| ((a + 1)..=tx).all(|b| seen[a][b]))
}

/// Noiseless intervals `c⁻¹ H g(ϑ)`.
pub fn predict(state: &StateVector, h: &DMatrix<f64>, c: f64) -> Result<DVector<f64>> {
    let gv = g(state);
    if h.ncols() != gv.len() {
        return Err(Error::DimensionMismatch {
            expected: gv.len(),
            got: h.ncols(),
        });
    }
    Ok((h * gv) / c)
}

/// Measured intervals together with the structure that produced them.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub layout: Layout,
    pub c: f64,
    pub sequence: Vec<usize>,
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    q_factor: CholeskyFactor,
    used_pairs: Vec<bool>,
}

impl ObservationSet {
    pub fn new(layout: Layout, c: f64, sequence: Vec<usize>, y: DVector<f64>) -> Result<Self> {
        let h = build_h(&sequence, layout.nodes, c)?;
        if y.len() != h.nrows() {
            return Err(Error::DimensionMismatch {
                expected: h.nrows(),
                got: y.len(),
            });
        }
        let q = build_q(h.nrows());
        let q_factor = cholesky_spd(&q)?;
        let pairs = layout.num_pairs();
        let used_pairs = (0..pairs)
            .map(|s| h.column(s).iter().any(|&v| v != 0.0))
            .collect();
        Ok(Self {
            layout,
            c,
            sequence,
            y,
            h,
            q,
            q_factor,
            used_pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn q_factor(&self) -> &CholeskyFactor {
        &self.q_factor
    }

    /// Range slots touched by at least one row of `H`.
    pub fn used_pairs(&self) -> &[bool] {
        &self.used_pairs
    }

    /// Same structure, new measurements.
    pub fn with_intervals(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.y.len() {
            return Err(Error::DimensionMismatch {
                expected: self.y.len(),
                got: y.len(),
            });
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }

    /// `G = c⁻¹ H Γ(ϑ)`.
    pub fn design_matrix(&self, state: &StateVector) -> Result<DMatrix<f64>> {
        let gamma = jacobian_gamma_masked(state, &self.used_pairs)?;
        Ok((&self.h * gamma) / self.c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{default_step, finite_diff_jacobian};
    use proptest::prelude::*;

    const C: f64 = 3e8;

    fn tri_state() -> StateVector {
        let layout = Layout::new(2, 3).unwrap();
        let mut s = StateVector::zeros(layout);
        s.set_position(1, &[0.0, 0.0]);
        s.set_position(2, &[3.0, 4.0]);
        s.set_position(3, &[6.0, 0.0]);
        s
    }

    #[test]
    fn pair_slots_are_lexicographic() {
        let idx = PairIndex::new(4);
        let pairs: Vec<_> = idx.pairs().collect();
        assert_eq!(pairs, vec![(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]);
        for (s, (a, b)) in pairs.iter().enumerate() {
            assert_eq!(idx.slot(*a, *b), s);
            assert_eq!(idx.slot(*b, *a), s);
        }
    }

    #[test]
    fn ranges_of_345_triangles() {
        let r = pair_ranges(&tri_state());
        assert_eq!(r.as_slice(), &[5.0, 6.0, 5.0]);
    }

    #[test]
    fn coincident_nodes_give_zero_ranges() {
        let s = StateVector::zeros(Layout::new(3, 5).unwrap());
        assert!(pair_ranges(&s).iter().all(|&v| v == 0.0));
        assert!(g(&s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ranges_match_double_loop() {
        let layout = Layout::new(2, 4).unwrap();
        let vals = [0.3, -1.0, 2.5, 4.0, -3.2, 0.7, 1.1, 1.9];
        let mut s = StateVector::zeros(layout);
        for id in 1..=4 {
            s.set_position(id, &vals[(id - 1) * 2..id * 2]);
        }
        let r = pair_ranges(&s);
        let mut k = 0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let dx = vals[2 * i] - vals[2 * j];
                let dy = vals[2 * i + 1] - vals[2 * j + 1];
                assert!((r[k] - (dx * dx + dy * dy).sqrt()).abs() < 1e-15);
                k += 1;
            }
        }
    }

    #[test]
    fn g_stacks_ranges_then_delays() {
        let mut s = tri_state();
        s.set_delay(1, 1e-6);
        s.set_delay(2, 1e-6);
        assert_eq!(g(&s).as_slice(), &[5.0, 6.0, 5.0, 1e-6, 1e-6]);
    }

    #[test]
    fn h_single_pair() {
        let h = build_h(&[1, 2], 3, C).unwrap();
        assert_eq!(h.nrows(), 1);
        assert_eq!(h.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0, 1.0, 0.0, C]);
    }

    #[test]
    fn h_reverse_pair() {
        let h = build_h(&[1, 2, 1], 3, C).unwrap();
        assert_eq!(h.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0, 1.0, 0.0, C]);
        assert_eq!(h.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, -1.0, C, 0.0]);
    }

    #[test]
    fn h_rejects_bad_sequences() {
        assert!(matches!(build_h(&[1, 3], 3, C), Err(Error::InvalidSequence(_))));
        assert!(matches!(build_h(&[1, 1, 2], 3, C), Err(Error::InvalidSequence(_))));
        assert!(matches!(build_h(&[1], 3, C), Err(Error::InvalidSequence(_))));
        assert!(matches!(build_h(&[0, 1], 3, C), Err(Error::InvalidSequence(_))));
    }

    #[test]
    fn h_rows_have_four_nonzeros() {
        let n = 7;
        let seq = generate_sequence(n);
        let h = build_h(&seq, n, C).unwrap();
        let pairs = n * (n - 1) / 2;
        for row in h.row_iter() {
            let nz: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz.len(), 4);
            assert!(nz.iter().all(|&v| v == 1.0 || v == -1.0 || v == C));
            let range_sum: f64 = row.iter().take(pairs).sum();
            assert_eq!(range_sum, 1.0);
        }
    }

    #[test]
    fn q_structure() {
        assert_eq!(build_q(1), DMatrix::from_element(1, 1, 1.0));
        let q3 = build_q(3);
        let t = 1.0 / 3.0;
        assert_eq!(
            q3,
            DMatrix::from_row_slice(3, 3, &[1.0, t, 0.0, t, 1.0, t, 0.0, t, 1.0])
        );
    }

    #[test]
    fn q_smallest_eigenvalue_bounded() {
        let q = build_q(50);
        let eig = q.symmetric_eigenvalues();
        assert!(eig.min() >= 1.0 / 3.0 - 1e-12);
        // exact: 1 + (2/3) cos(kπ/51)
        let expected = 1.0 + 2.0 / 3.0 * (50.0 * std::f64::consts::PI / 51.0).cos();
        assert!((eig.min() - expected).abs() < 1e-12);
    }

    #[test]
    fn gamma_unit_direction_rows() {
        let layout = Layout::new(2, 3).unwrap();
        let mut s = StateVector::zeros(layout);
        s.set_position(2, &[3.0, 4.0]);
        s.set_position(3, &[6.0, 0.0]);
        let gam = jacobian_gamma(&s).unwrap();
        let row: Vec<f64> = gam.row(0).iter().copied().collect();
        assert!((row[0] + 0.6).abs() < 1e-15 && (row[1] + 0.8).abs() < 1e-15);
        assert!((row[2] - 0.6).abs() < 1e-15 && (row[3] - 0.8).abs() < 1e-15);
        assert!(row[4..].iter().all(|&v| v == 0.0));
        let delay_block = gam.view((3, 6), (2, 2));
        assert_eq!(delay_block, DMatrix::<f64>::identity(2, 2));
        assert!(gam.view((3, 0), (2, 6)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_rejects_coincident_nodes() {
        let s = StateVector::zeros(Layout::new(2, 3).unwrap());
        assert!(matches!(
            jacobian_gamma(&s),
            Err(Error::DegenerateGeometry { a: 1, b: 2, .. })
        ));
    }

    #[test]
    fn sequence_examples() {
        assert_eq!(generate_sequence(3), vec![1, 2]);
        let seq = generate_sequence(6);
        assert_eq!(&seq[..10], &[1, 2, 1, 3, 1, 4, 1, 5, 2, 3]);
        assert!(covers_all_pairs(&seq, 6));
        assert!(check_sequence(&seq, 6).is_ok());
        assert!(!covers_all_pairs(&[1, 2, 3], 4));
    }

    #[test]
    fn predict_hand_evaluated() {
        let mut s = tri_state();
        s.set_delay(2, 1e-6);
        let h = build_h(&[1, 2], 3, C).unwrap();
        let y = predict(&s, &h, C).unwrap();
        let expected = (5.0 + 5.0 - 6.0) / C + 1e-6;
        assert!((y[0] - expected).abs() < 1e-20);
        assert!((y[0] - 1.0133e-6).abs() < 1e-10);
    }

    #[test]
    fn predict_equidistant_receiver() {
        // receiver on the perpendicular bisector of 1-2: ρ_2N = ρ_1N
        let layout = Layout::new(2, 3).unwrap();
        let mut s = StateVector::zeros(layout);
        s.set_position(1, &[-2.0, 0.0]);
        s.set_position(2, &[2.0, 0.0]);
        s.set_position(3, &[0.0, 5.0]);
        let h = build_h(&[1, 2], 3, C).unwrap();
        let y = predict(&s, &h, C).unwrap();
        assert!((y[0] - 4.0 / C).abs() < 1e-22);
    }

    #[test]
    fn predict_dimension_mismatch() {
        let h = build_h(&[1, 2], 3, C).unwrap();
        let s = StateVector::zeros(Layout::new(2, 4).unwrap());
        assert!(matches!(predict(&s, &h, C), Err(Error::DimensionMismatch { .. })));
    }

    fn state_strategy() -> impl Strategy<Value = StateVector> {
        (2usize..=3, 3usize..=7).prop_flat_map(|(d, n)| {
            let layout = Layout::new(d, n).unwrap();
            (
                proptest::collection::vec(-20.0f64..20.0, d * n),
                proptest::collection::vec(0.5e-6f64..2e-6, n - 1),
            )
                .prop_map(move |(p, dl)| {
                    let mut v = p;
                    v.extend(dl);
                    StateVector::new(layout, DVector::from_vec(v)).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gamma_matches_finite_differences(s in state_strategy()) {
            let layout = s.layout();
            let ranges = pair_ranges(&s);
            prop_assume!(ranges.min() > 1e-3);
            let gam = jacobian_gamma(&s).unwrap();
            let fd = finite_diff_jacobian(
                |v| g(&StateVector::new(layout, v.clone()).unwrap()),
                s.as_vector(),
                default_step,
            );
            prop_assert!((&gam - fd).amax() <= 1e-5 * (1.0 + gam.amax()));
        }

        #[test]
        fn delay_offset_shifts_predictions(s in state_strategy(), t in -1e-7f64..1e-7) {
            let layout = s.layout();
            let seq = generate_sequence(layout.nodes);
            let h = build_h(&seq, layout.nodes, C).unwrap();
            let y0 = predict(&s, &h, C).unwrap();
            let mut shifted = s.clone();
            for id in 1..layout.nodes {
                shifted.set_delay(id, s.delay(id) + t);
            }
            let y1 = predict(&shifted, &h, C).unwrap();
            for k in 0..y0.len() {
                prop_assert!((y1[k] - y0[k] - t).abs() < 1e-20);
            }
        }

        #[test]
        fn predictions_invariant_under_rigid_motion(
            s in state_strategy(),
            angle in 0.0f64..std::f64::consts::TAU,
            shift in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let layout = s.layout();
            let seq = generate_sequence(layout.nodes);
            let h = build_h(&seq, layout.nodes, C).unwrap();
            let (sn, cs) = angle.sin_cos();
            let mut moved = s.clone();
            for id in 1..=layout.nodes {
                let p = s.position(id);
                let mut q = p.to_vec();
                q[0] = cs * p[0] - sn * p[1] + shift[0];
                q[1] = sn * p[0] + cs * p[1] + shift[1];
                if layout.dim == 3 {
                    q[2] = p[2] + shift[2];
                }
                moved.set_position(id, &q);
            }
            let y0 = predict(&s, &h, C).unwrap();
            let y1 = predict(&moved, &h, C).unwrap();
            prop_assert!((y1 - y0).amax() < 1e-19);
        }

        #[test]
        fn q_is_spd(m in 1usize..200) {
            prop_assert!(cholesky_spd(&build_q(m)).is_ok());
        }

        #[test]
        fn generated_sequence_covers_pairs(n in 3usize..20) {
            let seq = generate_sequence(n);
            prop_assert!(check_sequence(&seq, n).is_ok());
            prop_assert!(covers_all_pairs(&seq, n));
        }
    }
}
