//! Network definition: node roles, priors, ground truth, noise level and
//! transmission sequence. Scenarios are read from TOML files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::EstimatorConfig;
use crate::model::{check_sequence, covers_all_pairs, generate_sequence, Layout, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Transceiver with an informative Gaussian position prior.
    Anchor,
    /// Transceiver with a noninformative position prior.
    Auxiliary,
    /// The passive, self-localizing node. Always has the largest id.
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: usize,
    pub role: Role,
    /// Prior mean for anchors, true position otherwise (m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec<f64>>,
    /// Isotropic prior std assumed by the estimator (anchors only, m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    /// Std used to draw the true anchor position; defaults to `prior_std`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_std: Option<f64>,
    /// Explicit initial position for the estimator (auxiliary nodes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayPrior {
    /// Nominal turn-around delay μ_δ (s).
    pub nominal: f64,
    /// Std of the actual delay around the nominal value (s).
    pub std: f64,
    /// Std used to draw the true delays; defaults to `std`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_std: Option<f64>,
}

impl DelayPrior {
    pub fn sampling_std(&self) -> f64 {
        self.true_std.unwrap_or(self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SequenceSpec {
    /// `"auto"`: generate a sequence covering every transceiver pair.
    Keyword(String),
    Explicit(Vec<usize>),
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec::Keyword("auto".into())
    }
}

fn default_speed() -> f64 {
    SPEED_OF_LIGHT
}

fn default_aux_offset() -> Vec<f64> {
    vec![1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub dimension: usize,
    #[serde(default = "default_speed")]
    pub propagation_speed: f64,
    /// Timing noise std σ (s).
    pub noise_std: f64,
    pub delay: DelayPrior,
    /// Offset from the anchor centroid used to initialize auxiliary nodes
    /// without an explicit `init` (m).
    #[serde(default = "default_aux_offset")]
    pub auxiliary_offset: Vec<f64>,
    #[serde(default)]
    pub sequence: SequenceSpec,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub nodes: Vec<NodeSpec>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut s: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        s.nodes.sort_by_key(|n| n.id);
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn layout(&self) -> Layout {
        Layout {
            dim: self.dimension,
            nodes: self.nodes.len(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: usize) -> &NodeSpec {
        &self.nodes[id - 1]
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.role == role)
            .map(|n| n.id)
            .collect()
    }

    pub fn anchors(&self) -> Vec<usize> {
        self.ids_with_role(Role::Anchor)
    }

    /// Nodes without a position prior: auxiliaries and the receiver.
    pub fn unknown_position_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.role != Role::Anchor)
            .map(|n| n.id)
            .collect()
    }

    pub fn transmission_sequence(&self) -> Vec<usize> {
        match &self.sequence {
            SequenceSpec::Keyword(_) => generate_sequence(self.num_nodes()),
            SequenceSpec::Explicit(v) => v.clone(),
        }
    }

    /// Centroid of the anchor prior means.
    pub fn anchor_centroid(&self) -> Vec<f64> {
        let anchors = self.anchors();
        let mut c = vec![0.0; self.dimension];
        for &id in &anchors {
            let p = self.node(id).position.as_ref().expect("validated anchor");
            for (ck, pk) in c.iter_mut().zip(p) {
                *ck += pk;
            }
        }
        c.iter_mut().for_each(|v| *v /= anchors.len() as f64);
        c
    }

    /// Field-level validation; every error is a [`Error::Config`] except
    /// a non-anchor without a position, which is [`Error::MissingTruth`].
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let d = self.dimension;
        let n = self.nodes.len();
        Layout::new(d, n)?;
        if !(self.propagation_speed.is_finite() && self.propagation_speed > 0.0) {
            return cfg(format!("propagation_speed must be positive, got {}", self.propagation_speed));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return cfg(format!("noise_std must be nonnegative, got {}", self.noise_std));
        }
        if !(self.delay.nominal.is_finite() && self.delay.std.is_finite() && self.delay.std > 0.0) {
            return cfg("delay.nominal must be finite and delay.std positive".into());
        }
        if let Some(t) = self.delay.true_std {
            if !(t.is_finite() && t >= 0.0) {
                return cfg(format!("delay.true_std must be nonnegative, got {t}"));
            }
        }
        if self.auxiliary_offset.len() != d {
            return cfg(format!("auxiliary_offset must have {d} components"));
        }
        for (k, node) in self.nodes.iter().enumerate() {
            if node.id != k + 1 {
                return cfg(format!("node ids must be 1..={n} without gaps; found id {} at position {}", node.id, k + 1));
            }
            let is_last = node.id == n;
            match (node.role, is_last) {
                (Role::Receiver, false) => return cfg(format!("node {}: the receiver must have the largest id {n}", node.id)),
                (r, true) if r != Role::Receiver => return cfg(format!("node {n} must be the receiver")),
                _ => {}
            }
            match &node.position {
                Some(p) if p.len() != d => {
                    return cfg(format!("node {}: position has {} components, expected {d}", node.id, p.len()))
                }
                Some(p) if p.iter().any(|v| !v.is_finite()) => {
                    return cfg(format!("node {}: non-finite position", node.id))
                }
                None if node.role == Role::Anchor => {
                    return cfg(format!("node {}: anchor needs a prior mean `position`", node.id))
                }
                None => return Err(Error::MissingTruth(node.id)),
                _ => {}
            }
            if let Some(init) = &node.init {
                if init.len() != d {
                    return cfg(format!("node {}: init has {} components, expected {d}", node.id, init.len()));
                }
            }
            match node.role {
                Role::Anchor => match node.prior_std {
                    Some(s) if s.is_finite() && s > 0.0 => {}
                    _ => return cfg(format!("node {}: anchor needs a positive prior_std", node.id)),
                },
                _ => {
                    if node.prior_std.is_some() || node.true_std.is_some() {
                        return cfg(format!("node {}: only anchors take prior_std/true_std", node.id));
                    }
                }
            }
            if let Some(t) = node.true_std {
                if !(t.is_finite() && t >= 0.0) {
                    return cfg(format!("node {}: true_std must be nonnegative", node.id));
                }
            }
        }
        if self.anchors().is_empty() {
            return cfg("at least one anchor is required".into());
        }
        match &self.sequence {
            SequenceSpec::Keyword(k) if k != "auto" => {
                return cfg(format!("sequence must be \"auto\" or a list of node ids, got {k:?}"))
            }
            SequenceSpec::Explicit(seq) => {
                check_sequence(seq, n).map_err(|e| Error::Config(e.to_string()))?;
                if !covers_all_pairs(seq, n) {
                    return cfg("sequence must contain every transceiver pair consecutively at least once".into());
                }
            }
            _ => {}
        }
        self.estimator.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
dimension = 2
noise_std = 2e-9
[delay]
nominal = 1e-6
std = 1e-8
[[nodes]]
id = 1
role = "anchor"
position = [0.0, 0.0]
prior_std = 0.2
[[nodes]]
id = 2
role = "anchor"
position = [10.0, 0.0]
prior_std = 0.2
[[nodes]]
id = 3
role = "auxiliary"
position = [3.0, 7.0]
[[nodes]]
id = 4
role = "receiver"
position = [5.0, 5.0]
"#;

    #[test]
    fn parses_minimal_scenario() {
        let s = Scenario::from_toml(BASE).unwrap();
        assert_eq!(s.layout(), Layout { dim: 2, nodes: 4 });
        assert_eq!(s.propagation_speed, SPEED_OF_LIGHT);
        assert_eq!(s.transmission_sequence(), vec![1, 2, 1, 3, 2]);
        assert_eq!(s.anchors(), vec![1, 2]);
        assert_eq!(s.unknown_position_nodes(), vec![3, 4]);
        assert_eq!(s.anchor_centroid(), vec![5.0, 0.0]);
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::from_toml(BASE).unwrap();
        let again = Scenario::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn sequence_with_receiver_rejected() {
        let text = format!("sequence = [1, 2, 4]\n{BASE}");
        assert!(matches!(Scenario::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn sequence_missing_a_pair_rejected() {
        let text = format!("sequence = [1, 2, 1, 3]\n{BASE}");
        assert!(matches!(Scenario::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_auxiliary_truth() {
        let text = BASE.replace("position = [3.0, 7.0]\n", "");
        assert_eq!(Scenario::from_toml(&text), Err(Error::MissingTruth(3)));
    }

    #[test]
    fn receiver_must_be_last() {
        let text = BASE
            .replace("role = \"auxiliary\"", "role = \"tmp\"")
            .replace("role = \"receiver\"", "role = \"auxiliary\"")
            .replace("role = \"tmp\"", "role = \"receiver\"");
        assert!(matches!(Scenario::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = format!("colour = 3\n{BASE}");
        assert!(matches!(Scenario::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn anchor_without_prior_rejected() {
        let text = BASE.replacen("prior_std = 0.2\n", "", 1);
        assert!(matches!(Scenario::from_toml(&text), Err(Error::Config(_))));
    }
}
