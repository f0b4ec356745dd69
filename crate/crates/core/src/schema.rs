//! JSON representations of the core types and the versioned file envelope.
//!
//! Matrices are written as arrays of rows and tensors as nested arrays.
//! Every type is validated on the way in, so a parsed file satisfies the
//! same invariants as a value built in memory.

use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dist::{Distribution, PairDistribution, Space, TabularPolicy};
use crate::error::{Error, Result};
use crate::preference::{PreferenceDataset, PreferenceTuple};
use crate::reward::RewardTable;
use crate::worldgen::World;

pub const SCHEMA_VERSION: u32 = 1;

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape("ragged matrix".into()));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RewardRepr {
    bound: f64,
    values: Vec<Vec<f64>>,
}

impl From<RewardTable> for RewardRepr {
    fn from(r: RewardTable) -> Self {
        Self {
            bound: r.bound(),
            values: to_rows(r.values()),
        }
    }
}

impl TryFrom<RewardRepr> for RewardTable {
    type Error = Error;

    fn try_from(r: RewardRepr) -> Result<Self> {
        RewardTable::new(from_rows(r.values)?, r.bound)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PolicyRepr {
    probs: Vec<Vec<f64>>,
}

impl From<TabularPolicy> for PolicyRepr {
    fn from(p: TabularPolicy) -> Self {
        Self {
            probs: to_rows(p.matrix()),
        }
    }
}

impl TryFrom<PolicyRepr> for TabularPolicy {
    type Error = Error;

    fn try_from(p: PolicyRepr) -> Result<Self> {
        TabularPolicy::new(from_rows(p.probs)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
pub(crate) struct PairRepr(Vec<Vec<Vec<f64>>>);

impl From<PairDistribution> for PairRepr {
    fn from(p: PairDistribution) -> Self {
        Self(p.tensor().outer_iter().map(|m| to_rows(&m.to_owned())).collect())
    }
}

impl TryFrom<PairRepr> for PairDistribution {
    type Error = Error;

    fn try_from(p: PairRepr) -> Result<Self> {
        let slices = p.0.into_iter().map(from_rows).collect::<Result<Vec<_>>>()?;
        let dim = slices.first().map_or((0, 0), |m| m.dim());
        if slices.iter().any(|m| m.dim() != dim) {
            return Err(Error::Shape("ragged pair distribution".into()));
        }
        let flat: Vec<f64> = slices.iter().flat_map(|m| m.iter().copied()).collect();
        let t = Array3::from_shape_vec((slices.len(), dim.0, dim.1), flat).map_err(|e| Error::Shape(e.to_string()))?;
        PairDistribution::new(t)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DatasetRepr {
    n_prompts: usize,
    n_responses: usize,
    tuples: Vec<PreferenceTuple>,
}

impl From<PreferenceDataset> for DatasetRepr {
    fn from(d: PreferenceDataset) -> Self {
        Self {
            n_prompts: d.n_prompts(),
            n_responses: d.n_responses(),
            tuples: d.tuples().to_vec(),
        }
    }
}

impl TryFrom<DatasetRepr> for PreferenceDataset {
    type Error = Error;

    fn try_from(d: DatasetRepr) -> Result<Self> {
        PreferenceDataset::new(d.n_prompts, d.n_responses, d.tuples)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct WorldRepr {
    n_prompts: usize,
    n_responses: usize,
    seed: u64,
    true_reward: RewardTable,
    mu: Distribution,
    pair_dist: PairDistribution,
    pi_ref: TabularPolicy,
    pi0: TabularPolicy,
    uncovered: Vec<Vec<usize>>,
}

impl From<World> for WorldRepr {
    fn from(w: World) -> Self {
        Self {
            n_prompts: w.n_prompts(),
            n_responses: w.n_responses(),
            seed: w.seed,
            true_reward: w.true_reward,
            mu: w.mu,
            pair_dist: w.pair_dist,
            pi_ref: w.pi_ref,
            pi0: w.pi0,
            uncovered: w.uncovered,
        }
    }
}

impl TryFrom<WorldRepr> for World {
    type Error = Error;

    fn try_from(w: WorldRepr) -> Result<Self> {
        let (nx, na) = (w.n_prompts, w.n_responses);
        let shapes = [
            (w.true_reward.n_prompts(), w.true_reward.n_responses()),
            (w.pair_dist.n_prompts(), w.pair_dist.n_responses()),
            (w.pi_ref.n_prompts(), w.pi_ref.n_responses()),
            (w.pi0.n_prompts(), w.pi0.n_responses()),
        ];
        if shapes.iter().any(|s| *s != (nx, na)) || w.mu.len() != nx || w.uncovered.len() != nx {
            return Err(Error::Shape("world components disagree on shape".into()));
        }
        for hidden in &w.uncovered {
            if hidden.windows(2).any(|p| p[0] >= p[1]) || hidden.iter().any(|a| *a >= na) {
                return Err(Error::Shape(
                    "uncovered lists must be ascending response indices".into(),
                ));
            }
        }
        Ok(World {
            prompts: Space::new(nx)?,
            responses: Space::new(na)?,
            true_reward: w.true_reward,
            mu: w.mu,
            pair_dist: w.pair_dist,
            pi_ref: w.pi_ref,
            pi0: w.pi0,
            uncovered: w.uncovered,
            seed: w.seed,
        })
    }
}

/// File wrapper carrying the schema version, the kind of payload and
/// free-form provenance (tool version, resolved configuration).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub provenance: serde_json::Value,
    pub data: T,
}

pub fn to_document<T: Serialize>(kind: &str, provenance: serde_json::Value, data: &T) -> Result<String> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        provenance,
        data,
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

/// Parses a document, checking the schema version and kind.
pub fn from_document<T: DeserializeOwned>(kind: &str, text: &str) -> Result<Envelope<T>> {
    #[derive(Deserialize)]
    struct Header {
        schema_version: u32,
        kind: String,
    }
    let header: Header = serde_json::from_str(text)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion(header.schema_version));
    }
    if header.kind != kind {
        return Err(Error::Config(format!(
            "expected a {kind} document, found {}",
            header.kind
        )));
    }
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{make_world, sample_dataset, WorldConfig};
    use ndarray::array;
    use serde_json::json;

    #[test]
    fn world_round_trips() {
        let w = make_world(&WorldConfig::default()).unwrap();
        let text = to_document("world", json!({"tool": "test"}), &w).unwrap();
        let back: Envelope<World> = from_document("world", &text).unwrap();
        assert_eq!(back.data, w);
        assert_eq!(back.provenance["tool"], "test");
    }

    #[test]
    fn dataset_and_policy_round_trip() {
        let w = make_world(&WorldConfig::full(2, 3, 1.0, 0)).unwrap();
        let data = sample_dataset(&w, 10, 1).unwrap();
        let text = serde_json::to_string(&data).unwrap();
        assert_eq!(serde_json::from_str::<PreferenceDataset>(&text).unwrap(), data);
        let text = serde_json::to_string(&w.pi0).unwrap();
        assert_eq!(serde_json::from_str::<TabularPolicy>(&text).unwrap(), w.pi0);
    }

    #[test]
    fn matrices_are_arrays_of_rows() {
        let r = RewardTable::new(array![[0.5, -1.0], [0.0, 1.0]], 1.0).unwrap();
        assert_eq!(
            serde_json::to_value(&r).unwrap(),
            json!({"bound": 1.0, "values": [[0.5, -1.0], [0.0, 1.0]]})
        );
    }

    #[test]
    fn invalid_payloads_are_rejected() {
        assert!(serde_json::from_str::<RewardTable>(r#"{"bound": 1.0, "values": [[2.0]]}"#).is_err());
        assert!(serde_json::from_str::<RewardTable>(r#"{"bound": 1.0, "values": [[0.0], [0.0, 1.0]]}"#).is_err());
        assert!(serde_json::from_str::<TabularPolicy>(r#"{"probs": [[0.5, 0.6]]}"#).is_err());
        let bad = r#"{"n_prompts": 1, "n_responses": 2, "tuples": [{"x": 0, "a1": 0, "a2": 2, "sigma": 1}]}"#;
        assert!(serde_json::from_str::<PreferenceDataset>(bad).is_err());
    }

    #[test]
    fn version_and_kind_are_checked() {
        let r = RewardTable::zeros(1, 2, 1.0).unwrap();
        let text = to_document("reward", json!(null), &r).unwrap();
        assert!(matches!(
            from_document::<RewardTable>("policy", &text),
            Err(Error::Config(_))
        ));
        let future = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(
            from_document::<RewardTable>("reward", &future),
            Err(Error::SchemaVersion(2))
        ));
    }
}
