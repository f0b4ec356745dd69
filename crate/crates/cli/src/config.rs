use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use petbench_core::policyopt::OptConfig;
use petbench_core::{PetConfig, TrainConfig, WorldConfig};
use serde::{Deserialize, Serialize};

/// 64-bit FNV-1a of a stage name.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a pipeline stage: `splitmix64(seed ^ fnv1a(stage))`.
pub fn sub_seed(seed: u64, stage: &str) -> u64 {
    splitmix64(seed ^ fnv1a(stage))
}

fn default_opts() -> Vec<OptConfig> {
    let mut opts = vec![OptConfig::greedy()];
    opts.extend([0.01, 0.1, 1.0, 10.0].map(OptConfig::kl));
    opts.push(OptConfig::policy_gradient(0.0));
    opts.push(OptConfig::policy_gradient(1.0));
    opts
}

/// One end-to-end experiment. Stage seeds inside the nested configs are
/// overwritten from `seed` by [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: String,
    pub world: WorldConfig,
    #[serde(rename = "dataset_N", alias = "dataset_n")]
    pub dataset_n: usize,
    pub proxy: TrainConfig,
    pub pet: PetConfig,
    pub opt: Vec<OptConfig>,
    /// Where the CLI writes artifacts; not part of the recorded provenance.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Rejection-sampling draws used for the certificate and the bound report.
    pub rs_n: usize,
    pub coverage_starts: usize,
    pub delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            world: WorldConfig::default(),
            dataset_n: 20_000,
            proxy: TrainConfig::default(),
            pet: PetConfig::default(),
            opt: default_opts(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            rs_n: 64,
            coverage_starts: 32,
            delta: 0.1,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn dataset_seed(&self) -> u64 {
        sub_seed(self.seed, "dataset")
    }

    pub fn coverage_seed(&self) -> u64 {
        sub_seed(self.seed, "coverage")
    }

    /// Writes the derived stage seeds into the nested configs.
    pub fn resolve(mut self) -> Self {
        self.world.seed = sub_seed(self.seed, "world");
        self.proxy.seed = sub_seed(self.seed, "proxy");
        self.pet.seed = sub_seed(self.seed, "pet");
        for (i, o) in self.opt.iter_mut().enumerate() {
            o.seed = sub_seed(self.seed, &format!("opt/{i}"));
        }
        self
    }

    /// Checks everything that can be checked before any work is done.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.dataset_n == 0 {
            bail!("dataset_N must be positive");
        }
        if self.opt.is_empty() {
            bail!("at least one optimizer config is required");
        }
        if self.rs_n == 0 || self.coverage_starts == 0 {
            bail!("rs_n and coverage_starts must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            bail!("delta must lie in (0, 1), got {}", self.delta);
        }
        self.world.validate().context("world")?;
        self.proxy.validate(self.dataset_n).context("proxy")?;
        self.pet.validate(self.dataset_n).context("pet")?;
        for (i, o) in self.opt.iter().enumerate() {
            o.validate().with_context(|| format!("opt[{i}]"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let a = sub_seed(7, "world");
        assert_eq!(a, sub_seed(7, "world"));
        assert_ne!(a, sub_seed(7, "proxy"));
        assert_ne!(a, sub_seed(8, "world"));
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = RunConfig {
            dataset_n: 0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("dataset_N"));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig::default().resolve();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"dataset_N\""));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"datset_N": 3}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"dataset_N": 500, "seed": 3}"#).unwrap();
        assert_eq!(partial.dataset_n, 500);
        assert_eq!(partial.world, WorldConfig::default());
    }
}
