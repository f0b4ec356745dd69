use std::path::Path;

use anyhow::{bail, Context};
use petbench_core::policyopt::OptConfig;
use petbench_core::CoverageProfile;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactDir;
use crate::config::RunConfig;
use crate::pipeline::run_pipeline;

/// Values to sweep. An empty list keeps the base config's value; a listed
/// `eta` replaces the optimizer list with greedy (`eta = 0`) or the KL
/// closed form (`eta > 0`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub beta: Vec<f64>,
    pub n: Vec<usize>,
    pub eta: Vec<f64>,
    #[serde(rename = "dataset_N", alias = "dataset_n")]
    pub dataset_n: Vec<usize>,
    pub coverage_profile: Vec<CoverageProfile>,
    /// Seed replicates per cell; replicate `k` uses master seed `seed + k`.
    pub replicates: usize,
}

impl SweepGrid {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Cartesian product of the listed values applied to `base`, in
    /// row-major order over (beta, n, eta, dataset_N, coverage_profile).
    pub fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        fn or_base<T: Clone>(v: &[T], base: T) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().cloned().map(Some).collect()
            }
            .into_iter()
            .map(|o| o.or_else(|| Some(base.clone())))
            .collect()
        }
        let mut out = Vec::new();
        for beta in or_base(&self.beta, base.pet.beta) {
            for n in or_base(&self.n, base.pet.n) {
                for eta in if self.eta.is_empty() {
                    vec![None]
                } else {
                    self.eta.iter().copied().map(Some).collect()
                } {
                    for dn in or_base(&self.dataset_n, base.dataset_n) {
                        for cp in or_base(&self.coverage_profile, base.world.coverage_profile) {
                            let mut c = base.clone();
                            c.pet.beta = beta.unwrap();
                            c.pet.n = n.unwrap();
                            c.rs_n = n.unwrap();
                            c.dataset_n = dn.unwrap();
                            c.world.coverage_profile = cp.unwrap();
                            if let Some(eta) = eta {
                                c.opt = vec![if eta == 0.0 {
                                    OptConfig::greedy()
                                } else {
                                    OptConfig::kl(eta)
                                }];
                            }
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// One line of `sweep.csv`: one report row of one replicate of one cell, or
/// a single row with the error when that run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub replicate: usize,
    pub seed: u64,
    pub beta: f64,
    pub n: usize,
    #[serde(rename = "dataset_N")]
    pub dataset_n: usize,
    pub coverage_profile: String,
    pub status: String,
    pub method: String,
    pub reward_model: String,
    pub eta: Option<f64>,
    #[serde(rename = "V_true")]
    pub v_true: Option<f64>,
    #[serde(rename = "V_proxy")]
    pub v_proxy: Option<f64>,
    #[serde(rename = "V_pet")]
    pub v_pet: Option<f64>,
    #[serde(rename = "KL")]
    pub kl: String,
}

fn profile_name(p: CoverageProfile) -> String {
    match p {
        CoverageProfile::Full => "full".into(),
        CoverageProfile::Hackable => "hackable".into(),
    }
}

/// Runs every cell and replicate on the current rayon pool, writing each run
/// to `out/cell_XXX/rep_Y` and the aggregate to `out/sweep.csv`. Failed runs
/// are recorded and do not stop the sweep.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid, out: &Path) -> anyhow::Result<Vec<SweepRow>> {
    let replicates = grid.replicates.max(1);
    if grid.beta.iter().any(|b| !(*b > 0.0)) || grid.n.contains(&0) || grid.eta.iter().any(|e| !(*e >= 0.0)) {
        bail!("grid values must be positive (eta non-negative)");
    }
    let cells = grid.cells(base);
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..replicates).map(move |r| (c, r)))
        .collect();
    let results: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|&(c, rep)| {
            let mut cfg = cells[c].clone();
            cfg.seed = base.seed.wrapping_add(rep as u64);
            let dir = out.join(format!("cell_{c:03}")).join(format!("rep_{rep}"));
            let stub = SweepRow {
                cell: c,
                replicate: rep,
                seed: cfg.seed,
                beta: cfg.pet.beta,
                n: cfg.pet.n,
                dataset_n: cfg.dataset_n,
                coverage_profile: profile_name(cfg.world.coverage_profile),
                status: "ok".into(),
                method: String::new(),
                reward_model: String::new(),
                eta: None,
                v_true: None,
                v_proxy: None,
                v_pet: None,
                kl: String::new(),
            };
            match run_pipeline(&cfg, Some(&dir)) {
                Ok(run) => run
                    .rows
                    .into_iter()
                    .map(|r| SweepRow {
                        method: r.method,
                        reward_model: r.reward_model,
                        eta: Some(r.eta),
                        v_true: Some(r.v_true),
                        v_proxy: Some(r.v_proxy),
                        v_pet: Some(r.v_pet),
                        kl: r.kl,
                        ..stub.clone()
                    })
                    .collect(),
                Err(e) => vec![SweepRow {
                    status: format!("error: {e:#}"),
                    ..stub
                }],
            }
        })
        .collect();
    let rows: Vec<SweepRow> = results.concat();
    ArtifactDir::create(out, &serde_json::json!({ "base": base, "grid": grid }))?.write_csv("sweep.csv", &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_one_unchanged_cell() {
        let base = RunConfig::default();
        let cells = SweepGrid::default().cells(&base);
        assert_eq!(cells, vec![base]);
    }

    #[test]
    fn cells_are_the_cartesian_product() {
        let grid = SweepGrid {
            beta: vec![1.0, 10.0],
            eta: vec![0.0, 0.5, 2.0],
            coverage_profile: vec![CoverageProfile::Full, CoverageProfile::Hackable],
            ..SweepGrid::default()
        };
        let cells = grid.cells(&RunConfig::default());
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].opt, vec![OptConfig::greedy()]);
        assert_eq!(cells[2].opt, vec![OptConfig::kl(0.5)]);
        assert_eq!(cells[11].pet.beta, 10.0);
    }
}
