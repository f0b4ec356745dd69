use anyhow::{bail, Context};
use petbench_core::{make_world, pet_finetune, rs_policy, sample_dataset, train_proxy, value};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const DEFAULT_N_LIST: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsCompareRow {
    pub scenario: String,
    /// Master seed of the replicate, or `mean` for the average over replicates.
    pub seed: String,
    pub n: usize,
    #[serde(rename = "V_true_rs_proxy")]
    pub v_true_proxy: f64,
    #[serde(rename = "V_true_rs_pet")]
    pub v_true_pet: f64,
}

/// True value of rejection sampling on the proxy and on the PET reward for
/// each `n`. PET is re-run with its own `n` set to the sampler's, and
/// replicate `k` uses master seed `cfg.seed + k`. Rows are per replicate,
/// followed by one `mean` row per `n`.
pub fn run_rs_compare(cfg: &RunConfig, n_list: &[usize], replicates: usize) -> anyhow::Result<Vec<RsCompareRow>> {
    if n_list.is_empty() || n_list.contains(&0) {
        bail!("n list must be non-empty and positive");
    }
    if replicates == 0 {
        bail!("replicates must be positive");
    }
    cfg.validate().context("invalid config")?;
    let per_seed: Vec<Vec<RsCompareRow>> = (0..replicates as u64)
        .into_par_iter()
        .map(|k| {
            let rc = RunConfig {
                seed: cfg.seed.wrapping_add(k),
                ..cfg.clone()
            }
            .resolve();
            let world = make_world(&rc.world).context("stage worldgen")?;
            let data = sample_dataset(&world, rc.dataset_n, rc.dataset_seed()).context("stage dataset")?;
            let proxy = train_proxy(&data, world.bound(), &rc.proxy)
                .context("stage rewardmodel")?
                .reward;
            n_list
                .iter()
                .map(|&n| {
                    let mut pet_cfg = rc.pet.clone();
                    pet_cfg.n = n;
                    let pet = pet_finetune(&world, &data, &proxy, &pet_cfg)
                        .context("stage pet")?
                        .reward;
                    let v = |r| -> anyhow::Result<f64> {
                        Ok(value(&world.true_reward, &rs_policy(&world.pi0, r, n)?, &world.mu)?)
                    };
                    Ok(RsCompareRow {
                        scenario: rc.scenario.clone(),
                        seed: rc.seed.to_string(),
                        n,
                        v_true_proxy: v(&proxy)?,
                        v_true_pet: v(&pet)?,
                    })
                })
                .collect()
        })
        .collect::<anyhow::Result<_>>()?;

    let mut rows: Vec<RsCompareRow> = per_seed.concat();
    for (i, &n) in n_list.iter().enumerate() {
        let mean = |f: fn(&RsCompareRow) -> f64| per_seed.iter().map(|rs| f(&rs[i])).sum::<f64>() / replicates as f64;
        rows.push(RsCompareRow {
            scenario: cfg.scenario.clone(),
            seed: "mean".into(),
            n,
            v_true_proxy: mean(|r| r.v_true_proxy),
            v_true_pet: mean(|r| r.v_true_pet),
        });
    }
    Ok(rows)
}
