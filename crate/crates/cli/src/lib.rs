//! Experiment orchestration for the pessimistic reward fine-tuning testbed:
//! the three-step pipeline, rejection-sampling comparisons, parameter sweeps
//! and the verification suite, with all artifacts written as JSON and CSV.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod rs_compare;
pub mod sweep;
pub mod verify;

use std::path::Path;

use anyhow::Context;
use petbench_core::schema::{from_document, Envelope};
use petbench_core::{make_world, RewardTable, World};

use artifacts::ArtifactDir;
use config::RunConfig;
use pipeline::{evaluate_all, run_pipeline, PipelineOutput};
use rs_compare::{run_rs_compare, RsCompareRow};
use verify::PropertyResult;

pub use artifacts::VERSION;

/// Runs the pipeline and writes every artifact to `out`.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path) -> anyhow::Result<PipelineOutput> {
    run_pipeline(cfg, Some(out))
}

/// Writes `rs_compare.csv` to `out`.
pub fn cmd_rs_compare(
    cfg: &RunConfig,
    n_list: &[usize],
    replicates: usize,
    out: &Path,
) -> anyhow::Result<Vec<RsCompareRow>> {
    let rows = run_rs_compare(cfg, n_list, replicates)?;
    let art = ArtifactDir::create(
        out,
        &serde_json::json!({ "run": cfg.clone().resolve(), "n": n_list, "replicates": replicates }),
    )?;
    art.write_csv("rs_compare.csv", &rows)?;
    Ok(rows)
}

/// Runs the property suite; the boolean is true iff every property held.
pub fn cmd_verify(seed: u64) -> (Vec<PropertyResult>, bool) {
    let results = verify::run_all(seed);
    let ok = results.iter().all(|r| r.passed);
    (results, ok)
}

/// Generates the world of `cfg` and writes `world.json`.
pub fn cmd_world_gen(cfg: &RunConfig, out: &Path) -> anyhow::Result<World> {
    cfg.world.validate()?;
    let cfg = cfg.clone().resolve();
    let world = make_world(&cfg.world).context("stage worldgen")?;
    ArtifactDir::create(out, &cfg)?.write_json("world.json", "world", &world)?;
    Ok(world)
}

fn read_doc<T: serde::de::DeserializeOwned>(dir: &Path, name: &str, kind: &str) -> anyhow::Result<Envelope<T>> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    from_document(kind, &text).with_context(|| format!("parsing {}", path.display()))
}

/// Re-runs policy optimization and evaluation from the world and reward
/// files of a pipeline run, writing `report.csv` and `policies.json` to `out`.
/// The configuration is taken from the world file's provenance.
pub fn cmd_eval(run_dir: &Path, out: &Path) -> anyhow::Result<Vec<pipeline::ReportRow>> {
    let world: Envelope<World> = read_doc(run_dir, "world.json", "world")?;
    let proxy: Envelope<RewardTable> = read_doc(run_dir, "proxy_reward.json", "reward")?;
    let pet: Envelope<RewardTable> = read_doc(run_dir, "pet_reward.json", "reward")?;
    let cfg: RunConfig =
        serde_json::from_value(world.provenance["config"].clone()).context("reading config from world.json")?;
    let (policies, rows) = evaluate_all(&cfg, &world.data, &proxy.data, &pet.data)?;
    let art = ArtifactDir::create(out, &cfg)?;
    art.write_json("policies.json", "policies", &policies)?;
    art.write_csv("report.csv", &rows)?;
    Ok(rows)
}
