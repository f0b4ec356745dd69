use std::path::Path;

use anyhow::Context;
use petbench_core::pet::PessimismCertificate;
use petbench_core::policyopt::{evaluate_policy, optimize, EvalRow};
use petbench_core::rewardmodel::ProxyFit;
use petbench_core::theory::{bound_report, coverage_coefficient, BoundReport};
use petbench_core::{
    make_world, pessimism_certificate, pet_finetune, rs_policy, sample_dataset, train_proxy, PetRun, PreferenceDataset,
    RewardTable, TabularPolicy, World,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactDir;
use crate::config::RunConfig;

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub method: String,
    pub reward_model: String,
    pub eta: f64,
    #[serde(rename = "V_true")]
    pub v_true: f64,
    #[serde(rename = "V_proxy")]
    pub v_proxy: f64,
    #[serde(rename = "V_pet")]
    pub v_pet: f64,
    /// KL to the reference policy, `NA` when the policy leaves its support.
    #[serde(rename = "KL")]
    pub kl: String,
}

impl ReportRow {
    pub fn new(scenario: &str, method: &str, reward_model: &str, eta: f64, e: &EvalRow) -> Self {
        Self {
            scenario: scenario.to_string(),
            method: method.to_string(),
            reward_model: reward_model.to_string(),
            eta,
            v_true: e.v_true,
            v_proxy: e.v_proxy,
            v_pet: e.v_pet,
            kl: e.kl_to_ref.map_or_else(|| "NA".to_string(), |k| k.to_string()),
        }
    }

    pub fn kl_value(&self) -> Option<f64> {
        self.kl.parse().ok()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyRecord {
    pub reward_model: String,
    pub method: String,
    pub eta: f64,
    pub policy: TabularPolicy,
}

pub struct PipelineOutput {
    /// Configuration with stage seeds resolved.
    pub config: RunConfig,
    pub world: World,
    pub data: PreferenceDataset,
    pub proxy: ProxyFit,
    pub pet: PetRun,
    pub policies: Vec<PolicyRecord>,
    pub rows: Vec<ReportRow>,
    pub certificate: PessimismCertificate,
    pub bound: BoundReport,
}

#[derive(Serialize)]
struct TraceRow {
    t: usize,
    pess_loss: f64,
    pred_loss: f64,
    value_gap: f64,
}

/// Policy-optimization stage: every optimizer on both reward models.
pub fn evaluate_all(
    cfg: &RunConfig,
    world: &World,
    proxy: &RewardTable,
    pet: &RewardTable,
) -> anyhow::Result<(Vec<PolicyRecord>, Vec<ReportRow>)> {
    let mut policies = Vec::new();
    let mut rows = Vec::new();
    for (i, opt) in cfg.opt.iter().enumerate() {
        for (name, r) in [("proxy", proxy), ("pet", pet)] {
            let pi = optimize(r, world, opt).with_context(|| format!("stage policyopt: opt[{i}] on {name}"))?;
            let e = evaluate_policy(&pi, world, proxy, pet).context("stage eval")?;
            rows.push(ReportRow::new(&cfg.scenario, opt.method.name(), name, opt.eta, &e));
            policies.push(PolicyRecord {
                reward_model: name.into(),
                method: opt.method.name().into(),
                eta: opt.eta,
                policy: pi,
            });
        }
    }
    Ok((policies, rows))
}

/// Runs world generation, data sampling, proxy training, PET and policy
/// optimization. With `out` set, each stage's artifacts are written as soon
/// as the stage finishes, so a failure keeps everything upstream of it.
pub fn run_pipeline(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<PipelineOutput> {
    cfg.validate().context("invalid config")?;
    let cfg = cfg.clone().resolve();
    let art = out.map(|dir| ArtifactDir::create(dir, &cfg)).transpose()?;
    let emit = |f: &dyn Fn(&ArtifactDir) -> anyhow::Result<()>| -> anyhow::Result<()> {
        match &art {
            Some(a) => f(a),
            None => Ok(()),
        }
    };

    let world = make_world(&cfg.world).context("stage worldgen")?;
    emit(&|a| a.write_json("world.json", "world", &world))?;

    let data = sample_dataset(&world, cfg.dataset_n, cfg.dataset_seed()).context("stage dataset")?;
    emit(&|a| a.write_json("dataset.json", "dataset", &data))?;

    let proxy = train_proxy(&data, world.bound(), &cfg.proxy).context("stage rewardmodel")?;
    emit(&|a| {
        a.write_json("proxy_reward.json", "reward", &proxy.reward)?;
        a.write_csv("proxy_curve.csv", &proxy.curve)
    })?;

    let pet = pet_finetune(&world, &data, &proxy.reward, &cfg.pet).context("stage pet")?;
    emit(&|a| {
        a.write_json("pet_reward.json", "reward", &pet.reward)?;
        let trace: Vec<TraceRow> = pet
            .trace
            .iter()
            .map(|s| TraceRow {
                t: s.t,
                pess_loss: s.pess_loss,
                pred_loss: s.pred_loss,
                value_gap: s.value_gap,
            })
            .collect();
        a.write_csv("pet_trace.csv", &trace)
    })?;

    let certificate =
        pessimism_certificate(&pet.reward, &proxy.reward, &world, &data, cfg.rs_n).context("stage pet")?;
    emit(&|a| a.write_json("certificate.json", "certificate", &certificate))?;

    let challenger_policy = rs_policy(&world.pi0, &world.true_reward, cfg.rs_n).context("stage theory")?;
    let coverage = coverage_coefficient(&challenger_policy, &world, cfg.coverage_starts, cfg.coverage_seed())
        .context("stage theory")?;
    let bound = bound_report(
        &world,
        &pet.reward,
        &world.true_reward,
        cfg.rs_n,
        cfg.dataset_n,
        cfg.delta,
        &coverage,
    )
    .context("stage theory")?;
    emit(&|a| a.write_json("bound_report.json", "bound_report", &bound))?;

    let (policies, rows) = evaluate_all(&cfg, &world, &proxy.reward, &pet.reward)?;
    emit(&|a| {
        a.write_json("policies.json", "policies", &policies)?;
        a.write_csv("report.csv", &rows)
    })?;

    Ok(PipelineOutput {
        config: cfg,
        world,
        data,
        proxy,
        pet,
        policies,
        rows,
        certificate,
        bound,
    })
}
