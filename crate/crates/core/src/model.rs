//! The two-stage pipeline: scenario preparation, the stage-1 reward network
//! and its IRL training loop, plan-based proposals, refinement and corpus
//! evaluation.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptor::{
    downsample, downsample_spec, pool_operator, reward_head, reward_head_spec, RewardMaps, RewardNodes,
};
use crate::bezier::{proposal_from_positions, time_parameterize, BezierCurve, DEFAULT_DEGREE};
use crate::error::{Error, Result};
use crate::irl::{demo_svf, expected_svf, irl_gradient, log_likelihood, soft_value_iteration, Mdp, SolveMode};
use crate::metrics::{MetricReport, MetricRow};
use crate::nn::encoders::{encode_scene, encoder_spec};
use crate::nn::inputs::{SceneInputs, LANE_DILATIONS};
use crate::nn::{Adam, Checkpoint, Grads, Graph, Mat, NodeId, ParamSpec, ParamStore, Sparse, Widths};
use crate::refiner::{pool_fine_features, refine, ModeInput, RefinerContext, RefinerDims, RefinerSample};
use crate::sampler::{cluster, downsample_trajectory, plan_to_polyline, sample_plans, ClusterResult, Plan};
use crate::scene::{
    demonstration_from_future, to_target_frame, Demonstration, GridSpec, Normalized, Point, Pose, Scenario,
};

/// Model hyperparameters shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Widths,
    pub history_len: usize,
    pub t_f: usize,
    pub dt: f64,
    /// Maximum number of states in a plan.
    pub horizon: usize,
    pub sweeps: usize,
    pub mode: SolveMode,
    pub pool_factor: usize,
    pub degree: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: Widths::default(),
            history_len: 20,
            t_f: 30,
            dt: 0.1,
            horizon: 25,
            sweeps: 50,
            mode: SolveMode::Stationary,
            pool_factor: 2,
            degree: DEFAULT_DEGREE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.widths;
        if [w.lane, w.drivable, w.agent, w.coarse].contains(&0) {
            return Err(Error::Config("all widths must be positive".into()));
        }
        if self.history_len < 2 || self.t_f < self.degree + 1 || self.dt <= 0.0 {
            return Err(Error::Config(format!(
                "need history_len >= 2, t_f >= degree + 1 ({}) and dt > 0",
                self.degree + 1
            )));
        }
        if self.horizon < 2 || self.pool_factor == 0 {
            return Err(Error::Config("horizon >= 2 and pool_factor >= 1 required".into()));
        }
        if self.mode == SolveMode::Stationary && self.sweeps == 0 {
            return Err(Error::Config("stationary mode needs at least one sweep".into()));
        }
        Ok(())
    }

    pub fn refiner_dims(&self) -> RefinerDims {
        RefinerDims {
            fine: self.widths.drivable,
            agent: self.widths.agent,
            coarse: self.widths.coarse,
            history_len: self.history_len,
            t_f: self.t_f,
        }
    }

    pub fn stage1_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        encoder_spec(&mut specs, &self.widths, self.history_len, &LANE_DILATIONS);
        downsample_spec(&mut specs, self.widths.drivable, self.widths.coarse);
        reward_head_spec(&mut specs, self.widths.coarse);
        specs
    }

    pub fn init_stage1(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.stage1_specs(), seed)
    }

    pub fn init_stage2(&self, seed: u64) -> ParamStore {
        crate::refiner::refiner_store(&self.refiner_dims(), seed)
    }

    pub fn save_checkpoint(&self, store: &ParamStore, path: &std::path::Path) -> Result<()> {
        Checkpoint::from_store(self.widths, store).save(path)
    }

    /// Load a stage-1 (`stage2 = false`) or stage-2 checkpoint and check it
    /// against this configuration.
    pub fn load_checkpoint(&self, path: &std::path::Path, stage2: bool) -> Result<ParamStore> {
        let ck: Checkpoint<Widths> = Checkpoint::load(path)?;
        if ck.widths != self.widths {
            return Err(Error::Checkpoint(format!(
                "{} was trained with widths {:?}, configuration has {:?}",
                path.display(),
                ck.widths,
                self.widths
            )));
        }
        let template = if stage2 {
            self.init_stage2(0)
        } else {
            self.init_stage1(0)
        };
        ck.into_store(&template)
    }

    pub fn mdp(&self, fine: GridSpec) -> Result<(Mdp, GridSpec)> {
        let coarse = fine.coarsen(self.pool_factor);
        Ok((Mdp::new(coarse.side, self.horizon)?, coarse))
    }
}

/// A scenario in the target frame with its network inputs and demonstration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub normalized: Normalized,
    pub inputs: SceneInputs,
    pub pool: Arc<Sparse>,
    pub mdp: Mdp,
    pub coarse: GridSpec,
    /// Target-frame ground truth, when present.
    pub gt: Option<Vec<Point>>,
    pub demo: Option<Demonstration>,
    /// Fine cells (target frame) blocked on top of the scenario's own mask.
    pub blocked: Vec<[usize; 2]>,
}

impl Prepared {
    pub fn scenario(&self) -> &Scenario {
        &self.normalized.scenario
    }

    pub fn target_pose(&self) -> Pose {
        self.normalized.target_pose
    }
}

/// Normalise `s` and build its inputs. `blocked` lists extra undrivable cells
/// of the scenario's own grid (before normalisation); already undrivable or
/// out-of-range cells are ignored.
pub fn prepare(s: &Scenario, blocked: &[[usize; 2]], cfg: &ModelConfig) -> Result<Prepared> {
    s.validate(cfg.history_len)?;
    let normalized = to_target_frame(s)?;
    // Only cells that were drivable change anything.
    let mut effective: Vec<[usize; 2]> = blocked
        .iter()
        .copied()
        .filter(|&[r, c]| r < s.grid_side && c < s.grid_side && s.drivable_mask.get(r, c))
        .collect();
    effective.sort_unstable();
    effective.dedup();
    let blocked_local = normalized.remap_cells(&effective);
    let pairs: Vec<(usize, usize)> = blocked_local.iter().map(|&[r, c]| (r, c)).collect();
    let inputs = SceneInputs::build(&normalized.scenario, &pairs, cfg.t_f, cfg.dt)?;
    let fine = normalized.scenario.grid();
    let pool = Arc::new(pool_operator(fine, cfg.pool_factor)?);
    let (mdp, coarse) = cfg.mdp(fine)?;
    let gt = normalized.scenario.future_points();
    let demo = match &gt {
        Some(f) if !f.is_empty() => Some(demonstration_from_future(f, coarse, cfg.horizon)?.demo),
        _ => None,
    };
    Ok(Prepared {
        id: s.id.clone(),
        normalized,
        inputs,
        pool,
        mdp,
        coarse,
        gt,
        demo,
        blocked: blocked_local,
    })
}

pub fn prepare_all(corpus: &[Scenario], cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    corpus.par_iter().map(|s| prepare(s, &[], cfg)).collect()
}

struct Stage1Nodes {
    agents: NodeId,
    fine: NodeId,
    coarse: NodeId,
    reward: RewardNodes,
}

fn stage1_graph(g: &mut Graph, store: &ParamStore, prep: &Prepared) -> Result<Stage1Nodes> {
    let fused = encode_scene(g, store, &prep.inputs)?;
    let fine = g.gather(fused.drivable, prep.inputs.cell_node.clone());
    let coarse = downsample(g, store, fine, &prep.pool)?;
    let reward = reward_head(g, store, coarse);
    Ok(Stage1Nodes {
        agents: fused.agents,
        fine,
        coarse,
        reward,
    })
}

/// Frozen stage-1 products for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Out {
    pub fine: Mat,
    pub coarse: Mat,
    pub reward: RewardMaps,
    pub h0: Vec<f64>,
}

pub fn run_stage1(store: &ParamStore, prep: &Prepared) -> Result<Stage1Out> {
    let mut g = Graph::new();
    let n = stage1_graph(&mut g, store, prep)?;
    Ok(Stage1Out {
        fine: g.value(n.fine).clone(),
        coarse: g.value(n.coarse).clone(),
        reward: RewardMaps::from_nodes(&g, n.reward, prep.coarse.side)?,
        h0: g.value(n.agents).row(0).to_vec(),
    })
}

/// Negative log-likelihood of the scenario's demonstration and its parameter
/// gradient.
pub fn irl_step(store: &ParamStore, prep: &Prepared, cfg: &ModelConfig) -> Result<(f64, Grads)> {
    let demo = prep
        .demo
        .as_ref()
        .ok_or_else(|| Error::contract(format!("scenario {} has no ground-truth future", prep.id)))?;
    let mut g = Graph::new();
    let n = stage1_graph(&mut g, store, prep)?;
    let reward = RewardMaps::from_nodes(&g, n.reward, prep.coarse.side)?;
    let (_, policy) = soft_value_iteration(&reward, &prep.mdp, cfg.mode, cfg.sweeps)?;
    let expected = expected_svf(&policy, prep.mdp.center())?;
    let demos = std::slice::from_ref(demo);
    let observed = demo_svf(demos, &prep.mdp)?;
    let grad = irl_gradient(&observed, &expected)?;
    let nll = -log_likelihood(demos, &policy)?;
    let cells = grad.d_r.len();
    let neg = |v: &[f64]| Mat::from_vec(cells, 1, v.iter().map(|x| -x).collect());
    let grads = g.backward(&[
        (n.reward.transient, neg(&grad.d_r)),
        (n.reward.terminal, neg(&grad.d_rg)),
    ]);
    Ok((nll, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrlTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip: f64,
    /// Abort after this many consecutive epochs of increasing NLL.
    pub patience: usize,
}

impl Default for IrlTrainConfig {
    fn default() -> Self {
        IrlTrainConfig {
            epochs: 40,
            lr: 1e-2,
            batch: 16,
            seed: 0,
            clip: 5.0,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlLogRow {
    pub epoch: usize,
    pub mean_nll: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub const IRL_LOG_HEADER: &str = "epoch,mean_nll,grad_norm,wall_ms";

impl IrlLogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.mean_nll, self.grad_norm, self.wall_ms)
    }
}

/// Mean demonstration NLL over `preps` under the current parameters.
pub fn mean_nll(store: &ParamStore, preps: &[Prepared], cfg: &ModelConfig) -> Result<f64> {
    let v: Vec<Result<f64>> = preps
        .par_iter()
        .map(|p| {
            let out = run_stage1(store, p)?;
            let (_, policy) = soft_value_iteration(&out.reward, &p.mdp, cfg.mode, cfg.sweeps)?;
            let demo = p
                .demo
                .as_ref()
                .ok_or_else(|| Error::contract("missing demonstration"))?;
            Ok(-log_likelihood(std::slice::from_ref(demo), &policy)?)
        })
        .collect();
    let mut s = 0.0;
    for x in v {
        s += x?;
    }
    Ok(s / preps.len().max(1) as f64)
}

/// Stage-1 training. Each epoch's NLL is the mean over its batches, measured
/// before each update; gradients of a batch are merged in scenario order.
pub fn train_irl(
    store: &mut ParamStore,
    preps: &[Prepared],
    cfg: &ModelConfig,
    tcfg: &IrlTrainConfig,
    timing: bool,
    mut on_epoch: impl FnMut(&IrlLogRow),
) -> Result<Vec<IrlLogRow>> {
    let usable: Vec<&Prepared> = preps.iter().filter(|p| p.demo.is_some()).collect();
    if usable.is_empty() {
        return Err(Error::contract("no scenario with a ground-truth future"));
    }
    if tcfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = Adam::new(tcfg.lr).with_clip(tcfg.clip);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut log: Vec<IrlLogRow> = Vec::new();
    let mut rising = 0;
    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut nll_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(tcfg.batch) {
            let results: Vec<Result<(f64, Grads)>> =
                chunk.par_iter().map(|&i| irl_step(store, usable[i], cfg)).collect();
            let mut grads = Grads::default();
            for r in results {
                let (nll, g) = r?;
                nll_sum += nll;
                grads.merge(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            norm_sum += grads.norm();
            batches += 1;
            adam.step(store, &grads);
        }
        let row = IrlLogRow {
            epoch,
            mean_nll: nll_sum / usable.len() as f64,
            grad_norm: norm_sum / batches as f64,
            wall_ms: if timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        if !row.mean_nll.is_finite() {
            return Err(Error::Divergence(format!("non-finite NLL at epoch {epoch}")));
        }
        if let Some(prev) = log.last() {
            rising = if row.mean_nll > prev.mean_nll { rising + 1 } else { 0 };
        }
        on_epoch(&row);
        log.push(row);
        if rising >= tcfg.patience {
            return Err(Error::Divergence(format!(
                "NLL rose for {rising} consecutive epochs (last {:.4}, grad norm {:.4})",
                row.mean_nll, row.grad_norm
            )));
        }
    }
    Ok(log)
}

/// Sampling and clustering options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub num_plans: usize,
    pub num_modes: usize,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            num_plans: crate::sampler::DEFAULT_L,
            num_modes: crate::sampler::DEFAULT_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeProposal {
    pub positions: Vec<Point>,
    pub curve: BezierCurve,
    /// Member plan closest to the cluster centroid.
    pub representative: Vec<usize>,
    pub p_mcmc: f64,
}

/// Everything produced between the reward maps and the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposals {
    pub plans: Vec<Plan>,
    pub clusters: ClusterResult,
    pub modes: Vec<ModeProposal>,
    /// Expected visitation under the policy (coarse grid, row-major).
    pub svf: Vec<f64>,
    pub vi_residual: f64,
    pub vi_sweeps: usize,
}

pub fn propose(out: &Stage1Out, prep: &Prepared, cfg: &ModelConfig, opts: &SampleOptions) -> Result<Proposals> {
    let (values, policy) = soft_value_iteration(&out.reward, &prep.mdp, cfg.mode, cfg.sweeps)?;
    let s_init = prep.mdp.center();
    let svf = expected_svf(&policy, s_init)?.mu;
    let plans = sample_plans(&policy, s_init, opts.num_plans, opts.seed);
    let trajectories: Vec<Vec<Point>> = plans
        .par_iter()
        .map(|p| {
            time_parameterize(
                &plan_to_polyline(&p.states, prep.coarse),
                prep.inputs.v0,
                cfg.t_f,
                cfg.dt,
            )
        })
        .collect::<Result<_>>()?;
    let clusters = cluster(&trajectories, opts.num_modes, opts.seed)?;
    let mut modes = Vec::with_capacity(clusters.k());
    for k in 0..clusters.k() {
        let members = clusters.members(k);
        let mut mean = vec![[0.0, 0.0]; cfg.t_f];
        for &i in &members {
            for (m, p) in mean.iter_mut().zip(&trajectories[i]) {
                m[0] += p[0];
                m[1] += p[1];
            }
        }
        for m in &mut mean {
            m[0] /= members.len() as f64;
            m[1] /= members.len() as f64;
        }
        let centroid = &clusters.centroids[k];
        let rep = members
            .iter()
            .copied()
            .map(|i| {
                let d: f64 = downsample_trajectory(&trajectories[i])
                    .iter()
                    .zip(centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, i)
            })
            .fold((f64::INFINITY, 0), |b, x| if x.0 < b.0 { x } else { b })
            .1;
        let prop = proposal_from_positions(&mean, cfg.degree, k)?;
        modes.push(ModeProposal {
            positions: prop.positions,
            curve: prop.curve,
            representative: plans[rep].states.clone(),
            p_mcmc: clusters.p_mcmc[k],
        });
    }
    Ok(Proposals {
        plans,
        clusters,
        modes,
        svf,
        vi_residual: values.residual,
        vi_sweeps: values.sweeps,
    })
}

pub fn refiner_context(out: &Stage1Out, prep: &Prepared, proposals: &Proposals) -> RefinerContext {
    let positions: Vec<Vec<Point>> = proposals.modes.iter().map(|m| m.positions.clone()).collect();
    let pooled = pool_fine_features(&out.fine, prep.inputs.fine, &prep.inputs.history, &positions);
    RefinerContext {
        h0: out.h0.clone(),
        history: prep.inputs.history.clone(),
        coarse_side: prep.coarse.side,
        modes: proposals
            .modes
            .iter()
            .zip(pooled)
            .map(|(m, pooled)| ModeInput {
                proposal: m.positions.clone(),
                pooled,
                plan_cells: m.representative.clone(),
                plan_coarse: m.representative.iter().map(|&s| out.coarse.row(s).to_vec()).collect(),
                plan_reward: m.representative.iter().map(|&s| out.reward.r[s]).collect(),
                p_mcmc: m.p_mcmc,
            })
            .collect(),
    }
}

/// Stage-2 training samples from frozen stage-1 parameters.
pub fn refiner_samples(
    stage1: &ParamStore,
    preps: &[Prepared],
    cfg: &ModelConfig,
    opts: &SampleOptions,
) -> Result<Vec<RefinerSample>> {
    preps
        .par_iter()
        .filter(|p| p.gt.as_ref().is_some_and(|g| g.len() == cfg.t_f))
        .map(|p| {
            let out = run_stage1(stage1, p)?;
            let props = propose(&out, p, cfg, opts)?;
            Ok(RefinerSample {
                id: p.id.clone(),
                ctx: refiner_context(&out, p, &props),
                gt: p.gt.clone().expect("filtered"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scenario_id: String,
    /// Target-frame pose in scenario coordinates.
    pub target_pose: Pose,
    pub trajectories: Vec<Vec<Point>>,
    pub probabilities: Vec<f64>,
    pub p_cls: Vec<f64>,
    pub p_mcmc: Vec<f64>,
    pub proposals: Vec<Vec<Point>>,
    pub curves: Vec<BezierCurve>,
    pub representatives: Vec<Vec<usize>>,
    pub reward: RewardMaps,
    pub svf: Vec<f64>,
    pub plans: Vec<Plan>,
    pub collapsed: bool,
    pub vi_residual: f64,
    pub vi_sweeps: usize,
    pub timing_ms: Option<f64>,
}

/// Full inference on a prepared scenario. Without stage-2 parameters the
/// proposals and their sampling proportions are returned unchanged.
pub fn predict(
    stage1: &ParamStore,
    stage2: Option<&ParamStore>,
    prep: &Prepared,
    cfg: &ModelConfig,
    opts: &SampleOptions,
    timing: bool,
) -> Result<Prediction> {
    let start = Instant::now();
    let out = run_stage1(stage1, prep)?;
    let props = propose(&out, prep, cfg, opts)?;
    let p_mcmc: Vec<f64> = props.modes.iter().map(|m| m.p_mcmc).collect();
    let proposals: Vec<Vec<Point>> = props.modes.iter().map(|m| m.positions.clone()).collect();
    let (trajectories, probabilities, p_cls) = match stage2 {
        Some(s2) => {
            let r = refine(s2, &refiner_context(&out, prep, &props))?;
            (r.trajectories, r.p, r.p_cls)
        }
        None => {
            let k = p_mcmc.len();
            (proposals.clone(), p_mcmc.clone(), vec![1.0 / k as f64; k])
        }
    };
    Ok(Prediction {
        scenario_id: prep.id.clone(),
        target_pose: prep.target_pose(),
        trajectories,
        probabilities,
        p_cls,
        p_mcmc,
        proposals,
        curves: props.modes.iter().map(|m| m.curve.clone()).collect(),
        representatives: props.modes.iter().map(|m| m.representative.clone()).collect(),
        reward: out.reward,
        svf: props.svf,
        plans: props.plans,
        collapsed: props.clusters.collapsed,
        vi_residual: props.vi_residual,
        vi_sweeps: props.vi_sweeps,
        timing_ms: timing.then(|| start.elapsed().as_secs_f64() * 1e3),
    })
}

/// Per-scenario metrics in corpus order; scenarios without a full-length
/// ground truth are skipped and counted.
pub fn evaluate(
    stage1: &ParamStore,
    stage2: Option<&ParamStore>,
    preps: &[Prepared],
    cfg: &ModelConfig,
    opts: &SampleOptions,
    timing: bool,
) -> Result<MetricReport> {
    let rows: Vec<Option<Result<MetricRow>>> = preps
        .par_iter()
        .map(|p| {
            let gt = p.gt.as_ref().filter(|g| g.len() == cfg.t_f)?;
            Some((|| {
                let pred = predict(stage1, stage2, p, cfg, opts, timing)?;
                let mut row = MetricRow::compute(&p.id, &pred.trajectories, &pred.probabilities, gt)?;
                row.wall_ms = pred.timing_ms.unwrap_or(0.0);
                Ok(row)
            })())
        })
        .collect();
    let skipped = rows.iter().filter(|r| r.is_none()).count();
    let rows: Vec<MetricRow> = rows.into_iter().flatten().collect::<Result<_>>()?;
    Ok(MetricReport::from_rows(rows, skipped))
}

/// Zero the reward head so every cell gets the same reward.
pub fn uniform_reward_ablation(stage1: &ParamStore) -> ParamStore {
    let mut s = stage1.clone();
    let names: Vec<String> = s.names().filter(|n| n.starts_with("reward.")).cloned().collect();
    for n in names {
        if let Some(m) = s.get_mut(&n) {
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scenario, GeneratorParams, ScenarioKind};

    fn small() -> ModelConfig {
        ModelConfig {
            widths: Widths {
                lane: 8,
                drivable: 4,
                agent: 8,
                coarse: 4,
            },
            ..Default::default()
        }
    }

    fn corpus(n: u64) -> Vec<Scenario> {
        (0..n)
            .map(|i| generate_scenario(ScenarioKind::TJunction, &GeneratorParams::default(), i).unwrap())
            .collect()
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let cfg = small();
        let preps = prepare_all(&corpus(2), &cfg).unwrap();
        let s1 = cfg.init_stage1(0);
        let s2 = cfg.init_stage2(0);
        let opts = SampleOptions {
            num_plans: 60,
            ..Default::default()
        };
        let p = predict(&s1, Some(&s2), &preps[0], &cfg, &opts, false).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.trajectories.iter().all(|t| t.len() == cfg.t_f));
        assert_eq!(p.reward.r.len(), 625);
        let again = predict(&s1, Some(&s2), &preps[0], &cfg, &opts, false).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn irl_gradient_matches_finite_differences_end_to_end() {
        let cfg = ModelConfig {
            mode: SolveMode::FiniteHorizon,
            ..small()
        };
        let prep = prepare(&corpus(1)[0], &[], &cfg).unwrap();
        let mut store = cfg.init_stage1(4);
        // Undrivable cells carry exact zeros; non-zero biases keep them off ReLU kinks.
        let biases: Vec<String> = store.names().filter(|n| n.ends_with(".b")).cloned().collect();
        for n in biases {
            for (i, v) in store.get_mut(&n).unwrap().data.iter_mut().enumerate() {
                *v = 0.02 + 0.01 * (i % 3) as f64;
            }
        }
        let (_, grads) = irl_step(&store, &prep, &cfg).unwrap();
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("reward.") || n.starts_with("down."))
            .cloned()
            .collect();
        let mut sub = ParamStore::default();
        for n in &names {
            sub.insert(n.clone(), store.get(n).unwrap().clone());
        }
        let err = crate::nn::gradcheck(&sub, &grads, 1e-5, Some(6), |s| {
            let mut full = store.clone();
            for n in &names {
                *full.get_mut(n).unwrap() = s.get(n).unwrap().clone();
            }
            irl_step(&full, &prep, &cfg).unwrap().0
        });
        assert!(err <= 1e-3, "relative error {err}");
    }

    #[test]
    fn zero_lr_and_determinism() {
        let cfg = small();
        let preps = prepare_all(&corpus(3), &cfg).unwrap();
        let mut a = cfg.init_stage1(1);
        let before = a.clone();
        let t = IrlTrainConfig {
            epochs: 2,
            lr: 0.0,
            batch: 2,
            ..Default::default()
        };
        train_irl(&mut a, &preps, &cfg, &t, false, |_| {}).unwrap();
        for (n, m) in before.iter() {
            assert_eq!(a.get(n).unwrap(), m);
        }
        let t = IrlTrainConfig { lr: 1e-2, ..t };
        let mut b = cfg.init_stage1(1);
        let mut c = cfg.init_stage1(1);
        let lb = train_irl(&mut b, &preps, &cfg, &t, false, |_| {}).unwrap();
        let lc = train_irl(&mut c, &preps, &cfg, &t, false, |_| {}).unwrap();
        assert_eq!(lb, lc);
        for (n, m) in b.iter() {
            assert_eq!(c.get(n).unwrap(), m);
        }
    }

    #[test]
    fn ablation_reward_is_uniform() {
        let cfg = small();
        let prep = prepare(&corpus(1)[0], &[], &cfg).unwrap();
        let s = uniform_reward_ablation(&cfg.init_stage1(3));
        let out = run_stage1(&s, &prep).unwrap();
        assert!(out.reward.r.iter().all(|&v| v == out.reward.r[0]));
    }
}
