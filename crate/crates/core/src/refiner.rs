//! Stage 2: offset regression on the Bézier proposals, per-mode
//! classification, probability fusion, the stage-2 losses and training loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    linear, linear_spec, mlp2, mlp2_spec, Adam, Grads, Graph, Init, Mat, NodeId, ParamSpec, ParamStore, Sparse,
};
use crate::sampler::{embedding_spec, plan_feature, state_embeddings, EMBED_WIDTH};
use crate::scene::{dist, GridSpec, Point};

pub const TRUNK_WIDTH: usize = 64;
pub const TRUNK_BLOCKS: usize = 2;
pub const LOC_HIDDEN: usize = 64;
pub const LOC_OUT: usize = 32;
pub const CLS_HIDDEN: usize = 32;
pub const HINGE_EPS: f64 = 0.2;
pub const ALPHA: f64 = 1.0;
pub const BETA: f64 = 1.0;
pub const GAMMA: f64 = 3.0;
pub const PLAN_FEATURE_WIDTH: usize = 3 * EMBED_WIDTH;

/// Shape of the refiner networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerDims {
    pub fine: usize,
    pub agent: usize,
    pub coarse: usize,
    pub history_len: usize,
    pub t_f: usize,
}

impl RefinerDims {
    fn input(&self) -> usize {
        self.fine + self.agent + LOC_OUT
    }
}

pub fn refiner_spec(specs: &mut Vec<ParamSpec>, d: &RefinerDims) {
    mlp2_spec(specs, "refine.loc", 2 * (d.history_len + d.t_f), LOC_HIDDEN, LOC_OUT);
    linear_spec(specs, "refine.in", d.input(), TRUNK_WIDTH, Init::Glorot(1.0));
    for b in 0..TRUNK_BLOCKS {
        linear_spec(
            specs,
            &format!("refine.block{b}.0"),
            TRUNK_WIDTH,
            TRUNK_WIDTH,
            Init::Glorot(1.0),
        );
        linear_spec(
            specs,
            &format!("refine.block{b}.1"),
            TRUNK_WIDTH,
            TRUNK_WIDTH,
            Init::Glorot(0.5),
        );
    }
    linear_spec(specs, "refine.reg", TRUNK_WIDTH, 2 * d.t_f, Init::Zero);
    linear_spec(
        specs,
        "refine.cls.0",
        TRUNK_WIDTH + PLAN_FEATURE_WIDTH,
        CLS_HIDDEN,
        Init::Glorot(1.0),
    );
    linear_spec(specs, "refine.cls.1", CLS_HIDDEN, 1, Init::Zero);
    embedding_spec(specs, d.coarse);
}

pub fn refiner_store(d: &RefinerDims, seed: u64) -> ParamStore {
    let mut specs = Vec::new();
    refiner_spec(&mut specs, d);
    ParamStore::init(&specs, seed)
}

/// Everything stage 2 needs about one mode; all of it comes from the frozen
/// stage-1 pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeInput {
    pub proposal: Vec<Point>,
    /// Fine-grid features pooled along `[history, proposal]`.
    pub pooled: Vec<f64>,
    /// Representative plan: coarse cells, their coarse features and rewards.
    pub plan_cells: Vec<usize>,
    pub plan_coarse: Vec<Vec<f64>>,
    pub plan_reward: Vec<f64>,
    pub p_mcmc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerContext {
    /// Target agent feature after fusion.
    pub h0: Vec<f64>,
    pub history: Vec<Point>,
    pub coarse_side: usize,
    pub modes: Vec<ModeInput>,
}

/// Averaging operator over the nearest fine cells of each trajectory point.
/// Points outside the grid count towards the length but add nothing.
pub fn trajectory_pool_operator(trajectories: &[Vec<Point>], grid: GridSpec) -> Sparse {
    let mut op = Sparse::new(trajectories.len(), grid.num_cells());
    for (k, traj) in trajectories.iter().enumerate() {
        if traj.is_empty() {
            continue;
        }
        let w = 1.0 / traj.len() as f64;
        let row = &mut op.entries[k];
        for p in traj {
            if let Some((r, c)) = grid.cell_of(*p) {
                row.push((grid.index(r, c), w));
            }
        }
    }
    op
}

/// Pooled fine features for each `history ++ proposal` trajectory.
pub fn pool_fine_features(fine: &Mat, grid: GridSpec, history: &[Point], proposals: &[Vec<Point>]) -> Vec<Vec<f64>> {
    let complete: Vec<Vec<Point>> = proposals
        .iter()
        .map(|p| history.iter().chain(p).copied().collect())
        .collect();
    let pooled = trajectory_pool_operator(&complete, grid).apply(fine);
    (0..proposals.len()).map(|k| pooled.row(k).to_vec()).collect()
}

fn location_input(history: &[Point], proposals: &[Vec<Point>]) -> Mat {
    let rows: Vec<Vec<f64>> = proposals
        .iter()
        .map(|p| {
            history
                .iter()
                .chain(p)
                .flat_map(|q| [q[0] / 25.0, q[1] / 25.0])
                .collect()
        })
        .collect();
    Mat::from_rows(&rows)
}

/// Per-mode input row `[pooled fine features, h0, loc(trajectory)]`.
pub fn gather_fine_features(g: &mut Graph, store: &ParamStore, ctx: &RefinerContext) -> Result<NodeId> {
    let k = ctx.modes.len();
    if k == 0 {
        return Err(Error::contract("refiner needs at least one proposal"));
    }
    let proposals: Vec<Vec<Point>> = ctx.modes.iter().map(|m| m.proposal.clone()).collect();
    let loc_in = location_input(&ctx.history, &proposals);
    let want = store.get("refine.loc.0.w").map_or(0, |w| w.rows);
    if loc_in.cols != want {
        return Err(Error::contract(format!(
            "complete trajectory has {} coordinates, refiner expects {want}",
            loc_in.cols
        )));
    }
    let pooled = Mat::from_rows(&ctx.modes.iter().map(|m| m.pooled.clone()).collect::<Vec<_>>());
    let pooled = g.leaf(pooled);
    let h0 = g.leaf(Mat::from_vec(1, ctx.h0.len(), ctx.h0.clone()));
    let h0 = g.broadcast(h0, k);
    let loc_in = g.leaf(loc_in);
    let loc = mlp2(g, store, "refine.loc", loc_in);
    let loc = g.relu(loc);
    Ok(g.concat(&[pooled, h0, loc]))
}

#[derive(Debug, Clone, Copy)]
pub struct RefinerNodes {
    /// `K × 2·t_f` offsets, `(x, y)` interleaved.
    pub offsets: NodeId,
    /// `K × 1` classification logits.
    pub logits: NodeId,
}

pub fn refiner_forward(g: &mut Graph, store: &ParamStore, ctx: &RefinerContext) -> Result<RefinerNodes> {
    let x = gather_fine_features(g, store, ctx)?;
    let h = linear(g, store, "refine.in", x);
    let mut h = g.relu(h);
    for b in 0..TRUNK_BLOCKS {
        let u = linear(g, store, &format!("refine.block{b}.0"), h);
        let u = g.relu(u);
        let u = linear(g, store, &format!("refine.block{b}.1"), u);
        let s = g.add(h, u);
        h = g.relu(s);
    }
    let offsets = linear(g, store, "refine.reg", h);

    let mut feats = Vec::with_capacity(ctx.modes.len());
    for m in &ctx.modes {
        let coarse = g.leaf(Mat::from_rows(&m.plan_coarse));
        let e = state_embeddings(g, store, coarse, &m.plan_reward, &m.plan_cells, ctx.coarse_side);
        let rows: Vec<usize> = (0..m.plan_cells.len()).collect();
        feats.push(plan_feature(g, e, &rows)?);
    }
    let plan = stack_rows(g, &feats);
    let c = g.concat(&[h, plan]);
    let c = linear(g, store, "refine.cls.0", c);
    let c = g.relu(c);
    let logits = linear(g, store, "refine.cls.1", c);
    Ok(RefinerNodes { offsets, logits })
}

/// Stack single-row nodes vertically.
fn stack_rows(g: &mut Graph, rows: &[NodeId]) -> NodeId {
    let width = g.value(rows[0]).cols;
    let n = rows.len();
    // Each row is scattered into its slot by a one-hot aggregation and summed.
    let mut acc: Option<NodeId> = None;
    for (i, &r) in rows.iter().enumerate() {
        let mut op = Sparse::new(n, 1);
        op.entries[i].push((0, 1.0));
        let placed = g.aggregate(r, Arc::new(op));
        acc = Some(match acc {
            None => placed,
            Some(a) => g.add(a, placed),
        });
    }
    debug_assert_eq!(g.value(acc.unwrap()).cols, width);
    acc.expect("at least one row")
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `P(i) ∝ P_cls(i)·P_mcmc(i)`; falls back to `P_cls` when every product is zero.
pub fn fuse_probabilities(p_cls: &[f64], p_mcmc: &[f64]) -> Result<Vec<f64>> {
    if p_cls.len() != p_mcmc.len() || p_cls.is_empty() {
        return Err(Error::contract(format!(
            "fusion needs equal non-empty lengths (got {} and {})",
            p_cls.len(),
            p_mcmc.len()
        )));
    }
    // Equal weights cancel; skip the renormalisation so the identity is exact.
    if p_mcmc[0] > 0.0 && p_mcmc.iter().all(|&m| m == p_mcmc[0]) {
        return Ok(p_cls.to_vec());
    }
    let prod: Vec<f64> = p_cls.iter().zip(p_mcmc).map(|(a, b)| a * b).collect();
    let z: f64 = prod.iter().sum();
    if z <= 0.0 {
        tracing::warn!("all fused products are zero; using classification probabilities");
        return Ok(p_cls.to_vec());
    }
    Ok(prod.iter().map(|v| v / z).collect())
}

pub fn huber(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn huber_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Index of the prediction whose endpoint is closest to the ground-truth
/// endpoint; ties go to the lowest index.
pub fn select_wta(predictions: &[Vec<Point>], gt: &[Point]) -> usize {
    let end = *gt.last().expect("non-empty ground truth");
    let mut best = (0, f64::INFINITY);
    for (k, p) in predictions.iter().enumerate() {
        let d = dist(*p.last().expect("non-empty prediction"), end);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// `(1/t_f) Σ huber(‖ŷ_i − y_i‖)`.
pub fn trajectory_huber(pred: &[Point], gt: &[Point]) -> f64 {
    pred.iter().zip(gt).map(|(p, q)| huber(dist(*p, *q))).sum::<f64>() / gt.len() as f64
}

/// `(L_reg^P, L_reg^T, L_reg^G)` for the selected mode.
pub fn regression_losses(
    predictions: &[Vec<Point>],
    proposals: &[Vec<Point>],
    gt: &[Point],
    k: usize,
) -> Result<(f64, f64, f64)> {
    for t in predictions.iter().chain(proposals) {
        if t.len() != gt.len() {
            return Err(Error::contract(format!(
                "trajectory has {} points, ground truth {}",
                t.len(),
                gt.len()
            )));
        }
    }
    let l_p = trajectory_huber(&proposals[k], gt);
    let l_t = trajectory_huber(&predictions[k], gt);
    let l_g = huber(dist(predictions[k][gt.len() - 1], gt[gt.len() - 1]));
    Ok((l_p, l_t, l_g))
}

/// `(1/(K−1)) Σ_{k≠k*} max(P(k) − P(k*) + ε, 0)`; zero for a single mode.
pub fn hinge_loss(p: &[f64], k_star: usize, eps: f64) -> f64 {
    let k = p.len();
    if k <= 1 {
        return 0.0;
    }
    let s: f64 = (0..k)
        .filter(|&i| i != k_star)
        .map(|i| (p[i] - p[k_star] + eps).max(0.0))
        .sum();
    s / (k - 1) as f64
}

/// Gradient of the hinge loss with respect to the pre-softmax logits.
pub fn hinge_logit_grad(p: &[f64], k_star: usize, eps: f64) -> Vec<f64> {
    let k = p.len();
    if k <= 1 {
        return vec![0.0; k];
    }
    let scale = 1.0 / (k - 1) as f64;
    let mut dp = vec![0.0; k];
    for i in (0..k).filter(|&i| i != k_star) {
        if p[i] - p[k_star] + eps > 0.0 {
            dp[i] += scale;
            dp[k_star] -= scale;
        }
    }
    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
    p.iter().zip(&dp).map(|(pi, gi)| pi * (gi - dot)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPrediction {
    pub trajectories: Vec<Vec<Point>>,
    pub p_cls: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_t: f64,
    pub l_g: f64,
    pub l_cls: f64,
    pub total: f64,
    pub k_star: usize,
}

fn apply_offsets(ctx: &RefinerContext, offsets: &Mat) -> Vec<Vec<Point>> {
    ctx.modes
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let row = offsets.row(k);
            m.proposal
                .iter()
                .enumerate()
                .map(|(i, p)| [p[0] + row[2 * i], p[1] + row[2 * i + 1]])
                .collect()
        })
        .collect()
}

pub fn refine(store: &ParamStore, ctx: &RefinerContext) -> Result<RefinedPrediction> {
    let mut g = Graph::new();
    let nodes = refiner_forward(&mut g, store, ctx)?;
    let trajectories = apply_offsets(ctx, g.value(nodes.offsets));
    let p_cls = softmax(&g.value(nodes.logits).data);
    let p_mcmc: Vec<f64> = ctx.modes.iter().map(|m| m.p_mcmc).collect();
    let p = fuse_probabilities(&p_cls, &p_mcmc)?;
    Ok(RefinedPrediction { trajectories, p_cls, p })
}

/// Total stage-2 loss on one scenario and its parameter gradients.
pub fn refiner_loss(store: &ParamStore, ctx: &RefinerContext, gt: &[Point]) -> Result<(LossReport, Grads)> {
    let mut g = Graph::new();
    let nodes = refiner_forward(&mut g, store, ctx)?;
    let preds = apply_offsets(ctx, g.value(nodes.offsets));
    let proposals: Vec<Vec<Point>> = ctx.modes.iter().map(|m| m.proposal.clone()).collect();
    let k_star = select_wta(&preds, gt);
    let (l_p, l_t, l_g) = regression_losses(&preds, &proposals, gt, k_star)?;
    let p_cls = softmax(&g.value(nodes.logits).data);
    let l_cls = hinge_loss(&p_cls, k_star, HINGE_EPS);
    let total = l_p + ALPHA * l_t + BETA * l_g + GAMMA * l_cls;

    let t_f = gt.len();
    let mut d_off = Mat::zeros(ctx.modes.len(), 2 * t_f);
    let row = d_off.row_mut(k_star);
    for i in 0..t_f {
        let p = preds[k_star][i];
        let d = dist(p, gt[i]);
        if d > 0.0 {
            let mut w = ALPHA * huber_grad(d) / (t_f as f64 * d);
            if i == t_f - 1 {
                w += BETA * huber_grad(d) / d;
            }
            row[2 * i] += w * (p[0] - gt[i][0]);
            row[2 * i + 1] += w * (p[1] - gt[i][1]);
        }
    }
    let dz: Vec<f64> = hinge_logit_grad(&p_cls, k_star, HINGE_EPS)
        .iter()
        .map(|v| GAMMA * v)
        .collect();
    let grads = g.backward(&[(nodes.offsets, d_off), (nodes.logits, Mat::from_vec(dz.len(), 1, dz))]);
    Ok((
        LossReport {
            l_p,
            l_t,
            l_g,
            l_cls,
            total,
            k_star,
        },
        grads,
    ))
}

/// One stage-2 training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerSample {
    pub id: String,
    pub ctx: RefinerContext,
    pub gt: Vec<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip: f64,
}

impl Default for RefineTrainConfig {
    fn default() -> Self {
        RefineTrainConfig {
            epochs: 60,
            lr: 2e-3,
            batch: 16,
            seed: 0,
            clip: 10.0,
        }
    }
}

/// One row of the stage-2 log (means over the step's batch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineLogRow {
    pub step: usize,
    pub l_p: f64,
    pub l_t: f64,
    pub l_g: f64,
    pub l_cls: f64,
    pub total: f64,
}

pub const REFINE_LOG_HEADER: &str = "step,L_reg_P,L_reg_T,L_reg_G,L_cls,total";

impl RefineLogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_p, self.l_t, self.l_g, self.l_cls, self.total
        )
    }
}

/// Mini-batch Adam over the samples. Per-sample gradients are computed in
/// parallel and merged in batch order.
pub fn train_refiner(
    store: &mut ParamStore,
    samples: &[RefinerSample],
    cfg: &RefineTrainConfig,
    mut on_step: impl FnMut(&RefineLogRow),
) -> Result<Vec<RefineLogRow>> {
    if samples.is_empty() {
        return Err(Error::contract("stage-2 training needs at least one sample"));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr).with_clip(cfg.clip);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let results: Vec<Result<(LossReport, Grads)>> = chunk
                .par_iter()
                .map(|&i| refiner_loss(store, &samples[i].ctx, &samples[i].gt))
                .collect();
            let mut grads = Grads::default();
            let mut row = RefineLogRow {
                step,
                l_p: 0.0,
                l_t: 0.0,
                l_g: 0.0,
                l_cls: 0.0,
                total: 0.0,
            };
            for r in results {
                let (rep, gr) = r?;
                grads.merge(&gr);
                row.l_p += rep.l_p;
                row.l_t += rep.l_t;
                row.l_g += rep.l_g;
                row.l_cls += rep.l_cls;
                row.total += rep.total;
            }
            let n = chunk.len() as f64;
            grads.scale(1.0 / n);
            for v in [&mut row.l_p, &mut row.l_t, &mut row.l_g, &mut row.l_cls, &mut row.total] {
                *v /= n;
            }
            if !row.total.is_finite() {
                return Err(Error::Divergence(format!("non-finite stage-2 loss at step {step}")));
            }
            adam.step(store, &grads);
            on_step(&row);
            log.push(row);
            step += 1;
        }
    }
    Ok(log)
}
