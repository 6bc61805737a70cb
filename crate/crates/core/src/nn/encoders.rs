//! Lane, drivable-area and agent encoders plus the agent–map fusion rounds.

use std::sync::Arc;

use super::inputs::{LaneAdjacency, SceneInputs, DRIVABLE_RAW};
use super::{
    linear, linear_spec, mlp2, mlp2_spec, Graph, Init, Neighbors, NodeId, ParamSpec, ParamStore, Sparse, Widths,
};
use crate::error::{Error, Result};

pub fn lane_node_spec(specs: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    mlp2_spec(specs, &format!("{prefix}.psi1"), 2, width, width);
    mlp2_spec(specs, &format!("{prefix}.psi2"), 2, width, width);
}

/// `u_i = ψ1(Δv_i) + ψ2(v_i)`.
pub fn encode_lane_nodes(g: &mut Graph, store: &ParamStore, prefix: &str, disp: NodeId, pos: NodeId) -> NodeId {
    let a = mlp2(g, store, &format!("{prefix}.psi1"), disp);
    let b = mlp2(g, store, &format!("{prefix}.psi2"), pos);
    g.add(a, b)
}

pub fn lane_conv_spec(specs: &mut Vec<ParamSpec>, prefix: &str, width: usize, dilations: &[usize]) {
    let gain = 1.0 / ((2 * dilations.len() + 3) as f64).sqrt();
    for d in dilations {
        specs.push(ParamSpec::new(
            format!("{prefix}.pre{d}"),
            width,
            width,
            Init::Glorot(gain),
        ));
        specs.push(ParamSpec::new(
            format!("{prefix}.suc{d}"),
            width,
            width,
            Init::Glorot(gain),
        ));
    }
    for name in ["left", "right", "self"] {
        specs.push(ParamSpec::new(
            format!("{prefix}.{name}"),
            width,
            width,
            Init::Glorot(gain),
        ));
    }
}

/// Multi-scale dilated lane convolution, optionally followed by a ReLU.
pub fn lane_conv(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    u: NodeId,
    adj: &LaneAdjacency,
    activate: bool,
) -> Result<NodeId> {
    let n = g.value(u).rows;
    let ops = adj.pre.iter().chain(&adj.suc).chain([&adj.left, &adj.right]);
    for op in ops {
        if op.rows != n || op.cols != n {
            return Err(Error::contract(format!(
                "lane adjacency is {}x{}, features have {n} rows",
                op.rows, op.cols
            )));
        }
    }
    if adj.pre.len() != adj.dilations.len() || adj.suc.len() != adj.dilations.len() {
        return Err(Error::contract("one pre/suc operator per dilation required"));
    }
    let theta0 = g.param(store, &format!("{prefix}.self"));
    let mut out = g.matmul(u, theta0);
    let term = |g: &mut Graph, op: &Arc<Sparse>, name: String, out: NodeId| -> NodeId {
        if op.is_empty() {
            return out;
        }
        let agg = g.aggregate(u, op.clone());
        let w = g.param(store, &name);
        let t = g.matmul(agg, w);
        g.add(out, t)
    };
    for (k, d) in adj.dilations.iter().enumerate() {
        out = term(g, &adj.pre[k], format!("{prefix}.pre{d}"), out);
        out = term(g, &adj.suc[k], format!("{prefix}.suc{d}"), out);
    }
    out = term(g, &adj.left, format!("{prefix}.left"), out);
    out = term(g, &adj.right, format!("{prefix}.right"), out);
    Ok(if activate { g.relu(out) } else { out })
}

pub fn drivable_spec(specs: &mut Vec<ParamSpec>, prefix: &str, input: usize, width: usize) {
    linear_spec(specs, &format!("{prefix}.shared"), input, width, Init::Glorot(1.0));
    linear_spec(
        specs,
        &format!("{prefix}.fuse"),
        input + width,
        width,
        Init::Glorot(1.0),
    );
}

/// PointNet-style block: shared perceptron on neighbours, max-pool, concatenate
/// with the node's own feature, fusion perceptron.
pub fn encode_drivable(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId, nbrs: &Neighbors) -> NodeId {
    let s = linear(g, store, &format!("{prefix}.shared"), x);
    let s = g.relu(s);
    let pooled = g.max_pool(s, nbrs);
    let cat = g.concat(&[x, pooled]);
    let f = linear(g, store, &format!("{prefix}.fuse"), cat);
    g.relu(f)
}

pub fn agent_spec(specs: &mut Vec<ParamSpec>, prefix: &str, input: usize, width: usize) {
    mlp2_spec(specs, prefix, input, width, width);
}

/// Two-layer perceptron over the flattened history; agents flagged invalid
/// get the zero vector.
pub fn encode_agent_history(g: &mut Graph, store: &ParamStore, prefix: &str, raw: NodeId, valid: &[bool]) -> NodeId {
    let h = mlp2(g, store, prefix, raw);
    let h = g.relu(h);
    if valid.iter().all(|&v| v) {
        return h;
    }
    let index = valid.iter().enumerate().map(|(i, &v)| v.then_some(i)).collect();
    g.gather(h, Arc::new(index))
}

pub fn fusion_spec(specs: &mut Vec<ParamSpec>, prefix: &str, w: &Widths, dilations: &[usize]) {
    linear_spec(specs, &format!("{prefix}.a2l"), w.agent, w.lane, Init::Glorot(0.5));
    lane_conv_spec(specs, &format!("{prefix}.l2l"), w.lane, dilations);
    linear_spec(specs, &format!("{prefix}.l2d"), w.lane, w.drivable, Init::Glorot(0.5));
    drivable_spec(specs, &format!("{prefix}.d2d"), w.drivable, w.drivable);
    linear_spec(specs, &format!("{prefix}.l2a"), w.lane, w.agent, Init::Glorot(0.5));
    linear_spec(specs, &format!("{prefix}.a2a"), w.agent, w.agent, Init::Glorot(0.5));
}

/// `x + relu(Agg(y)·W + b)`; a no-op when the aggregation is empty.
fn message(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId, y: NodeId, agg: &Arc<Sparse>) -> NodeId {
    if agg.is_empty() {
        return x;
    }
    let m = g.aggregate(y, agg.clone());
    let m = linear(g, store, name, m);
    let m = g.relu(m);
    g.add(x, m)
}

#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub agents: NodeId,
    pub lanes: NodeId,
    pub drivable: NodeId,
}

/// One round each of A2L, L2L, L2D, D2D, L2A, A2A with residual updates.
/// Without lanes only the D2D and A2A rounds run.
pub fn fuse_features(g: &mut Graph, store: &ParamStore, prefix: &str, inputs: &SceneInputs, c: Fused) -> Result<Fused> {
    let Fused {
        agents: mut ca,
        lanes: mut cl,
        drivable: mut cd,
    } = c;
    let has_lanes = inputs.num_lane_nodes() > 0;
    if has_lanes {
        cl = message(g, store, &format!("{prefix}.a2l"), cl, ca, &inputs.a2l);
        let conv = lane_conv(g, store, &format!("{prefix}.l2l"), cl, &inputs.lane_adj, true)?;
        cl = g.add(cl, conv);
        cd = message(g, store, &format!("{prefix}.l2d"), cd, cl, &inputs.l2d);
    }
    if inputs.num_drivable() > 0 {
        let d2d = encode_drivable(g, store, &format!("{prefix}.d2d"), cd, &inputs.drivable_nbrs);
        cd = g.add(cd, d2d);
    }
    if has_lanes {
        ca = message(g, store, &format!("{prefix}.l2a"), ca, cl, &inputs.l2a);
    }
    ca = message(g, store, &format!("{prefix}.a2a"), ca, ca, &inputs.a2a);
    Ok(Fused {
        agents: ca,
        lanes: cl,
        drivable: cd,
    })
}

/// Parameter specs of the whole stage-1 encoder stack.
pub fn encoder_spec(specs: &mut Vec<ParamSpec>, w: &Widths, history_len: usize, dilations: &[usize]) {
    lane_node_spec(specs, "lane", w.lane);
    lane_conv_spec(specs, "lane.conv", w.lane, dilations);
    linear_spec(specs, "drivable.embed", DRIVABLE_RAW, w.drivable, Init::Glorot(1.0));
    drivable_spec(specs, "drivable.pointda", w.drivable, w.drivable);
    agent_spec(specs, "agent", 4 * history_len, w.agent);
    fusion_spec(specs, "fuse", w, dilations);
}

/// Full encoder forward pass; returns fused features.
pub fn encode_scene(g: &mut Graph, store: &ParamStore, inputs: &SceneInputs) -> Result<Fused> {
    let n_l = inputs.num_lane_nodes();
    let lanes = if n_l > 0 {
        let disp = g.leaf(inputs.lane_disp.clone());
        let pos = g.leaf(inputs.lane_xy.clone());
        let u = encode_lane_nodes(g, store, "lane", disp, pos);
        lane_conv(g, store, "lane.conv", u, &inputs.lane_adj, true)?
    } else {
        let width = store
            .get("lane.conv.self")
            .ok_or_else(|| Error::Checkpoint("missing lane.conv.self".into()))?
            .cols;
        g.leaf(super::Mat::zeros(0, width))
    };
    let raw = g.leaf(inputs.drivable_raw.clone());
    let d0 = linear(g, store, "drivable.embed", raw);
    let d0 = g.relu(d0);
    let drivable = encode_drivable(g, store, "drivable.pointda", d0, &inputs.drivable_nbrs);
    let araw = g.leaf(inputs.agent_raw.clone());
    let agents = encode_agent_history(g, store, "agent", araw, &inputs.agent_valid);
    fuse_features(
        g,
        store,
        "fuse",
        inputs,
        Fused {
            agents,
            lanes,
            drivable,
        },
    )
}
