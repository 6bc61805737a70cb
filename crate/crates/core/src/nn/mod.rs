//! Small dense networks with manual reverse-mode differentiation.

pub mod encoders;
pub mod inputs;
mod mat;
mod params;
mod tape;

pub use mat::Mat;
pub use params::{linear_spec, Adam, Checkpoint, Init, ParamSpec, ParamStore, CHECKPOINT_VERSION};
pub use tape::{sigmoid, softplus, Grads, Graph, Neighbors, NodeId, Sparse};

use serde::{Deserialize, Serialize};

/// Channel widths of the stage-1 networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    pub lane: usize,
    pub drivable: usize,
    pub agent: usize,
    pub coarse: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            lane: 32,
            drivable: 16,
            agent: 32,
            coarse: 16,
        }
    }
}

/// `x·W + b` with parameters `{prefix}.w`, `{prefix}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    let h = g.matmul(x, w);
    g.add_row(h, b)
}

/// Two linear layers with a ReLU between them (`{prefix}.0`, `{prefix}.1`).
pub fn mlp2(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let h = linear(g, store, &format!("{prefix}.0"), x);
    let h = g.relu(h);
    linear(g, store, &format!("{prefix}.1"), h)
}

pub fn mlp2_spec(specs: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize, output: usize) {
    linear_spec(specs, &format!("{prefix}.0"), input, hidden, Init::Glorot(1.0));
    linear_spec(specs, &format!("{prefix}.1"), hidden, output, Init::Glorot(1.0));
}

/// Worst relative error between an analytic gradient and central finite
/// differences of `loss` over every scalar of `store` (or the first `limit`
/// scalars of each tensor). The denominator is floored at `1e-6` so that
/// entries that are both ~0 do not dominate.
pub fn gradcheck(
    store: &ParamStore,
    analytic: &Grads,
    eps: f64,
    limit: Option<usize>,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().cloned().collect();
    let mut probe = store.clone();
    for name in names {
        let n = store.get(&name).unwrap().data.len();
        let take = limit.map_or(n, |l| l.min(n));
        for k in 0..take {
            let orig = store.get(&name).unwrap().data[k];
            probe.get_mut(&name).unwrap().data[k] = orig + eps;
            let up = loss(&probe);
            probe.get_mut(&name).unwrap().data[k] = orig - eps;
            let down = loss(&probe);
            probe.get_mut(&name).unwrap().data[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic.get(&name).map_or(0.0, |m| m.data[k]);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
