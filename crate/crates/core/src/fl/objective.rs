use super::bt::{bt_loss_node, cross_corr_node};
use super::{Algorithm, FlConfig};
use crate::error::{Error, Result};
use crate::models::{self, Bound, ModelSpec, ModelWeights};
use crate::numerics::{Graph, NodeId, ParamSet, Tensor};

/// Loss components of one batch. `bt` is zero for the baselines.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub sup: f64,
    pub bt: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluated {
    pub parts: LossParts,
    pub grads: ParamSet,
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn sup_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let lp = g.log_softmax(x)?;
    let l = g.nll(lp, labels)?;
    g.value(l).item()
}

/// The built objective graph with handles to its parts.
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub sup: NodeId,
    pub bt: Option<NodeId>,
}

impl ObjectiveGraph {
    pub fn evaluate(self) -> Result<Evaluated> {
        let g = &self.graph;
        let grads = g.backward(self.total)?;
        Ok(Evaluated {
            parts: LossParts {
                sup: g.value(self.sup).item()?,
                bt: match self.bt {
                    Some(b) => g.value(b).item()?,
                    None => 0.0,
                },
                total: g.value(self.total).item()?,
            },
            grads,
        })
    }
}

fn check_batch(x: &Tensor, labels: &[usize]) -> Result<()> {
    match x.shape().first() {
        Some(&b) if b == labels.len() && b > 0 => Ok(()),
        _ => Err(Error::contract(format!(
            "batch of shape {:?} with {} labels",
            x.shape(),
            labels.len()
        ))),
    }
}

/// `L_sup(w; x, y) + μ · L_BT(C(z_local, z_glob))`, where `z_glob` comes from the
/// frozen global model and receives no gradient. With `μ = 0` the BT branch is
/// not built at all.
#[allow(clippy::too_many_arguments)]
pub fn fl_bt_graph(
    spec: &ModelSpec,
    local: &ModelWeights,
    global: &ModelWeights,
    x: &Tensor,
    labels: &[usize],
    mu: f64,
    lambda: f64,
    centered: bool,
) -> Result<ObjectiveGraph> {
    check_batch(x, labels)?;
    if mu > 0.0 && labels.len() < 2 {
        return Err(Error::contract("the Barlow Twins term needs batches of at least 2"));
    }
    let mut g = Graph::new();
    let w = Bound::new(&mut g, local, true)?;
    let input = models::input_node(&mut g, spec, x)?;
    let rep = models::encode_node(&mut g, spec, &w, input)?;
    let logits = models::classify_node(&mut g, spec, &w, rep)?;
    let lp = g.log_softmax(logits)?;
    let sup = g.nll(lp, labels)?;
    if mu == 0.0 {
        return Ok(ObjectiveGraph { graph: g, total: sup, sup, bt: None });
    }
    let z_local = models::project_node(&mut g, spec, &w, rep)?;
    let z_glob = models::project(spec, &models::encode(spec, x, global)?, global)?;
    let z_glob = g.constant(z_glob);
    let corr = cross_corr_node(&mut g, z_local, z_glob, centered)?;
    let bt = bt_loss_node(&mut g, corr, lambda)?;
    let weighted = g.scale(bt, mu)?;
    let total = g.add(sup, weighted)?;
    Ok(ObjectiveGraph { graph: g, total, sup, bt: Some(bt) })
}

/// Plain cross-entropy, plus the proximal term `(ρ/2)‖w − w_g‖²` over every
/// parameter when `rho > 0`.
pub fn baseline_graph(
    spec: &ModelSpec,
    local: &ModelWeights,
    global: &ModelWeights,
    x: &Tensor,
    labels: &[usize],
    rho: f64,
) -> Result<ObjectiveGraph> {
    check_batch(x, labels)?;
    let mut g = Graph::new();
    let w = Bound::new(&mut g, local, true)?;
    let input = models::input_node(&mut g, spec, x)?;
    let rep = models::encode_node(&mut g, spec, &w, input)?;
    let logits = models::classify_node(&mut g, spec, &w, rep)?;
    let lp = g.log_softmax(logits)?;
    let sup = g.nll(lp, labels)?;
    if rho == 0.0 {
        return Ok(ObjectiveGraph { graph: g, total: sup, sup, bt: None });
    }
    local.params().ensure_compatible(global.params())?;
    let mut prox = None;
    for (name, wg) in global.params().iter() {
        let p = w.get(name)?;
        let c = g.constant(wg.clone());
        let d = g.sub(p, c)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        prox = Some(match prox {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = match prox {
        Some(p) => {
            let p = g.scale(p, rho / 2.0)?;
            g.add(sup, p)?
        }
        None => sup,
    };
    Ok(ObjectiveGraph { graph: g, total, sup, bt: None })
}

/// The local objective of `cfg.algorithm` on one batch.
pub fn client_objective(
    cfg: &FlConfig,
    spec: &ModelSpec,
    local: &ModelWeights,
    global: &ModelWeights,
    x: &Tensor,
    labels: &[usize],
) -> Result<Evaluated> {
    let graph = match cfg.algorithm {
        Algorithm::FlBt => {
            fl_bt_graph(spec, local, global, x, labels, cfg.mu, cfg.lambda, cfg.bt_centered)?
        }
        Algorithm::FedProx => baseline_graph(spec, local, global, x, labels, cfg.prox_rho)?,
        Algorithm::FedAvg | Algorithm::LocalOnly => {
            baseline_graph(spec, local, global, x, labels, 0.0)?
        }
    };
    graph.evaluate()
}
