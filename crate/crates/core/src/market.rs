//! Finite multi-prior market with bid-ask boxes: schema, validation and the
//! strict consistent-price-system check.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::solvers::{LinearProgram, LpStatus, Relation, VarId};
use crate::tol;

/// Node identifiers may be written as strings or integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeKey {
    Name(String),
    Number(u64),
}

impl std::fmt::Display for NodeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeKey::Name(s) => f.write_str(s),
            NodeKey::Number(n) => write!(f, "{n}"),
        }
    }
}

impl From<&str> for NodeKey {
    fn from(s: &str) -> Self {
        NodeKey::Name(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: NodeKey,
    pub t: usize,
    #[serde(default)]
    pub children: Vec<NodeKey>,
    pub mid: Vec<f64>,
    pub bid: Vec<f64>,
    pub ask: Vec<f64>,
    #[serde(default)]
    pub priors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionDoc {
    pub payoff: BTreeMap<String, Vec<f64>>,
    pub cost: f64,
}

/// On-disk market description. Terminal nodes missing from `endowment` or an
/// option payoff carry the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketDocument {
    pub horizon: usize,
    pub assets: usize,
    pub spread_bound: f64,
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub endowment: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub options: Vec<OptionDoc>,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: String,
    pub t: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Nodes are stored in time order; index 0 is the root.
#[derive(Debug, Clone)]
pub struct MarketTree {
    pub horizon: usize,
    pub nodes: Vec<TreeNode>,
}

impl MarketTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_terminal(&self, n: usize) -> bool {
        self.nodes[n].children.is_empty()
    }

    pub fn children(&self, n: usize) -> &[usize] {
        &self.nodes[n].children
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&n| self.is_terminal(n))
    }

    pub fn internal(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&n| !self.is_terminal(n))
    }

    /// Root-to-node path, inclusive.
    pub fn path(&self, n: usize) -> Vec<usize> {
        let mut p = vec![n];
        let mut cur = n;
        while let Some(par) = self.nodes[cur].parent {
            p.push(par);
            cur = par;
        }
        p.reverse();
        p
    }

    /// Nodes of the subtree rooted at `n`, in time order.
    pub fn subtree(&self, n: usize) -> Vec<usize> {
        let mut out = vec![n];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.nodes[out[i]].children);
            i += 1;
        }
        out
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }
}

/// Extreme points of the one-step prior sets, one list per internal node.
#[derive(Debug, Clone)]
pub struct PriorSet {
    pub extremes: Vec<Vec<Vec<f64>>>,
}

/// Bid-ask boxes; asset `d` is the numéraire and carries no quotes.
#[derive(Debug, Clone)]
pub struct ConeSpec {
    pub assets: usize,
    pub spread_bound: f64,
    pub mid: Vec<Vec<f64>>,
    pub bid: Vec<Vec<f64>>,
    pub ask: Vec<Vec<f64>>,
}

impl ConeSpec {
    pub fn risky(&self) -> usize {
        self.assets - 1
    }

    pub fn frictionless(&self, n: usize) -> bool {
        self.bid[n].iter().zip(&self.ask[n]).all(|(b, a)| b == a)
    }
}

#[derive(Debug, Clone)]
pub struct StaticOption {
    /// Per node payoff in units of the d assets (zero off the terminal layer).
    pub payoff: Vec<Vec<f64>>,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct ClaimSpec {
    /// Per node endowment (zero off the terminal layer).
    pub endowment: Vec<Vec<f64>>,
    pub options: Vec<StaticOption>,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct MarketSpec {
    pub tree: MarketTree,
    pub priors: PriorSet,
    pub cones: ConeSpec,
    pub claims: ClaimSpec,
    /// Nodes charged by at least one prior chain from the root.
    pub charged: Vec<bool>,
    document: MarketDocument,
}

pub fn load_market(path: impl AsRef<Path>) -> Result<MarketSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_market(&text)
}

pub fn parse_market(text: &str) -> Result<MarketSpec> {
    let doc: MarketDocument = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    MarketSpec::from_document(doc)
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl MarketSpec {
    pub fn from_document(doc: MarketDocument) -> Result<Self> {
        let mut errors = Vec::new();
        if doc.horizon < 1 {
            errors.push("horizon: must be >= 1".to_string());
        }
        if doc.assets < 2 {
            errors.push(format!("assets: must be >= 2, got {}", doc.assets));
        }
        if !(doc.spread_bound > 1.0) || !doc.spread_bound.is_finite() {
            errors.push(format!("spread_bound: must be a finite number > 1, got {}", doc.spread_bound));
        }
        if !(doc.gamma > 0.0) || !doc.gamma.is_finite() {
            errors.push(format!("gamma: must be a finite number > 0, got {}", doc.gamma));
        }
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let tree = build_tree(&doc)?;
        let d = doc.assets;
        let c = doc.spread_bound;
        let n = tree.len();
        // Map from sorted index to document entry.
        let doc_index: HashMap<String, usize> =
            doc.nodes.iter().enumerate().map(|(i, nd)| (nd.id.to_string(), i)).collect();
        let entry = |k: usize| &doc.nodes[doc_index[&tree.nodes[k].id]];
        let label = |k: usize| format!("nodes[{}] (id={})", doc_index[&tree.nodes[k].id], tree.nodes[k].id);

        let mut mid = Vec::with_capacity(n);
        let mut bid = Vec::with_capacity(n);
        let mut ask = Vec::with_capacity(n);
        let mut extremes = Vec::with_capacity(n);
        for k in 0..n {
            let nd = entry(k);
            let at = label(k);
            for (name, v) in [("mid", &nd.mid), ("bid", &nd.bid), ("ask", &nd.ask)] {
                if v.len() != d - 1 {
                    errors.push(format!("{at}.{name}: expected {} entries, got {}", d - 1, v.len()));
                } else if !finite(v) {
                    errors.push(format!("{at}.{name}: entries must be finite"));
                }
            }
            if nd.mid.len() == d - 1 && nd.bid.len() == d - 1 && nd.ask.len() == d - 1 {
                for i in 0..d - 1 {
                    let (s, b, a) = (nd.mid[i], nd.bid[i], nd.ask[i]);
                    if !(s > 0.0) {
                        errors.push(format!("{at}.mid[{i}]: must be > 0, got {s}"));
                    }
                    if !(b > 0.0) {
                        errors.push(format!("{at}.bid[{i}]: must be > 0, got {b}"));
                    }
                    if b > a {
                        errors.push(format!("{at}: bid[{i}] = {b} exceeds ask[{i}] = {a}"));
                    } else if !(b <= s && s <= a) {
                        errors.push(format!("{at}: mid[{i}] = {s} outside [bid, ask] = [{b}, {a}]"));
                    }
                    if b < s / c * (1.0 - 1e-12) {
                        errors.push(format!("{at}: bid[{i}] = {b} below mid/spread_bound = {}", s / c));
                    }
                    if a > s * c * (1.0 + 1e-12) {
                        errors.push(format!("{at}: ask[{i}] = {a} above mid*spread_bound = {}", s * c));
                    }
                }
            }
            let kids = tree.nodes[k].children.len();
            if kids == 0 {
                if !nd.priors.is_empty() {
                    errors.push(format!("{at}.priors: terminal nodes carry no priors"));
                }
            } else if nd.priors.is_empty() {
                errors.push(format!("{at}.priors: at least one prior vector is required"));
            }
            for (j, p) in nd.priors.iter().enumerate() {
                if kids == 0 {
                    break;
                }
                if p.len() != kids {
                    errors.push(format!("{at}.priors[{j}]: expected {kids} entries, got {}", p.len()));
                    continue;
                }
                if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    errors.push(format!("{at}.priors[{j}]: entries must be finite and >= 0"));
                    continue;
                }
                let s: f64 = p.iter().sum();
                if (s - 1.0).abs() > tol::MASS {
                    errors.push(format!("{at}.priors[{j}]: sums to {s}"));
                }
            }
            mid.push(nd.mid.clone());
            bid.push(nd.bid.clone());
            ask.push(nd.ask.clone());
            extremes.push(nd.priors.clone());
        }

        let terminal_index = |key: &str| -> Option<usize> { tree.index_of(key).filter(|&k| tree.is_terminal(k)) };
        let mut endowment = vec![Vec::new(); n];
        for k in tree.terminals() {
            endowment[k] = vec![0.0; d];
        }
        for (key, v) in &doc.endowment {
            match terminal_index(key) {
                None => errors.push(format!("endowment.{key}: not a terminal node")),
                Some(k) if v.len() != d || !finite(v) => {
                    errors.push(format!("endowment.{key}: expected {d} finite entries"));
                    let _ = k;
                }
                Some(k) => endowment[k] = v.clone(),
            }
        }
        let mut options = Vec::new();
        for (j, o) in doc.options.iter().enumerate() {
            if !(o.cost > 0.0) || !o.cost.is_finite() {
                errors.push(format!("options[{j}].cost: must be a finite number > 0, got {}", o.cost));
            }
            let mut payoff = vec![Vec::new(); n];
            for k in tree.terminals() {
                payoff[k] = vec![0.0; d];
            }
            for (key, v) in &o.payoff {
                match terminal_index(key) {
                    None => errors.push(format!("options[{j}].payoff.{key}: not a terminal node")),
                    Some(_) if v.len() != d || !finite(v) => {
                        errors.push(format!("options[{j}].payoff.{key}: expected {d} finite entries"))
                    }
                    Some(k) => payoff[k] = v.clone(),
                }
            }
            options.push(StaticOption { payoff, cost: o.cost });
        }
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }

        let mut charged = vec![false; n];
        charged[0] = true;
        for k in 0..n {
            if !charged[k] {
                continue;
            }
            for (ci, &ch) in tree.nodes[k].children.iter().enumerate() {
                if extremes[k].iter().any(|p| p[ci] > 0.0) {
                    charged[ch] = true;
                }
            }
        }
        Ok(MarketSpec {
            tree,
            priors: PriorSet { extremes },
            cones: ConeSpec { assets: d, spread_bound: c, mid, bid, ask },
            claims: ClaimSpec { endowment, options, gamma: doc.gamma },
            charged,
            document: doc,
        })
    }

    pub fn document(&self) -> &MarketDocument {
        &self.document
    }

    /// SHA-256 of the canonical JSON form of the document.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(&self.document).expect("document serializes");
        Sha256::digest(&canon).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn d(&self) -> usize {
        self.cones.assets
    }

    pub fn horizon(&self) -> usize {
        self.tree.horizon
    }

    pub fn num_options(&self) -> usize {
        self.claims.options.len()
    }

    /// Copy with a different endowment (given per node; terminal entries used).
    pub fn with_endowment(&self, endowment: Vec<Vec<f64>>) -> MarketSpec {
        let mut out = self.clone();
        let mut map = BTreeMap::new();
        for k in self.tree.terminals() {
            map.insert(self.tree.nodes[k].id.clone(), endowment[k].clone());
        }
        out.document.endowment = map;
        out.claims.endowment = endowment;
        out
    }

    pub fn with_gamma(&self, gamma: f64) -> MarketSpec {
        let mut out = self.clone();
        out.document.gamma = gamma;
        out.claims.gamma = gamma;
        out
    }

    pub fn without_options(&self) -> MarketSpec {
        let mut out = self.clone();
        out.document.options.clear();
        out.claims.options.clear();
        out
    }
}

fn build_tree(doc: &MarketDocument) -> Result<MarketTree> {
    let t_max = doc.horizon;
    let ids: Vec<String> = doc.nodes.iter().map(|n| n.id.to_string()).collect();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(Error::Topology(format!("duplicate node id `{id}`")));
        }
    }
    let mut parent: Vec<Option<usize>> = vec![None; ids.len()];
    for (i, nd) in doc.nodes.iter().enumerate() {
        if nd.t > t_max {
            return Err(Error::Topology(format!("node `{}` has t = {} beyond horizon {t_max}", ids[i], nd.t)));
        }
        for ch in &nd.children {
            let key = ch.to_string();
            let Some(&j) = index.get(key.as_str()) else {
                return Err(Error::Topology(format!("node `{}` lists unknown child `{key}`", ids[i])));
            };
            if doc.nodes[j].t != nd.t + 1 {
                return Err(Error::Topology(format!(
                    "child `{key}` of node `{}` must sit at t = {}",
                    ids[i],
                    nd.t + 1
                )));
            }
            if let Some(p) = parent[j] {
                return Err(Error::Topology(format!("node `{key}` has two parents (`{}` and `{}`)", ids[p], ids[i])));
            }
            parent[j] = Some(i);
        }
        if nd.t < t_max && nd.children.is_empty() {
            return Err(Error::Topology(format!("node `{}` at t = {} < T has no children", ids[i], nd.t)));
        }
        if nd.t == t_max && !nd.children.is_empty() {
            return Err(Error::Topology(format!("terminal node `{}` has children", ids[i])));
        }
    }
    let roots: Vec<usize> = (0..ids.len()).filter(|&i| doc.nodes[i].t == 0).collect();
    if roots.len() != 1 {
        return Err(Error::Topology(format!("expected exactly one node at t = 0, found {}", roots.len())));
    }
    for i in 0..ids.len() {
        if doc.nodes[i].t > 0 && parent[i].is_none() {
            return Err(Error::Topology(format!("node `{}` is not reachable from the root", ids[i])));
        }
    }
    // Breadth-first order from the root keeps parents ahead of children.
    let mut order = vec![roots[0]];
    let mut k = 0;
    while k < order.len() {
        for ch in &doc.nodes[order[k]].children {
            order.push(index[ch.to_string().as_str()]);
        }
        k += 1;
    }
    let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let nodes = order
        .iter()
        .map(|&i| TreeNode {
            id: ids[i].clone(),
            t: doc.nodes[i].t,
            parent: parent[i].map(|p| pos[&p]),
            children: doc.nodes[i].children.iter().map(|c| pos[&index[c.to_string().as_str()]]).collect(),
        })
        .collect();
    Ok(MarketTree { horizon: t_max, nodes })
}

/// Strict consistent price system returned by [`check_na2`].
#[derive(Debug, Clone, Serialize)]
pub struct StrictCps {
    /// Path weights (zero on nodes no prior charges).
    pub q: Vec<f64>,
    /// Price system with `z[n][d-1] = 1`.
    pub z: Vec<Vec<f64>>,
    /// Optimal LP slack.
    pub epsilon: f64,
    /// Smallest distance of `Z^i` to a box endpoint over frictional coordinates.
    pub box_slack: f64,
}

impl StrictCps {
    pub fn conditional(&self, spec: &MarketSpec, n: usize) -> Vec<f64> {
        spec.tree.children(n).iter().map(|&c| self.q[c] / self.q[n]).collect()
    }

    /// Largest `|Σ q(c|n) Z(c) − Z(n)|` over charged internal nodes.
    pub fn martingale_residual(&self, spec: &MarketSpec) -> f64 {
        let mut worst = 0.0f64;
        for n in spec.tree.internal() {
            if !spec.charged[n] {
                continue;
            }
            let cond = self.conditional(spec, n);
            for i in 0..spec.d() {
                let e: f64 = spec.tree.children(n).iter().zip(&cond).map(|(&c, w)| w * self.z[c][i]).sum();
                worst = worst.max((e - self.z[n][i]).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Na2Witness {
    pub node: String,
    pub t: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Na2Report {
    pub holds: bool,
    pub epsilon: f64,
    pub certificate: Option<StrictCps>,
    pub witness: Option<Na2Witness>,
}

struct CpsLp {
    lp: LinearProgram,
    eps: VarId,
    q: HashMap<usize, VarId>,
    m: HashMap<usize, Vec<VarId>>,
}

/// LP maximizing the strict-CPS slack on the subtree rooted at `root`.
fn cps_lp(spec: &MarketSpec, root: usize) -> CpsLp {
    let r = spec.cones.risky();
    let mut lp = LinearProgram::maximize();
    let eps = lp.var(None, Some(1.0));
    lp.set_objective(eps, 1.0);
    let mut q = HashMap::new();
    let mut m = HashMap::new();
    let nodes: Vec<usize> = spec.tree.subtree(root).into_iter().filter(|&k| k == root || spec.charged[k]).collect();
    for &k in &nodes {
        q.insert(k, lp.nonneg());
        m.insert(k, (0..r).map(|_| lp.nonneg()).collect::<Vec<_>>());
    }
    lp.constraint(vec![(q[&root], 1.0)], Relation::Eq, 1.0);
    for &k in &nodes {
        let (qk, mk) = (q[&k], m[&k].clone());
        if k != root {
            lp.constraint(vec![(qk, 1.0), (eps, -1.0)], Relation::Ge, 0.0);
        }
        for i in 0..r {
            let (b, a) = (spec.cones.bid[k][i], spec.cones.ask[k][i]);
            if b < a {
                lp.constraint(vec![(mk[i], 1.0), (qk, -b), (eps, -1.0)], Relation::Ge, 0.0);
                lp.constraint(vec![(qk, a), (mk[i], -1.0), (eps, -1.0)], Relation::Ge, 0.0);
            } else {
                lp.constraint(vec![(mk[i], 1.0), (qk, -a)], Relation::Eq, 0.0);
            }
        }
        if spec.tree.is_terminal(k) {
            continue;
        }
        let kids: Vec<usize> = spec.tree.children(k).iter().copied().filter(|c| q.contains_key(c)).collect();
        let mut row: Vec<_> = kids.iter().map(|c| (q[c], 1.0)).collect();
        row.push((qk, -1.0));
        lp.constraint(row, Relation::Eq, 0.0);
        for i in 0..r {
            let mut row: Vec<_> = kids.iter().map(|c| (m[c][i], 1.0)).collect();
            row.push((mk[i], -1.0));
            lp.constraint(row, Relation::Eq, 0.0);
        }
    }
    CpsLp { lp, eps, q, m }
}

fn subtree_slack(spec: &MarketSpec, root: usize, pivot_tol: f64) -> Result<f64> {
    let p = cps_lp(spec, root);
    let sol = p.lp.solve(pivot_tol)?;
    Ok(match sol.status {
        LpStatus::Optimal => sol.value(p.eps),
        LpStatus::Infeasible => f64::NEG_INFINITY,
        LpStatus::Unbounded => 1.0,
    })
}

/// Searches for a strict consistent price system charging every node some
/// prior reaches. On failure, names the earliest node whose subtree admits no
/// strict system while all of its children's subtrees do.
pub fn check_na2(spec: &MarketSpec, pivot_tol: f64) -> Result<Na2Report> {
    let p = cps_lp(spec, 0);
    let sol = p.lp.solve(pivot_tol)?;
    let epsilon = match sol.status {
        LpStatus::Optimal => sol.value(p.eps),
        LpStatus::Infeasible => f64::NEG_INFINITY,
        LpStatus::Unbounded => 1.0,
    };
    if epsilon > tol::LP_SLACK {
        let n = spec.tree.len();
        let r = spec.cones.risky();
        let mut q = vec![0.0; n];
        let mut z = vec![Vec::new(); n];
        let mut box_slack = f64::INFINITY;
        for k in 0..n {
            let mut zk: Vec<f64> = spec.cones.mid[k].clone();
            if let Some(&qv) = p.q.get(&k) {
                q[k] = sol.value(qv);
                for i in 0..r {
                    let (b, a) = (spec.cones.bid[k][i], spec.cones.ask[k][i]);
                    zk[i] = if b == a { a } else { (sol.value(p.m[&k][i]) / q[k]).clamp(b, a) };
                    if b < a {
                        box_slack = box_slack.min((zk[i] - b).min(a - zk[i]));
                    }
                }
            }
            zk.push(1.0);
            z[k] = zk;
        }
        return Ok(Na2Report {
            holds: true,
            epsilon,
            certificate: Some(StrictCps { q, z, epsilon, box_slack }),
            witness: None,
        });
    }
    // Locate a minimal failing subtree.
    let mut ok = vec![true; spec.tree.len()];
    let mut witness = None;
    for k in (0..spec.tree.len()).rev() {
        if spec.tree.is_terminal(k) || !spec.charged[k] {
            continue;
        }
        ok[k] = subtree_slack(spec, k, pivot_tol)? > tol::LP_SLACK;
    }
    let mut best: Option<usize> = None;
    for k in spec.tree.internal() {
        if ok[k] || !spec.charged[k] {
            continue;
        }
        let kids_ok = spec.tree.children(k).iter().all(|&c| ok[c] || !spec.charged[c]);
        if kids_ok && best.map_or(true, |b| spec.tree.nodes[k].t < spec.tree.nodes[b].t) {
            best = Some(k);
        }
    }
    if let Some(k) = best {
        witness = Some(Na2Witness {
            node: spec.tree.nodes[k].id.clone(),
            t: spec.tree.nodes[k].t,
            detail: "no strictly positive one-step measure keeps a price system inside the bid-ask boxes".to_string(),
        });
    }
    Ok(Na2Report { holds: false, epsilon, certificate: None, witness })
}

impl Na2Report {
    pub fn into_result(self) -> Result<StrictCps> {
        match (self.holds, self.certificate) {
            (true, Some(c)) => Ok(c),
            _ => {
                let (node, detail) = match self.witness {
                    Some(w) => (w.node, w.detail),
                    None => ("root".to_string(), format!("strict CPS slack {}", self.epsilon)),
                };
                Err(Error::Arbitrage { node, detail })
            }
        }
    }
}

/// Helper for building documents in code.
pub fn node_doc(
    id: &str,
    t: usize,
    children: &[&str],
    mid: Vec<f64>,
    bid: Vec<f64>,
    ask: Vec<f64>,
    priors: Vec<Vec<f64>>,
) -> NodeDoc {
    NodeDoc {
        id: NodeKey::from(id),
        t,
        children: children.iter().map(|&c| NodeKey::from(c)).collect(),
        mid,
        bid,
        ask,
        priors,
    }
}
