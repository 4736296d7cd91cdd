//! Combinatorics of the topology search space.
//!
//! A layer transition has `E = 3D - 2` candidate edges between feature nodes
//! at adjacent resolution levels (same, one step down, one step up). A
//! connection pattern is a non-empty subset of those edges, so there are
//! `M = 2^E - 1` patterns per layer. Feasibility ties the activation pattern
//! produced by an input connection to the set of output connections that keep
//! every activated node alive and every inactive node silent.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the search space: `L` layers, `D` resolution levels,
/// `N` candidate cell operations per edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub layers: usize,
    pub levels: usize,
    pub ops: usize,
}

impl SpaceConfig {
    pub fn new(layers: usize, levels: usize, ops: usize) -> Result<Self> {
        let cfg = SpaceConfig { layers, levels, ops };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.levels > 4 {
            return Err(Error::UnsupportedDepth(self.levels));
        }
        if self.layers < 1 {
            return Err(Error::InvalidConfig("layer count must be >= 1".into()));
        }
        if self.ops < 1 {
            return Err(Error::InvalidConfig("op count must be >= 1".into()));
        }
        Ok(())
    }

    /// Candidate edges per layer transition: E = 3D - 2.
    pub fn num_edges(&self) -> usize {
        3 * self.levels - 2
    }

    /// Non-empty connection patterns per layer: M = 2^E - 1.
    pub fn num_patterns(&self) -> usize {
        (1usize << self.num_edges()) - 1
    }

    /// Non-empty activation patterns: |A| = 2^D - 1.
    pub fn num_activations(&self) -> usize {
        (1usize << self.levels) - 1
    }
}

/// Kind of resolution change an edge performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Same,
    /// Source is one resolution level above the (spatially smaller) target.
    Down,
    /// Source is one resolution level below the target.
    Up,
}

/// One candidate edge, identified by its rank in the canonical ordering
/// (destination resolution ascending, then source resolution ascending).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeId {
    pub index: usize,
    pub src_res: usize,
    pub dst_res: usize,
}

impl EdgeId {
    pub fn kind(&self) -> EdgeKind {
        match self.dst_res.cmp(&self.src_res) {
            std::cmp::Ordering::Equal => EdgeKind::Same,
            std::cmp::Ordering::Greater => EdgeKind::Down,
            std::cmp::Ordering::Less => EdgeKind::Up,
        }
    }
}

/// All candidate edges of one layer transition, in canonical order.
pub fn enumerate_edges(cfg: &SpaceConfig) -> Vec<EdgeId> {
    let d = cfg.levels;
    let mut edges = Vec::with_capacity(cfg.num_edges());
    for dst in 0..d {
        for src in dst.saturating_sub(1)..=(dst + 1).min(d - 1) {
            edges.push(EdgeId {
                index: edges.len(),
                src_res: src,
                dst_res: dst,
            });
        }
    }
    debug_assert_eq!(edges.len(), cfg.num_edges());
    edges
}

/// A non-empty subset of candidate edges. The id doubles as the bitmask:
/// bit `e` of `id` is set iff edge `e` is selected, so ids run 1..=M.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnectionPattern {
    pub id: u32,
    num_edges: usize,
}

impl ConnectionPattern {
    pub fn from_id(id: u32, cfg: &SpaceConfig) -> Result<Self> {
        let e = cfg.num_edges();
        if id == 0 || id > cfg.num_patterns() as u32 {
            return Err(Error::InvalidConfig(format!(
                "pattern id {id} outside 1..={}",
                cfg.num_patterns()
            )));
        }
        Ok(ConnectionPattern { id, num_edges: e })
    }

    pub fn from_bits(bits: &[bool], cfg: &SpaceConfig) -> Result<Self> {
        if bits.len() != cfg.num_edges() {
            return Err(Error::InvalidConfig(format!(
                "bit vector length {} != E = {}",
                bits.len(),
                cfg.num_edges()
            )));
        }
        let id = bits
            .iter()
            .enumerate()
            .fold(0u32, |acc, (e, &b)| acc | ((b as u32) << e));
        Self::from_id(id, cfg)
    }

    pub fn contains(&self, edge: usize) -> bool {
        self.id >> edge & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.num_edges).map(|e| self.contains(e)).collect()
    }

    /// Indices of the selected edges, ascending.
    pub fn edges(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_edges).filter(move |&e| self.contains(e))
    }

    pub fn num_selected(&self) -> usize {
        self.id.count_ones() as usize
    }
}

/// Which of the D feature nodes receive at least one input edge.
/// Encoded as a bitmask with bit `d` for resolution `d`; always non-empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    pub mask: u32,
    levels: usize,
}

impl ActivationPattern {
    pub fn from_mask(mask: u32, cfg: &SpaceConfig) -> Result<Self> {
        if mask == 0 || mask >= (1u32 << cfg.levels) {
            return Err(Error::InvalidConfig(format!(
                "activation mask {mask} outside 1..={}",
                cfg.num_activations()
            )));
        }
        Ok(ActivationPattern { mask, levels: cfg.levels })
    }

    pub fn active(&self, res: usize) -> bool {
        self.mask >> res & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.levels).map(|d| self.active(d)).collect()
    }
}

/// All M connection patterns in id order 1..=M.
pub fn enumerate_patterns(cfg: &SpaceConfig) -> Result<Vec<ConnectionPattern>> {
    cfg.validate()?;
    (1..=cfg.num_patterns() as u32)
        .map(|id| ConnectionPattern::from_id(id, cfg))
        .collect()
}

/// Activation produced by a connection pattern: node `d` is active iff some
/// selected edge targets resolution `d`.
pub fn activation_of(cp: ConnectionPattern, cfg: &SpaceConfig) -> ActivationPattern {
    let edges = enumerate_edges(cfg);
    let mut mask = 0u32;
    for e in cp.edges() {
        mask |= 1 << edges[e].dst_res;
    }
    ActivationPattern { mask, levels: cfg.levels }
}

/// Activation mask over the *source* side of a pattern: node `d` is set iff
/// some selected edge leaves resolution `d`. Used to test output feasibility.
pub fn source_activation_of(cp: ConnectionPattern, cfg: &SpaceConfig) -> ActivationPattern {
    let edges = enumerate_edges(cfg);
    let mut mask = 0u32;
    for e in cp.edges() {
        mask |= 1 << edges[e].src_res;
    }
    ActivationPattern { mask, levels: cfg.levels }
}

/// A super node with activation `a` followed by output pattern `out_cp` is
/// feasible iff every active node emits at least one edge and no inactive
/// node emits any.
pub fn is_feasible_pair(a: ActivationPattern, out_cp: ConnectionPattern, cfg: &SpaceConfig) -> bool {
    source_activation_of(out_cp, cfg).mask == a.mask
}

/// Precomputed feasibility tables.
///
/// `f[j-1]` lists output pattern ids feasible after input pattern `j`;
/// `f_in[a-1]` lists pattern ids whose activation is exactly `a`;
/// `f_out[a-1]` lists pattern ids feasible as outputs of activation `a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeasibilitySets {
    pub levels: usize,
    f: Vec<Vec<u32>>,
    f_in: Vec<Vec<u32>>,
    f_out: Vec<Vec<u32>>,
    /// activation mask (as index a-1) of each pattern id (as index j-1)
    activation: Vec<u32>,
    source_activation: Vec<u32>,
}

impl FeasibilitySets {
    pub fn feasible_after(&self, pattern_id: u32) -> &[u32] {
        &self.f[pattern_id as usize - 1]
    }

    pub fn inputs_activating(&self, activation_mask: u32) -> &[u32] {
        &self.f_in[activation_mask as usize - 1]
    }

    pub fn outputs_of(&self, activation_mask: u32) -> &[u32] {
        &self.f_out[activation_mask as usize - 1]
    }

    pub fn activation_mask(&self, pattern_id: u32) -> u32 {
        self.activation[pattern_id as usize - 1]
    }

    pub fn source_activation_mask(&self, pattern_id: u32) -> u32 {
        self.source_activation[pattern_id as usize - 1]
    }

    pub fn num_patterns(&self) -> usize {
        self.activation.len()
    }

    pub fn num_activations(&self) -> usize {
        self.f_in.len()
    }

    /// Is `next` a feasible successor of `prev`?
    pub fn is_feasible_transition(&self, prev: u32, next: u32) -> bool {
        self.source_activation_mask(next) == self.activation_mask(prev)
    }
}

/// Build the F, F_in, F_out tables for a space.
pub fn feasible_sets(cfg: &SpaceConfig) -> Result<FeasibilitySets> {
    cfg.validate()?;
    let m = cfg.num_patterns();
    let n_act = cfg.num_activations();
    let patterns = enumerate_patterns(cfg)?;

    let activation: Vec<u32> = patterns.iter().map(|&cp| activation_of(cp, cfg).mask).collect();
    let source_activation: Vec<u32> =
        patterns.iter().map(|&cp| source_activation_of(cp, cfg).mask).collect();

    let mut f_in = vec![Vec::new(); n_act];
    let mut f_out = vec![Vec::new(); n_act];
    for (idx, &cp) in patterns.iter().enumerate() {
        f_in[activation[idx] as usize - 1].push(cp.id);
        f_out[source_activation[idx] as usize - 1].push(cp.id);
    }

    let f: Vec<Vec<u32>> = (0..m)
        .map(|idx| f_out[activation[idx] as usize - 1].clone())
        .collect();

    Ok(FeasibilitySets {
        levels: cfg.levels,
        f,
        f_in,
        f_out,
        activation,
        source_activation,
    })
}

#[derive(Serialize, Deserialize)]
struct FeasibilityFile {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "F")]
    f: BTreeMap<String, Vec<u32>>,
    #[serde(rename = "F_in")]
    f_in: BTreeMap<String, Vec<u32>>,
    #[serde(rename = "F_out")]
    f_out: BTreeMap<String, Vec<u32>>,
}

impl FeasibilitySets {
    /// Serialize to the JSON cache format keyed by D. Map keys are decimal
    /// pattern ids for F and decimal activation masks for F_in/F_out.
    pub fn to_json(&self) -> Result<String> {
        let file = FeasibilityFile {
            d: self.levels,
            f: self
                .f
                .iter()
                .enumerate()
                .map(|(i, v)| ((i + 1).to_string(), v.clone()))
                .collect(),
            f_in: self
                .f_in
                .iter()
                .enumerate()
                .map(|(i, v)| ((i + 1).to_string(), v.clone()))
                .collect(),
            f_out: self
                .f_out
                .iter()
                .enumerate()
                .map(|(i, v)| ((i + 1).to_string(), v.clone()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FeasibilityFile = serde_json::from_str(text)?;
        let cfg = SpaceConfig::new(1, file.d, 1)?;
        let m = cfg.num_patterns();
        let n_act = cfg.num_activations();
        let read = |map: &BTreeMap<String, Vec<u32>>, len: usize, what: &str| -> Result<Vec<Vec<u32>>> {
            let mut out = vec![Vec::new(); len];
            for (k, v) in map {
                let idx: usize = k
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad {what} key {k:?}")))?;
                if idx == 0 || idx > len {
                    return Err(Error::InvalidConfig(format!("{what} key {idx} out of range")));
                }
                out[idx - 1] = v.clone();
            }
            Ok(out)
        };
        let f = read(&file.f, m, "F")?;
        let f_in = read(&file.f_in, n_act, "F_in")?;
        let f_out = read(&file.f_out, n_act, "F_out")?;
        // Rebuild the activation lookup; cheap and keeps the file format small.
        let rebuilt = feasible_sets(&cfg)?;
        let loaded = FeasibilitySets {
            levels: file.d,
            f,
            f_in,
            f_out,
            activation: rebuilt.activation.clone(),
            source_activation: rebuilt.source_activation.clone(),
        };
        if loaded != rebuilt {
            return Err(Error::InvalidConfig(
                "feasibility cache disagrees with recomputed tables".into(),
            ));
        }
        Ok(loaded)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_or_build(path: &Path, cfg: &SpaceConfig) -> Result<Self> {
        if path.exists() {
            if let Ok(sets) = Self::from_json(&std::fs::read_to_string(path)?) {
                if sets.levels == cfg.levels {
                    return Ok(sets);
                }
            }
        }
        let sets = feasible_sets(cfg)?;
        sets.save(path)?;
        Ok(sets)
    }
}
