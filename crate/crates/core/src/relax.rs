//! Continuous relaxation: raw logits to cell mixtures α, edge probabilities
//! p, pattern probabilities η, and per-edge marginals q.
//!
//! η for one layer is a softmax over the M non-empty edge subsets of
//! log-space scores Σ_e cp_j(e)·(log p_e − log(1−p_e)); the constant
//! Σ_e log(1−p_e) cancels in the normalization. The marginal
//! q_e = Σ_{j ∋ e} η_j collapses the pattern mixture to a per-edge weight,
//! which is what the supernet forward consumes.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::SpaceConfig;
use crate::tensor::{log_clamped, sigmoid_clamped, softmax_row, NodeId, Tape, Tensor};

/// Raw (pre-squash) architecture parameters: cell logits [L,E,N] and edge
/// logits [L,E].
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub alpha_raw: Tensor,
    pub p_raw: Tensor,
}

impl ArchParams {
    /// Paper-style initialization: cell logits from N(1, 0.01), edge logits
    /// from N(0, 0.01), with 0.01 read as the standard deviation.
    pub fn init(cfg: &SpaceConfig, rng: &mut impl Rng) -> Self {
        let (l, e, n) = (cfg.layers, cfg.num_edges(), cfg.ops);
        let na = Normal::new(1.0, 0.01).unwrap();
        let np = Normal::new(0.0, 0.01).unwrap();
        ArchParams {
            alpha_raw: Tensor::from_vec(
                &[l, e, n],
                (0..l * e * n).map(|_| na.sample(rng)).collect(),
            ),
            p_raw: Tensor::from_vec(&[l, e], (0..l * e).map(|_| np.sample(rng)).collect()),
        }
    }

    pub fn validate(&self, cfg: &SpaceConfig) -> Result<()> {
        let (l, e, n) = (cfg.layers, cfg.num_edges(), cfg.ops);
        if self.alpha_raw.shape() != [l, e, n] {
            return Err(Error::ShapeMismatch {
                context: "ArchParams.alpha_raw",
                expected: vec![l, e, n],
                got: self.alpha_raw.shape().to_vec(),
            });
        }
        if self.p_raw.shape() != [l, e] {
            return Err(Error::ShapeMismatch {
                context: "ArchParams.p_raw",
                expected: vec![l, e],
                got: self.p_raw.shape().to_vec(),
            });
        }
        if !self.alpha_raw.is_finite() || !self.p_raw.is_finite() {
            return Err(Error::NonFinite { context: "ArchParams".into() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, cfg: &SpaceConfig) -> Result<()> {
        std::fs::write(path, self.to_json(cfg)?)?;
        Ok(())
    }

    pub fn to_json(&self, cfg: &SpaceConfig) -> Result<String> {
        self.validate(cfg)?;
        let file = ArchParamsFile {
            layers: cfg.layers,
            levels: cfg.levels,
            ops: cfg.ops,
            alpha_raw: self.alpha_raw.data().to_vec(),
            p_raw: self.p_raw.data().to_vec(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Load a checkpoint; returns the space dimensions recorded in the file.
    pub fn load(path: &Path) -> Result<(Self, SpaceConfig)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, SpaceConfig)> {
        let file: ArchParamsFile = serde_json::from_str(text)?;
        let cfg = SpaceConfig::new(file.layers, file.levels, file.ops)?;
        let (l, e, n) = (cfg.layers, cfg.num_edges(), cfg.ops);
        if file.alpha_raw.len() != l * e * n {
            return Err(Error::ShapeMismatch {
                context: "checkpoint alpha_raw",
                expected: vec![l, e, n],
                got: vec![file.alpha_raw.len()],
            });
        }
        if file.p_raw.len() != l * e {
            return Err(Error::ShapeMismatch {
                context: "checkpoint p_raw",
                expected: vec![l, e],
                got: vec![file.p_raw.len()],
            });
        }
        let params = ArchParams {
            alpha_raw: Tensor::from_vec(&[l, e, n], file.alpha_raw),
            p_raw: Tensor::from_vec(&[l, e], file.p_raw),
        };
        params.validate(&cfg)?;
        Ok((params, cfg))
    }
}

#[derive(Serialize, Deserialize)]
struct ArchParamsFile {
    layers: usize,
    levels: usize,
    ops: usize,
    alpha_raw: Vec<f64>,
    p_raw: Vec<f64>,
}

/// Squashed architecture state: α rows on the simplex, p in (0,1), η rows on
/// the simplex, q the per-edge pattern mass.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedState {
    pub alpha: Tensor,
    pub p: Tensor,
    pub eta: Tensor,
    pub q: Tensor,
}

/// Softmax over the op axis and clamped logistic over edges.
pub fn squash(params: &ArchParams, cfg: &SpaceConfig) -> (Tensor, Tensor) {
    let (l, e, n) = (cfg.layers, cfg.num_edges(), cfg.ops);
    let mut alpha = params.alpha_raw.clone();
    for row in 0..l * e {
        softmax_row(&mut alpha.data_mut()[row * n..(row + 1) * n]);
    }
    let p = params.p_raw.map(sigmoid_clamped);
    debug_assert_eq!(p.shape(), [l, e]);
    (alpha, p)
}

/// Closed-form normalizer of the pattern distribution: Z = 1 − Π(1−p_e).
pub fn closed_form_z(p_row: &[f64]) -> f64 {
    1.0 - p_row.iter().map(|&p| 1.0 - p).product::<f64>()
}

fn pattern_probs_at_layer(p_row: &[f64], cfg: &SpaceConfig, layer: usize) -> Result<Vec<f64>> {
    let m = cfg.num_patterns();
    debug_assert_eq!(p_row.len(), cfg.num_edges());
    let z = closed_form_z(p_row);
    if z < 1e-300 {
        return Err(Error::DegenerateDistribution { layer, z });
    }
    let s: Vec<f64> = p_row
        .iter()
        .map(|&p| log_clamped(p) - log_clamped(1.0 - p))
        .collect();
    let mut eta = vec![0.0; m];
    for (slot, j) in eta.iter_mut().zip(1..=m as u32) {
        let mut acc = 0.0;
        for (e, se) in s.iter().enumerate() {
            if j >> e & 1 == 1 {
                acc += se;
            }
        }
        *slot = acc;
    }
    softmax_row(&mut eta);
    Ok(eta)
}

/// Probability of each of the M non-empty connection patterns for one layer.
pub fn pattern_probs(p_row: &[f64], cfg: &SpaceConfig) -> Result<Vec<f64>> {
    pattern_probs_at_layer(p_row, cfg, 0)
}

/// q_e = Σ_{j ∋ e} η_j.
pub fn edge_marginals(eta_row: &[f64], cfg: &SpaceConfig) -> Vec<f64> {
    let e = cfg.num_edges();
    let mut q = vec![0.0; e];
    for (idx, &val) in eta_row.iter().enumerate() {
        let j = idx as u32 + 1;
        for (ei, slot) in q.iter_mut().enumerate() {
            if j >> ei & 1 == 1 {
                *slot += val;
            }
        }
    }
    q
}

/// Apply the per-row operations over all L layers.
pub fn relax_all(params: &ArchParams, cfg: &SpaceConfig) -> Result<RelaxedState> {
    params.validate(cfg)?;
    let (l, e, m) = (cfg.layers, cfg.num_edges(), cfg.num_patterns());
    let (alpha, p) = squash(params, cfg);
    let mut eta = Tensor::zeros(&[l, m]);
    let mut q = Tensor::zeros(&[l, e]);
    for i in 0..l {
        let row = pattern_probs_at_layer(&p.data()[i * e..(i + 1) * e], cfg, i)?;
        let qrow = edge_marginals(&row, cfg);
        eta.data_mut()[i * m..(i + 1) * m].copy_from_slice(&row);
        q.data_mut()[i * e..(i + 1) * e].copy_from_slice(&qrow);
    }
    Ok(RelaxedState { alpha, p, eta, q })
}

/// Pattern indicator matrix [M, E]: row j-1 is the bit vector of pattern j.
pub fn pattern_matrix(cfg: &SpaceConfig) -> Tensor {
    let (m, e) = (cfg.num_patterns(), cfg.num_edges());
    let mut t = Tensor::zeros(&[m, e]);
    for j in 1..=m as u32 {
        for ei in 0..e {
            if j >> ei & 1 == 1 {
                t.data_mut()[(j as usize - 1) * e + ei] = 1.0;
            }
        }
    }
    t
}

/// Transposed pattern indicator [E, M], the score projection for η.
pub fn pattern_matrix_t(cfg: &SpaceConfig) -> Tensor {
    let (m, e) = (cfg.num_patterns(), cfg.num_edges());
    let cp = pattern_matrix(cfg);
    let mut t = Tensor::zeros(&[e, m]);
    for j in 0..m {
        for ei in 0..e {
            t.data_mut()[ei * m + j] = cp.data()[j * e + ei];
        }
    }
    t
}

/// Tape nodes of the relaxation, for gradient flow back to the raw logits.
pub struct RelaxNodes {
    pub alpha: NodeId,
    pub p: NodeId,
    pub eta: NodeId,
    pub q: NodeId,
}

/// Record the squash and Eq.-style pattern normalization on a tape.
/// Scores are built in log space and normalized with a stable softmax.
pub fn relax_on_tape(tape: &mut Tape, alpha_raw: NodeId, p_raw: NodeId, cfg: &SpaceConfig) -> RelaxNodes {
    let alpha = tape.softmax(alpha_raw, 2);
    let p = tape.sigmoid(p_raw);
    let lp = tape.log_clamped(p);
    let pm = tape.one_minus(p);
    let lm = tape.log_clamped(pm);
    let s = tape.sub(lp, lm);
    let scores = tape.matmul_const(s, pattern_matrix_t(cfg));
    let eta = tape.softmax(scores, 1);
    let q = tape.matmul_const(eta, pattern_matrix(cfg));
    RelaxNodes { alpha, p, eta, q }
}
