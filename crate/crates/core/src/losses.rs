//! Reference calculators for the three training objectives, evaluated on
//! caller-supplied similarities, scores and token probabilities.
//!
//! Embedding contrastive loss, for query `i` of a batch of `M`:
//!
//! ```text
//! loss_i = -ln( e^{s(i,i+)/tau} / sum_j (e^{s(i,j+)/tau} + e^{s(i,j-)/tau}) )
//! ```
//!
//! Reranker contrastive loss with one positive and `m` negatives:
//!
//! ```text
//! loss = -ln( e^{f+/tau} / (e^{f+/tau} + sum_j e^{f_j-/tau}) )
//! ```
//!
//! Autoregressive NLL: `L = -sum_t ln P(x_t | x_<t)`.
//!
//! All logarithms are natural. Softmax denominators use log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMBEDDING_TAU: f64 = 0.05;
pub const DEFAULT_RERANK_NEGATIVES: usize = 3;
pub const DEFAULT_RERANK_TAU: f64 = 1.0;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "temperature must be positive and finite, got {tau}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbeddingBatch")]
pub struct EmbeddingBatch {
    /// `sims_pos[i][j] = sim(x_i, x_j+)`
    sims_pos: Vec<Vec<f64>>,
    /// `sims_neg[i][j] = sim(x_i, x_j-)`
    sims_neg: Vec<Vec<f64>>,
    tau: f64,
}

#[derive(Deserialize)]
struct RawEmbeddingBatch {
    sims_pos: Vec<Vec<f64>>,
    sims_neg: Vec<Vec<f64>>,
    #[serde(default = "default_embedding_tau")]
    tau: f64,
}

fn default_embedding_tau() -> f64 {
    DEFAULT_EMBEDDING_TAU
}

impl TryFrom<RawEmbeddingBatch> for EmbeddingBatch {
    type Error = Error;

    fn try_from(r: RawEmbeddingBatch) -> Result<Self> {
        EmbeddingBatch::new(r.sims_pos, r.sims_neg, r.tau)
    }
}

impl EmbeddingBatch {
    pub fn new(sims_pos: Vec<Vec<f64>>, sims_neg: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let m = sims_pos.len();
        if m == 0 {
            return Err(Error::Domain("embedding batch is empty".into()));
        }
        if sims_neg.len() != m || sims_pos.iter().chain(&sims_neg).any(|row| row.len() != m) {
            return Err(Error::Domain(format!(
                "similarity matrices must both be {m}x{m}"
            )));
        }
        for s in sims_pos.iter().chain(&sims_neg).flatten() {
            if !s.is_finite() {
                return Err(Error::Domain("non-finite similarity".into()));
            }
            if !(-1.0..=1.0).contains(s) {
                return Err(Error::Domain(format!(
                    "cosine similarity {s} outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            sims_pos,
            sims_neg,
            tau,
        })
    }

    pub fn size(&self) -> usize {
        self.sims_pos.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Flattened similarities: `sims_pos` row-major, then `sims_neg`.
    pub fn params(&self) -> Vec<f64> {
        self.sims_pos
            .iter()
            .chain(&self.sims_neg)
            .flatten()
            .copied()
            .collect()
    }

    pub fn from_params(m: usize, tau: f64, params: &[f64]) -> Result<Self> {
        if params.len() != 2 * m * m {
            return Err(Error::Domain(format!(
                "expected {} parameters, got {}",
                2 * m * m,
                params.len()
            )));
        }
        let rows: Vec<Vec<f64>> = params.chunks(m.max(1)).map(<[f64]>::to_vec).collect();
        let (pos, neg) = rows.split_at(m);
        Self::new(pos.to_vec(), neg.to_vec(), tau)
    }

    fn logits(&self, i: usize) -> Vec<f64> {
        self.sims_pos[i]
            .iter()
            .chain(&self.sims_neg[i])
            .map(|s| s / self.tau)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLoss {
    pub per_example: Vec<f64>,
    pub mean: f64,
}

pub fn embedding_contrastive_loss(batch: &EmbeddingBatch) -> EmbeddingLoss {
    let per_example: Vec<f64> = (0..batch.size())
        .map(|i| log_sum_exp(&batch.logits(i)) - batch.sims_pos[i][i] / batch.tau)
        .collect();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    EmbeddingLoss { per_example, mean }
}

/// Closed-form gradient of the mean loss, laid out like [`EmbeddingBatch::params`].
pub fn embedding_loss_gradient(batch: &EmbeddingBatch) -> Vec<f64> {
    let m = batch.size();
    let mut d_pos = vec![0.0; m * m];
    let mut d_neg = vec![0.0; m * m];
    for i in 0..m {
        let logits = batch.logits(i);
        let lse = log_sum_exp(&logits);
        for j in 0..m {
            let p_pos = (logits[j] - lse).exp();
            let p_neg = (logits[m + j] - lse).exp();
            let delta = if i == j { 1.0 } else { 0.0 };
            d_pos[i * m + j] = (p_pos - delta) / (batch.tau * m as f64);
            d_neg[i * m + j] = p_neg / (batch.tau * m as f64);
        }
    }
    d_pos.extend(d_neg);
    d_pos
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRerankBatch")]
pub struct RerankBatch {
    pos_score: f64,
    neg_scores: Vec<f64>,
    tau: f64,
}

#[derive(Deserialize)]
struct RawRerankBatch {
    pos_score: f64,
    neg_scores: Vec<f64>,
    #[serde(default = "default_rerank_tau")]
    tau: f64,
}

fn default_rerank_tau() -> f64 {
    DEFAULT_RERANK_TAU
}

impl TryFrom<RawRerankBatch> for RerankBatch {
    type Error = Error;

    fn try_from(r: RawRerankBatch) -> Result<Self> {
        RerankBatch::new(r.pos_score, r.neg_scores, r.tau)
    }
}

impl RerankBatch {
    pub fn new(pos_score: f64, neg_scores: Vec<f64>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if neg_scores.is_empty() {
            return Err(Error::Domain(
                "reranker loss needs at least one negative".into(),
            ));
        }
        if !pos_score.is_finite() || neg_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("non-finite reranker score".into()));
        }
        Ok(Self {
            pos_score,
            neg_scores,
            tau,
        })
    }

    pub fn negatives(&self) -> usize {
        self.neg_scores.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `[pos_score, neg_scores...]`
    pub fn params(&self) -> Vec<f64> {
        std::iter::once(self.pos_score)
            .chain(self.neg_scores.iter().copied())
            .collect()
    }

    pub fn from_params(tau: f64, params: &[f64]) -> Result<Self> {
        let (pos, neg) = params
            .split_first()
            .ok_or_else(|| Error::Domain("empty reranker parameters".into()))?;
        Self::new(*pos, neg.to_vec(), tau)
    }

    fn logits(&self) -> Vec<f64> {
        self.params().iter().map(|s| s / self.tau).collect()
    }
}

pub fn reranker_contrastive_loss(batch: &RerankBatch) -> f64 {
    let logits = batch.logits();
    log_sum_exp(&logits) - logits[0]
}

/// Gradient laid out like [`RerankBatch::params`].
pub fn reranker_loss_gradient(batch: &RerankBatch) -> Vec<f64> {
    let logits = batch.logits();
    let lse = log_sum_exp(&logits);
    logits
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let p = (l - lse).exp();
            if j == 0 {
                (p - 1.0) / batch.tau
            } else {
                p / batch.tau
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence")]
pub struct TokenSequenceLikelihood {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSequence {
    probs: Vec<f64>,
}

impl TryFrom<RawSequence> for TokenSequenceLikelihood {
    type Error = Error;

    fn try_from(r: RawSequence) -> Result<Self> {
        TokenSequenceLikelihood::new(r.probs)
    }
}

impl TokenSequenceLikelihood {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::Domain(format!(
                "token probability {p} outside (0, 1]"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn concat(&self, other: &Self) -> Self {
        Self {
            probs: self.probs.iter().chain(&other.probs).copied().collect(),
        }
    }
}

pub fn autoregressive_nll(seq: &TokenSequenceLikelihood) -> f64 {
    -seq.probs.iter().map(|p| p.ln()).sum::<f64>()
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let up = f(&x)?;
        x[i] = point[i] - h;
        let down = f(&x)?;
        x[i] = point[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Input document for the `loss eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Embedding,
    Reranker,
    Nll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kind: LossKind,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_example: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finite_difference: Option<Vec<f64>>,
}

/// Parses a batch document of `kind` and evaluates the loss, its
/// closed-form gradient and a central-difference check.
pub fn evaluate_loss_json(kind: LossKind, bytes: &[u8]) -> Result<LossReport> {
    let parse_err = |e: serde_json::Error| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    };
    match kind {
        LossKind::Embedding => {
            let b: EmbeddingBatch = serde_json::from_slice(bytes).map_err(parse_err)?;
            let loss = embedding_contrastive_loss(&b);
            let (m, tau) = (b.size(), b.tau());
            // The check perturbs every similarity, so it is only meaningful
            // away from the [-1, 1] boundary.
            let fd = finite_difference_gradient(
                |p| {
                    EmbeddingBatch::from_params(m, tau, p)
                        .map(|b| embedding_contrastive_loss(&b).mean)
                },
                &b.params(),
                DEFAULT_FD_STEP,
            )
            .ok();
            Ok(LossReport {
                kind,
                loss: loss.mean,
                per_example: Some(loss.per_example),
                gradient: Some(embedding_loss_gradient(&b)),
                finite_difference: fd,
            })
        }
        LossKind::Reranker => {
            let b: RerankBatch = serde_json::from_slice(bytes).map_err(parse_err)?;
            let tau = b.tau();
            let fd = finite_difference_gradient(
                |p| RerankBatch::from_params(tau, p).map(|b| reranker_contrastive_loss(&b)),
                &b.params(),
                DEFAULT_FD_STEP,
            )?;
            Ok(LossReport {
                kind,
                loss: reranker_contrastive_loss(&b),
                per_example: None,
                gradient: Some(reranker_loss_gradient(&b)),
                finite_difference: Some(fd),
            })
        }
        LossKind::Nll => {
            let s: TokenSequenceLikelihood = serde_json::from_slice(bytes).map_err(parse_err)?;
            Ok(LossReport {
                kind,
                loss: autoregressive_nll(&s),
                per_example: None,
                gradient: None,
                finite_difference: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn embedding_single_pair() {
        let b = EmbeddingBatch::new(vec![vec![1.0]], vec![vec![0.0]], 1.0).unwrap();
        let l = embedding_contrastive_loss(&b);
        assert_abs_diff_eq!(l.mean, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l.mean, 0.313_262, epsilon = 1e-6);
    }

    #[test]
    fn embedding_uniform_is_ln_2m() {
        for m in 1..6 {
            let b =
                EmbeddingBatch::new(vec![vec![0.3; m]; m], vec![vec![0.3; m]; m], 0.05).unwrap();
            let l = embedding_contrastive_loss(&b);
            for v in l.per_example {
                assert_abs_diff_eq!(v, (2.0 * m as f64).ln(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reranker_values() {
        let b = RerankBatch::new(2.0, vec![0.0; 3], 1.0).unwrap();
        assert_abs_diff_eq!(
            reranker_contrastive_loss(&b),
            (1.0 + 3.0 * (-2f64).exp()).ln(),
            epsilon = 1e-12
        );
        let u = RerankBatch::new(0.4, vec![0.4; 3], 0.7).unwrap();
        assert_abs_diff_eq!(reranker_contrastive_loss(&u), 4f64.ln(), epsilon = 1e-12);
        assert!(RerankBatch::new(1.0, vec![], 1.0).is_err());
        assert!(RerankBatch::new(1.0, vec![0.0], 0.0).is_err());
    }

    #[test]
    fn reranker_gradient_at_uniform_point() {
        let b = RerankBatch::new(0.0, vec![0.0; 3], 1.0).unwrap();
        let g = reranker_loss_gradient(&b);
        assert_abs_diff_eq!(g[0], -0.75, epsilon = 1e-12);
        let fd = finite_difference_gradient(
            |p| RerankBatch::from_params(1.0, p).map(|b| reranker_contrastive_loss(&b)),
            &b.params(),
            1e-4,
        )
        .unwrap();
        assert_abs_diff_eq!(fd[0], -0.75, epsilon = 1e-5);
        assert_abs_diff_eq!(fd[1], fd[2], epsilon = 1e-9);
        assert_abs_diff_eq!(fd[2], fd[3], epsilon = 1e-9);
    }

    #[test]
    fn nll_values() {
        let s = TokenSequenceLikelihood::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(autoregressive_nll(&s), 0.0);
        let s = TokenSequenceLikelihood::new(vec![0.5, 0.25]).unwrap();
        assert_abs_diff_eq!(autoregressive_nll(&s), 2.079_442, epsilon = 1e-6);
        assert!(TokenSequenceLikelihood::new(vec![0.0]).is_err());
        assert!(TokenSequenceLikelihood::new(vec![1.5]).is_err());
    }

    #[test]
    fn domain_errors() {
        assert!(EmbeddingBatch::new(vec![vec![1.0]], vec![vec![0.0]], -1.0).is_err());
        assert!(EmbeddingBatch::new(vec![vec![f64::NAN]], vec![vec![0.0]], 1.0).is_err());
        assert!(EmbeddingBatch::new(vec![vec![1.0, 0.0]], vec![vec![0.0]], 1.0).is_err());
        assert!(finite_difference_gradient(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn lse_is_stable() {
        assert_abs_diff_eq!(
            log_sum_exp(&[1000.0, 1000.0]),
            1000.0 + 2f64.ln(),
            epsilon = 1e-9
        );
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        // tau = 0.05 turns sim 1 into logit 20; huge but finite
        let b = EmbeddingBatch::new(vec![vec![1.0]], vec![vec![-1.0]], 0.001).unwrap();
        assert!(embedding_contrastive_loss(&b).mean.is_finite());
    }

    #[test]
    fn json_inputs() {
        let r = evaluate_loss_json(
            LossKind::Reranker,
            br#"{"pos_score": 2.0, "neg_scores": [0, 0, 0]}"#,
        )
        .unwrap();
        assert_abs_diff_eq!(r.loss, (1.0 + 3.0 * (-2f64).exp()).ln(), epsilon = 1e-12);
        let r = evaluate_loss_json(
            LossKind::Embedding,
            br#"{"sims_pos": [[0.5]], "sims_neg": [[0.1]]}"#,
        )
        .unwrap();
        assert!(r.finite_difference.is_some());
        let r = evaluate_loss_json(LossKind::Nll, br#"{"probs": [0.5, 0.25]}"#).unwrap();
        assert_abs_diff_eq!(r.loss, 8f64.ln(), epsilon = 1e-12);
        assert!(evaluate_loss_json(LossKind::Nll, br#"{"probs": [0]}"#).is_err());
        assert!(evaluate_loss_json(LossKind::Embedding, b"{").is_err());
    }
}
