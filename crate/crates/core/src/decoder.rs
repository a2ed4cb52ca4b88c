//! Monotonic beam-search first pass and the rescoring rules.
//!
//! Decoding runs time-synchronously: at each frame a hypothesis either emits
//! blank or exactly one non-blank label, then the frame advances. Hypotheses
//! that differ only in the time placement of their labels are merged by
//! logsumexp of path scores, matching the sum semantics of the training
//! posterior. Fusion happens purely in rescoring over cached component
//! scores, so all methods share one n-best list.

use std::collections::{BTreeMap, HashMap};

use crate::error::Error;
use crate::lstm::StackState;
use crate::numerics::{log_add, Vector};
use crate::transducer::TransducerModel;
use crate::vocab::{TokenId, TokenSequence};
use crate::{FeatureSequence, Result};

pub const SCORER_ELM: &str = "elm";
pub const SCORER_ILM_DR: &str = "ilm_dr";
pub const SCORER_ILM_ILME: &str = "ilm_ilme";
pub const SCORER_ILM_LODR: &str = "ilm_lodr";
pub const SCORER_ILM_LODR_EXT: &str = "ilm_lodr_ext";

/// One first-pass hypothesis with its cached component scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    /// Alignment-summed first-pass transducer log-score.
    pub logp_rnnt: f64,
    /// scorer-id → sequence log-score, filled by `attach_lm_scores`.
    pub cached_scores: BTreeMap<String, f64>,
}

impl Hypothesis {
    pub fn new(tokens: TokenSequence, logp_rnnt: f64) -> Self {
        Hypothesis {
            tokens,
            logp_rnnt,
            cached_scores: BTreeMap::new(),
        }
    }

    /// |Y|: non-blank token count.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn score(&self, id: &str) -> Result<f64> {
        self.cached_scores.get(id).copied().ok_or_else(|| {
            Error::contract(format!("hypothesis lacks cached score {id:?}"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMethod {
    NoLm,
    Sf,
    Dr,
    Ilme,
    Lodr,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [
        FusionMethod::NoLm,
        FusionMethod::Sf,
        FusionMethod::Dr,
        FusionMethod::Ilme,
        FusionMethod::Lodr,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMethod::NoLm),
            "sf" => Ok(FusionMethod::Sf),
            "dr" => Ok(FusionMethod::Dr),
            "ilme" => Ok(FusionMethod::Ilme),
            "lodr" => Ok(FusionMethod::Lodr),
            other => Err(Error::config(format!("unknown fusion method {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMethod::NoLm => "none",
            FusionMethod::Sf => "sf",
            FusionMethod::Dr => "dr",
            FusionMethod::Ilme => "ilme",
            FusionMethod::Lodr => "lodr",
        }
    }

    /// Pretty name for report rows.
    pub fn label(&self) -> &'static str {
        match self {
            FusionMethod::NoLm => "No LM",
            FusionMethod::Sf => "SF",
            FusionMethod::Dr => "DR",
            FusionMethod::Ilme => "ILME",
            FusionMethod::Lodr => "LODR",
        }
    }

    /// Which cached score serves as this method's internal LM estimate.
    pub fn ilm_scorer_id(&self) -> Option<&'static str> {
        match self {
            FusionMethod::NoLm | FusionMethod::Sf => None,
            FusionMethod::Dr => Some(SCORER_ILM_DR),
            FusionMethod::Ilme => Some(SCORER_ILM_ILME),
            FusionMethod::Lodr => Some(SCORER_ILM_LODR),
        }
    }

    /// Does this method search over λ0 as well?
    pub fn uses_ilm(&self) -> bool {
        self.ilm_scorer_id().is_some()
    }
}

/// Method tag plus interpolation weights: λ0 scales the internal LM
/// (sign-unconstrained), λ1 the external LM, β the length reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub lambda0: f64,
    pub lambda1: f64,
    pub beta: f64,
}

impl FusionConfig {
    pub fn no_lm() -> Self {
        FusionConfig {
            method: FusionMethod::NoLm,
            lambda0: 0.0,
            lambda1: 0.0,
            beta: 0.0,
        }
    }

    pub fn new(method: FusionMethod, lambda0: f64, lambda1: f64, beta: f64) -> Self {
        FusionConfig {
            method,
            lambda0,
            lambda1,
            beta,
        }
    }
}

struct BeamEntry {
    tokens: TokenSequence,
    score: f64,
    g: Vector,
    pn_state: StackState,
}

/// Deterministic hypothesis order: score desc, then shorter, then
/// lexicographic tokens.
fn order_key(
    score_a: f64,
    tokens_a: &[TokenId],
    score_b: f64,
    tokens_b: &[TokenId],
) -> std::cmp::Ordering {
    score_b
        .partial_cmp(&score_a)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| tokens_a.len().cmp(&tokens_b.len()))
        .then_with(|| tokens_a.cmp(tokens_b))
}

/// Time-synchronous monotonic beam search. Returns up to `beam` distinct
/// label sequences sorted by descending alignment-summed score.
pub fn beam_search(
    model: &TransducerModel,
    x: &FeatureSequence,
    beam: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::input("beam width must be at least 1"));
    }
    if x.is_empty() {
        return Err(Error::input("cannot decode zero frames"));
    }
    let f = model.encode(x)?;
    let (g0, s0) = model.pn_start()?;
    let mut entries = vec![BeamEntry {
        tokens: Vec::new(),
        score: 0.0,
        g: g0,
        pn_state: s0,
    }];

    let n_tokens = model.vocab_size();
    for ft in &f {
        // key → (merged score, parent index, emitted token)
        let mut merged: HashMap<TokenSequence, (f64, usize, Option<TokenId>)> = HashMap::new();
        for (pi, entry) in entries.iter().enumerate() {
            let lp = model.joint_logprobs(&entry.g, ft)?;
            // blank: sequence unchanged
            let blank_score = entry.score + lp[0];
            merged
                .entry(entry.tokens.clone())
                .and_modify(|slot| slot.0 = log_add(slot.0, blank_score))
                .or_insert((blank_score, pi, None));
            // at most one label per frame
            for v in 0..n_tokens {
                let mut seq = entry.tokens.clone();
                seq.push(v);
                let s = entry.score + lp[1 + v];
                merged
                    .entry(seq)
                    .and_modify(|slot| slot.0 = log_add(slot.0, s))
                    .or_insert((s, pi, Some(v)));
            }
        }
        let mut candidates: Vec<(TokenSequence, (f64, usize, Option<TokenId>))> =
            merged.into_iter().collect();
        candidates.sort_by(|a, b| order_key(a.1 .0, &a.0, b.1 .0, &b.0));
        candidates.truncate(beam);

        let mut next = Vec::with_capacity(candidates.len());
        for (tokens, (score, pi, emitted)) in candidates {
            let (g, pn_state) = match emitted {
                None => (entries[pi].g.clone(), entries[pi].pn_state.clone()),
                Some(v) => model.pn_step(&entries[pi].pn_state, v)?,
            };
            next.push(BeamEntry {
                tokens,
                score,
                g,
                pn_state,
            });
        }
        entries = next;
    }

    Ok(entries
        .into_iter()
        .map(|e| Hypothesis::new(e.tokens, e.score))
        .collect())
}

/// A sequence-level scoring function to cache under a scorer id.
pub type ScorerFn<'a> = Box<dyn Fn(&TokenSequence) -> Result<f64> + 'a>;

/// Fill each hypothesis's cached score per scorer. A scorer failure drops
/// the hypothesis and records a warning; idempotent for deterministic
/// scorers.
pub fn attach_lm_scores(
    nbest: &mut Vec<Hypothesis>,
    scorers: &[(String, ScorerFn)],
) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut survivors = Vec::with_capacity(nbest.len());
    'hyp: for mut h in nbest.drain(..) {
        for (id, f) in scorers {
            match f(&h.tokens) {
                Ok(s) => {
                    h.cached_scores.insert(id.clone(), s);
                }
                Err(e) => {
                    warnings.push(format!(
                        "dropping hypothesis {:?}: scorer {id} failed: {e}",
                        h.tokens
                    ));
                    continue 'hyp;
                }
            }
        }
        survivors.push(h);
    }
    *nbest = survivors;
    warnings
}

/// Combined rescoring score with an explicit internal-LM column; exposed
/// so the external-corpus ablation can swap the column.
pub fn combined_score_with(
    h: &Hypothesis,
    cfg: &FusionConfig,
    ilm_id: Option<&str>,
) -> Result<f64> {
    let base = h.logp_rnnt;
    match cfg.method {
        FusionMethod::NoLm => Ok(base),
        FusionMethod::Sf => {
            Ok(base + cfg.lambda1 * h.score(SCORER_ELM)? + cfg.beta * h.len() as f64)
        }
        FusionMethod::Dr | FusionMethod::Ilme | FusionMethod::Lodr => {
            let id =
                ilm_id.unwrap_or_else(|| cfg.method.ilm_scorer_id().expect("method has an ilm"));
            Ok(base
                + cfg.lambda0 * h.score(id)?
                + cfg.lambda1 * h.score(SCORER_ELM)?
                + cfg.beta * h.len() as f64)
        }
    }
}

/// log P_RNN-T + λ0·log P_ILM + λ1·log P_ELM + β·|Y| (terms per method).
pub fn combined_score(h: &Hypothesis, cfg: &FusionConfig) -> Result<f64> {
    combined_score_with(h, cfg, None)
}

/// Re-rank by descending combined score; ties break toward shorter, then
/// lexicographically smaller token sequences.
pub fn rescore(nbest: &[Hypothesis], cfg: &FusionConfig) -> Result<Vec<Hypothesis>> {
    rescore_with_ilm(nbest, cfg, None)
}

pub fn rescore_with_ilm(
    nbest: &[Hypothesis],
    cfg: &FusionConfig,
    ilm_id: Option<&str>,
) -> Result<Vec<Hypothesis>> {
    if nbest.is_empty() {
        return Err(Error::input("rescore: empty n-best list"));
    }
    let mut scored: Vec<(f64, &Hypothesis)> = Vec::with_capacity(nbest.len());
    for h in nbest {
        scored.push((combined_score_with(h, cfg, ilm_id)?, h));
    }
    scored.sort_by(|a, b| order_key(a.0, &a.1.tokens, b.0, &b.1.tokens));
    Ok(scored.into_iter().map(|(_, h)| h.clone()).collect())
}
