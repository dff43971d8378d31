//! Trie-constrained beam search over Rec-ID tokens.

use std::cmp::Ordering;

use crate::numeric::log_softmax;
use crate::rec_id::{RecIdRegistry, BOS};
use crate::recommender::{DecoderState, Memory, RecError, Transformer};

#[derive(Clone, Debug)]
struct Beam {
    prefix: Vec<usize>,
    score: f64,
    state: DecoderState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Up to `k` `(item, log-probability)` pairs, best first.
    pub items: Vec<(usize, f64)>,
    /// Every complete hypothesis left in the beam, best first.
    pub sequences: Vec<(Vec<usize>, f64)>,
    /// Fewer than `k` items were reachable after exclusions.
    pub short: bool,
}

fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Decodes `id_len` tokens keeping the `beam_width` best prefixes (score
/// descending, then token order), expanding only trie children. Complete
/// IDs are mapped to items, items in the sorted `exclude` list are
/// dropped, and the first `k` remaining are returned.
pub fn beam_search(
    model: &Transformer,
    memory: &Memory,
    registry: &RecIdRegistry,
    k: usize,
    beam_width: usize,
    exclude: &[usize],
) -> Result<BeamResult, RecError> {
    let width = beam_width.max(1);
    let mut beams = vec![Beam {
        prefix: Vec::new(),
        score: 0.0,
        state: model.start_state(),
    }];
    for _ in 0..registry.vocab().id_len() {
        let mut candidates: Vec<(Vec<usize>, f64, usize)> = Vec::new();
        for (b, beam) in beams.iter_mut().enumerate() {
            let last = beam.prefix.last().copied().unwrap_or(BOS);
            let logits = model.step(memory, &mut beam.state, last)?;
            let logp = log_softmax(&logits);
            for t in registry.valid_next_tokens(&beam.prefix) {
                let mut p = beam.prefix.clone();
                p.push(t);
                candidates.push((p, beam.score + logp[t], b));
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        candidates.truncate(width);
        beams = candidates
            .into_iter()
            .map(|(prefix, score, b)| Beam {
                prefix,
                score,
                state: beams[b].state.clone(),
            })
            .collect();
        if beams.is_empty() {
            break;
        }
    }
    let mut sequences: Vec<(Vec<usize>, f64)> = beams.into_iter().map(|b| (b.prefix, b.score)).collect();
    sequences.sort_by(rank);
    let mut items = Vec::with_capacity(k);
    for (tokens, score) in &sequences {
        let item = registry
            .item(tokens)
            .ok_or_else(|| RecError::UnknownRecId(tokens.clone()))?;
        if exclude.binary_search(&item).is_ok() {
            continue;
        }
        if items.len() < k {
            items.push((item, *score));
        }
    }
    Ok(BeamResult {
        short: items.len() < k,
        items,
        sequences,
    })
}

/// Teacher-forced log-probability of `item`'s Rec-ID, computed with the
/// same incremental decoder the search uses.
pub fn score_item(
    model: &Transformer,
    memory: &Memory,
    registry: &RecIdRegistry,
    item: usize,
) -> Result<f64, RecError> {
    if item >= registry.n_items() {
        return Err(RecError::UnknownItem(item));
    }
    score_tokens(model, memory, &registry.tokens(item))
}

pub fn score_tokens(model: &Transformer, memory: &Memory, tokens: &[usize]) -> Result<f64, RecError> {
    let mut state = model.start_state();
    let mut last = BOS;
    let mut total = 0.0;
    for &t in tokens {
        let logits = model.step(memory, &mut state, last)?;
        total += log_softmax(&logits)[t];
        last = t;
    }
    Ok(total)
}
