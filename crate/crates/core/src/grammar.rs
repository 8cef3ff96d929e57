//! Grammar-constrained token sampling.
//!
//! Expressions are sampled position by position from per-position categorical
//! distributions. At each position the candidate row is multiplied by a
//! validity mask; a token is valid only when placing it keeps the sequence
//! completable inside the token budget, respects the constant limit, and
//! never nests `sin`/`cos` inside another trig subtree. When the masked row
//! has zero mass, sampling falls back to the uniform distribution over the
//! valid set, which guarantees progress.
//!
//! The pinned variant additionally conditions on tokens fixed by earlier
//! denoising steps. A dynamic-programming reachability table over (position,
//! pending-slot count) makes the mask exact for arity, budget, padding, and
//! constant-count interactions with the pins; pinned trig tokens keep a
//! conservative guard instead (no new trig is opened while a pinned trig
//! lies ahead), and the rare residual conflict surfaces as an error so the
//! caller can redraw rather than overwrite a pinned token.

use crate::expr::{TokenId, TokenKind, TokenLibrary, TokenSequence, MAX_CONSTANTS};
use crate::Mat;
use rand::Rng;
use std::collections::VecDeque;
use thiserror::Error;

/// Incremental state of a partially sampled BFS token sequence.
#[derive(Debug, Clone)]
pub struct ConstraintState<'a> {
    lib: &'a TokenLibrary,
    budget: usize,
    tokens: Vec<TokenId>,
    /// Unfilled child slots in FIFO order; the flag records whether the slot
    /// lies inside a trig subtree.
    slots: VecDeque<bool>,
    constants_used: usize,
    /// Per placed position: inside a trig subtree?
    trig_ancestry: Vec<bool>,
}

impl<'a> ConstraintState<'a> {
    pub fn new(lib: &'a TokenLibrary, budget: usize) -> Self {
        assert!(budget >= 1);
        ConstraintState {
            lib,
            budget,
            tokens: Vec::new(),
            slots: VecDeque::from([false]),
            constants_used: 0,
            trig_ancestry: Vec::new(),
        }
    }

    pub fn position(&self) -> usize {
        self.tokens.len()
    }

    /// Count of unfilled child slots; zero exactly when the partial sequence
    /// decodes to a complete tree.
    pub fn pending_arity(&self) -> usize {
        self.slots.len()
    }

    pub fn is_complete(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn constants_used(&self) -> usize {
        self.constants_used
    }

    pub fn remaining_budget(&self) -> usize {
        self.budget - self.tokens.len()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn trig_ancestry(&self) -> &[bool] {
        &self.trig_ancestry
    }

    /// Whether the next position's slot sits inside a trig subtree.
    pub fn next_slot_in_trig(&self) -> bool {
        self.slots.front().copied().unwrap_or(false)
    }

    /// Places a token, consuming the front slot and queueing its children.
    pub fn push(&mut self, tok: TokenId) {
        assert!(self.tokens.len() < self.budget, "token budget exhausted");
        let in_trig = if self.is_complete() {
            debug_assert!(matches!(self.lib.kind(tok), TokenKind::Pad));
            false
        } else {
            let slot = self.slots.pop_front().unwrap();
            let child_flag = slot || self.lib.is_trig(tok);
            for _ in 0..self.lib.arity(tok) {
                self.slots.push_back(child_flag);
            }
            slot
        };
        if matches!(self.lib.kind(tok), TokenKind::ConstPlaceholder) {
            self.constants_used += 1;
        }
        self.trig_ancestry.push(in_trig);
        self.tokens.push(tok);
    }

    /// Validity mask for the next position: entry `true` iff placing that
    /// token keeps the sequence completable within the budget. Once the tree
    /// is complete only PAD is valid.
    pub fn valid_token_mask(&self) -> Vec<bool> {
        let d = self.lib.len();
        let mut mask = vec![false; d];
        if self.is_complete() {
            mask[self.lib.pad_id()] = true;
            return mask;
        }
        let pending = self.pending_arity();
        let remaining = self.remaining_budget();
        debug_assert!(remaining >= 1);
        let in_trig = self.next_slot_in_trig();
        for id in 0..d {
            let kind = self.lib.kind(id);
            if matches!(kind, TokenKind::Pad) {
                continue;
            }
            // After placing, pending-1+arity slots remain and remaining-1
            // positions are left; each slot needs at least one token.
            let arity = kind.arity();
            if pending - 1 + arity > remaining - 1 {
                continue;
            }
            if matches!(kind, TokenKind::ConstPlaceholder)
                && self.constants_used >= MAX_CONSTANTS
            {
                continue;
            }
            if in_trig && matches!(kind, TokenKind::Unary(op) if op.is_trig()) {
                continue;
            }
            mask[id] = true;
        }
        mask
    }
}

/// Draws one token from `probs` restricted to `mask`, falling back to the
/// uniform distribution over the valid set when the masked row has no mass.
/// Inverse-CDF over the fixed token order keeps draws reproducible.
fn draw_masked(probs: &[f64], mask: &[bool], rng: &mut impl Rng) -> TokenId {
    let mut total = 0.0;
    for (p, &ok) in probs.iter().zip(mask.iter()) {
        if ok {
            total += p.max(0.0);
        }
    }
    let uniform = total <= 0.0;
    if uniform {
        total = mask.iter().filter(|&&ok| ok).count() as f64;
        debug_assert!(total > 0.0, "mask admits no token");
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_valid = 0;
    for (id, &ok) in mask.iter().enumerate() {
        if !ok {
            continue;
        }
        last_valid = id;
        acc += if uniform { 1.0 } else { probs[id].max(0.0) };
        if u < acc {
            return id;
        }
    }
    last_valid
}

/// Samples a complete expression from an `M x d` matrix of per-position
/// categorical distributions (rows past the point of completion are ignored;
/// generation stops as soon as the tree closes).
pub fn constrained_sample(
    lib: &TokenLibrary,
    probs: &Mat,
    rng: &mut impl Rng,
) -> TokenSequence {
    let m = probs.rows();
    assert_eq!(probs.cols(), lib.len());
    let mut state = ConstraintState::new(lib, m);
    for i in 0..m {
        let mask = state.valid_token_mask();
        let tok = draw_masked(probs.row(i), &mask, rng);
        state.push(tok);
        if state.is_complete() {
            break;
        }
    }
    debug_assert!(state.is_complete(), "completability mask must close the tree");
    TokenSequence::new(state.tokens.clone())
}

/// A pinned token could not keep its committed value.
#[derive(Debug, Error, PartialEq)]
#[error("pinned token at position {position} is inconsistent with the sampled prefix")]
pub struct PinConflict {
    pub position: usize,
}

/// Backward reachability for sampling under pins.
///
/// `feasible[j][s]` answers: about to place position `j` with `s` unfilled
/// slots, can the sequence still close at some length compatible with every
/// pinned token? Entry `[j][0]` covers "the tree closed before `j`", which
/// requires all remaining pins to be PAD.
struct PinFeasibility {
    m: usize,
    feasible: Vec<Vec<bool>>,
    /// Number of pinned constant placeholders at or after each position.
    pinned_consts_from: Vec<usize>,
    /// Number of pinned trig tokens at or after each position.
    pinned_trig_from: Vec<usize>,
}

impl PinFeasibility {
    fn build(lib: &TokenLibrary, pins: &[Option<TokenId>]) -> Self {
        let m = pins.len();
        let mut feasible = vec![vec![false; m + 2]; m + 1];
        let mut pinned_consts_from = vec![0usize; m + 1];
        let mut pinned_trig_from = vec![0usize; m + 1];
        for j in (0..m).rev() {
            let (c, t) = match pins[j] {
                Some(id) => (
                    matches!(lib.kind(id), TokenKind::ConstPlaceholder) as usize,
                    lib.is_trig(id) as usize,
                ),
                None => (0, 0),
            };
            pinned_consts_from[j] = pinned_consts_from[j + 1] + c;
            pinned_trig_from[j] = pinned_trig_from[j + 1] + t;
        }
        // Closed-tree states: "already closed before j" is fine only when no
        // pinned non-PAD token remains at or after j.
        feasible[m][0] = true;
        for j in (0..m).rev() {
            let pin_blocks = matches!(pins[j], Some(id) if !matches!(lib.kind(id), TokenKind::Pad));
            feasible[j][0] = feasible[j + 1][0] && !pin_blocks;
        }
        for j in (0..m).rev() {
            for s in 1..=(m - j) {
                let reach = |s_next: usize| feasible[j + 1][s_next];
                let ok = match pins[j] {
                    Some(id) => match lib.kind(id) {
                        TokenKind::Pad => false, // a slot cannot take PAD
                        kind => reach(s - 1 + kind.arity()),
                    },
                    None => {
                        reach(s - 1) || reach(s) || (s - 1 + 2 <= m - j - 1 && reach(s + 1))
                    }
                };
                feasible[j][s] = ok;
            }
        }
        PinFeasibility { m, feasible, pinned_consts_from, pinned_trig_from }
    }

    fn ok(&self, j: usize, s: usize) -> bool {
        j <= self.m && s < self.feasible[j].len() && self.feasible[j][s]
    }
}

/// Samples a full `M`-position assignment (expression prefix plus PAD tail)
/// consistent with every pinned token. Free positions draw from `probs`
/// through the exact mask; pinned positions keep their token. Returns the
/// full assignment, or a conflict if a pinned token cannot be honored (the
/// caller is expected to redraw).
pub fn constrained_sample_pinned(
    lib: &TokenLibrary,
    probs: &Mat,
    pins: &[Option<TokenId>],
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>, PinConflict> {
    let m = pins.len();
    assert_eq!(probs.rows(), m);
    assert_eq!(probs.cols(), lib.len());
    let feas = PinFeasibility::build(lib, pins);
    let mut state = ConstraintState::new(lib, m);
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        if state.is_complete() {
            // PAD tail; every remaining pin must be PAD (FEAS guarantees it
            // unless a pin conflicted earlier).
            match pins[j] {
                Some(id) if !matches!(lib.kind(id), TokenKind::Pad) => {
                    return Err(PinConflict { position: j });
                }
                _ => {
                    out.push(lib.pad_id());
                    state.push(lib.pad_id());
                    continue;
                }
            }
        }
        let pending = state.pending_arity();
        let mut mask = state.valid_token_mask();
        // Tighten by pin-aware feasibility.
        for id in 0..lib.len() {
            if !mask[id] {
                continue;
            }
            let kind = lib.kind(id);
            if !feas.ok(j + 1, pending - 1 + kind.arity()) {
                mask[id] = false;
                continue;
            }
            // Reserve constant budget for pinned constants ahead.
            if matches!(kind, TokenKind::ConstPlaceholder)
                && pins[j].is_none()
                && state.constants_used() + 1 + feas.pinned_consts_from[j + 1]
                    > MAX_CONSTANTS
            {
                mask[id] = false;
                continue;
            }
            // Conservative: never open a new trig subtree while a pinned
            // trig token lies ahead, so pins cannot end up trig-nested.
            if pins[j].is_none() && lib.is_trig(id) && feas.pinned_trig_from[j + 1] > 0 {
                mask[id] = false;
            }
        }
        let tok = match pins[j] {
            Some(id) => {
                if !mask[id] {
                    return Err(PinConflict { position: j });
                }
                id
            }
            None => {
                if mask.iter().all(|&ok| !ok) {
                    return Err(PinConflict { position: j });
                }
                draw_masked(probs.row(j), &mask, rng)
            }
        };
        out.push(tok);
        state.push(tok);
    }
    if !state.is_complete() {
        return Err(PinConflict { position: m });
    }
    Ok(out)
}
