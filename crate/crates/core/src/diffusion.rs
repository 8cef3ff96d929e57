//! Single-token masking diffusion and the iterative denoising sampler,
//! plus the uniform-mixing discrete diffusion used as an ablation baseline.
//!
//! The forward process zeroes exactly one token row per step, chosen
//! uniformly among the not-yet-masked positions. Generation starts from the
//! all-masked matrix and walks backward: the model predicts per-position
//! distributions over the clean matrix, all masked rows are redrawn under
//! the grammar (with already-reconstructed tokens pinned), and one masked
//! position is committed per step, so reconstruction happens one token at a
//! time in random order. Generation stops early once the committed prefix
//! decodes to a complete expression.

use crate::expr::{bfs_decode, DecodeStatus, TokenId, TokenKind, TokenLibrary, TokenSequence};
use crate::grammar::constrained_sample_pinned;
use crate::net::Denoiser;
use crate::Mat;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("nothing left to mask: t = M = {0}")]
    FullyMasked(usize),
    #[error("step {t} outside 0..={m}")]
    StepOutOfRange { t: usize, m: usize },
    #[error("matrix is not at t=0")]
    NotClean,
}

/// An `M x d` token matrix: one-hot rows for placed tokens (PAD included),
/// all-zero rows for masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: Mat,
    /// Masked indices in masking order; `len()` is the step t.
    masked: Vec<usize>,
    /// Non-PAD token count of the underlying clean matrix.
    origin_length: usize,
}

impl TokenMatrix {
    /// Builds the clean matrix X_0 for a complete expression: one-hot token
    /// rows followed by PAD one-hots.
    pub fn from_sequence(seq: &TokenSequence, lib: &TokenLibrary, m: usize) -> Self {
        assert!(seq.len() <= m, "sequence longer than budget");
        let mut rows = Mat::zeros(m, lib.len());
        for (i, &id) in seq.ids().iter().enumerate() {
            rows.set(i, id, 1.0);
        }
        for i in seq.len()..m {
            rows.set(i, lib.pad_id(), 1.0);
        }
        TokenMatrix { rows, masked: Vec::new(), origin_length: seq.len() }
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    pub fn t(&self) -> usize {
        self.masked.len()
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn max_tokens(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.masked.contains(&position)
    }
}

/// Masks one more position, drawn uniformly from the unmasked ones.
pub fn forward_mask_step(
    xm: &TokenMatrix,
    rng: &mut impl Rng,
) -> Result<TokenMatrix, DiffusionError> {
    let m = xm.max_tokens();
    if xm.t() >= m {
        return Err(DiffusionError::FullyMasked(m));
    }
    let unmasked: Vec<usize> = (0..m).filter(|i| !xm.masked.contains(i)).collect();
    let pick = unmasked[rng.random_range(0..unmasked.len())];
    let mut out = xm.clone();
    out.rows.row_mut(pick).fill(0.0);
    out.masked.push(pick);
    Ok(out)
}

/// Applies `t` masking steps to a clean matrix; the masked set is a
/// uniformly random t-subset in uniformly random order.
pub fn forward_to(
    x0: &TokenMatrix,
    t: usize,
    rng: &mut impl Rng,
) -> Result<TokenMatrix, DiffusionError> {
    let m = x0.max_tokens();
    if x0.t() != 0 {
        return Err(DiffusionError::NotClean);
    }
    if t > m {
        return Err(DiffusionError::StepOutOfRange { t, m });
    }
    let mut cur = x0.clone();
    for _ in 0..t {
        cur = forward_mask_step(&cur, rng)?;
    }
    Ok(cur)
}

/// Training-time masking: PAD rows never enter the loss, so only positions
/// inside the expression (index < origin_length) are maskable.
pub fn forward_mask_training(
    x0: &TokenMatrix,
    t: usize,
    rng: &mut impl Rng,
) -> Result<TokenMatrix, DiffusionError> {
    if x0.t() != 0 {
        return Err(DiffusionError::NotClean);
    }
    if t > x0.origin_length {
        return Err(DiffusionError::StepOutOfRange { t, m: x0.origin_length });
    }
    let mut out = x0.clone();
    let mut pool: Vec<usize> = (0..x0.origin_length).collect();
    for _ in 0..t {
        let at = rng.random_range(0..pool.len());
        let pick = pool.swap_remove(at);
        out.rows.row_mut(pick).fill(0.0);
        out.masked.push(pick);
    }
    Ok(out)
}

/// Diagnostics from one generation run.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateStats {
    /// Whole-sample redraws forced by pinned-token conflicts.
    pub retries: usize,
    /// Pins dropped after the redraw budget ran out. Grammar masking plus
    /// redraws is expected to keep this at zero; it exists as the last
    /// resort against an unsatisfiable pin set.
    pub repairs: usize,
    /// Backward steps taken before the prefix completed.
    pub steps: usize,
}

const MODEL_RETRIES: usize = 16;
const UNIFORM_RETRIES: usize = 16;

fn matrix_from_pins(pins: &[Option<TokenId>], lib: &TokenLibrary) -> Mat {
    let mut rows = Mat::zeros(pins.len(), lib.len());
    for (i, pin) in pins.iter().enumerate() {
        if let Some(id) = pin {
            rows.set(i, *id, 1.0);
        }
    }
    rows
}

/// The longest committed prefix that decodes complete, if any.
fn committed_complete_prefix(
    pins: &[Option<TokenId>],
    lib: &TokenLibrary,
) -> Option<TokenSequence> {
    let mut prefix = Vec::new();
    for pin in pins {
        match pin {
            Some(id) if !matches!(lib.kind(*id), TokenKind::Pad) => prefix.push(*id),
            _ => break,
        }
    }
    if prefix.is_empty() {
        return None;
    }
    let seq = TokenSequence::new(prefix);
    match bfs_decode(&seq, lib) {
        (DecodeStatus::Complete, _) => Some(seq),
        _ => None,
    }
}

fn sample_consistent(
    lib: &TokenLibrary,
    probs: &Mat,
    pins: &mut [Option<TokenId>],
    rng: &mut impl Rng,
    stats: &mut GenerateStats,
) -> Vec<TokenId> {
    loop {
        for attempt in 0..(MODEL_RETRIES + UNIFORM_RETRIES) {
            let rows = if attempt < MODEL_RETRIES {
                probs
            } else {
                // Conflicts stem from the model concentrating on structures
                // at odds with the pins; a uniform redraw explores freely.
                &Mat::from_fn(probs.rows(), probs.cols(), |_, _| 1.0)
            };
            match constrained_sample_pinned(lib, rows, pins, rng) {
                Ok(full) => return full,
                Err(_) => stats.retries += 1,
            }
        }
        // Unsatisfiable pin set: drop one pin (random token replacement).
        stats.repairs += 1;
        let pinned: Vec<usize> =
            (0..pins.len()).filter(|&i| pins[i].is_some()).collect();
        let drop = pinned[rng.random_range(0..pinned.len())];
        pins[drop] = None;
    }
}

/// Iterative denoising: starts all-masked at t = M, commits one token per
/// backward step, and stops as soon as the committed prefix is a complete
/// expression.
pub fn generate(
    model: &dyn Denoiser,
    lib: &TokenLibrary,
    m: usize,
    rng: &mut impl Rng,
) -> TokenSequence {
    generate_with_stats(model, lib, m, rng).0
}

pub fn generate_with_stats(
    model: &dyn Denoiser,
    lib: &TokenLibrary,
    m: usize,
    rng: &mut impl Rng,
) -> (TokenSequence, GenerateStats) {
    let mut stats = GenerateStats::default();
    let mut pins: Vec<Option<TokenId>> = vec![None; m];
    for t in (1..=m).rev() {
        let xt = matrix_from_pins(&pins, lib);
        let probs = model.predict(&xt, t);
        let full = sample_consistent(lib, &probs, &mut pins, rng, &mut stats);
        stats.steps += 1;
        // Commit one masked position, keeping the rest masked for t-1.
        let masked: Vec<usize> = (0..m).filter(|&i| pins[i].is_none()).collect();
        let keep = masked[rng.random_range(0..masked.len())];
        pins[keep] = Some(full[keep]);
        if let Some(seq) = committed_complete_prefix(&pins, lib) {
            return (seq, stats);
        }
    }
    unreachable!("all positions committed without a complete prefix");
}

/// Uniform-mixing schedule: Q_t = beta_t I + (1 - beta_t) 11^T / d.
#[derive(Debug, Clone)]
pub struct D3pmSchedule {
    betas: Vec<f64>,
    d: usize,
}

impl D3pmSchedule {
    pub fn new(betas: Vec<f64>, d: usize) -> Self {
        assert!(betas.iter().all(|b| *b > 0.0 && *b < 1.0), "beta_t must lie in (0,1)");
        assert!(d >= 2);
        D3pmSchedule { betas, d }
    }

    pub fn constant(beta: f64, len: usize, d: usize) -> Self {
        Self::new(vec![beta; len], d)
    }

    pub fn linear(from: f64, to: f64, len: usize, d: usize) -> Self {
        assert!(len >= 1);
        let betas = (0..len)
            .map(|i| {
                if len == 1 {
                    from
                } else {
                    from + (to - from) * i as f64 / (len - 1) as f64
                }
            })
            .collect();
        Self::new(betas, d)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Product of betas through step t; 1 at t = 0.
    pub fn beta_bar(&self, t: usize) -> f64 {
        self.betas[..t].iter().product()
    }

    /// Single-step transition matrix Q_t (1-based t).
    pub fn q(&self, t: usize) -> Mat {
        self.mix_matrix(self.betas[t - 1])
    }

    /// Cumulative transition Q̄_t = Q_1 ... Q_t; identity at t = 0. The
    /// factors commute, so the product collapses to the same mixture form
    /// with the scalar product of betas.
    pub fn q_bar(&self, t: usize) -> Mat {
        self.mix_matrix(self.beta_bar(t))
    }

    fn mix_matrix(&self, beta: f64) -> Mat {
        let off = (1.0 - beta) / self.d as f64;
        Mat::from_fn(self.d, self.d, |i, j| if i == j { beta + off } else { off })
    }
}

/// Forward marginal X_0 Q̄_t; rows of a stochastic input stay stochastic.
pub fn d3pm_forward(
    x0: &Mat,
    sched: &D3pmSchedule,
    t: usize,
) -> Result<Mat, DiffusionError> {
    if t > sched.len() {
        return Err(DiffusionError::StepOutOfRange { t, m: sched.len() });
    }
    Ok(x0.matmul(&sched.q_bar(t)))
}

/// Elementwise posterior q(X_{t-1} | X_t, X_0) with renormalized rows; a row
/// with zero denominator degenerates to uniform.
pub fn d3pm_posterior(
    xt: &Mat,
    x0: &Mat,
    sched: &D3pmSchedule,
    t: usize,
) -> Result<Mat, DiffusionError> {
    if t == 0 || t > sched.len() {
        return Err(DiffusionError::StepOutOfRange { t, m: sched.len() });
    }
    let d = sched.d();
    let qt = sched.q(t);
    let qbar_prev = sched.q_bar(t - 1);
    let left = xt.matmul_transpose(&qt); // X_t Q_t^T
    let right = x0.matmul(&qbar_prev); // X_0 Q̄_{t-1}
    let mut out = Mat::zeros(xt.rows(), d);
    for i in 0..xt.rows() {
        let mut sum = 0.0;
        {
            let orow = out.row_mut(i);
            for j in 0..d {
                let v = left.get(i, j) * right.get(i, j);
                orow[j] = v;
                sum += v;
            }
        }
        let orow = out.row_mut(i);
        if sum <= 0.0 {
            let u = 1.0 / d as f64;
            orow.fill(u);
        } else {
            for v in orow {
                *v /= sum;
            }
        }
    }
    Ok(out)
}

/// Baseline sampler for the ablation: a uniform-mixing reverse chain over
/// the whole matrix, with the final clean-matrix prediction projected onto
/// the grammar by constrained sampling.
pub fn d3pm_generate(
    model: &dyn Denoiser,
    lib: &TokenLibrary,
    sched: &D3pmSchedule,
    m: usize,
    rng: &mut impl Rng,
) -> TokenSequence {
    let d = lib.len();
    debug_assert_eq!(d, sched.d());
    // Discrete white noise: uniform random one-hot rows.
    let mut xt = Mat::zeros(m, d);
    for i in 0..m {
        xt.set(i, rng.random_range(0..d), 1.0);
    }
    for t in (2..=sched.len()).rev() {
        let q0 = model.predict(&xt, t);
        let post = d3pm_posterior(&xt, &q0, sched, t).expect("t within schedule");
        let mut next = Mat::zeros(m, d);
        for i in 0..m {
            let row = post.row(i);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = d - 1;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = j;
                    break;
                }
            }
            next.set(i, chosen, 1.0);
        }
        xt = next;
    }
    let q0 = model.predict(&xt, 1);
    crate::grammar::constrained_sample(lib, &q0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expression, TokenLibrary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct FixedRows(Mat);

    impl Denoiser for FixedRows {
        fn predict(&self, _input: &Mat, _t: usize) -> Mat {
            self.0.clone()
        }
    }

    struct UniformModel {
        m: usize,
        d: usize,
    }

    impl Denoiser for UniformModel {
        fn predict(&self, _input: &Mat, _t: usize) -> Mat {
            Mat::from_fn(self.m, self.d, |_, _| 1.0 / self.d as f64)
        }
    }

    fn lib2() -> TokenLibrary {
        TokenLibrary::new(2)
    }

    fn x0_for(expr: &str, lib: &TokenLibrary, m: usize) -> TokenMatrix {
        let tree = parse_expression(expr, lib).unwrap();
        TokenMatrix::from_sequence(&tree.bfs_encode(lib), lib, m)
    }

    #[test]
    fn clean_matrix_layout() {
        let lib = lib2();
        let x0 = x0_for("sin(x1)+x2", &lib, 8);
        assert_eq!(x0.t(), 0);
        assert_eq!(x0.origin_length(), 4);
        for i in 0..8 {
            let row = x0.rows().row(i);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        }
        assert_eq!(x0.rows().get(4, lib.pad_id()), 1.0);
    }

    #[test]
    fn mask_step_zeroes_one_row() {
        let lib = lib2();
        let x0 = x0_for("sin(x1)+x2", &lib, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = forward_mask_step(&x0, &mut rng).unwrap();
        assert_eq!(x1.t(), 1);
        let masked = x1.masked()[0];
        assert!(x1.rows().row(masked).iter().all(|&v| v == 0.0));
        for i in 0..6 {
            if i != masked {
                assert_eq!(x1.rows().row(i), x0.rows().row(i));
            }
        }
    }

    #[test]
    fn masking_exhausts_and_errors() {
        let lib = lib2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cur = x0_for("x1", &lib, 4);
        for _ in 0..4 {
            cur = forward_mask_step(&cur, &mut rng).unwrap();
        }
        assert_eq!(cur.t(), 4);
        assert!(cur.rows().data().iter().all(|&v| v == 0.0));
        let mut sorted = cur.masked().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(forward_mask_step(&cur, &mut rng), Err(DiffusionError::FullyMasked(4)));
    }

    #[test]
    fn forward_to_identity_and_full() {
        let lib = lib2();
        let x0 = x0_for("x1*x2", &lib, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let same = forward_to(&x0, 0, &mut rng).unwrap();
        assert_eq!(same, x0);
        let full = forward_to(&x0, 5, &mut rng).unwrap();
        assert!(full.rows().data().iter().all(|&v| v == 0.0));
        assert!(forward_to(&x0, 6, &mut rng).is_err());
    }

    #[test]
    fn forward_to_subsets_are_uniform() {
        // M=4, t=2: each unordered pair should appear with frequency 1/6.
        let lib = lib2();
        let x0 = x0_for("x1*x2", &lib, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = std::collections::BTreeMap::new();
        let trials = 60_000;
        for _ in 0..trials {
            let xt = forward_to(&x0, 2, &mut rng).unwrap();
            let mut pair = xt.masked().to_vec();
            pair.sort_unstable();
            *counts.entry((pair[0], pair[1])).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (&pair, &n) in &counts {
            let freq = n as f64 / trials as f64;
            assert!(
                (freq - 1.0 / 6.0).abs() < 0.01,
                "pair {:?} frequency {}",
                pair,
                freq
            );
        }
    }

    #[test]
    fn training_mask_avoids_pad() {
        let lib = lib2();
        let x0 = x0_for("sin(x1)", &lib, 8); // 2 tokens + 6 pad rows
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let xt = forward_mask_training(&x0, 2, &mut rng).unwrap();
            assert!(xt.masked().iter().all(|&i| i < 2));
        }
        assert!(forward_mask_training(&x0, 3, &mut rng).is_err());
    }

    #[test]
    fn generate_point_mass_model_reproduces_sequence() {
        let lib = lib2();
        let m = 8;
        let tree = parse_expression("sin(x1)+x2", &lib).unwrap();
        let seq = tree.bfs_encode(&lib);
        let rows = TokenMatrix::from_sequence(&seq, &lib, m).rows().clone();
        let model = FixedRows(rows);
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, stats) = generate_with_stats(&model, &lib, m, &mut rng);
            assert_eq!(out, seq, "seed {seed}");
            assert_eq!(stats.repairs, 0);
        }
    }

    #[test]
    fn generate_uniform_model_respects_grammar() {
        let lib = lib2();
        let m = 16;
        let model = UniformModel { m, d: lib.len() };
        let mut repairs = 0;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (seq, stats) = generate_with_stats(&model, &lib, m, &mut rng);
            repairs += stats.repairs;
            let (status, tree) = bfs_decode(&seq, &lib);
            assert_eq!(status, DecodeStatus::Complete);
            assert!(tree.unwrap().satisfies_constraints(m));
        }
        assert_eq!(repairs, 0);
    }

    #[test]
    fn generate_preserves_committed_tokens() {
        // Watching the pins through a custom model is awkward; instead rerun
        // generation with the same seed and check determinism, then rely on
        // the pinned-sampler tests for preservation. Determinism implies the
        // commit trace is stable.
        let lib = lib2();
        let m = 12;
        let model = UniformModel { m, d: lib.len() };
        let a = generate(&model, &lib, m, &mut ChaCha8Rng::seed_from_u64(42));
        let b = generate(&model, &lib, m, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn generate_single_token_budget() {
        let lib = lib2();
        let model = UniformModel { m: 1, d: lib.len() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq = generate(&model, &lib, 1, &mut rng);
        assert_eq!(seq.len(), 1);
        assert_eq!(lib.arity(seq.ids()[0]), 0);
    }

    #[test]
    fn d3pm_identity_and_uniform_limits() {
        let sched = D3pmSchedule::constant(0.999_999, 3, 4);
        let x0 = Mat::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0]);
        let out = d3pm_forward(&x0, &sched, 3).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((out.get(i, j) - x0.get(i, j)).abs() < 1e-4);
            }
        }
        let sched = D3pmSchedule::constant(1e-9, 1, 4);
        let out = d3pm_forward(&x0, &sched, 1).unwrap();
        for j in 0..4 {
            assert!((out.get(0, j) - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn d3pm_rows_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let betas: Vec<f64> = (0..20).map(|_| rng.random_range(0.5..0.999)).collect();
        let sched = D3pmSchedule::new(betas, 7);
        let mut x0 = Mat::from_fn(5, 7, |_, _| rng.random::<f64>());
        for i in 0..5 {
            let s: f64 = x0.row(i).iter().sum();
            for v in x0.row_mut(i) {
                *v /= s;
            }
        }
        for t in [0, 1, 7, 20] {
            let out = d3pm_forward(&x0, &sched, t).unwrap();
            for i in 0..5 {
                let s: f64 = out.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "t={t} row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn d3pm_posterior_collapses_without_noise() {
        // t=1 with beta ~ 1: posterior returns X_0's rows.
        let sched = D3pmSchedule::constant(0.999_999_9, 2, 3);
        let x0 = Mat::from_vec(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let xt = Mat::from_vec(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let post = d3pm_posterior(&xt, &x0, &sched, 1).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((post.get(i, j) - x0.get(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn d3pm_posterior_three_category_example() {
        // Direct evaluation with d=3, beta=0.9 everywhere, t=2,
        // x0 = xt = e0: numerator_j = Q_{0j} * Qbar1_{0j}, denominator =
        // sum; diagonal Q entry 0.9 + 0.1/3, off-diagonal 0.1/3.
        let sched = D3pmSchedule::constant(0.9, 2, 3);
        let x0 = Mat::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        let xt = x0.clone();
        let post = d3pm_posterior(&xt, &x0, &sched, 2).unwrap();
        let diag = 0.9 + 0.1 / 3.0;
        let off = 0.1 / 3.0;
        let num0 = diag * diag;
        let num_other = off * off;
        let denom = num0 + 2.0 * num_other;
        assert!((post.get(0, 0) - num0 / denom).abs() < 1e-12);
        assert!((post.get(0, 1) - num_other / denom).abs() < 1e-12);
        let argmax = (0..3).max_by(|&a, &b| {
            post.get(0, a).partial_cmp(&post.get(0, b)).unwrap()
        });
        assert_eq!(argmax, Some(0));
    }

    #[test]
    fn d3pm_posterior_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sched =
            D3pmSchedule::new((0..10).map(|_| rng.random_range(0.6..0.99)).collect(), 5);
        for t in 1..=10usize {
            let mut xt = Mat::zeros(4, 5);
            for i in 0..4 {
                xt.set(i, rng.random_range(0..5), 1.0);
            }
            let mut x0 = Mat::from_fn(4, 5, |_, _| rng.random::<f64>());
            for i in 0..4 {
                let s: f64 = x0.row(i).iter().sum();
                for v in x0.row_mut(i) {
                    *v /= s;
                }
            }
            let post = d3pm_posterior(&xt, &x0, &sched, t).unwrap();
            for i in 0..4 {
                let s: f64 = post.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn d3pm_qbar_converges_to_uniform() {
        // beta = 0.99, d = 17: TV distance to uniform < 1e-3 by t = 1000.
        let d = 17;
        let sched = D3pmSchedule::constant(0.99, 1000, d);
        let qbar = sched.q_bar(1000);
        for i in 0..d {
            let row = qbar.row(i);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let tv: f64 =
                0.5 * row.iter().map(|&v| (v - 1.0 / d as f64).abs()).sum::<f64>();
            assert!(tv < 1e-3, "row {i} TV {tv}");
        }
    }

    #[test]
    fn d3pm_generate_respects_grammar() {
        let lib = lib2();
        let m = 12;
        let sched = D3pmSchedule::linear(0.99, 0.80, m, lib.len());
        let model = UniformModel { m, d: lib.len() };
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = d3pm_generate(&model, &lib, &sched, m, &mut rng);
            let (status, tree) = bfs_decode(&seq, &lib);
            assert_eq!(status, DecodeStatus::Complete);
            assert!(tree.unwrap().satisfies_constraints(m));
        }
    }
}
