//! Symbolic regression by masked discrete diffusion over expression tokens.
//!
//! The engine represents candidate expressions as token sequences in
//! breadth-first order, generates them with an iterative denoising sampler
//! constrained by an arity grammar, fits constant placeholders with
//! Levenberg-Marquardt, and trains the denoiser with a token-wise clipped
//! policy objective over a long short-term pool of top candidates.
//!
//! Module map:
//! - [`expr`]: token vocabulary, expression trees, BFS (de)serialization,
//!   numeric evaluation, rule-based simplification, infix printing/parsing.
//! - [`grammar`]: validity masks and grammar-constrained categorical sampling.
//! - [`diffusion`]: single-token forward masking, the iterative generation
//!   loop, and the uniform-mixing baseline used by the ablation.
//! - [`net`]: the denoiser network, hand-written backprop, Adam, checkpoints.
//! - [`constfit`]: Levenberg-Marquardt fitting of constant placeholders.
//! - [`trainer`]: rewards, the risk buffer, policy objectives, and the
//!   epoch training loop.

pub mod constfit;
pub mod diffusion;
pub mod expr;
pub mod grammar;
pub mod mat;
pub mod net;
pub mod trainer;

pub use mat::Mat;
