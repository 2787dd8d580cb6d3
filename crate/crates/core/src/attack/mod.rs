//! Membership inference against task learners from their shared gradients.

mod game;
mod recon;
mod ssim;
mod tv;

pub use game::{
    calibrate_threshold, run_mi_game, Adversary, AttackTarget, CoinFlipAdversary, GameResult, GameSetup,
    GradientMatching, Guess, OracleAdversary, Scope, TranscriptRow, TrialView, Truth,
};
pub use recon::{
    attack_objective, decide_membership, initial_batch, optimize, reconstruct_query, reconstruct_support, AttackConfig,
    Emulation, Matcher, Prior, ReconResult,
};
pub use ssim::ssim;
pub use tv::total_variation;
