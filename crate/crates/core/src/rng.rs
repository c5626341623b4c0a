//! Deterministic random-stream derivation.
//!
//! Every random draw in a run comes from a ChaCha12 stream derived from the
//! master seed plus a (purpose, agent, round, inner-step) coordinate. Streams
//! are independent by construction, so the schedule that executes agents
//! (sequential, or any number of worker threads) cannot change a single drawn
//! value. Two runs with equal master seeds are bitwise identical.
//!
//! Derivation: the 256-bit ChaCha key is expanded from `master_seed` via
//! `SeedableRng::seed_from_u64`, and the coordinate is packed into the 64-bit
//! ChaCha stream id as
//!
//! ```text
//! bits 60..64  purpose        (max 16 purposes)
//! bits 44..60  agent id       (max 65_536 agents)
//! bits 16..44  round index    (max ~2.7e8 rounds)
//! bits  0..16  inner step     (max 65_536 local steps)
//! ```
//!
//! Changing any coordinate selects a distinct keystream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a derived stream feeds. Each purpose gets its own keystream so that,
/// for example, adding one extra noise draw can never shift minibatch
/// selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Synthetic data generation (per agent).
    DataGen,
    /// Minibatch index sampling (per agent, round, inner step).
    Batch,
    /// Gradient perturbation noise (per agent, round, inner step).
    Noise,
    /// Probe points and draws used when estimating problem constants.
    Probe,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::DataGen => 0,
            Purpose::Batch => 1,
            Purpose::Noise => 2,
            Purpose::Probe => 3,
        }
    }
}

const AGENT_BITS: u32 = 16;
const ROUND_BITS: u32 = 28;
const STEP_BITS: u32 = 16;

/// Packs a stream coordinate into the 64-bit ChaCha stream id.
fn stream_id(purpose: Purpose, agent: usize, round: usize, step: usize) -> u64 {
    let agent = agent as u64;
    let round = round as u64;
    let step = step as u64;
    assert!(agent < 1 << AGENT_BITS, "agent id exceeds stream capacity");
    assert!(round < 1 << ROUND_BITS, "round index exceeds stream capacity");
    assert!(step < 1 << STEP_BITS, "inner step exceeds stream capacity");
    (purpose.tag() << (AGENT_BITS + ROUND_BITS + STEP_BITS))
        | (agent << (ROUND_BITS + STEP_BITS))
        | (round << STEP_BITS)
        | step
}

/// Returns the ChaCha12 stream for one (purpose, agent, round, step) cell.
pub fn derive_stream(
    master_seed: u64,
    purpose: Purpose,
    agent: usize,
    round: usize,
    step: usize,
) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id(purpose, agent, round, step));
    rng
}
