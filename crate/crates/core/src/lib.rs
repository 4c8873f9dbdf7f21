//! Hard episodic MDP families for regret and best-policy-identification
//! lower bounds, with exact planning, trajectory KL tools, closed-form bound
//! evaluation and seeded learner harnesses.

pub mod bounds;
pub mod harness;
pub mod info;
pub mod instances;
pub mod mdp;
pub mod rng;
mod serde_inf;
pub mod verify;

pub use mdp::{Mdp, MarkovPolicy, Trajectory};
pub use rng::{substream, SimRng};
