//! Latent containers, noise schedules, forward diffusion, the seeded random
//! source and the `LTS1` tensor file format.

mod frame;
pub mod lts;
mod rng;
mod schedule;

pub use frame::{LatentFrame, LatentSequence, Shape};
pub use rng::RandomSource;
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule, ScheduleKind};
