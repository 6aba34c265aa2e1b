//! Frame codec and TDMA scheduling.

pub mod frame;
pub mod tdma;

pub use frame::{decode, encode, Frame, FrameError, MsgType};
pub use tdma::{wilson_lower, LossAggregate, LossEstimator, Scheduler, TdmaConfig};
