pub mod bev;
pub mod control;
pub mod estimator;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod netproto;
pub mod netsim;
pub mod scenario;
