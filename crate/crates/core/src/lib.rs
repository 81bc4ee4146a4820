pub mod bench;
pub mod chain;
pub mod deploy;
pub mod flowdist;
pub mod forwarding;
pub mod lp;
pub mod provisioning;
pub mod scenario;
pub mod sim;
pub mod telemetry;
pub mod topology;
