pub mod compute;
pub mod corpus;
pub mod model;
pub mod objective;
pub mod eval;
pub mod train;
pub mod synth;
