pub mod fxp;
pub mod shares;
pub mod transport;
pub mod engine;
pub mod boolgadget;
pub mod clearref;
pub mod dataio;
pub mod fairmpc;
pub mod cli;
