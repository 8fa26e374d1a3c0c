pub mod benchmark;
pub mod condnets;
pub mod epsnet;
pub mod losses;
pub mod train;
