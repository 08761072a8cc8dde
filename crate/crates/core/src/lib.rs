pub mod dsp;
pub mod msgbus;
pub mod signal_io;
pub mod time;
pub mod staging;
pub mod swdetect;
pub mod thermal;
pub mod subject_sim;
pub mod session;
