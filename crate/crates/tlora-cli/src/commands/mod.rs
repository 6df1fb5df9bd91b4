pub mod analyze;
pub mod compare;
pub mod params;
pub mod plot;
pub mod train;
