pub mod container;
pub mod geometry;
pub mod head;
pub mod field;
pub mod render;
pub mod train;
pub mod retarget;
pub mod metrics;
pub mod io;
