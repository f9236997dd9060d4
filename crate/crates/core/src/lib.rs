pub mod raster;
pub mod control_maps;
pub mod job_model;
pub mod backend;
pub mod store;
