pub mod calibration;
pub mod data;
pub mod diffcore;
pub mod ikd;
pub mod loss;
pub mod model;
pub mod report;
