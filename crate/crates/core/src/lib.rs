//! Traffic forecasting for regions without sensors.

pub mod diffcore;
pub mod embeddings;
pub mod evalcli;
pub mod external_signals;
pub mod geo;
pub mod layout;
pub mod losses;
pub mod lwr_sim;
pub mod params;
pub mod pipeline;
pub mod region_graph;
pub mod st_model;
