pub mod curate;
pub mod extract;
pub mod geodesy;
pub mod metrics;
pub mod net;
pub mod pano;
pub mod pipeline;
pub mod survey;
pub mod synth;
