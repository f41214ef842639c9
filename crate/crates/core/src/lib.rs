pub mod api;
pub mod assembly;
pub mod bench;
pub mod detector;
pub mod geom;
pub mod keypoints;
pub mod metrics;
pub mod pnp;
pub mod scene;
pub mod tracker;
