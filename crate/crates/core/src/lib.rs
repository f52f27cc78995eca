pub mod blockstore;
pub mod experiment;
pub mod ftmanager;
pub mod ftree;
pub mod ids;
pub mod image;
pub mod provision;
pub mod scenario;
pub mod simnet;
pub mod workload;

pub use ids::{FunctionId, ImageRef, VmId};
