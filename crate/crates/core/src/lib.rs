pub mod analysis;
pub mod es;
pub mod grpo;
pub mod lab;
pub mod noise;
pub mod params;
pub mod policy;
pub mod tasks;
