pub mod backbone;
pub mod color;
pub mod engine;
pub mod lut;
pub mod mos;
pub mod pipeline;
pub mod skintone;
pub mod trainer;
