pub mod cg;
pub mod ic;
pub mod ins;
pub mod swe;
