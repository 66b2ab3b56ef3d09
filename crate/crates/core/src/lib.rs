pub mod diffcore;
pub mod nod;
pub mod sims;
pub mod model;
pub mod train;
