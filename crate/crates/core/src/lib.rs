pub mod datagen;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod scene;
pub mod train;
