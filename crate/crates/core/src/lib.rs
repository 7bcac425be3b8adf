pub mod attention;
pub mod geometry;
pub mod harness;
pub mod layers;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod posenc;
pub mod refpoints;
