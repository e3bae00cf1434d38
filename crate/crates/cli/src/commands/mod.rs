pub mod check;
pub mod fit;
pub mod learn;
pub mod scene;
pub mod search;
