pub mod cnn;
pub mod dataset;
pub mod harness;
pub mod intuition;
pub mod memory;
pub mod numerics;
pub mod seeding;

/// Number of digit classes.
pub const NUM_CLASSES: usize = 10;
