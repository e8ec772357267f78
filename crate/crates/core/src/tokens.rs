//! Reserved token ids shared by the task generator and the model.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

/// First id usable as task content.
pub const NUM_RESERVED: usize = 4;
