//! Deterministic seed derivation.
//!
//! One global seed drives every random stage. Stage seeds are derived with
//! splitmix64 over `(base, tag, index)` so stages can be rerun independently
//! while staying reproducible; OS entropy is never consulted. All generators
//! built from these seeds are ChaCha8 streams (see [`crate::phantom`]).

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the seed for stage `tag`, item `index`, from a base seed.
pub fn derive(base: u64, tag: Tag, index: u64) -> u64 {
    mix(mix(base ^ (tag as u64)).wrapping_add(index))
}

/// Stage tags for seed splitting.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Tag {
    PhantomGeometry = 0x6765_6f6d,
    PhantomAppearance = 0x6170_7065,
    DetectInit = 0x6469_6e69,
    DetectTrain = 0x6474_726e,
    InstanceInit = 0x6969_6e69,
    InstanceTrain = 0x6974_726e,
    Holdout = 0x686f_6c64,
}
