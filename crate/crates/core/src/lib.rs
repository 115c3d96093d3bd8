//! Desk-scale stereo vision-language-action policy and the synthetic stereo
//! pick-and-place world it is trained and evaluated in.

pub mod actionhead;
pub mod auxtasks;
pub mod backbone;
pub mod codec;
pub mod fusion;
pub mod geoenc;
pub mod nn;
pub mod policy;
pub mod report;
mod error;
pub mod eval;
pub mod par;
pub mod scenegen;
pub mod semenc;
pub mod sweep;
pub mod trainer;

pub use error::SvlaError;
