//! Closed-loop feature transformation with an evolving experience library.
//!
//! The pipeline has three stages: reward-driven exploration seeds a library of
//! downstream-verified transformation sequences ([`explore`]), a refinement pass
//! cleans the library and organizes it into score-sorted demonstration
//! trajectories ([`refine`]), and a generation loop conditions a policy on
//! diversity-selected demonstrations, verifies its candidates against the
//! downstream task, and writes the best ones back ([`pipeline`]).
//!
//! Sequences are postfix token programs over tabular features ([`expr`]),
//! executed against in-memory datasets ([`table`]) and scored by built-in
//! cross-validated learners ([`eval`]).

pub mod eval;
pub mod explore;
pub mod expr;
pub mod library;
pub mod pipeline;
pub mod policy;
pub mod refine;
pub mod report;
pub mod table;
