//! Cached serving: expert outputs per user and gate weights per tag are
//! computed once, then every (user, tag) pair is scored by mixing and a
//! cosine, with no tower in the loop.

mod cache;
mod files;
mod naive;
mod topk;

pub use cache::{build_caches, score_from_cache, Invocations, TagCache, TaskTags, UserCache};
pub use files::{read_caches, write_caches};
pub use naive::{bench, bench_csv, bench_timings, naive_assign, naive_scores, synthetic_users, BenchRow};
pub use topk::{assign_topk, assignments_csv, write_assignments_csv, TagAssignment};
