use std::io::Write;
use std::path::Path;

use super::cache::{score_rows, TagCache, UserCache};
use crate::diffgraph::Scalar;
use crate::error::{Error, Result};
use crate::model::TaskId;

/// Best tags of every user for one task, users by ascending id, each list by
/// descending score with ties going to the lower tag id.
#[derive(Clone, Debug, PartialEq)]
pub struct TagAssignment {
    pub task: TaskId,
    pub users: Vec<(u32, Vec<(u32, f64)>)>,
}

impl TagAssignment {
    pub fn top1(&self) -> Vec<(u32, u32)> {
        self.users.iter().filter_map(|(u, l)| l.first().map(|(t, _)| (*u, *t))).collect()
    }
}

pub(crate) fn rank(scored: &mut [(u32, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Exhaustive exact top-`n` from the caches. `n` larger than the tag count
/// is clamped.
pub fn assign_topk<F: Scalar>(users: &UserCache<F>, tags: &TagCache<F>, n: usize, task: TaskId) -> Result<TagAssignment> {
    if n == 0 {
        return Err(Error::Usage("top-k size must be at least 1".into()));
    }
    let tt = tags.task(task)?;
    let n = n.min(tt.len());
    let mut mixed = vec![F::zero(); users.d];
    let mut out = Vec::with_capacity(users.len());
    for (u, &user) in users.user_ids.iter().enumerate() {
        let mut scored: Vec<(u32, f64)> = tt
            .tag_ids
            .iter()
            .enumerate()
            .map(|(t, &tag)| (tag, score_rows(users, tt, u, t, &mut mixed).to_f64().unwrap_or(f64::NAN)))
            .collect();
        rank(&mut scored);
        scored.truncate(n);
        out.push((user, scored));
    }
    Ok(TagAssignment { task, users: out })
}

pub fn assignments_csv(list: &[TagAssignment]) -> String {
    let mut out = String::from("user_id,rank,tag_id,task,score\n");
    for a in list {
        for (user, tags) in &a.users {
            for (r, (tag, score)) in tags.iter().enumerate() {
                out += &format!("{user},{},{tag},{},{score}\n", r + 1, a.task);
            }
        }
    }
    out
}

pub fn write_assignments_csv(list: &[TagAssignment], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(assignments_csv(list).as_bytes()).map_err(|e| Error::io(path, e))
}
