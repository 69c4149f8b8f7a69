use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cache::{TagCache, TaskTags, UserCache};
use crate::data::{read_json, write_json};
use crate::diffgraph::Scalar;
use crate::error::{Error, Result};
use crate::model::TaskId;

#[derive(Serialize, Deserialize)]
struct UserIndex {
    dtype: String,
    k: usize,
    d: usize,
    count: usize,
    user_ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TagIndex {
    dtype: String,
    task: TaskId,
    experts: Vec<usize>,
    tau: f64,
    d: usize,
    count: usize,
    tag_ids: Vec<u32>,
}

fn header(a: usize, b: usize, c: usize) -> Vec<u8> {
    [a, b, c].iter().flat_map(|v| (*v as u64).to_le_bytes()).collect()
}

fn read_body<F: Scalar>(path: &Path, expect: [usize; 3], n: usize) -> Result<Vec<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::Data(format!("{}: truncated header", path.display())));
    }
    let head: Vec<usize> = bytes[..24].chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    if head != expect {
        return Err(Error::Data(format!("{}: header {head:?} does not match index {expect:?}", path.display())));
    }
    let body = &bytes[24..];
    if body.len() != n * F::WIDTH {
        return Err(Error::Data(format!("{}: expected {n} {} values", path.display(), F::DTYPE)));
    }
    Ok(body.chunks(F::WIDTH).map(F::get_le).collect())
}

fn write_body<F: Scalar>(path: &Path, mut out: Vec<u8>, values: impl Iterator<Item = F>) -> Result<()> {
    values.for_each(|v| v.put_le(&mut out));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `users.bin` (header k, d, count as u64 LE, then the vectors) with
/// `users.json`, and per task `tags_<task>.bin` (header |experts|, d, count,
/// then per tag its embedding followed by its gate weights) with
/// `tags_<task>.json`.
pub fn write_caches<F: Scalar>(dir: &Path, users: &UserCache<F>, tags: &TagCache<F>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = UserIndex { dtype: F::DTYPE.into(), k: users.k, d: users.d, count: users.len(), user_ids: users.user_ids.clone() };
    write_json(&index, &dir.join("users.json"))?;
    write_body(&dir.join("users.bin"), header(users.k, users.d, users.len()), users.values.iter().copied())?;
    for tt in &tags.tasks {
        let n = tt.experts.len();
        let index = TagIndex {
            dtype: F::DTYPE.into(),
            task: tt.task,
            experts: tt.experts.clone(),
            tau: tt.tau.to_f64().unwrap_or(f64::NAN),
            d: tt.d,
            count: tt.len(),
            tag_ids: tt.tag_ids.clone(),
        };
        write_json(&index, &dir.join(format!("tags_{}.json", tt.task)))?;
        let rows = (0..tt.len()).flat_map(|r| tt.embedding(r).iter().chain(tt.gate(r)).copied());
        write_body(&dir.join(format!("tags_{}.bin", tt.task)), header(n, tt.d, tt.len()), rows)?;
    }
    Ok(())
}

pub fn read_caches<F: Scalar>(dir: &Path, tasks: &[TaskId]) -> Result<(UserCache<F>, TagCache<F>)> {
    let index: UserIndex = read_json(&dir.join("users.json"))?;
    if index.dtype != F::DTYPE {
        return Err(Error::Data(format!("cache holds {}, expected {}", index.dtype, F::DTYPE)));
    }
    let values = read_body(&dir.join("users.bin"), [index.k, index.d, index.count], index.k * index.d * index.count)?;
    let users = UserCache::new(index.k, index.d, index.user_ids, values)?;
    let mut tags = TagCache::default();
    for &task in tasks {
        let ti: TagIndex = read_json(&dir.join(format!("tags_{task}.json")))?;
        let n = ti.experts.len();
        let body: Vec<F> = read_body(&dir.join(format!("tags_{task}.bin")), [n, ti.d, ti.count], (ti.d + n) * ti.count)?;
        let (mut emb, mut w) = (Vec::new(), Vec::new());
        for row in body.chunks(ti.d + n) {
            emb.extend_from_slice(&row[..ti.d]);
            w.extend_from_slice(&row[ti.d..]);
        }
        tags.tasks.push(TaskTags::new(task, ti.experts, F::lit(ti.tau), ti.d, ti.tag_ids, emb, w)?);
    }
    Ok((users, tags))
}
