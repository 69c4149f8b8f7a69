use super::config::{FieldSchema, TaskId};
use crate::data::Example;
use crate::diffgraph::Scalar;
use crate::error::{Error, Result};

/// Flattened ids of one categorical input across a batch. Example `i` owns
/// `rows[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaggedIds {
    pub rows: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl RaggedIds {
    fn new() -> Self {
        RaggedIds { rows: Vec::new(), offsets: vec![0] }
    }

    fn push(&mut self, ids: impl IntoIterator<Item = usize>) {
        self.rows.extend(ids);
        self.offsets.push(self.rows.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when every example holds exactly one id (pooling is a no-op).
    pub fn all_single(&self) -> bool {
        self.rows.len() == self.len()
    }
}

/// User-side input of a batch: one [`RaggedIds`] per field.
#[derive(Clone, Debug, PartialEq)]
pub struct UserFeatures {
    pub fields: Vec<RaggedIds>,
}

impl UserFeatures {
    pub fn from_rows<'a>(schema: &FieldSchema, users: impl IntoIterator<Item = &'a [Vec<u32>]>) -> Result<Self> {
        let mut fields: Vec<RaggedIds> = (0..schema.n_fields()).map(|_| RaggedIds::new()).collect();
        for values in users {
            if values.len() != schema.n_fields() {
                return Err(Error::Data(format!(
                    "expected {} user fields, got {}",
                    schema.n_fields(),
                    values.len()
                )));
            }
            for ((ids, spec), out) in values.iter().zip(&schema.user_fields).zip(&mut fields) {
                if ids.is_empty() {
                    return Err(Error::Data(format!("field {} has no value", spec.name)));
                }
                if let Some(v) = ids.iter().find(|&&v| v as usize >= spec.vocab) {
                    return Err(Error::Data(format!(
                        "field {}: value {v} outside vocabulary of {}",
                        spec.name, spec.vocab
                    )));
                }
                out.push(ids.iter().map(|&v| v as usize));
            }
        }
        Ok(UserFeatures { fields })
    }

    pub fn len(&self) -> usize {
        self.fields.first().map_or(0, |f| f.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tag-side input: one tag set per example, with set semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct TagSets(pub RaggedIds);

impl TagSets {
    pub fn from_sets<'a>(schema: &FieldSchema, sets: impl IntoIterator<Item = &'a [u32]>) -> Result<Self> {
        let mut ids = RaggedIds::new();
        for set in sets {
            if set.is_empty() {
                return Err(Error::Data("empty tag set".into()));
            }
            if let Some(t) = set.iter().find(|&&t| t as usize >= schema.tag_vocab) {
                return Err(Error::Data(format!("tag {t} outside vocabulary of {}", schema.tag_vocab)));
            }
            let mut s: Vec<usize> = set.iter().map(|&t| t as usize).collect();
            s.sort_unstable();
            s.dedup();
            ids.push(s);
        }
        Ok(TagSets(ids))
    }

    pub fn singletons(schema: &FieldSchema, tags: &[u32]) -> Result<Self> {
        let sets: Vec<[u32; 1]> = tags.iter().map(|&t| [t]).collect();
        Self::from_sets(schema, sets.iter().map(|s| s.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Model-ready batch of examples.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub users: UserFeatures,
    pub tags: TagSets,
    pub click: Vec<F>,
    pub conv: Vec<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn new<'a>(schema: &FieldSchema, examples: impl IntoIterator<Item = &'a Example> + Clone) -> Result<Self> {
        let users = UserFeatures::from_rows(schema, examples.clone().into_iter().map(|e| e.fields.as_slice()))?;
        let tags = TagSets::from_sets(schema, examples.clone().into_iter().map(|e| e.tags.as_slice()))?;
        let mut click = Vec::new();
        let mut conv = Vec::new();
        for e in examples {
            e.validate()?;
            click.push(F::lit(e.click as f64));
            conv.push(F::lit(e.conv as f64));
        }
        if click.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(Batch { users, tags, click, conv })
    }

    pub fn len(&self) -> usize {
        self.click.len()
    }

    pub fn is_empty(&self) -> bool {
        self.click.is_empty()
    }

    pub fn labels(&self, task: TaskId) -> &[F] {
        match task {
            TaskId::Ctr => &self.click,
            TaskId::Cvr => &self.conv,
        }
    }
}
