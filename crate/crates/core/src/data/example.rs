use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskId;

/// One impression: user features, the ad's tag set and both action labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: u32,
    #[serde(default)]
    pub ad_id: u32,
    /// Position in the raw impression stream the record was drawn from.
    #[serde(default)]
    pub imp: u64,
    /// Per-field categorical ids; a field with several ids is mean-pooled.
    pub fields: Vec<Vec<u32>>,
    /// Sorted, duplicate-free tag ids.
    pub tags: Vec<u32>,
    pub click: u8,
    pub conv: u8,
}

impl Example {
    pub fn label(&self, task: TaskId) -> u8 {
        match task {
            TaskId::Ctr => self.click,
            TaskId::Cvr => self.conv,
        }
    }

    /// Checks the label and tag-set invariants.
    pub fn validate(&self) -> Result<()> {
        if self.click > 1 || self.conv > 1 {
            return Err(Error::Data(format!("labels must be 0 or 1, got click={} conv={}", self.click, self.conv)));
        }
        if self.conv == 1 && self.click == 0 {
            return Err(Error::Data("conversion without click".into()));
        }
        if self.tags.is_empty() {
            return Err(Error::Data("empty tag set".into()));
        }
        if self.fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Data("empty field value list".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self, task: TaskId) -> Vec<u8> {
        self.examples.iter().map(|e| e.label(task)).collect()
    }

    pub fn positive_rate(&self, task: TaskId) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples.iter().map(|e| e.label(task) as f64).sum::<f64>() / self.examples.len() as f64
    }

    /// Feature vector per user, taken from the first record of each user,
    /// ordered by user id.
    pub fn users(&self) -> Vec<(u32, Vec<Vec<u32>>)> {
        let mut seen = std::collections::BTreeMap::new();
        for e in &self.examples {
            seen.entry(e.user_id).or_insert_with(|| e.fields.clone());
        }
        seen.into_iter().collect()
    }
}
