//! Labeled classification tasks and their on-disk JSONL form.
//!
//! One task per file: a header line with id, type, field count and label
//! names, then one example per line with token-id fields, label index, and
//! split tag.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Acceptability,
    Discourse,
    Emotion,
    Facticity,
    Grammar,
    Nli,
    ParaphraseDetection,
    Other,
}

pub const ALL_TASK_TYPES: [TaskType; 8] = [
    TaskType::Acceptability,
    TaskType::Discourse,
    TaskType::Emotion,
    TaskType::Facticity,
    TaskType::Grammar,
    TaskType::Nli,
    TaskType::ParaphraseDetection,
    TaskType::Other,
];

impl TaskType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Acceptability => "acceptability",
            TaskType::Discourse => "discourse",
            TaskType::Emotion => "emotion",
            TaskType::Facticity => "facticity",
            TaskType::Grammar => "grammar",
            TaskType::Nli => "nli",
            TaskType::ParaphraseDetection => "paraphrase_detection",
            TaskType::Other => "other",
        }
    }

    pub fn index(&self) -> usize {
        ALL_TASK_TYPES.iter().position(|t| t == self).unwrap()
    }

    /// Sentence-pair families take two text fields.
    pub fn num_fields(&self) -> usize {
        match self {
            TaskType::Nli | TaskType::ParaphraseDetection | TaskType::Facticity => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One labeled example: one or two token fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub fields: Vec<Vec<u32>>,
    pub label: usize,
}

impl Example {
    /// Single-stream encoding: `[CLS] f1 [SEP]` or `[CLS] f1 [SEP] f2 [SEP]`.
    pub fn to_sequence(&self) -> TokenSequence {
        match self.fields.len() {
            1 => TokenSequence::single(&self.fields[0]),
            _ => TokenSequence::pair(&self.fields[0], &self.fields[1]),
        }
    }

    /// Content length; fields are summed for pair inputs.
    pub fn total_len(&self) -> usize {
        self.fields.iter().map(|f| f.len()).sum()
    }
}

/// Label names are matched case-insensitively and without surrounding
/// whitespace across tasks.
pub fn canonical_label(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub task_type: TaskType,
    pub num_fields: usize,
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub generation_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(CoreError::InvalidGenSpec(format!("{}: no labels", self.id)));
        }
        for (split, examples) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            for ex in examples.iter() {
                if ex.label >= self.labels.len() {
                    return Err(CoreError::LabelOutOfRange { label: ex.label, classes: self.labels.len() });
                }
                if ex.fields.len() != self.num_fields {
                    return Err(CoreError::InvalidGenSpec(format!(
                        "{}: {split} example has {} fields, task declares {}",
                        self.id,
                        ex.fields.len(),
                        self.num_fields
                    )));
                }
            }
        }
        // splits must not share examples
        let mut seen = std::collections::HashSet::new();
        for ex in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(&ex.fields) {
                return Err(CoreError::InvalidGenSpec(format!("{}: duplicate example across splits", self.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn canonical_labels(&self) -> Vec<String> {
        self.labels.iter().map(|l| canonical_label(l)).collect()
    }

    // ── JSONL ────────────────────────────────────────────────────────────

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            id: self.id.clone(),
            task_type: self.task_type,
            num_fields: self.num_fields,
            labels: self.labels.clone(),
            generation_seed: self.generation_seed,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (split, examples) in [
            (Split::Train, &self.train),
            (Split::Validation, &self.validation),
            (Split::Test, &self.test),
        ] {
            for ex in examples.iter() {
                let line = ExampleLine { fields: ex.fields.clone(), label: ex.label, split };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(r: R, path: &str) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| CoreError::Malformed { path: path.into(), detail: "empty task file".into() })??;
        let header: Header = serde_json::from_str(&header_line)?;
        let mut task = TaskSpec {
            id: header.id,
            task_type: header.task_type,
            num_fields: header.num_fields,
            labels: header.labels,
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            generation_seed: header.generation_seed,
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: ExampleLine = serde_json::from_str(&line)?;
            let target = match ex.split {
                Split::Train => &mut task.train,
                Split::Validation => &mut task.validation,
                Split::Test => &mut task.test,
            };
            target.push(Example { fields: ex.fields, label: ex.label });
        }
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_jsonl(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(f, &path.display().to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    id: String,
    task_type: TaskType,
    num_fields: usize,
    labels: Vec<String>,
    generation_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    fields: Vec<Vec<u32>>,
    label: usize,
    split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct TaskCollection {
    tasks: Vec<TaskSpec>,
}

impl TaskCollection {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for t in &tasks {
            if !ids.insert(t.id.clone()) {
                return Err(CoreError::InvalidGenSpec(format!("duplicate task id {}", t.id)));
            }
        }
        Ok(TaskCollection { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| CoreError::UnknownTask(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    /// Splits off the given task ids; returns (kept, held_out).
    pub fn partition(&self, held_out: &[String]) -> Result<(TaskCollection, TaskCollection)> {
        for id in held_out {
            self.get(id)?;
        }
        let (out, kept): (Vec<_>, Vec<_>) = self.tasks.iter().cloned().partition(|t| held_out.contains(&t.id));
        Ok((TaskCollection { tasks: kept }, TaskCollection { tasks: out }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_task() -> TaskSpec {
        TaskSpec {
            id: "toy".into(),
            task_type: TaskType::Nli,
            num_fields: 2,
            labels: vec!["Entailment".into(), "neutral".into()],
            train: vec![Example { fields: vec![vec![10, 11], vec![10]], label: 0 }],
            validation: vec![Example { fields: vec![vec![12, 13], vec![14]], label: 1 }],
            test: vec![Example { fields: vec![vec![15], vec![16]], label: 1 }],
            generation_seed: 7,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let task = sample_task();
        let mut buf = Vec::new();
        task.write_jsonl(&mut buf).unwrap();
        let back = TaskSpec::read_jsonl(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.id, task.id);
        assert_eq!(back.labels, task.labels);
        assert_eq!(back.train, task.train);
        assert_eq!(back.validation, task.validation);
        assert_eq!(back.test, task.test);
    }

    #[test]
    fn validation_catches_bad_examples() {
        let mut task = sample_task();
        task.train[0].label = 5;
        assert!(task.validate().is_err());

        let mut task = sample_task();
        task.train[0].fields.pop();
        assert!(task.validate().is_err());

        let mut task = sample_task();
        task.test = task.train.clone();
        assert!(task.validate().is_err());
    }

    #[test]
    fn canonical_labels_lowercase_and_trim() {
        assert_eq!(canonical_label("  Entailment "), "entailment");
        let task = sample_task();
        assert_eq!(task.canonical_labels()[0], "entailment");
    }

    #[test]
    fn collection_rejects_duplicate_ids() {
        let t = sample_task();
        assert!(TaskCollection::new(vec![t.clone(), t]).is_err());
    }

    #[test]
    fn partition_splits_held_out_tasks() {
        let mut a = sample_task();
        a.id = "a".into();
        let mut b = sample_task();
        b.id = "b".into();
        let coll = TaskCollection::new(vec![a, b]).unwrap();
        let (kept, out) = coll.partition(&["b".to_string()]).unwrap();
        assert_eq!(kept.ids(), vec!["a"]);
        assert_eq!(out.ids(), vec!["b"]);
        assert!(coll.partition(&["zzz".to_string()]).is_err());
    }
}
