//! Class universes, their primitive-task partition, and the tasks file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PoeError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimitiveTask {
    pub id: String,
    pub name: String,
    /// Strictly increasing indices into the universe's class list.
    pub class_indices: Vec<usize>,
}

impl PrimitiveTask {
    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.class_indices.binary_search(&class).is_ok()
    }

    /// Position of `class` within this task's output.
    pub fn local_index(&self, class: usize) -> Option<usize> {
        self.class_indices.binary_search(&class).ok()
    }
}

/// A class set partitioned into disjoint primitive tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskUniverse {
    pub classes: Vec<String>,
    pub primitives: Vec<PrimitiveTask>,
}

impl TaskUniverse {
    pub fn new(classes: Vec<String>, primitives: Vec<PrimitiveTask>) -> Result<Self> {
        let u = Self { classes, primitives };
        u.validate()?;
        Ok(u)
    }

    /// Evenly sized tasks `t0, t1, …` over `num_classes` anonymous classes.
    pub fn uniform(num_classes: usize, classes_per_task: usize) -> Result<Self> {
        if classes_per_task == 0 || !num_classes.is_multiple_of(classes_per_task) {
            return Err(PoeError::Invalid(format!(
                "{num_classes} classes do not split into tasks of {classes_per_task}"
            )));
        }
        let classes = (0..num_classes).map(|c| format!("class{c:02}")).collect();
        let primitives = (0..num_classes / classes_per_task)
            .map(|t| PrimitiveTask {
                id: format!("t{t}"),
                name: format!("task {t}"),
                class_indices: (t * classes_per_task..(t + 1) * classes_per_task).collect(),
            })
            .collect();
        Self::new(classes, primitives)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        if n == 0 || self.primitives.is_empty() {
            return Err(PoeError::Invalid("universe needs classes and at least one primitive task".into()));
        }
        let mut owner = vec![None::<&str>; n];
        let mut ids = HashMap::new();
        for t in &self.primitives {
            if ids.insert(t.id.as_str(), ()).is_some() {
                return Err(PoeError::Invalid(format!("duplicate task id `{}`", t.id)));
            }
            if t.is_empty() {
                return Err(PoeError::Invalid(format!("task `{}` has no classes", t.id)));
            }
            if t.class_indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(PoeError::Invalid(format!("task `{}` indices are not strictly increasing", t.id)));
            }
            for &c in &t.class_indices {
                let slot = owner.get_mut(c).ok_or_else(|| {
                    PoeError::Invalid(format!("task `{}` class {c} is outside 0..{n}", t.id))
                })?;
                if let Some(other) = slot {
                    return Err(PoeError::Invalid(format!("class {c} is in both `{other}` and `{}`", t.id)));
                }
                *slot = Some(&t.id);
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(PoeError::Invalid(format!("class {c} belongs to no primitive task")));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn task(&self, id: &str) -> Result<&PrimitiveTask> {
        self.primitives
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| PoeError::UnknownTask(id.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let u: Self = serde_json::from_slice(&fs::read(path)?)?;
        u.validate()?;
        Ok(u)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
