//! Task catalog: one TOML file per task family.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::script::ReferenceScript;
use super::task::{Goal, ObjectSpec, Split, TaskSpec, ENGINE_RULES};

const BUILTIN: &[(&str, &str)] = &[
    ("coffee.toml", include_str!("../../catalog/coffee.toml")),
    ("plate_of_toast.toml", include_str!("../../catalog/plate_of_toast.toml")),
    ("sandwich.toml", include_str!("../../catalog/sandwich.toml")),
    ("salad.toml", include_str!("../../catalog/salad.toml")),
    ("breakfast.toml", include_str!("../../catalog/breakfast.toml")),
    ("boil_x.toml", include_str!("../../catalog/boil_x.toml")),
    ("water_plant.toml", include_str!("../../catalog/water_plant.toml")),
    ("put_all_x_on_y.toml", include_str!("../../catalog/put_all_x_on_y.toml")),
    ("put_all_x_in_one_y.toml", include_str!("../../catalog/put_all_x_in_one_y.toml")),
    ("n_slices_of_x_in_y.toml", include_str!("../../catalog/n_slices_of_x_in_y.toml")),
    ("clean_all_x.toml", include_str!("../../catalog/clean_all_x.toml")),
    ("n_cooked_slices_of_x_in_y.toml", include_str!("../../catalog/n_cooked_slices_of_x_in_y.toml")),
];

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
    #[error("cannot read catalog: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown task id {0:?}")]
    UnknownTask(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyFile {
    family: String,
    surfaces: Vec<String>,
    instances: Vec<InstanceFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    id: String,
    split: Split,
    instruction: String,
    objects: Vec<ObjectSpec>,
    goals: Vec<Goal>,
    reference: ReferenceScript,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    tasks: BTreeMap<String, TaskSpec>,
    order: Vec<String>,
    families: Vec<String>,
}

impl Catalog {
    /// The twelve built-in household task families.
    pub fn builtin() -> Self {
        Self::from_sources(BUILTIN.iter().map(|(n, s)| (n.to_string(), s.to_string())))
            .expect("built-in catalog is valid")
    }

    /// Loads every `*.toml` file of a directory, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self, CatalogError> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        let mut sources = Vec::new();
        for f in files {
            sources.push((f.display().to_string(), fs::read_to_string(&f)?));
        }
        Self::from_sources(sources)
    }

    pub fn from_sources(sources: impl IntoIterator<Item = (String, String)>) -> Result<Self, CatalogError> {
        let mut tasks = BTreeMap::new();
        let mut order = Vec::new();
        let mut families = Vec::new();
        let mut instructions = BTreeSet::new();
        for (file, text) in sources {
            let invalid = |message: String| CatalogError::Invalid { file: file.clone(), message };
            let parsed: FamilyFile = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
            families.push(parsed.family.clone());
            for inst in parsed.instances {
                let ids: BTreeSet<&str> = inst.objects.iter().map(|o| o.id.as_str()).collect();
                if ids.len() != inst.objects.len() {
                    return Err(invalid(format!("{}: duplicate object id", inst.id)));
                }
                for o in &inst.objects {
                    if let Some(p) = &o.parent {
                        if p != "*" && !ids.contains(p.as_str()) {
                            return Err(invalid(format!("{}: {} has unknown parent {p}", inst.id, o.id)));
                        }
                    }
                }
                for s in &parsed.surfaces {
                    if !ids.contains(s.as_str()) {
                        return Err(invalid(format!("{}: unknown surface {s}", inst.id)));
                    }
                }
                if inst.goals.is_empty() {
                    return Err(invalid(format!("{}: no goal conditions", inst.id)));
                }
                if inst.instruction.trim().is_empty() || !instructions.insert(inst.instruction.clone()) {
                    return Err(invalid(format!("{}: empty or duplicate instruction", inst.id)));
                }
                if tasks.contains_key(&inst.id) {
                    return Err(invalid(format!("duplicate task id {}", inst.id)));
                }
                order.push(inst.id.clone());
                tasks.insert(
                    inst.id.clone(),
                    TaskSpec {
                        task_id: inst.id,
                        family: parsed.family.clone(),
                        split: inst.split,
                        instruction_text: inst.instruction,
                        objects: inst.objects,
                        surfaces: parsed.surfaces.clone(),
                        goal_conditions: inst.goals,
                        preconditions_doc: ENGINE_RULES.iter().map(|s| s.to_string()).collect(),
                        reference: inst.reference,
                    },
                );
            }
        }
        Ok(Self { tasks, order, families })
    }

    pub fn get(&self, id: &str) -> Result<&TaskSpec, CatalogError> {
        self.tasks.get(id).ok_or_else(|| CatalogError::UnknownTask(id.to_string()))
    }

    pub fn by_instruction(&self, text: &str) -> Option<&TaskSpec> {
        let t = text.trim();
        self.tasks.values().find(|s| s.instruction_text == t)
    }

    /// All tasks in catalog order.
    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.order.iter().map(|id| &self.tasks[id])
    }

    pub fn families(&self) -> &[String] {
        &self.families
    }

    pub fn split(&self, split: Split) -> Vec<&TaskSpec> {
        self.tasks().filter(|t| t.split == split).collect()
    }

    /// Tasks of a split interleaved by family (first instance of each family,
    /// then the second, ...), truncated to `n`.
    pub fn interleaved(&self, split: Split, n: usize) -> Vec<&TaskSpec> {
        let per_family: Vec<Vec<&TaskSpec>> =
            self.families.iter().map(|f| self.split(split).into_iter().filter(|t| &t.family == f).collect()).collect();
        let mut out = Vec::new();
        let mut round = 0;
        loop {
            let mut any = false;
            for list in &per_family {
                if let Some(t) = list.get(round) {
                    out.push(*t);
                    any = true;
                }
            }
            if !any || out.len() >= n {
                break;
            }
            round += 1;
        }
        out.truncate(n);
        out
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
