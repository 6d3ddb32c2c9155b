//! Labeling tasks for expert review of generated images, and the import of
//! completed reviews into per-class plausibility fractions. The file formats
//! are described in `docs/annotation-format.md`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, DataError, Result};
use crate::samples::SampleSet;

pub const SCHEMA: &str = "protoguide-annotation";
pub const SCHEMA_VERSION: u32 = 1;
pub const PLAUSIBLE: &str = "plausible";
pub const IMPLAUSIBLE: &str = "implausible";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationTask {
    pub id: usize,
    pub image: String,
    pub class_name: String,
    pub choices: Vec<String>,
    pub criteria: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationExport {
    pub schema: String,
    pub schema_version: u32,
    pub run_id: String,
    pub criteria: Vec<String>,
    pub tasks: Vec<AnnotationTask>,
}

/// One reviewer answer. `criteria` lists the checkboxes that were ticked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletedTask {
    pub id: usize,
    pub choice: String,
    #[serde(default)]
    pub criteria: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPlausibility {
    pub class_name: String,
    pub annotated: usize,
    pub plausible: usize,
    /// Percentage of annotated images judged plausible.
    pub fraction: f64,
}

/// One task per sample, in sample-set order. Image paths are absolute. Fails
/// without producing anything if any image is missing.
pub fn export_annotations(samples: &SampleSet, samples_dir: &Path, criteria: &[String]) -> Result<AnnotationExport> {
    let mut missing = Vec::new();
    let mut tasks = Vec::with_capacity(samples.entries.len());
    for (id, entry) in samples.entries.iter().enumerate() {
        let path = samples.resolve(samples_dir, entry);
        if !path.is_file() {
            missing.push(path);
            continue;
        }
        let image = std::fs::canonicalize(&path).map_err(|e| DataError::io(&path, e))?;
        tasks.push(AnnotationTask {
            id,
            image: image.to_string_lossy().into_owned(),
            class_name: entry.class_name.clone(),
            choices: vec![PLAUSIBLE.to_string(), IMPLAUSIBLE.to_string()],
            criteria: criteria.to_vec(),
        });
    }
    if !missing.is_empty() {
        return Err(DataError::MissingImages(missing));
    }
    Ok(AnnotationExport {
        schema: SCHEMA.to_string(),
        schema_version: SCHEMA_VERSION,
        run_id: samples.run_id.clone(),
        criteria: criteria.to_vec(),
        tasks,
    })
}

impl AnnotationExport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let e: Self = read_json(path)?;
        if e.schema != SCHEMA || e.schema_version != SCHEMA_VERSION {
            return Err(DataError::Annotation(format!("unsupported schema {} v{}", e.schema, e.schema_version)));
        }
        Ok(e)
    }
}

/// Per-class plausibility over the answered tasks, classes sorted by name.
/// Unanswered tasks are ignored; unknown ids, repeated ids, unknown choices
/// and unknown criteria are errors.
pub fn import_annotations(export: &AnnotationExport, completed: &[CompletedTask]) -> Result<Vec<ClassPlausibility>> {
    let by_id: BTreeMap<usize, &AnnotationTask> = export.tasks.iter().map(|t| (t.id, t)).collect();
    let mut seen = HashSet::new();
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for answer in completed {
        let task = by_id.get(&answer.id).ok_or_else(|| DataError::Annotation(format!("unknown task id {}", answer.id)))?;
        if !seen.insert(answer.id) {
            return Err(DataError::Annotation(format!("task {} answered twice", answer.id)));
        }
        let plausible = match answer.choice.as_str() {
            PLAUSIBLE => true,
            IMPLAUSIBLE => false,
            other => return Err(DataError::Annotation(format!("task {}: unknown choice {other:?}", answer.id))),
        };
        if let Some(c) = answer.criteria.iter().find(|c| !task.criteria.contains(c)) {
            return Err(DataError::Annotation(format!("task {}: unknown criterion {c:?}", answer.id)));
        }
        let entry = counts.entry(task.class_name.as_str()).or_default();
        entry.0 += 1;
        entry.1 += usize::from(plausible);
    }
    Ok(counts
        .into_iter()
        .map(|(name, (annotated, plausible))| ClassPlausibility {
            class_name: name.to_string(),
            annotated,
            plausible,
            fraction: 100.0 * plausible as f64 / annotated as f64,
        })
        .collect())
}

pub fn load_completed(path: &Path) -> Result<Vec<CompletedTask>> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::SampleEntry;
    use protoguide_core::SamplerSpec;

    fn sample_set(dir: &Path, per_class: usize, classes: &[&str]) -> SampleSet {
        let mut entries = Vec::new();
        for (ci, c) in classes.iter().enumerate() {
            std::fs::create_dir_all(dir.join(c)).unwrap();
            for i in 0..per_class {
                let path = format!("{c}/{i:04}.png");
                std::fs::write(dir.join(&path), b"png").unwrap();
                entries.push(SampleEntry { path, class_id: ci, class_name: c.to_string(), index: i });
            }
        }
        SampleSet {
            schema_version: 1,
            run_id: "run".into(),
            mode: "prototype_guided".into(),
            checkpoint: "c".into(),
            seed: 0,
            sampler: SamplerSpec::default(),
            class_names: classes.iter().map(|c| c.to_string()).collect(),
            entries,
        }
    }

    #[test]
    fn one_task_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let classes: Vec<String> = (0..14).map(|i| format!("c{i:02}")).collect();
        let names: Vec<&str> = classes.iter().map(String::as_str).collect();
        let set = sample_set(dir.path(), 100, &names);
        let criteria = vec!["cell size".to_string(), "nucleus shape & size".to_string()];
        let export = export_annotations(&set, dir.path(), &criteria).unwrap();
        assert_eq!(export.tasks.len(), 1400);
        assert!(export.tasks.iter().all(|t| t.criteria == criteria && t.choices.len() == 2));
    }

    #[test]
    fn empty_criteria_leave_only_the_choice() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set(dir.path(), 2, &["a"]);
        let export = export_annotations(&set, dir.path(), &[]).unwrap();
        assert!(export.tasks.iter().all(|t| t.criteria.is_empty()));
    }

    #[test]
    fn missing_images_abort_the_export() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set(dir.path(), 3, &["a", "b"]);
        std::fs::remove_file(dir.path().join("b/0001.png")).unwrap();
        match export_annotations(&set, dir.path(), &[]) {
            Err(DataError::MissingImages(m)) => assert_eq!(m, vec![dir.path().join("b/0001.png")]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_all_plausible() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set(dir.path(), 5, &["a", "b"]);
        let export = export_annotations(&set, dir.path(), &["size".into()]).unwrap();
        let path = dir.path().join("tasks.json");
        export.save(&path).unwrap();
        let export = AnnotationExport::load(&path).unwrap();
        let answers: Vec<_> = export
            .tasks
            .iter()
            .map(|t| CompletedTask { id: t.id, choice: PLAUSIBLE.into(), criteria: vec!["size".into()] })
            .collect();
        let stats = import_annotations(&export, &answers).unwrap();
        assert_eq!(stats.len(), 2);
        assert!(stats.iter().all(|s| s.fraction == 100.0 && s.annotated == 5));
    }

    #[test]
    fn mixed_answers_and_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set(dir.path(), 4, &["a"]);
        let export = export_annotations(&set, dir.path(), &[]).unwrap();
        let answer = |id, choice: &str| CompletedTask { id, choice: choice.into(), criteria: vec![] };
        let stats = import_annotations(&export, &[answer(0, PLAUSIBLE), answer(1, IMPLAUSIBLE), answer(2, PLAUSIBLE)]).unwrap();
        assert_eq!((stats[0].annotated, stats[0].plausible), (3, 2));
        assert!((stats[0].fraction - 200.0 / 3.0).abs() < 1e-12);
        assert!(import_annotations(&export, &[answer(9, PLAUSIBLE)]).is_err());
        assert!(import_annotations(&export, &[answer(0, PLAUSIBLE), answer(0, PLAUSIBLE)]).is_err());
        assert!(import_annotations(&export, &[answer(0, "maybe")]).is_err());
        let ticked = CompletedTask { id: 0, choice: PLAUSIBLE.into(), criteria: vec!["color".into()] };
        assert!(import_annotations(&export, &[ticked]).is_err());
    }
}
