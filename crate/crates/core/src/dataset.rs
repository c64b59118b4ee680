//! Relation-extraction instances, entity-pair schemas and their on-disk formats.
//!
//! A dataset is a JSONL file (one [`Instance`] per line) paired with a schema
//! file mapping each entity-pair type to its [`RelationSchema`]. Offsets are
//! counted in Unicode scalar values, not bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const E1_PLACEHOLDER: &str = "{E1}";
pub const E2_PLACEHOLDER: &str = "{E2}";
pub const E1_MARKER: &str = "**";
pub const E2_MARKER: &str = "__";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed instance: {source}")]
    MalformedLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed schema file: {0}")]
    MalformedSchema(#[source] serde_json::Error),
    #[error("schema {pair_type}: {reason}")]
    InvalidSchema { pair_type: String, reason: String },
    #[error("instance {id}: {reason}")]
    InvalidInstance { id: String, reason: String },
    #[error("duplicate instance id {0}")]
    DuplicateId(String),
}

/// A character span of the sentence naming one entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub surface: String,
    /// Inclusive start, in chars.
    pub start: usize,
    /// Exclusive end, in chars.
    pub end: usize,
}

impl EntitySpan {
    pub fn new(surface: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            surface: surface.into(),
            start,
            end,
        }
    }

    /// Locates the first occurrence of `surface` in `sentence`.
    pub fn find(sentence: &str, surface: &str) -> Option<Self> {
        let byte = sentence.find(surface)?;
        let start = sentence[..byte].chars().count();
        Some(Self::new(surface, start, start + surface.chars().count()))
    }

    fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Label set and option templates for one entity-pair type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub pair_type: String,
    pub labels: Vec<String>,
    pub templates: BTreeMap<String, String>,
    pub no_relation_label: String,
    /// Short phrase naming the relation family, used by the full-instruction
    /// prompt ("Select {task} relationship described in one sentence.").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

impl RelationSchema {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidSchema {
            pair_type: self.pair_type.clone(),
            reason,
        };
        if self.labels.is_empty() {
            return Err(invalid("empty label list".into()));
        }
        let mut seen = HashSet::new();
        for label in &self.labels {
            if !seen.insert(label.as_str()) {
                return Err(invalid(format!("duplicate label {label}")));
            }
            let template = self
                .templates
                .get(label)
                .ok_or_else(|| invalid(format!("no template for label {label}")))?;
            if !template.contains(E1_PLACEHOLDER) || !template.contains(E2_PLACEHOLDER) {
                return Err(invalid(format!(
                    "template for {label} must reference both {E1_PLACEHOLDER} and {E2_PLACEHOLDER}"
                )));
            }
        }
        if let Some(extra) = self.templates.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(invalid(format!("template for unknown label {extra}")));
        }
        if !seen.contains(self.no_relation_label.as_str()) {
            return Err(invalid(format!(
                "no_relation_label {} is not among the labels",
                self.no_relation_label
            )));
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Option text for `label` with both entity surfaces substituted.
    pub fn render_option(&self, label: &str, e1: &str, e2: &str) -> Option<String> {
        self.templates
            .get(label)
            .map(|t| t.replace(E1_PLACEHOLDER, e1).replace(E2_PLACEHOLDER, e2))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub sentence: String,
    pub e1: EntitySpan,
    pub e2: EntitySpan,
    pub pair_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crowd_labels: Option<Vec<String>>,
}

impl Instance {
    fn invalid(&self, reason: impl Into<String>) -> DatasetError {
        DatasetError::InvalidInstance {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    fn check_span(&self, which: &str, span: &EntitySpan, len: usize) -> Result<(), DatasetError> {
        if span.start >= span.end || span.end > len {
            return Err(self.invalid(format!(
                "{which} span {}..{} out of bounds for sentence of {len} chars",
                span.start, span.end
            )));
        }
        let text = char_slice(&self.sentence, span.start, span.end);
        if text != span.surface {
            return Err(self.invalid(format!(
                "{which} surface {:?} does not match sentence text {:?}",
                span.surface, text
            )));
        }
        Ok(())
    }

    /// Checks span and label invariants against the pair's schema.
    pub fn validate(&self, schema: Option<&RelationSchema>) -> Result<(), DatasetError> {
        let len = self.sentence.chars().count();
        self.check_span("e1", &self.e1, len)?;
        self.check_span("e2", &self.e2, len)?;
        if self.e1.overlaps(&self.e2) {
            return Err(self.invalid("e1 and e2 spans overlap"));
        }
        let schema =
            schema.ok_or_else(|| self.invalid(format!("unknown pair type {}", self.pair_type)))?;
        if let Some(gold) = &self.gold_label {
            if !schema.contains(gold) {
                return Err(self.invalid(format!("gold label {gold} not in schema")));
            }
        }
        for label in self.crowd_labels.iter().flatten() {
            if !schema.contains(label) {
                return Err(self.invalid(format!("crowd label {label} not in schema")));
            }
        }
        Ok(())
    }
}

fn char_slice(s: &str, start: usize, end: usize) -> &str {
    let mut indices = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len()));
    let from = indices.nth(start).unwrap_or(s.len());
    let to = if end > start {
        indices.nth(end - start - 1).unwrap_or(s.len())
    } else {
        from
    };
    &s[from..to]
}

/// Returns the sentence with `**` around e1 and `__` around e2, placed by offset.
pub fn mark_entities(instance: &Instance) -> String {
    let mut inserts = [
        (instance.e1.start, E1_MARKER),
        (instance.e1.end, E1_MARKER),
        (instance.e2.start, E2_MARKER),
        (instance.e2.end, E2_MARKER),
    ];
    // Spans never overlap, so at a shared offset the closing marker of the
    // earlier span must come first.
    inserts.sort_by_key(|&(pos, marker)| {
        let closes = (marker == E1_MARKER && pos == instance.e1.end)
            || (marker == E2_MARKER && pos == instance.e2.end);
        (pos, !closes)
    });
    let mut out = String::with_capacity(instance.sentence.len() + 8);
    let mut next = inserts.iter().peekable();
    for (i, ch) in instance.sentence.chars().enumerate() {
        while let Some(&&(pos, marker)) = next.peek() {
            if pos != i {
                break;
            }
            out.push_str(marker);
            next.next();
        }
        out.push(ch);
    }
    for &(_, marker) in next {
        out.push_str(marker);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub schemas: BTreeMap<String, RelationSchema>,
    pub instances: Vec<Instance>,
}

#[derive(Serialize, Deserialize)]
struct SchemaEntry {
    labels: Vec<String>,
    templates: BTreeMap<String, String>,
    no_relation_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<String>,
}

impl Dataset {
    pub fn new(
        schemas: BTreeMap<String, RelationSchema>,
        instances: Vec<Instance>,
    ) -> Result<Self, DatasetError> {
        let dataset = Self { schemas, instances };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (key, schema) in &self.schemas {
            if key != &schema.pair_type {
                return Err(DatasetError::InvalidSchema {
                    pair_type: key.clone(),
                    reason: format!("keyed under {key} but declares {}", schema.pair_type),
                });
            }
            schema.validate()?;
        }
        let mut ids = HashSet::new();
        for instance in &self.instances {
            if !ids.insert(instance.id.as_str()) {
                return Err(DatasetError::DuplicateId(instance.id.clone()));
            }
            instance.validate(self.schemas.get(&instance.pair_type))?;
        }
        Ok(())
    }

    /// Loads and validates a JSONL dataset together with its schema file.
    pub fn load(dataset_path: &Path, schema_path: &Path) -> Result<Self, DatasetError> {
        let schemas = load_schemas(schema_path)?;
        let text = read(dataset_path)?;
        Self::from_jsonl(&text, schemas)
    }

    pub fn from_jsonl(
        text: &str,
        schemas: BTreeMap<String, RelationSchema>,
    ) -> Result<Self, DatasetError> {
        let mut instances = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let instance: Instance = serde_json::from_str(line)
                .map_err(|source| DatasetError::MalformedLine { line: idx + 1, source })?;
            instances.push(instance);
        }
        Self::new(schemas, instances)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for instance in &self.instances {
            out.push_str(&serde_json::to_string(instance).expect("instance serializes"));
            out.push('\n');
        }
        out
    }

    pub fn schemas_to_json(&self) -> String {
        schemas_to_json(&self.schemas)
    }

    pub fn schema(&self, pair_type: &str) -> Option<&RelationSchema> {
        self.schemas.get(pair_type)
    }

    pub fn schema_for(&self, instance: &Instance) -> &RelationSchema {
        // Validation guarantees presence.
        &self.schemas[&instance.pair_type]
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &Instance> {
        self.instances.iter().map(|i| (i.id.as_str(), i)).collect()
    }

    /// Content hash over the canonical serialization of schemas and instances.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.schemas_to_json().as_bytes());
        hasher.update(b"\n");
        hasher.update(self.to_jsonl().as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn counts_by_pair(&self) -> BTreeMap<String, usize> {
        counts_by_pair(self)
    }
}

pub fn counts_by_pair(dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for instance in &dataset.instances {
        *counts.entry(instance.pair_type.clone()).or_insert(0) += 1;
    }
    counts
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_schemas(text: &str) -> Result<BTreeMap<String, RelationSchema>, DatasetError> {
    let raw: BTreeMap<String, SchemaEntry> =
        serde_json::from_str(text).map_err(DatasetError::MalformedSchema)?;
    let mut schemas = BTreeMap::new();
    for (pair_type, entry) in raw {
        let schema = RelationSchema {
            pair_type: pair_type.clone(),
            labels: entry.labels,
            templates: entry.templates,
            no_relation_label: entry.no_relation_label,
            task: entry.task,
        };
        schema.validate()?;
        schemas.insert(pair_type, schema);
    }
    Ok(schemas)
}

pub fn load_schemas(path: &Path) -> Result<BTreeMap<String, RelationSchema>, DatasetError> {
    parse_schemas(&read(path)?)
}

pub fn schemas_to_json(schemas: &BTreeMap<String, RelationSchema>) -> String {
    let raw: BTreeMap<&str, SchemaEntry> = schemas
        .iter()
        .map(|(k, s)| {
            (
                k.as_str(),
                SchemaEntry {
                    labels: s.labels.clone(),
                    templates: s.templates.clone(),
                    no_relation_label: s.no_relation_label.clone(),
                    task: s.task.clone(),
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("schemas serialize")
}

/// The ORG-DATE schema: formation date, acquisition date, or no relation.
pub fn org_date_schema() -> RelationSchema {
    let templates = [
        ("formed_on", "{E1} is/was formed on {E2}"),
        ("acquired_on", "{E1} is/was acquired on {E2}"),
        ("no_other", "no/other relation between {E1} and {E2}"),
    ];
    RelationSchema {
        pair_type: "ORG-DATE".into(),
        labels: templates.iter().map(|(l, _)| l.to_string()).collect(),
        templates: templates
            .iter()
            .map(|(l, t)| (l.to_string(), t.to_string()))
            .collect(),
        no_relation_label: "no_other".into(),
        task: Some("date of formation".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1: &str = "The predecessor Mississippi Power Company was incorporated under the laws of the State of Maine on November 24, 1924 and was admitted to do business in Mississippi on December 23, 1924 and in Alabama on December 7, 1962.";

    fn schemas() -> BTreeMap<String, RelationSchema> {
        let s = org_date_schema();
        BTreeMap::from([(s.pair_type.clone(), s)])
    }

    fn fig1() -> Instance {
        Instance {
            id: "fig1".into(),
            sentence: FIG1.into(),
            e1: EntitySpan::new("Mississippi Power Company", 16, 41),
            e2: EntitySpan::new("December 23, 1924", 167, 184),
            pair_type: "ORG-DATE".into(),
            gold_label: Some("no_other".into()),
            crowd_labels: Some(vec!["formed_on".into()]),
        }
    }

    /// Pulls the text between each marker pair back out.
    fn extract(marked: &str, marker: &str) -> Option<String> {
        let a = marked.find(marker)?;
        let rest = &marked[a + marker.len()..];
        let b = rest.find(marker)?;
        Some(rest[..b].to_string())
    }

    #[test]
    fn loads_minimal_valid_line() {
        let line = serde_json::to_string(&fig1()).unwrap();
        let ds = Dataset::from_jsonl(&line, schemas()).unwrap();
        assert_eq!(ds.instances.len(), 1);
        assert_eq!(ds.schema("ORG-DATE").unwrap().labels.len(), 3);
        assert_eq!(ds.instances[0].pair_type, "ORG-DATE");
    }

    #[test]
    fn surface_mismatch_names_the_instance() {
        let mut bad = fig1();
        bad.e1.surface = "Mississippi Power Co".into();
        let err = Dataset::new(schemas(), vec![bad]).unwrap_err();
        match err {
            DatasetError::InvalidInstance { id, .. } => assert_eq!(id, "fig1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = serde_json::to_string(&fig1()).unwrap();
        let text = format!("{good}\n{{not json\n");
        match Dataset::from_jsonl(&text, schemas()).unwrap_err() {
            DatasetError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_duplicate_ids_overlap_and_foreign_labels() {
        assert!(matches!(
            Dataset::new(schemas(), vec![fig1(), fig1()]),
            Err(DatasetError::DuplicateId(_))
        ));
        let mut overlap = fig1();
        overlap.e2 = EntitySpan::new("Power", 28, 33);
        assert!(Dataset::new(schemas(), vec![overlap]).is_err());
        let mut foreign = fig1();
        foreign.crowd_labels = Some(vec!["founder_of".into()]);
        assert!(Dataset::new(schemas(), vec![foreign]).is_err());
        let mut unknown_pair = fig1();
        unknown_pair.pair_type = "PER-TITLE".into();
        assert!(Dataset::new(schemas(), vec![unknown_pair]).is_err());
    }

    #[test]
    fn schema_validation() {
        let mut s = org_date_schema();
        s.templates.insert("formed_on".into(), "{E1} formed".into());
        assert!(s.validate().is_err());
        let mut s = org_date_schema();
        s.no_relation_label = "none".into();
        assert!(s.validate().is_err());
        let mut s = org_date_schema();
        s.labels.push("formed_on".into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn marks_fig1_sentence() {
        let marked = mark_entities(&fig1());
        assert!(marked.contains(
            "predecessor **Mississippi Power Company** was incorporated"
        ));
        assert!(marked.contains("on __December 23, 1924__ and in Alabama"));
    }

    #[test]
    fn marks_entity_at_sentence_start_and_reversed_order() {
        let sentence = "In 2014 Acme Corp was formed; Acme Corp grew.";
        let inst = Instance {
            id: "x".into(),
            sentence: sentence.into(),
            // second "Acme Corp" occurrence, e2 precedes e1
            e1: EntitySpan::new("Acme Corp", 30, 39),
            e2: EntitySpan::new("2014", 3, 7),
            pair_type: "ORG-DATE".into(),
            gold_label: None,
            crowd_labels: None,
        };
        let marked = mark_entities(&inst);
        assert_eq!(marked, "In __2014__ Acme Corp was formed; **Acme Corp** grew.");

        let start = Instance {
            e1: EntitySpan::new("In", 0, 2),
            e2: EntitySpan::new("grew", 40, 44),
            ..inst
        };
        let marked = mark_entities(&start);
        assert!(marked.starts_with("**In**"));
        assert!(marked.ends_with("__grew__."));
    }

    #[test]
    fn adjacent_spans_keep_markers_paired() {
        let inst = Instance {
            id: "adj".into(),
            sentence: "ab".into(),
            e1: EntitySpan::new("a", 0, 1),
            e2: EntitySpan::new("b", 1, 2),
            pair_type: "ORG-DATE".into(),
            gold_label: None,
            crowd_labels: None,
        };
        assert_eq!(mark_entities(&inst), "**a**__b__");
        let swapped = Instance {
            e1: EntitySpan::new("b", 1, 2),
            e2: EntitySpan::new("a", 0, 1),
            ..inst
        };
        assert_eq!(mark_entities(&swapped), "__a__**b**");
    }

    #[test]
    fn non_ascii_offsets_are_chars() {
        let sentence = "Société Générale paid €40 million.";
        let e1 = EntitySpan::find(sentence, "Société Générale").unwrap();
        let e2 = EntitySpan::find(sentence, "€40 million").unwrap();
        assert_eq!((e2.start, e2.end), (22, 33));
        let inst = Instance {
            id: "fr".into(),
            sentence: sentence.into(),
            e1,
            e2,
            pair_type: "ORG-DATE".into(),
            gold_label: None,
            crowd_labels: None,
        };
        inst.validate(Some(&org_date_schema())).unwrap();
        assert_eq!(
            mark_entities(&inst),
            "**Société Générale** paid __€40 million__."
        );
    }

    #[test]
    fn counts() {
        let empty = Dataset::new(schemas(), vec![]).unwrap();
        assert!(counts_by_pair(&empty).is_empty());
        let mut second = fig1();
        second.id = "fig1b".into();
        let ds = Dataset::new(schemas(), vec![fig1(), second]).unwrap();
        assert_eq!(counts_by_pair(&ds), BTreeMap::from([("ORG-DATE".to_string(), 2)]));
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(schemas(), vec![fig1()]).unwrap();
        let data = dir.path().join("d.jsonl");
        let schema = dir.path().join("s.json");
        fs::write(&data, ds.to_jsonl()).unwrap();
        fs::write(&schema, ds.schemas_to_json()).unwrap();
        let back = Dataset::load(&data, &schema).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), ds.to_jsonl());
        assert_eq!(back.fingerprint(), ds.fingerprint());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            "[A-Za-zé0-9]{1,8}"
        }

        prop_compose! {
            fn arb_instance()(words in proptest::collection::vec(word(), 3..12), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) -> Instance {
                let n = words.len();
                let i = a.index(n);
                let mut j = b.index(n);
                if j == i { j = (i + 1) % n; }
                let sentence = words.join(" ");
                // char offsets of each word
                let mut starts = Vec::new();
                let mut pos = 0;
                for w in &words { starts.push(pos); pos += w.chars().count() + 1; }
                let span = |k: usize| EntitySpan::new(words[k].clone(), starts[k], starts[k] + words[k].chars().count());
                Instance { id: "p".into(), sentence, e1: span(i), e2: span(j), pair_type: "ORG-DATE".into(), gold_label: None, crowd_labels: None }
            }
        }

        proptest! {
            #[test]
            fn marking_round_trips(inst in arb_instance()) {
                prop_assume!(!inst.sentence.contains('*') && !inst.sentence.contains('_'));
                inst.validate(Some(&org_date_schema())).unwrap();
                let marked = mark_entities(&inst);
                prop_assert_eq!(marked.replace(E1_MARKER, "").replace(E2_MARKER, ""), inst.sentence.clone());
                prop_assert_eq!(extract(&marked, E1_MARKER).unwrap(), inst.e1.surface.clone());
                prop_assert_eq!(extract(&marked, E2_MARKER).unwrap(), inst.e2.surface.clone());
            }
        }
    }
}
