//! Seeded synthetic datasets in the shape of the financial relation corpus:
//! six entity pairs, their label sets, and per-pair instance counts. Sentences
//! are template-built, so they exercise the pipeline without standing in for
//! real text.

use std::collections::BTreeMap;

use crate::dataset::{Dataset, EntitySpan, Instance, RelationSchema};
use crate::prompting::{Exemplar, ExemplarBank, PromptVariant};
use crate::rng::SplitMix64;

/// Test-set instances per entity pair.
pub const TEST_SPLIT_COUNTS: [(&str, usize); 6] = [
    ("ORG-GPE", 710),
    ("ORG-ORG", 913),
    ("ORG-DATE", 554),
    ("ORG-MONEY", 281),
    ("PER-ORG", 485),
    ("PER-TITLE", 655),
];

pub fn test_split_counts() -> BTreeMap<String, usize> {
    TEST_SPLIT_COUNTS.iter().map(|(p, n)| (p.to_string(), *n)).collect()
}

fn schema(pair_type: &str, task: &str, labels: &[(&str, &str)]) -> RelationSchema {
    RelationSchema {
        pair_type: pair_type.to_string(),
        labels: labels.iter().map(|(l, _)| l.to_string()).collect(),
        templates: labels.iter().map(|(l, t)| (l.to_string(), t.to_string())).collect(),
        no_relation_label: "no_other".to_string(),
        task: Some(task.to_string()),
    }
}

const NO_OTHER: (&str, &str) = ("no_other", "no/other relation between {E1} and {E2}");

/// Schemas for the six entity pairs.
pub fn pair_schemas() -> BTreeMap<String, RelationSchema> {
    let list = [
        schema(
            "ORG-GPE",
            "location",
            &[
                ("headquartered_in", "{E1} is/was headquartered in {E2}"),
                ("operations_in", "{E1} has/had operations in {E2}"),
                ("formed_in", "{E1} is/was formed in {E2}"),
                NO_OTHER,
            ],
        ),
        schema(
            "ORG-ORG",
            "organization",
            &[
                ("subsidiary_of", "{E1} is/was a subsidiary of {E2}"),
                ("shares_of", "{E1} holds/held shares of {E2}"),
                ("agreement_with", "{E1} has/had an agreement with {E2}"),
                ("acquired_by", "{E1} is/was acquired by {E2}"),
                NO_OTHER,
            ],
        ),
        crate::dataset::org_date_schema(),
        schema(
            "ORG-MONEY",
            "financial",
            &[
                ("profit_of", "{E2} is/was a profit of {E1}"),
                ("loss_of", "{E2} is/was a loss of {E1}"),
                ("revenue_of", "{E2} is/was revenue of {E1}"),
                ("cost_of", "{E2} is/was a cost of {E1}"),
                NO_OTHER,
            ],
        ),
        schema(
            "PER-ORG",
            "affiliation",
            &[
                ("member_of", "{E1} is/was a member of {E2}"),
                ("employee_of", "{E1} is/was an employee of {E2}"),
                ("founder_of", "{E1} is/was a founder of {E2}"),
                NO_OTHER,
            ],
        ),
        schema("PER-TITLE", "title", &[("title", "{E2} is/was the title of {E1}"), NO_OTHER]),
    ];
    list.into_iter().map(|s| (s.pair_type.clone(), s)).collect()
}

const ORG_HEADS: [&str; 12] = [
    "Alder", "Birchmont", "Cobalt", "Dunmore", "Eastgate", "Fairhaven", "Granite", "Harbor", "Ironwood", "Juniper",
    "Keystone", "Lakeshore",
];
const ORG_TAILS: [&str; 6] = ["Holdings", "Capital", "Energy", "Bancorp", "Systems", "Partners"];
const GPES: [&str; 8] = ["Delaware", "Nevada", "Ohio", "Texas", "Ontario", "Bermuda", "Illinois", "Maine"];
const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November",
    "December",
];
const FIRST: [&str; 8] = ["Alice", "Brian", "Carmen", "David", "Elena", "Farid", "Grace", "Hiro"];
const LAST: [&str; 8] = ["Morrison", "Keenan", "Gadot", "Kimmel", "Untermeyer", "Huddy", "Ortega", "Lindqvist"];
const TITLES: [&str; 6] = ["Chairman", "Chief Financial Officer", "Treasurer", "President", "Secretary", "Director"];

fn org(rng: &mut SplitMix64, k: usize) -> String {
    format!("{} {} {k}", rng.choose(&ORG_HEADS).unwrap(), rng.choose(&ORG_TAILS).unwrap())
}

fn person(rng: &mut SplitMix64) -> String {
    format!("{} {}", rng.choose(&FIRST).unwrap(), rng.choose(&LAST).unwrap())
}

fn second_entity(pair_type: &str, rng: &mut SplitMix64, k: usize) -> String {
    match pair_type {
        "ORG-GPE" => rng.choose(&GPES).unwrap().to_string(),
        "ORG-ORG" | "PER-ORG" => format!("{} {} Group {k}", rng.choose(&ORG_HEADS).unwrap(), rng.choose(&ORG_TAILS).unwrap()),
        "ORG-DATE" => format!("{} {}, {}", rng.choose(&MONTHS).unwrap(), 1 + rng.below(28), 1950 + rng.below(70)),
        "ORG-MONEY" => format!("${}.{} million", 1 + rng.below(900), rng.below(10)),
        "PER-TITLE" => rng.choose(&TITLES).unwrap().to_string(),
        _ => format!("Entity {k}"),
    }
}

/// Sentence frames per label; some place `{E2}` before `{E1}`.
fn frames(pair_type: &str, label: &str) -> &'static [&'static str] {
    match (pair_type, label) {
        ("ORG-GPE", "headquartered_in") => &["{E1} maintains its corporate headquarters in {E2}.", "Located in {E2}, {E1} runs its head office there."],
        ("ORG-GPE", "operations_in") => &["{E1} operates three plants in {E2}.", "In {E2}, {E1} opened a regional office last year."],
        ("ORG-GPE", "formed_in") => &["{E1} was organized under the laws of {E2}.", "{E1} is a {E2} corporation."],
        ("ORG-ORG", "subsidiary_of") => &["{E1} is a wholly owned subsidiary of {E2}.", "{E2} owns all outstanding stock of {E1}."],
        ("ORG-ORG", "shares_of") => &["{E1} holds 12% of the common shares of {E2}.", "{E2} stock is partly held by {E1}."],
        ("ORG-ORG", "agreement_with") => &["{E1} entered into a supply agreement with {E2}.", "{E2} and {E1} signed a licensing contract."],
        ("ORG-ORG", "acquired_by") => &["{E1} was acquired by {E2} in a cash transaction.", "{E2} completed its purchase of {E1}."],
        ("ORG-DATE", "formed_on") => &["{E1} was incorporated on {E2}.", "On {E2}, {E1} was founded."],
        ("ORG-DATE", "acquired_on") => &["{E1} was acquired on {E2}.", "On {E2}, the purchase of {E1} closed."],
        ("ORG-MONEY", "profit_of") => &["{E1} reported operating profit of {E2}.", "Net income of {E2} was recorded by {E1}."],
        ("ORG-MONEY", "loss_of") => &["{E1} incurred a net loss of {E2}.", "A loss of {E2} was reported by {E1}."],
        ("ORG-MONEY", "revenue_of") => &["{E1} generated revenue of {E2}.", "Sales of {E2} were booked by {E1}."],
        ("ORG-MONEY", "cost_of") => &["{E1} spent {E2} on restructuring.", "Costs of {E2} were borne by {E1}."],
        ("PER-ORG", "member_of") => &["{E1} serves on the board of {E2}.", "{E2} named {E1} to its advisory council."],
        ("PER-ORG", "employee_of") => &["{E1} works as a senior manager at {E2}.", "{E2} employs {E1} as general counsel."],
        ("PER-ORG", "founder_of") => &["{E1} founded {E2} in a garage.", "{E2} was started by {E1}."],
        ("PER-TITLE", "title") => &["{E1} has served as {E2} since 2015.", "Our {E2}, {E1}, signed the report."],
        _ => &["{E1} was mentioned alongside {E2} in the filing.", "The report lists {E2} near a note about {E1}."],
    }
}

/// Fills a frame, returning the sentence and both spans by char offset.
fn fill(frame: &str, e1: &str, e2: &str) -> (String, EntitySpan, EntitySpan) {
    let mut sentence = String::new();
    let mut spans = [None, None];
    let mut rest = frame;
    while let Some(pos) = rest.find('{') {
        sentence.push_str(&rest[..pos]);
        let (which, surface) = if rest[pos..].starts_with("{E1}") { (0, e1) } else { (1, e2) };
        let start = sentence.chars().count();
        sentence.push_str(surface);
        spans[which] = Some(EntitySpan::new(surface, start, start + surface.chars().count()));
        rest = &rest[pos + 4..];
    }
    sentence.push_str(rest);
    let [a, b] = spans;
    (sentence, a.expect("frame has {E1}"), b.expect("frame has {E2}"))
}

/// Synthetic dataset with `counts` instances per pair type. Gold labels are
/// uniform over each schema's labels.
pub fn synthetic_dataset(counts: &BTreeMap<String, usize>, seed: u64) -> Dataset {
    let schemas = pair_schemas();
    let mut instances = Vec::new();
    for (pair_type, &n) in counts {
        let schema = &schemas[pair_type];
        for k in 0..n {
            let id = format!("{}-{k:05}", pair_type.to_lowercase());
            let mut rng = SplitMix64::keyed(seed, &id);
            let label = rng.choose(&schema.labels).unwrap().clone();
            let e1 = if pair_type.starts_with("PER") { person(&mut rng) } else { org(&mut rng, k) };
            let e2 = second_entity(pair_type, &mut rng, k);
            let frame = rng.choose(frames(pair_type, &label)).unwrap();
            let (sentence, e1, e2) = fill(frame, &e1, &e2);
            instances.push(Instance {
                id,
                sentence,
                e1,
                e2,
                pair_type: pair_type.clone(),
                gold_label: Some(label),
                crowd_labels: None,
            });
        }
    }
    let used = schemas.into_iter().filter(|(p, _)| counts.contains_key(p)).collect();
    Dataset::new(used, instances).expect("synthetic data is valid")
}

/// `n` instances spread over the six pairs in test-split proportions, at least
/// one per pair when `n >= 6`.
pub fn proportional_counts(n: usize) -> BTreeMap<String, usize> {
    let total: usize = TEST_SPLIT_COUNTS.iter().map(|(_, c)| c).sum();
    let mut counts: BTreeMap<String, usize> = TEST_SPLIT_COUNTS
        .iter()
        .map(|(p, c)| (p.to_string(), (n * c / total).max(usize::from(n >= 6))))
        .collect();
    let mut assigned: usize = counts.values().sum();
    let largest = "ORG-ORG".to_string();
    while assigned < n {
        *counts.get_mut(&largest).unwrap() += 1;
        assigned += 1;
    }
    while assigned > n {
        *counts.get_mut(&largest).unwrap() -= 1;
        assigned -= 1;
    }
    counts
}

/// Exemplar bank for every synthetic pair: the shipped ORG-DATE bank plus
/// template-built exemplars for the others.
pub fn synthetic_bank() -> ExemplarBank {
    let mut bank = ExemplarBank::new();
    let schemas = pair_schemas();
    for (pair_type, schema) in &schemas {
        if pair_type == "ORG-DATE" {
            continue;
        }
        let mut rng = SplitMix64::keyed(0, &format!("exemplars/{pair_type}"));
        let mut shots = Vec::new();
        for k in 0..5 {
            let label = &schema.labels[k % schema.labels.len()];
            let e1 = if pair_type.starts_with("PER") { person(&mut rng) } else { org(&mut rng, 900 + k) };
            let e2 = second_entity(pair_type, &mut rng, 900 + k);
            let frame = frames(pair_type, label)[0];
            let (sentence, s1, s2) = fill(frame, &e1, &e2);
            let probe = Instance {
                id: String::new(),
                sentence,
                e1: s1,
                e2: s2,
                pair_type: pair_type.clone(),
                gold_label: None,
                crowd_labels: None,
            };
            let answer = schema.render_option(label, &e1, &e2).unwrap();
            shots.push(Exemplar {
                pair_type: pair_type.clone(),
                sentence: crate::dataset::mark_entities(&probe),
                reasoning: Some(format!(
                    "The sentence links {e1} and {e2}; the closest listed relation is \"{answer}\"."
                )),
                answer,
            });
        }
        for variant in [PromptVariant::OneShot, PromptVariant::FiveShot, PromptVariant::OneShotCot, PromptVariant::FiveShotCot] {
            let take = variant.exemplar_count();
            let mut chosen: Vec<Exemplar> = shots[..take].to_vec();
            if !variant.is_cot() {
                for ex in &mut chosen {
                    ex.reasoning = None;
                }
            }
            bank.insert(pair_type, variant, chosen).expect("synthetic exemplars are valid");
        }
    }
    bank.extend(ExemplarBank::reference());
    bank
}
