//! Triple datasets: generators for modular-parity constraints, triadic rule
//! bases and a kinship graph, plus the TSV directory format.
//!
//! Every dataset goes through [`TripleDataset::from_named`], which assigns ids
//! by lexicographic order of names. Generators pad numeric names with zeros
//! so that this order matches the numeric one, which makes a TSV save/load
//! round trip the identity.

use crate::error::{NtsError, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self { head, relation, tail }
    }
}

/// Bidirectional name ↔ contiguous id map.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    names: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Ids follow sorted name order.
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let set: BTreeSet<String> = names.into_iter().collect();
        let names: Vec<String> = set.into_iter().collect();
        let ids = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, ids }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

pub type NamedTriple = [String; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TripleDataset {
    pub entities: Vocab,
    pub relations: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub all_true: BTreeSet<Triple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(NtsError::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl TripleDataset {
    pub fn from_named(train: &[NamedTriple], valid: &[NamedTriple], test: &[NamedTriple]) -> Result<Self> {
        let all = || train.iter().chain(valid).chain(test);
        let entities = Vocab::from_names(all().flat_map(|t| [t[0].clone(), t[2].clone()]));
        let relations = Vocab::from_names(all().map(|t| t[1].clone()));
        let encode = |ts: &[NamedTriple]| -> Vec<Triple> {
            ts.iter()
                .map(|t| {
                    Triple::new(
                        entities.id(&t[0]).unwrap(),
                        relations.id(&t[1]).unwrap(),
                        entities.id(&t[2]).unwrap(),
                    )
                })
                .collect()
        };
        let (train, valid, test) = (encode(train), encode(valid), encode(test));
        let all_true = train.iter().chain(&valid).chain(&test).copied().collect();
        let ds = Self {
            entities,
            relations,
            train,
            valid,
            test,
            all_true,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks split disjointness, id ranges and `all_true ⊇ splits`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in self.train.iter().chain(&self.valid).chain(&self.test) {
            if t.head >= self.entities.len() || t.tail >= self.entities.len() || t.relation >= self.relations.len() {
                return Err(NtsError::Data(format!("triple {t:?} out of vocabulary")));
            }
            if !seen.insert(*t) {
                return Err(NtsError::Data(format!(
                    "triple ({}, {}, {}) appears twice across splits",
                    self.entities.name(t.head),
                    self.relations.name(t.relation),
                    self.entities.name(t.tail)
                )));
            }
            if !self.all_true.contains(t) {
                return Err(NtsError::Data(format!("triple {t:?} missing from the known-true set")));
            }
        }
        Ok(())
    }

    /// True when entities and relations carry the same names in the same order.
    pub fn shares_vocabulary(&self) -> bool {
        self.entities.names() == self.relations.names()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn named(&self, t: &Triple) -> NamedTriple {
        [
            self.entities.name(t.head).to_string(),
            self.relations.name(t.relation).to_string(),
            self.entities.name(t.tail).to_string(),
        ]
    }

    /// Encodes a named triple; `None` if any name is unknown.
    pub fn encode(&self, t: &NamedTriple) -> Option<Triple> {
        Some(Triple::new(
            self.entities.id(&t[0])?,
            self.relations.id(&t[1])?,
            self.entities.id(&t[2])?,
        ))
    }
}

/// Triadic rules "if A and B then C", stored as triples `(A, B, C)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    pub rules: Vec<Triple>,
    /// Triples `(A, B, C')` contradicting a rule's conclusion.
    pub distractors: Vec<Triple>,
}

/// Shuffles and splits 80/10/10; validation and test get `floor(n/10)` each.
fn split_80_10_10<T: Clone>(mut items: Vec<T>, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>, Vec<T>) {
    items.shuffle(rng);
    let n_holdout = items.len() / 10;
    let test = items.split_off(items.len() - n_holdout);
    let valid = items.split_off(items.len() - n_holdout);
    (items, valid, test)
}

fn pad_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

/// Residue name with zero padding so lexicographic order is numeric order.
pub fn residue_name(v: usize, k: usize) -> String {
    format!("{v:0w$}", w = pad_width(k))
}

/// Modular parity data: `(h, r, t)` is positive iff `(h + r + t) mod k == 0`.
///
/// `n_per_class` caps the positives kept per relation residue; `None` keeps
/// all `k` of them.
pub fn gen_parity(k: usize, n_per_class: Option<usize>, seed: u64) -> Result<TripleDataset> {
    if k < 2 {
        return Err(NtsError::Config(format!("parity modulus must be at least 2, got {k}")));
    }
    if n_per_class == Some(0) {
        return Err(NtsError::Config("n_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positives = Vec::new();
    for r in 0..k {
        let mut class: Vec<(usize, usize)> = (0..k).map(|h| (h, (2 * k - h - r) % k)).collect();
        if let Some(n) = n_per_class {
            if n < k {
                class.shuffle(&mut rng);
                class.truncate(n);
                class.sort_unstable();
            }
        }
        for (h, t) in class {
            positives.push([residue_name(h, k), residue_name(r, k), residue_name(t, k)]);
        }
    }
    let (train, valid, test) = split_80_10_10(positives, &mut rng);
    TripleDataset::from_named(&train, &valid, &test)
}

/// Random rule base over `n_atoms` atoms. Each premise pair `(A, B)` with
/// `A ≠ B` carries at most one conclusion `C ∉ {A, B}`.
pub fn gen_rules(n_atoms: usize, n_rules: usize, seed: u64) -> Result<(TripleDataset, RuleSet)> {
    if n_atoms < 3 {
        return Err(NtsError::Config(format!("need at least 3 atoms, got {n_atoms}")));
    }
    let max_rules = n_atoms * (n_atoms - 1);
    if n_rules == 0 || n_rules > max_rules {
        return Err(NtsError::Config(format!(
            "n_rules must be in 1..={max_rules} for {n_atoms} atoms, got {n_rules}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atom = |i: usize| format!("a{}", residue_name(i, n_atoms));
    let mut premises: Vec<(usize, usize)> = (0..n_atoms)
        .flat_map(|a| (0..n_atoms).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    premises.shuffle(&mut rng);
    premises.truncate(n_rules);
    let named: Vec<NamedTriple> = premises
        .iter()
        .map(|&(a, b)| {
            let c = loop {
                let c = rng.random_range(0..n_atoms);
                if c != a && c != b {
                    break c;
                }
            };
            [atom(a), atom(b), atom(c)]
        })
        .collect();
    let (train, valid, test) = split_80_10_10(named.clone(), &mut rng);
    let ds = TripleDataset::from_named(&train, &valid, &test)?;

    let mut rules: Vec<Triple> = named.iter().map(|t| ds.encode(t).unwrap()).collect();
    rules.sort_unstable();
    let rule_set: BTreeSet<Triple> = rules.iter().copied().collect();
    let mut distractors = Vec::new();
    for r in &rules {
        let options: Vec<usize> = (0..ds.entities.len())
            .filter(|&c| c != r.tail && !rule_set.contains(&Triple::new(r.head, r.relation, c)))
            .collect();
        if let Some(&c) = options.choose(&mut rng) {
            distractors.push(Triple::new(r.head, r.relation, c));
        }
    }
    Ok((ds, RuleSet { rules, distractors }))
}

pub const KINSHIP_RELATIONS: [&str; 8] = [
    "child_of",
    "cousin_of",
    "grandchild_of",
    "grandparent_of",
    "parent_of",
    "sibling_of",
    "spouse_of",
    "uncle_aunt_of",
];

const KINSHIP_TARGET_SIZE: usize = 100;

/// Parent links of a sampled family tree, plus couples.
struct FamilyTree {
    size: usize,
    parents: Vec<Vec<usize>>,
    couples: Vec<(usize, usize)>,
}

fn sample_family_tree(rng: &mut ChaCha8Rng) -> FamilyTree {
    let mut parents: Vec<Vec<usize>> = Vec::new();
    let mut couples = Vec::new();
    let new_person = |parents: &mut Vec<Vec<usize>>, ps: Vec<usize>| {
        parents.push(ps);
        parents.len() - 1
    };
    let mut generation: Vec<(usize, usize)> = (0..5)
        .map(|_| {
            let a = new_person(&mut parents, vec![]);
            let b = new_person(&mut parents, vec![]);
            (a, b)
        })
        .collect();
    couples.extend(generation.iter().copied());
    'outer: while !generation.is_empty() {
        let mut children = Vec::new();
        for &(a, b) in &generation {
            for _ in 0..rng.random_range(2..=3) {
                if parents.len() >= KINSHIP_TARGET_SIZE {
                    break 'outer;
                }
                children.push(new_person(&mut parents, vec![a, b]));
            }
        }
        let mut next = Vec::new();
        for &c in &children {
            if parents.len() >= KINSHIP_TARGET_SIZE {
                break;
            }
            if rng.random_bool(0.7) {
                let spouse = new_person(&mut parents, vec![]);
                next.push((c, spouse));
            }
        }
        couples.extend(next.iter().copied());
        generation = next;
    }
    FamilyTree {
        size: parents.len(),
        parents,
        couples,
    }
}

/// Closes parent links under the kinship relations.
fn kinship_closure(tree: &FamilyTree) -> BTreeSet<(usize, &'static str, usize)> {
    let mut facts = BTreeSet::new();
    let children_of = |p: usize| (0..tree.size).filter(move |&c| tree.parents[c].contains(&p));
    let siblings = |x: usize| -> BTreeSet<usize> {
        tree.parents[x]
            .iter()
            .flat_map(|&p| children_of(p))
            .filter(|&s| s != x)
            .collect()
    };
    for c in 0..tree.size {
        for &p in &tree.parents[c] {
            facts.insert((p, "parent_of", c));
            facts.insert((c, "child_of", p));
            for &gp in &tree.parents[p] {
                facts.insert((gp, "grandparent_of", c));
                facts.insert((c, "grandchild_of", gp));
            }
            for u in siblings(p) {
                facts.insert((u, "uncle_aunt_of", c));
                for cousin in children_of(u) {
                    facts.insert((c, "cousin_of", cousin));
                }
            }
        }
        for s in siblings(c) {
            facts.insert((c, "sibling_of", s));
        }
    }
    for &(a, b) in &tree.couples {
        facts.insert((a, "spouse_of", b));
        facts.insert((b, "spouse_of", a));
    }
    facts
}

/// Seeded kinship graph of about 100 people over 8 relations.
pub fn gen_toy_kg(seed: u64) -> Result<TripleDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = sample_family_tree(&mut rng);
    let person = |i: usize| format!("person_{}", residue_name(i, tree.size));
    let facts: Vec<NamedTriple> = kinship_closure(&tree)
        .into_iter()
        .map(|(h, r, t)| [person(h), r.to_string(), person(t)])
        .collect();
    let (train, valid, test) = split_80_10_10(facts, &mut rng);
    TripleDataset::from_named(&train, &valid, &test)
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\t', '\n', '\r']) {
        return Err(NtsError::Data(format!("name {name:?} cannot be written as a TSV field")));
    }
    Ok(())
}

/// Writes named triples, one `head\trelation\ttail` line each.
pub fn write_triples(path: &Path, triples: &[NamedTriple]) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        for f in t {
            check_name(f)?;
        }
        out.push_str(&t.join("\t"));
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Parses a TSV triple file. Errors carry 1-based line numbers.
pub fn parse_triples(text: &str) -> Result<Vec<NamedTriple>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(NtsError::Parse {
                    line: i + 1,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(NtsError::Parse {
                    line: i + 1,
                    msg: "empty field".into(),
                });
            }
            Ok([fields[0].to_string(), fields[1].to_string(), fields[2].to_string()])
        })
        .collect()
}

pub fn read_triples(path: &Path) -> Result<Vec<NamedTriple>> {
    let text = fs::read_to_string(path)?;
    parse_triples(&text).map_err(|e| match e {
        NtsError::Parse { line, msg } => NtsError::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn save_tsv(ds: &TripleDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (file, split) in [("train.tsv", &ds.train), ("valid.tsv", &ds.valid), ("test.tsv", &ds.test)] {
        let named: Vec<NamedTriple> = split.iter().map(|t| ds.named(t)).collect();
        write_triples(&dir.join(file), &named)?;
    }
    Ok(())
}

/// Loads `train.tsv`, `valid.tsv` and `test.tsv` from `dir`. The training
/// file must be non-empty; the held-out files may be empty.
pub fn load_tsv(dir: &Path) -> Result<TripleDataset> {
    if !dir.is_dir() {
        return Err(NtsError::Data(format!("dataset directory {} not found", dir.display())));
    }
    let train = read_triples(&dir.join("train.tsv"))?;
    if train.is_empty() {
        return Err(NtsError::Data(format!("{} is empty", dir.join("train.tsv").display())));
    }
    let valid = read_triples(&dir.join("valid.tsv"))?;
    let test = read_triples(&dir.join("test.tsv"))?;
    TripleDataset::from_named(&train, &valid, &test)
}

pub fn save_rules(ds: &TripleDataset, rules: &RuleSet, dir: &Path) -> Result<()> {
    let named = |ts: &[Triple]| ts.iter().map(|t| ds.named(t)).collect::<Vec<_>>();
    write_triples(&dir.join("rules.tsv"), &named(&rules.rules))?;
    write_triples(&dir.join("distractors.tsv"), &named(&rules.distractors))?;
    Ok(())
}

/// Loads `rules.tsv` (and `distractors.tsv` when present) against the
/// vocabulary of `ds`. Returns `None` when the directory has no rule file.
pub fn load_rules(ds: &TripleDataset, dir: &Path) -> Result<Option<RuleSet>> {
    let path = dir.join("rules.tsv");
    if !path.exists() {
        return Ok(None);
    }
    let encode_all = |ts: Vec<NamedTriple>| -> Result<Vec<Triple>> {
        ts.iter()
            .map(|t| {
                ds.encode(t)
                    .ok_or_else(|| NtsError::Data(format!("rule {t:?} uses names outside the dataset vocabulary")))
            })
            .collect()
    };
    let rules = encode_all(read_triples(&path)?)?;
    let distractor_path = dir.join("distractors.tsv");
    let distractors = if distractor_path.exists() {
        encode_all(read_triples(&distractor_path)?)?
    } else {
        Vec::new()
    };
    Ok(Some(RuleSet { rules, distractors }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residue(ds: &TripleDataset, t: &Triple) -> (usize, usize, usize) {
        let p = |s: &str| s.parse::<usize>().unwrap();
        (
            p(ds.entities.name(t.head)),
            p(ds.relations.name(t.relation)),
            p(ds.entities.name(t.tail)),
        )
    }

    #[test]
    fn parity_matches_brute_force_enumeration() {
        for k in [2, 3, 5, 12] {
            let ds = gen_parity(k, None, 3).unwrap();
            let generated: BTreeSet<_> = ds.all_true.iter().map(|t| residue(&ds, t)).collect();
            let mut expected = BTreeSet::new();
            for h in 0..k {
                for r in 0..k {
                    for t in 0..k {
                        if (h + r + t) % k == 0 {
                            expected.insert((h, r, t));
                        }
                    }
                }
            }
            assert_eq!(generated, expected, "k = {k}");
            assert_eq!(ds.train.len() + ds.valid.len() + ds.test.len(), k * k);
            // ids coincide with residues thanks to zero padding
            for t in &ds.all_true {
                assert_eq!((t.head, t.relation, t.tail), residue(&ds, t));
            }
        }
    }

    #[test]
    fn parity_examples() {
        assert_eq!((1 + 1 + 1) % 3, 0);
        let ds = gen_parity(3, None, 0).unwrap();
        assert!(ds.all_true.contains(&Triple::new(1, 1, 1)));
        assert!(!ds.all_true.contains(&Triple::new(1, 1, 0)));
        assert_eq!(gen_parity(3, None, 9).unwrap(), gen_parity(3, None, 9).unwrap());
        assert!(matches!(gen_parity(1, None, 0), Err(NtsError::Config(_))));
        assert!(ds.shares_vocabulary());
    }

    #[test]
    fn parity_subsampling_per_class() {
        let ds = gen_parity(7, Some(3), 1).unwrap();
        assert_eq!(ds.all_true.len(), 21);
        for r in 0..7 {
            assert_eq!(ds.all_true.iter().filter(|t| t.relation == r).count(), 3);
        }
    }

    #[test]
    fn split_sizes() {
        let ds = gen_parity(5, None, 0).unwrap();
        assert_eq!((ds.train.len(), ds.valid.len(), ds.test.len()), (21, 2, 2));
    }

    #[test]
    fn rules_examples() {
        let (ds, rules) = gen_rules(3, 1, 0).unwrap();
        assert_eq!(ds.all_true.len(), 1);
        assert_eq!(rules.rules.len(), 1);
        let (_, big) = gen_rules(10, 60, 5).unwrap();
        let unique: BTreeSet<_> = big.rules.iter().collect();
        assert_eq!(unique.len(), 60);
        let premises: BTreeSet<_> = big.rules.iter().map(|t| (t.head, t.relation)).collect();
        assert_eq!(premises.len(), 60);
        assert_eq!(gen_rules(10, 60, 5).unwrap().1, big);
        assert!(matches!(gen_rules(3, 7, 0), Err(NtsError::Config(_))));
        assert!(matches!(gen_rules(2, 1, 0), Err(NtsError::Config(_))));
    }

    #[test]
    fn distractors_contradict_rules() {
        let (ds, rules) = gen_rules(8, 30, 2).unwrap();
        let rule_set: BTreeSet<_> = rules.rules.iter().collect();
        for d in &rules.distractors {
            assert!(!rule_set.contains(d));
            assert!(!ds.all_true.contains(d));
        }
    }

    #[test]
    fn kinship_graph_is_closed_under_grandparent() {
        let ds = gen_toy_kg(0).unwrap();
        assert!((90..=110).contains(&ds.entities.len()), "{}", ds.entities.len());
        assert_eq!(ds.relations.len(), 8);
        let parent = ds.relations.id("parent_of").unwrap();
        let grand = ds.relations.id("grandparent_of").unwrap();
        let parent_facts: Vec<_> = ds.all_true.iter().filter(|t| t.relation == parent).collect();
        let mut checked = 0;
        for a in &parent_facts {
            for b in parent_facts.iter().filter(|b| b.head == a.tail) {
                assert!(ds.all_true.contains(&Triple::new(a.head, grand, b.tail)));
                checked += 1;
            }
        }
        assert!(checked > 0);
        assert_eq!(gen_toy_kg(0).unwrap(), ds);
        // contiguous ids
        for t in &ds.all_true {
            assert!(t.head < ds.entities.len() && t.tail < ds.entities.len());
        }
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [gen_parity(5, None, 4).unwrap(), gen_toy_kg(2).unwrap()] {
            save_tsv(&ds, dir.path()).unwrap();
            assert_eq!(load_tsv(dir.path()).unwrap(), ds);
        }
    }

    #[test]
    fn rules_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, rules) = gen_rules(9, 40, 1).unwrap();
        save_tsv(&ds, dir.path()).unwrap();
        save_rules(&ds, &rules, dir.path()).unwrap();
        let loaded = load_tsv(dir.path()).unwrap();
        assert_eq!(load_rules(&loaded, dir.path()).unwrap().unwrap(), rules);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_triples("a\tb\tc\na\tb\n").unwrap_err();
        assert!(matches!(err, NtsError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_training_file_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["train.tsv", "valid.tsv", "test.tsv"] {
            fs::write(dir.path().join(f), "").unwrap();
        }
        assert!(matches!(load_tsv(dir.path()), Err(NtsError::Data(_))));
    }

    #[test]
    fn ids_follow_name_order() {
        let t = |a: &str, b: &str, c: &str| [a.to_string(), b.to_string(), c.to_string()];
        let ds = TripleDataset::from_named(&[t("zeta", "r", "alpha"), t("mid", "q", "zeta")], &[], &[]).unwrap();
        assert_eq!(ds.entities.names(), &["alpha", "mid", "zeta"]);
        assert_eq!(ds.relations.names(), &["q", "r"]);
        assert_eq!(ds.train[0], Triple::new(2, 1, 0));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let t = [String::from("a"), String::from("r"), String::from("b")];
        assert!(matches!(
            TripleDataset::from_named(std::slice::from_ref(&t), std::slice::from_ref(&t), &[]),
            Err(NtsError::Data(_))
        ));
    }
}
