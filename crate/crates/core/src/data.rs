//! Task suites: synthetic bag-of-words generation with controllable
//! relatedness, task reordering, and JSON-lines corpora.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MoclError, Result};
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    /// Task-local class index.
    pub label: usize,
}

/// One classification task with its own label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based position in the sequence.
    pub id: usize,
    pub name: String,
    pub labels: Vec<String>,
    /// Global id of this task's class 0; label spaces never overlap.
    pub label_offset: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn global_label(&self, local: usize) -> usize {
        self.label_offset + local
    }

    /// Unique word types across all splits.
    pub fn token_pool(&self) -> BTreeSet<String> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .flat_map(|e| e.text.split_whitespace().map(str::to_lowercase))
            .collect()
    }
}

/// Checks ids, label offsets, label validity and split disjointness.
pub fn validate_suite(tasks: &[TaskSpec]) -> Result<()> {
    let mut offset = 0;
    for (i, t) in tasks.iter().enumerate() {
        if t.id != i + 1 {
            return Err(MoclError::Data(format!(
                "task {} has id {}, expected {}",
                t.name,
                t.id,
                i + 1
            )));
        }
        if t.n_classes() < 2 {
            return Err(MoclError::Data(format!("task {} has fewer than 2 labels", t.name)));
        }
        if t.label_offset != offset {
            return Err(MoclError::Data(format!(
                "task {} label offset {} overlaps earlier label spaces",
                t.name, t.label_offset
            )));
        }
        offset += t.n_classes();
        if t.train.is_empty() || t.test.is_empty() {
            return Err(MoclError::Data(format!("task {} has an empty train or test split", t.name)));
        }
        for e in t.train.iter().chain(&t.val).chain(&t.test) {
            if e.label >= t.n_classes() {
                return Err(MoclError::Data(format!(
                    "task {} example label {} out of range",
                    t.name, e.label
                )));
            }
        }
        let train: HashSet<&str> = t.train.iter().map(|e| e.text.as_str()).collect();
        let val: HashSet<&str> = t.val.iter().map(|e| e.text.as_str()).collect();
        if t.test.iter().any(|e| train.contains(e.text.as_str()) || val.contains(e.text.as_str()))
            || t.val.iter().any(|e| train.contains(e.text.as_str()))
        {
            return Err(MoclError::Data(format!("task {} splits share examples", t.name)));
        }
    }
    Ok(())
}

/// Parameters of the synthetic suite generator.
///
/// Each class owns a set of `tokens_per_class` word types; a task's pool is
/// the union of its class sets. For task `t > 1`, a fraction `relatedness`
/// of each class set is carried over from the previous task (from the same
/// class, or from the next class when `interference` is on, which flips which
/// label the shared words indicate). Each word of an example is drawn from
/// its class set with probability `signal`, otherwise uniformly from the
/// task pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub tokens_per_class: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub signal: f64,
    pub relatedness: f64,
    /// Size of the word universe shared by all tasks.
    pub vocab_size: usize,
    pub interference: bool,
    /// Suite seed; falls back to the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            classes_per_task: 3,
            tokens_per_class: 12,
            train_size: 120,
            val_size: 30,
            test_size: 60,
            min_words: 6,
            max_words: 14,
            signal: 0.5,
            relatedness: 0.0,
            vocab_size: 1500,
            interference: false,
            seed: None,
        }
    }
}

impl SuiteConfig {
    fn shared_per_class(&self) -> usize {
        (self.relatedness * self.tokens_per_class as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoclError::Config(m));
        if self.n_tasks == 0 {
            return bad("n_tasks must be >= 1".into());
        }
        if self.classes_per_task < 2 {
            return bad("classes_per_task must be >= 2".into());
        }
        if self.tokens_per_class == 0 {
            return bad("tokens_per_class must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return bad(format!("relatedness {} outside [0, 1]", self.relatedness));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return bad(format!("signal {} outside [0, 1]", self.signal));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!(
                "word counts need 1 <= min_words ({}) <= max_words ({})",
                self.min_words, self.max_words
            ));
        }
        if self.train_size < self.classes_per_task || self.test_size == 0 {
            return bad("train split needs one example per class and test must be non-empty".into());
        }
        let fresh_first = self.classes_per_task * self.tokens_per_class;
        let fresh_later = self.classes_per_task * (self.tokens_per_class - self.shared_per_class());
        let needed = fresh_first + (self.n_tasks - 1) * fresh_later;
        if needed > self.vocab_size {
            return bad(format!(
                "infeasible suite: {} tasks x {} classes x {} tokens at relatedness {} need {needed} \
                 distinct words but vocab_size is {}",
                self.n_tasks,
                self.classes_per_task,
                self.tokens_per_class,
                self.relatedness,
                self.vocab_size
            ));
        }
        Ok(())
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Generates a deterministic suite from `cfg` (using `fallback_seed` if the
/// config carries none).
pub fn gen_suite(cfg: &SuiteConfig, fallback_seed: u64) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed.unwrap_or(fallback_seed));
    let mut pool_rng = seeds.stream("suite-pools", 0);
    let mut universe: Vec<usize> = (0..cfg.vocab_size).collect();
    universe.shuffle(&mut pool_rng);
    let mut fresh = universe.into_iter();
    let c = cfg.classes_per_task;
    let shared = cfg.shared_per_class();

    let mut class_sets: Vec<Vec<Vec<usize>>> = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let sets = (0..c)
            .map(|k| {
                let mut set: Vec<usize> = if t == 0 {
                    Vec::new()
                } else {
                    let source = if cfg.interference { (k + 1) % c } else { k };
                    class_sets[t - 1][source]
                        .choose_multiple(&mut pool_rng, shared)
                        .copied()
                        .collect()
                };
                let take = cfg.tokens_per_class - set.len();
                set.extend(fresh.by_ref().take(take));
                set.sort_unstable();
                set
            })
            .collect();
        class_sets.push(sets);
    }

    let mut offset = 0;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for (t, sets) in class_sets.iter().enumerate() {
        let pool: Vec<usize> = sets
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut seen = HashSet::new();
        let mut split = |which: u64, n: usize| -> Result<Vec<Example>> {
            let mut rng = seeds.stream("suite-examples", (t as u64) * 3 + which);
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0;
            while out.len() < n {
                attempts += 1;
                if attempts > 100 * n + 1000 {
                    return Err(MoclError::Config(format!(
                        "task {} cannot produce {n} distinct examples; raise max_words or tokens_per_class",
                        t + 1
                    )));
                }
                let label = out.len() % c;
                let len = rng.random_range(cfg.min_words..=cfg.max_words);
                let words: Vec<String> = (0..len)
                    .map(|_| {
                        let id = if rng.random_bool(cfg.signal) {
                            *sets[label].choose(&mut rng).expect("non-empty class set")
                        } else {
                            *pool.choose(&mut rng).expect("non-empty pool")
                        };
                        word(id)
                    })
                    .collect();
                let text = words.join(" ");
                if seen.insert(text.clone()) {
                    out.push(Example { text, label });
                }
            }
            out.shuffle(&mut rng);
            Ok(out)
        };
        let train = split(0, cfg.train_size)?;
        let val = split(1, cfg.val_size)?;
        let test = split(2, cfg.test_size)?;
        let id = t + 1;
        tasks.push(TaskSpec {
            id,
            name: format!("task{id}"),
            labels: (0..c).map(|k| format!("t{id}c{k}")).collect(),
            label_offset: offset,
            train,
            val,
            test,
        });
        offset += c;
    }
    Ok(tasks)
}

/// Fraction of task `b`'s word types that also occur in task `a`.
pub fn token_overlap(a: &TaskSpec, b: &TaskSpec) -> f64 {
    let pa = a.token_pool();
    let pb = b.token_pool();
    if pb.is_empty() {
        return 0.0;
    }
    pb.intersection(&pa).count() as f64 / pb.len() as f64
}

/// Reorders tasks: position `i` receives the task whose current id is
/// `order[i]`. Ids and label offsets are reassigned; examples are unchanged.
pub fn apply_order(tasks: Vec<TaskSpec>, order: &[usize]) -> Result<Vec<TaskSpec>> {
    if order.len() != tasks.len() {
        return Err(MoclError::Config(format!(
            "order lists {} tasks, suite has {}",
            order.len(),
            tasks.len()
        )));
    }
    let mut check = order.to_vec();
    check.sort_unstable();
    if check != (1..=tasks.len()).collect::<Vec<_>>() {
        return Err(MoclError::Config(format!(
            "order {order:?} is not a permutation of 1..={}",
            tasks.len()
        )));
    }
    let mut slots: Vec<Option<TaskSpec>> = tasks.into_iter().map(Some).collect();
    let mut offset = 0;
    let mut out = Vec::with_capacity(order.len());
    for (pos, &old) in order.iter().enumerate() {
        let mut t = slots[old - 1].take().expect("permutation visits each task once");
        t.id = pos + 1;
        t.label_offset = offset;
        offset += t.n_classes();
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    text: String,
    label: String,
    task: String,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Debug, Serialize)]
struct CorpusLineOut<'a> {
    text: &'a str,
    label: &'a str,
    task: &'a str,
    split: &'a str,
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Val,
    Test,
}

/// 80/10/10 bucket from a hash of the text.
fn hashed_split(text: &str) -> Split {
    let digest = Sha256::digest(text.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    match u64::from_le_bytes(b) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

/// Parses a JSON-lines corpus: one `{text, label, task, split?}` object per
/// line. Tasks and labels are numbered in order of first appearance.
pub fn parse_jsonl(content: &str) -> Result<Vec<TaskSpec>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_task: HashMap<String, TaskSpec> = HashMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: CorpusLine = serde_json::from_str(raw).map_err(|e| MoclError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.task.is_empty() {
            return Err(MoclError::Parse {
                line: line_no,
                message: "empty task name".into(),
            });
        }
        let task = by_task.entry(line.task.clone()).or_insert_with(|| {
            order.push(line.task.clone());
            TaskSpec {
                id: 0,
                name: line.task.clone(),
                labels: Vec::new(),
                label_offset: 0,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            }
        });
        let label = match task.labels.iter().position(|l| *l == line.label) {
            Some(i) => i,
            None => {
                task.labels.push(line.label.clone());
                task.labels.len() - 1
            }
        };
        let split = match line.split.as_deref() {
            None => hashed_split(&line.text),
            Some("train") => Split::Train,
            Some("val") | Some("validation") | Some("dev") => Split::Val,
            Some("test") => Split::Test,
            Some(other) => {
                return Err(MoclError::Parse {
                    line: line_no,
                    message: format!("unknown split {other:?}"),
                })
            }
        };
        let ex = Example {
            text: line.text,
            label,
        };
        match split {
            Split::Train => task.train.push(ex),
            Split::Val => task.val.push(ex),
            Split::Test => task.test.push(ex),
        }
    }
    if order.is_empty() {
        return Err(MoclError::Data("corpus contains no examples".into()));
    }
    let mut offset = 0;
    let mut tasks = Vec::with_capacity(order.len());
    for (i, name) in order.iter().enumerate() {
        let mut t = by_task.remove(name).expect("task recorded on first sight");
        if t.train.is_empty() {
            return Err(MoclError::Data(format!("task {name} has no training examples")));
        }
        t.id = i + 1;
        t.label_offset = offset;
        offset += t.n_classes();
        tasks.push(t);
    }
    Ok(tasks)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<TaskSpec>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

/// Writes a suite in the corpus format, with explicit splits.
pub fn to_jsonl(tasks: &[TaskSpec]) -> Result<String> {
    let mut out = String::new();
    for t in tasks {
        for (split, examples) in [("train", &t.train), ("val", &t.val), ("test", &t.test)] {
            for e in examples {
                let line = CorpusLineOut {
                    text: &e.text,
                    label: &t.labels[e.label],
                    task: &t.name,
                    split,
                };
                out.push_str(&serde_json::to_string(&line)?);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(relatedness: f64) -> SuiteConfig {
        SuiteConfig {
            n_tasks: 3,
            classes_per_task: 2,
            tokens_per_class: 10,
            train_size: 20,
            val_size: 6,
            test_size: 10,
            relatedness,
            vocab_size: 200,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_suite(&small(0.5), 3).unwrap();
        let b = gen_suite(&small(0.5), 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = gen_suite(&small(0.5), 4).unwrap();
        assert_ne!(a, c);
        validate_suite(&a).unwrap();
    }

    #[test]
    fn zero_relatedness_gives_disjoint_pools() {
        let s = gen_suite(&small(0.0), 1).unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    assert_eq!(token_overlap(&s[i], &s[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn full_relatedness_reuses_previous_pool() {
        let s = gen_suite(&small(1.0), 1).unwrap();
        let p1 = s[0].token_pool();
        assert!(s[1].token_pool().is_subset(&p1));
    }

    #[test]
    fn overlap_grows_with_relatedness() {
        let measured: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&r| token_overlap(&gen_suite(&small(r), 2).unwrap()[0], &gen_suite(&small(r), 2).unwrap()[1]))
            .collect();
        assert!(measured.windows(2).all(|w| w[0] <= w[1]), "{measured:?}");
    }

    #[test]
    fn label_spaces_are_disjoint_and_balanced() {
        let s = gen_suite(&small(0.0), 1).unwrap();
        assert_eq!(s.iter().map(|t| t.label_offset).collect::<Vec<_>>(), vec![0, 2, 4]);
        let ones = s[0].train.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones, 10);
    }

    #[test]
    fn infeasible_config_is_explained() {
        let mut cfg = small(0.0);
        cfg.vocab_size = 30;
        let err = gen_suite(&cfg, 1).unwrap_err();
        assert!(err.to_string().contains("infeasible"), "{err}");
    }

    #[test]
    fn order_round_trip() {
        let s = gen_suite(&small(0.0), 1).unwrap();
        assert_eq!(apply_order(s.clone(), &[1, 2, 3]).unwrap(), s);
        let r = apply_order(s.clone(), &[3, 1, 2]).unwrap();
        assert_eq!(r[0].name, "task3");
        assert_eq!(r[0].label_offset, 0);
        // inverse of [3,1,2] is [2,3,1]
        let back = apply_order(r, &[2, 3, 1]).unwrap();
        assert_eq!(back, s);
        assert!(apply_order(s.clone(), &[1, 2]).is_err());
        assert!(apply_order(s, &[1, 1, 2]).is_err());
    }

    #[test]
    fn jsonl_parsing() {
        let two = "{\"text\":\"a b\",\"label\":\"pos\",\"task\":\"t\",\"split\":\"train\"}\n{\"text\":\"c d\",\"label\":\"neg\",\"task\":\"t\",\"split\":\"train\"}\n";
        let tasks = parse_jsonl(two).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].n_classes(), 2);

        let missing = "{\"text\":\"a\",\"label\":\"x\",\"task\":\"t\",\"split\":\"train\"}\n{\"text\":\"b\",\"task\":\"t\"}\n";
        match parse_jsonl(missing) {
            Err(MoclError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let no_train = "{\"text\":\"a\",\"label\":\"x\",\"task\":\"t\",\"split\":\"test\"}\n";
        assert!(matches!(parse_jsonl(no_train), Err(MoclError::Data(_))));
    }

    #[test]
    fn hashed_splits_are_stable() {
        let corpus: String = (0..50)
            .map(|i| format!("{{\"text\":\"x{i} y\",\"label\":\"l{}\",\"task\":\"t\"}}\n", i % 2))
            .collect();
        assert_eq!(parse_jsonl(&corpus).unwrap(), parse_jsonl(&corpus).unwrap());
    }

    #[test]
    fn export_reloads_same_examples() {
        let s = gen_suite(&small(0.5), 1).unwrap();
        let back = parse_jsonl(&to_jsonl(&s).unwrap()).unwrap();
        assert_eq!(back.len(), s.len());
        for (a, b) in s.iter().zip(&back) {
            assert_eq!(a.train.len(), b.train.len());
            assert_eq!(a.test.len(), b.test.len());
            let names = |t: &TaskSpec, ex: &[Example]| -> Vec<String> {
                ex.iter().map(|e| format!("{}|{}", e.text, t.labels[e.label])).collect()
            };
            assert_eq!(names(a, &a.test), names(b, &b.test));
        }
    }
}
