//! Planted-cluster corpus generator.
//!
//! Each topic owns a pool of concepts; every concept has a few surface
//! variants (paraphrases). A duplicate cluster draws a handful of concepts
//! from its topic and every member restates them with randomly chosen
//! variants, buried among topic words, boilerplate, stopwords, punctuation
//! and non-ASCII noise. Independents mix concepts without forming clusters.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_stopword, BugReport, Corpus};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clusters: usize,
    /// Mean cluster size, at least 2. Sizes are `2 + Geometric`.
    pub mean_size: f64,
    pub independents: usize,
    pub topics: usize,
    /// In `[0, 1]`: share of dropped signature concepts and injected stray words.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 50,
            mean_size: 3.0,
            independents: 50,
            topics: 2,
            noise: 0.3,
            seed: 0,
        }
    }
}

const SIGNATURE: usize = 4;
const VARIANTS: usize = 3;
const MAX_SIZE: usize = 50;

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "sa", "du", "fe", "gi", "ho", "ju", "ke", "la",
    "mo", "nu", "po", "ri", "se", "tu", "wa",
];

const BOILERPLATE: [&str; 16] = [
    "crash", "error", "fails", "window", "click", "open", "file", "exception", "null", "broken",
    "update", "button", "shows", "wrong", "after", "editor",
];

const FILLER: [&str; 10] = ["the", "when", "is", "a", "it", "to", "on", "with", "this", "of"];

const FOREIGN: [&str; 4] = ["同步", "über", "ошибка", "café"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mean_size.is_nan() || self.mean_size < 2.0 {
            return Err(Error::Config(format!("mean size must be >= 2, got {}", self.mean_size)));
        }
        if self.topics == 0 {
            return Err(Error::Config("need at least one topic".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must be in [0, 1], got {}", self.noise)));
        }
        if self.clusters + self.independents == 0 {
            return Err(Error::Config("corpus would be empty".into()));
        }
        Ok(())
    }
}

struct Vocabulary {
    /// `concepts[topic][concept][variant]`
    concepts: Vec<Vec<Vec<String>>>,
    topic_words: Vec<Vec<String>>,
}

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=4);
        let word: String = (0..syllables).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if !is_stopword(&word) && !BOILERPLATE.contains(&word.as_str()) && used.insert(word.clone()) {
            return word;
        }
    }
}

fn vocabulary(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vocabulary {
    let mut used = BTreeSet::new();
    let per_topic = config.clusters.div_ceil(config.topics);
    let concepts_per_topic = 40 + 2 * per_topic;
    let concepts = (0..config.topics)
        .map(|_| {
            (0..concepts_per_topic)
                .map(|_| (0..VARIANTS).map(|_| fresh_word(rng, &mut used)).collect())
                .collect()
        })
        .collect();
    let topic_words = (0..config.topics)
        .map(|_| (0..30).map(|_| fresh_word(rng, &mut used)).collect())
        .collect();
    Vocabulary { concepts, topic_words }
}

fn decorate(word: &str, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..20) {
        0 => format!("{word}!!!"),
        1 => format!("{word},"),
        2 => format!("{word}."),
        3 => word.to_uppercase(),
        _ => word.to_string(),
    }
}

fn compose(signature: &[&[String]], topic: &[String], vocab: &Vocabulary, noise: f64, rng: &mut ChaCha8Rng) -> (String, String) {
    let mut core = Vec::with_capacity(signature.len());
    for variants in signature {
        if !rng.random_bool(noise * 0.5) {
            core.push(variants.choose(rng).unwrap().clone());
        }
    }
    if core.len() < 2 {
        core = signature[..2].iter().map(|v| v.choose(rng).unwrap().clone()).collect();
    }
    let mut words: Vec<String> = core.clone();
    let n_topic = rng.random_range(3..=6);
    words.extend(topic.choose_multiple(rng, n_topic).cloned());
    let n_boiler = rng.random_range(2..=4);
    words.extend(BOILERPLATE.choose_multiple(rng, n_boiler).map(|s| s.to_string()));
    let strays = (noise * 8.0).round() as usize;
    for _ in 0..strays {
        let t = rng.random_range(0..vocab.concepts.len());
        let c = vocab.concepts[t].choose(rng).unwrap();
        words.push(c.choose(rng).unwrap().clone());
    }
    words.shuffle(rng);
    let split = rng.random_range(2..=4).min(words.len());
    let mut title: Vec<String> = vec![core[0].clone()];
    title.extend(words.drain(..split).filter(|w| *w != core[0]));
    let mut description = Vec::with_capacity(words.len() * 2);
    for w in words {
        if rng.random_bool(0.4) {
            description.push(FILLER.choose(rng).unwrap().to_string());
        }
        description.push(decorate(&w, rng));
    }
    if rng.random_bool(0.2) {
        description.push(FOREIGN.choose(rng).unwrap().to_string());
    }
    let title = title.iter().map(|w| decorate(w, rng)).collect::<Vec<_>>().join(" ");
    (title, description.join(" "))
}

/// Generates a corpus with planted duplicate clusters. The result is a
/// pure function of the config.
pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = rng::substream(config.seed, rng::SYNTH);
    let vocab = vocabulary(config, &mut rng);

    let p_more = (config.mean_size - 2.0) / (config.mean_size - 1.0);
    let sizes: Vec<usize> = (0..config.clusters)
        .map(|_| {
            let mut size = 2;
            while size < MAX_SIZE && rng.random_bool(p_more) {
                size += 1;
            }
            size
        })
        .collect();
    let total = sizes.iter().sum::<usize>() + config.independents;
    let width = total.to_string().len().max(5);
    let mut numbers: Vec<usize> = (0..total).collect();
    numbers.shuffle(&mut rng);
    let mut ids = numbers.into_iter().map(|n| format!("BUG-{n:0width$}"));

    let mut reports = Vec::with_capacity(total);
    for (c, &size) in sizes.iter().enumerate() {
        let topic = c % config.topics;
        let pool = &vocab.concepts[topic];
        let signature: Vec<&[String]> = pool
            .choose_multiple(&mut rng, SIGNATURE)
            .map(Vec::as_slice)
            .collect();
        let members: Vec<String> = ids.by_ref().take(size).collect();
        for (i, id) in members.iter().enumerate() {
            let (title, description) =
                compose(&signature, &vocab.topic_words[topic], &vocab, config.noise, &mut rng);
            let dup_of = (i > 0).then(|| members[rng.random_range(0..i)].clone());
            reports.push(BugReport::new(id.clone(), title, description, dup_of));
        }
    }
    for i in 0..config.independents {
        let topic = i % config.topics;
        let signature: Vec<&[String]> = vocab.concepts[topic]
            .choose_multiple(&mut rng, SIGNATURE - 1)
            .map(Vec::as_slice)
            .collect();
        let (title, description) =
            compose(&signature, &vocab.topic_words[topic], &vocab, config.noise, &mut rng);
        reports.push(BugReport::new(ids.next().expect("id per bug"), title, description, None));
    }
    reports.sort_by(|a, b| a.bug_id.cmp(&b.bug_id));
    Corpus::from_reports(reports)
}

pub fn write(config: &SynthConfig, path: &Path) -> Result<Corpus> {
    let corpus = generate(config)?;
    corpus.write_jsonl(path)?;
    Ok(corpus)
}
