//! Seeded synthetic corpora of (intent, script) cases with recorded
//! ground-truth call sets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvaluationError;
use crate::bank::{BankError, CaseBank, CaseId, NewCase, Provenance};
use crate::script::FunctionCallSet;

const MODULES: &[&str] = &[
    "ospf", "bgp", "isis", "vlan", "lacp", "mpls", "qos", "acl", "stp", "vrrp", "lldp", "ntp",
];
const VERBS: &[&str] = &[
    "configure", "verify", "enable", "disable", "reset", "query", "clear", "set", "get", "check", "create",
    "delete",
];
const NOUNS: &[&str] = &[
    "area", "neighbor", "interface", "route", "timer", "policy", "session", "counter", "prefix", "peer",
    "table", "priority", "metric", "filter", "label", "tunnel",
];
const RELEASES: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
];
const SYNONYMS: &[(&str, &str)] = &[
    ("verify", "validate"),
    ("check", "inspect"),
    ("configure", "provision"),
    ("ensure", "confirm"),
    ("test", "exercise"),
    ("neighbor", "adjacency"),
    ("route", "path"),
    ("enable", "activate"),
    ("disable", "deactivate"),
    ("clear", "flush"),
    ("query", "read"),
    ("scenario", "case"),
];
const FILLERS: &[&str] = &["properly", "again", "carefully", "quickly", "correctly"];

const CONNECT: &str = "testbed.connect";
const RELEASE: &str = "testbed.release";

/// Parameters of a synthetic corpus. Cases form one chronological stream;
/// the last `test_fraction` of it is the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    /// Functions per module and vocabulary generation.
    pub function_vocabulary_size: usize,
    pub cases_per_module: usize,
    pub modules: usize,
    /// Topic clusters per module; cases of a cluster share a core call set.
    pub clusters_per_module: usize,
    /// Size of each cluster's core call set.
    pub calls_per_case: usize,
    /// Stream steps at which every module switches to a fresh vocabulary.
    pub drift_schedule: Vec<usize>,
    /// Probability of synonym substitution per intent word.
    pub paraphrase_noise: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            function_vocabulary_size: 24,
            cases_per_module: 50,
            modules: 4,
            clusters_per_module: 5,
            calls_per_case: 4,
            drift_schedule: Vec::new(),
            paraphrase_noise: 0.2,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), EvaluationError> {
        let fail = |m: String| Err(EvaluationError::InvalidSpec(m));
        if self.modules == 0 || self.modules > MODULES.len() {
            return fail(format!("modules must be in 1..={}", MODULES.len()));
        }
        if self.function_vocabulary_size == 0 || self.function_vocabulary_size > VERBS.len() * NOUNS.len() {
            return fail(format!(
                "function_vocabulary_size must be in 1..={}",
                VERBS.len() * NOUNS.len()
            ));
        }
        if self.calls_per_case == 0 || self.calls_per_case > self.function_vocabulary_size {
            return fail("calls_per_case must be in 1..=function_vocabulary_size".into());
        }
        if self.clusters_per_module == 0 {
            return fail("clusters_per_module must be positive".into());
        }
        if self.drift_schedule.len() >= RELEASES.len() {
            return fail(format!("at most {} drift events", RELEASES.len() - 1));
        }
        if !(0.0..=1.0).contains(&self.paraphrase_noise) || !(0.0..=1.0).contains(&self.test_fraction) {
            return fail("paraphrase_noise and test_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// A corpus of `seed_cases + stream_len` cases whose last `stream_len`
    /// form the request stream. Vocabulary drifts twice inside the stream,
    /// at one third and two thirds of its length, so late requests share
    /// only framework calls with the seed bank.
    pub fn drifting(seed_cases: usize, stream_len: usize, seed: u64) -> Self {
        let modules = 4;
        let total = (seed_cases + stream_len).div_ceil(modules) * modules;
        let seed_cases = total - stream_len;
        Self {
            modules,
            cases_per_module: total / modules,
            drift_schedule: vec![seed_cases + stream_len / 3, seed_cases + 2 * stream_len / 3],
            seed,
            test_fraction: stream_len as f64 / total as f64,
            ..Self::default()
        }
    }

    pub fn total_cases(&self) -> usize {
        self.modules * self.cases_per_module
    }

    /// Vocabulary generation in force at `step`.
    pub fn generation_at(&self, step: usize) -> usize {
        self.drift_schedule.iter().filter(|&&s| s <= step).count()
    }
}

/// A generated case together with its ground truth and provenance in the
/// generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub id: CaseId,
    pub intent: String,
    pub script: String,
    /// Every call name written into the script, recorded as it was emitted.
    pub calls: FunctionCallSet,
    pub module: String,
    pub cluster: usize,
    pub generation: usize,
    pub step: usize,
}

/// A held-out request with its ground-truth script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSample {
    pub id: CaseId,
    pub intent: String,
    pub script: String,
}

impl From<&SyntheticCase> for TestSample {
    fn from(c: &SyntheticCase) -> Self {
        Self {
            id: c.id.clone(),
            intent: c.intent.clone(),
            script: c.script.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: SyntheticCorpusSpec,
    /// Chronological.
    pub cases: Vec<SyntheticCase>,
    /// `cases[..split]` is the bank, `cases[split..]` the test split.
    pub split: usize,
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

impl Corpus {
    pub fn train(&self) -> &[SyntheticCase] {
        &self.cases[..self.split]
    }

    pub fn test(&self) -> &[SyntheticCase] {
        &self.cases[self.split..]
    }

    pub fn test_samples(&self) -> Vec<TestSample> {
        self.test().iter().map(TestSample::from).collect()
    }

    pub fn bank(&self) -> Result<CaseBank, BankError> {
        cases_to_bank(self.train())
    }
}

/// Bank holding `cases` in order, with their ids and deterministic
/// timestamps one minute apart.
pub fn cases_to_bank(cases: &[SyntheticCase]) -> Result<CaseBank, BankError> {
    let mut bank = CaseBank::new();
    for c in cases {
        bank.retain(
            NewCase::new(c.intent.clone(), c.script.clone(), Provenance::Seed)
                .with_id(c.id.clone())
                .created_at(base_time() + Duration::minutes(c.step as i64)),
        )?;
    }
    Ok(bank)
}

fn function_name(module: &str, generation: usize, verb: &str, noun: &str) -> String {
    if generation == 0 {
        format!("{module}.{verb}_{noun}")
    } else {
        format!("{module}_v{}.{verb}_{noun}", generation + 1)
    }
}

struct ModulePlan {
    name: &'static str,
    /// (verb, noun) pairs in the module's vocabulary.
    vocabulary: Vec<(&'static str, &'static str)>,
    /// Indices into `vocabulary` per cluster.
    clusters: Vec<Vec<usize>>,
}

fn plan_modules(spec: &SyntheticCorpusSpec, rng: &mut ChaCha8Rng) -> Vec<ModulePlan> {
    (0..spec.modules)
        .map(|m| {
            let mut pairs: Vec<(&str, &str)> = VERBS
                .iter()
                .flat_map(|v| NOUNS.iter().map(move |n| (*v, *n)))
                .collect();
            pairs.shuffle(rng);
            pairs.truncate(spec.function_vocabulary_size);
            let clusters = (0..spec.clusters_per_module)
                .map(|_| {
                    let mut idx: Vec<usize> = (0..pairs.len()).collect();
                    idx.shuffle(rng);
                    idx.truncate(spec.calls_per_case);
                    idx
                })
                .collect();
            ModulePlan {
                name: MODULES[m],
                vocabulary: pairs,
                clusters,
            }
        })
        .collect()
}

fn paraphrase(text: &str, noise: f64, rng: &mut ChaCha8Rng) -> String {
    let mut words = Vec::new();
    for word in text.split(' ') {
        let swapped = SYNONYMS
            .iter()
            .find(|(w, _)| *w == word)
            .filter(|_| rng.random_bool(noise))
            .map(|(_, s)| *s)
            .unwrap_or(word);
        words.push(swapped.to_string());
        if rng.random_bool(noise / 4.0) {
            words.push(FILLERS.choose(rng).unwrap().to_string());
        }
    }
    words.join(" ")
}

fn intent_text(module: &str, core: &[(&str, &str)], release: &str, rng: &mut ChaCha8Rng) -> String {
    let (v1, n1) = core[0];
    let (v2, n2) = core[core.len().min(2) - 1];
    let body = match rng.random_range(0..4) {
        0 => format!("{v1} {module} {n1} and {v2} the {n2}"),
        1 => format!("test {module} {v1} {n1} then {v2} {n2}"),
        2 => format!("ensure we can {v1} the {n1} and {v2} the {n2} on {module}"),
        _ => format!("{module} {n1} {n2} scenario with {v1} and {v2}"),
    };
    format!("{body} on release {release}")
}

/// Writes python-like lines and records each call name as it is written.
struct ScriptWriter {
    text: String,
    calls: FunctionCallSet,
}

impl ScriptWriter {
    fn line(&mut self, indent: usize, text: &str) {
        self.text.push_str(&"    ".repeat(indent));
        self.text.push_str(text);
        self.text.push('\n');
    }

    fn call_line(&mut self, name: &str, module: &str, rng: &mut ChaCha8Rng) {
        self.calls.insert(name);
        let n = rng.random_range(1..100);
        match rng.random_range(0..6) {
            0 => self.line(1, &format!("{name}(dut)")),
            1 => self.line(1, &format!("result = {name}(dut, timeout={n})")),
            2 => self.line(1, &format!("assert {name}(dut, \"{module}.not_called()\") == {n}")),
            3 => {
                self.line(1, &format!("# {module}.legacy_step(dut) is no longer needed"));
                self.line(1, &format!("{name}(dut)"));
            }
            4 => self.line(1, &format!("value = {name}(dut, {n}.5, retries=3)  # see {module}.docs()")),
            _ => {
                self.line(1, &format!("if {name}(dut, 'x(1)'):"));
                self.line(2, "pass");
            }
        }
    }
}

fn script_text(
    intent: &str,
    module: &str,
    cluster: usize,
    calls: &[String],
    rng: &mut ChaCha8Rng,
) -> (String, FunctionCallSet) {
    let mut w = ScriptWriter {
        text: String::new(),
        calls: FunctionCallSet::new(),
    };
    w.line(0, &format!("\"\"\"{intent}\n\nCalls {module}.placeholder() in older revisions.\n\"\"\""));
    w.line(0, &format!("import {module}"));
    w.line(0, "");
    w.line(0, &format!("def test_{module}_{cluster}(testbed):"));
    let connected = rng.random_bool(0.7);
    if connected {
        w.calls.insert(CONNECT);
        w.line(1, &format!("dut = {CONNECT}(\"dut1\")"));
    } else {
        w.line(1, "dut = testbed.devices['dut1']");
    }
    let mut order: Vec<&String> = calls.iter().collect();
    order.shuffle(rng);
    for name in order {
        w.call_line(name, module, rng);
        if rng.random_bool(0.1) {
            w.call_line(name, module, rng);
        }
    }
    if connected && rng.random_bool(0.5) {
        w.calls.insert(RELEASE);
        w.line(1, &format!("{RELEASE}(dut)"));
    }
    (w.text, w.calls)
}

/// Generate the corpus described by `spec`. Identical specs give identical
/// corpora.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus, EvaluationError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plans = plan_modules(spec, &mut rng);
    let total = spec.total_cases();
    let mut cases = Vec::with_capacity(total);

    for step in 0..total {
        let plan = &plans[step % spec.modules];
        let generation = spec.generation_at(step);
        let cluster = rng.random_range(0..plan.clusters.len());
        let mut members = plan.clusters[cluster].clone();
        // one call swapped for another vocabulary function now and then
        if rng.random_bool(0.3) && plan.vocabulary.len() > members.len() {
            let replacement = loop {
                let r = rng.random_range(0..plan.vocabulary.len());
                if !members.contains(&r) {
                    break r;
                }
            };
            let slot = rng.random_range(0..members.len());
            members[slot] = replacement;
        }
        let core: Vec<(&str, &str)> = plan.clusters[cluster].iter().map(|&i| plan.vocabulary[i]).collect();
        let names: Vec<String> = members
            .iter()
            .map(|&i| {
                let (v, n) = plan.vocabulary[i];
                function_name(plan.name, generation, v, n)
            })
            .collect();

        let intent = intent_text(plan.name, &core, RELEASES[generation], &mut rng);
        let intent = paraphrase(&intent, spec.paraphrase_noise, &mut rng);
        let (script, calls) = script_text(&intent, plan.name, cluster, &names, &mut rng);
        cases.push(SyntheticCase {
            id: CaseId::new(format!("syn-{step:05}")),
            intent,
            script,
            calls,
            module: plan.name.to_string(),
            cluster,
            generation,
            step,
        });
    }

    let test_len = ((total as f64) * spec.test_fraction).round() as usize;
    Ok(Corpus {
        spec: spec.clone(),
        cases,
        split: total - test_len.min(total),
    })
}

/// Parameters of the paraphrase-adversarial corpus: every intent mixes a
/// long style phrase shared across clusters with a short topic phrase that
/// alone determines the calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseCorpusSpec {
    pub clusters: usize,
    pub styles: usize,
    pub style_words: usize,
    pub topic_words: usize,
    pub calls_per_cluster: usize,
    pub seed: u64,
}

impl Default for ParaphraseCorpusSpec {
    fn default() -> Self {
        Self {
            clusters: 8,
            styles: 4,
            style_words: 6,
            topic_words: 2,
            calls_per_cluster: 4,
            seed: 0,
        }
    }
}

/// One case per (cluster, style). Calls of different clusters are disjoint,
/// so the style-nearest neighbour scores FF1 0 while any same-cluster
/// neighbour scores 1.
pub fn generate_paraphrase_corpus(spec: &ParaphraseCorpusSpec) -> Vec<SyntheticCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let word = |prefix: &str, i: usize, j: usize| format!("{prefix}{i}w{j}");
    let mut cases = Vec::with_capacity(spec.clusters * spec.styles);
    let mut order: Vec<(usize, usize)> = (0..spec.clusters)
        .flat_map(|c| (0..spec.styles).map(move |s| (c, s)))
        .collect();
    order.shuffle(&mut rng);
    for (step, (c, s)) in order.into_iter().enumerate() {
        let mut words: Vec<String> = (0..spec.style_words).map(|j| word("style", s, j)).collect();
        words.extend((0..spec.topic_words).map(|j| word("topic", c, j)));
        words.shuffle(&mut rng);
        let intent = words.join(" ");
        let names: Vec<String> = (0..spec.calls_per_cluster)
            .map(|k| format!("unit{c}.step_{k}"))
            .collect();
        let mut script = String::new();
        for name in &names {
            script.push_str(&format!("{name}(dut)\n"));
        }
        cases.push(SyntheticCase {
            id: CaseId::new(format!("para-{step:04}")),
            intent,
            script,
            calls: names.iter().map(String::as_str).collect(),
            module: format!("unit{c}"),
            cluster: c,
            generation: 0,
            step,
        });
    }
    cases
}

pub fn write_test_samples(path: impl AsRef<Path>, samples: &[TestSample]) -> Result<(), EvaluationError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_test_samples(path: impl AsRef<Path>) -> Result<Vec<TestSample>, EvaluationError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line).map_err(|e| EvaluationError::MalformedSplit {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(samples)
}
