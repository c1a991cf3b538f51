use std::collections::BTreeSet;

use cbr_core::bank::{CaseBank, CaseId, NewCase, Provenance};
use cbr_core::evaluation::{
    evaluate_offline, generate_corpus, simulate_online, Aggregates, OnlineConfig, SyntheticCorpusSpec, TestSample,
};
use cbr_core::retrieval::Embedder;
use cbr_core::reuse::{CopyTopCase, GenerationRequest, Generator, NoisyCopy, OracleGenerator, ReuseEngine, ReuseError};
use cbr_core::{extract_functions, ScriptSource};

fn engine(g: impl Generator + 'static) -> ReuseEngine {
    ReuseEngine::new(Box::new(g))
}

fn small_corpus(seed: u64) -> cbr_core::evaluation::Corpus {
    generate_corpus(&SyntheticCorpusSpec {
        cases_per_module: 25,
        seed,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap()
}

#[test]
fn oracle_scores_perfectly() {
    let corpus = small_corpus(1);
    let report = evaluate_offline(
        &corpus.bank().unwrap(),
        &corpus.test_samples(),
        &engine(OracleGenerator),
        &Embedder::stub(32, 0),
        3,
    )
    .unwrap();
    let agg = report.aggregates.unwrap();
    assert_eq!(agg.scored_samples, corpus.test().len());
    assert_eq!(agg.function_f1, 1.0);
    assert_eq!(agg.code_similarity, 1.0);
    assert_eq!(report.failures, 0);
    assert!(report.samples.iter().all(|s| s.retrieved_ids.len() == 3));
}

fn calls_script(calls: &[String]) -> String {
    calls.iter().map(|c| format!("{c}(dut)\n")).collect()
}

/// Each test intent repeats one bank intent verbatim, so that case is the
/// top-1. Its script shares `shared` calls with the reference; the rest of
/// both sides are disjoint.
#[test]
fn copy_top_matches_per_case_closed_form() {
    let shapes: [(usize, usize, usize); 6] = [(2, 2, 2), (4, 2, 2), (2, 0, 1), (3, 3, 0), (6, 1, 2), (1, 1, 4)];
    let mut bank = CaseBank::new();
    let mut test = Vec::new();
    let mut expected = Vec::new();
    let topics = ["ospf", "bgp", "vlan", "lacp", "stp", "vrrp"];
    for (i, &(shared, only_top, only_ref)) in shapes.iter().enumerate() {
        let name = |tag: &str, j: usize| format!("{}.{tag}_{j}", topics[i]);
        let common: Vec<String> = (0..shared).map(|j| name("common", j)).collect();
        let top: Vec<String> = common.iter().cloned().chain((0..only_top).map(|j| name("top", j))).collect();
        let reference: Vec<String> = common.iter().cloned().chain((0..only_ref).map(|j| name("ref", j))).collect();
        let intent = format!("verify {} convergence after restart {i}", topics[i]);
        bank.retain(NewCase::new(intent.clone(), calls_script(&top), Provenance::Seed).with_id(format!("bank-{i}")))
            .unwrap();
        test.push(TestSample {
            id: CaseId::new(format!("q-{i}")),
            intent,
            script: calls_script(&reference),
        });
        expected.push(2.0 * shared as f64 / (top.len() + reference.len()) as f64);
    }
    let report = evaluate_offline(&bank, &test, &engine(CopyTopCase), &Embedder::stub(64, 5), 3).unwrap();
    for (i, sample) in report.samples.iter().enumerate() {
        assert_eq!(sample.retrieved_ids[0].as_str(), format!("bank-{i}"));
        assert_eq!(sample.score.unwrap().function_f1, expected[i], "case {i}");
    }
    let mean = expected.iter().sum::<f64>() / expected.len() as f64;
    assert!((report.aggregates.unwrap().function_f1 - mean).abs() < 1e-15);
}

#[test]
fn aggregates_recompute_from_samples() {
    let corpus = small_corpus(2);
    let report = evaluate_offline(
        &corpus.bank().unwrap(),
        &corpus.test_samples(),
        &engine(NoisyCopy::new(0.7, 0.3, 4)),
        &Embedder::stub(32, 0),
        3,
    )
    .unwrap();
    let scores: Vec<_> = report.samples.iter().map(|s| s.score.unwrap()).collect();
    let n = scores.len() as f64;
    let agg = report.aggregates.unwrap();
    assert_eq!(agg.function_f1, scores.iter().map(|s| s.function_f1).sum::<f64>() / n);
    assert_eq!(agg.function_precision, scores.iter().map(|s| s.function_precision).sum::<f64>() / n);
    assert_eq!(agg.function_recall, scores.iter().map(|s| s.function_recall).sum::<f64>() / n);
    assert_eq!(agg.code_similarity, scores.iter().map(|s| s.code_similarity).sum::<f64>() / n);
    assert_eq!(Aggregates::from_samples(&report.samples), Some(agg));
}

#[test]
fn empty_split_leaves_aggregates_undefined() {
    let corpus = small_corpus(3);
    let report = evaluate_offline(&corpus.bank().unwrap(), &[], &engine(CopyTopCase), &Embedder::stub(16, 0), 3).unwrap();
    assert!(report.samples.is_empty());
    assert!(report.aggregates_undefined);
    assert!(report.aggregates.is_none());
    assert!(report.repetitive_generation_rate.is_none());
}

struct FailsOnOdd;

impl Generator for FailsOnOdd {
    fn id(&self) -> &str {
        "fails-on-odd"
    }

    fn complete(&self, request: &GenerationRequest, _prompt: &str) -> Result<String, ReuseError> {
        if request.intent.len() % 2 == 1 {
            Err(ReuseError::LlmServiceUnavailable("connection refused".into()))
        } else {
            Ok(request.reference.clone().unwrap_or_default())
        }
    }
}

#[test]
fn backend_failures_are_recorded_per_sample() {
    let corpus = small_corpus(4);
    let test = corpus.test_samples();
    let report = evaluate_offline(&corpus.bank().unwrap(), &test, &engine(FailsOnOdd), &Embedder::stub(16, 0), 3).unwrap();
    let odd = test.iter().filter(|t| t.intent.len() % 2 == 1).count();
    assert!(odd > 0 && odd < test.len());
    assert_eq!(report.failures, odd);
    assert_eq!(report.samples.len(), test.len());
    assert_eq!(report.aggregates.unwrap().scored_samples, test.len() - odd);
    for (sample, t) in report.samples.iter().zip(&test) {
        assert_eq!(sample.query_id, t.id);
        assert_eq!(sample.error.is_some(), t.intent.len() % 2 == 1);
    }
}

#[test]
fn same_seeds_give_identical_reports_and_corpora() {
    let run = || {
        let corpus = small_corpus(9);
        let report = evaluate_offline(
            &corpus.bank().unwrap(),
            &corpus.test_samples(),
            &engine(NoisyCopy::new(0.5, 0.5, 21)),
            &Embedder::stub(32, 2),
            3,
        )
        .unwrap();
        (serde_json::to_string(&corpus).unwrap(), serde_json::to_string(&report).unwrap())
    };
    assert_eq!(run(), run());
    assert_ne!(
        serde_json::to_string(&small_corpus(9)).unwrap(),
        serde_json::to_string(&small_corpus(10)).unwrap()
    );
}

#[test]
fn one_module_two_cases() {
    let corpus = generate_corpus(&SyntheticCorpusSpec {
        modules: 1,
        cases_per_module: 2,
        test_fraction: 0.0,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap();
    assert_eq!(corpus.bank().unwrap().len(), 2);
    for case in &corpus.cases {
        assert!(!case.calls.is_empty());
        assert_eq!(extract_functions(&ScriptSource::new(case.script.as_str())), case.calls);
    }
}

#[test]
fn no_drifted_vocabulary_before_its_step() {
    let spec = SyntheticCorpusSpec {
        drift_schedule: vec![100],
        cases_per_module: 60,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let drifted: BTreeSet<String> = corpus
        .cases
        .iter()
        .filter(|c| c.step >= 100)
        .flat_map(|c| c.calls.iter().filter(|n| n.contains("_v2.")).map(str::to_owned))
        .collect();
    assert!(!drifted.is_empty());
    for case in corpus.cases.iter().filter(|c| c.step < 100) {
        let found = extract_functions(&ScriptSource::new(case.script.as_str()));
        assert!(found.iter().all(|n| !drifted.contains(n)), "step {} uses drifted calls", case.step);
    }
}

fn drift_stream(stream_len: usize) -> (CaseBank, Vec<TestSample>) {
    let corpus = generate_corpus(&SyntheticCorpusSpec::drifting(200, stream_len, 0)).unwrap();
    assert_eq!(corpus.test().len(), stream_len);
    (corpus.bank().unwrap(), corpus.test_samples())
}

#[test]
fn retain_lifts_cumulative_ff1_on_drifting_stream() {
    let (bank, stream) = drift_stream(1000);
    let embedder = Embedder::stub(64, 0);
    let copy = engine(CopyTopCase);

    let mut with_bank = bank.snapshot_bank();
    let with = simulate_online(&mut with_bank, &stream, &copy, &embedder, &OnlineConfig::default()).unwrap();
    let mut without_bank = bank.snapshot_bank();
    let config = OnlineConfig {
        retain: false,
        ..OnlineConfig::default()
    };
    let without = simulate_online(&mut without_bank, &stream, &copy, &embedder, &config).unwrap();

    let gap = with.final_cumulative_ff1().unwrap() - without.final_cumulative_ff1().unwrap();
    assert!(gap >= 0.10, "gap {gap}");
    assert_eq!(with.points.len(), 1000);
    assert_eq!(with_bank.len(), bank.len() + 1000);
    assert_eq!(without_bank.revision(), bank.revision());
    assert_eq!(without.retained, 0);
}

trait CloneBank {
    fn snapshot_bank(&self) -> CaseBank;
}

impl CloneBank for CaseBank {
    fn snapshot_bank(&self) -> CaseBank {
        let mut copy = CaseBank::new();
        for case in self.cases() {
            copy.retain(
                NewCase::new(case.intent.clone(), case.script.clone(), case.source)
                    .with_id(case.id.clone())
                    .created_at(case.created_at),
            )
            .unwrap();
        }
        copy
    }
}

#[test]
fn oracle_with_retain_is_flat_at_one() {
    let (mut bank, stream) = drift_stream(60);
    let series = simulate_online(
        &mut bank,
        &stream,
        &engine(OracleGenerator),
        &Embedder::stub(32, 0),
        &OnlineConfig::default(),
    )
    .unwrap();
    assert!(series.points.iter().all(|p| p.cumulative_ff1 == 1.0 && p.ff1 == 1.0));
    assert_eq!(series.revised, 0);
    assert_eq!(series.retained, 60);
}

#[test]
fn single_request_gives_single_point() {
    let (mut bank, stream) = drift_stream(12);
    let series = simulate_online(
        &mut bank,
        &stream[..1],
        &engine(CopyTopCase),
        &Embedder::stub(32, 0),
        &OnlineConfig::default(),
    )
    .unwrap();
    assert_eq!(series.points.len(), 1);
    assert_eq!(series.points[0].cumulative_ff1, series.points[0].ff1);
    assert_eq!(series.points[0].step, 1);
}

#[test]
fn retained_cases_become_retrievable() {
    let mut bank = CaseBank::new();
    bank.retain_case("unrelated seed", "seed.only()", None).unwrap();
    let stream = vec![
        TestSample {
            id: CaseId::new("r1"),
            intent: "configure isis level two".into(),
            script: "isis.configure(dut)\nisis.check(dut)\n".into(),
        },
        TestSample {
            id: CaseId::new("r2"),
            intent: "configure isis level two".into(),
            script: "isis.configure(dut)\nisis.check(dut)\n".into(),
        },
    ];
    let series = simulate_online(
        &mut bank,
        &stream,
        &engine(CopyTopCase),
        &Embedder::stub(32, 0),
        &OnlineConfig { m: 1, ..OnlineConfig::default() },
    )
    .unwrap();
    assert_eq!(series.points[0].ff1, 0.0);
    assert_eq!(series.points[1].ff1, 1.0);
    assert_eq!(series.points[1].cumulative_ff1, 0.5);
    assert_eq!(series.revised, 1);
    let sources: Vec<Provenance> = bank.cases().map(|c| c.source).collect();
    assert_eq!(sources, [Provenance::Retained, Provenance::Revised, Provenance::Retained]);
}
