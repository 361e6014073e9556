use std::fs;

use esmem_core::memory::{MemoryConfig, MemoryError, LOCK_FILE, MANIFEST_FILE, UNITS_FILE};
use esmem_core::prompts::{keys, PromptSet};
use esmem_core::retrieval::{compose_answer, RetrievalError};
use esmem_core::segmentation::{extract_topic_trace, judge_intent, segment_conversation, LabelSet, QuantileScope};
use esmem_core::{
    construct_memory, load_repository, retrieve, save_repository, segment_session, split_at_boundaries, MockProvider,
    RepositoryBuilder, RetrievalParams, SegmentError, SegmentationConfig, Session,
};
use esmem_core::providers::ScriptedReply;
use serde_json::Value;

const TRAVEL: [&str; 4] = [
    "I want to plan a trip to Paris in May.",
    "Flights from Boston are cheapest midweek.",
    "Should I book a hotel near the Louvre?",
    "The Marais area is lively and central.",
];
const COOKING: [&str; 4] = [
    "Anyway, how do I make fresh pasta?",
    "Use tipo 00 flour and eggs.",
    "How long should the dough rest?",
    "About thirty minutes, covered.",
];

fn fixture_session(id: &str) -> Session {
    let turns: Vec<(String, String)> = TRAVEL
        .iter()
        .chain(COOKING.iter())
        .enumerate()
        .map(|(i, t)| (if i % 2 == 0 { "user" } else { "assistant" }.to_string(), t.to_string()))
        .collect();
    Session::from_texts(id, &turns)
}

/// Topic replies for the fixture, keyed by the recurrence.
fn topic_script(script: &mut Vec<(String, ScriptedReply)>) {
    let mut prev = String::new();
    for (i, text) in TRAVEL.iter().chain(COOKING.iter()).enumerate() {
        let topic = if i < 4 { "trip to Paris" } else { "making pasta" };
        let kw = if i < 4 { "paris, travel" } else { "pasta, dough" };
        script.push((keys::topic(&prev, text), format!("Topic: {topic}\nKeywords: {kw}").as_str().into()));
        prev = topic.to_string();
    }
}

fn fixture_mock(id: &str) -> MockProvider {
    let mut script = Vec::new();
    topic_script(&mut script);
    script.push(("intent|*".into(), "DIRECT_RESP 0.9; DETAIL_ELABORATE 0.2".into()));
    script.push((keys::intent(id, 4), "TOPIC_SHIFT 0.9; DIRECT_RESP 0.3".into()));
    script.push((
        keys::boundary(id, 1, 4),
        "Conversation opened with planning a trip to Paris.".into(),
    ));
    script.push((
        keys::boundary(id, 5, 8),
        "Topic trip to Paris ended. Transitioned to making pasta. Context: flour and eggs.".into(),
    ));
    script.push(("answer|*".into(), "tipo 00 flour".into()));
    MockProvider::with_replies(script, 7, 32).unwrap()
}

#[test]
fn eight_turn_fixture_splits_at_four() {
    let session = fixture_session("s1");
    let mock = fixture_mock("s1");
    let out = segment_session(&session, &SegmentationConfig::default(), &mock).unwrap();
    let spans: Vec<(usize, usize)> = out.events.iter().map(|e| (e.start, e.end)).collect();
    assert_eq!(spans, vec![(1, 4), (5, 8)]);
    assert_eq!(out.diagnostics.boundaries, vec![4]);
    assert_eq!(out.diagnostics.mi.len(), 7);
}

#[test]
fn segmentation_is_deterministic() {
    let session = fixture_session("s1");
    let a = segment_session(&session, &SegmentationConfig::default(), &fixture_mock("s1")).unwrap();
    let b = segment_session(&session, &SegmentationConfig::default(), &fixture_mock("s1")).unwrap();
    assert_eq!(a, b);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.diagnostics.mi), bits(&b.diagnostics.mi));
}

#[test]
fn single_turn_session_makes_one_call() {
    let session = Session::from_texts("one", &[("user", "hello there")]);
    let mock = MockProvider::with_replies([(keys::topic("", "hello there"), "Topic: greeting")], 1, 8).unwrap();
    let out = segment_session(&session, &SegmentationConfig::default(), &mock).unwrap();
    assert_eq!(out.events.len(), 1);
    assert_eq!((out.events[0].start, out.events[0].end), (1, 1));
    assert_eq!(mock.chat_calls(), 1);
}

#[test]
fn topic_trace_follows_recurrence_keys() {
    let session = Session::from_texts("r", &[("a", "first"), ("b", "second"), ("a", "third")]);
    let mock = MockProvider::with_replies(
        [
            (keys::topic("", "first"), "Topic: T1"),
            (keys::topic("T1", "second"), "Topic: T2"),
            (keys::topic("T2", "third"), "Topic: T3"),
        ],
        0,
        8,
    )
    .unwrap();
    let trace = extract_topic_trace(&session, &mock, &PromptSet::default()).unwrap();
    assert_eq!(trace.topics(), vec!["T1", "T2", "T3"]);
    let reqs = mock.requests();
    assert!(reqs[1].user_prompt.contains("T1"));
    assert!(reqs[2].user_prompt.contains("T2"));
}

#[test]
fn empty_turn_gets_placeholder_topic() {
    let session = Session::from_texts("e", &[("a", "hi"), ("b", "  "), ("a", "bye")]);
    let mock = MockProvider::with_replies(
        [(keys::topic("", "hi"), "Topic: greet"), (keys::topic("(empty)", "bye"), "Topic: farewell")],
        0,
        8,
    )
    .unwrap();
    let trace = extract_topic_trace(&session, &mock, &PromptSet::default()).unwrap();
    assert_eq!(trace.topics(), vec!["greet", "(empty)", "farewell"]);
    assert_eq!(mock.chat_calls(), 2);
}

#[test]
fn topic_failure_carries_partial_trace() {
    let session = Session::from_texts("f", &[("a", "hi"), ("b", "unscripted")]);
    let mock = MockProvider::with_replies([(keys::topic("", "hi"), "Topic: greet")], 0, 8).unwrap();
    match extract_topic_trace(&session, &mock, &PromptSet::default()) {
        Err(SegmentError::TopicExtraction { turn, completed, partial, .. }) => {
            assert_eq!((turn, completed), (2, 1));
            assert_eq!(partial.topics(), vec!["greet"]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn judge_intent_window_and_reprompt() {
    let session = fixture_session("j");
    let labels = LabelSet::default();
    let mock = MockProvider::with_replies([(keys::intent("j", 1), "TOPIC_SHIFT 0.9; DIRECT_RESP 0.3")], 0, 8).unwrap();
    let j = judge_intent(&session, 1, 2, &labels, &mock, &PromptSet::default()).unwrap();
    assert_eq!(j.len(), 2);
    assert_eq!(j[0].label, "TOPIC_SHIFT");
    let prompt = &mock.requests()[0].user_prompt;
    assert!(prompt.contains(TRAVEL[0]) && prompt.contains(TRAVEL[1]) && prompt.contains(TRAVEL[2]));
    assert!(!prompt.contains(TRAVEL[3]));

    let bad = MockProvider::with_replies([(keys::intent("j", 2), "FOO 0.5")], 0, 8).unwrap();
    assert!(judge_intent(&session, 2, 2, &labels, &bad, &PromptSet::default()).is_err());
    assert_eq!(bad.chat_calls(), 2);

    let mut script = esmem_core::providers::MockScript::new();
    script.insert(
        keys::intent("j", 3),
        ScriptedReply::Sequence(vec!["FOO 0.5".into(), "TOPIC_INTRO 0.7".into()]),
    );
    let fixed = MockProvider::new(script, 0, 8).unwrap();
    let j = judge_intent(&session, 3, 2, &labels, &fixed, &PromptSet::default()).unwrap();
    assert_eq!(j[0].label, "TOPIC_INTRO");
}

#[test]
fn tau_zero_keeps_all_candidates() {
    let session = fixture_session("s1");
    let cfg = SegmentationConfig { tau_c: 0.0, ..Default::default() };
    let out = segment_session(&session, &cfg, &fixture_mock("s1")).unwrap();
    assert_eq!(out.diagnostics.boundaries, out.diagnostics.candidates);
    assert_eq!(out.events.len(), out.diagnostics.candidates.len() + 1);
}

#[test]
fn memory_units_are_verbatim_and_ordered() {
    let session = fixture_session("s1");
    let mock = fixture_mock("s1");
    let out = segment_session(&session, &SegmentationConfig::default(), &mock).unwrap();
    let repo = construct_memory(&out.events, &out.trace, &session, &MemoryConfig::default(), &mock, &PromptSet::default())
        .unwrap();
    assert_eq!(repo.len(), 2);
    let flat: Vec<_> = repo.units.iter().flat_map(|u| u.raw_context.clone()).collect();
    assert_eq!(flat, session.turns);
    assert!(repo.units.iter().all(|u| u.boundary_generated));
    assert!(repo.units[1].refined_boundary.starts_with("Topic trip to Paris ended."));
    assert_eq!(repo.units[0].summary, "Topics: trip to Paris. Keywords: paris, travel.");
    for u in &repo.units {
        assert!((u.e_bnd.norm() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn boundary_failure_falls_back_to_summary() {
    let session = fixture_session("s1");
    let mut script = Vec::new();
    topic_script(&mut script);
    let mock = MockProvider::with_replies(script, 7, 16).unwrap();
    let events = split_at_boundaries(&session, &[4]).unwrap();
    let trace = extract_topic_trace(&session, &mock, &PromptSet::default()).unwrap();
    let repo = construct_memory(&events, &trace, &session, &MemoryConfig::default(), &mock, &PromptSet::default())
        .unwrap();
    assert!(repo.units.iter().all(|u| !u.boundary_generated));
    assert_eq!(repo.units[1].refined_boundary, format!("Transitioned to: {}", repo.units[1].summary));
}

#[test]
fn builder_chains_sessions() {
    let a = fixture_session("a");
    let b = fixture_session("b");
    let mock = MockProvider::with_replies([("topic|*", "Topic: x"), ("boundary|*", "Something changed.")], 1, 16).unwrap();
    let prompts = PromptSet::default();
    let mut builder = RepositoryBuilder::new("conv", Value::Null, MemoryConfig::default(), &mock, &prompts);
    for s in [&a, &b] {
        let trace = extract_topic_trace(s, &mock, &prompts).unwrap();
        builder.add_session(s, &split_at_boundaries(s, &[4]).unwrap(), &trace).unwrap();
    }
    let repo = builder.finish().unwrap();
    assert_eq!(repo.units.iter().map(|u| u.event_index).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    let reqs = mock.requests();
    let first_of_b = reqs.iter().find(|r| r.key == keys::boundary("b", 1, 4)).unwrap();
    assert!(first_of_b.user_prompt.contains(COOKING[3]), "predecessor context crosses sessions");
    let opening = reqs.iter().find(|r| r.key == keys::boundary("a", 1, 4)).unwrap();
    assert!(!opening.user_prompt.contains(COOKING[3]));
}

#[test]
fn conversation_scope_and_concat() {
    let sessions = vec![fixture_session("a"), fixture_session("b")];
    let mock = MockProvider::with_replies(
        [("topic|*", "Topic: same"), ("intent|*", "TOPIC_SHIFT 0.9; DIRECT_RESP 0.3")],
        1,
        16,
    )
    .unwrap();
    let prompts = PromptSet::default();
    let cfg = SegmentationConfig { quantile_scope: QuantileScope::Conversation, ..Default::default() };
    let out = segment_conversation("c", &sessions, &cfg, &mock, &prompts).unwrap();
    assert_eq!(out.len(), 2);
    let cfg = SegmentationConfig { concat_sessions: true, ..Default::default() };
    let out = segment_conversation("c", &sessions, &cfg, &mock, &prompts).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].0.len(), 16);
}

#[test]
fn retrieve_and_answer_on_fixture() {
    let session = fixture_session("s1");
    let mock = fixture_mock("s1");
    let out = segment_session(&session, &SegmentationConfig::default(), &mock).unwrap();
    let prompts = PromptSet::default();
    let repo = construct_memory(&out.events, &out.trace, &session, &MemoryConfig::default(), &mock, &prompts).unwrap();
    let query = repo.units[1].refined_boundary.clone();
    let res = retrieve(&query, &repo, &RetrievalParams::default(), &mock).unwrap();
    assert_eq!(res.anchors[0].event, 2);
    assert!((res.anchors[0].sim_bnd - 1.0).abs() < 1e-6);
    assert_eq!(res.chronological(), vec![1, 2]);
    let again = retrieve(&query, &repo, &RetrievalParams::default(), &mock).unwrap();
    assert_eq!(res, again);

    let before = mock.chat_calls();
    let answer = compose_answer(&query, &res, &mock, &prompts).unwrap();
    assert_eq!(answer, "tipo 00 flour");
    let prompt = &mock.requests()[before].user_prompt;
    let first = prompt.find("[Event 1").unwrap();
    let second = prompt.find("[Event 2").unwrap();
    assert!(first < second);

    let mut empty = res.clone();
    empty.selected.clear();
    let calls = mock.chat_calls();
    assert!(matches!(compose_answer(&query, &empty, &mock, &prompts), Err(RetrievalError::EmptyResult)));
    assert_eq!(mock.chat_calls(), calls);
}

#[test]
fn single_event_repo_always_returned() {
    let session = Session::from_texts("one", &[("user", "hello there")]);
    let mock = MockProvider::with_replies([("topic|*", "Topic: greeting"), ("boundary|*", "Opening.")], 1, 8).unwrap();
    let out = segment_session(&session, &SegmentationConfig::default(), &mock).unwrap();
    let repo = construct_memory(&out.events, &out.trace, &session, &MemoryConfig::default(), &mock, &PromptSet::default())
        .unwrap();
    let params = RetrievalParams { anchor_k: 3, window_w: 0, alpha: 0.2, final_k: 1 };
    assert_eq!(retrieve("anything", &repo, &params, &mock).unwrap().selected, vec![1]);
}

fn saved_fixture() -> (tempfile::TempDir, esmem_core::MemoryRepository) {
    let session = fixture_session("s1");
    let mock = fixture_mock("s1");
    let out = segment_session(&session, &SegmentationConfig::default(), &mock).unwrap();
    let repo = construct_memory(&out.events, &out.trace, &session, &MemoryConfig::default(), &mock, &PromptSet::default())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_repository(&repo, dir.path()).unwrap();
    (dir, repo)
}

#[test]
fn persisted_form_is_byte_identical_across_builds() {
    let (a, _) = saved_fixture();
    let (b, _) = saved_fixture();
    for f in [MANIFEST_FILE, UNITS_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    assert!(!a.path().join(LOCK_FILE).exists());
}

#[test]
fn future_schema_is_rejected() {
    let (dir, _) = saved_fixture();
    let path = dir.path().join(MANIFEST_FILE);
    let raw = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
    fs::write(&path, raw).unwrap();
    assert!(matches!(
        load_repository(dir.path()),
        Err(MemoryError::SchemaMismatch { found: 9, expected: 1 })
    ));
}

#[test]
fn truncated_units_name_last_valid() {
    let (dir, _) = saved_fixture();
    let path = dir.path().join(UNITS_FILE);
    let raw = fs::read_to_string(&path).unwrap();
    let first_line = raw.lines().next().unwrap();
    fs::write(&path, format!("{first_line}\n")).unwrap();
    assert!(matches!(
        load_repository(dir.path()),
        Err(MemoryError::Truncated { expected: 2, found: 1, last_valid: 1 })
    ));
    let cut = &raw[..first_line.len() + 40];
    fs::write(&path, cut).unwrap();
    match load_repository(dir.path()) {
        Err(MemoryError::Corrupt { unit, last_valid, .. }) => assert_eq!((unit, last_valid), (2, 1)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn concurrent_writer_is_locked_out() {
    let (dir, repo) = saved_fixture();
    fs::write(dir.path().join(LOCK_FILE), "other").unwrap();
    assert!(matches!(save_repository(&repo, dir.path()), Err(MemoryError::Locked(_))));
}
