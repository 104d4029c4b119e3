use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use promptsearch_core::backend::http::HttpBackend;
use promptsearch_core::backend::mock::{GenerateMode, MockAnswer, MockBackend, MockSpec, ScoreMode};
use promptsearch_core::backend::server::{FaultKind, FaultRule, MockServer};
use promptsearch_core::backend::{
    BackendError, EmbedBackend, EmbedRequest, GenerateBackend, GenerateRequest, RetryPolicy, Role, ScoreBackend,
    ScoreRequest, TranslateBackend, TranslateRequest,
};
use promptsearch_core::prompt::PromptTemplate;
use promptsearch_core::registry::{Gold, LabeledExample, MetricKind, Split, TaskFormat, TaskSpec, TaskType};
use promptsearch_core::scoring::{LmClient, ScoringContext};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff_ms: 1,
    }
}

fn client(server: &MockServer, role: Role) -> HttpBackend {
    HttpBackend::new(server.endpoint(role), fast_retry()).unwrap()
}

fn oracle_spec(answers: &[(&str, &str)]) -> MockSpec {
    MockSpec {
        score: ScoreMode::Oracle,
        generate: GenerateMode::Oracle,
        answers: answers
            .iter()
            .map(|(needle, gold)| MockAnswer {
                needle: needle.to_string(),
                gold: Some(gold.to_string()),
                scores: BTreeMap::new(),
            })
            .collect(),
        ..Default::default()
    }
}

#[test]
fn all_four_roles_round_trip() {
    let server = MockServer::start(Arc::new(MockBackend::new(oracle_spec(&[("天气", "是")]))), vec![]).unwrap();

    let req = ScoreRequest {
        prompt_text: "天气好吗？[MASK]".into(),
        mask_offset: 5,
        choices: vec!["是".into(), "不是".into()],
        soft_slot_len: 0,
    };
    let r = client(&server, Role::Score).score(&req).unwrap();
    r.validate(&req).unwrap();
    assert_eq!(r.choices[0].choice, "是");
    assert_eq!(r.choices[0].log_likelihood, 0.0);
    assert_eq!(r.choices[1].log_likelihood, -10.0);

    let g = client(&server, Role::Generate)
        .generate(&GenerateRequest::greedy("说说天气", 8))
        .unwrap();
    assert_eq!(g.completion_text, "是");
    assert_eq!(g.token_logprobs.len(), 1);

    let t = client(&server, Role::Translate)
        .translate(&TranslateRequest {
            text: "你好".into(),
            source: "zh".into(),
            target: "en".into(),
        })
        .unwrap();
    assert_eq!(t.text, "你好");

    let ereq = EmbedRequest {
        texts: vec!["甲".into(), "乙丙".into(), "".into()],
    };
    let e = client(&server, Role::Embed).embed(&ereq).unwrap();
    e.validate(&ereq).unwrap();
    assert_eq!(e.vectors.len(), 3);

    for role in [Role::Score, Role::Generate, Role::Translate, Role::Embed] {
        assert_eq!(server.requests(role.path()), 1, "{role:?}");
    }
}

#[test]
fn client_refuses_other_roles() {
    let server = MockServer::start(Arc::new(MockBackend::default()), vec![]).unwrap();
    let err = client(&server, Role::Embed)
        .generate(&GenerateRequest::greedy("x", 1))
        .unwrap_err();
    assert!(matches!(err, BackendError::WrongRole { .. }), "{err:?}");
    assert_eq!(server.requests(Role::Generate.path()), 0);
}

#[test]
fn timeouts_retry_three_times_then_fail() {
    let faults = vec![FaultRule {
        path: Some(Role::Embed.path().into()),
        needle: None,
        fail_times: 10,
        kind: FaultKind::Delay { ms: 400 },
    }];
    let server = MockServer::start(Arc::new(MockBackend::default()), faults).unwrap();
    let mut ep = server.endpoint(Role::Embed);
    ep.timeout_ms = 50;
    let c = HttpBackend::new(ep, fast_retry()).unwrap();
    let started = Instant::now();
    let err = c
        .embed(&EmbedRequest {
            texts: vec!["a".into()],
        })
        .unwrap_err();
    match err {
        BackendError::Exhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert_eq!(*last, BackendError::Timeout);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.requests(Role::Embed.path()), 3);
    assert!(started.elapsed().as_millis() < 5_000);
}

#[test]
fn transient_faults_recover_within_budget() {
    let faults = vec![FaultRule {
        path: Some(Role::Score.path().into()),
        needle: None,
        fail_times: 2,
        kind: FaultKind::Status { code: 503 },
    }];
    let server = MockServer::start(Arc::new(MockBackend::default()), faults).unwrap();
    let req = ScoreRequest {
        prompt_text: "x[MASK]".into(),
        mask_offset: 1,
        choices: vec!["a".into()],
        soft_slot_len: 0,
    };
    client(&server, Role::Score).score(&req).unwrap();
    assert_eq!(server.requests(Role::Score.path()), 3);
    assert_eq!(server.injected_faults(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let faults = vec![FaultRule {
        path: None,
        needle: None,
        fail_times: 5,
        kind: FaultKind::Status { code: 400 },
    }];
    let server = MockServer::start(Arc::new(MockBackend::default()), faults).unwrap();
    let err = client(&server, Role::Translate)
        .translate(&TranslateRequest {
            text: "x".into(),
            source: "zh".into(),
            target: "en".into(),
        })
        .unwrap_err();
    assert!(matches!(err, BackendError::Http { status: 400, .. }), "{err:?}");
    assert_eq!(server.requests(Role::Translate.path()), 1);
}

fn task() -> TaskSpec {
    TaskSpec {
        task_id: "yn".into(),
        task_type: TaskType::Senti,
        split: Split::Test,
        format: TaskFormat::Classification,
        label_set: vec!["不是".into(), "是".into()],
        metric: MetricKind::MicroF1,
        arity: 1,
        data_path: "unused.jsonl".into(),
        positive_label: None,
    }
}

#[test]
fn faults_never_duplicate_metric_contributions() {
    let dev: Vec<LabeledExample> = (0..12)
        .map(|i| LabeledExample {
            id: format!("e{i:02}"),
            segments: vec![format!("句子{i:02}")],
            gold: Gold::Label(if i % 3 == 0 { "是" } else { "不是" }.into()),
        })
        .collect();
    let answers: Vec<(String, String)> = dev
        .iter()
        .map(|e| (e.segments[0].clone(), e.gold_label().unwrap().to_string()))
        .collect();
    let answers: Vec<(&str, &str)> = answers.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let faults = vec![
        FaultRule {
            path: Some(Role::Score.path().into()),
            needle: Some("句子0".into()),
            fail_times: 2,
            kind: FaultKind::Delay { ms: 300 },
        },
        FaultRule {
            path: Some(Role::Score.path().into()),
            needle: Some("句子1".into()),
            fail_times: 1,
            kind: FaultKind::Status { code: 503 },
        },
    ];
    let server = MockServer::start(Arc::new(MockBackend::new(oracle_spec(&answers))), faults).unwrap();
    let mut ep = server.endpoint(Role::Score);
    ep.timeout_ms = 100;
    let http = Arc::new(HttpBackend::new(ep, fast_retry()).unwrap());
    let ctx = ScoringContext::new(task(), LmClient::Score(http)).unwrap();
    let template = PromptTemplate::new("[X]？[MASK]", 1).unwrap();

    let ev = ctx.evaluate(&template, &dev).unwrap();
    assert_eq!(ev.score, 1.0);
    assert_eq!(ev.predictions.len(), dev.len());
    let ids: BTreeSet<&str> = ev.predictions.iter().map(|p| p.example_id.as_str()).collect();
    assert_eq!(ids.len(), dev.len());
    // 10 bodies match "句子0" and fail twice; 2 match "句子1" and fail once.
    assert_eq!(server.injected_faults(), 10 * 2 + 2);
    assert_eq!(server.requests(Role::Score.path()), dev.len() + 22);
}

#[test]
fn in_flight_requests_stay_bounded() {
    let faults = vec![FaultRule {
        path: None,
        needle: None,
        fail_times: 1,
        kind: FaultKind::Delay { ms: 40 },
    }];
    let server = MockServer::start(Arc::new(MockBackend::default()), faults).unwrap();
    let mut ep = server.endpoint(Role::Translate);
    ep.max_in_flight = 3;
    let c = HttpBackend::new(ep, fast_retry()).unwrap();
    std::thread::scope(|s| {
        for i in 0..16 {
            let c = &c;
            s.spawn(move || {
                c.translate(&TranslateRequest {
                    text: format!("t{i}"),
                    source: "zh".into(),
                    target: "en".into(),
                })
                .unwrap();
            });
        }
    });
    assert!(c.peak_in_flight() <= 3);
    assert!(c.peak_in_flight() >= 2);
    assert_eq!(server.requests(Role::Translate.path()), 16);
}
