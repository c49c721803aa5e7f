use std::sync::Arc;
use std::thread;
use std::time::Duration;

use deepsearch_core::corpus::WhitespaceTokenizer;
use deepsearch_core::ledger::Ledger;
use deepsearch_core::llm::{chat, CallContext, ChatEndpoint, ChatMessage, ChatRequest, HttpChatEndpoint, LlmError, MockScript, MockServer, MockServerOptions, RetryPolicy, Stage};
use deepsearch_core::retrieval::{EmbeddingEndpoint, HttpEmbeddingEndpoint};
use serde_json::{json, Value};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(5),
    }
}

fn script() -> MockScript {
    MockScript::parse(concat!(
        r#"{"match":"weather","reply":{"tool_calls":[{"arguments":{"query":"rain"}}]},"usage":{"input":120,"cached":100,"output":30,"reasoning":20}}"#,
        "\n",
        r#"{"reply":{"content":"Exact Answer: dry"},"usage":{"input":200,"cached":120,"output":15,"reasoning":5}}"#,
        "\n"
    ))
    .unwrap()
}

fn client(url: &str) -> HttpChatEndpoint {
    HttpChatEndpoint::new(url, Some("k".into()), Arc::new(WhitespaceTokenizer)).with_retry(fast_retry())
}

#[test]
fn tool_calls_and_usage_round_trip_over_http() {
    let server = MockServer::start(script(), MockServerOptions::default()).unwrap();
    let endpoint = client(server.url());
    let ledger = Ledger::new();
    let ctx = CallContext { qid: "q1", stage: Stage::Search };

    let req = ChatRequest::new("m", vec![ChatMessage::user("what is the weather")], 64);
    let out = chat(&endpoint, &req, ctx, &ledger).unwrap();
    assert_eq!(out.message.tool_calls.len(), 1);
    assert_eq!(out.message.tool_calls[0].name, "search");
    assert_eq!(out.message.tool_calls[0].id, "call_0_0");
    let args: Value = serde_json::from_str(&out.message.tool_calls[0].arguments).unwrap();
    assert_eq!(args, json!({"query": "rain"}));
    assert_eq!((out.record.input_total, out.record.input_cached, out.record.output_total, out.record.output_reasoning), (120, 100, 30, 20));
    assert!(!out.record.estimated);

    let mut history = req.messages.clone();
    history.push(out.message.clone());
    history.push(ChatMessage::tool("call_0_0", "[]"));
    let out = chat(&endpoint, &ChatRequest::new("m", history, 64), ctx, &ledger).unwrap();
    assert_eq!(out.message.content, "Exact Answer: dry");
    assert_eq!(out.record.call_seq, 1);
    assert_eq!(ledger.len(), 2);

    let err = chat(&endpoint, &req, ctx, &ledger).unwrap_err();
    assert!(matches!(err, LlmError::Http { status: 410, .. }), "{err}");
    assert_eq!(ledger.len(), 2);
}

#[test]
fn two_server_errors_then_success_reports_two_retries() {
    let server = MockServer::start(script(), MockServerOptions { fail_first: 2 }).unwrap();
    let endpoint = client(server.url());
    let req = ChatRequest::new("m", vec![ChatMessage::user("hello")], 64);
    let done = endpoint.complete(&req).unwrap();
    assert_eq!(done.retries, 2);
    assert_eq!(server.requests(), 3);
    assert_eq!(server.served(), 1);
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let server = MockServer::start(script(), MockServerOptions { fail_first: 10 }).unwrap();
    let endpoint = client(server.url());
    let req = ChatRequest::new("m", vec![ChatMessage::user("hello")], 64);
    assert!(endpoint.complete(&req).is_err());
    assert_eq!(server.requests(), 3);
}

#[test]
fn connection_refused_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let err = client(&url).complete(&ChatRequest::new("m", vec![ChatMessage::user("x")], 8)).unwrap_err();
    assert!(matches!(err, LlmError::Transport { attempts: 3, .. }), "{err}");
}

/// Serves `responses` in order and hands back each request body.
fn canned_server(responses: Vec<Value>) -> (String, thread::JoinHandle<Vec<Value>>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", server.server_addr().to_ip().unwrap());
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for body in responses {
            let mut req = server.recv().unwrap();
            let mut raw = String::new();
            req.as_reader().read_to_string(&mut raw).unwrap();
            bodies.push(serde_json::from_str(&raw).unwrap());
            req.respond(tiny_http::Response::from_string(body.to_string())).unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn missing_usage_details_are_zero_filled_and_flagged() {
    let reply = json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": "ok"}}],
        "usage": {"prompt_tokens": 50, "completion_tokens": 7, "total_tokens": 57}
    });
    let (url, handle) = canned_server(vec![reply]);
    let mut req = ChatRequest::new("model-x", vec![ChatMessage::user("hi")], 2048);
    req.reasoning_effort = Some(deepsearch_core::llm::ReasoningEffort::Medium);
    let done = client(&url).complete(&req).unwrap();
    assert_eq!(done.usage.input_total, 50);
    assert_eq!(done.usage.input_cached, 0);
    assert_eq!(done.usage.output_reasoning, 0);
    assert!(done.usage.estimated);

    let bodies = handle.join().unwrap();
    assert_eq!(bodies[0]["model"], "model-x");
    assert_eq!(bodies[0]["max_tokens"], 2048);
    assert_eq!(bodies[0]["reasoning_effort"], "medium");
    assert_eq!(bodies[0]["messages"][0]["role"], "user");
}

#[test]
fn absent_usage_falls_back_to_local_estimate() {
    let reply = json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": "three word reply"}}]});
    let (url, handle) = canned_server(vec![reply]);
    let req = ChatRequest::new("m", vec![ChatMessage::user("one two three four")], 16);
    let done = client(&url).complete(&req).unwrap();
    assert_eq!(done.usage.input_total, 4);
    assert_eq!(done.usage.output_total, 3);
    assert!(done.usage.estimated);
    handle.join().unwrap();
}

#[test]
fn embeddings_endpoint_posts_inputs() {
    let reply = json!({"data": [{"embedding": [0.5, -1.0, 2.0]}, {"embedding": [0.0, 0.0, 1.0]}]});
    let (url, handle) = canned_server(vec![reply]);
    let e = HttpEmbeddingEndpoint::new(&url, None, Some("emb".into())).with_retry(fast_retry());
    let out = e.embed(&["a".into(), "b".into()]).unwrap();
    assert_eq!(out, vec![vec![0.5, -1.0, 2.0], vec![0.0, 0.0, 1.0]]);
    let bodies = handle.join().unwrap();
    assert_eq!(bodies[0], json!({"input": ["a", "b"], "model": "emb"}));
}
