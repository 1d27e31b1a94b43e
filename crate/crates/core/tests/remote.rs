mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use dfo_attack::attack::AttackConfig;
use dfo_attack::harness::{run_campaign, ExperimentConfig, ImageEntry, ImageSet, ModelRef, Target, TargetProtocol};
use dfo_attack::problem::Shape;
use dfo_attack::targets::remote::{answer, Endpoint, WireRequest};
use dfo_attack::targets::{save_model, Classifier, Model, RemoteSpec};

const BIN: &str = env!("CARGO_BIN_EXE_dfo-attack");

fn linear_model(shape: Shape, seed: u64) -> Model {
    Model::Linear(common::instance(shape, 5, seed).model)
}

fn pipe_spec(model_path: &std::path::Path, shape: Shape) -> RemoteSpec {
    RemoteSpec {
        endpoint: Endpoint::Pipe {
            command: vec![BIN.into(), "serve".into(), "--model".into(), model_path.display().to_string()],
        },
        shape,
        num_classes: 5,
        timeout_secs: 30.0,
        max_concurrency: 1,
    }
}

/// Minimal single-threaded HTTP endpoint answering `requests` POSTs.
fn spawn_http(model: Model, requests: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/logits", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let request: WireRequest = serde_json::from_slice(&body).unwrap();
            let reply = serde_json::to_string(&answer(&model, &request)).unwrap();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    url
}

#[test]
fn pipe_oracle_reproduces_local_logits() {
    let shape = Shape::new(3, 3, 2).unwrap();
    let model = linear_model(shape, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    save_model(&model, &path).unwrap();
    let remote = pipe_spec(&path, shape).connect().unwrap();
    for seed in 0..5 {
        let x = dfo_attack::targets::synthetic::random_image(shape, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
        let want = model.logits(x.data()).unwrap();
        let got = remote.logits(x.data()).unwrap();
        assert_eq!(got, want);
    }
    assert!(remote.logits(&[0.0; 3]).is_err());
}

#[test]
fn pipe_oracle_reports_a_dead_process() {
    let spec = RemoteSpec {
        endpoint: Endpoint::Pipe {
            command: vec![BIN.into(), "serve".into(), "--model".into(), "/nonexistent/model".into()],
        },
        shape: Shape::new(1, 1, 2).unwrap(),
        num_classes: 2,
        timeout_secs: 10.0,
        max_concurrency: 1,
    };
    let remote = spec.connect().unwrap();
    assert!(remote.logits(&[0.0, 0.0]).is_err());
}

#[test]
fn http_oracle_reproduces_local_logits() {
    let shape = Shape::new(2, 2, 1).unwrap();
    let model = linear_model(shape, 2);
    let x = [0.1, -0.2, 0.3, 0.0];
    let want = model.logits(&x).unwrap();
    let url = spawn_http(model, 2);
    let spec = RemoteSpec {
        endpoint: Endpoint::Http { url },
        shape,
        num_classes: 5,
        timeout_secs: 10.0,
        max_concurrency: 2,
    };
    let remote = spec.connect().unwrap();
    assert_eq!(remote.logits(&x).unwrap(), want);
    // the endpoint rejects a wrong shape with an error reply
    let bad = RemoteSpec {
        shape: Shape::new(1, 1, 4).unwrap(),
        ..spec
    };
    assert!(bad.connect().unwrap().logits(&x).is_err());
}

#[test]
fn campaign_over_pipe_matches_local_campaign() {
    let shape = Shape::new(4, 4, 1).unwrap();
    let model = linear_model(shape, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    save_model(&model, &path).unwrap();
    let set = ImageSet {
        shape,
        lower: -0.5,
        upper: 0.5,
        images: vec![ImageEntry {
            id: "a".into(),
            data: (0..16).map(|i| (i as f64 - 7.5) / 20.0).collect(),
        }],
    };
    let config = |out: &str| ExperimentConfig {
        attacks: vec![AttackConfig::Square(Default::default())],
        model: ModelRef::File(path.clone()),
        images: path.clone(),
        epsilons: vec![0.1],
        max_queries: 200,
        protocol: TargetProtocol::AllOtherClasses,
        seed: 5,
        workers: 2,
        output: dir.path().join(out),
        mask_top_k: None,
        cdf_points: 10,
    };
    let local = run_campaign(&config("local"), &Target::Local(model), &set).unwrap();
    let remote = run_campaign(&config("remote"), &Target::Remote(pipe_spec(&path, shape)), &set).unwrap();
    assert_eq!(local.len(), 4);
    let key = |r: &dfo_attack::harness::AttackRecord| (r.target_class, r.success, r.queries, r.final_loss);
    assert_eq!(local.iter().map(key).collect::<Vec<_>>(), remote.iter().map(key).collect::<Vec<_>>());
}
