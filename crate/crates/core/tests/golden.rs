//! Regression checks against the committed fixtures. `golden.json` was written
//! by `fixtures/reference.py`, a separate numpy reader of `golden.ltrj`.

use std::path::PathBuf;

use logmech::head::head_probs;
use logmech::ltrj;
use logmech::mechanics::{attach_entropy, entropy_series};
use logmech::model::{encode_bytes, forward_hidden, generate_greedy, init_model, model_from_trajectory, ModelConfig};
use logmech::steering::{steer_and_continue, SteerParams};
use logmech::{summarize, trajectory_mechanics, Trajectory};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn reference() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture("golden.json")).unwrap()).unwrap()
}

fn golden() -> Trajectory {
    ltrj::read_file(fixture("golden.ltrj")).unwrap()
}

fn hidden_sha(traj: &Trajectory) -> String {
    let bytes: Vec<u8> = traj.hidden().iter().flatten().flat_map(|x| x.to_le_bytes()).collect();
    hex::encode(Sha256::digest(&bytes))
}

fn fixture_run() -> Trajectory {
    let config = ModelConfig::from_file(fixture("toy.toml")).unwrap();
    let prompt = std::fs::read(fixture("prompt.txt")).unwrap();
    generate_greedy(&init_model(&config).unwrap(), &encode_bytes(&prompt), 24).unwrap()
}

#[test]
fn generation_reproduces_checksum_and_tokens() {
    let r = reference();
    let traj = fixture_run();
    assert_eq!(hidden_sha(&traj), r["hidden_sha256"]);
    let ids: Vec<u64> = traj.token_ids().iter().map(|&i| u64::from(i)).collect();
    assert_eq!(serde_json::json!(ids), r["token_ids"]);
    assert_eq!(
        ltrj::to_bytes(&traj).unwrap(),
        std::fs::read(fixture("golden.ltrj")).unwrap()
    );
}

#[test]
fn golden_file_parses_to_frozen_values() {
    let r = reference();
    let traj = golden();
    assert_eq!(traj.len(), 24);
    assert_eq!(traj.hidden_dim(), 16);
    assert_eq!(traj.model_id(), r["model_id"]);
    assert_eq!(traj.context_len(), 20);
    assert_eq!(traj.head().unwrap().vocab_size(), 257);
    assert_eq!(hidden_sha(&traj), r["hidden_sha256"]);
}

#[test]
fn stored_probabilities_match_head() {
    let traj = golden();
    let head = traj.head().unwrap();
    for t in 0..traj.len() {
        let p = head_probs(head, &traj.hidden_f64(t)).unwrap();
        let x = traj.token_ids()[t] as usize;
        assert!((p[x] - f64::from(traj.p_realized()[t])).abs() < 1e-6);
    }
}

#[test]
fn summary_matches_reference() {
    let r = &reference()["summary"];
    let traj = golden();
    let mut s = summarize(&[trajectory_mechanics(&traj).unwrap()]).unwrap();
    attach_entropy(&mut s, &[entropy_series(&traj).unwrap()]);
    let close = |got: f64, key: &str| {
        let want = r[key].as_f64().unwrap();
        assert!((got - want).abs() < 1e-6, "{key}: {got} vs {want}");
    };
    assert_eq!(s.n_steps as u64, r["n_steps"].as_u64().unwrap());
    close(s.mean_log_e, "mean_log_e");
    close(s.global_cv, "global_cv");
    close(s.avg_traj_cv, "global_cv");
    close(s.kv_ratio, "kv_ratio");
    close(s.mean_drift, "mean_drift");
    close(s.mean_abs_jump, "mean_abs_jump");
    close(s.drift_ratio, "drift_ratio");
    close(s.mean_entropy.unwrap(), "mean_entropy");
}

#[test]
fn model_rebuilds_from_header_notes() {
    let traj = golden();
    let (model, prompt) = model_from_trajectory(&traj).unwrap();
    assert_eq!(prompt, encode_bytes(b"The quick brown fox"));
    assert_eq!(model.head(), traj.head().unwrap());
    let mut ids = prompt.clone();
    ids.extend_from_slice(&traj.token_ids()[..23]);
    let (hidden, _) = forward_hidden(&model, &ids).unwrap();
    assert_eq!(&hidden[prompt.len() - 1..], traj.hidden());
}

#[test]
fn steering_continuation_is_frozen() {
    let traj = golden();
    let (model, _) = model_from_trajectory(&traj).unwrap();
    let (result, cont) = steer_and_continue(&model, &traj, 5, 101, &SteerParams::default(), 8).unwrap();
    assert!(result.converged);
    assert_eq!(result.steps_taken, 35);
    assert!((result.p_final - 0.5528997752746458).abs() < 1e-6);
    assert_eq!(cont.unwrap().token_ids(), &[102, 33, 69, 113, 117, 17, 119, 84]);
}
