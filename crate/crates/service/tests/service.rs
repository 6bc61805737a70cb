use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use tempfile::TempDir;
use trajirl_client::Client;
use trajirl_core::api::{
    fraction_entering, fully_blocked_coarse, MaskEdit, PredictPayload, PredictRequest, MAX_PAYLOAD_PLANS,
};
use trajirl_core::model::{prepare_all, train_irl, IrlTrainConfig, ModelConfig};
use trajirl_core::nn::ParamStore;
use trajirl_core::scene::{generate_scenario, save_scenario, GeneratorParams, Scenario, ScenarioKind};
use trajirl_service::{router, AppState};

const CORPUS: [(ScenarioKind, u64); 3] = [
    (ScenarioKind::TJunction, 900_001),
    (ScenarioKind::Crossing, 900_002),
    (ScenarioKind::TJunction, 900_003),
];

fn corpus_scenarios() -> Vec<Scenario> {
    let gp = GeneratorParams {
        block_prob: 0.0,
        ..Default::default()
    };
    CORPUS
        .iter()
        .map(|&(k, seed)| generate_scenario(k, &gp, seed).unwrap())
        .collect()
}

fn write_corpus(dir: &Path) -> Vec<Scenario> {
    let sc = corpus_scenarios();
    for s in &sc {
        save_scenario(s, &dir.join(format!("{}.json", s.id))).unwrap();
    }
    sc
}

/// A briefly trained reward network, shared by every test in this file.
fn stage1() -> ParamStore {
    static STORE: OnceLock<ParamStore> = OnceLock::new();
    STORE
        .get_or_init(|| {
            let cfg = ModelConfig::default();
            let gp = GeneratorParams::default();
            let train: Vec<Scenario> = (0..80u64)
                .map(|i| {
                    let kind = if i % 2 == 0 {
                        ScenarioKind::TJunction
                    } else {
                        ScenarioKind::Crossing
                    };
                    generate_scenario(kind, &gp, i).unwrap()
                })
                .collect();
            let preps = prepare_all(&train, &cfg).unwrap();
            let mut store = cfg.init_stage1(0);
            let tc = IrlTrainConfig {
                epochs: 15,
                lr: 1e-2,
                ..Default::default()
            };
            train_irl(&mut store, &preps, &cfg, &tc, false, |_| {}).unwrap();
            store
        })
        .clone()
}

struct Server {
    client: Client,
    addr: SocketAddr,
    _dir: TempDir,
    scenarios: Vec<Scenario>,
}

async fn spawn(with_stage1: bool, with_stage2: bool) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = write_corpus(dir.path());
    let cfg = ModelConfig::default();
    let s1 = with_stage1.then(stage1);
    let s2 = with_stage2.then(|| cfg.init_stage2(3));
    let corpus = trajirl_core::scene::load_corpus(dir.path()).unwrap();
    let state = Arc::new(AppState::new(corpus, cfg, s1, s2));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state, None)).await.unwrap() });
    Server {
        client: Client::new(&format!("http://{addr}")),
        addr,
        _dir: dir,
        scenarios,
    }
}

fn drivable_and_undrivable(s: &Scenario) -> ([usize; 2], [usize; 2]) {
    let side = s.grid_side;
    let all = (0..side).flat_map(|r| (0..side).map(move |c| [r, c]));
    let on = all.clone().find(|&[r, c]| s.drivable_mask.get(r, c)).unwrap();
    let off = all.clone().find(|&[r, c]| !s.drivable_mask.get(r, c)).unwrap();
    (on, off)
}

fn without_timing(mut p: PredictPayload) -> PredictPayload {
    p.timing_ms = 0.0;
    p
}

#[tokio::test]
async fn health_is_stable_and_unknown_paths_are_json_404() {
    let srv = spawn(false, false).await;
    let a = srv.client.health().await.unwrap();
    let b = srv.client.health().await.unwrap();
    assert_eq!(a.status, "ok");
    assert_eq!(a, b);
    let resp = reqwest::get(format!("http://{}/api/nope", srv.addr)).await.unwrap();
    assert_eq!(resp.status(), 404);
    let body: serde_json::Value = resp.json().await.unwrap();
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn scenarios_list_and_round_trip() {
    let srv = spawn(false, false).await;
    let ids = srv.client.scenarios().await.unwrap();
    assert_eq!(ids.len(), 3);
    for s in &srv.scenarios {
        let text = srv.client.scenario_text(&s.id).await.unwrap();
        let disk = std::fs::read_to_string(srv._dir.path().join(format!("{}.json", s.id))).unwrap();
        assert_eq!(text, disk);
        assert_eq!(&srv.client.scenario(&s.id).await.unwrap(), s);
    }
    let err = srv.client.scenario_text("missing").await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(404));
    let err = srv.client.create_session("missing").await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(404));
}

#[tokio::test]
async fn mask_edits_are_local_reversible_and_flag_noops() {
    let srv = spawn(false, false).await;
    let s = &srv.scenarios[0];
    let sid = srv.client.create_session(&s.id).await.unwrap().session_id;
    let base = srv.client.session(&sid).await.unwrap().mask;
    assert_eq!(base, s.drivable_mask);

    let (on, off) = drivable_and_undrivable(s);
    let cell = |c: [usize; 2]| [c[0] as i64, c[1] as i64];
    let edited = srv
        .client
        .edit_mask(
            &sid,
            &MaskEdit {
                blocked_cells: vec![cell(on)],
                revert: vec![],
            },
        )
        .await
        .unwrap();
    assert!(edited.noop.is_empty());
    assert_eq!(edited.blocked_cells, vec![on]);
    let mut diff = Vec::new();
    for r in 0..s.grid_side {
        for c in 0..s.grid_side {
            if edited.mask.get(r, c) != base.get(r, c) {
                diff.push([r, c]);
            }
        }
    }
    assert_eq!(diff, vec![on]);

    let noop = srv
        .client
        .edit_mask(
            &sid,
            &MaskEdit {
                blocked_cells: vec![cell(off)],
                revert: vec![],
            },
        )
        .await
        .unwrap();
    assert_eq!(noop.noop, vec![off]);
    assert_eq!(noop.mask, edited.mask);

    let back = srv
        .client
        .edit_mask(
            &sid,
            &MaskEdit {
                blocked_cells: vec![],
                revert: vec![cell(on)],
            },
        )
        .await
        .unwrap();
    assert_eq!(back.mask, base);
    assert!(back.blocked_cells.is_empty());

    // Another session on the same scenario never sees these edits.
    srv.client
        .edit_mask(
            &sid,
            &MaskEdit {
                blocked_cells: vec![cell(on)],
                revert: vec![],
            },
        )
        .await
        .unwrap();
    let other = srv.client.create_session(&s.id).await.unwrap().session_id;
    assert_eq!(srv.client.session(&other).await.unwrap().mask, base);
    assert_eq!(srv.client.scenario(&s.id).await.unwrap().drivable_mask, base);
}

#[tokio::test]
async fn out_of_range_cells_are_rejected_by_name() {
    let srv = spawn(false, false).await;
    let s = &srv.scenarios[0];
    let sid = srv.client.create_session(&s.id).await.unwrap().session_id;
    let (on, _) = drivable_and_undrivable(s);
    let edit = MaskEdit {
        blocked_cells: vec![[on[0] as i64, on[1] as i64], [3, 50]],
        revert: vec![],
    };
    let err = srv.client.edit_mask(&sid, &edit).await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(422));
    assert!(err.to_string().contains("[3, 50]"), "{err}");
    // The valid half of a rejected request is not applied.
    assert!(srv.client.session(&sid).await.unwrap().blocked_cells.is_empty());
    let neg = MaskEdit {
        blocked_cells: vec![],
        revert: vec![[-1, 0]],
    };
    assert_eq!(
        srv.client
            .edit_mask(&sid, &neg)
            .await
            .unwrap_err()
            .status()
            .map(|s| s.as_u16()),
        Some(422)
    );

    let resp = reqwest::Client::new()
        .post(format!("http://{}/api/sessions/{sid}/mask", srv.addr))
        .json(&serde_json::json!({ "blocked": [[1, 1]] }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 422);
    let err = srv.client.session("no-such-session").await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(404));
}

#[tokio::test]
async fn predict_without_checkpoint_is_a_conflict() {
    let srv = spawn(false, false).await;
    let sid = srv
        .client
        .create_session(&srv.scenarios[0].id)
        .await
        .unwrap()
        .session_id;
    let err = srv.client.predict(&sid, &PredictRequest::default()).await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(409));
}

#[tokio::test]
async fn bad_predict_parameters_are_rejected() {
    let srv = spawn(true, false).await;
    let sid = srv
        .client
        .create_session(&srv.scenarios[0].id)
        .await
        .unwrap()
        .session_id;
    for (k, l) in [(0, 100), (10, 5), (6, 1_000_000)] {
        let req = PredictRequest {
            k,
            l,
            ..Default::default()
        };
        let err = srv.client.predict(&sid, &req).await.unwrap_err();
        assert_eq!(err.status().map(|s| s.as_u16()), Some(422), "K={k} L={l}");
    }
}

#[tokio::test]
async fn payloads_are_deterministic_consistent_and_decimated() {
    let srv = spawn(true, true).await;
    let s = &srv.scenarios[1];
    let sid = srv.client.create_session(&s.id).await.unwrap().session_id;
    let req = PredictRequest {
        seed: 11,
        ..Default::default()
    };
    let a = srv.client.predict(&sid, &req).await.unwrap();
    let b = srv.client.predict(&sid, &req).await.unwrap();
    assert!(a.refined);
    assert_eq!(without_timing(a.clone()), without_timing(b));

    let cfg = ModelConfig::default();
    assert_eq!(a.probabilities.len(), req.k);
    assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!(a.trajectories.iter().all(|t| t.len() == cfg.t_f));
    for grid in [&a.reward, &a.reward_terminal, &a.svf] {
        assert_eq!(grid.len(), 25);
        assert!(grid.iter().all(|row| row.len() == 25));
    }
    assert_eq!(a.plans_total, req.l);
    assert_eq!(a.plans.len(), MAX_PAYLOAD_PLANS);
    assert!(a.plans.iter().all(|p| p.cells[0] == [12, 12]));

    let full = srv
        .client
        .predict(
            &sid,
            &PredictRequest {
                full_plans: true,
                ..req
            },
        )
        .await
        .unwrap();
    assert_eq!(full.plans.len(), req.l);
    // Decimation keeps a subset of the full batch.
    assert!(a.plans.iter().all(|p| full.plans.contains(p)));
}

#[tokio::test]
async fn missing_refiner_falls_back_to_sampling_probabilities() {
    let srv = spawn(true, false).await;
    let sid = srv
        .client
        .create_session(&srv.scenarios[0].id)
        .await
        .unwrap()
        .session_id;
    let p = srv.client.predict(&sid, &PredictRequest::default()).await.unwrap();
    assert!(!p.refined);
    assert_eq!(p.probabilities, p.p_mcmc);
}

#[tokio::test]
async fn blocking_a_branch_keeps_plans_out_of_it() {
    let srv = spawn(true, false).await;
    let cfg = ModelConfig::default();
    for s in srv.scenarios.iter().filter(|s| s.meta.branch_cells.len() >= 2) {
        let label = s.mode_label.clone().unwrap();
        let cells: Vec<[i64; 2]> = s.meta.branch_cells[&label]
            .iter()
            .map(|&[r, c]| [r as i64, c as i64])
            .collect();
        let sid = srv.client.create_session(&s.id).await.unwrap().session_id;
        let req = PredictRequest {
            seed: 5,
            full_plans: true,
            ..Default::default()
        };
        let open = srv.client.predict(&sid, &req).await.unwrap();
        srv.client
            .edit_mask(
                &sid,
                &MaskEdit {
                    blocked_cells: cells,
                    revert: vec![],
                },
            )
            .await
            .unwrap();
        let shut = srv.client.predict(&sid, &req).await.unwrap();
        assert!(!shut.blocked_cells.is_empty());
        assert_eq!(shut.drivable, open.drivable);

        let fine = trajirl_core::scene::GridSpec::new(shut.grid.fine_side, shut.grid.fine_resolution);
        let region = fully_blocked_coarse(&shut.drivable, &shut.blocked_cells, fine, cfg.pool_factor);
        let paths = |p: &PredictPayload| p.plans.iter().map(|x| x.cells.clone()).collect::<Vec<_>>();
        let before = fraction_entering(&paths(&open), &region);
        let after = fraction_entering(&paths(&shut), &region);
        assert!(after <= 0.05, "{}: {before:.3} -> {after:.3}", s.id);
    }
}
