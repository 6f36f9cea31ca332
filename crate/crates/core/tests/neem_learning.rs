mod common;

use common::*;
use mentalsim_core::geometry::Pose;
use mentalsim_core::learning::{train_from_neems, Gaussian, LearnError, ModelFile, MODEL_FORMAT};
use mentalsim_core::neem::{
    episode_paths, Episode, EpisodeHeader, EventDraft, EventFilter, EventKind, NeemError, Outcome, Recorder,
    TransformSample, FORMAT,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn header(id: &str) -> EpisodeHeader {
    EpisodeHeader {
        format: FORMAT.into(),
        episode_id: id.into(),
        world_hash: "0".repeat(64),
        seed: 7,
        dt: 0.01,
    }
}

/// Mean and unbiased covariance, accumulated one sample at a time (Welford).
fn welford(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    let mut m2 = vec![vec![0.0; d]; d];
    for (k, s) in samples.iter().enumerate() {
        let n = (k + 1) as f64;
        let before: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            mean[i] += before[i] / n;
        }
        for i in 0..d {
            for j in 0..d {
                m2[i][j] += before[i] * (s[j] - mean[j]);
            }
        }
    }
    let n = samples.len() as f64;
    (mean, m2.into_iter().map(|r| r.into_iter().map(|v| v / (n - 1.0)).collect()).collect())
}

fn arb_samples() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), d + 3..40))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fit_matches_streaming_oracle(samples in arb_samples()) {
        let g = Gaussian::fit(&samples).unwrap();
        prop_assume!(!g.regularized());
        let (mean, cov) = welford(&samples);
        for (a, b) in g.mean().iter().zip(&mean) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (ra, rb) in g.cov().iter().zip(&cov) {
            for (a, b) in ra.iter().zip(rb) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn fit_is_translation_equivariant(samples in arb_samples(), shift in -100.0..100.0f64) {
        let g = Gaussian::fit(&samples).unwrap();
        let moved: Vec<Vec<f64>> = samples.iter().map(|s| s.iter().map(|v| v + shift).collect()).collect();
        let h = Gaussian::fit(&moved).unwrap();
        for (a, b) in g.mean().iter().zip(h.mean()) {
            prop_assert!((a + shift - b).abs() < 1e-9);
        }
        for (ra, rb) in g.cov().iter().zip(h.cov()) {
            for (a, b) in ra.iter().zip(rb) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn diagonal_log_density_matches_closed_form(
        mean in prop::collection::vec(-5.0..5.0f64, 1..4),
        var in prop::collection::vec(0.01..4.0f64, 3),
        x in prop::collection::vec(-5.0..5.0f64, 3),
    ) {
        let d = mean.len();
        let cov: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { var[i] } else { 0.0 }).collect()).collect();
        let g = Gaussian::new(mean.clone(), cov).unwrap();
        let want: f64 = (0..d)
            .map(|i| -0.5 * ((x[i] - mean[i]).powi(2) / var[i] + (2.0 * std::f64::consts::PI * var[i]).ln()))
            .sum();
        prop_assert!((g.log_density(&x[..d]) - want).abs() < 1e-9);
    }

    /// Stored events come back field for field, whatever the strings contain.
    #[test]
    fn store_load_round_trip(
        names in prop::collection::vec("\\PC{0,12}", 1..8),
        times in prop::collection::vec(0.0..1e3f64, 1..30),
        fail in "\\PC{0,20}",
    ) {
        let mut rec = Recorder::in_memory(header("rt"));
        for (i, t) in times.iter().enumerate() {
            let who = &names[i % names.len()];
            let d = EventDraft::new(EventKind::CommandIssued, who.clone())
                .participants([who.clone(), fail.clone()])
                .outcome(if i % 3 == 0 { Outcome::Failure(fail.clone()) } else { Outcome::Success })
                .payload(json!({"t": t, "label": who, "nested": {"v": [i, -1.5e-300, 1e300]}}));
            rec.record(d, *t).unwrap();
            rec.sample(TransformSample { sim_time: *t, node: who.clone(), world_pose: Pose::from_xyz_rpy(*t, -t, 0.5, 0.1, 0.2, 0.3) }).unwrap();
        }
        let ep = rec.close().unwrap();
        let dir = tempfile::tempdir().unwrap();
        ep.store(dir.path(), 0.0).unwrap();
        let back = Episode::load(&episode_paths(dir.path(), "rt").0).unwrap();
        prop_assert_eq!(&back.header, &ep.header);
        prop_assert_eq!(&back.events, &ep.events);
        prop_assert_eq!(back.transforms.len(), ep.transforms.len());
        for (a, b) in back.transforms.iter().zip(&ep.transforms) {
            prop_assert_eq!(a.sim_time, b.sim_time);
            prop_assert_eq!(&a.node, &b.node);
            prop_assert!(a.world_pose.approx_eq(&b.world_pose, 1e-12));
        }
    }

    #[test]
    fn query_agrees_with_filter_oracle(
        spec in prop::collection::vec((0usize..4, 0usize..3, any::<bool>(), 0.0..10.0f64), 0..60),
        kind in prop::option::of(0usize..4), who in prop::option::of(0usize..3),
        success in prop::option::of(any::<bool>()), range in prop::option::of((0.0..10.0f64, 0.0..10.0f64)),
    ) {
        let kinds = [EventKind::Grasp, EventKind::Release, EventKind::Collision, EventKind::Settle];
        let people = ["milk", "cup", "robot"];
        let mut rec = Recorder::in_memory(header("q"));
        let mut t = 0.0;
        for &(k, p, ok, dt) in &spec {
            t += dt;
            let outcome = if ok { Outcome::Success } else { Outcome::Failure("nope".into()) };
            rec.record(EventDraft::new(kinds[k], "robot").participants([people[p]]).outcome(outcome), t).unwrap();
        }
        let ep = rec.close().unwrap();
        let filter = EventFilter {
            kind: kind.map(|k| kinds[k]),
            participant: who.map(|p| people[p].to_string()),
            success,
            time_range: range.map(|(a, b)| (a.min(b), a.max(b))),
        };
        let got: Vec<u64> = ep.query_events(&filter).iter().map(|e| e.event_id).collect();
        let want: Vec<u64> = ep.events.iter().filter(|e| {
            filter.kind.is_none_or(|k| e.kind == k)
                && filter.participant.as_ref().is_none_or(|p| e.participants.contains(p))
                && filter.success.is_none_or(|s| e.outcome.as_ref().is_some_and(|o| o.is_success() == s))
                && filter.time_range.is_none_or(|(a, b)| a <= e.sim_time && e.sim_time <= b)
        }).map(|e| e.event_id).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn recorder_enforces_pairing_and_order() {
    let mut rec = Recorder::in_memory(header("p"));
    let end = |name: &str, token| EventDraft::new(EventKind::ActionEnd, "robot").action(name, token).outcome(Outcome::Success);
    assert!(matches!(rec.record(end("fetch", 1), 0.0), Err(NeemError::UnpairedActionEnd(_))));
    rec.record(EventDraft::new(EventKind::ActionStart, "robot").action("fetch", 1), 1.0).unwrap();
    assert!(matches!(rec.record(end("grasp", 1), 1.0), Err(NeemError::UnpairedActionEnd(_))));
    // Time never runs backwards.
    assert_eq!(rec.record(end("fetch", 1), 0.5).unwrap().sim_time, 1.0);
    let ep = rec.close().unwrap();
    assert!(pairing_violations(&ep.events).is_empty());
    assert_eq!(ep.events.iter().map(|e| e.event_id).collect::<Vec<_>>(), vec![1, 2]);
    assert!(matches!(
        rec.record(EventDraft::new(EventKind::Settle, "robot"), 2.0),
        Err(NeemError::EpisodeClosed(_))
    ));
}

#[test]
fn pose_lookup_interpolates_between_samples() {
    let mut rec = Recorder::in_memory(header("tf"));
    for (t, x) in [(0.0, 0.0), (1.0, 2.0), (2.0, 2.0)] {
        rec.sample(TransformSample { sim_time: t, node: "milk".into(), world_pose: Pose::from_translation(x, 0.0, 1.0) })
            .unwrap();
    }
    let ep = rec.close().unwrap();
    let p = ep.pose_at("milk", 0.25).unwrap();
    assert!(close3(p.xyz(), [0.5, 0.0, 1.0], 1e-12));
    assert!(close3(ep.pose_at("milk", 1.5).unwrap().xyz(), [2.0, 0.0, 1.0], 1e-12));
    assert!(matches!(ep.pose_at("milk", 2.5), Err(NeemError::OutOfRange { .. })));
    assert!(matches!(ep.pose_at("cup", 0.5), Err(NeemError::UnknownNode(_))));
}

/// One episode with a successful fetch per entry of `poses` and one failed fetch.
fn fetch_episode(id: &str, poses: &[(f64, f64)]) -> Episode {
    let mut rec = Recorder::in_memory(header(id));
    let mut token = 0;
    let mut fetch = |rec: &mut Recorder, x: f64, y: f64, outcome: Outcome| {
        token += 1;
        rec.record(EventDraft::new(EventKind::ActionStart, "robot").action("fetch", token), 0.0).unwrap();
        let payload = json!({"base_pose": {"x": x, "y": y, "theta": 0.3}});
        rec.record(EventDraft::new(EventKind::ActionEnd, "robot").action("fetch", token).outcome(outcome).payload(payload), 0.0)
            .unwrap();
    };
    fetch(&mut rec, 100.0, 100.0, Outcome::Failure("unreachable".into()));
    for &(x, y) in poses {
        fetch(&mut rec, x, y, Outcome::Success);
    }
    rec.close().unwrap()
}

#[test]
fn training_reads_successful_fetches_only() {
    let a = [(1.0, 0.0), (2.0, 1.0)];
    let b = [(0.0, 2.0), (3.0, 3.0), (1.5, -1.0)];
    let eps = [fetch_episode("a", &a), fetch_episode("b", &b)];
    let m = train_from_neems(&eps, "fetch", "base_pose.xy").unwrap();
    assert_eq!((m.format.as_str(), m.n_samples), (MODEL_FORMAT, 5));
    let pts: Vec<Vec<f64>> = a.iter().chain(&b).map(|&(x, y)| vec![x, y]).collect();
    let (mean, cov) = welford(&pts);
    assert!(m.mean.iter().zip(&mean).all(|(p, q)| (p - q).abs() < 1e-12));
    assert!(m.cov.iter().flatten().zip(cov.iter().flatten()).all(|(p, q)| (p - q).abs() < 1e-12));

    assert!(matches!(
        train_from_neems(&[fetch_episode("c", &[(1.0, 1.0)])], "fetch", "base_pose.xy"),
        Err(LearnError::InsufficientData(1))
    ));
    assert!(matches!(
        train_from_neems(&eps, "fetch", "base_pose.q"),
        Err(LearnError::Neem(NeemError::UnknownPath(_)))
    ));
}

#[test]
fn model_file_round_trip_and_rejects() {
    let g = Gaussian::new(vec![1.0, -2.0], vec![vec![0.5, 0.1], vec![0.1, 0.3]]).unwrap();
    let m = ModelFile::from_gaussian(&g, "fetch", "base_pose.xy", 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let back = ModelFile::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.gaussian().unwrap(), g);

    let mut wrong = m.clone();
    wrong.format = "something-else/9".into();
    wrong.save(&path).unwrap();
    assert!(matches!(ModelFile::load(&path), Err(LearnError::Format(_))));

    let mut indefinite = m.clone();
    indefinite.cov = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
    indefinite.save(&path).unwrap();
    assert!(matches!(ModelFile::load(&path), Err(LearnError::NotPositiveDefinite)));

    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(ModelFile::load(&path), Err(LearnError::Format(_))));
}

#[test]
fn sampling_is_seeded() {
    let g = Gaussian::new(vec![0.0, 1.0], vec![vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap();
    let a = g.sample_n(&mut ChaCha8Rng::seed_from_u64(3), 50);
    let b = g.sample_n(&mut ChaCha8Rng::seed_from_u64(3), 50);
    let c = g.sample_n(&mut ChaCha8Rng::seed_from_u64(4), 50);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn fit_rejects_bad_input() {
    assert!(matches!(Gaussian::fit(&[vec![1.0]]), Err(LearnError::InsufficientData(1))));
    assert!(matches!(
        Gaussian::fit(&[vec![1.0, 2.0], vec![1.0]]),
        Err(LearnError::DimensionMismatch { index: 1, expected: 2, found: 1 })
    ));
    assert!(matches!(Gaussian::fit(&[vec![1.0], vec![f64::NAN]]), Err(LearnError::NonFinite(1))));
}
