#[path = "support/gradsuite.rs"]
mod gradsuite;

use dnas_core::data::{synth_dataset, Normalization};
use dnas_core::nn::ParamGroup;
use dnas_core::trainer::run_search;
use dnas_core::{Dataset, LossMode, SearchHyperParams, SearchSpace, SearchState};
use gradsuite::{synthetic_table, tiny_space};

fn data(space: &SearchSpace, per_class: usize, seed: u64) -> (Dataset, Normalization) {
    let cfg = space.config();
    let ds = synth_dataset(cfg.num_classes, per_class, cfg.input_resolution, seed).unwrap();
    let norm = Normalization::compute(&ds);
    (ds, norm)
}

fn quick(epochs: usize, postpone: usize) -> SearchHyperParams {
    SearchHyperParams {
        epochs,
        postpone,
        batch_size: 16,
        theta_batch_size: 8,
        ..SearchHyperParams::default()
    }
}

#[test]
fn phases_only_touch_their_own_parameters() {
    let space = tiny_space();
    let table = synthetic_table(&space);
    let (ds, norm) = data(&space, 8, 1);
    let mut st = SearchState::<f32>::new(&space, &table, quick(3, 0), 7).unwrap();

    let theta0 = st.supernet.theta();
    let w0 = st.supernet.store().snapshot(ParamGroup::Weights);
    st.train_weights_epoch(&ds, &norm).unwrap();
    assert_eq!(st.supernet.theta(), theta0, "weight phase moved theta");
    let w1 = st.supernet.store().snapshot(ParamGroup::Weights);
    assert_ne!(w1, w0);

    st.train_theta_epoch(&ds, &norm).unwrap().expect("theta trains at epoch 0");
    assert_eq!(st.supernet.store().snapshot(ParamGroup::Weights), w1, "theta phase moved weights");
    assert_ne!(st.supernet.theta(), theta0);
}

#[test]
fn theta_is_frozen_while_postponed_and_tau_follows_schedule() {
    let space = tiny_space();
    let table = synthetic_table(&space);
    let (ds, norm) = data(&space, 10, 2);
    let hyper = quick(4, 2);
    let st = run_search::<f32>(&space, &table, hyper.clone(), &ds, &norm, 3, &mut |_| Ok(())).unwrap();
    let zeros: Vec<Vec<f64>> = space.slots().iter().map(|s| vec![0.0; s.candidates.len()]).collect();
    assert_eq!(st.theta_history[0], zeros);
    assert_eq!(st.theta_history[1], zeros);
    assert_ne!(st.theta_history[2], zeros);
    assert!(st.history.iter().filter(|m| m.phase == "theta").all(|m| m.epoch >= 2));
    for m in &st.history {
        let want = 5.0 * (-0.045 * m.epoch as f64).exp();
        assert!((m.tau - want).abs() < 5e-7, "epoch {} tau {}", m.epoch, m.tau);
    }
    assert_eq!(st.epoch, 4);
    assert_eq!(st.theta_history.len(), 4);
}

#[test]
fn equal_seeds_give_identical_trajectories() {
    let space = tiny_space();
    let table = synthetic_table(&space);
    let (ds, norm) = data(&space, 10, 4);
    let run = |seed| run_search::<f32>(&space, &table, quick(3, 1), &ds, &norm, seed, &mut |_| Ok(())).unwrap();
    let (a, b, c) = (run(11), run(11), run(12));
    assert_eq!(a.checkpoint().to_json(), b.checkpoint().to_json());
    assert_eq!(a.history, b.history);
    assert_ne!(a.theta_history, c.theta_history);
}

#[test]
fn latency_only_pressure_lowers_expected_latency() {
    let space = tiny_space();
    let table = synthetic_table(&space);
    let (ds, norm) = data(&space, 10, 5);
    let hyper = SearchHyperParams {
        loss_mode: LossMode::LatencyOnly,
        ..quick(20, 0)
    };
    let st = run_search::<f32>(&space, &table, hyper, &ds, &norm, 6, &mut |_| Ok(())).unwrap();
    assert!(st.history.iter().all(|m| m.phase == "theta"));
    let lats: Vec<f64> = st.history.iter().map(|m| m.expected_lat_us).collect();
    for w in lats.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{lats:?}");
    }
    assert!(lats.last().unwrap() < &lats[0]);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let space = tiny_space();
    let table = synthetic_table(&space);
    let ds = synth_dataset(4, 5, 16, 0).unwrap();
    let norm = Normalization::compute(&ds);
    let err = run_search::<f32>(&space, &table, quick(2, 0), &ds, &norm, 0, &mut |_| Ok(()))
        .err()
        .expect("resolution mismatch");
    assert!(matches!(err, dnas_core::Error::Config(_)), "{err}");
}
