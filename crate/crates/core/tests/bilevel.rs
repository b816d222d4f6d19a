mod common;

use common::*;
use mpq_core::bilevel::{self, alternation_schedule, Action, OptimizerState};
use mpq_core::config::{OptimizerConfig, SearchSchedule};
use mpq_core::supernet::{self, RelaxedSelection};
use mpq_core::{ArchMode, Dataset, Tensor};

/// Hand-written run-length table for the default schedule (warmup 1000,
/// blocks of 1000, cycles of 100 weight then 100 arch) over two layers.
fn oracle_table() -> Vec<(usize, usize, Action)> {
    use Action::*;
    let mut t = vec![(0, 999, Weight)];
    let block = |start: usize, layer: usize| {
        vec![
            (start, start, Unfreeze(layer)),
            (start + 1, start + 99, Weight),
            (start + 100, start + 199, Arch),
            (start + 200, start + 299, Weight),
            (start + 300, start + 399, Arch),
            (start + 400, start + 499, Weight),
            (start + 500, start + 599, Arch),
            (start + 600, start + 699, Weight),
            (start + 700, start + 799, Arch),
            (start + 800, start + 899, Weight),
            (start + 900, start + 999, Arch),
        ]
    };
    t.extend(block(1000, 0));
    t.extend(block(2000, 1));
    t
}

#[test]
fn schedule_matches_oracle_table() {
    let s = SearchSchedule::default();
    let mut covered = 0;
    for (lo, hi, action) in oracle_table() {
        for step in lo..=hi {
            assert_eq!(alternation_schedule(step, &s, 2, 100), action, "step {step}");
            covered += 1;
        }
    }
    assert_eq!(covered, 3000);
}

#[test]
fn blocks_past_the_last_layer_do_not_unfreeze() {
    let s = SearchSchedule::default();
    assert_eq!(alternation_schedule(3000, &s, 2, 100), Action::Weight);
    assert_eq!(alternation_schedule(3100, &s, 2, 100), Action::Arch);
}

#[test]
fn arch_steps_wait_for_n1() {
    let s = SearchSchedule { n1: 12, ..SearchSchedule::default() };
    assert_eq!(alternation_schedule(1100, &s, 2, 100), Action::Weight);
    assert_eq!(alternation_schedule(1199, &s, 2, 100), Action::Weight);
    assert_eq!(alternation_schedule(1300, &s, 2, 100), Action::Arch);
}

struct Setup {
    fx: MixtureFixture,
    opt: OptimizerState,
    batch: Dataset,
    selection: RelaxedSelection,
}

fn setup(seed: u64, weight_lr: f64) -> Setup {
    let fx = MixtureFixture::new(seed);
    let opt = OptimizerState::new(&fx.net, &OptimizerConfig::default(), weight_lr, 0.01).unwrap();
    let batch = Dataset { features: fx.x.clone(), labels: fx.labels.clone() };
    let selection = supernet::selection_with_noise(&fx.net.state, fx.temperature, fx.gumbel.clone()).unwrap();
    Setup { fx, opt, batch, selection }
}

fn weights(net: &mpq_core::Supernet) -> Vec<Tensor> {
    net.model.params().into_iter().cloned().collect()
}

#[test]
fn weight_step_leaves_beta_untouched() {
    let mut s = setup(1, 0.01);
    let beta = s.fx.net.state.beta().clone();
    let before = weights(&s.fx.net);
    bilevel::weight_step(&mut s.fx.net, &mut s.opt, &s.batch, &s.selection, &s.fx.objective, &s.fx.cost, 0).unwrap();
    assert_eq!(s.fx.net.state.beta(), &beta);
    assert_ne!(weights(&s.fx.net), before);
}

#[test]
fn arch_step_leaves_weights_untouched() {
    for mode in [ArchMode::FirstOrder, ArchMode::Unrolled] {
        let mut s = setup(2, 0.01);
        let before = weights(&s.fx.net);
        let beta = s.fx.net.state.beta().clone();
        let r = bilevel::arch_step(
            &mut s.fx.net,
            &s.opt,
            &s.batch,
            Some(&s.batch),
            &s.fx.gumbel,
            s.fx.temperature,
            mode,
            &s.fx.objective,
            &s.fx.cost,
            0,
        )
        .unwrap();
        assert!(r.is_some());
        assert_eq!(weights(&s.fx.net), before, "{mode:?}");
        assert_ne!(s.fx.net.state.beta(), &beta);
    }
}

#[test]
fn zero_unroll_rate_equals_first_order() {
    let mut s = setup(3, 0.01);
    let fx = &mut s.fx;
    let grad = |net: &mut mpq_core::Supernet, mode, xi| {
        bilevel::arch_gradient(net, &s.batch, Some(&s.batch), &fx.gumbel, fx.temperature, mode, xi, &fx.objective, &fx.cost)
            .unwrap()
            .0
    };
    let first = grad(&mut fx.net, ArchMode::FirstOrder, 0.5);
    let unrolled = grad(&mut fx.net, ArchMode::Unrolled, 0.0);
    assert_eq!(first, unrolled);
    let moved = grad(&mut fx.net, ArchMode::Unrolled, 0.5);
    assert_ne!(first, moved);
}

#[test]
fn first_order_gradient_matches_finite_differences() {
    let mut s = setup(4, 0.01);
    let (analytic, _) = bilevel::arch_gradient(
        &mut s.fx.net,
        &s.batch,
        None,
        &s.fx.gumbel,
        s.fx.temperature,
        ArchMode::FirstOrder,
        0.0,
        &s.fx.objective,
        &s.fx.cost,
    )
    .unwrap();
    let beta = s.fx.net.state.beta().clone();
    let numeric = numeric_grad(&beta, |b| {
        let mut net = s.fx.net.clone();
        net.state.set_beta(b.clone()).unwrap();
        bilevel::arch_gradient(&mut net, &s.batch, None, &s.fx.gumbel, s.fx.temperature, ArchMode::FirstOrder, 0.0, &s.fx.objective, &s.fx.cost)
            .unwrap()
            .1
            .loss_val
            .unwrap()
    });
    assert!(max_rel_err(&analytic, &numeric, 1e-6) <= 1e-3);
}

#[test]
fn zero_learning_rates_change_nothing() {
    let mut s = setup(5, 0.0);
    s.opt.arch.lr = 0.0;
    let before = weights(&s.fx.net);
    let beta = s.fx.net.state.beta().clone();
    for step in 0..5 {
        bilevel::weight_step(&mut s.fx.net, &mut s.opt, &s.batch, &s.selection, &s.fx.objective, &s.fx.cost, step).unwrap();
        bilevel::arch_step(&mut s.fx.net, &s.opt, &s.batch, None, &s.fx.gumbel, 0.7, ArchMode::FirstOrder, &s.fx.objective, &s.fx.cost, step)
            .unwrap();
    }
    assert_eq!(weights(&s.fx.net), before);
    assert_eq!(s.fx.net.state.beta(), &beta);
}

#[test]
fn arch_step_with_every_group_frozen_is_skipped() {
    let mut s = setup(6, 0.01);
    let rows = s.fx.net.state.rows();
    s.fx.net.state.set_frozen_mask(vec![true; rows]).unwrap();
    let beta = s.fx.net.state.beta().clone();
    let r = bilevel::arch_step(&mut s.fx.net, &s.opt, &s.batch, None, &s.fx.gumbel, 0.7, ArchMode::FirstOrder, &s.fx.objective, &s.fx.cost, 0)
        .unwrap();
    assert!(r.is_none());
    assert_eq!(s.fx.net.state.beta(), &beta);
}

#[test]
fn frozen_rows_get_no_arch_gradient() {
    let mut s = setup(7, 0.01);
    let rows = s.fx.net.state.rows();
    let mask: Vec<bool> = (0..rows).map(|r| r % 2 == 0).collect();
    s.fx.net.state.set_frozen_mask(mask.clone()).unwrap();
    let (grad, _) = bilevel::arch_gradient(&mut s.fx.net, &s.batch, None, &s.fx.gumbel, 0.7, ArchMode::FirstOrder, 0.0, &s.fx.objective, &s.fx.cost)
        .unwrap();
    let k = s.fx.net.state.k();
    for (r, frozen) in mask.iter().enumerate() {
        let row = &grad.data()[r * k..(r + 1) * k];
        assert_eq!(*frozen, row.iter().all(|&v| v == 0.0), "row {r}");
    }
}

#[test]
fn training_loss_trends_down() {
    let mut s = setup(8, 0.01);
    let mut losses = Vec::new();
    for step in 0..50 {
        let r = bilevel::weight_step(&mut s.fx.net, &mut s.opt, &s.batch, &s.selection, &s.fx.objective, &s.fx.cost, step)
            .unwrap();
        losses.push(r.loss_train.unwrap());
    }
    let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
}
