// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::autodiff::{finite_diff_check, AdamWConfig, FdOptions, Tape};
use crate::numerics::{cosine_slices, RngStream, Tensor};
use crate::par::Exec;
use crate::synth::vocab::{self, BOS, DOMINANT, EOS, QMARK, WHICH};

fn tiny_config() -> MllmConfig {
    MllmConfig {
        grid: 4,
        patch: 2,
        d_v: 8,
        d_l: 16,
        layers: 2,
        heads: 2,
        d_ff: 24,
        target_layer: Some(1),
        ..MllmConfig::default()
    }
}

struct Owned {
    pixels: Tensor,
    prompt: Vec<u16>,
    answer: Vec<u16>,
}

impl Owned {
    fn sample(&self) -> Sample<'_> {
        Sample {
            pixels: &self.pixels,
            prompt: &self.prompt,
            answer: &self.answer,
        }
    }
}

fn random_sample(cfg: &MllmConfig, seed: u64, answer: Vec<u16>) -> Owned {
    let mut rng = RngStream::new(seed);
    let side = cfg.grid * cfg.patch;
    Owned {
        pixels: Tensor::from_fn(side, side, |_, _| rng.uniform()),
        prompt: vec![BOS, WHICH, DOMINANT, QMARK],
        answer,
    }
}

/// Weights scaled up from the default init so gradients are well above the
/// finite-difference noise floor.
fn perturbed(cfg: MllmConfig, seed: u64) -> Mllm {
    let mut m = Mllm::new(cfg).unwrap();
    let mut rng = RngStream::new(seed);
    for p in m.store.iter_mut() {
        if p.trainable {
            for v in p.value_mut().data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    m
}

#[test]
fn zero_image_encodes_to_position_codes() {
    let m = Mllm::new(MllmConfig::default()).unwrap();
    let z = m.encode_image(&Tensor::zeros(&[32, 32])).unwrap();
    assert_eq!(&z, m.pos_code());
}

#[test]
fn swapping_patches_swaps_feature_rows() {
    let cfg = MllmConfig::default();
    let m = Mllm::new(cfg.clone()).unwrap();
    let s = random_sample(&cfg, 3, vec![11, EOS]);
    let mut swapped = s.pixels.clone();
    let (a, b) = (5usize, 42usize);
    let p = cfg.patch;
    for dy in 0..p {
        for dx in 0..p {
            let (ya, xa) = ((a / 8) * p + dy, (a % 8) * p + dx);
            let (yb, xb) = ((b / 8) * p + dy, (b % 8) * p + dx);
            swapped.set(ya, xa, s.pixels.get(yb, xb));
            swapped.set(yb, xb, s.pixels.get(ya, xa));
        }
    }
    let w_v = m.store.value(m.ids.w_v);
    let z1 = crate::numerics::matmul(&patchify(&s.pixels, p).unwrap(), w_v).unwrap();
    let z2 = crate::numerics::matmul(&patchify(&swapped, p).unwrap(), w_v).unwrap();
    let full = m
        .encode_image(&s.pixels)
        .unwrap()
        .sub(m.pos_code())
        .unwrap();
    assert!(full.max_abs_diff(&z1) < 1e-12);
    assert_eq!(z1.row(a), z2.row(b));
    assert_eq!(z1.row(b), z2.row(a));
    assert_eq!(z1.row(0), z2.row(0));
}

#[test]
fn encoding_is_deterministic_and_checks_shape() {
    let cfg = MllmConfig::default();
    let s = random_sample(&cfg, 9, vec![11, EOS]);
    let a = Mllm::new(cfg.clone())
        .unwrap()
        .encode_image(&s.pixels)
        .unwrap();
    let b = Mllm::new(cfg).unwrap().encode_image(&s.pixels).unwrap();
    assert_eq!(a, b);
    assert!(patchify(&Tensor::zeros(&[30, 30]), 4).is_err());
}

#[test]
fn projector_with_zero_weights_outputs_bias() {
    let cfg = MllmConfig::default();
    let mut m = Mllm::new(cfg.clone()).unwrap();
    m.store
        .get_mut(m.ids.proj_w)
        .value_mut()
        .data_mut()
        .fill(0.0);
    let bias: Vec<f64> = (0..cfg.d_l).map(|i| i as f64 * 0.1).collect();
    m.store
        .get_mut(m.ids.proj_b)
        .value_mut()
        .data_mut()
        .copy_from_slice(&bias);
    let s = random_sample(&cfg, 1, vec![11, EOS]);
    let t = m.forward(s.sample()).unwrap();
    assert_eq!(t.hv0.shape(), &[64, 64]);
    for i in 0..64 {
        assert_eq!(t.hv0.row(i), &bias[..]);
    }
}

#[test]
fn trace_layout() {
    let cfg = MllmConfig::default();
    let m = Mllm::new(cfg.clone()).unwrap();
    let s = random_sample(&cfg, 2, vec![11, 12, EOS]);
    let t = m.forward(s.sample()).unwrap();
    assert_eq!(t.hidden.len(), cfg.layers + 1);
    assert_eq!(t.visual(0), t.hv0);
    for l in 0..=cfg.layers {
        assert_eq!(t.visual(l).rows(), 64);
    }
    assert_eq!(t.logits.shape(), &[3, cfg.vocab]);
}

#[test]
fn single_layer_changes_the_stream() {
    let cfg = MllmConfig {
        layers: 1,
        target_layer: Some(1),
        ..MllmConfig::default()
    };
    let m = Mllm::new(cfg.clone()).unwrap();
    let s = random_sample(&cfg, 4, vec![11, EOS]);
    let t = m.forward(s.sample()).unwrap();
    assert_ne!(t.hidden[1], t.hidden[0]);
}

#[test]
fn perturbing_last_token_leaves_earlier_positions_unchanged() {
    let cfg = MllmConfig::default();
    let m = perturbed(cfg.clone(), 1);
    let a = random_sample(&cfg, 5, vec![11, 12, 13, EOS]);
    let mut b = random_sample(&cfg, 5, vec![11, 12, 13, EOS]);
    b.answer[2] = 19; // last decoder input
    let (ta, tb) = (
        m.forward(a.sample()).unwrap(),
        m.forward(b.sample()).unwrap(),
    );
    let n = ta.hidden[0].rows();
    for l in 0..=cfg.layers {
        assert_eq!(
            ta.hidden[l].slice_rows(0, n - 1),
            tb.hidden[l].slice_rows(0, n - 1)
        );
        assert_ne!(ta.hidden[l].row(n - 1), tb.hidden[l].row(n - 1));
    }
}

#[test]
fn overlong_answer_is_rejected() {
    let cfg = MllmConfig::default();
    let m = Mllm::new(cfg.clone()).unwrap();
    let s = random_sample(&cfg, 5, vec![11; 13]);
    assert!(m.forward(s.sample()).is_err());
    let s = random_sample(&cfg, 5, vec![vocab::IGNORE; 3]);
    assert!(m.forward(s.sample()).is_err());
}

fn trace_with_logits(logits: Tensor, targets: Vec<usize>) -> ForwardTrace {
    ForwardTrace {
        z: Tensor::zeros(&[1, 1]),
        hv0: Tensor::zeros(&[1, 1]),
        hidden: vec![],
        logits,
        visual_start: 0,
        n_visual: 0,
        targets,
    }
}

#[test]
fn lm_loss_reference_values() {
    let t = trace_with_logits(Tensor::zeros(&[3, 64]), vec![1, 5, 9]);
    assert!((lm_loss(&t).unwrap() - 64f64.ln()).abs() < 1e-12);

    let mut l = Tensor::zeros(&[2, 64]);
    l.set(0, 7, 20.0);
    l.set(1, 3, 20.0);
    assert!(lm_loss(&trace_with_logits(l, vec![7, 3])).unwrap() < 1e-6);

    let mut rng = RngStream::new(8);
    let l = Tensor::from_fn(4, 64, |_, _| 3.0 * rng.normal());
    let targets = vec![0, 17, 63, 17];
    let mut oracle = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let z: f64 = l.row(i).iter().map(|v| v.exp()).sum();
        oracle -= (l.get(i, t).exp() / z).ln();
    }
    oracle /= 4.0;
    let got = lm_loss(&trace_with_logits(l, targets)).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    assert!(lm_loss(&trace_with_logits(Tensor::zeros(&[1, 64]), vec![])).is_err());
}

#[test]
fn predictive_loss_reference_values() {
    let mut rng = RngStream::new(2);
    let h = Tensor::from_fn(6, 5, |_, _| rng.normal());
    let mut tape = Tape::new();
    let a = tape.constant(h.clone());
    let b = tape.constant(h);
    let l = predictive_loss(&mut tape, a, b).unwrap();
    assert!((tape.value(l).item() + 1.0).abs() < 1e-15);

    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]));
    let z = tape.constant(Tensor::from_rows(&[vec![0.0, 3.0], vec![-1.0, 0.0]]));
    let l = predictive_loss(&mut tape, p, z).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

#[test]
fn pre_loss_matches_per_patch_loop() {
    for anchor in [AnchorSource::PreLlm, AnchorSource::PreProj] {
        let cfg = MllmConfig {
            anchor,
            ..tiny_config()
        };
        let m = perturbed(cfg.clone(), 3);
        let s = random_sample(&cfg, 6, vec![11, EOS]);
        let t = m.forward(s.sample()).unwrap();
        let got = pre_loss(&m, &t).unwrap();

        let x = t.visual(cfg.target_layer());
        let anchor_t = match anchor {
            AnchorSource::PreLlm => &t.hv0,
            AnchorSource::PreProj => &t.z,
        };
        let (w1, b1) = (m.store.value(m.ids.pred_w1), m.store.value(m.ids.pred_b1));
        let (w2, b2) = (m.store.value(m.ids.pred_w2), m.store.value(m.ids.pred_b2));
        let mut total = 0.0;
        for i in 0..x.rows() {
            let hidden: Vec<f64> = (0..w1.cols())
                .map(|j| {
                    gelu(
                        (0..x.cols())
                            .map(|k| x.get(i, k) * w1.get(k, j))
                            .sum::<f64>()
                            + b1.data()[j],
                    )
                })
                .collect();
            let out: Vec<f64> = (0..w2.cols())
                .map(|j| {
                    (0..hidden.len())
                        .map(|k| hidden[k] * w2.get(k, j))
                        .sum::<f64>()
                        + b2.data()[j]
                })
                .collect();
            total += cosine_slices(&out, anchor_t.row(i));
        }
        let oracle = -total / x.rows() as f64;
        assert!((got - oracle).abs() < 1e-12, "{anchor}: {got} vs {oracle}");
        assert!((-1.0..=1.0).contains(&got));
    }
}

#[test]
fn pre_loss_ignores_anchor_scale() {
    let cfg = tiny_config();
    let m = perturbed(cfg.clone(), 4);
    let s = random_sample(&cfg, 7, vec![11, EOS]);
    let mut t = m.forward(s.sample()).unwrap();
    let base = pre_loss(&m, &t).unwrap();
    let mut rng = RngStream::new(1);
    for i in 0..t.hv0.rows() {
        let a = 0.01 + 100.0 * rng.uniform();
        for v in t.hv0.row_mut(i) {
            *v *= a;
        }
    }
    assert!((pre_loss(&m, &t).unwrap() - base).abs() < 1e-12);
}

#[test]
fn total_loss_combination() {
    assert_eq!(combine_losses(2.0, -0.8, 0.5), 1.6);
    assert_eq!(combine_losses(2.0, -0.8, 0.0).to_bits(), 2f64.to_bits());

    let cfg = MllmConfig {
        lambda: 0.0,
        ..tiny_config()
    };
    let m = perturbed(cfg.clone(), 5);
    let s = random_sample(&cfg, 8, vec![11, EOS]);
    let mut tape = Tape::new();
    let fwd = m.forward_on_tape(&mut tape, s.sample()).unwrap();
    let nodes_before = tape.len();
    let l = total_loss_on_tape(&m, &mut tape, &fwd).unwrap();
    assert!(l.pre.is_none());
    assert_eq!(l.total, l.lm);
    // only the cross-entropy node was added
    assert_eq!(tape.len(), nodes_before + 1);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    for anchor in [AnchorSource::PreLlm, AnchorSource::PreProj] {
        let cfg = MllmConfig {
            anchor,
            ..tiny_config()
        };
        let mut m = perturbed(cfg.clone(), 6);
        let s = random_sample(&cfg, 9, vec![11, 12, EOS]);
        let g = m.example_gradients(s.sample()).unwrap();
        assert!(g.pre.is_some());
        m.store.zero_grads();
        for (id, t) in &g.grads {
            m.store.accumulate_grad(*id, t).unwrap();
        }
        let mut store = m.store.clone();
        let fixed = anchor_of(&m, &m.forward(s.sample()).unwrap());
        let eval = |st: &crate::autodiff::ParamStore| {
            let mut mm = m.clone();
            mm.store = st.clone();
            objective_with_fixed_anchor(&mm, s.sample(), &fixed)
        };
        let r = finite_diff_check(&mut store, eval, &FdOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{anchor}: {r:?}");
        assert!(r.tensors_checked > 20);
    }
}

#[test]
fn cached_gradient_check_matches_full_replay() {
    let cfg = tiny_config();
    let m = perturbed(cfg.clone(), 6);
    let s = random_sample(&cfg, 9, vec![11, 12, EOS]);
    let fixed = anchor_of(&m, &m.forward(s.sample()).unwrap());
    let mut full = m.clone();
    let g = full.example_gradients(s.sample()).unwrap();
    for (id, t) in &g.grads {
        full.store.accumulate_grad(*id, t).unwrap();
    }
    let reference = finite_diff_check(
        &mut full.store.clone(),
        |st| {
            let mut mm = m.clone();
            mm.store = st.clone();
            objective_with_fixed_anchor(&mm, s.sample(), &fixed)
        },
        &FdOptions::default(),
    )
    .unwrap();
    let cached = check_objective_gradients(&m, s.sample(), &FdOptions::default()).unwrap();
    assert_eq!(reference.samples.len(), cached.samples.len());
    for (a, b) in reference.samples.iter().zip(&cached.samples) {
        assert_eq!(a.numeric.to_bits(), b.numeric.to_bits());
        assert_eq!(a.analytic.to_bits(), b.analytic.to_bits());
    }
}

#[test]
fn resumed_forward_is_bitwise_identical() {
    let cfg = tiny_config();
    let m = perturbed(cfg.clone(), 3);
    let s = random_sample(&cfg, 4, vec![11, 12, 13, EOS]);
    let full = m.forward(s.sample()).unwrap();
    for start in 0..=cfg.layers {
        let mut tape = Tape::new();
        let f = m.forward_from_layer(&mut tape, &full, start).unwrap();
        assert_eq!(tape.value(f.logits), &full.logits, "start {start}");
        for (l, h) in f.hidden.iter().enumerate() {
            assert_eq!(tape.value(*h), &full.hidden[l]);
        }
    }
    let mut tape = Tape::new();
    assert!(m
        .forward_from_layer(&mut tape, &full, cfg.layers + 1)
        .is_err());
}

#[test]
fn dependent_layer_lookup() {
    let m = Mllm::new(tiny_config()).unwrap();
    assert_eq!(m.first_dependent_layer(m.ids.proj_w), None);
    assert_eq!(m.first_dependent_layer(m.ids.tok_emb), None);
    assert_eq!(m.first_dependent_layer(m.ids.layers[1].w_o), Some(1));
    assert_eq!(m.first_dependent_layer(m.ids.head_b), Some(2));
    assert_eq!(m.first_dependent_layer(m.ids.pred_w2), Some(2));
}

#[test]
fn lr_zero_step_leaves_parameters_unchanged() {
    let cfg = tiny_config();
    let m = perturbed(cfg.clone(), 7);
    let before = m.store.clone();
    let train = TrainConfig {
        optim: AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        },
        grad_clip: Some(1.0),
    };
    let mut tr = Trainer::new(m, train, Exec::Sequential);
    let s = random_sample(&cfg, 10, vec![11, EOS]);
    let r = tr.step(&[s.sample(), s.sample()]).unwrap();
    assert!(r.grad_norm > 0.0);
    for ((_, a), (_, b)) in before.iter().zip(tr.model.store.iter()) {
        assert!(a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn fixed_batch(cfg: &MllmConfig) -> Vec<Owned> {
    (0..4)
        .map(|i| random_sample(cfg, 100 + i, vec![vocab::class_token(1 + i as u16), EOS]))
        .collect()
}

fn run(cfg: MllmConfig, steps: usize, exec: Exec) -> (Vec<f64>, Mllm) {
    let batch = fixed_batch(&cfg);
    let samples: Vec<Sample<'_>> = batch.iter().map(Owned::sample).collect();
    let train = TrainConfig {
        optim: AdamWConfig {
            lr: 1e-3,
            total_steps: steps,
            ..AdamWConfig::default()
        },
        grad_clip: Some(1.0),
    };
    let mut tr = Trainer::new(Mllm::new(cfg).unwrap(), train, exec);
    let lm = (0..steps).map(|_| tr.step(&samples).unwrap().lm).collect();
    (lm, tr.model)
}

#[test]
fn fixed_batch_loss_decreases_after_step_ten() {
    let (lm, _) = run(tiny_config(), 50, Exec::Sequential);
    for w in lm[10..].windows(2) {
        assert!(w[1] < w[0], "{lm:?}");
    }
}

#[test]
fn zero_weight_matches_baseline_and_freezes_encoder() {
    let base = MllmConfig {
        lambda: 0.0,
        ..tiny_config()
    };
    let pre_cfg = MllmConfig {
        lambda: 0.0,
        anchor: AnchorSource::PreProj,
        target_layer: Some(2),
        ..tiny_config()
    };
    let (a, ma) = run(base, 20, Exec::Sequential);
    let (b, _) = run(pre_cfg, 20, Exec::Parallel);
    assert_eq!(a, b);
    let fresh = Mllm::new(tiny_config()).unwrap();
    assert_eq!(ma.store.value(ma.ids.w_v), fresh.store.value(fresh.ids.w_v));
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let (a, ma) = run(tiny_config(), 5, Exec::Sequential);
    let (b, mb) = run(tiny_config(), 5, Exec::Parallel);
    assert_eq!(a, b);
    for ((_, x), (_, y)) in ma.store.iter().zip(mb.store.iter()) {
        assert_eq!(x.value(), y.value());
    }
}

#[test]
fn anchor_branch_contributes_no_gradient() {
    let cfg = tiny_config();
    let m = perturbed(cfg.clone(), 11);
    let s = random_sample(&cfg, 12, vec![11, EOS]);

    // Pre-loss only, with the anchor detached versus a constant copy.
    let grads_with = |constant_anchor: bool| {
        let mut tape = Tape::new();
        let f = m.forward_on_tape(&mut tape, s.sample()).unwrap();
        let vis = tape
            .slice_rows(f.hidden[1], f.visual_start, f.n_visual)
            .unwrap();
        let pred = m.predict_on_tape(&mut tape, vis).unwrap();
        let anchor = if constant_anchor {
            tape.constant(tape.value(f.hv0).clone())
        } else {
            f.hv0
        };
        let l = predictive_loss(&mut tape, pred, anchor).unwrap();
        let g = tape.backward(l).unwrap();
        tape.param_grads(&g)
    };
    let a = grads_with(false);
    let b = grads_with(true);
    assert_eq!(a.len(), b.len());
    for ((ia, ga), (ib, gb)) in a.iter().zip(&b) {
        assert_eq!(ia, ib);
        assert!(ga
            .data()
            .iter()
            .zip(gb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let proj = a.iter().find(|(id, _)| *id == m.ids.proj_w).unwrap();
    assert!(proj.1.norm_sq() > 0.0);
}

#[test]
fn epoch_sampler_covers_every_index_once_per_epoch() {
    let mut s = EpochSampler::new(10, RngStream::new(3));
    let mut seen = s.next_batch(4);
    seen.extend(s.next_batch(6));
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}
