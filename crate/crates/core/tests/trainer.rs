use maos_core::autodiff::Tape;
use maos_core::data::synth::synth_corpus;
use maos_core::data::OneShotDataset;
use maos_core::model::DiscriminatorKind;
use maos_core::trainer::{
    adam_update, load_checkpoint, save_checkpoint, telemetry_row, train_loop, AdamConfig, Checkpoint, LoopOutput, NetId, StepControls, Trainer,
    TrainingConfig, FINAL_CHECKPOINT, TELEMETRY_FILE,
};
use maos_core::{Error, Tensor};

fn small_cfg() -> TrainingConfig {
    TrainingConfig { g_base_width: 4, g_res_blocks: 1, d_base_width: 8, n_threads: 2, iterations: 20, seed: 5, ..Default::default() }
}

fn corpus(n: usize, seed: u64) -> OneShotDataset<f64> {
    synth_corpus::<f64>(n, 32, seed).unwrap().dataset
}

fn params_of(tr: &Trainer<f64>, net: NetId) -> Vec<Vec<f64>> {
    tr.store(net).iter().map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn zero_alpha_gives_target_side_discriminators_no_gradient() {
    let ds = corpus(4, 1);
    let mut tr = Trainer::<f64>::new(TrainingConfig { alpha: 0.0, ..small_cfg() }, 4).unwrap();
    let before_g = params_of(&tr, NetId::D(DiscriminatorKind::Global));
    let r = tr.train_step(&ds).unwrap();
    assert!(r.grad_norm_d_global < 1e-12 && r.grad_norm_d_part < 1e-12);
    assert!(r.grad_norm_d_source > 1e-6);
    assert_eq!(params_of(&tr, NetId::D(DiscriminatorKind::Global)), before_g);
}

#[test]
fn report_has_one_loss_per_thread() {
    let ds = corpus(4, 1);
    let cfg = TrainingConfig { n_threads: 4, ..small_cfg() };
    let mut tr = Trainer::<f64>::new(cfg, 4).unwrap();
    let r = tr.train_step(&ds).unwrap();
    for kind in [DiscriminatorKind::Global, DiscriminatorKind::Part, DiscriminatorKind::Source] {
        assert_eq!(r.per_thread_d_losses(kind).len(), 4);
    }
    let distinct = r.per_thread_d_global.windows(2).any(|w| w[0] != w[1]);
    assert!(distinct, "threads are independently initialised");
}

#[test]
fn zeroing_one_thread_leaves_other_threads_updates_unchanged() {
    let ds = corpus(4, 2);
    let cfg = TrainingConfig { n_threads: 3, d_base_width: 9, ..small_cfg() };
    let mut plain = Trainer::<f64>::new(cfg.clone(), 4).unwrap();
    let mut muted = Trainer::<f64>::new(cfg, 4).unwrap();
    plain.train_step(&ds).unwrap();
    let controls = StepControls { zero_threads: vec![(DiscriminatorKind::Global, 1)], ..Default::default() };
    muted.train_step_with(&ds, &controls).unwrap();
    let net = &plain.nets.d_global;
    let mut thread1_differs = false;
    for (name, t) in net.params.iter() {
        let id = net.params.id(name).unwrap();
        let other = muted.nets.d_global.params.by_name(name).unwrap();
        for thread in 0..3 {
            let r = net.thread_range(id, thread);
            if thread == 1 {
                thread1_differs |= t.data()[r.clone()] != other.data()[r];
            } else {
                assert_eq!(t.data()[r.clone()], other.data()[r], "{name} thread {thread}");
            }
        }
    }
    assert!(thread1_differs);
    // other discriminators are untouched by the control
    assert_eq!(params_of(&plain, NetId::D(DiscriminatorKind::Part)), params_of(&muted, NetId::D(DiscriminatorKind::Part)));
}

#[test]
fn alpha_scales_target_side_gradients_linearly_at_step_one() {
    let ds = corpus(4, 3);
    let mut a = Trainer::<f64>::new(TrainingConfig { alpha: 0.1, ..small_cfg() }, 4).unwrap();
    let mut b = Trainer::<f64>::new(TrainingConfig { alpha: 1.0, ..small_cfg() }, 4).unwrap();
    let (da, db) = (params_of(&a, NetId::D(DiscriminatorKind::Global)), params_of(&b, NetId::D(DiscriminatorKind::Global)));
    assert_eq!(da, db);
    let ra = a.train_step(&ds).unwrap();
    let rb = b.train_step(&ds).unwrap();
    for (x, y) in [(ra.grad_norm_d_global, rb.grad_norm_d_global), (ra.grad_norm_d_part, rb.grad_norm_d_part)] {
        assert!((x / y - 0.1).abs() < 1e-9, "ratio {}", x / y);
    }
    assert_eq!(ra.grad_norm_d_source, rb.grad_norm_d_source);
    // Adam's first step is lr * sign(g) up to eps, so the update directions agree
    let after_a = params_of(&a, NetId::D(DiscriminatorKind::Global));
    let after_b = params_of(&b, NetId::D(DiscriminatorKind::Global));
    for ((t0, ta), tb) in da.iter().zip(&after_a).zip(&after_b) {
        for ((p0, pa), pb) in t0.iter().zip(ta).zip(tb) {
            // entries whose gradient is rounding noise below eps carry no sign
            if (pb - p0).abs() > 0.5 * small_cfg().lr {
                assert_eq!((pa - p0).signum(), (pb - p0).signum());
            }
        }
    }
}

#[test]
fn generator_step_does_not_touch_discriminators() {
    let ds = corpus(4, 4);
    let mut a = Trainer::<f64>::new(small_cfg(), 4).unwrap();
    let mut b = Trainer::<f64>::new(TrainingConfig { cycle_weight: 123.0, ..small_cfg() }, 4).unwrap();
    a.train_step(&ds).unwrap();
    b.train_step(&ds).unwrap();
    for kind in [DiscriminatorKind::Global, DiscriminatorKind::Part, DiscriminatorKind::Source] {
        assert_eq!(params_of(&a, NetId::D(kind)), params_of(&b, NetId::D(kind)));
    }
    assert_ne!(params_of(&a, NetId::F), params_of(&b, NetId::F));
}

#[test]
fn discriminator_step_does_not_touch_generators() {
    let ds = corpus(4, 4);
    let mut tr = Trainer::<f64>::new(small_cfg(), 4).unwrap();
    let (f0, g0) = (params_of(&tr, NetId::F), params_of(&tr, NetId::G));
    let d0 = params_of(&tr, NetId::D(DiscriminatorKind::Source));
    tr.train_step_with(&ds, &StepControls { skip_generator_update: true, ..Default::default() }).unwrap();
    assert_eq!(params_of(&tr, NetId::F), f0);
    assert_eq!(params_of(&tr, NetId::G), g0);
    assert_ne!(params_of(&tr, NetId::D(DiscriminatorKind::Source)), d0);
}

/// Independent single-thread step: explicit sigmoid/log losses on one tape
/// per phase and a plain Adam loop.
fn reference_step(tr: &Trainer<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = &tr.cfg;
    let adam = AdamConfig { lr: cfg.lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
    let mut nets = tr.nets.clone();
    let mut gt = Tape::<f64>::new();
    let bf = nets.f.params.bind(&mut gt, true);
    let bg = nets.g.params.bind(&mut gt, true);
    let xv = gt.constant(x.clone());
    let yv = gt.constant(y.clone());
    let fx = nets.f.forward(&mut gt, &bf, xv).unwrap();
    let gfx = nets.g.forward(&mut gt, &bg, fx).unwrap();
    let gy = nets.g.forward(&mut gt, &bg, yv).unwrap();
    let fgy = nets.f.forward(&mut gt, &bf, gy).unwrap();

    let log_sig = |t: &mut Tape<f64>, z, flip: bool| {
        let z = if flip { t.neg(z).unwrap() } else { z };
        let p = t.sigmoid(z).unwrap();
        let p = t.clamp_min(p, 1e-12).unwrap();
        let l = t.log(p).unwrap();
        t.mean(l).unwrap()
    };
    let mut new_d = Vec::new();
    for (kind, real, fake) in [
        (DiscriminatorKind::Global, y.clone(), gt.value(fx).clone()),
        (DiscriminatorKind::Part, y.clone(), gt.value(fx).clone()),
        (DiscriminatorKind::Source, x.clone(), gt.value(gy).clone()),
    ] {
        let net = nets.discriminator_mut(kind);
        let mut dt = Tape::<f64>::new();
        let bd = net.params.bind(&mut dt, true);
        let r = dt.constant(real);
        let f = dt.constant(fake);
        let sr = net.forward_threads(&mut dt, &bd, r).unwrap()[0];
        let sf = net.forward_threads(&mut dt, &bd, f).unwrap()[0];
        // log(1 - s(z)) == log s(-z)
        let a = log_sig(&mut dt, sr, false);
        let b = log_sig(&mut dt, sf, true);
        let s = dt.add(a, b).unwrap();
        let loss = dt.neg(s).unwrap();
        let grads = dt.backward(loss).unwrap();
        for (i, (_, t)) in net.params.iter_mut().enumerate() {
            let g = grads.get(bd.vars()[i]).unwrap().to_vec();
            let (mut m, mut v) = (vec![0.0; g.len()], vec![0.0; g.len()]);
            adam_update(t.data_mut(), &g, &mut m, &mut v, 1, &adam).unwrap();
        }
        new_d.extend(net.params.iter().map(|(_, t)| t.data().to_vec()));
    }

    let mut adv = Vec::new();
    for (kind, fake) in [(DiscriminatorKind::Global, fx), (DiscriminatorKind::Part, fx), (DiscriminatorKind::Source, gy)] {
        let net = nets.discriminator(kind);
        let bd = net.params.bind(&mut gt, false);
        let s = net.forward_threads(&mut gt, &bd, fake).unwrap()[0];
        let l = log_sig(&mut gt, s, false);
        adv.push(gt.neg(l).unwrap());
    }
    let mut cyc = Vec::new();
    for (orig, rec) in [(xv, gfx), (yv, fgy)] {
        let d = gt.sub(rec, orig).unwrap();
        let d = gt.abs(d).unwrap();
        cyc.push(gt.mean(d).unwrap());
    }
    let c = gt.add(cyc[0], cyc[1]).unwrap();
    let c = gt.scale(c, cfg.cycle_weight).unwrap();
    let total = gt.add_all(&[adv[0], adv[1], adv[2], c]).unwrap();
    let grads = gt.backward(total).unwrap();
    let mut new_g = Vec::new();
    for (store, bound) in [(&mut nets.f.params, &bf), (&mut nets.g.params, &bg)] {
        for (i, (_, t)) in store.iter_mut().enumerate() {
            let g = grads.get(bound.vars()[i]).unwrap().to_vec();
            let (mut m, mut v) = (vec![0.0; g.len()], vec![0.0; g.len()]);
            adam_update(t.data_mut(), &g, &mut m, &mut v, 1, &adam).unwrap();
        }
        new_g.extend(store.iter().map(|(_, t)| t.data().to_vec()));
    }
    (new_d, new_g)
}

#[test]
fn single_thread_full_crop_unit_alpha_matches_reference_step() {
    let cfg = TrainingConfig { n_threads: 1, part_size: 32, alpha: 1.0, d_base_width: 4, d_part_depth: 4, ..small_cfg() };
    let mut tr = Trainer::<f64>::new(cfg, 4).unwrap();
    let ds = corpus(4, 6);
    let x = Tensor::stack(&[ds.source_images[0].pixels.clone(), ds.source_images[1].pixels.clone()]).unwrap();
    let y = Tensor::stack(&[ds.target_image.pixels.clone(), ds.target_image.pixels.clone()]).unwrap();
    let (want_d, want_g) = reference_step(&tr, &x, &y);
    tr.step_on_batch(x, y, &StepControls::default()).unwrap();
    let got_d: Vec<Vec<f64>> = [DiscriminatorKind::Global, DiscriminatorKind::Part, DiscriminatorKind::Source]
        .iter()
        .flat_map(|&k| params_of(&tr, NetId::D(k)))
        .collect();
    let got_g: Vec<Vec<f64>> = [NetId::F, NetId::G].iter().flat_map(|&n| params_of(&tr, n)).collect();
    for (got, want) in [(got_d, want_d), (got_g, want_g)] {
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            // biases feeding instance norm have zero gradient up to rounding,
            // which Adam's first step scales by lr / eps
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn equal_seeds_give_identical_telemetry() {
    let ds = corpus(6, 7);
    let cfg = TrainingConfig { iterations: 50, ..small_cfg() };
    let rows = |_| train_loop(&ds, &cfg, &LoopOutput::default()).unwrap().telemetry.iter().map(telemetry_row).collect::<Vec<_>>();
    let (a, b) = (rows(0), rows(1));
    assert_eq!(a.len(), 50);
    assert_eq!(a, b);
}

#[test]
fn zero_iterations_yield_initial_checkpoint_and_no_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(4, 8);
    let cfg = TrainingConfig { iterations: 0, ..small_cfg() };
    let out = train_loop(&ds, &cfg, &LoopOutput { dir: Some(dir.path().to_path_buf()) }).unwrap();
    assert!(out.telemetry.is_empty());
    let text = std::fs::read_to_string(dir.path().join(TELEMETRY_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1);
    let ckpt = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.meta.iteration, 0);
    let fresh = Trainer::<f64>::new(cfg, 4).unwrap();
    assert_eq!(ckpt, Checkpoint::from_trainer(&fresh).unwrap());
}

#[test]
fn resumed_run_continues_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(5, 9);
    let full = train_loop(&ds, &small_cfg(), &LoopOutput::default()).unwrap();
    let half = train_loop(&ds, &TrainingConfig { iterations: 10, ..small_cfg() }, &LoopOutput::default()).unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&Checkpoint::from_trainer(&half.trainer).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    let mut resumed = loaded.into_trainer::<f64>().unwrap();
    resumed.cfg.iterations = 20;
    let rest: Vec<String> = (0..10).map(|_| telemetry_row(&resumed.train_step(&ds).unwrap())).collect();
    let want: Vec<String> = full.telemetry[10..].iter().map(telemetry_row).collect();
    assert_eq!(rest, want);
}

#[test]
fn checkpoint_errors_are_specific() {
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::<f64>::new(small_cfg(), 4).unwrap();
    let ckpt = Checkpoint::from_trainer(&tr).unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    let p = dir.path().join("c.ckpt");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Corrupt { .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Version { found: 9, expected: 1 })));

    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Truncated(_))));
    std::fs::write(&p, &bytes[..3]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Truncated(_))));

    let mut missing = ckpt.clone();
    let name = missing.tensors.remove(3).name;
    match missing.into_trainer::<f64>() {
        Err(Error::MissingKey(k)) => assert_eq!(k, name),
        other => panic!("expected missing key, got {other:?}"),
    }
}

#[test]
fn compact_export_is_f32_and_translates_closely() {
    let tr = Trainer::<f64>::new(small_cfg(), 4).unwrap();
    let ckpt = Checkpoint::from_trainer(&tr).unwrap();
    let small = ckpt.compact();
    assert!(small.to_bytes().unwrap().len() < ckpt.to_bytes().unwrap().len() * 6 / 10);
    let f32_net = small.generator::<f32>(NetId::F).unwrap();
    let ds = corpus(4, 1);
    let x = Tensor::stack(&[ds.source_images[0].pixels.clone()]).unwrap();
    let a = tr.nets.f.translate(&x).unwrap();
    let b = f32_net.translate(&x.cast::<f32>()).unwrap().cast::<f64>();
    assert!(a.max_abs_diff(&b) < 1e-4);
}

#[test]
fn non_finite_loss_names_the_term() {
    let ds = corpus(4, 1);
    let mut tr = Trainer::<f64>::new(small_cfg(), 4).unwrap();
    let name = tr.nets.d_source.params.iter().next().unwrap().0.to_string();
    let n = tr.nets.d_source.params.by_name(&name).unwrap().numel();
    tr.nets.d_source.params.set_data(&name, vec![f64::NAN; n]).unwrap();
    match tr.train_step(&ds) {
        Err(Error::NonFinite { term, iteration }) => {
            assert!(term.starts_with("d_source"), "{term}");
            assert_eq!(iteration, 1);
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn mismatched_image_size_is_rejected() {
    let ds = corpus(4, 1);
    let mut tr = Trainer::<f64>::new(TrainingConfig { image_size: 64, part_size: 32, ..small_cfg() }, 4).unwrap();
    assert!(tr.train_step(&ds).is_err());
}
