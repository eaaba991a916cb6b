use super::*;
use proptest::prelude::*;
use rand::Rng;

fn randomize(model: &mut Backbone<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.tensors_mut() {
        for v in t.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
    }
}

fn latent(frames: usize, seed: u64) -> LatentSequence<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentSequence::new(Matrix::from_fn(frames, LATENT_CHANNELS, |_, _| StandardNormal.sample(&mut rng))).unwrap()
}

fn reference(seed: u64) -> ReferenceEmbedding<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..EMBEDDING_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    ReferenceEmbedding::from_unnormalized(v, Provenance::Audio).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn presets_validate() {
    for name in ["full", "toy", "tiny"] {
        BackboneConfig::preset(name).unwrap().validate().unwrap();
    }
    assert_eq!(BackboneConfig::toy().depth, 4);
    assert_eq!(BackboneConfig::toy().width, 192);
    assert!(BackboneConfig::preset("huge").is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let odd_depth = BackboneConfig { depth: 3, ..BackboneConfig::tiny() };
    assert!(matches!(odd_depth.validate(), Err(Error::Configuration(_))));
    let indivisible = BackboneConfig { heads: 3, ..BackboneConfig::tiny() };
    assert!(matches!(indivisible.validate(), Err(Error::Configuration(_))));
    let odd_head = BackboneConfig { width: 30, heads: 2, ..BackboneConfig::tiny() };
    assert!(matches!(odd_head.validate(), Err(Error::Configuration(_))));
    assert!(Backbone::<f64>::new(odd_depth, 0).is_err());
}

#[test]
fn full_parameter_count_is_stable() {
    let (w, c, e, f, d) = (768usize, 128usize, 512usize, 256usize, 12usize);
    let lin = |i: usize, o: usize| i * o + o;
    let block = lin(w, 6 * w) + lin(w, 3 * w) + lin(w, w) + lin(w, 4 * w) + lin(4 * w, w);
    let expected = lin(2 * c, w)
        + lin(f, w)
        + lin(w, w)
        + lin(e, w)
        + e
        + d * block
        + d / 2 * lin(2 * w, w)
        + lin(w, 2 * w)
        + lin(w, c);
    let model = Backbone::<f32>::new(BackboneConfig::full(), 0).unwrap();
    assert_eq!(model.param_count(), expected);
    assert_eq!(model.param_count(), 137_282_176);
}

#[test]
fn tensor_names_are_unique_and_shapes_match() {
    let model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    let info = model.tensor_info();
    let names: std::collections::BTreeSet<_> = info.iter().map(|i| i.name.clone()).collect();
    assert_eq!(names.len(), info.len());
    for (i, (name, data)) in info.iter().zip(model.tensors()) {
        assert_eq!(i.name, name);
        assert_eq!(i.shape.iter().product::<usize>(), data.len());
    }
    assert!(names.contains("blocks.1.skip.weight"));
    assert!(!names.contains("blocks.0.skip.weight"));
}

#[test]
fn seeded_init_is_deterministic() {
    let a = Backbone::<f64>::new(BackboneConfig::tiny(), 7).unwrap();
    let b = Backbone::<f64>::new(BackboneConfig::tiny(), 7).unwrap();
    let c = Backbone::<f64>::new(BackboneConfig::tiny(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn time_embedding_properties() {
    let model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    assert_eq!(model.time_embedding(1).unwrap(), model.time_embedding(1).unwrap());
    assert_ne!(model.time_embedding(1).unwrap(), model.time_embedding(2).unwrap());
    assert_eq!(model.time_embedding(5).unwrap().len(), 32);
    assert!(model.time_embedding(0).is_err());
}

#[test]
fn sinusoid_neighbours_are_closer_than_distant_steps() {
    // Direct evaluation of cos(t f_i) and sin(t f_i).
    let oracle = |t: f64| -> Vec<f64> {
        let mut v = vec![0.0; 256];
        for i in 0..128 {
            let f = 10_000f64.powf(-(i as f64) / 128.0);
            v[i] = (t * f).cos();
            v[128 + i] = (t * f).sin();
        }
        v
    };
    for t in [1usize, 10, 100, 400] {
        let a = sinusoidal_embedding(t as f64, 256);
        for (x, y) in a.iter().zip(oracle(t as f64)) {
            assert!((x - y).abs() < 1e-12);
        }
        let near = cosine(&a, &sinusoidal_embedding((t + 1) as f64, 256));
        let far = cosine(&a, &sinusoidal_embedding((t + 500) as f64, 256));
        assert!(near > far, "t={t}: {near} vs {far}");
    }
}

#[test]
fn fuse_condition_is_additive_and_linear() {
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 1).unwrap();
    let temb = model.time_embedding(3).unwrap();
    let a = reference(1).data().to_vec();
    let b = reference(2).data().to_vec();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let zero = vec![0.0; EMBEDDING_DIM];
    model.ref_proj.bias.iter_mut().for_each(|v| *v = 0.3);
    let f = |r: &[f64]| model.fuse_condition(&temb, r).unwrap().data().to_vec();
    let (fab, fa, fb, f0) = (f(&ab), f(&a), f(&b), f(&zero));
    for i in 0..32 {
        assert!((fab[i] - fa[i] - fb[i] + f0[i]).abs() < 1e-12);
    }
    assert_ne!(fa, fb);

    let mut zeroed = model.clone();
    zeroed.ref_proj = Linear::zeros(EMBEDDING_DIM, 32);
    assert_eq!(zeroed.fuse_condition(&temb, &a).unwrap().data(), temb.as_slice());
    assert!(matches!(model.fuse_condition(&temb, &a[..10]), Err(Error::Parameter(_))));
}

#[test]
fn skip_merge_selectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = 6;
    let shallow = Matrix::from_fn(4, w, |_, _| rng.random::<f64>());
    let deep = Matrix::from_fn(4, w, |_, _| rng.random::<f64>());
    let mut take_deep = Linear::zeros(2 * w, w);
    let mut take_shallow = Linear::zeros(2 * w, w);
    for i in 0..w {
        take_deep.weight.set(i, i, 1.0);
        take_shallow.weight.set(w + i, i, 1.0);
    }
    assert_eq!(skip_merge(&take_deep, &shallow, &deep).unwrap(), deep);
    assert_eq!(skip_merge(&take_shallow, &shallow, &deep).unwrap(), shallow);
    let short = Matrix::zeros(3, w);
    assert!(matches!(skip_merge(&take_deep, &short, &deep), Err(Error::Parameter(_))));
}

#[test]
fn identity_at_initialization() {
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 4).unwrap();
    let (x_t, x_m) = (latent(7, 1), latent(7, 2));
    let r = reference(3);
    // Random readout so the output is informative.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    model.out = Linear::xavier(32, LATENT_CHANNELS, &mut rng);
    let v = model.forward(&x_t, &x_m, Condition::Reference(&r), 10).unwrap();
    let h0 = model.in_proj.forward(&x_t.matrix().hconcat(x_m.matrix()));
    let expected = model.out.forward(&layer_norm(&h0).0);
    assert!(v.matrix().max_abs_diff(&expected) < 1e-6);

    let fresh = Backbone::<f64>::new(BackboneConfig::tiny(), 4).unwrap();
    let v = fresh.forward(&x_t, &x_m, Condition::Null, 10).unwrap();
    assert_eq!(v.matrix().sum_sq(), 0.0);
}

#[test]
fn shape_contract_and_input_sensitivity() {
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    randomize(&mut model, 0.1, 1);
    for n in [1, 2, 9] {
        let v = model.forward(&latent(n, 1), &latent(n, 2), Condition::Null, 5).unwrap();
        assert_eq!(v.shape(), (n, LATENT_CHANNELS));
    }
    let a = model.forward(&latent(5, 1), &latent(5, 2), Condition::Null, 5).unwrap();
    let b = model.forward(&latent(5, 1), &latent(5, 3), Condition::Null, 5).unwrap();
    assert!(a.matrix().max_abs_diff(b.matrix()) > 1e-6);
    assert!(matches!(
        model.forward(&latent(5, 1), &latent(4, 2), Condition::Null, 5),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn frame_permutation_equivariance() {
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    randomize(&mut model, 0.1, 2);
    let (x_t, x_m) = (latent(6, 1), latent(6, 2));
    let r = reference(1);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let base = model.forward(&x_t, &x_m, Condition::Reference(&r), 50).unwrap();
    let px_t = LatentSequence::new(x_t.matrix().select_rows(&perm)).unwrap();
    let px_m = LatentSequence::new(x_m.matrix().select_rows(&perm)).unwrap();
    let permuted = model
        .forward_with_positions(&px_t, &px_m, Condition::Reference(&r), 50, &perm)
        .unwrap();
    assert!(permuted.matrix().max_abs_diff(&base.matrix().select_rows(&perm)) < 1e-10);
}

#[test]
fn null_condition_uses_learned_vector() {
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    randomize(&mut model, 0.1, 3);
    let null = model.null_embedding();
    assert_eq!(null.provenance(), Provenance::Null);
    assert_eq!(null, model.null_embedding());
    let (x_t, x_m) = (latent(4, 1), latent(4, 2));
    let a = model.forward(&x_t, &x_m, Condition::Null, 9).unwrap();
    let b = model.forward(&x_t, &x_m, Condition::Reference(&null), 9).unwrap();
    assert_eq!(a, b);
}

fn rel_close(num: f64, ana: f64) -> bool {
    (num - ana).abs() <= 1e-3 * num.abs().max(ana.abs()) + 1e-8
}

#[test]
fn gradient_matches_finite_differences() {
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    randomize(&mut model, 0.15, 11);
    let (x_t, x_m) = (latent(5, 1), latent(5, 2));
    let w = latent(5, 3).into_matrix();
    for cond_null in [false, true] {
        let r = reference(4);
        let cond = if cond_null { Condition::Null } else { Condition::Reference(&r) };
        let loss = |m: &Backbone<f64>| {
            let v = m.forward(&x_t, &x_m, cond, 17).unwrap();
            v.matrix().data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = model.forward_cached(&x_t, &x_m, cond, 17).unwrap();
        let mut grad = model.zeros_like();
        model.backward(&cache, &w, &mut grad);
        let grads: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, g)| g.to_vec()).collect();
        let names: Vec<String> = grad.tensors().into_iter().map(|(n, _)| n).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cond_null as u64);
        let h = 1e-5;
        let mut checked = 0;
        for (ti, g) in grads.iter().enumerate() {
            // about 1% of each tensor, at least one entry
            let picks = (g.len() / 100).max(1);
            for _ in 0..picks {
                let idx = rng.random_range(0..g.len());
                let mut plus = model.clone();
                plus.tensors_mut()[ti].1[idx] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[ti].1[idx] -= h;
                let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(rel_close(num, g[idx]), "{}[{idx}]: fd {num} vs {}", names[ti], g[idx]);
                checked += 1;
            }
        }
        assert!(checked > 500);
        let null_grad = grad.tensors().into_iter().find(|(n, _)| n == "null_embedding").unwrap().1.to_vec();
        assert_eq!(null_grad.iter().any(|&g| g != 0.0), cond_null);
    }
}

#[test]
fn block_gradient_wrt_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut block = DitBlock::<f64>::new(8, 2, 4, true, &mut rng);
    block.ada = Linear::normal(8, 48, 0.3, &mut rng);
    let h = Matrix::from_fn(4, 8, |_, _| StandardNormal.sample(&mut rng));
    let s = Matrix::from_fn(4, 8, |_, _| StandardNormal.sample(&mut rng));
    let cond = Matrix::from_fn(1, 8, |_, _| StandardNormal.sample(&mut rng));
    let w = Matrix::from_fn(4, 8, |_, _| StandardNormal.sample(&mut rng));
    let rope = RopeTable::new(&[0, 1, 2, 3], 4, 1e4).unwrap();
    let loss = |c: &Matrix<f64>| {
        let (y, _) = block.forward(&h, Some(&s), c, &rope);
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = block.forward(&h, Some(&s), &cond, &rope);
    let mut grad = block.zeros_like();
    let (_, dskip, dcond) = block.backward(&cache, &w, &rope, &mut grad);
    assert!(dskip.is_some());
    for i in 0..8 {
        let mut p = cond.clone();
        p.data_mut()[i] += 1e-6;
        let mut m = cond.clone();
        m.data_mut()[i] -= 1e-6;
        let num = (loss(&p) - loss(&m)) / 2e-6;
        assert!(rel_close(num, dcond.data()[i]), "cond[{i}]");
    }
}

#[test]
fn plain_transformer_when_scale_shift_zero_gate_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut block = DitBlock::<f64>::new(8, 2, 4, false, &mut rng);
    // Bias-only regressor: shift = scale = 0, gates = 1.
    for seg in [2usize, 5] {
        for i in 0..8 {
            block.ada.bias[seg * 8 + i] = 1.0;
        }
    }
    let h = Matrix::from_fn(3, 8, |_, _| StandardNormal.sample(&mut rng));
    let cond = Matrix::zeros(1, 8);
    let rope = RopeTable::new(&[0, 1, 2], 4, 1e4).unwrap();
    let (y, _) = block.forward(&h, None, &cond, &rope);

    let (a, _) = block.attn.forward(&layer_norm(&h).0, &rope);
    let mut h2 = h.clone();
    h2.add_assign(&a);
    let mlp = block.fc2.forward(&block.fc1.forward(&layer_norm(&h2).0).map(layers::gelu));
    h2.add_assign(&mlp);
    assert!(y.max_abs_diff(&h2) < 1e-12);
}

#[test]
fn no_skip_ablation_has_no_merge_layers() {
    let cfg = BackboneConfig {
        skip_connections: false,
        ..BackboneConfig::tiny()
    };
    let model = Backbone::<f64>::new(cfg, 0).unwrap();
    assert!(model.blocks.iter().all(|b| b.skip.is_none()));
    let with = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    assert_eq!(with.param_count() - model.param_count(), 2 * 32 * 32 + 32);
}

#[test]
fn cast_preserves_predictions() {
    let mut model = Backbone::<f64>::new(BackboneConfig::tiny(), 0).unwrap();
    randomize(&mut model, 0.1, 5);
    let single: Backbone<f32> = model.cast();
    let v64 = model.forward(&latent(3, 1), &latent(3, 2), Condition::Null, 4).unwrap();
    let v32 = single
        .forward(&latent(3, 1).cast(), &latent(3, 2).cast(), Condition::Null, 4)
        .unwrap();
    assert!(v32.matrix().cast::<f64>().max_abs_diff(v64.matrix()) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn rope_preserves_norm(seed in any::<u64>(), pos in 0usize..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Matrix<f64> = Matrix::from_fn(1, 16, |_, _| StandardNormal.sample(&mut rng));
        let y = rope_rotate(&x, &[pos], 10_000.0).unwrap();
        prop_assert!((x.sum_sq().sqrt() - y.sum_sq().sqrt()).abs() < 1e-6);
    }

    #[test]
    fn blocks_are_identity_at_init(seed in any::<u64>(), frames in 1usize..8) {
        let model = Backbone::<f64>::new(BackboneConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let h = Matrix::from_fn(frames, 32, |_, _| StandardNormal.sample(&mut rng));
        let cond = Matrix::from_fn(1, 32, |_, _| StandardNormal.sample(&mut rng));
        let positions: Vec<usize> = (0..frames).collect();
        let rope = RopeTable::new(&positions, 16, 1e4).unwrap();
        let (out, _) = model.run_blocks(h.clone(), &cond, &rope, false);
        prop_assert!(out.max_abs_diff(&h) < 1e-6);
    }
}
