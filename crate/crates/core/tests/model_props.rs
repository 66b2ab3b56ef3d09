use binn_core::diffcore::{Activation, Tape, Tensor};
use binn_core::model::*;
use binn_core::nod::{nod_rhs_full, NodParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(n_agents: usize, comm: CommVariant) -> ModelConfig {
    ModelConfig {
        n_agents,
        state_dim: 4,
        n_options: 2,
        hidden: 6,
        activation: Activation::Tanh,
        comm,
        eps: 1e-6,
        dt: 0.1,
    }
}

fn random_states(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let c = x.cols();
    Tensor::matrix(perm.len(), c, perm.iter().flat_map(|&i| x.data()[i * c..(i + 1) * c].to_vec()).collect())
}

fn zeroed(mut m: BinnModel) -> BinnModel {
    for p in &mut m.params {
        if p.name.contains('.') {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m
}

#[test]
fn comm_matrix_examples() {
    let sq = BinnModel::new(config(3, CommVariant::SquaredDistance), 0).unwrap();
    let coincident = Tensor::matrix(3, 4, vec![0.5, -0.2, 1.0, 2.0].repeat(3));
    assert!(sq.comm_matrix(&coincident).unwrap().data().iter().all(|v| *v == 0.0));

    let inv = BinnModel::new(config(2, CommVariant::InverseDistance), 0).unwrap();
    let apart = Tensor::matrix(2, 4, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    let a = inv.comm_matrix(&apart).unwrap();
    assert_eq!(a.data()[0], 0.0);
    assert!((a.data()[1] - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
    assert!((a.data()[2] - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);

    let mut learned = BinnModel::new(config(3, CommVariant::LearnedMultiplier), 0).unwrap();
    learned.params.last_mut().unwrap().value.data_mut().iter_mut().for_each(|v| *v = 2.0);
    let a = learned.comm_matrix(&coincident).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            let want = if r == c { 0.0 } else { 2.0 / 1e-6 };
            assert!((a.at(r, c) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn single_agent_encoder_uses_zero_messages() {
    let m = BinnModel::new(config(1, CommVariant::SquaredDistance), 3).unwrap();
    let x = Tensor::matrix(1, 4, vec![0.3, -0.4, 0.1, 0.9]);
    let z = m.encode_preferences(&x).unwrap();
    // hand evaluation of f3([0, f1(x)])
    let mlp = |first: usize, input: &[f64]| {
        let mut h = input.to_vec();
        for layer in 0..3 {
            let w = &m.params[first * 6 + 2 * layer].value;
            let b = &m.params[first * 6 + 2 * layer + 1].value;
            let mut out = b.data().to_vec();
            for (k, hv) in h.iter().enumerate() {
                for j in 0..w.cols() {
                    out[j] += hv * w.at(k, j);
                }
            }
            if layer < 2 {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        h
    };
    let emb = mlp(0, x.data());
    let mut cat = vec![0.0; 6];
    cat.extend(emb);
    let want = mlp(2, &cat);
    for (a, b) in z.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn zero_weights_give_zero_preferences_and_bias_decode() {
    let m = zeroed(BinnModel::new(config(3, CommVariant::InverseDistance), 1).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_states(&mut rng, 6, 4);
    assert!(m.encode_preferences(&x).unwrap().data().iter().all(|v| *v == 0.0));
    assert!(m.encode_env_input(&x).unwrap().data().iter().all(|v| *v == 0.0));
    let mut m2 = m.clone();
    let bias = m2.params.iter_mut().find(|p| p.name == "dx.e2v.b3").unwrap();
    bias.value = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
    let xh = m2.decode_states(&random_states(&mut rng, 3, 2)).unwrap();
    assert!(xh.data().chunks(4).all(|r| r == [1.0, -2.0, 0.5, 3.0]));

    let (traj, _) = m2.rollout(&x, 4).unwrap();
    assert_eq!(traj.len(), 4);
    assert!(traj.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn f_nod_latent_matches_nod_module() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = config(3, CommVariant::InverseDistance);
    cfg.n_options = 3;
    let mut m = BinnModel::new(cfg, 9).unwrap();
    for p in &mut m.params {
        if p.name.starts_with("rho") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        if p.name == "a_o" {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    let (z, b) = (random_states(&mut rng, 6, 3), random_states(&mut rng, 6, 3));
    let x = random_states(&mut rng, 6, 4);
    let a = m.comm_matrix(&x).unwrap();
    let got = m.f_nod_latent(&z, &b, Some(&a)).unwrap();
    let (d, u, alpha) = m.intrinsics();
    let ao = m.belief_matrix();
    for g in 0..2 {
        let p = NodParams {
            d: DMatrix::from_fn(3, 3, |_, j| d[j]),
            u: DVector::from_element(3, u),
            alpha: DMatrix::from_fn(3, 3, |_, j| alpha[j]),
            a_o: DMatrix::from_fn(3, 3, |r, c| ao[r][c]),
            a_a: DMatrix::from_fn(3, 3, |r, c| a.at(g * 3 + r, c)),
            b: DMatrix::from_fn(3, 3, |r, c| b.at(g * 3 + r, c)),
            dt: 0.1,
        };
        let zg = DMatrix::from_fn(3, 3, |r, c| z.at(g * 3 + r, c));
        let want = nod_rhs_full(&zg, &p, Activation::Tanh).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((got.at(g * 3 + r, c) - want[(r, c)]).abs() < 1e-12);
            }
        }
    }
    let zero = Tensor::zeros(&[6, 3]);
    assert!(m.f_nod_latent(&zero, &zero, Some(&a)).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn attention_gradient_matches_finite_difference() {
    let m = BinnModel::new(config(2, CommVariant::SquaredDistance), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (z, b, x) = (random_states(&mut rng, 4, 2), random_states(&mut rng, 4, 2), random_states(&mut rng, 4, 4));
    let objective = |m: &BinnModel| {
        let mut t = Tape::new();
        let bound = m.bind(&mut t).unwrap();
        let (zv, bv, xv) = (t.leaf(z.clone()).unwrap(), t.leaf(b.clone()).unwrap(), t.leaf(x.clone()).unwrap());
        let a = m.comm(&mut t, &bound, xv).unwrap();
        let f = m.nod(&mut t, &bound, zv, bv, a).unwrap();
        let l = t.mean(f).unwrap();
        let g = t.backward(l).unwrap().get(bound.vars[55]).item();
        (t.value(l).item(), g)
    };
    let (_, analytic) = objective(&m);
    let h = 1e-5;
    let shifted = |delta: f64| {
        let mut m2 = m.clone();
        m2.params[55].value.data_mut()[0] += delta;
        objective(&m2).0
    };
    let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
    assert!((analytic - numeric).abs() / (analytic.abs() + 1e-12) < 1e-5, "{analytic} vs {numeric}");
}

#[test]
fn two_step_rollout_composes_single_steps() {
    let m = BinnModel::new(config(1, CommVariant::SquaredDistance), 6).unwrap();
    let x0 = Tensor::matrix(1, 4, vec![0.2, -0.9, 0.4, 0.1]);
    let (two, trace) = m.rollout(&x0, 2).unwrap();
    let (one, _) = m.rollout(&x0, 1).unwrap();
    assert_eq!(one[0], two[0]);
    assert_eq!(trace.z.len(), 3);
    // by hand: z2 = z1 + dt f(z1, E_b(x̂1))
    let z1 = &trace.z[1];
    let b1 = m.encode_env_input(&two[0]).unwrap();
    let f = m.f_nod_latent(z1, &b1, None).unwrap();
    let z2: Vec<f64> = z1.data().iter().zip(f.data()).map(|(a, b)| a + 0.1 * b).collect();
    let x2 = m.decode_states(&Tensor::matrix(1, 2, z2)).unwrap();
    assert!(x2.max_abs_diff(&two[1]) < 1e-14);
    assert!(m.rollout(&x0, 0).is_err());
}

#[test]
fn checkpoint_round_trip_and_rejection() {
    let m = BinnModel::new(config(3, CommVariant::LearnedMultiplier), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, serde_json::json!({"lr": 1e-3}), &path).unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back, m.rounded());
    assert_eq!(meta.hyperparameters["lr"], 1e-3);
    let bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 2]).is_err());
    let mut cfg = m.config.clone();
    cfg.hidden = 7;
    let other = BinnModel::new(cfg, 0).unwrap();
    let mut swapped = checkpoint_bytes(&other, serde_json::Value::Null).unwrap();
    let nl = swapped.iter().position(|b| *b == b'\n').unwrap();
    swapped.splice(..nl, serde_json::to_vec(&serde_json::json!({
        "format_version": 1, "model": m.config, "manifest": BinnModel::expected_manifest(&cfg_hidden(&m.config)).unwrap()
    })).unwrap());
    assert!(checkpoint_from_bytes(&swapped).is_err());
}

fn cfg_hidden(c: &ModelConfig) -> ModelConfig {
    ModelConfig { hidden: 7, ..c.clone() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rollout_is_permutation_equivariant(seed in any::<u64>(), variant in 0usize..3) {
        let comm = [CommVariant::SquaredDistance, CommVariant::InverseDistance, CommVariant::LearnedMultiplier][variant];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BinnModel::new(config(3, comm), seed).unwrap();
        if comm == CommVariant::LearnedMultiplier {
            m.params.last_mut().unwrap().value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
        let x = random_states(&mut rng, 3, 4);
        let perm = [2usize, 0, 1];
        let mut mp = m.clone();
        if comm == CommVariant::LearnedMultiplier {
            // permute A_pre consistently: A'[r][c] = A[π r][π c]
            let a = m.multiplier_matrix().unwrap();
            let mut entries = Vec::new();
            for r in 0..3 {
                for c in (0..3).filter(|&c| c != r) {
                    entries.push(a[perm[r]][perm[c]]);
                }
            }
            mp.params.last_mut().unwrap().value = Tensor::vector(entries);
        }
        let (base, trace) = m.rollout(&x, 3).unwrap();
        let (moved, _) = mp.rollout(&permute_rows(&x, &perm), 3).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!(permute_rows(a, &perm).max_abs_diff(b) < 1e-10);
        }
        for a in &trace.a {
            for r in 0..3 {
                prop_assert_eq!(a.at(r, r), 0.0);
            }
        }
    }

    #[test]
    fn mapped_intrinsics_are_positive(raw in proptest::collection::vec(-30.0f64..30.0, 5)) {
        let mut m = BinnModel::new(config(1, CommVariant::SquaredDistance), 0).unwrap();
        for p in &mut m.params {
            if p.name.starts_with("rho") {
                for (v, r) in p.value.data_mut().iter_mut().zip(&raw) {
                    *v = *r;
                }
            }
        }
        let (d, u, a) = m.intrinsics();
        prop_assert!(u > 0.0 && d.iter().chain(&a).all(|v| *v > 0.0));
    }
}
