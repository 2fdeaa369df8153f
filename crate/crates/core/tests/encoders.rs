use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rppgvl::encoders::{Model, ModelConfig};
use rppgvl::harness::train::{build_losses, Batch, LossVars};
use rppgvl::harness::{Mode, TrainConfig, Trainer};
use rppgvl::losses::PsdBasis;
use rppgvl::pairs::{Vocab, PAD_ID};
use rppgvl::synthgen::{gen_dataset, DatasetConfig, Split};
use rppgvl_tape::gradcheck::check_params;
use rppgvl_tape::{Graph, Tensor, Var};

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        map_size: 16,
        patch: 4,
        embed_dim: 8,
        sim_dim: 6,
        vision_depth: 1,
        text_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

struct Setup {
    model: Model<f64>,
    cfg: TrainConfig,
    basis: PsdBasis,
    batch: Batch,
}

fn setup(seed: u64, mode: Mode) -> Setup {
    let ds = gen_dataset(&DatasetConfig { n_samples: 6, test_fraction: 0.34, n_frames: 32, seed, ..DatasetConfig::default() })
        .unwrap();
    let mut cfg = TrainConfig::new("unused");
    cfg.model = tiny_model_cfg();
    cfg.train.seed = seed;
    cfg.train.mode = mode;
    cfg.train.labeled_fraction = 0.5;
    let mut tr = Trainer::new(cfg.clone(), &ds).unwrap();
    let train = ds.split(Split::Train);
    let batch = tr.build_batch(&train[..2]).unwrap();
    Setup { model: tr.model.cast(), cfg: tr.cfg.clone(), basis: tr.basis.clone(), batch }
}

fn gradcheck(s: &Setup, pick: fn(&LossVars) -> Option<Var>) -> f64 {
    let r = check_params(
        &s.model.params,
        |g| pick(&build_losses(g, &s.model, &s.cfg, &s.basis, &s.batch).unwrap()).unwrap(),
        1e-4,
        3,
    );
    assert!(r.checked > 100);
    eprintln!("max rel err {:.2e} at {}[{}]", r.max_rel_err, r.worst_param, r.worst_index);
    r.max_rel_err
}

#[test]
fn gradients_of_each_loss_match_finite_differences() {
    let picks: [(&str, fn(&LossVars) -> Option<Var>); 5] = [
        ("L_r", |l| l.l_r),
        ("L_vtc", |l| l.l_vtc),
        ("L_fc", |l| l.l_fc),
        ("L_fr", |l| l.l_fr),
        ("total", |l| l.total),
    ];
    for seed in 0..5 {
        let s = setup(seed, Mode::Ssl);
        for (name, pick) in picks {
            let e = gradcheck(&s, pick);
            assert!(e < 1e-4, "{name} seed {seed}: {e:.2e}");
        }
    }
}

#[test]
fn pearson_gradients_in_semi_mode() {
    let s = setup(7, Mode::Semi);
    assert!(!s.batch.references.is_empty());
    assert!(gradcheck(&s, |l| l.l_pearson) < 1e-4);
    assert!(gradcheck(&s, |l| l.total) < 1e-4);
}

fn model(seed: u64) -> Model<f64> {
    Model::new(&tiny_model_cfg(), Vocab::default().len(), 5, 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_patches(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn output_shapes() {
    let m = model(1);
    let mut g = Graph::new(&m.params);
    let x = g.constant(Tensor::from_f64(&[3 * 16, 48], &random_patches(3 * 16 * 48, 0)));
    let v = m.net.encode_vision(&mut g, x, 3);
    assert_eq!(g.shape(v.cls), [3, 8]);
    assert_eq!(g.shape(v.tokens), [48, 8]);
    let y = m.net.rppg(&mut g, v.cls);
    assert_eq!(g.shape(y), [3, 16]);
    let pv = m.net.project_vision(&mut g, v.cls);
    assert_eq!(g.shape(pv), [3, 6]);
    let sig = g.constant(Tensor::from_f64(&[10, 16], &random_patches(160, 1)));
    let s = m.net.rank_scores(&mut g, sig).unwrap();
    assert_eq!(g.shape(s), [2, 5]);
    let bad = g.constant(Tensor::from_f64(&[4, 16], &random_patches(64, 1)));
    assert!(m.net.rank_scores(&mut g, bad).is_err());
    let t = m.net.encode_text(&mut g, &[Vocab::default().tokenize("the left side").ids]).unwrap();
    assert_eq!(g.shape(t), [1, 8]);
    assert!(m.net.encode_text(&mut g, &[vec![0; 5]]).is_err());
    assert!(m.net.encode_text(&mut g, &[vec![999; 32]]).is_err());
}

#[test]
fn construction_is_seeded() {
    let (a, b, c) = (model(4), model(4), model(5));
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.value, y.value);
    }
    assert!(a.params.iter().zip(c.params.iter()).any(|((_, x), (_, y))| x.value != y.value));
    let names: Vec<&str> = a.params.iter().map(|(_, p)| p.name.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}

#[test]
fn padding_embedding_does_not_reach_cls() {
    let mut m = model(2);
    let ids = Vocab::default().tokenize("the frequency on the right side is 2 times").ids;
    assert!(ids.contains(&PAD_ID));
    let run = |m: &Model<f64>| {
        let mut g = Graph::new(&m.params);
        let t = m.net.encode_text(&mut g, std::slice::from_ref(&ids)).unwrap();
        g.value(t).to_f64()
    };
    let before = run(&m);
    let tok = m.params.find("text.tok").unwrap();
    let d = m.net.cfg.embed_dim;
    m.params.value_mut(tok).data_mut()[PAD_ID * d..(PAD_ID + 1) * d].iter_mut().for_each(|v| *v += 3.0);
    let after = run(&m);
    for (x, y) in before.iter().zip(&after) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn vision_is_permutation_equivariant_without_positions() {
    let mut m = model(3);
    let pos = m.params.find("vision.pos").unwrap();
    m.params.value_mut(pos).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let px = random_patches(16 * 48, 9);
    let mut perm: Vec<usize> = (0..16).collect();
    perm.reverse();
    perm.swap(2, 7);
    let shuffled: Vec<f64> = perm.iter().flat_map(|&i| px[i * 48..(i + 1) * 48].to_vec()).collect();
    let run = |p: &[f64]| {
        let mut g = Graph::new(&m.params);
        let x = g.constant(Tensor::from_f64(&[16, 48], p));
        let v = m.net.encode_vision(&mut g, x, 1);
        (g.value(v.cls).to_f64(), g.value(v.tokens).to_f64())
    };
    let (c0, t0) = run(&px);
    let (c1, t1) = run(&shuffled);
    for (a, b) in c0.iter().zip(&c1) {
        assert!((a - b).abs() < 1e-10);
    }
    for (j, &i) in perm.iter().enumerate() {
        for k in 0..8 {
            assert!((t1[j * 8 + k] - t0[i * 8 + k]).abs() < 1e-10);
        }
    }
}

#[test]
fn masked_encoder_with_nothing_masked_matches_full() {
    let m = model(6);
    let px = random_patches(2 * 16 * 48, 3);
    let mut g = Graph::new(&m.params);
    let x = g.constant(Tensor::from_f64(&[32, 48], &px));
    let full = m.net.encode_vision(&mut g, x, 2);
    let positions = vec![(0..16).collect::<Vec<_>>(); 2];
    let masked = m.net.encode_vision_masked(&mut g, x, &positions).unwrap();
    let (a, b) = (g.value(full.tokens).to_f64(), g.value(masked).to_f64());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(m.net.encode_vision_masked(&mut g, x, &[vec![0, 1], vec![2]]).is_err());
    assert!(m.net.encode_vision_masked(&mut g, x, &[vec![16]]).is_err());
}

#[test]
fn zero_heads_give_zero_outputs() {
    let mut m = model(8);
    for name in ["head.rppg.w", "head.rppg.b", "tvr.out.w", "tvr.out.b"] {
        let id = m.params.find(name).unwrap_or_else(|| panic!("no {name}"));
        m.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new(&m.params);
    let x = g.constant(Tensor::from_f64(&[16, 48], &random_patches(16 * 48, 1)));
    let v = m.net.encode_vision(&mut g, x, 1);
    let y = m.net.rppg(&mut g, v.cls);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let text = g.constant(Tensor::from_f64(&[1, 8], &[0.1; 8]));
    let vis: Vec<usize> = (0..6).collect();
    let enc = g.gather_rows(v.tokens, &vis);
    let r = m.net.tvr_reconstruct(&mut g, enc, &[vis.clone()], &[(6..16).collect()], text).unwrap();
    assert_eq!(g.shape(r), [16, 48]);
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
}

#[test]
fn rank_scorer_is_affine() {
    let m = model(10);
    let eval = |x: &[f64]| {
        let mut g = Graph::new(&m.params);
        let v = g.constant(Tensor::from_f64(&[5, 16], x));
        let s = m.net.rank_scores(&mut g, v).unwrap();
        g.value(s).to_f64()
    };
    let a = random_patches(80, 1);
    let b = random_patches(80, 2);
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let zero = eval(&[0.0; 80]);
    let (sa, sb, ss) = (eval(&a), eval(&b), eval(&sum));
    for j in 0..5 {
        assert!((ss[j] - sa[j] - sb[j] + zero[j]).abs() < 1e-12);
    }
}

#[test]
fn reconstruction_depends_on_text() {
    let m = model(11);
    let vis: Vec<usize> = (0..16).step_by(3).collect();
    let masked: Vec<usize> = (0..16).filter(|i| i % 3 != 0).collect();
    let text0: Vec<f64> = random_patches(8, 4).iter().map(|v| v - 0.5).collect();
    // recon(text) summed over masked slots, and its gradient w.r.t. the text embedding
    let eval = |t: &[f64], grad: bool| {
        let mut g = Graph::new(&m.params);
        let x = g.constant(Tensor::from_f64(&[vis.len(), 48], &random_patches(vis.len() * 48, 5)));
        let enc = m.net.encode_vision_masked(&mut g, x, &[vis.clone()]).unwrap();
        let tv = g.input(Tensor::from_f64(&[1, 8], t));
        let r = m.net.tvr_reconstruct(&mut g, enc, &[vis.clone()], &[masked.clone()], tv).unwrap();
        let w: Vec<f64> = (0..16 * 48).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let w = g.constant(Tensor::from_f64(&[16, 48], &w));
        let r = g.mul(r, w);
        let s = g.sum(r);
        let val = g.scalar(s);
        let gr = if grad {
            g.backward(s);
            g.grad(tv).map(<[f64]>::to_vec).unwrap()
        } else {
            Vec::new()
        };
        (val, gr)
    };
    let (_, ana) = eval(&text0, true);
    assert!(ana.iter().any(|v| v.abs() > 1e-6));
    for j in 0..8 {
        let mut p = text0.clone();
        p[j] += 1e-5;
        let mut q = text0.clone();
        q[j] -= 1e-5;
        let num = (eval(&p, false).0 - eval(&q, false).0) / 2e-5;
        let err = (num - ana[j]).abs() / (num.abs() + ana[j].abs()).max(1e-6);
        assert!(err < 1e-4, "text dim {j}: {num} vs {}", ana[j]);
    }
}
