use drft::fusion::{Fusion, FusionConfig};
use drft::{Modality, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(share: bool) -> FusionConfig {
    FusionConfig {
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        layers: 1,
        streams: Modality::ALL.to_vec(),
        common: Modality::Rgb,
        transformer: true,
        share_common_block: share,
        learnable_weights: true,
    }
}

fn random<S: Scalar>(rng: &mut ChaCha8Rng, r: usize, c: usize, bound: f64) -> Tensor<S> {
    Tensor::from_fn(r, c, |_, _| S::of(rng.gen_range(-bound..bound)))
}

fn modal<S: Scalar>(t: &mut Tape<'_, S>, inputs: &[Tensor<S>]) -> Vec<(Modality, Var)> {
    Modality::ALL
        .iter()
        .zip(inputs)
        .map(|(&m, x)| (m, t.constant(x.clone()).unwrap()))
        .collect()
}

#[test]
fn weights_are_a_distribution_over_1000_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let mut store = ParamStore::<f32>::new();
        let fusion = Fusion::new(&mut store, config(case % 2 == 0), &mut rng).unwrap();
        for p in store.iter_mut().filter(|p| p.name.starts_with("fusion.weight_fc")) {
            let (r, c) = (p.value.rows(), p.value.cols());
            p.value = random(&mut rng, r, c, 3.0);
        }
        let segments = rng.gen_range(1..=12);
        let inputs: Vec<Tensor<f32>> = (0..3).map(|_| random(&mut rng, segments, 8, 5.0)).collect();
        let mut t = Tape::new(&store);
        let m = modal(&mut t, &inputs);
        let (_, fr) = fusion.forward(&mut t, &m).unwrap();
        let w = t.value(fr.weights).data();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)), "case {case}: {w:?}");
        let sum: f32 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "case {case}: sum {sum}");
    }
}

fn shared_name(unshared: &str) -> String {
    unshared.replace("rgb_block_flow.", "rgb_block.").replace("rgb_block_depth.", "rgb_block.")
}

fn loss_grads(store: &ParamStore<f64>, fusion: &Fusion, inputs: &[Tensor<f64>], probe: &Tensor<f64>) -> (f64, Vec<(String, Tensor<f64>)>) {
    let mut t = Tape::new(store);
    let m = modal(&mut t, inputs);
    let (_, fr) = fusion.forward(&mut t, &m).unwrap();
    let p = t.constant(probe.clone()).unwrap();
    let y = t.mul(fr.fused, p).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    let grads = t
        .param_grads()
        .into_iter()
        .map(|(id, g)| (store.get(id).name.clone(), g))
        .collect();
    (t.scalar(loss), grads)
}

#[test]
fn shared_block_gradient_is_the_sum_of_isolated_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut shared = ParamStore::<f64>::new();
    let fs = Fusion::new(&mut shared, config(true), &mut rng).unwrap();
    for p in shared.iter_mut().filter(|p| p.name.starts_with("fusion.weight_fc")) {
        let (r, c) = (p.value.rows(), p.value.cols());
        p.value = random(&mut rng, r, c, 1.0);
    }
    let mut isolated = ParamStore::<f64>::new();
    let fi = Fusion::new(&mut isolated, config(false), &mut rng).unwrap();
    for p in isolated.iter_mut() {
        p.value = shared.by_name(&shared_name(&p.name)).unwrap().value.clone();
    }

    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, 5, 8, 1.0)).collect();
    let probe = random(&mut rng, 5, 8, 1.0);
    let (ls, gs) = loss_grads(&shared, &fs, &inputs, &probe);
    let (li, gi) = loss_grads(&isolated, &fi, &inputs, &probe);
    assert!((ls - li).abs() < 1e-12);

    let mut checked = 0;
    for (name, g) in gs.iter().filter(|(n, _)| n.starts_with("fusion.layer0.rgb_block.")) {
        let path = |tag: &str| {
            let n = name.replace("rgb_block.", &format!("rgb_block_{tag}."));
            gi.iter().find(|(m, _)| *m == n).map(|(_, g)| g.clone()).unwrap()
        };
        let (flow, depth) = (path("flow"), path("depth"));
        assert!(flow.data().iter().any(|&x| x != 0.0) && depth.data().iter().any(|&x| x != 0.0));
        for ((a, b), c) in g.data().iter().zip(flow.data()).zip(depth.data()) {
            assert!((a - (b + c)).abs() < 1e-8, "{name}: {a} vs {b} + {c}");
        }
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} shared parameters");
}
