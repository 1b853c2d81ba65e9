//! Central finite-difference checks for every differentiable op.

use mdps_nn::{ConvSpec, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds the graph from `inputs` and `params`; the scalar objective is
/// `sum(out * proj)` for a fixed random projection.
fn check<F>(inputs: Vec<Tensor>, params: ParamStore, build: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor], params: &ParamStore| -> (Tensor, f64) {
        let mut g = Graph::new(params, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        (g.value(out).clone(), 0.0)
    };
    let (out0, _) = eval(&inputs, &params);
    let proj = random(out0.shape(), &mut rng);
    let objective = |out: &Tensor| -> f64 {
        out.data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };

    let mut g = Graph::new(&params, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out, proj.clone()).unwrap();

    let h = 1e-2f32;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("input gradient").clone();
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (objective(&eval(&plus, &params).0) - objective(&eval(&minus, &params).0))
                / (2.0 * h as f64);
            let a = analytic.data()[j] as f64;
            worst = worst.max((fd - a).abs() / (1.0 + fd.abs()));
        }
    }
    for (id, name, value) in params.iter() {
        let analytic = grads.param(id).unwrap_or_else(|| panic!("grad for {name}")).clone();
        for j in 0..value.numel() {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[j] -= h;
            let fd = (objective(&eval(&inputs, &plus).0) - objective(&eval(&inputs, &minus).0))
                / (2.0 * h as f64);
            let a = analytic.data()[j] as f64;
            worst = worst.max((fd - a).abs() / (1.0 + fd.abs()));
        }
    }
    assert!(worst < tol, "worst relative gradient error {worst}");
}

fn store(entries: &[(&str, [usize; 4])], rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, shape) in entries {
        p.insert(*name, random(*shape, rng)).unwrap();
    }
    p
}

#[test]
fn conv2d_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in [
        ConvSpec::same(3),
        ConvSpec::dilated(3, 2),
        ConvSpec::strided(2, 1),
    ] {
        let params = store(&[("w", [3, 2, 3, 3]), ("b", [1, 3, 1, 1])], &mut rng);
        check(
            vec![random([2, 2, 6, 5], &mut rng)],
            params,
            move |g, v| {
                let w = g.param_named("w").unwrap();
                let b = g.param_named("b").unwrap();
                g.conv2d(v[0], w, Some(b), spec).unwrap()
            },
            2e-3,
        );
    }
}

#[test]
fn pointwise_conv_and_channel_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = store(&[("w", [4, 3, 1, 1])], &mut rng);
    check(
        vec![random([2, 3, 4, 4], &mut rng), random([2, 4, 1, 1], &mut rng)],
        params,
        |g, v| {
            let w = g.param_named("w").unwrap();
            let h = g.conv2d(v[0], w, None, ConvSpec::same(1)).unwrap();
            g.add_channel(h, v[1]).unwrap()
        },
        2e-3,
    );
}

#[test]
fn group_norm_silu_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = store(&[("g", [1, 4, 1, 1]), ("b", [1, 4, 1, 1])], &mut rng);
    check(
        vec![random([2, 4, 3, 3], &mut rng)],
        params,
        |g, v| {
            let gamma = g.param_named("g").unwrap();
            let beta = g.param_named("b").unwrap();
            let n = g.group_norm(v[0], gamma, beta, 2).unwrap();
            let s = g.silu(n);
            g.scale(s, 0.7)
        },
        5e-3,
    );
}

#[test]
fn attention_concat_upsample_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(
        vec![
            random([2, 3, 2, 3], &mut rng),
            random([2, 3, 2, 3], &mut rng),
            random([2, 3, 2, 3], &mut rng),
        ],
        ParamStore::new(),
        |g, v| {
            let a = g.attention(v[0], v[1], v[2]).unwrap();
            let c = g.concat(a, v[0]).unwrap();
            let u = g.upsample2x(c);
            let twice = g.concat(v[2], v[2]).unwrap();
            let u2 = g.upsample2x(twice);
            g.add(u, u2).unwrap()
        },
        2e-3,
    );
}

#[test]
fn relu_maxpool_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Well separated values keep the finite differences away from kinks.
    let n = 2 * 2 * 5 * 5;
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.1).collect();
    for i in (1..vals.len()).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::from_vec([2, 2, 5, 5], vals).unwrap();
    check(
        vec![x],
        ParamStore::new(),
        |g, v| {
            let a = g.channel_affine(v[0], &[1.5, -0.5], &[0.05, 0.02]).unwrap();
            let r = g.relu(a);
            g.max_pool(r, 3, 2, 1).unwrap()
        },
        2e-3,
    );
}

#[test]
fn input_only_gradients_skip_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = store(&[("w", [2, 2, 3, 3])], &mut rng);
    let mut g = Graph::new(&params, false);
    let x = g.input(random([1, 2, 4, 4], &mut rng), true);
    let w = g.param_named("w").unwrap();
    let y = g.conv2d(x, w, None, ConvSpec::same(3)).unwrap();
    let seed = Tensor::full(g.value(y).shape(), 1.0);
    let grads = g.backward(y, seed).unwrap();
    assert!(grads.wrt(x).is_some());
    assert!(grads.param(params.id("w").unwrap()).is_none());
}

#[test]
fn batched_evaluation_matches_unbatched() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = store(&[("w", [3, 2, 3, 3]), ("g", [1, 3, 1, 1]), ("b", [1, 3, 1, 1])], &mut rng);
    let run = |x: Tensor| {
        let mut g = Graph::new(&params, false);
        let x = g.input(x, false);
        let w = g.param_named("w").unwrap();
        let h = g.conv2d(x, w, None, ConvSpec::same(3)).unwrap();
        let gamma = g.param_named("g").unwrap();
        let beta = g.param_named("b").unwrap();
        let h = g.group_norm(h, gamma, beta, 3).unwrap();
        let a = g.attention(h, h, h).unwrap();
        g.value(a).clone()
    };
    let a = random([1, 2, 5, 5], &mut rng);
    let b = random([1, 2, 5, 5], &mut rng);
    let batched = run(Tensor::stack(&[a.clone(), b.clone()]).unwrap());
    let parts = batched.unstack();
    assert_eq!(parts[0], run(a));
    assert_eq!(parts[1], run(b));
}
