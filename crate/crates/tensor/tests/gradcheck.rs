//! Central finite-difference checks for every differentiable op.

use edgebridge_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `f` on fresh graphs and compares analytic gradients of every input
/// against central differences.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-4 || (a - numeric).abs() < 1e-8,
                "input {i} elem {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(x), &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.sub(a, v[1]);
        let c = g.mul(b, v[1]);
        let d = g.scale(c, 0.7);
        let e = g.square(d);
        let f = g.sigmoid(e);
        let h = g.leaky_relu(f, 0.2);
        let k = g.abs(v[1]);
        let r = g.relu(v[0]);
        let s = g.add(h, k);
        let s = g.add(s, r);
        project(g, s, 9)
    });
}

#[test]
fn matmul_all_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&[4, 3], &mut rng) } else { random(&[3, 4], &mut rng) };
        let b = if tb { random(&[5, 4], &mut rng) } else { random(&[4, 5], &mut rng) };
        check(vec![a, b], |g, v| {
            let m = g.matmul_t(v[0], v[1], ta, tb);
            project(g, m, 3)
        });
    }
}

#[test]
fn broadcast_bias_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(
        vec![random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng), random(&[4], &mut rng)],
        |g, v| {
            let a = g.add_channel(v[0], v[1]);
            let b = g.mul_channel(a, v[2]);
            let flat = g.reshape(b, &[6, 4]);
            let c = g.add_row(flat, v[3]);
            project(g, c, 4)
        },
    );
}

#[test]
fn conv_pool_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        check(vec![random(&[2, 2, 6, 6], &mut rng), random(&[3, 2, k, k], &mut rng)], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad);
            project(g, y, 5)
        });
    }
    check(vec![random(&[1, 2, 4, 6], &mut rng)], |g, v| {
        let p = g.max_pool2d(v[0], 2);
        let r = g.resize_bilinear(p, 5, 7);
        let a = g.global_avg_pool(r);
        let q = g.square(a);
        let s = g.add(q, a);
        project(g, s, 6)
    });
}

#[test]
fn concat_and_normalizers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(vec![random(&[2, 2, 3, 3], &mut rng), random(&[2, 1, 3, 3], &mut rng)], |g, v| {
        let c = g.concat(&[v[0], v[1], v[1]], 1);
        let n = g.group_norm(c, 2, 1e-5);
        let s = g.stretch_to_unit(n);
        let flat = g.reshape(s, &[2, 36]);
        let z = g.concat(&[flat, flat], 0);
        let l = g.l2_normalize_rows(z, 1e-12);
        project(g, l, 7)
    });
}

#[test]
fn cross_entropy_and_info_nce() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(vec![random(&[3, 4], &mut rng)], |g, v| {
        let l = g.cross_entropy(v[0], &[0, 3, 1]);
        project(g, l, 8)
    });
    let mask: Vec<bool> = (0..3 * 5).map(|i| i % 4 != 0).collect();
    check(
        vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[5, 4], &mut rng)],
        move |g, v| {
            let l = g.info_nce(v[0], v[1], v[2], Some(mask.clone()), 0.3);
            let m = g.mean(l);
            let s = g.sum(l);
            let t = g.add(m, s);
            project(g, t, 10)
        },
    );
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(&[2], vec![1.0, 2.0]));
    let d = g.detach(x);
    let y = g.mul(d, x);
    let s = g.sum(y);
    let grads = g.backward(s);
    // only the non-detached factor contributes: d/dx (c * x) = c
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    assert!(!g.is_tracked(d));
}
