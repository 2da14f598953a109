//! Central finite-difference checks for every differentiable op.

use octmorph_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Checks d(f)/d(inputs) against central differences. `f` must return a
/// scalar var built only from the supplied input vars.
fn check<F>(inputs: &[Tensor], f: F, tol: f32)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.variable(t.clone())).collect();
    let out = f(&graph, &vars);
    let mut grads = graph.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vs: Vec<_> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).item() as f64
    };

    let h = 1e-2f32;
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let a = analytic[which].data()[k] as f64;
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                err <= tol as f64 * scale,
                "input {which} elem {k}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let a = off_kink(&[2, 3], 1);
    let b = random(&[2, 3], 2);
    check(&[a.clone(), b.clone()], |_, v| (v[0] + v[1]).square().sum(), 1e-2);
    check(&[a.clone(), b.clone()], |_, v| (v[0] - v[1]).mul(&v[1]).sum(), 1e-2);
    check(&[a.clone()], |_, v| v[0].abs().scale(3.0).add_scalar(1.0).sum(), 1e-2);
    check(&[a.clone()], |_, v| v[0].relu().mean(), 1e-2);
    check(&[a.clone()], |_, v| v[0].leaky_relu(0.2).square().sum(), 1e-2);
    check(&[a.clone()], |_, v| v[0].tanh().square().sum(), 1e-2);
    check(&[b], |_, v| v[0].scale(3.0).softplus().sum(), 1e-2);
}

#[test]
fn matrix_ops() {
    let a = random(&[3, 4], 3);
    let b = random(&[4, 2], 4);
    check(&[a.clone(), b], |_, v| v[0].matmul(&v[1]).square().sum(), 1e-2);
    check(&[a.clone()], |_, v| v[0].transpose().reshape(&[12]).square().sum(), 1e-2);
    let w = random(&[5, 4], 5);
    let bias = random(&[5], 6);
    check(&[a.clone(), w, bias], |_, v| v[0].linear(&v[1], Some(&v[2])).tanh().sum(), 1e-2);
    check(&[a.clone()], |_, v| v[0].l2_normalize_rows(1e-8).square().sum().add_scalar(0.0), 1e-2);
    let target = random(&[3, 4], 7);
    check(
        &[a.clone(), target],
        |_, v| v[0].l2_normalize_rows(1e-8).mul(&v[1]).sum(),
        1e-2,
    );
    check(&[a.clone()], |_, v| v[0].log_softmax_rows().gather(vec![1, 6, 11], &[3]).sum(), 1e-2);
    let c = random(&[3, 2], 8);
    check(&[a, c], |_, v| Var::concat_cols(&[v[0], v[1]]).square().sum(), 1e-2);
}

#[test]
fn conv2d_and_upsample() {
    let x = random(&[2, 3, 6, 5], 10);
    let w = random(&[4, 3, 3, 3], 11);
    let b = random(&[4], 12);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        check(
            &[x.clone(), w.clone(), b.clone()],
            |_, v| v[0].conv2d(&v[1], Some(&v[2]), stride, pad).square().mean(),
            2e-2,
        );
    }
    check(&[random(&[1, 2, 3, 3], 13)], |_, v| {
        let up = v[0].upsample2x();
        let wts = v[0].graph().constant(random(&[1, 2, 6, 6], 14));
        up.mul(&wts).sum()
    }, 1e-2);
}

#[test]
fn normalization_ops() {
    let x = random(&[2, 3, 4, 4], 20);
    let proj = random(&[2, 3, 4, 4], 21);
    check(&[x.clone(), proj.clone()], |_, v| v[0].instance_norm(1e-5).mul(&v[1]).sum(), 2e-2);
    let gamma = random(&[2, 3], 22);
    let beta = random(&[2, 3], 23);
    check(
        &[x.clone(), gamma, beta, proj],
        |_, v| v[0].channel_affine(&v[1], &v[2]).mul(&v[3]).sum(),
        1e-2,
    );
    check(&[x.clone()], |_, v| v[0].spatial_mean().square().sum(), 1e-2);
    check(&[x], |_, v| v[0].gram().square().sum(), 2e-2);
}

#[test]
fn spectral_scale_treats_singular_vectors_as_constants() {
    let w = random(&[3, 4], 30).map(|x| x + 1.5);
    let u = vec![0.6, 0.0, 0.8];
    let v = vec![0.5, 0.5, 0.5, 0.5];
    let proj = random(&[3, 4], 31);
    check(
        &[w, proj],
        move |_, vars| vars[0].spectral_scale(&u, &v, 1e-12).mul(&vars[1]).sum(),
        2e-2,
    );
}

#[test]
fn frozen_leaves_get_no_gradient_but_pass_it_through() {
    let graph = Graph::new();
    let x = graph.variable(random(&[1, 4], 40));
    let w = graph.constant(random(&[2, 4], 41));
    let y = x.linear(&w, None).square().sum();
    let grads = graph.backward(y);
    assert!(grads.get(w).is_none());
    assert!(grads.get(x).is_some());
}
