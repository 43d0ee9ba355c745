//! Builds a two-layer network on the reverse-mode graph, compares its
//! gradients with central differences, then fits it with Adam.
//!
//! cargo run --release --example autodiff_gradcheck

use koopman_lorenz::rng::stream_rng;
use koopman_lorenz::tensor::{init_normal, Bound, Graph, Optimizer, OptimizerConfig, ParamStore, Tensor, Var};

fn loss(store: &ParamStore, x: &Tensor, y: &Tensor) -> (Graph, Var, Bound) {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let ids: Vec<_> = store.ids().collect();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let h = g.linear(xv, b.var(ids[0]), b.var(ids[1])).unwrap();
    let h = g.tanh(h);
    let out = g.linear(h, b.var(ids[2]), b.var(ids[3])).unwrap();
    let l = g.mse_loss(out, yv).unwrap();
    (g, l, b)
}

fn main() {
    let mut rng = stream_rng(7, 0);
    let mut store = ParamStore::new();
    store.add("w1", init_normal(&[2, 16], 0.5, &mut rng));
    store.add("b1", Tensor::zeros(&[16]));
    store.add("w2", init_normal(&[16, 1], 0.5, &mut rng));
    store.add("b2", Tensor::zeros(&[1]));

    // target: y = sin(x0) * x1 on a fixed sample
    let x = init_normal(&[64, 2], 1.0, &mut rng);
    let y = Tensor::new(&[64, 1], (0..64).map(|i| x.data()[2 * i].sin() * x.data()[2 * i + 1]).collect()).unwrap();

    let (g, l, b) = loss(&store, &x, &y);
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = grads.get_or_zeros(b.var(id), store.get(id).len());
        for i in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let (gp, lp, _) = loss(&plus, &x, &y);
            let (gm, lm, _) = loss(&minus, &x, &y);
            let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            worst = worst.max((num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1.0));
        }
    }
    println!("{} parameters, worst gradient relative error {worst:.2e}", store.num_scalars());

    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2, 0.0), &store);
    for step in 0..=500 {
        let (g, l, b) = loss(&store, &x, &y);
        if step % 100 == 0 {
            println!("step {step:3}  loss {:.5}", g.value(l).item());
        }
        let grads = g.backward(l).unwrap();
        opt.step(&mut store, &b, &grads);
    }
}
