//! Central-difference checks for every differentiable op.

use koopman_lorenz::rng::stream_rng;
use koopman_lorenz::tensor::{init_normal, Graph, SparseTerm, Tensor, Var};

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn loss_at(inputs: &[Tensor], f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Max relative error between the analytic and numeric gradients.
fn gradcheck(inputs: Vec<Tensor>, f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.len());
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let num = (loss_at(&plus, f) - loss_at(&minus, f)) / (2.0 * h);
            let err = (num - analytic[i]).abs() / (1.0 + num.abs().max(analytic[i].abs()));
            worst = worst.max(err);
        }
    }
    worst
}

fn rand(shape: &[usize], stream: u64) -> Tensor {
    init_normal(shape, 1.0, &mut stream_rng(99, stream))
}

/// Reduces any tensor to a scalar with a fixed non-uniform weighting.
fn probe(g: &mut Graph, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect()).unwrap();
    let w = g.constant(w);
    let m = g.mul(v, w).unwrap();
    g.sum_squares(m)
}

const TOL: f64 = 1e-6;

#[test]
fn elementwise_ops() {
    let ins = vec![rand(&[3, 4], 0), rand(&[3, 4], 1)];
    let cases: Vec<Box<Build>> = vec![
        Box::new(|g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            probe(g, y)
        }),
        Box::new(|g, v| {
            let y = g.sub(v[0], v[1]).unwrap();
            probe(g, y)
        }),
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            probe(g, y)
        }),
        Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            probe(g, y)
        }),
        Box::new(|g, v| {
            let y = g.gelu(v[0]);
            probe(g, y)
        }),
        Box::new(|g, v| {
            let y = g.tanh(v[0]);
            probe(g, y)
        }),
        Box::new(|g, v| {
            let y = g.relu(v[0]);
            probe(g, y)
        }),
        Box::new(|g, v| g.mse_loss(v[0], v[1]).unwrap()),
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            g.mean(y)
        }),
    ];
    for (i, c) in cases.iter().enumerate() {
        let e = gradcheck(ins.clone(), c.as_ref());
        assert!(e < TOL, "case {i}: {e}");
    }
}

#[test]
fn matmul_and_linear() {
    let ins = vec![rand(&[5, 3], 2), rand(&[3, 4], 3), rand(&[4], 4)];
    let e = gradcheck(ins, &|g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        probe(g, y)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn softmax_and_layer_norm() {
    let ins = vec![rand(&[4, 6], 5), rand(&[6], 6), rand(&[6], 7)];
    let e = gradcheck(ins.clone(), &|g, v| {
        let y = g.softmax(v[0]);
        probe(g, y)
    });
    assert!(e < TOL, "softmax {e}");
    let e = gradcheck(ins, &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        probe(g, y)
    });
    assert!(e < TOL, "layer_norm {e}");
}

#[test]
fn structural_ops() {
    let ins = vec![rand(&[4, 3], 8), rand(&[4, 2], 9)];
    let e = gradcheck(ins, &|g, v| {
        let c = g.concat_cols(&[v[0], v[1], v[0]]).unwrap();
        let s = g.slice_cols(c, 1, 5).unwrap();
        let r = g.slice_rows(s, 1, 3).unwrap();
        let t = g.transpose(r);
        let sel = g.select_rows(t, &[0, 0, 4, 2]).unwrap();
        probe(g, sel)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn masked_softmax_matches_and_differentiates() {
    let ins = vec![rand(&[5, 5], 10)];
    let e = gradcheck(ins, &|g, v| {
        let m = g.causal_mask(v[0]).unwrap();
        let p = g.softmax(m);
        probe(g, p)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn sparse_assemble() {
    let ins = vec![rand(&[3], 11), rand(&[2], 12)];
    let e = gradcheck(ins, &|g, v| {
        let terms = vec![
            SparseTerm { input: 0, src: 0, dst: 0, coeff: 1.0 },
            SparseTerm { input: 0, src: 1, dst: 4, coeff: 1.0 },
            SparseTerm { input: 1, src: 0, dst: 1, coeff: 1.0 },
            SparseTerm { input: 1, src: 0, dst: 3, coeff: -1.0 },
            SparseTerm { input: 1, src: 1, dst: 3, coeff: 0.5 },
        ];
        let k = g.sparse_assemble(&[v[0], v[1]], terms, &[3, 3]).unwrap();
        probe(g, k)
    });
    assert!(e < TOL, "{e}");
}

/// Unfused attention from primitive ops, one head at a time.
fn reference_attention(g: &mut Graph, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
    let hd = g.shape(q)[1] / heads;
    let mut rows = Vec::new();
    for b in 0..batch {
        let mut cols = Vec::new();
        for h in 0..heads {
            let qs = g.slice_rows(q, b * seq, seq).unwrap();
            let qs = g.slice_cols(qs, h * hd, hd).unwrap();
            let ks = g.slice_rows(k, b * seq, seq).unwrap();
            let ks = g.slice_cols(ks, h * hd, hd).unwrap();
            let vs = g.slice_rows(v, b * seq, seq).unwrap();
            let vs = g.slice_cols(vs, h * hd, hd).unwrap();
            let kt = g.transpose(ks);
            let s = g.matmul(qs, kt).unwrap();
            let s = g.scale(s, 1.0 / (hd as f64).sqrt());
            let s = g.causal_mask(s).unwrap();
            let p = g.softmax(s);
            cols.push(g.matmul(p, vs).unwrap());
        }
        rows.push(g.concat_cols(&cols).unwrap());
    }
    // stack per-sequence blocks vertically via transposes
    let cols: Vec<Var> = rows.into_iter().map(|r| g.transpose(r)).collect();
    let wide = g.concat_cols(&cols).unwrap();
    g.transpose(wide)
}

#[test]
fn fused_attention_matches_composition() {
    let (batch, seq, heads, d) = (2, 5, 3, 6);
    let ins = vec![rand(&[batch * seq, d], 13), rand(&[batch * seq, d], 14), rand(&[batch * seq, d], 15)];
    let mut g = Graph::new();
    let v: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
    let fused = g.causal_attention(v[0], v[1], v[2], batch, seq, heads).unwrap();
    let refr = reference_attention(&mut g, v[0], v[1], v[2], batch, seq, heads);
    assert_eq!(g.shape(fused), g.shape(refr));
    let diff = g
        .value(fused)
        .data()
        .iter()
        .zip(g.value(refr).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "forward {diff}");

    let fused_grad = move |g: &mut Graph, v: &[Var]| {
        let y = g.causal_attention(v[0], v[1], v[2], batch, seq, heads).unwrap();
        probe(g, y)
    };
    let e = gradcheck(ins.clone(), &fused_grad);
    assert!(e < TOL, "fused {e}");

    let mut g1 = Graph::new();
    let v1: Vec<Var> = ins.iter().map(|t| g1.param(t.clone())).collect();
    let l1 = fused_grad(&mut g1, &v1);
    let gr1 = g1.backward(l1).unwrap();
    let mut g2 = Graph::new();
    let v2: Vec<Var> = ins.iter().map(|t| g2.param(t.clone())).collect();
    let y2 = reference_attention(&mut g2, v2[0], v2[1], v2[2], batch, seq, heads);
    let l2 = probe(&mut g2, y2);
    let gr2 = g2.backward(l2).unwrap();
    for k in 0..3 {
        let (a, b) = (gr1.get(v1[k]).unwrap(), gr2.get(v2[k]).unwrap());
        let m = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(m < 1e-10, "input {k}: {m}");
    }
}

#[test]
fn fan_out_accumulates() {
    let ins = vec![rand(&[2, 2], 16)];
    let e = gradcheck(ins, &|g, v| {
        let a = g.mul(v[0], v[0]).unwrap();
        let b = g.add(a, v[0]).unwrap();
        let c = g.matmul(b, v[0]).unwrap();
        probe(g, c)
    });
    assert!(e < TOL, "{e}");
}
