//! Finite-difference suite: every differentiable op's analytic backward is
//! checked against central differences (h = 1e-5, relative error < 1e-4;
//! 1e-3 on the end-to-end chain and the double-backprop parameter
//! gradients). Random inputs live in [-2, 2], away from kink points.

mod support;

use std::sync::Arc;

use rand::Rng;
use support::{assert_close, finite_diff, random_values, rng_for, FD_STEP};
use xform_core::autodiff::{Graph, NodeId};
use xform_core::networks::{Discriminator, GeneratorRole, MappingNetwork, LATENT_DIM};
use xform_core::transforms::{
    affine_matrix_nodes, center_crop, color_pipeline, hue_rotation_node, make_sampling_grid,
};

/// Check d(probe . op(x)) / dx against finite differences, where `build`
/// maps the leaf node to the op output and `probe` is a fixed random
/// weighting that makes the root scalar sensitive to every output entry.
fn check_op(
    name: &str,
    shape: Vec<usize>,
    x0: &[f64],
    tol: f64,
    build: impl Fn(&mut Graph, NodeId) -> NodeId,
) {
    let eval = |xv: &[f64]| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(shape.clone(), xv.to_vec());
        let y = build(&mut g, x);
        let n = g.values(y).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0).collect();
        let shape_y = g.shape(y).to_vec();
        let wn = g.constant(shape_y, w);
        let prod = g.mul(y, wn).unwrap();
        let root = g.sum(prod);
        g.values(root)[0]
    };

    let mut g = Graph::new();
    let x = g.leaf(shape.clone(), x0.to_vec());
    let y = build(&mut g, x);
    let n = g.values(y).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0).collect();
    let shape_y = g.shape(y).to_vec();
    let wn = g.constant(shape_y, w);
    let prod = g.mul(y, wn).unwrap();
    let root = g.sum(prod);
    g.backward(root).unwrap();
    let analytic = g.grad(x).expect("gradient must exist").to_vec();
    let numeric = finite_diff(eval, x0, FD_STEP);
    assert_close(&analytic, &numeric, tol, name);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut r = rng_for(1);
    let x = random_values(&mut r, 12, &[], 0.0);
    check_op("add_self", vec![12], &x, 1e-4, |g, x| {
        let c = g.constant(vec![12], vec![0.37; 12]);
        g.add(x, c).unwrap()
    });
    check_op("sub", vec![12], &x, 1e-4, |g, x| {
        let c = g.constant(vec![12], vec![-0.5; 12]);
        g.sub(x, c).unwrap()
    });
    check_op("mul_pair", vec![12], &x, 1e-4, |g, x| {
        let c = g.constant(vec![12], (0..12).map(|i| 0.2 + i as f64 * 0.1).collect());
        g.mul(x, c).unwrap()
    });
    check_op("mul_self", vec![12], &x, 1e-4, |g, x| g.mul(x, x).unwrap());
    check_op("affine", vec![12], &x, 1e-4, |g, x| g.affine(x, -1.7, 0.3));
    check_op("square", vec![12], &x, 1e-4, |g, x| g.square(x));
    check_op("tanh", vec![12], &x, 1e-4, |g, x| g.tanh(x));
    check_op("exp", vec![12], &x, 1e-4, |g, x| g.exp(x));
    check_op("sin", vec![12], &x, 1e-4, |g, x| g.sin(x));
    check_op("cos", vec![12], &x, 1e-4, |g, x| g.cos(x));

    let pos: Vec<f64> = x.iter().map(|v| v.abs() + 0.3).collect();
    check_op("sqrt", vec![12], &pos, 1e-4, |g, x| g.sqrt(x));
    check_op("recip", vec![12], &pos, 1e-4, |g, x| g.recip(x));
    check_op("log", vec![12], &pos, 1e-4, |g, x| g.log(x));

    // Kinked ops: inputs pushed away from 0 (and 1 for the clamp) by a
    // margin of 1e-3.
    let kinked = random_values(&mut r, 12, &[0.0, 1.0], 1e-3);
    check_op("abs", vec![12], &kinked, 1e-4, |g, x| g.abs(x));
    check_op("max_zero", vec![12], &kinked, 1e-4, |g, x| g.max_zero(x));
    check_op("leaky_relu", vec![12], &kinked, 1e-4, |g, x| {
        g.leaky_relu(x, 0.2).unwrap()
    });
    check_op("clamp01", vec![12], &kinked, 1e-4, |g, x| g.clamp01(x).unwrap());
}

#[test]
fn reduction_and_shape_ops_match_finite_differences() {
    let mut r = rng_for(2);
    let x = random_values(&mut r, 12, &[], 0.0);
    check_op("sum", vec![12], &x, 1e-4, |g, x| g.sum(x));
    check_op("mean", vec![12], &x, 1e-4, |g, x| g.mean(x));
    check_op("col_sum", vec![3, 4], &x, 1e-4, |g, x| g.col_sum(x).unwrap());
    check_op("row_sum", vec![3, 4], &x, 1e-4, |g, x| g.row_sum(x).unwrap());
    check_op("broadcast_row", vec![12], &x, 1e-4, |g, x| {
        g.broadcast_row(x, 3).unwrap()
    });
    check_op("broadcast_col", vec![12], &x, 1e-4, |g, x| {
        g.broadcast_col(x, 2).unwrap()
    });
    check_op("broadcast_scalar", vec![], &x[..1], 1e-4, |g, x| {
        g.broadcast_scalar(x, 5).unwrap()
    });
    check_op("reshape", vec![12], &x, 1e-4, |g, x| g.reshape(x, vec![3, 4]).unwrap());
    check_op("flatten", vec![3, 4], &x, 1e-4, |g, x| g.flatten(x));
    check_op("slice", vec![12], &x, 1e-4, |g, x| g.slice_vec(x, 3, 5).unwrap());
    check_op("concat", vec![12], &x, 1e-4, |g, x| {
        let c = g.constant(vec![3], vec![0.1, 0.2, 0.3]);
        g.concat(&[x, c, x]).unwrap()
    });
    check_op("row_of", vec![3, 4], &x, 1e-4, |g, x| g.row_of(x, 1).unwrap());
    check_op("stack_rows", vec![12], &x, 1e-4, |g, x| {
        let a = g.slice_vec(x, 0, 6).unwrap();
        let b = g.slice_vec(x, 6, 6).unwrap();
        g.stack_rows(&[a, b, a]).unwrap()
    });
    check_op("crop", vec![2, 3, 2], &x, 1e-4, |g, x| {
        g.crop2d(x, 1, 0, 2, 2).unwrap()
    });
    check_op("mean_hw", vec![2, 3, 1, 2], &x, 1e-4, |g, x| g.mean_hw(x).unwrap());
    check_op("bias_add_x", vec![3, 4], &x, 1e-4, |g, x| {
        let b = g.constant(vec![4], vec![0.5, -0.25, 0.125, 1.0]);
        g.bias_add(x, b).unwrap()
    });
    check_op("bias_add_b", vec![4], &x[..4], 1e-4, |g, b| {
        let xs = g.constant(vec![3, 4], (0..12).map(|i| i as f64 * 0.17 - 1.0).collect());
        g.bias_add(xs, b).unwrap()
    });
}

#[test]
fn matmul_all_transpose_combinations_match_finite_differences() {
    let mut r = rng_for(3);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a0 = random_values(&mut r, 6, &[], 0.0);
        let b0 = random_values(&mut r, 12, &[], 0.0);
        // a logical [2,3] (stored [3,2] if ta), b logical [3,4].
        let a_shape = if ta { vec![3, 2] } else { vec![2, 3] };
        let b_shape = if tb { vec![4, 3] } else { vec![3, 4] };
        let name = format!("matmul ta={ta} tb={tb}");

        let bs = b_shape.clone();
        let b0c = b0.clone();
        check_op(&format!("{name} wrt a"), a_shape.clone(), &a0, 1e-4, move |g, a| {
            let b = g.constant(bs.clone(), b0c.clone());
            g.matmul_t(a, ta, b, tb).unwrap()
        });
        let asx = a_shape.clone();
        let a0c = a0.clone();
        check_op(&format!("{name} wrt b"), b_shape, &b0, 1e-4, move |g, b| {
            let a = g.constant(asx.clone(), a0c.clone());
            g.matmul_t(a, ta, b, tb).unwrap()
        });
    }
}

#[test]
fn conv_ops_match_finite_differences() {
    let mut r = rng_for(4);
    let x = random_values(&mut r, 2 * 2 * 5 * 5, &[], 0.0);
    let k = random_values(&mut r, 3 * 2 * 3 * 3, &[], 0.0);
    let kc = k.clone();
    check_op("conv2d wrt x", vec![2, 2, 5, 5], &x, 1e-4, move |g, xn| {
        let kn = g.constant(vec![3, 2, 3, 3], kc.clone());
        let bn = g.constant(vec![3], vec![0.1, -0.2, 0.3]);
        g.conv2d(xn, kn, bn, 2).unwrap()
    });
    let xc = x.clone();
    check_op("conv2d wrt k", vec![3, 2, 3, 3], &k, 1e-4, move |g, kn| {
        let xn = g.constant(vec![2, 2, 5, 5], xc.clone());
        let bn = g.constant(vec![3], vec![0.1, -0.2, 0.3]);
        g.conv2d(xn, kn, bn, 2).unwrap()
    });
    let xc = x.clone();
    let kc = k.clone();
    check_op("conv2d wrt bias", vec![3], &[0.3, -0.6, 0.9], 1e-4, move |g, bn| {
        let xn = g.constant(vec![2, 2, 5, 5], xc.clone());
        let kn = g.constant(vec![3, 2, 3, 3], kc.clone());
        g.conv2d(xn, kn, bn, 1).unwrap()
    });
}

#[test]
fn bilinear_sampling_matches_finite_differences_in_all_inputs() {
    let mut r = rng_for(5);
    let img = random_values(&mut r, 2 * 4 * 4, &[], 0.0)
        .iter()
        .map(|v| v.abs() / 2.0)
        .collect::<Vec<f64>>();
    // In-range coordinates away from the integer kinks of the tent kernel.
    let coords = |r: &mut rand_chacha::ChaCha20Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let v: f64 = r.gen_range(0.2..2.8);
                if (v - v.round()).abs() > 1e-3 {
                    break v;
                }
            })
            .collect()
    };
    let u0 = coords(&mut r, 9);
    let v0 = coords(&mut r, 9);

    let (u0c, v0c) = (u0.clone(), v0.clone());
    check_op("bilinear wrt image", vec![2, 4, 4], &img, 1e-4, move |g, im| {
        let un = g.constant(vec![9], u0c.clone());
        let vn = g.constant(vec![9], v0c.clone());
        g.bilinear_sample(im, un, vn, 3, 3).unwrap()
    });
    let (imgc, v0c) = (img.clone(), v0.clone());
    check_op("bilinear wrt u", vec![9], &u0, 1e-4, move |g, un| {
        let im = g.constant(vec![2, 4, 4], imgc.clone());
        let vn = g.constant(vec![9], v0c.clone());
        g.bilinear_sample(im, un, vn, 3, 3).unwrap()
    });
    let (imgc, u0c) = (img.clone(), u0.clone());
    check_op("bilinear wrt v", vec![9], &v0, 1e-4, move |g, vn| {
        let im = g.constant(vec![2, 4, 4], imgc.clone());
        let un = g.constant(vec![9], u0c.clone());
        g.bilinear_sample(im, un, vn, 3, 3).unwrap()
    });
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut r = rng_for(6);
    let logits = random_values(&mut r, 4 * 3, &[], 0.0);
    let labels = Arc::new(vec![2usize, 0, 1, 2]);
    let eval = |xv: &[f64]| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(vec![4, 3], xv.to_vec());
        let loss = g.softmax_cross_entropy(x, labels.clone()).unwrap();
        g.values(loss)[0]
    };
    let mut g = Graph::new();
    let x = g.leaf(vec![4, 3], logits.clone());
    let loss = g.softmax_cross_entropy(x, labels.clone()).unwrap();
    g.backward(loss).unwrap();
    let analytic = g.grad(x).unwrap().to_vec();
    let numeric = finite_diff(eval, &logits, FD_STEP);
    assert_close(&analytic, &numeric, 1e-4, "softmax_cross_entropy");
}

#[test]
fn affine_parameter_paths_match_finite_differences() {
    // Normalized parameters -> matrix -> grid -> bilinear -> crop: gradient
    // with respect to all six parameters.
    let mut r = rng_for(7);
    let img: Vec<f64> = (0..6 * 6).map(|_| r.gen_range(0.0..1.0)).collect();
    let p0: Vec<f64> = (0..6).map(|_| r.gen_range(-0.4..0.4)).collect();
    let eval = |pv: &[f64]| -> f64 {
        let mut g = Graph::new();
        let p = g.leaf(vec![6], pv.to_vec());
        let mut scalars = [NodeId(0); 6];
        for (j, slot) in scalars.iter_mut().enumerate() {
            let s = g.slice_vec(p, j, 1).unwrap();
            *slot = g.reshape(s, vec![]).unwrap();
        }
        let image = g.constant(vec![1, 6, 6], img.clone());
        let m = affine_matrix_nodes(&mut g, &scalars).unwrap();
        let grid = make_sampling_grid(&mut g, &m, 6, 6, 6, 6).unwrap();
        let warped = g.bilinear_sample(image, grid.u, grid.v, 6, 6).unwrap();
        let cropped = center_crop(&mut g, warped, 4, 4).unwrap();
        let root = g_sum(&mut g, cropped);
        g.values(root)[0]
    };
    let mut g = Graph::new();
    let p = g.leaf(vec![6], p0.clone());
    let mut scalars = [NodeId(0); 6];
    for (j, slot) in scalars.iter_mut().enumerate() {
        let s = g.slice_vec(p, j, 1).unwrap();
        *slot = g.reshape(s, vec![]).unwrap();
    }
    let image = g.constant(vec![1, 6, 6], img.clone());
    let m = affine_matrix_nodes(&mut g, &scalars).unwrap();
    let grid = make_sampling_grid(&mut g, &m, 6, 6, 6, 6).unwrap();
    let warped = g.bilinear_sample(image, grid.u, grid.v, 6, 6).unwrap();
    let cropped = center_crop(&mut g, warped, 4, 4).unwrap();
    let root = g_sum(&mut g, cropped);
    g.backward(root).unwrap();
    let analytic = g.grad(p).unwrap().to_vec();
    let numeric = finite_diff(eval, &p0, FD_STEP);
    assert_close(&analytic, &numeric, 1e-4, "affine parameter path");
}

fn g_sum(g: &mut Graph, x: NodeId) -> NodeId {
    g.sum(x)
}

#[test]
fn color_parameter_paths_match_finite_differences() {
    let mut r = rng_for(8);
    // Stay inside (0,1) after the stages so the clamp is inactive.
    let img: Vec<f64> = (0..3 * 4 * 4).map(|_| r.gen_range(0.25..0.75)).collect();
    let p0: Vec<f64> = (0..4).map(|_| r.gen_range(-0.3..0.3)).collect();
    let eval = |pv: &[f64]| -> f64 {
        let mut g = Graph::new();
        let p = g.leaf(vec![4], pv.to_vec());
        let mut scalars = [NodeId(0); 4];
        for (j, slot) in scalars.iter_mut().enumerate() {
            let s = g.slice_vec(p, j, 1).unwrap();
            *slot = g.reshape(s, vec![]).unwrap();
        }
        let image = g.constant(vec![3, 4, 4], img.clone());
        let out = color_pipeline(&mut g, image, &scalars).unwrap();
        let root = g_sum(&mut g, out);
        g.values(root)[0]
    };
    let mut g = Graph::new();
    let p = g.leaf(vec![4], p0.clone());
    let mut scalars = [NodeId(0); 4];
    for (j, slot) in scalars.iter_mut().enumerate() {
        let s = g.slice_vec(p, j, 1).unwrap();
        *slot = g.reshape(s, vec![]).unwrap();
    }
    let image = g.constant(vec![3, 4, 4], img.clone());
    let out = color_pipeline(&mut g, image, &scalars).unwrap();
    let root = g_sum(&mut g, out);
    g.backward(root).unwrap();
    let analytic = g.grad(p).unwrap().to_vec();
    let numeric = finite_diff(eval, &p0, FD_STEP);
    assert_close(&analytic, &numeric, 1e-4, "color parameter path");

    // Hue alone as well, via its dedicated entry point.
    let h0 = [0.21];
    let eval_h = |pv: &[f64]| -> f64 {
        let mut g = Graph::new();
        let alpha = g.leaf(vec![], pv.to_vec());
        let image = g.constant(vec![3, 4, 4], img.clone());
        let out = hue_rotation_node(&mut g, image, alpha).unwrap();
        let root = g_sum(&mut g, out);
        g.values(root)[0]
    };
    let mut g = Graph::new();
    let alpha = g.leaf(vec![], h0.to_vec());
    let image2 = g.constant(vec![3, 4, 4], img.clone());
    let out = hue_rotation_node(&mut g, image2, alpha).unwrap();
    let root = g_sum(&mut g, out);
    g.backward(root).unwrap();
    let analytic = g.grad(alpha).unwrap().to_vec();
    let numeric = finite_diff(eval_h, &h0, FD_STEP);
    assert_close(&analytic, &numeric, 1e-4, "hue parameter path");
}

#[test]
fn gradient_accumulation_across_consumers_is_additive() {
    let mut r = rng_for(9);
    let x0 = random_values(&mut r, 8, &[], 1e-3);
    let mut g = Graph::new();
    let x = g.leaf(vec![8], x0.clone());
    let a = g.tanh(x);
    let b = g.square(x);
    let c = g.exp(x);
    let ab = g.add(a, b).unwrap();
    let abc = g.add(ab, c).unwrap();
    let root = g.sum(abc);
    g.backward(root).unwrap();
    let combined = g.grad(x).unwrap().to_vec();
    // Sum of the three per-consumer gradients, each from its own graph.
    let mut per_sum = vec![0.0; 8];
    for which in 0..3 {
        let mut g1 = Graph::new();
        let x1 = g1.leaf(vec![8], x0.clone());
        let y = match which {
            0 => g1.tanh(x1),
            1 => g1.square(x1),
            _ => g1.exp(x1),
        };
        let root1 = g1.sum(y);
        g1.backward(root1).unwrap();
        for (acc, gi) in per_sum.iter_mut().zip(g1.grad(x1).unwrap()) {
            *acc += gi;
        }
    }
    assert_close(&combined, &per_sum, 1e-12, "consumer accumulation");
}

#[test]
fn double_backprop_of_critic_input_gradient_matches_finite_differences() {
    // 3-layer leaky-rectifier network D; check d/dW of |dD/dx|^2 against
    // central differences over every layer's weights.
    let mut r = rng_for(10);
    let dims = [5usize, 7, 4, 1];
    let x0 = random_values(&mut r, dims[0], &[], 1e-3);
    let weights: Vec<Vec<f64>> = (0..3)
        .map(|l| random_values(&mut r, dims[l] * dims[l + 1], &[], 0.0))
        .collect();

    let norm_sq = |w_all: &[Vec<f64>], g: &mut Graph| -> (NodeId, Vec<NodeId>) {
        let x = g.leaf(vec![1, dims[0]], x0.clone());
        let mut h = x;
        let mut w_nodes = Vec::new();
        for l in 0..3 {
            let w = g.leaf(vec![dims[l], dims[l + 1]], w_all[l].clone());
            w_nodes.push(w);
            h = g.matmul(h, w).unwrap();
            if l < 2 {
                h = g.leaky_relu(h, 0.2).unwrap();
            }
        }
        let score = g.sum(h);
        let grad_x = g.input_gradient_node(score, x).unwrap();
        let sq = g.square(grad_x);
        (g.sum(sq), w_nodes)
    };

    for layer in 0..3 {
        let eval = |wv: &[f64]| -> f64 {
            let mut w_all = weights.clone();
            w_all[layer] = wv.to_vec();
            let mut g = Graph::new();
            let (root, _) = norm_sq(&w_all, &mut g);
            g.values(root)[0]
        };
        let mut g = Graph::new();
        let (root, w_nodes) = norm_sq(&weights, &mut g);
        g.backward(root).unwrap();
        let analytic = g.grad(w_nodes[layer]).unwrap().to_vec();
        let numeric = finite_diff(eval, &weights[layer], FD_STEP);
        assert_close(&analytic, &numeric, 1e-3, &format!("double backprop layer {layer}"));
    }
}

#[test]
fn input_gradient_node_second_order_example() {
    // root = sum((Wx)^2), wrt = x: the gradient node is 2 W^T W x; its
    // gradient with respect to W is checked against finite differences.
    let mut r = rng_for(11);
    let w0 = random_values(&mut r, 6, &[], 0.0);
    let x0 = random_values(&mut r, 3, &[], 0.0);
    let eval = |wv: &[f64]| -> f64 {
        let mut g = Graph::new();
        let w = g.leaf(vec![2, 3], wv.to_vec());
        let x = g.leaf(vec![3, 1], x0.clone());
        let wx = g.matmul(w, x).unwrap();
        let sq = g.square(wx);
        let root = g.sum(sq);
        let gx = g.input_gradient_node(root, x).unwrap();
        let weights = g.constant(vec![3, 1], vec![0.2, -0.4, 0.9]);
        let weighted = g.mul(gx, weights).unwrap();
        let s = g.sum(weighted);
        g.values(s)[0]
    };

    let mut g = Graph::new();
    let w = g.leaf(vec![2, 3], w0.clone());
    let x = g.leaf(vec![3, 1], x0.clone());
    let wx = g.matmul(w, x).unwrap();
    let sq = g.square(wx);
    let root = g.sum(sq);
    let gx = g.input_gradient_node(root, x).unwrap();

    // Value check: 2 W^T W x, computed by hand.
    let mut expect = vec![0.0; 3];
    let wx_vals: Vec<f64> = (0..2)
        .map(|i| (0..3).map(|j| w0[i * 3 + j] * x0[j]).sum())
        .collect();
    for j in 0..3 {
        for i in 0..2 {
            expect[j] += 2.0 * w0[i * 3 + j] * wx_vals[i];
        }
    }
    assert_close(g.values(gx), &expect, 1e-12, "2 WtWx value");

    let weights = g.constant(vec![3, 1], vec![0.2, -0.4, 0.9]);
    let weighted = g.mul(gx, weights).unwrap();
    let outer = g.sum(weighted);
    g.backward(outer).unwrap();
    let analytic = g.grad(w).unwrap().to_vec();
    let numeric = finite_diff(eval, &w0, FD_STEP);
    assert_close(&analytic, &numeric, 1e-3, "d(2WtWx)/dW");
}

#[test]
fn end_to_end_generator_chain_matches_finite_differences() {
    // Generator final layer -> transform parameters -> affine matrix ->
    // grid -> bilinear -> crop -> critic score, differentiated with respect
    // to the generator's final-layer weights.
    let gen = MappingNetwork::new(GeneratorRole::AffineFull, 31, 1);
    let disc = Discriminator::new(4 * 4, 32, 3);
    let mut r = rng_for(12);
    let z: Vec<f64> = (0..LATENT_DIM).map(|_| r.gen_range(-1.0..1.0)).collect();
    let img: Vec<f64> = (0..6 * 6).map(|_| r.gen_range(0.0..1.0)).collect();
    let w_final0 = gen.layers[2].w.values.clone();

    let run = |w_final: &[f64]| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let zn = g.constant(vec![1, LATENT_DIM], z.clone());
        let mut net = gen.clone();
        net.layers[2].w.values = w_final.to_vec();
        let bound = net.bind(&mut g, true);
        let theta = bound.forward(&mut g, zn).unwrap();
        let row = g.row_of(theta, 0).unwrap();
        let mut scalars = [NodeId(0); 6];
        for (j, slot) in scalars.iter_mut().enumerate() {
            let s = g.slice_vec(row, j, 1).unwrap();
            *slot = g.reshape(s, vec![]).unwrap();
        }
        let image = g.constant(vec![1, 6, 6], img.clone());
        let m = affine_matrix_nodes(&mut g, &scalars).unwrap();
        let grid = make_sampling_grid(&mut g, &m, 6, 6, 6, 6).unwrap();
        let warped = g.bilinear_sample(image, grid.u, grid.v, 6, 6).unwrap();
        let cropped = center_crop(&mut g, warped, 4, 4).unwrap();
        let flat = g.flatten(cropped);
        let batch = g.stack_rows(&[flat]).unwrap();
        let db = disc.bind(&mut g, false);
        let scores = db.forward(&mut g, batch).unwrap();
        let root = g.mean(scores);
        let value = g.values(root)[0];
        g.backward(root).unwrap();
        let w_node = bound.layers[2].w;
        let grad = g.grad(w_node).map(|v| v.to_vec());
        (value, grad)
    };

    let (_, grad) = run(&w_final0);
    let analytic = grad.expect("generator gradient");
    let numeric = finite_diff(|wv| run(wv).0, &w_final0, FD_STEP);
    assert_close(&analytic, &numeric, 1e-3, "end-to-end generator chain");
}

#[test]
fn determinism_same_seed_bitwise_identical_gradients() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut r = rng_for(99);
        let x0 = random_values(&mut r, 16, &[], 1e-3);
        let mut g = Graph::new();
        let x = g.leaf(vec![4, 4], x0.clone());
        let t = g.tanh(x);
        let sq = g.square(t);
        let l = g.leaky_relu(sq, 0.2).unwrap();
        let root = g.mean(l);
        g.backward(root).unwrap();
        (g.values(root).to_vec(), g.grad(x).unwrap().to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}
