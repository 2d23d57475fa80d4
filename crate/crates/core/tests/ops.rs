//! Tape forward values against naive loop implementations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radar_core::diff::{Tape, Tensor, BCE_CLAMP};

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
            }
        }
    }
    out
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for f in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((f * c + ci) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((n * o + f) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (vec![b, o, oh, ow], out)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let a = random(vec![m, k], &mut rng);
        let b = random(vec![k, n], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone(), false), tape.leaf(b.clone(), false));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(c), &[m, n]);
        close(tape.value(c).data(), &naive_matmul(&a, &b), 1e-12);
    }
}

#[test]
fn conv2d_matches_six_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3][rng.gen_range(0..2)];
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let s = loop {
            let s = rng.gen_range(k.max(2)..7);
            if (s + 2 * pad - k) % stride == 0 {
                break s;
            }
        };
        let x = random(vec![b, c, s, s], &mut rng);
        let w = random(vec![o, c, k, k], &mut rng);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false));
        let y = tape.conv2d(vx, vw, stride, pad).unwrap();
        let (shape, want) = naive_conv(&x, &w, stride, pad);
        assert_eq!(tape.shape(y), shape.as_slice());
        close(tape.value(y).data(), &want, 1e-12);
    }
}

#[test]
fn conv2d_weight_gradient_matches_loop() {
    // d(sum y)/dw[f,c,ky,kx] is the sum of the input pixels that weight touches.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(vec![2, 2, 5, 5], &mut rng);
    let w = random(vec![3, 2, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone(), false);
    let vw = tape.leaf(w.clone(), true);
    let y = tape.conv2d(vx, vw, 1, 1).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.take_grad(vw).unwrap();
    let mut want = vec![0.0; w.numel()];
    for f in 0..3 {
        for ci in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for n in 0..2 {
                        for yo in 0..5 {
                            for xo in 0..5 {
                                let (iy, ix) = (yo as isize + ky as isize - 1, xo as isize + kx as isize - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()[((n * 2 + ci) * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    want[((f * 2 + ci) * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    }
    close(&g, &want, 1e-12);
}

#[test]
fn mean_pool_averages_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(vec![1, 2, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone(), false);
    let y = tape.mean_pool(vx, 2).unwrap();
    let mut want = vec![];
    for c in 0..2 {
        for by in 0..2 {
            for bx in 0..2 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += x.data()[(c * 4 + by * 2 + dy) * 4 + bx * 2 + dx];
                    }
                }
                want.push(acc / 4.0);
            }
        }
    }
    close(tape.value(y).data(), &want, 1e-14);
}

#[test]
fn cross_entropy_matches_softmax_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random(vec![4, 5], &mut rng);
    let labels = [0, 4, 2, 2];
    let mut tape = Tape::new();
    let vz = tape.leaf(z.clone(), true);
    let l = tape.cross_entropy(vz, &labels).unwrap();
    let mut want = 0.0;
    let mut grad = vec![0.0; 20];
    for i in 0..4 {
        let row = &z.data()[i * 5..(i + 1) * 5];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        want -= (row[labels[i]].exp() / denom).ln() / 4.0;
        for j in 0..5 {
            let p = row[j].exp() / denom;
            grad[i * 5 + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / 4.0;
        }
    }
    close(tape.value(l).data(), &[want], 1e-13);
    tape.backward(l).unwrap();
    close(&tape.take_grad(vz).unwrap(), &grad, 1e-13);
}

#[test]
fn bce_matches_formula_with_clamp() {
    let p = [0.0, 1e-9, 0.3, 0.7, 1.0 - 1e-9, 1.0];
    let t = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let mut tape = Tape::new();
    let vp = tape.leaf(Tensor::new(vec![6], p.to_vec()).unwrap(), true);
    let l = tape.bce_items(vp, &t).unwrap();
    let s = tape.sum(l).unwrap();
    let mut want = vec![];
    let mut grad = vec![];
    for (&pi, &ti) in p.iter().zip(&t) {
        let pc: f64 = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        want.push(-(ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln()));
        grad.push(-(ti / pc) + (1.0 - ti) / (1.0 - pc));
    }
    close(tape.value(l).data(), &want, 1e-12);
    tape.backward(s).unwrap();
    close(&tape.take_grad(vp).unwrap(), &grad, 1e-9);
}

proptest! {
    #[test]
    fn sigmoid_matches_logistic(v in -700.0f64..700.0) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![v]).unwrap(), false);
        let y = tape.sigmoid(x).unwrap();
        let got = tape.value(y).data()[0];
        let want = if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) };
        prop_assert!((got - want).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn relu_is_max_with_zero(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![v.len()], v.clone()).unwrap(), false);
        let y = tape.relu(x).unwrap();
        let want: Vec<f64> = v.iter().map(|a| a.max(0.0)).collect();
        prop_assert_eq!(tape.value(y).data(), want.as_slice());
    }
}
