//! Case tables for the finite-difference gradient checks, shared between
//! the dedicated gradient suite and the acceptance run. Each function
//! covers one differentiable op over at least five random shapes and
//! panics on the first tolerance violation.

use super::*;
use rand::Rng;
use slimnext::tensor::{seeded_rng, tape::Tape, Tensor};

pub fn conv2d_cases() {
    // (n, c, h, w, o, k, stride, pad, groups)
    let cases = [
        (1, 2, 5, 5, 3, 3, 1, 0, 1),
        (2, 3, 4, 4, 2, 2, 2, 1, 1),
        (1, 4, 5, 5, 4, 3, 1, 1, 4), // depthwise
        (1, 4, 3, 3, 2, 3, 1, 2, 2), // grouped, padding past the kernel
        (2, 1, 6, 4, 2, 3, 3, 1, 1),
        (1, 6, 7, 7, 6, 7, 1, 3, 6), // depthwise 7x7 pad 3, the block shape
    ];
    for (case, &(n, c, h, w, o, k, stride, pad, groups)) in cases.iter().enumerate() {
        let mut rng = seeded_rng(900 + case as u64);
        let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng);
        let wt = Tensor::uniform(&[o, c / groups, k, k], -0.7, 0.7, &mut rng);
        let b = Tensor::uniform(&[o], -0.3, 0.3, &mut rng);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let proj = projection(n * o * ho * wo, &mut rng);
        check_gradients(
            &[x, wt, b],
            &|tape: &mut Tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), stride, pad, groups).unwrap();
                tape.weighted_sum(y, &proj).unwrap()
            },
            &|p: &[T64]| {
                let y = conv2d64(&p[0], &p[1], Some(&p[2]), stride, pad, groups);
                weighted_sum64(&y, &proj)
            },
        );
    }
}

pub fn linear_cases() {
    let cases: [(&[usize], usize); 5] =
        [(&[3, 4], 2), (&[6, 2], 5), (&[2, 3, 4], 3), (&[2, 2, 2, 3], 2), (&[1, 5], 4)];
    for (case, &(xshape, fout)) in cases.iter().enumerate() {
        let mut rng = seeded_rng(910 + case as u64);
        let fin = *xshape.last().unwrap();
        let p: usize = xshape.iter().product::<usize>() / fin;
        let x = Tensor::uniform(xshape, -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[fout, fin], -0.7, 0.7, &mut rng);
        let b = Tensor::uniform(&[fout], -0.3, 0.3, &mut rng);
        let proj = projection(p * fout, &mut rng);
        check_gradients(
            &[x, w, b],
            &|tape: &mut Tape, vars| {
                let y = tape.linear(vars[0], vars[1], Some(vars[2])).unwrap();
                tape.weighted_sum(y, &proj).unwrap()
            },
            &|p: &[T64]| weighted_sum64(&linear64(&p[0], &p[1], Some(&p[2])), &proj),
        );
    }
}

pub fn layer_norm_cases() {
    // (rows-shape, stat_features); the last two exercise the extracted-model
    // form where statistics still count the removed (zero) channels.
    let cases: [(&[usize], usize); 6] = [
        (&[3, 4], 4),
        (&[2, 6], 6),
        (&[2, 2, 5], 5),
        (&[4, 3], 3),
        (&[2, 4], 7),
        (&[3, 2], 10),
    ];
    for (case, &(xshape, stat_features)) in cases.iter().enumerate() {
        let mut rng = seeded_rng(920 + case as u64);
        let f = *xshape.last().unwrap();
        let x = Tensor::uniform(xshape, -1.0, 1.0, &mut rng);
        let gamma = Tensor::uniform(&[f], 0.5, 1.5, &mut rng);
        let beta = Tensor::uniform(&[f], -0.5, 0.5, &mut rng);
        let proj = projection(xshape.iter().product(), &mut rng);
        check_gradients(
            &[x, gamma, beta],
            &|tape: &mut Tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-6, stat_features).unwrap();
                tape.weighted_sum(y, &proj).unwrap()
            },
            &|p: &[T64]| {
                weighted_sum64(&layer_norm64(&p[0], &p[1], &p[2], 1e-6, stat_features), &proj)
            },
        );
    }
}

pub fn gelu_cases() {
    let shapes: [&[usize]; 5] = [&[7], &[3, 4], &[2, 2, 3], &[10], &[4, 4]];
    for (case, shape) in shapes.iter().enumerate() {
        let mut rng = seeded_rng(930 + case as u64);
        let x = Tensor::uniform(shape, -2.0, 2.0, &mut rng);
        let proj = projection(shape.iter().product(), &mut rng);
        check_gradients(
            &[x],
            &|tape: &mut Tape, vars| {
                let y = tape.gelu(vars[0]).unwrap();
                tape.weighted_sum(y, &proj).unwrap()
            },
            &|p: &[T64]| weighted_sum64(&gelu64(&p[0]), &proj),
        );
    }
}

pub fn global_avg_pool_cases() {
    let shapes: [[usize; 4]; 5] =
        [[1, 2, 3, 3], [2, 3, 2, 2], [1, 4, 1, 1], [3, 1, 4, 2], [2, 2, 5, 5]];
    for (case, shape) in shapes.iter().enumerate() {
        let mut rng = seeded_rng(940 + case as u64);
        let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
        let proj = projection(shape[0] * shape[1], &mut rng);
        check_gradients(
            &[x],
            &|tape: &mut Tape, vars| {
                let y = tape.global_avg_pool(vars[0]).unwrap();
                tape.weighted_sum(y, &proj).unwrap()
            },
            &|p: &[T64]| weighted_sum64(&global_avg_pool64(&p[0]), &proj),
        );
    }
}

pub fn cross_entropy_cases() {
    let cases = [(2usize, 3usize), (4, 10), (1, 2), (3, 5), (6, 4)];
    for (case, &(n, k)) in cases.iter().enumerate() {
        let mut rng = seeded_rng(950 + case as u64);
        let logits = Tensor::uniform(&[n, k], -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        check_gradients(
            &[logits],
            &|tape: &mut Tape, vars| tape.cross_entropy(vars[0], &labels).unwrap(),
            &|p: &[T64]| cross_entropy64(&p[0], &labels),
        );
    }
}

pub fn residual_add_and_permute_cases() {
    for case in 0..5 {
        let mut rng = seeded_rng(960 + case);
        let shape = [2, 2 + case as usize % 3, 3, 3];
        let a = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let proj = projection(shape.iter().product(), &mut rng);
        check_gradients(
            &[a, b],
            &|tape: &mut Tape, vars| {
                let nhwc = tape.channels_last(vars[0]).unwrap();
                let back = tape.channels_first(nhwc).unwrap();
                let y = tape.add(back, vars[1]).unwrap();
                tape.weighted_sum(y, &proj).unwrap()
            },
            &|p: &[T64]| {
                let back = channels_first64(&channels_last64(&p[0]));
                weighted_sum64(&add64(&back, &p[1]), &proj)
            },
        );
    }
}
