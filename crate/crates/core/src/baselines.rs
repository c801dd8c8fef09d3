//! Full-resolution attention baselines with pairwise-interaction counters,
//! and a small scaling benchmark against the supernode path.

use std::time::Instant;

use serde::Serialize;

use crate::afm::{afm_on_tape, AfmConfig, AfmParams};
use crate::counter::OpCounter;
use crate::error::{HgfeError, Result};
use crate::init::{derive_seed, init_uniform, uniform_tensor};
use crate::tape::Tape;
use crate::tensor::{matmul, DType, Tensor};
use crate::window::{PartitionMode, WindowGrid};

/// Normalization `C(x)` of the non-local response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonlocalNorm {
    /// Softmax of the affinities over j.
    #[default]
    Softmax,
    /// Raw affinities divided by the number of positions.
    Mean,
}

/// Linear maps phi, psi and g, each C×C.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlocalParams {
    pub phi: Tensor,
    pub psi: Tensor,
    pub g: Tensor,
    pub norm: NonlocalNorm,
}

impl NonlocalParams {
    pub fn init(seed: u64, channels: usize) -> Self {
        let c = channels;
        NonlocalParams {
            phi: init_uniform(derive_seed(seed, 1), &[c, c], c),
            psi: init_uniform(derive_seed(seed, 2), &[c, c], c),
            g: init_uniform(derive_seed(seed, 3), &[c, c], c),
            norm: NonlocalNorm::Softmax,
        }
    }
}

/// Row-streamed `softmax(scores) V` (or `scores V / N` for [`NonlocalNorm::Mean`]),
/// where `scores_ij = q_i . k_j * scale`.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64, norm: NonlocalNorm, counter: &mut OpCounter) -> Tensor {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dv = v.shape()[1];
    let mut out = vec![0.0; n * dv];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let qi = q.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        match norm {
            NonlocalNorm::Softmax => {
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    total += *s;
                }
                scores.iter_mut().for_each(|s| *s /= total);
            }
            NonlocalNorm::Mean => scores.iter_mut().for_each(|s| *s /= n as f64),
        }
        let row = &mut out[i * dv..(i + 1) * dv];
        for (j, &w) in scores.iter().enumerate() {
            for (o, x) in row.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    counter.add_pairwise((n * n) as u64);
    counter.add_macs((n * n * (d + dv)) as u64);
    Tensor::new(&[n, dv], out)
        .expect("attention output shape")
        .to_dtype(q.dtype())
}

/// `softmax(Q K^T / sqrt(d)) V` over N tokens.
pub fn dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    if k.dims2()? != (n, d) || v.dims2()?.0 != n {
        return Err(HgfeError::contract(format!(
            "Q {:?}, K {:?}, V {:?} must share N (and d for Q, K)",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if n == 0 {
        return Err(HgfeError::EmptyInput("attention over zero tokens".into()));
    }
    Ok(attend(q, k, v, 1.0 / (d as f64).sqrt(), NonlocalNorm::Softmax, counter))
}

/// Non-local block response on one C×H×W sample:
/// `y_i = (1/C(x)) sum_j (phi x_i . psi x_j) g x_j`.
pub fn nonlocal_forward(x: &Tensor, params: &NonlocalParams, counter: &mut OpCounter) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(HgfeError::shape(format!("expected C×H×W, got {:?}", x.shape())));
    };
    for m in [&params.phi, &params.psi, &params.g] {
        if m.shape() != [c, c] {
            return Err(HgfeError::shape(format!("projection {:?} is not {c}×{c}", m.shape())));
        }
    }
    if !x.all_finite() {
        return Err(HgfeError::contract("input has non-finite entries"));
    }
    let n = h * w;
    // Positions as rows.
    let xs = crate::tensor::transpose(&x.reshape(&[c, n])?)?;
    let theta = matmul(&xs, &params.phi)?;
    let psi = matmul(&xs, &params.psi)?;
    let g = matmul(&xs, &params.g)?;
    counter.add_macs((3 * n * c * c) as u64);
    let y = attend(&theta, &psi, &g, 1.0, params.norm, counter);
    crate::tensor::transpose(&y)?.reshape(&[c, h, w])
}

/// Pairwise interactions of full-grid attention against the supernode graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PairwiseCounts {
    /// `(H W)^2`
    pub full: u64,
    /// `(n_h n_w)^2`
    pub supernode: u64,
    /// `full / supernode`, always an integer (`w^4`).
    pub ratio: u64,
}

pub fn pairwise_op_count(height: usize, width: usize, window: usize) -> Result<PairwiseCounts> {
    let grid = WindowGrid::new(&[1, 1, height, width], window, PartitionMode::Strict)?;
    let full = ((height * width) as u64).pow(2);
    let supernode = (grid.windows_per_sample() as u64).pow(2);
    Ok(PairwiseCounts {
        full,
        supernode,
        ratio: full / supernode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub full_count: u64,
    pub supernode_count: u64,
    /// Counter readings from the timed passes.
    pub full_measured: u64,
    pub supernode_measured: u64,
    /// Median seconds.
    pub full_time: f64,
    pub supernode_time: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub window: usize,
    pub channels: usize,
    pub embed: usize,
    pub repeats: usize,
    pub dtype: DType,
    pub seed: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times full-grid dot-product attention over H·W tokens against AFM over
/// the n_h·n_w supernodes, for each size.
pub fn bench_scaling(sizes: &[(usize, usize)], opts: BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.repeats == 0 {
        return Err(HgfeError::contract("repeats must be at least 1"));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_by_key(|&(h, w)| (h * w, h));
    let afm = AfmParams::init(derive_seed(opts.seed, 1), opts.channels, opts.embed)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for (h, w) in sizes {
        let counts = pairwise_op_count(h, w, opts.window)?;
        let grid = WindowGrid::new(&[1, opts.channels, h, w], opts.window, PartitionMode::Strict)?;
        let tokens = uniform_tensor(
            derive_seed(opts.seed, (h * w) as u64),
            &[h * w, opts.channels],
            -1.0,
            1.0,
        )
        .to_dtype(opts.dtype);
        let supernodes = uniform_tensor(
            derive_seed(opts.seed, 1 + (h * w) as u64),
            &[grid.windows_per_sample(), opts.channels],
            -1.0,
            1.0,
        )
        .to_dtype(opts.dtype);

        let (mut full_t, mut super_t) = (Vec::new(), Vec::new());
        let (mut full_measured, mut supernode_measured) = (0, 0);
        for _ in 0..opts.repeats {
            let mut counter = OpCounter::new();
            let t0 = Instant::now();
            dot_product_attention(&tokens, &tokens, &tokens, &mut counter)?;
            full_t.push(t0.elapsed().as_secs_f64());
            full_measured = counter.pairwise;

            let t0 = Instant::now();
            let mut tape = Tape::new();
            let hv = tape.leaf(supernodes.clone());
            let vars = afm.bind(&mut tape);
            afm_on_tape(&mut tape, hv, &vars, &AfmConfig::default())?;
            super_t.push(t0.elapsed().as_secs_f64());
            supernode_measured = tape.counter().pairwise;
        }
        rows.push(BenchRow {
            height: h,
            width: w,
            full_count: counts.full,
            supernode_count: counts.supernode,
            full_measured,
            supernode_measured,
            full_time: median(full_t),
            supernode_time: median(super_t),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_softmax_case() {
        let q = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let mut counter = OpCounter::new();
        let out = dot_product_attention(&q, &q, &v, &mut counter).unwrap();
        let e = std::f64::consts::E;
        assert!((out.data()[0] - 2.0).abs() < 1e-15);
        assert!((out.data()[1] - (1.0 + 3.0 * e) / (1.0 + e)).abs() < 1e-14);
        assert!((out.data()[1] - 2.4621).abs() < 1e-4);
        assert_eq!(counter.pairwise, 4);
    }

    #[test]
    fn zero_queries_average_values() {
        let z = Tensor::zeros(&[5, 3]);
        let v = uniform_tensor(1, &[5, 2], -1.0, 1.0);
        let out = dot_product_attention(&z, &z, &v, &mut OpCounter::new()).unwrap();
        let mean = crate::tensor::mean_rows(&v).unwrap();
        for i in 0..5 {
            for c in 0..2 {
                assert!((out.at(i, c) - mean.data()[c]).abs() < 1e-12);
            }
        }
        let one = uniform_tensor(2, &[1, 3], -1.0, 1.0);
        assert!(dot_product_attention(&one, &one, &one, &mut OpCounter::new())
            .unwrap()
            .bit_eq(&one));
        assert!(matches!(
            dot_product_attention(&z, &Tensor::zeros(&[4, 3]), &v, &mut OpCounter::new()),
            Err(HgfeError::Contract(_))
        ));
    }

    #[test]
    fn nonlocal_cases() {
        let c = 3;
        let x = uniform_tensor(3, &[c, 4, 4], -1.0, 1.0);
        let mut p = NonlocalParams::init(4, c);
        let mut counter = OpCounter::new();
        nonlocal_forward(&x, &p, &mut counter).unwrap();
        assert_eq!(counter.pairwise, 256);

        p.phi = Tensor::zeros(&[c, c]);
        p.psi = Tensor::zeros(&[c, c]);
        let y = nonlocal_forward(&x, &p, &mut OpCounter::new()).unwrap();
        let xs = crate::tensor::transpose(&x.reshape(&[c, 16]).unwrap()).unwrap();
        let g_mean = crate::tensor::mean_rows(&matmul(&xs, &p.g).unwrap()).unwrap();
        for ch in 0..c {
            for pos in 0..16 {
                assert!((y.data()[ch * 16 + pos] - g_mean.data()[ch]).abs() < 1e-12);
            }
        }

        let single = uniform_tensor(5, &[c, 1, 1], -1.0, 1.0);
        let p = NonlocalParams::init(6, c);
        let y = nonlocal_forward(&single, &p, &mut OpCounter::new()).unwrap();
        let g = matmul(&single.reshape(&[1, c]).unwrap(), &p.g).unwrap();
        assert!(y.reshape(&[1, c]).unwrap().max_abs_diff(&g) < 1e-15);
    }

    #[test]
    fn pairwise_cases() {
        let r = pairwise_op_count(64, 64, 8).unwrap();
        assert_eq!((r.full, r.supernode, r.ratio), (16_777_216, 4096, 4096));
        assert_eq!(pairwise_op_count(6, 4, 1).unwrap().ratio, 1);
        assert_eq!(pairwise_op_count(8, 8, 8).unwrap().supernode, 1);
        assert!(matches!(pairwise_op_count(10, 8, 4), Err(HgfeError::Partition { .. })));
    }

    #[test]
    fn bench_rows_sorted_and_exact() {
        let opts = BenchOptions {
            window: 2,
            channels: 2,
            embed: 2,
            repeats: 3,
            dtype: DType::F64,
            seed: 0,
        };
        let rows = bench_scaling(&[(8, 8), (4, 4)], opts).unwrap();
        assert_eq!((rows[0].height, rows[1].height), (4, 4 * 2));
        for r in &rows {
            assert_eq!(r.full_measured, r.full_count);
            assert_eq!(r.supernode_measured, r.supernode_count);
        }
        assert_eq!(rows[1].full_count, 16 * rows[0].full_count);
    }
}
