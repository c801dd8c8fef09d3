//! Inter-window stage: each window is average-pooled into a supernode, AFM
//! runs over the supernodes of each sample, and the enhanced supernode is
//! tiled back over its window, concatenated with the window features and
//! projected from 2C to C channels by a 1×1 convolution.
//!
//! Every sample owns its own supernode graph; no attention crosses the batch.

use std::rc::Rc;

use crate::afm::{afm_forward, afm_on_tape, AfmConfig, AfmParams, AfmTrace, AfmVars};
use crate::error::{HgfeError, Result};
use crate::init::{derive_seed, init_uniform};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::window::{reassemble_vars, window_node_vars, PartitionMode, WindowGrid, WindowSet};

/// 1×1 convolution from the concatenated `[P || G]` (2C channels) back to C.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// C×2C; columns `0..C` act on the window features, `C..2C` on the context.
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl ProjectionParams {
    pub fn init(seed: u64, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(HgfeError::contract("projection needs C >= 1"));
        }
        let c = channels;
        Ok(ProjectionParams {
            w_proj: init_uniform(derive_seed(seed, 1), &[c, 2 * c], 2 * c),
            b_proj: init_uniform(derive_seed(seed, 2), &[c], 2 * c),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_proj.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.w_proj.shape()[0];
        if self.w_proj.shape() != [c, 2 * c] || self.b_proj.shape() != [c] {
            return Err(HgfeError::shape(format!(
                "projection shapes {:?} / {:?} are not C×2C / C",
                self.w_proj.shape(),
                self.b_proj.shape()
            )));
        }
        if !(self.w_proj.all_finite() && self.b_proj.all_finite()) {
            return Err(HgfeError::contract("projection has non-finite entries"));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            w_proj: tape.leaf(self.w_proj.clone()),
            b_proj: tape.leaf(self.b_proj.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub w_proj: Var,
    pub b_proj: Var,
}

/// B×M×C supernode features.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernodeSet {
    pub v: Tensor,
    pub grid: WindowGrid,
}

impl SupernodeSet {
    /// M×C node matrix of sample `b`.
    pub fn sample(&self, b: usize) -> Result<Tensor> {
        let (m, c) = (self.grid.windows_per_sample(), self.grid.channels);
        Tensor::new(&[m, c], self.v.data()[b * m * c..(b + 1) * m * c].to_vec())
    }
}

/// Spatial mean of every window, per channel.
pub fn pool_supernodes(windows: &WindowSet, grid: &WindowGrid) -> Result<SupernodeSet> {
    if windows.windows.len() != grid.window_count() {
        return Err(HgfeError::shape("window set does not match the grid"));
    }
    let c = grid.channels;
    let mut v = Vec::with_capacity(grid.window_count() * c);
    for win in &windows.windows {
        if win.shape() != [c, grid.window, grid.window] {
            return Err(HgfeError::shape(format!("window of shape {:?}", win.shape())));
        }
        let nodes = crate::window::window_to_nodes(win)?;
        v.extend_from_slice(crate::tensor::mean_rows(&nodes)?.data());
    }
    Ok(SupernodeSet {
        v: Tensor::new(&[grid.batch, grid.windows_per_sample(), c], v)?,
        grid: *grid,
    })
}

/// AFM over each sample's M supernodes independently.
pub fn supernode_afm(set: &SupernodeSet, params: &AfmParams, config: &AfmConfig) -> Result<SupernodeSet> {
    let mut v = Vec::with_capacity(set.v.numel());
    for b in 0..set.grid.batch {
        let out = afm_forward(&set.sample(b)?, params, config)?;
        v.extend_from_slice(out.data());
    }
    Ok(SupernodeSet {
        v: Tensor::new(set.v.shape(), v)?,
        grid: set.grid,
    })
}

/// Duplicates a length-C vector over a C×w×w window.
pub fn tile_context(v: &Tensor, window: usize) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(HgfeError::shape("context must be a vector"));
    }
    if window == 0 {
        return Err(HgfeError::contract("window size must be at least 1"));
    }
    let n = window * window;
    let data = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
    Tensor::new(&[v.numel(), window, window], data)
}

/// Per-pixel `W_proj [P || G] + b_proj`.
pub fn fuse_project(p: &Tensor, g: &Tensor, proj: &ProjectionParams) -> Result<Tensor> {
    proj.validate()?;
    let c = proj.channels();
    let [pc, h, w] = *p.shape() else {
        return Err(HgfeError::shape(format!("window must be C×w×w, got {:?}", p.shape())));
    };
    if p.shape() != g.shape() || pc != c {
        return Err(HgfeError::shape(format!(
            "window {:?} and context {:?} must both be {c}×w×w",
            p.shape(),
            g.shape()
        )));
    }
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for pix in 0..n {
        for o in 0..c {
            let row = proj.w_proj.row(o);
            let mut acc = proj.b_proj.data()[o];
            for j in 0..c {
                acc += row[j] * p.data()[j * n + pix] + row[c + j] * g.data()[j * n + pix];
            }
            out[o * n + pix] = acc;
        }
    }
    Tensor::new(p.shape(), out)
}

#[derive(Debug, Clone)]
pub struct InterTrace {
    pub output: Var,
    /// One supernode AFM per sample.
    pub samples: Vec<AfmTrace>,
}

/// Records the inter-window stage on `f_local` (B×C×H×W).
pub fn inter_window_on_tape(
    tape: &mut Tape,
    f_local: Var,
    grid: &WindowGrid,
    afm: &AfmVars,
    proj: &ProjectionVars,
    config: &AfmConfig,
) -> Result<InterTrace> {
    let (c, n, m) = (grid.channels, grid.nodes_per_window(), grid.windows_per_sample());
    if tape.value(proj.w_proj).shape() != [c, 2 * c] {
        return Err(HgfeError::shape("projection does not match the channel count"));
    }
    let nodes = window_node_vars(tape, f_local, grid)?;
    let w_t = tape.transpose(proj.w_proj)?;

    // [P || G] as an N×2C matrix, read from concat(P, G).
    let concat_idx: Rc<[usize]> = (0..n * 2 * c)
        .map(|k| {
            let (node, j) = (k / (2 * c), k % (2 * c));
            if j < c {
                node * c + j
            } else {
                n * c + node * c + (j - c)
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(grid.batch);
    let mut outs = Vec::with_capacity(grid.window_count());
    for b in 0..grid.batch {
        let windows = &nodes[b * m..(b + 1) * m];
        let pooled = windows.iter().map(|&h| tape.mean_rows(h)).collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat(&pooled)?;
        let stacked = tape.reshape(stacked, &[m, c])?;
        let trace = afm_on_tape(tape, stacked, afm, config)?;

        for (k, &p) in windows.iter().enumerate() {
            let tile_idx: Rc<[usize]> = (0..n * c).map(|q| k * c + q % c).collect();
            let g = tape.gather(trace.output, tile_idx, &[n, c])?;
            let both = tape.concat(&[p, g])?;
            let x = tape.gather(both, concat_idx.clone(), &[n, 2 * c])?;
            let y = tape.matmul(x, w_t)?;
            outs.push(tape.add_row_bias(y, proj.b_proj)?);
        }
        samples.push(trace);
    }
    let output = reassemble_vars(tape, &outs, grid)?;
    Ok(InterTrace { output, samples })
}

pub fn inter_window_forward(
    f_local: &Tensor,
    params: &AfmParams,
    proj: &ProjectionParams,
    window: usize,
    config: &AfmConfig,
    mode: PartitionMode,
) -> Result<Tensor> {
    let grid = WindowGrid::new(f_local.shape(), window, mode)?;
    params.validate()?;
    proj.validate()?;
    let mut tape = Tape::new();
    let fv = tape.leaf(f_local.clone());
    let afm = params.bind(&mut tape);
    let pv = proj.bind(&mut tape);
    let trace = inter_window_on_tape(&mut tape, fv, &grid, &afm, &pv, config)?;
    Ok(tape.value(trace.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::uniform_tensor;
    use crate::tensor::matmul;
    use crate::window::{partition_windows, window_to_nodes};

    #[test]
    fn pooling_cases() {
        let f = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (grid, set) = partition_windows(&f, 2, PartitionMode::Strict).unwrap();
        assert_eq!(pool_supernodes(&set, &grid).unwrap().v.data(), &[2.5]);

        let f = Tensor::full(&[2, 3, 4, 4], -0.75);
        let (grid, set) = partition_windows(&f, 2, PartitionMode::Strict).unwrap();
        let s = pool_supernodes(&set, &grid).unwrap();
        assert_eq!(s.v.shape(), &[2, 4, 3]);
        assert!(s.v.data().iter().all(|&v| v == -0.75));

        let (grid, set) = partition_windows(&Tensor::zeros(&[1, 2, 4, 4]), 2, PartitionMode::Strict).unwrap();
        assert!(pool_supernodes(&set, &grid).unwrap().v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tile_cases() {
        let t = tile_context(&Tensor::vector(&[1.0, 2.0]), 2).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let v = Tensor::vector(&[0.3, -0.1, 5.0]);
        assert_eq!(tile_context(&v, 1).unwrap().data(), v.data());
    }

    #[test]
    fn tile_then_pool_is_identity() {
        let v = uniform_tensor(2, &[3], -4.0, 4.0);
        for w in [1, 2, 3, 8] {
            let tile = tile_context(&v, w).unwrap();
            let grid = WindowGrid::new(&[1, 3, w, w], w, PartitionMode::Strict).unwrap();
            let set = WindowSet { windows: vec![tile] };
            let pooled = pool_supernodes(&set, &grid).unwrap();
            assert!(pooled.v.reshape(&[3]).unwrap().bit_eq(&v));
        }
    }

    #[test]
    fn projection_selects_either_half() {
        let c = 3;
        let p = uniform_tensor(1, &[c, 2, 2], -1.0, 1.0);
        let g = uniform_tensor(2, &[c, 2, 2], -1.0, 1.0);
        let mut left = vec![0.0; c * 2 * c];
        let mut right = vec![0.0; c * 2 * c];
        for i in 0..c {
            left[i * 2 * c + i] = 1.0;
            right[i * 2 * c + c + i] = 1.0;
        }
        let mk = |w: Vec<f64>| ProjectionParams {
            w_proj: Tensor::new(&[c, 2 * c], w).unwrap(),
            b_proj: Tensor::zeros(&[c]),
        };
        assert!(fuse_project(&p, &g, &mk(left)).unwrap().bit_eq(&p));
        assert!(fuse_project(&p, &g, &mk(right)).unwrap().bit_eq(&g));
        assert!(fuse_project(&p, &uniform_tensor(2, &[c, 3, 3], 0.0, 1.0), &mk(vec![0.0; 18])).is_err());
    }

    #[test]
    fn projection_matches_per_pixel_matmul() {
        let c = 4;
        let proj = ProjectionParams::init(5, c).unwrap();
        let p = uniform_tensor(6, &[c, 3, 3], -1.0, 1.0);
        let g = uniform_tensor(7, &[c, 3, 3], -1.0, 1.0);
        let out = fuse_project(&p, &g, &proj).unwrap();
        let (pn, gn) = (window_to_nodes(&p).unwrap(), window_to_nodes(&g).unwrap());
        for pix in 0..9 {
            let mut z = pn.row(pix).to_vec();
            z.extend_from_slice(gn.row(pix));
            let col = Tensor::new(&[2 * c, 1], z).unwrap();
            let y = matmul(&proj.w_proj, &col).unwrap();
            for o in 0..c {
                let expect = y.data()[o] + proj.b_proj.data()[o];
                assert!((out.data()[o * 9 + pix] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_window_composition() {
        let c = 3;
        let params = AfmParams::init(1, c, 2).unwrap();
        let proj = ProjectionParams::init(2, c).unwrap();
        let f = uniform_tensor(3, &[1, c, 2, 2], -1.0, 1.0);
        let cfg = AfmConfig::default();
        let out = inter_window_forward(&f, &params, &proj, 2, &cfg, PartitionMode::Strict).unwrap();

        let (grid, set) = partition_windows(&f, 2, PartitionMode::Strict).unwrap();
        let pooled = pool_supernodes(&set, &grid).unwrap();
        let enhanced = supernode_afm(&pooled, &params, &cfg).unwrap();
        let g = tile_context(&enhanced.v.reshape(&[c]).unwrap(), 2).unwrap();
        let expect = fuse_project(&set.windows[0], &g, &proj).unwrap();
        assert!(out.reshape(&[c, 2, 2]).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn supernode_afm_delegates_per_sample() {
        let params = AfmParams::init(4, 2, 2).unwrap();
        let v = uniform_tensor(9, &[1, 4, 2], -1.0, 1.0);
        let grid = WindowGrid::new(&[1, 2, 4, 4], 2, PartitionMode::Strict).unwrap();
        let set = SupernodeSet { v: v.clone(), grid };
        let out = supernode_afm(&set, &params, &AfmConfig::default()).unwrap();
        let direct = afm_forward(&v.reshape(&[4, 2]).unwrap(), &params, &AfmConfig::default()).unwrap();
        assert!(out.v.reshape(&[4, 2]).unwrap().bit_eq(&direct));
    }
}
