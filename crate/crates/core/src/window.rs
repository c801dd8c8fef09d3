//! Non-overlapping window partitioning of B×C×H×W feature maps and the
//! intra-window AFM stage.
//!
//! Windows are ordered batch-major, then by window row, then window column.
//! Inside a window, nodes follow a row-major spatial scan.

use std::rc::Rc;

use crate::afm::{afm_on_tape, AfmConfig, AfmParams, AfmTrace, AfmVars};
use crate::error::{HgfeError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionMode {
    /// H and W must be multiples of the window size.
    #[default]
    Strict,
    /// Zero-pad H and W up to the next multiple; outputs are cropped back.
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl WindowGrid {
    pub fn new(shape: &[usize], window: usize, mode: PartitionMode) -> Result<Self> {
        let [batch, channels, height, width] = *shape else {
            return Err(HgfeError::shape(format!("feature map must be B×C×H×W, got {shape:?}")));
        };
        if window == 0 {
            return Err(HgfeError::contract("window size must be at least 1"));
        }
        if mode == PartitionMode::Strict {
            for (dim, size) in [("H", height), ("W", width)] {
                if size % window != 0 {
                    return Err(HgfeError::Partition { dim, size, window });
                }
            }
        }
        Ok(WindowGrid {
            batch,
            channels,
            height,
            width,
            window,
            n_h: height.div_ceil(window),
            n_w: width.div_ceil(window),
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Nodes per window, `w^2`.
    pub fn nodes_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Windows (supernodes) per sample, `n_h * n_w`.
    pub fn windows_per_sample(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn window_count(&self) -> usize {
        self.batch * self.windows_per_sample()
    }

    pub fn is_padded(&self) -> bool {
        self.n_h * self.window != self.height || self.n_w * self.window != self.width
    }

    /// `(b, window row, window column)` of window `i`.
    pub fn locate(&self, i: usize) -> (usize, usize, usize) {
        let per = self.windows_per_sample();
        (i / per, (i % per) / self.n_w, i % self.n_w)
    }

    /// Flat B×C×H×W offset of node `node`, channel `ch` in window `i`;
    /// `None` inside the padding.
    pub fn source_offset(&self, i: usize, node: usize, ch: usize) -> Option<usize> {
        let (b, wr, wc) = self.locate(i);
        let gy = wr * self.window + node / self.window;
        let gx = wc * self.window + node % self.window;
        (gy < self.height && gx < self.width).then(|| ((b * self.channels + ch) * self.height + gy) * self.width + gx)
    }

    /// Gather map from the flat feature map to the N×C node matrix of window `i`.
    /// Padding positions point at `pad_slot`.
    pub fn node_gather_index(&self, i: usize, pad_slot: usize) -> Vec<usize> {
        let c = self.channels;
        (0..self.nodes_per_window() * c)
            .map(|k| self.source_offset(i, k / c, k % c).unwrap_or(pad_slot))
            .collect()
    }

    /// Gather map from window node matrices, concatenated in window order,
    /// back to the flat (cropped) feature map.
    pub fn reassembly_index(&self) -> Vec<usize> {
        let (c, w, n) = (self.channels, self.window, self.nodes_per_window());
        let mut idx = Vec::with_capacity(self.batch * c * self.height * self.width);
        for b in 0..self.batch {
            for ch in 0..c {
                for gy in 0..self.height {
                    for gx in 0..self.width {
                        let i = (b * self.n_h + gy / w) * self.n_w + gx / w;
                        let node = (gy % w) * w + gx % w;
                        idx.push((i * n + node) * c + ch);
                    }
                }
            }
        }
        idx
    }
}

/// Windows of shape C×w×w in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Tensor>,
}

pub fn partition_windows(f: &Tensor, window: usize, mode: PartitionMode) -> Result<(WindowGrid, WindowSet)> {
    let grid = WindowGrid::new(f.shape(), window, mode)?;
    let (c, w) = (grid.channels, grid.window);
    let windows = (0..grid.window_count())
        .map(|i| {
            let mut data = vec![0.0; c * w * w];
            for ch in 0..c {
                for node in 0..w * w {
                    if let Some(src) = grid.source_offset(i, node, ch) {
                        data[ch * w * w + node] = f.data()[src];
                    }
                }
            }
            Tensor::new(&[c, w, w], data)
        })
        .collect::<Result<_>>()?;
    Ok((grid, WindowSet { windows }))
}

/// Inverse of [`partition_windows`]; padding is cropped.
pub fn reassemble(grid: &WindowGrid, set: &WindowSet) -> Result<Tensor> {
    if set.windows.len() != grid.window_count() {
        return Err(HgfeError::shape(format!(
            "{} windows for a grid of {}",
            set.windows.len(),
            grid.window_count()
        )));
    }
    let (c, w) = (grid.channels, grid.window);
    let mut out = vec![0.0; grid.shape().iter().product()];
    for (i, win) in set.windows.iter().enumerate() {
        if win.shape() != [c, w, w] {
            return Err(HgfeError::shape(format!("window {i} has shape {:?}", win.shape())));
        }
        for ch in 0..c {
            for node in 0..w * w {
                if let Some(dst) = grid.source_offset(i, node, ch) {
                    out[dst] = win.data()[ch * w * w + node];
                }
            }
        }
    }
    Tensor::new(&grid.shape(), out)
}

/// C×w×w window to its w²×C node matrix (row-major scan).
pub fn window_to_nodes(p: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *p.shape() else {
        return Err(HgfeError::shape(format!("window must be C×w×w, got {:?}", p.shape())));
    };
    if h != w {
        return Err(HgfeError::shape(format!("window must be square, got {h}x{w}")));
    }
    let n = w * w;
    let mut data = vec![0.0; n * c];
    for ch in 0..c {
        for node in 0..n {
            data[node * c + ch] = p.data()[ch * n + node];
        }
    }
    Tensor::new(&[n, c], data)
}

/// w²×C node matrix back to a C×w×w window.
pub fn nodes_to_window(h: &Tensor, window: usize) -> Result<Tensor> {
    let (n, c) = h.dims2()?;
    if n != window * window {
        return Err(HgfeError::shape(format!(
            "{n} nodes do not fill a {window}x{window} window"
        )));
    }
    let mut data = vec![0.0; n * c];
    for node in 0..n {
        for ch in 0..c {
            data[ch * n + node] = h.data()[node * c + ch];
        }
    }
    Tensor::new(&[c, window, window], data)
}

/// Node matrices (N×C) of every window of the feature map `f`.
pub fn window_node_vars(tape: &mut Tape, f: Var, grid: &WindowGrid) -> Result<Vec<Var>> {
    if tape.value(f).shape() != grid.shape() {
        return Err(HgfeError::shape(format!(
            "feature map {:?} does not match grid {:?}",
            tape.value(f).shape(),
            grid.shape()
        )));
    }
    let numel = tape.value(f).numel();
    let source = if grid.is_padded() {
        let zero = tape.leaf(Tensor::zeros(&[1]));
        tape.concat(&[f, zero])?
    } else {
        f
    };
    let shape = [grid.nodes_per_window(), grid.channels];
    (0..grid.window_count())
        .map(|i| {
            let idx: Rc<[usize]> = grid.node_gather_index(i, numel).into();
            tape.gather(source, idx, &shape)
        })
        .collect()
}

/// Reassembles per-window N×C matrices into a B×C×H×W map.
pub fn reassemble_vars(tape: &mut Tape, parts: &[Var], grid: &WindowGrid) -> Result<Var> {
    let flat = tape.concat(parts)?;
    let expected = grid.window_count() * grid.nodes_per_window() * grid.channels;
    if tape.value(flat).numel() != expected {
        return Err(HgfeError::shape("window outputs do not cover the grid"));
    }
    let idx: Rc<[usize]> = grid.reassembly_index().into();
    tape.gather(flat, idx, &grid.shape())
}

/// Handles of one intra-window pass.
#[derive(Debug, Clone)]
pub struct IntraTrace {
    pub output: Var,
    pub windows: Vec<AfmTrace>,
}

/// AFM on every window with shared parameters, then reassembly.
pub fn intra_window_on_tape(
    tape: &mut Tape,
    f: Var,
    grid: &WindowGrid,
    params: &AfmVars,
    config: &AfmConfig,
) -> Result<IntraTrace> {
    let nodes = window_node_vars(tape, f, grid)?;
    let windows = nodes
        .into_iter()
        .map(|h| afm_on_tape(tape, h, params, config))
        .collect::<Result<Vec<_>>>()?;
    let outs: Vec<Var> = windows.iter().map(|t| t.output).collect();
    let output = reassemble_vars(tape, &outs, grid)?;
    Ok(IntraTrace { output, windows })
}

pub fn intra_window_forward(
    f: &Tensor,
    params: &AfmParams,
    window: usize,
    config: &AfmConfig,
    mode: PartitionMode,
) -> Result<Tensor> {
    let grid = WindowGrid::new(f.shape(), window, mode)?;
    params.validate()?;
    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let vars = params.bind(&mut tape);
    let trace = intra_window_on_tape(&mut tape, fv, &grid, &vars, config)?;
    Ok(tape.value(trace.output).clone())
}
