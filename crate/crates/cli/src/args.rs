use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hgfe_core::{HgfeConfig, NormMode, OutputActivation, Residual};

#[derive(Debug, Parser)]
#[command(name = "hgfe", version, about = "Hierarchical graph feature enhancement toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Run configuration shared by every subcommand. Unset dimensions fall back
/// to per-command defaults.
#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Window size (8; the gradcheck fixture uses 3).
    #[arg(long = "w", global = true)]
    pub window: Option<usize>,
    /// Channels.
    #[arg(long = "c", global = true)]
    pub channels: Option<usize>,
    /// Attention embedding dimension.
    #[arg(long = "d", global = true)]
    pub embed: Option<usize>,
    /// Feature map height.
    #[arg(long = "h", global = true)]
    pub height: Option<usize>,
    /// Feature map width.
    #[arg(long = "wdt", global = true)]
    pub width: Option<usize>,
    /// Batch size.
    #[arg(long = "b", global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long, global = true, value_enum)]
    pub act: Option<ActArg>,
    #[arg(long, global = true, value_enum)]
    pub residual: Option<ResidualArg>,
    /// Zero-pad maps whose sides are not multiples of the window.
    #[arg(long, global = true)]
    pub pad: bool,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Plain,
    SigmoidSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActArg {
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResidualArg {
    Input,
    Local,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the block on a seeded random input and report gates and checksums.
    Demo {
        /// Also write the output tensor as an HGT1 file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Compare tape gradients against central differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_corruption: bool,
    },
    /// Chebyshev filter accuracy and low/high interpolation on a random graph.
    Spectral {
        /// Number of graph nodes (at most 256).
        #[arg(long, default_value_t = 12)]
        nodes: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
        /// Polynomial orders.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8,16,24")]
        k: Vec<usize>,
        /// Low and high targets: exp:T, ramp, const:V or step:CUT.
        #[arg(long, value_delimiter = ',', default_value = "exp:2,ramp")]
        filters: Vec<String>,
        #[arg(long, default_value_t = hgfe_core::spectral::DEFAULT_MAX_SWEEPS)]
        max_sweeps: usize,
    },
    /// Pairwise counts and timings of full attention against the supernode graph.
    Bench {
        /// Square side lengths.
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Exact parameter count per convention next to the closed-form estimate.
    Paramcount,
    /// Spread and Dirichlet energy under repeated intra-window aggregation.
    Oversmooth {
        #[arg(long, default_value_t = 4)]
        depth: usize,
    },
}

/// Per-command fallbacks for unset dimensions.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub embed: usize,
}

impl GlobalArgs {
    pub fn dims(&self, fallback: Dims) -> Dims {
        Dims {
            batch: self.batch.unwrap_or(fallback.batch),
            channels: self.channels.unwrap_or(fallback.channels),
            height: self.height.unwrap_or(fallback.height),
            width: self.width.unwrap_or(fallback.width),
            window: self.window.unwrap_or(fallback.window),
            embed: self.embed.unwrap_or(fallback.embed),
        }
    }

    pub fn hgfe_config(&self, default_act: OutputActivation) -> HgfeConfig {
        let mut cfg = HgfeConfig::default();
        cfg.afm.norm = match self.norm {
            Some(NormArg::SigmoidSoftmax) => NormMode::SigmoidSoftmax,
            _ => NormMode::Plain,
        };
        cfg.afm.activation = match self.act {
            Some(ActArg::Sigmoid) => OutputActivation::Sigmoid,
            Some(ActArg::Identity) => OutputActivation::Identity,
            None => default_act,
        };
        cfg.residual = match self.residual {
            Some(ResidualArg::Local) => Residual::Local,
            Some(ResidualArg::Off) => Residual::Off,
            _ => Residual::Input,
        };
        if self.pad {
            cfg.partition = hgfe_core::PartitionMode::Pad;
        }
        cfg
    }
}
