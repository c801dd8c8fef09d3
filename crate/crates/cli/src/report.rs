use serde::Serialize;

use hgfe_core::block::{FlopTerms, ParamReport};
use hgfe_core::gradcheck::ParamCheck;
use hgfe_core::{HgfeConfig, NormMode, OutputActivation, PartitionMode, Residual};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub embed: usize,
    pub norm: NormMode,
    pub activation: OutputActivation,
    pub residual: Residual,
    pub partition: &'static str,
}

impl ConfigEcho {
    pub fn new(d: crate::args::Dims, cfg: &HgfeConfig) -> Self {
        ConfigEcho {
            batch: d.batch,
            channels: d.channels,
            height: d.height,
            width: d.width,
            window: d.window,
            embed: d.embed,
            norm: cfg.afm.norm,
            activation: cfg.afm.activation,
            residual: cfg.residual,
            partition: match cfg.partition {
                PartitionMode::Strict => "strict",
                PartitionMode::Pad => "pad",
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RowDeviation {
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Checksum {
    pub sum: f64,
    pub abs_sum: f64,
    /// FNV-1a over the little-endian bit patterns, hex.
    pub fnv1a: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub command: &'static str,
    pub seed: u64,
    pub config: ConfigEcho,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Mean over windows.
    pub alpha_intra: Vec<f64>,
    /// Mean over samples.
    pub alpha_inter: Vec<f64>,
    pub attention_row_sum_max_deviation: RowDeviation,
    pub output_checksum: Checksum,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub target: &'static str,
    pub input_shape: Vec<usize>,
    pub embed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub passed: bool,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub command: &'static str,
    pub seed: u64,
    pub precision: &'static str,
    pub eps: f64,
    pub tolerance: f64,
    pub norm: NormMode,
    pub activation: OutputActivation,
    pub residual: Residual,
    pub checks: Vec<CheckEntry>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRow {
    pub filter: String,
    pub k: usize,
    /// Max over eigenpairs of `|u_i^T p_K(L) u_i - g(lambda_i)|`.
    pub error: f64,
    /// Max-norm gap on a seeded test signal.
    pub signal_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResponseRow {
    /// `target`, `low`, `high` or `interp`.
    pub kind: &'static str,
    pub filter: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub command: &'static str,
    pub seed: u64,
    pub nodes: usize,
    pub density: f64,
    pub lambda_max: f64,
    pub eigenvalues: Vec<f64>,
    pub errors: Vec<ErrorRow>,
    pub responses: Vec<ResponseRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchEntry {
    pub height: usize,
    pub width: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub full_count: u64,
    pub supernode_count: u64,
    pub ratio: u64,
    pub full_measured: u64,
    pub supernode_measured: u64,
    pub full_time_s: f64,
    pub supernode_time_s: f64,
    pub local_term: u64,
    pub global_term: u64,
    pub precision: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub command: &'static str,
    pub seed: u64,
    pub window: usize,
    pub channels: usize,
    pub embed: usize,
    pub batch: usize,
    pub repeats: usize,
    pub precision: &'static str,
    pub rows: Vec<BenchEntry>,
    /// Least-squares slope of log(supernode_count) on log(n_h n_w).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supernode_slope: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamcountReport {
    pub command: &'static str,
    pub seed: u64,
    pub channels: usize,
    pub embed: usize,
    pub closed_form: u64,
    /// Parameters held by a block built with these dimensions.
    pub model_count: u64,
    pub conventions: Vec<ParamReport>,
    pub flops: FlopTerms,
}

#[derive(Debug, Clone, Serialize)]
pub struct OversmoothReport {
    pub command: &'static str,
    pub seed: u64,
    pub config: ConfigEcho,
    pub depth: usize,
    /// `spread[t][c]`, step 0 is `H W_V`.
    pub spread: Vec<Vec<f64>>,
    pub dirichlet: Vec<f64>,
    pub spread_non_increasing: bool,
    pub dirichlet_decreased: bool,
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> CliResult<String> {
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Usage(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Usage(e.to_string())
}

pub const SPECTRAL_COLUMNS: &str = "kind,filter,k,alpha,index,lambda,value";

#[derive(Serialize)]
struct SpectralCsvRow<'a> {
    kind: &'a str,
    filter: &'a str,
    k: Option<usize>,
    alpha: Option<f64>,
    index: Option<usize>,
    lambda: Option<f64>,
    value: f64,
}

/// `error` and `signal_error` rows per (filter, K), then one row per
/// eigenvalue for every response curve.
pub fn spectral_csv(r: &SpectralReport) -> CliResult<String> {
    let mut w = csv_writer();
    for e in &r.errors {
        for (kind, value) in [("error", e.error), ("signal_error", e.signal_error)] {
            w.serialize(SpectralCsvRow {
                kind,
                filter: &e.filter,
                k: Some(e.k),
                alpha: None,
                index: None,
                lambda: None,
                value,
            })
            .map_err(csv_err)?;
        }
    }
    for resp in &r.responses {
        for (i, (&lam, &value)) in r.eigenvalues.iter().zip(&resp.values).enumerate() {
            w.serialize(SpectralCsvRow {
                kind: resp.kind,
                filter: &resp.filter,
                k: resp.k,
                alpha: resp.alpha,
                index: Some(i),
                lambda: Some(lam),
                value,
            })
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

pub const BENCH_COLUMNS: &str = "height,width,n_h,n_w,full_count,supernode_count,ratio,full_measured,\
supernode_measured,full_time_s,supernode_time_s,local_term,global_term,precision";

pub fn bench_csv(r: &BenchReport) -> CliResult<String> {
    let mut w = csv_writer();
    for row in &r.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    Ok(format!(
        "# columns: {BENCH_COLUMNS} (counts are pairwise interactions; times are median seconds, repeats={})\n{}",
        r.repeats,
        finish(w)?
    ))
}

#[derive(Serialize)]
struct OversmoothCsvRow {
    step: usize,
    channel: Option<usize>,
    metric: &'static str,
    value: f64,
}

pub fn oversmooth_csv(r: &OversmoothReport) -> CliResult<String> {
    let mut w = csv_writer();
    for (t, row) in r.spread.iter().enumerate() {
        for (c, &value) in row.iter().enumerate() {
            w.serialize(OversmoothCsvRow {
                step: t,
                channel: Some(c),
                metric: "spread",
                value,
            })
            .map_err(csv_err)?;
        }
    }
    for (t, &value) in r.dirichlet.iter().enumerate() {
        w.serialize(OversmoothCsvRow {
            step: t,
            channel: None,
            metric: "dirichlet",
            value,
        })
        .map_err(csv_err)?;
    }
    finish(w)
}
