//! Subcommand drivers behind the `bsconv` binary.
//!
//! The binary itself only parses flags; everything it does lives here so the
//! integration tests can drive the same code paths. Exit-code contract:
//! 0 success, 1 numeric/assertion failure, 2 usage or format error. Drivers
//! return `Ok(exit_code)` for outcomes that are part of the contract and
//! `Err(CliError)` for usage/format problems (mapped to 2 by the binary).

use std::error::Error;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{pca_filter, PcaOutcome};
use crate::blueprint::{cross_kernel_materialize, materialize_s, materialize_u};
use crate::complexity::{
    count_macs, count_params, out_shape, to_variant, LayerKind, LayerSpec,
};
use crate::format::{TensorEntry, WeightFile};
use crate::rng::SeededRng;
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::{
    make_toy_dataset, toy_model_specs, train_model, Layer, Model, Schedule, TrainConfig,
    TrainError,
};
use crate::verify::{SizeBounds, VerifyReport};

/// Usage or format problem; the binary prints it and exits 2.
#[derive(Debug)]
pub struct CliError(pub String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Error for CliError {}

impl CliError {
    fn new(msg: impl Into<String>) -> Self {
        CliError(msg.into())
    }
}

impl From<crate::format::FormatError> for CliError {
    fn from(e: crate::format::FormatError) -> Self {
        CliError(e.to_string())
    }
}

impl From<crate::complexity::SpecError> for CliError {
    fn from(e: crate::complexity::SpecError) -> Self {
        CliError(e.to_string())
    }
}

impl From<crate::analysis::AnalysisError> for CliError {
    fn from(e: crate::analysis::AnalysisError) -> Self {
        CliError(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError(e.to_string())
    }
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug)]
pub struct GlobalOpts {
    pub seed: u64,
    pub dtype: Dtype,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for GlobalOpts {
    fn default() -> Self {
        GlobalOpts {
            seed: 0,
            dtype: Dtype::F32,
            out_dir: None,
            threads: None,
        }
    }
}

impl GlobalOpts {
    fn describe(&self) -> String {
        format!(
            "seed={} dtype={} out_dir={} threads={}",
            self.seed,
            self.dtype,
            self.out_dir
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.display().to_string()),
            self.threads
                .map_or_else(|| "auto".to_string(), |t| t.to_string()),
        )
    }

    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }
}

/// Cap rayon's global pool. Call once at startup; later calls are no-ops.
pub fn install_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Parse `M,N,K,S` upper bounds, e.g. `64,64,5,16`.
pub fn parse_size_bounds(arg: &str) -> Result<SizeBounds, CliError> {
    let parts: Vec<&str> = arg.split(',').collect();
    if parts.len() != 4 {
        return Err(CliError::new(format!(
            "--sizes expects 'maxM,maxN,maxK,maxSpatial', got '{arg}'"
        )));
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::new(format!("bad size component '{p}'")))
        })
        .collect::<Result<_, _>>()?;
    if nums.iter().any(|&n| n == 0) {
        return Err(CliError::new("size bounds must be >= 1"));
    }
    Ok(SizeBounds {
        max_in: nums[0],
        max_out: nums[1],
        max_kernel: nums[2],
        max_spatial: nums[3],
    })
}

/// Randomized factored-vs-naive equivalence across both scalar widths.
/// Exit 0 iff every family is within `tolerance` in its width class
/// (f64 additionally checked at 1e-10) and an order witness exists.
pub fn run_verify(
    opts: &GlobalOpts,
    trials: usize,
    sizes: Option<&str>,
    tolerance: f64,
) -> Result<i32, CliError> {
    if trials == 0 {
        return Err(CliError::new("--trials must be >= 1"));
    }
    if tolerance < 0.0 || !tolerance.is_finite() {
        return Err(CliError::new("--tolerance must be finite and >= 0"));
    }
    let bounds = match sizes {
        Some(arg) => parse_size_bounds(arg)?,
        None => SizeBounds::default(),
    };
    println!("verify: {} trials={trials} tolerance={tolerance} bounds={bounds:?}", opts.describe());
    let start = Instant::now();
    let report = VerifyReport::run(trials, bounds, opts.seed);
    println!("family              max_rel_err_f32  max_rel_err_f64");
    println!("blueprint (U)       {:>15.3e}  {:>15.3e}", report.u_f32, report.u_f64);
    println!("subspace (S)        {:>15.3e}  {:>15.3e}", report.s_f32, report.s_f64);
    println!("dsc cross-kernel    {:>15.3e}  {:>15.3e}", report.dsc_f32, report.dsc_f64);
    match report.order_witness_trial {
        Some(t) => println!("order witness: blueprint vs dsc differ at trial {t}"),
        None => println!("order witness: NOT FOUND"),
    }
    println!("elapsed: {:.2}s", start.elapsed().as_secs_f64());
    let f64_ok = report.u_f64 < 1e-10 && report.s_f64 < 1e-10 && report.dsc_f64 < 1e-10;
    if report.passes(tolerance) && f64_ok {
        println!("verify: PASS (worst f32 {:.3e})", report.worst_f32());
        Ok(0)
    } else {
        println!("verify: FAIL (worst f32 {:.3e}, tolerance {tolerance})", report.worst_f32());
        Ok(1)
    }
}

/// Per-filter PC1 explained-variance histogram of one 4-axis weight entry.
pub fn run_analyze(
    opts: &GlobalOpts,
    weights_path: &Path,
    entry: &str,
    bins: usize,
    centered: bool,
) -> Result<i32, CliError> {
    if bins == 0 {
        return Err(CliError::new("--bins must be >= 1"));
    }
    println!(
        "analyze: {} file={} entry={entry} bins={bins} centered={centered}",
        opts.describe(),
        weights_path.display()
    );
    let file = WeightFile::read_from(weights_path)?;
    let tensor = file
        .get(entry)
        .ok_or_else(|| {
            CliError::new(format!(
                "entry '{entry}' not found; available: {}",
                file.names().collect::<Vec<_>>().join(", ")
            ))
        })?
        .to_f64();
    if tensor.ndim() != 4 {
        return Err(CliError::new(format!(
            "entry '{entry}' has {} axes; a 4-axis kernel stack is required",
            tensor.ndim()
        )));
    }
    let (n, m, k) = (tensor.extent(0), tensor.extent(1), tensor.extent(2));
    let filter_len = m * k * k;
    let mut ratios: Vec<f64> = Vec::new();
    let mut degenerate = 0usize;
    for fi in 0..n {
        let filter = Tensor::from_vec(
            &[m, k, k],
            tensor.data()[fi * filter_len..(fi + 1) * filter_len].to_vec(),
        )
        .map_err(crate::analysis::AnalysisError::from)?;
        match pca_filter(&filter, centered)? {
            PcaOutcome::Spectrum(res) => ratios.push(res.explained_ratios[0]),
            PcaOutcome::Degenerate { .. } => degenerate += 1,
        }
    }

    let mut counts = vec![0usize; bins];
    for &r in &ratios {
        let bin = ((r.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    let mut csv = String::from("bin_lo,bin_hi,count,group\n");
    for (i, &c) in counts.iter().enumerate() {
        csv.push_str(&format!(
            "{:.6},{:.6},{c},all\n",
            i as f64 / bins as f64,
            (i + 1) as f64 / bins as f64
        ));
    }
    print!("{csv}");
    let (mean, median) = if ratios.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let mut sorted = ratios.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        (mean, median)
    };
    println!(
        "summary: filters={n} mean_pc1={mean:.6} median_pc1={median:.6} degenerate={degenerate}"
    );
    if let Some(path) = opts.out_path(&format!(
        "{}_hist.csv",
        entry.replace(['/', '.'], "_")
    )) {
        write_text(&path, &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

/// JSON model description consumed by `complexity`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDescription {
    /// `[C, Y, X]` input feature shape.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelDescription {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let desc: ModelDescription =
            serde_json::from_str(text).map_err(|e| CliError::new(format!("model json: {e}")))?;
        if desc.input.len() != 3 || desc.input.iter().any(|&d| d == 0) {
            return Err(CliError::new(format!(
                "model json: 'input' must be [C, Y, X] with positive extents, got {:?}",
                desc.input
            )));
        }
        Ok(desc)
    }
}

/// Per-layer and total parameter / MAC table, with standard, DSC, blueprint
/// and subspace variant counts for every conv-family layer.
pub fn run_complexity(opts: &GlobalOpts, model_path: &Path, flops: bool) -> Result<i32, CliError> {
    println!(
        "complexity: {} model={} unit={}",
        opts.describe(),
        model_path.display(),
        if flops { "flops" } else { "macs" }
    );
    let text = fs::read_to_string(model_path)?;
    let desc = ModelDescription::from_json(&text)?;
    let unit = if flops { 2u64 } else { 1u64 };

    let variant_kinds = [
        LayerKind::StandardConv,
        LayerKind::Dsc,
        LayerKind::BsconvU,
        LayerKind::BsconvS,
    ];
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut shape = desc.input.clone();
    let mut total_params = 0u64;
    let mut total_macs = 0u64;
    let mut variant_totals = [0u64; 4];
    for (i, spec) in desc.layers.iter().enumerate() {
        let params = count_params(spec)?;
        let macs = count_macs(spec, &shape)? * unit;
        total_params += params;
        total_macs += macs;
        let mut row = vec![
            i.to_string(),
            spec.kind.to_string(),
            spec.in_channels.to_string(),
            spec.out_channels.to_string(),
            spec.kernel.to_string(),
            params.to_string(),
            macs.to_string(),
        ];
        for (vi, &kind) in variant_kinds.iter().enumerate() {
            if spec.kind.is_conv_family() {
                let vparams = count_params(&to_variant(spec, kind))?;
                variant_totals[vi] += vparams;
                row.push(vparams.to_string());
            } else {
                variant_totals[vi] += params;
                row.push(String::new());
            }
        }
        rows.push(row);
        shape = out_shape(spec, &shape)?;
    }
    let unit_name = if flops { "flops" } else { "macs" };
    let header = vec![
        "layer".to_string(),
        "kind".to_string(),
        "in".to_string(),
        "out".to_string(),
        "k".to_string(),
        "params".to_string(),
        unit_name.to_string(),
        "params_standard".to_string(),
        "params_dsc".to_string(),
        "params_bsconv_u".to_string(),
        "params_bsconv_s".to_string(),
    ];
    let mut totals = vec![
        "total".to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        total_params.to_string(),
        total_macs.to_string(),
    ];
    for t in variant_totals {
        totals.push(t.to_string());
    }
    rows.push(totals);

    print!("{}", aligned_table(&header, &rows));
    let csv = csv_table(&header, &rows);
    if let Some(path) = opts.out_path("complexity.csv") {
        write_text(&path, &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String]| {
        for i in 0..cols {
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{cell:>width$}", width = widths[i]));
        }
        out.push('\n');
    };
    emit(&mut out, header);
    for row in rows {
        emit(&mut out, row);
    }
    out
}

fn csv_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Arguments of the `train` subcommand.
#[derive(Clone, Debug)]
pub struct TrainCliArgs {
    pub dataset: String,
    pub block: String,
    pub alpha: f64,
    pub p: f64,
    pub epochs: usize,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub width: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: String,
    pub batch_size: usize,
}

impl Default for TrainCliArgs {
    fn default() -> Self {
        TrainCliArgs {
            dataset: "toy".into(),
            block: "bsconv-u".into(),
            alpha: 0.0,
            p: 1.0 / 6.0,
            epochs: 30,
            classes: 4,
            per_class: 64,
            image_size: 16,
            width: 16,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: "step".into(),
            batch_size: 16,
        }
    }
}

fn parse_block(name: &str) -> Result<LayerKind, CliError> {
    match name {
        "standard" => Ok(LayerKind::StandardConv),
        "dsc" => Ok(LayerKind::Dsc),
        "bsconv-u" => Ok(LayerKind::BsconvU),
        "bsconv-s" => Ok(LayerKind::BsconvS),
        other => Err(CliError::new(format!(
            "unknown block '{other}' (expected standard|dsc|bsconv-u|bsconv-s)"
        ))),
    }
}

/// End-to-end toy training: per-epoch metrics CSV plus the final weights in
/// BSWT form (blueprint layers additionally stored materialized, so the
/// weight file can be fed straight back into `analyze`).
pub fn run_train(opts: &GlobalOpts, args: &TrainCliArgs) -> Result<i32, CliError> {
    if args.dataset != "toy" {
        return Err(CliError::new(format!(
            "unknown dataset '{}' (only 'toy' exists)",
            args.dataset
        )));
    }
    let block = parse_block(&args.block)?;
    let schedule = match args.schedule.as_str() {
        "step" => Schedule::Step {
            milestones: milestones_for(args.epochs),
            factor: 0.1,
        },
        "linear" => Schedule::Linear { total: args.epochs.max(1) },
        other => {
            return Err(CliError::new(format!(
                "unknown schedule '{other}' (expected step|linear)"
            )))
        }
    };
    let config = TrainConfig {
        lr0: args.lr,
        schedule,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        alpha: args.alpha,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: opts.seed,
    };
    config
        .validate()
        .map_err(|e| CliError::new(e.to_string()))?;
    println!("train: {} block={} {:?}", opts.describe(), args.block, config);

    let p = (block == LayerKind::BsconvS).then_some(args.p);
    let specs = toy_model_specs(block, args.width, args.classes, p);
    match opts.dtype {
        Dtype::F32 => run_train_typed::<f32>(opts, args, &specs, &config),
        Dtype::F64 => run_train_typed::<f64>(opts, args, &specs, &config),
    }
}

/// Step-schedule milestones at 50%, 75%, 90% of the run.
pub fn milestones_for(epochs: usize) -> Vec<usize> {
    if epochs == 0 {
        return vec![];
    }
    let at = |f: f64| ((epochs as f64 * f).round() as usize).min(epochs.saturating_sub(1));
    let mut ms = vec![at(0.5), at(0.75), at(0.9)];
    ms.dedup();
    ms
}

fn run_train_typed<S: Scalar>(
    opts: &GlobalOpts,
    args: &TrainCliArgs,
    specs: &[LayerSpec],
    config: &TrainConfig,
) -> Result<i32, CliError> {
    let data = make_toy_dataset::<S>(args.classes, args.per_class, args.image_size, opts.seed);
    let mut model =
        Model::<S>::from_specs(specs, opts.seed).map_err(|e| CliError::new(e.to_string()))?;
    let metrics = match train_model(&mut model, &data, config) {
        Ok(m) => m,
        Err(TrainError::NonFiniteLoss { epoch, batch, loss }) => {
            eprintln!("train: aborted, non-finite loss {loss} at epoch {epoch} batch {batch}");
            return Ok(1);
        }
        Err(e) => return Err(CliError::new(e.to_string())),
    };

    let mut csv = String::from("epoch,lr,train_loss,train_acc,test_acc,ortho_residual\n");
    for m in &metrics {
        let line = format!(
            "{},{:.6},{:.6},{:.4},{:.4},{:.6}\n",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc, m.ortho_residual
        );
        print!("{line}");
        csv.push_str(&line);
    }
    let metrics_path = opts
        .out_path("metrics.csv")
        .unwrap_or_else(|| PathBuf::from("metrics.csv"));
    write_text(&metrics_path, &csv)?;

    let weights = export_weights(&model)?;
    let weights_path = opts
        .out_path("weights.bswt")
        .unwrap_or_else(|| PathBuf::from("weights.bswt"));
    if let Some(parent) = weights_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    weights.write_to(&weights_path)?;
    println!("wrote {} and {}", metrics_path.display(), weights_path.display());
    if let Some(last) = metrics.last() {
        println!(
            "final: train_acc={:.4} test_acc={:.4} ortho_residual={:.6}",
            last.train_acc, last.test_acc, last.ortho_residual
        );
    }
    Ok(0)
}

/// Serialize every parameter tensor, naming entries `layer{i}.{role}`.
/// Blueprint layers also store their materialized `[N, M, K, K]` stacks.
pub fn export_weights<S: Scalar>(model: &Model<S>) -> Result<WeightFile, CliError> {
    let mut file = WeightFile::new();
    let mut put = |name: String, tensor: &Tensor<S>| -> Result<(), CliError> {
        let entry = match S::DTYPE {
            Dtype::F32 => TensorEntry::F32(tensor.convert()),
            Dtype::F64 => TensorEntry::F64(tensor.convert()),
        };
        file.push(&name, entry)?;
        Ok(())
    };
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Standard { kernels, .. } => put(format!("layer{i}.kernels"), kernels)?,
            Layer::Pointwise { weights } => put(format!("layer{i}.weights"), weights)?,
            Layer::Depthwise { kernels, .. } => put(format!("layer{i}.kernels"), kernels)?,
            Layer::Dsc {
                dw_kernels,
                pw_weights,
                ..
            } => {
                put(format!("layer{i}.dw_kernels"), dw_kernels)?;
                put(format!("layer{i}.pw_weights"), pw_weights)?;
                put(
                    format!("layer{i}.materialized"),
                    &cross_kernel_materialize(pw_weights, dw_kernels)
                        .map_err(|e| CliError::new(e.to_string()))?,
                )?;
            }
            Layer::BsconvU(p) => {
                put(format!("layer{i}.blueprints"), &p.blueprints)?;
                put(format!("layer{i}.weights"), &p.weights)?;
                put(format!("layer{i}.materialized"), &materialize_u(p))?;
            }
            Layer::BsconvS(p) => {
                put(format!("layer{i}.blueprints"), &p.blueprints)?;
                put(format!("layer{i}.weights_subspace"), &p.weights_subspace)?;
                put(format!("layer{i}.basis"), &p.basis)?;
                put(format!("layer{i}.materialized"), &materialize_s(p))?;
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
            Layer::Linear { weights, bias } => {
                put(format!("layer{i}.weights"), weights)?;
                put(format!("layer{i}.bias"), bias)?;
            }
        }
    }
    Ok(file)
}

/// One bench configuration `MxNxKxS`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSize {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spatial: usize,
}

/// Parse `MxNxKxS[;MxNxKxS...]`, e.g. `64x64x3x32;128x128x3x16`.
pub fn parse_bench_sizes(arg: &str) -> Result<Vec<BenchSize>, CliError> {
    let mut out = Vec::new();
    for item in arg.split(';').filter(|s| !s.trim().is_empty()) {
        let parts: Vec<usize> = item
            .trim()
            .split('x')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| CliError::new(format!("bad bench size '{item}'")))
            })
            .collect::<Result<_, _>>()?;
        if parts.len() != 4 || parts.iter().any(|&v| v == 0) {
            return Err(CliError::new(format!(
                "bench size '{item}' must be MxNxKxS with positive values"
            )));
        }
        if parts[2] % 2 == 0 {
            return Err(CliError::new(format!("bench kernel in '{item}' must be odd")));
        }
        out.push(BenchSize {
            in_channels: parts[0],
            out_channels: parts[1],
            kernel: parts[2],
            spatial: parts[3],
        });
    }
    if out.is_empty() {
        return Err(CliError::new("--sizes produced no bench configurations"));
    }
    Ok(out)
}

/// Median wall time per layer kind and size, reported against the MAC ratio
/// predicted by the complexity formulas (shared code path). Timings are the
/// one intentionally nondeterministic output of the binary.
pub fn run_bench(opts: &GlobalOpts, sizes: Option<&str>, repeats: usize) -> Result<i32, CliError> {
    if repeats == 0 {
        return Err(CliError::new("--repeats must be >= 1"));
    }
    let sizes = match sizes {
        Some(arg) => parse_bench_sizes(arg)?,
        None => vec![
            BenchSize { in_channels: 64, out_channels: 64, kernel: 3, spatial: 32 },
            BenchSize { in_channels: 256, out_channels: 256, kernel: 3, spatial: 64 },
        ],
    };
    println!("bench: {} repeats={repeats}", opts.describe());
    let header: Vec<String> = ["size", "kind", "median_ms", "macs", "mac_ratio", "time_ratio"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for size in &sizes {
        let (m, n, k, s) = (size.in_channels, size.out_channels, size.kernel, size.spatial);
        let shape = [m, s, s];
        let mut rng = SeededRng::new(opts.seed);
        let mut input = Tensor::<f32>::zeros(&shape).unwrap();
        rng.fill_normal(&mut input, 1.0);

        let kinds = [
            LayerKind::StandardConv,
            LayerKind::Dsc,
            LayerKind::BsconvU,
            LayerKind::BsconvS,
        ];
        let mut standard_time = None;
        let mut standard_macs = None;
        for kind in kinds {
            let spec = to_variant(&LayerSpec::conv(LayerKind::StandardConv, m, n, k), kind);
            let macs = count_macs(&spec, &shape)?;
            let median = time_layer(&input, &spec, repeats, opts.seed)?;
            let (tr, mr) = match (standard_time, standard_macs) {
                (Some(t0), Some(m0)) => (median / t0, macs as f64 / m0 as f64),
                _ => {
                    standard_time = Some(median);
                    standard_macs = Some(macs);
                    (1.0, 1.0)
                }
            };
            rows.push(vec![
                format!("{m}x{n}x{k}x{s}"),
                spec.kind.to_string(),
                format!("{:.3}", median * 1e3),
                macs.to_string(),
                format!("{mr:.4}"),
                format!("{tr:.4}"),
            ]);
        }
    }
    print!("{}", aligned_table(&header, &rows));
    if let Some(path) = opts.out_path("bench.csv") {
        write_text(&path, &csv_table(&header, &rows))?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn time_layer(
    input: &Tensor<f32>,
    spec: &LayerSpec,
    repeats: usize,
    seed: u64,
) -> Result<f64, CliError> {
    let layer =
        Layer::<f32>::from_spec(spec, seed).map_err(|e| CliError::new(e.to_string()))?;
    // warm-up pass, then timed repeats
    layer
        .forward(input)
        .map_err(|e| CliError::new(e.to_string()))?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = layer
            .forward(input)
            .map_err(|e| CliError::new(e.to_string()))?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}
