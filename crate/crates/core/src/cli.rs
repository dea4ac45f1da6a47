//! Command-line surface: synthetic generation, ensemble inference,
//! clustering + aggregation, evaluation, ablations, and latency benchmarks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. All file writes are
//! atomic, so failed runs leave no partial outputs. Every command except
//! `bench` is deterministic given explicit seeds.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::aggregation::{aggregate_all, AggregationStrategy, ProbabilisticDetection};
use crate::clustering::{bsas_cluster, ClusteringParams};
use crate::decoder::{Decoder, DecoderConfig, EnsembleMode, ImageFeatures};
use crate::error::{Error, Result};
use crate::geometry::ImageSize;
use crate::io;
use crate::metrics::{compute_dece, compute_map, compute_pdq, EvalReport, GtStore};
use crate::synth::{generate_scene, simulate_ensemble, EnsembleNoise, SceneParams};

#[derive(Parser)]
#[command(
    name = "probdet",
    version,
    about = "Grouped-query ensemble detection pipeline and probabilistic evaluation stack"
)]
struct Cli {
    /// Master seed; per-image and per-component streams derive from it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads for per-image / per-seed parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory for default file names.
    #[arg(long, global = true, default_value = ".")]
    output: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground-truth file and raw ensemble detections.
    Synth(SynthArgs),
    /// Cluster and aggregate raw detections (or run the decoder first).
    Pipeline(PipelineArgs),
    /// Evaluate a detections file against ground truth (mAP, D-ECE, PDQ).
    Evaluate(EvaluateArgs),
    /// Time decoder layouts against sequential-ensemble emulation.
    Bench(BenchArgs),
    /// Sweep group counts or aggregation strategies on the synthetic bench.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliMode {
    Deterministic,
    GroupEnsemble,
    McDropout,
    McGroupEnsemble,
}

impl From<CliMode> for EnsembleMode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Deterministic => EnsembleMode::Deterministic,
            CliMode::GroupEnsemble => EnsembleMode::GroupEnsemble,
            CliMode::McDropout => EnsembleMode::McDropout,
            CliMode::McGroupEnsemble => EnsembleMode::McGroupEnsemble,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliStrategy {
    MeanConf,
    MaxConf,
    MaxConfScaled,
}

impl From<CliStrategy> for AggregationStrategy {
    fn from(s: CliStrategy) -> Self {
        match s {
            CliStrategy::MeanConf => AggregationStrategy::MeanConf,
            CliStrategy::MaxConf => AggregationStrategy::MaxConf,
            CliStrategy::MaxConfScaled => AggregationStrategy::MaxConfScaled,
        }
    }
}

fn strategy_name(s: AggregationStrategy) -> &'static str {
    match s {
        AggregationStrategy::MeanConf => "mean_conf",
        AggregationStrategy::MaxConf => "max_conf",
        AggregationStrategy::MaxConfScaled => "max_conf_scaled",
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliStudy {
    Groups,
    Strategy,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    images: usize,
    /// Fixed object count per image (overrides the min/max range).
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long, default_value_t = 4)]
    objects_min: usize,
    #[arg(long, default_value_t = 7)]
    objects_max: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 640.0)]
    image_width: f64,
    #[arg(long, default_value_t = 480.0)]
    image_height: f64,
    /// Minimum ground-truth box side in pixels.
    #[arg(long, default_value_t = 24.0)]
    min_box: f64,
    /// Maximum pairwise ground-truth IoU.
    #[arg(long, default_value_t = 0.2)]
    overlap_limit: f64,
    #[arg(long, default_value_t = 5)]
    groups: usize,
    /// Box jitter sigma (fraction of box size per coordinate).
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0.8)]
    conf_base: f64,
    #[arg(long, default_value_t = 0.1)]
    conf_jitter: f64,
    /// Per-group miss probability.
    #[arg(long, default_value_t = 0.1)]
    miss: f64,
    /// Poisson mean of false positives per group.
    #[arg(long, default_value_t = 0.5)]
    fp_rate: f64,
    #[arg(long)]
    gt_out: Option<PathBuf>,
    #[arg(long)]
    det_out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Raw ensemble detections file (from `synth`).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Run the decoder on seeded synthetic features instead of `--input`.
    #[arg(long, default_value_t = false)]
    decode: bool,
    #[arg(long, value_enum, default_value_t = CliMode::GroupEnsemble)]
    mode: CliMode,
    #[arg(long, default_value_t = 5)]
    groups: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    feature_tokens: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 1)]
    images: usize,
    #[arg(long, default_value_t = 640.0)]
    image_width: f64,
    #[arg(long, default_value_t = 480.0)]
    image_height: f64,
    /// BSAS IoU threshold.
    #[arg(long, default_value_t = 0.7)]
    theta: f64,
    #[arg(long, value_enum, default_value_t = CliStrategy::MaxConfScaled)]
    strategy: CliStrategy,
    #[arg(long, default_value_t = 0.3)]
    conf_threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump the decoder weights as JSON (decode mode only).
    #[arg(long)]
    dump_weights: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Reliability-diagram bin count.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// IoU threshold for D-ECE TP/FP marking.
    #[arg(long, default_value_t = 0.5)]
    match_iou: f64,
    /// Confidence threshold applied to D-ECE and PDQ (mAP sweeps all).
    #[arg(long, default_value_t = 0.3)]
    conf_threshold: f64,
    /// PDQ covariance floor, std pixels per corner coordinate.
    #[arg(long, default_value_t = 1.0)]
    pdq_eps: f64,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    reliability_csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 48)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    queries: usize,
    #[arg(long, default_value_t = 384)]
    feature_tokens: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    groups_list: Vec<usize>,
    /// Timed repetitions per layout.
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Untimed warmup repetitions.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    study: CliStudy,
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    groups_list: Vec<usize>,
    /// Group count for the strategy study.
    #[arg(long, default_value_t = 5)]
    groups: usize,
    #[arg(long, value_enum, default_value_t = CliStrategy::MaxConfScaled)]
    strategy: CliStrategy,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0.9)]
    conf_base: f64,
    #[arg(long, default_value_t = 0.1)]
    conf_jitter: f64,
    #[arg(long, default_value_t = 0.1)]
    miss: f64,
    #[arg(long, default_value_t = 0.5)]
    fp_rate: f64,
    #[arg(long, default_value_t = 0.7)]
    theta: f64,
    #[arg(long, default_value_t = 0.3)]
    conf_threshold: f64,
    /// IoU threshold for D-ECE TP/FP marking.
    #[arg(long, default_value_t = 0.5)]
    match_iou: f64,
    #[arg(long, default_value_t = 1.0)]
    pdq_eps: f64,
    #[arg(long, default_value_t = 4)]
    objects_min: usize,
    #[arg(long, default_value_t = 7)]
    objects_max: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 320.0)]
    image_width: f64,
    #[arg(long, default_value_t = 240.0)]
    image_height: f64,
    #[arg(long, default_value_t = 20.0)]
    min_box: f64,
    #[arg(long, default_value_t = 0.2)]
    overlap_limit: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err)
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) =>
        {
            print!("{err}");
            return 0;
        }
        Err(err) => {
            let line = err.to_string();
            eprintln!("{}", line.lines().next().unwrap_or("invalid arguments"));
            return 1;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
    {
        Ok(pool) => pool,
        Err(err) => {
            eprintln!("error: cannot build thread pool: {err}");
            return 1;
        }
    };
    let outcome = pool.install(|| dispatch(&cli));
    match outcome {
        Ok(()) => 0,
        Err(Error::Configuration(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(cli, args),
        Command::Pipeline(args) => cmd_pipeline(cli, args),
        Command::Evaluate(args) => cmd_evaluate(cli, args),
        Command::Bench(args) => cmd_bench(cli, args),
        Command::Ablate(args) => cmd_ablate(cli, args),
    }
}

fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut acc = base;
    for &p in parts {
        let mut z = acc
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(p.wrapping_mul(0x2545_F491_4F6C_DD1D));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        acc = z ^ (z >> 31);
    }
    acc
}

fn out_path(cli: &Cli, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| cli.output.join(default_name))
}

// --- synth -------------------------------------------------------------------

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    if args.images == 0 {
        return Err(Error::Configuration("need at least one image".into()));
    }
    let (min_objects, max_objects) = match args.objects {
        Some(n) => (n, n),
        None => (args.objects_min, args.objects_max),
    };
    let image_size = ImageSize::new(args.image_width, args.image_height)?;
    let per_image: Vec<(u64, Vec<crate::metrics::GroundTruthInstance>, crate::decoder::DetectionSetGroup)> =
        (0..args.images)
            .into_par_iter()
            .map(|idx| {
                let image_id = idx as u64 + 1;
                let scene_params = SceneParams {
                    image_size,
                    min_objects,
                    max_objects,
                    num_classes: args.classes,
                    min_box_size: args.min_box,
                    overlap_limit: args.overlap_limit,
                    seed: mix(cli.seed, &[idx as u64]),
                };
                let scene = generate_scene(&scene_params, image_id)?;
                let noise = EnsembleNoise {
                    box_sigma: args.sigma,
                    conf_base: args.conf_base,
                    conf_jitter: args.conf_jitter,
                    miss_prob: args.miss,
                    fp_rate: args.fp_rate,
                    seed: mix(cli.seed, &[idx as u64, 1]),
                };
                let sets =
                    simulate_ensemble(&scene, image_size, args.groups, args.classes, &noise)?;
                Ok((image_id, scene, sets))
            })
            .collect::<Result<Vec<_>>>()?;

    let mut store = GtStore::new();
    let mut raw = io::RawEnsembleFile {
        num_groups: args.groups,
        images: Vec::with_capacity(per_image.len()),
    };
    let mut total_dets = 0usize;
    for (image_id, scene, sets) in per_image {
        store.add_image(image_id, image_size)?;
        for inst in scene {
            store.add_instance(inst)?;
        }
        total_dets += sets.groups.iter().map(Vec::len).sum::<usize>();
        raw.images.push(io::RawImageEntry {
            image_id,
            width: image_size.width,
            height: image_size.height,
            groups: sets.groups,
        });
    }
    let gt_path = out_path(cli, &args.gt_out, "gt.json");
    let det_path = out_path(cli, &args.det_out, "raw_detections.json");
    io::save_coco_gt(&store, args.classes, &gt_path)?;
    io::save_raw_ensemble(&raw, &det_path)?;
    println!(
        "synth: images={} ground_truth={} detections={} groups={} -> {} {}",
        store.num_images(),
        store.total_instances(),
        total_dets,
        args.groups,
        gt_path.display(),
        det_path.display()
    );
    Ok(())
}

// --- pipeline ----------------------------------------------------------------

/// Per-image pipeline input: image id, group count, pooled raw detections.
type PooledImage = (u64, usize, Vec<crate::decoder::Detection>);

fn cmd_pipeline(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    if args.input.is_some() == args.decode {
        return Err(Error::Configuration(
            "pass exactly one of --input <raw detections> or --decode".into(),
        ));
    }
    let params = ClusteringParams::new(args.theta)?;
    let strategy: AggregationStrategy = args.strategy.into();

    let (sizes, per_image): (BTreeMap<u64, ImageSize>, Vec<PooledImage>) =
        if let Some(input) = &args.input {
            let raw = io::load_raw_ensemble(input)?;
            let mut sizes = BTreeMap::new();
            let mut flat = Vec::with_capacity(raw.images.len());
            for entry in &raw.images {
                sizes.insert(entry.image_id, ImageSize::new(entry.width, entry.height)?);
                let pooled: Vec<crate::decoder::Detection> =
                    entry.groups.iter().flatten().copied().collect();
                flat.push((entry.image_id, raw.num_groups, pooled));
            }
            (sizes, flat)
        } else {
            let config = DecoderConfig {
                embed_dim: args.embed_dim,
                num_heads: args.heads,
                num_layers: args.layers,
                queries_per_group: args.queries,
                num_groups: args.groups,
                num_classes: args.classes,
                feature_tokens: args.feature_tokens,
                dropout_prob: args.dropout,
                weight_seed: mix(cli.seed, &[0x57]),
                dropout_seed: mix(cli.seed, &[0xD0]),
            };
            let decoder = Decoder::new(config)?;
            if let Some(dump) = &args.dump_weights {
                io::write_json(dump, &decoder.to_weights_file())?;
            }
            if args.images == 0 {
                return Err(Error::Configuration("need at least one image".into()));
            }
            let image_size = ImageSize::new(args.image_width, args.image_height)?;
            let mode: EnsembleMode = args.mode.into();
            let results: Vec<PooledImage> = (0..args.images)
                .into_par_iter()
                .map(|idx| {
                    let image_id = idx as u64 + 1;
                    let features = ImageFeatures::seeded(
                        config.feature_tokens,
                        config.embed_dim,
                        mix(cli.seed, &[0xF0, idx as u64]),
                    );
                    let sets = decoder.run_ensemble(&features, mode)?;
                    Ok((image_id, sets.num_groups(), sets.pooled()))
                })
                .collect::<Result<Vec<_>>>()?;
            let sizes = results
                .iter()
                .map(|(id, _, _)| (*id, image_size))
                .collect();
            (sizes, results)
        };

    let dets: Vec<Vec<ProbabilisticDetection>> = per_image
        .par_iter()
        .map(|(image_id, groups, pooled)| {
            let clusters = bsas_cluster(pooled, &params)?;
            aggregate_all(&clusters, *groups, strategy, args.conf_threshold, *image_id)
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<ProbabilisticDetection> = dets.into_iter().flatten().collect();

    let out = out_path(cli, &args.out, "detections.json");
    io::save_prob_detections(&flat, &sizes, &out)?;
    println!(
        "pipeline: images={} detections={} strategy={} theta={} conf_threshold={} -> {}",
        per_image.len(),
        flat.len(),
        strategy_name(strategy),
        args.theta,
        args.conf_threshold,
        out.display()
    );
    Ok(())
}

// --- evaluate ----------------------------------------------------------------

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let store = io::load_coco_gt(&args.gt)?;
    let dets = io::load_prob_detections(&args.detections, &store.image_sizes())?;
    let by_image = io::group_by_image(dets);
    let map = compute_map(&by_image, &store)?;
    let dece = compute_dece(&by_image, &store, args.bins, args.conf_threshold, args.match_iou)?;
    let pdq = compute_pdq(&by_image, &store, args.conf_threshold, args.pdq_eps)?;
    let report = EvalReport { map, dece, pdq };

    let report_path = out_path(cli, &args.report, "report.json");
    io::write_json(&report_path, &report)?;
    let csv_path = out_path(cli, &args.reliability_csv, "reliability.csv");
    io::atomic_write_text(&csv_path, &io::reliability_csv(&report.dece.bins))?;
    println!(
        "evaluate: mAP={:.4} D-ECE={:.4} PDQ={:.4} (tp={} fp={} fn={}) -> {} {}",
        report.map.mean_ap,
        report.dece.dece,
        report.pdq.score,
        report.pdq.true_positives,
        report.pdq.false_positives,
        report.pdq.false_negatives,
        report_path.display(),
        csv_path.display()
    );
    Ok(())
}

// --- bench -------------------------------------------------------------------

struct BenchRow {
    layout: &'static str,
    groups: usize,
    mean_ms: f64,
    std_ms: f64,
}

fn time_reps(reps: usize, warmup: usize, mut f: impl FnMut()) -> (f64, f64) {
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f();
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / samples.len() as f64;
    (mean, var.sqrt())
}

/// Times the three single-model layouts plus a sequential ensemble
/// emulation (the same decoder shape invoked once per member with distinct
/// weight seeds). Matrix kernels are single-threaded; the thread count is
/// recorded in the CSV.
pub fn bench_layouts(
    config: DecoderConfig,
    groups_list: &[usize],
    reps: usize,
    warmup: usize,
    features_seed: u64,
) -> Result<Vec<(String, usize, f64, f64)>> {
    use crate::decoder::{build_group_mask, ForwardMode, Layout};
    let mut rows = Vec::new();
    for &g in groups_list {
        if g == 0 {
            return Err(Error::Configuration("group counts must be >= 1".into()));
        }
        let cfg = DecoderConfig {
            num_groups: g,
            ..config
        };
        let decoder = Decoder::new(cfg)?;
        let features = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, features_seed);
        let queries = decoder.ensemble_queries(EnsembleMode::GroupEnsemble);
        let mask = build_group_mask(g, cfg.queries_per_group);
        for (name, layout) in [
            ("masked_joint", Layout::MaskedJoint),
            ("batched_groups", Layout::BatchedGroups),
            ("sequential_groups", Layout::SequentialGroups),
        ] {
            let (mean, std) = time_reps(reps, warmup, || {
                let out = decoder
                    .forward(&features, &queries, &mask, ForwardMode::Deterministic, layout)
                    .expect("bench forward");
                std::hint::black_box(&out);
            });
            rows.push((name.to_string(), g, mean, std));
        }
        // Deep-ensembles shape: one independent model per member, invoked
        // sequentially; each member projects the features itself.
        let members: Vec<Decoder> = (0..g)
            .map(|m| {
                Decoder::new(DecoderConfig {
                    num_groups: 1,
                    weight_seed: mix(cfg.weight_seed, &[m as u64]),
                    ..cfg
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let member_mask = build_group_mask(1, cfg.queries_per_group);
        let (mean, std) = time_reps(reps, warmup, || {
            for member in &members {
                let queries = member.ensemble_queries(EnsembleMode::Deterministic);
                let out = member
                    .forward(
                        &features,
                        &queries,
                        &member_mask,
                        ForwardMode::Deterministic,
                        Layout::SequentialGroups,
                    )
                    .expect("bench forward");
                std::hint::black_box(&out);
            }
        });
        rows.push(("sequential_ensemble".to_string(), g, mean, std));
    }
    Ok(rows)
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    if args.reps == 0 {
        return Err(Error::Configuration("need at least one repetition".into()));
    }
    let config = DecoderConfig {
        embed_dim: args.embed_dim,
        num_heads: args.heads,
        num_layers: args.layers,
        queries_per_group: args.queries,
        num_groups: 1, // overridden per measured group count
        num_classes: args.classes,
        feature_tokens: args.feature_tokens,
        dropout_prob: 0.0,
        weight_seed: mix(cli.seed, &[0x57]),
        dropout_seed: 0,
    };
    let rows = bench_layouts(
        config,
        &args.groups_list,
        args.reps,
        args.warmup,
        mix(cli.seed, &[0xF0]),
    )?;
    let rows: Vec<BenchRow> = rows
        .into_iter()
        .map(|(layout, groups, mean_ms, std_ms)| BenchRow {
            layout: match layout.as_str() {
                "masked_joint" => "masked_joint",
                "batched_groups" => "batched_groups",
                "sequential_groups" => "sequential_groups",
                _ => "sequential_ensemble",
            },
            groups,
            mean_ms,
            std_ms,
        })
        .collect();

    let mut csv = String::from("layout,groups,mean_ms,std_ms,reps,kernel_threads\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{},1\n",
            row.layout, row.groups, row.mean_ms, row.std_ms, args.reps
        ));
    }
    let out = out_path(cli, &args.out, "bench.csv");
    io::atomic_write_text(&out, &csv)?;
    for &g in &args.groups_list {
        let find = |name: &str| {
            rows.iter()
                .find(|r| r.layout == name && r.groups == g)
                .map(|r| r.mean_ms)
        };
        if let (Some(batched), Some(seq)) = (find("batched_groups"), find("sequential_ensemble")) {
            println!(
                "bench: G={g} batched={batched:.2}ms sequential_ensemble={seq:.2}ms speedup={:.2}x",
                seq / batched
            );
        }
    }
    println!("bench: -> {}", out.display());
    Ok(())
}

// --- ablate ------------------------------------------------------------------

struct AblateSetting {
    label: String,
    groups: usize,
    strategy: AggregationStrategy,
}

struct MetricStats {
    mean: f64,
    se: f64,
}

fn stats(values: &[f64]) -> MetricStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    MetricStats {
        mean,
        se: (var / n).sqrt(),
    }
}

/// Runs the synthetic pipeline + metrics for one setting over shared seeds.
/// Returns per-seed (pdq, dece, map) triples.
#[allow(clippy::too_many_arguments)]
pub fn ablate_setting(
    base_seed: u64,
    seeds: usize,
    groups: usize,
    strategy: AggregationStrategy,
    scene_template: &SceneParams,
    noise_template: &EnsembleNoise,
    theta: f64,
    conf_threshold: f64,
    match_iou: f64,
    pdq_eps: f64,
) -> Result<Vec<(f64, f64, f64)>> {
    let params = ClusteringParams::new(theta)?;
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let scene_params = SceneParams {
                seed: mix(base_seed, &[s as u64]),
                ..*scene_template
            };
            let scene = generate_scene(&scene_params, 1)?;
            let noise = EnsembleNoise {
                seed: mix(base_seed, &[s as u64, 1]),
                ..*noise_template
            };
            let sets = simulate_ensemble(
                &scene,
                scene_params.image_size,
                groups,
                scene_params.num_classes,
                &noise,
            )?;
            let mut store = GtStore::new();
            store.add_image(1, scene_params.image_size)?;
            for inst in scene {
                store.add_instance(inst)?;
            }
            let clusters = bsas_cluster(&sets.pooled(), &params)?;
            // Aggregate unthresholded; mAP sweeps all confidences while
            // D-ECE and PDQ apply their own threshold.
            let aggregated = aggregate_all(&clusters, groups, strategy, 0.0, 1)?;
            let mut by_image = BTreeMap::new();
            by_image.insert(1u64, aggregated);
            let map = compute_map(&by_image, &store)?;
            let dece = compute_dece(&by_image, &store, 10, conf_threshold, match_iou)?;
            let pdq = compute_pdq(&by_image, &store, conf_threshold, pdq_eps)?;
            Ok((pdq.score, dece.dece, map.mean_ap))
        })
        .collect()
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    if args.seeds < 2 {
        return Err(Error::Configuration("need at least two seeds".into()));
    }
    let settings: Vec<AblateSetting> = match args.study {
        CliStudy::Groups => args
            .groups_list
            .iter()
            .map(|&g| AblateSetting {
                label: g.to_string(),
                groups: g,
                strategy: args.strategy.into(),
            })
            .collect(),
        CliStudy::Strategy => [
            AggregationStrategy::MeanConf,
            AggregationStrategy::MaxConf,
            AggregationStrategy::MaxConfScaled,
        ]
        .into_iter()
        .map(|s| AblateSetting {
            label: strategy_name(s).to_string(),
            groups: args.groups,
            strategy: s,
        })
        .collect(),
    };
    let scene_template = SceneParams {
        image_size: ImageSize::new(args.image_width, args.image_height)?,
        min_objects: args.objects_min,
        max_objects: args.objects_max,
        num_classes: args.classes,
        min_box_size: args.min_box,
        overlap_limit: args.overlap_limit,
        seed: 0,
    };
    let noise_template = EnsembleNoise {
        box_sigma: args.sigma,
        conf_base: args.conf_base,
        conf_jitter: args.conf_jitter,
        miss_prob: args.miss,
        fp_rate: args.fp_rate,
        seed: 0,
    };

    let study_name = match args.study {
        CliStudy::Groups => "groups",
        CliStudy::Strategy => "strategy",
    };
    let mut csv = String::from(
        "study,setting,pdq_mean,pdq_se,dece_mean,dece_se,map_mean,map_se,seeds\n",
    );
    for setting in &settings {
        let triples = ablate_setting(
            cli.seed,
            args.seeds,
            setting.groups,
            setting.strategy,
            &scene_template,
            &noise_template,
            args.theta,
            args.conf_threshold,
            args.match_iou,
            args.pdq_eps,
        )?;
        let pdq = stats(&triples.iter().map(|t| t.0).collect::<Vec<_>>());
        let dece = stats(&triples.iter().map(|t| t.1).collect::<Vec<_>>());
        let map = stats(&triples.iter().map(|t| t.2).collect::<Vec<_>>());
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            study_name,
            setting.label,
            pdq.mean,
            pdq.se,
            dece.mean,
            dece.se,
            map.mean,
            map.se,
            args.seeds
        ));
        println!(
            "ablate[{study_name}] {}: PDQ={:.4}+-{:.4} D-ECE={:.4}+-{:.4} mAP={:.4}+-{:.4}",
            setting.label, pdq.mean, pdq.se, dece.mean, dece.se, map.mean, map.se
        );
    }
    let out = out_path(cli, &args.out, "ablate.csv");
    io::atomic_write_text(&out, &csv)?;
    println!("ablate: -> {}", out.display());
    Ok(())
}
