//! Command-line pipeline: generate or ingest datasets, train the PCA and
//! codebook models, encode images, benchmark, and inspect files.
//!
//! Every run is reproducible: seeds are ordinary flags with documented
//! defaults, training and encoding are deterministic, and `--threads 1`
//! produces byte-identical outputs to any other thread count.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use spvlad::codebook::{train_codebook, TrainParams};
use spvlad::datamodel::{EncodedRepresentation, PyramidSpec};
use spvlad::encoder::{self, Normalization};
use spvlad::error::{Error, Result};
use spvlad::ingest::{
    self, load_codebook, load_pca_model, save_codebook, save_pca_model, DatasetReader,
    EncodingWriter, Model,
};
use spvlad::pca::{fit_pca, project, sample_regions, sample_stream, DEFAULT_SAMPLE_CAP};
use spvlad::synthbench::{gen_scene_set, run_benchmark, BenchConfig, DEFAULT_NOISE};

/// Descriptor dimensions accepted without `--allow-any-dim`.
pub const STANDARD_DIMS: [usize; 4] = [128, 256, 512, 1024];

#[derive(Parser)]
#[command(
    name = "spvlad",
    version,
    about = "Spatial-pyramid VLAD encoding of per-region image descriptors",
    propagate_version = true
)]
pub struct Cli {
    /// Worker threads for encoding and benchmarking (default: all cores).
    /// Results are byte-identical for any value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset (classes differ only in where
    /// their secondary objects sit)
    GenData(GenDataArgs),
    /// Train the PCA dimensionality reduction on sampled regions
    TrainPca(TrainPcaArgs),
    /// Train a k-means codebook on PCA-projected regions
    TrainCodebook(TrainCodebookArgs),
    /// Encode every image of a dataset into pyramid VLAD vectors
    Encode(EncodeArgs),
    /// Run the synthetic local-discrimination benchmark
    Bench(BenchArgs),
    /// Print header and shape information of any pipeline file
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output dataset path (.spvd)
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scene classes (1-4, one level-2 placement each)
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Total number of scenes; must divide evenly by --classes
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Regions per scene, including the main region
    #[arg(long, default_value_t = 64)]
    pub regions: usize,
    /// Raw descriptor dimension
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Descriptor noise scale (0 = exact prototypes)
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    /// Generation seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainPcaArgs {
    /// Input dataset (.spvd)
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output model path (.spvm)
    #[arg(long)]
    pub out: PathBuf,
    /// Target dimension; 128, 256, 512, or 1024 unless --allow-any-dim
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Accept a target dimension outside the standard set
    #[arg(long, default_value_t = false)]
    pub allow_any_dim: bool,
    /// Maximum regions sampled for training
    #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
    pub sample: usize,
    /// Region sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainCodebookArgs {
    /// Input dataset (.spvd)
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Trained PCA model (.spvm)
    #[arg(long)]
    pub pca: PathBuf,
    /// Output codebook path (.spvm)
    #[arg(long)]
    pub out: PathBuf,
    /// Number of codewords
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Train in the augmented space (projected descriptor + 3 geometry
    /// components), for later `encode --augment`
    #[arg(long, default_value_t = false)]
    pub augment: bool,
    /// Maximum regions sampled for training
    #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
    pub sample: usize,
    /// Seeding and sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Iteration cap
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Relative inertia improvement below which iteration stops
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormMode {
    /// Signed square root, then one L2 per cell
    Ssr,
    /// L2 per codeword block, then one L2 per cell
    Intra,
}

impl From<NormMode> for Normalization {
    fn from(mode: NormMode) -> Self {
        match mode {
            NormMode::Ssr => Normalization::SignedSqrt,
            NormMode::Intra => Normalization::IntraBlock,
        }
    }
}

#[derive(Args)]
pub struct EncodeArgs {
    /// Input dataset (.spvd)
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Trained PCA model (.spvm)
    #[arg(long)]
    pub pca: PathBuf,
    /// Trained codebook (.spvm)
    #[arg(long)]
    pub codebook: PathBuf,
    /// Output encodings path (.spve)
    #[arg(long)]
    pub out: PathBuf,
    /// Pyramid depth
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub level: u8,
    /// Per-cell normalization
    #[arg(long, value_enum, default_value_t = NormMode::Ssr)]
    pub norm: NormMode,
    /// Encode geometry-augmented descriptors with no pyramid (the codebook
    /// must have been trained with --augment); --level is ignored
    #[arg(long, default_value_t = false)]
    pub augment: bool,
    /// Also export the encodings as CSV to this path
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Number of scene classes (1-4)
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Total number of scenes; must divide evenly by --classes
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Regions per scene
    #[arg(long, default_value_t = 64)]
    pub regions: usize,
    /// Raw descriptor dimension
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// PCA target dimension (free choice; the benchmark is self-contained)
    #[arg(long, default_value_t = 8)]
    pub pca_dim: usize,
    /// Codebook size (use 1 when --noise is 0; see --help of gen-data)
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Descriptor noise scale
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    /// Benchmark seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here instead of standard output
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    /// A .spvd, .spvm, or .spve file
    pub file: PathBuf,
    /// Also list per-image (datasets) or per-encoding (encodings) details
    #[arg(long, default_value_t = false)]
    pub full: bool,
    /// Cap on --full detail lines
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
}

fn scenes_per_class(classes: usize, scenes: usize) -> Result<usize> {
    if classes == 0 || scenes == 0 || !scenes.is_multiple_of(classes) {
        return Err(Error::InvalidInput(format!(
            "--scenes ({scenes}) must be a positive multiple of --classes ({classes})"
        )));
    }
    Ok(scenes / classes)
}

fn check_dim(dim: usize, allow_any: bool) -> Result<()> {
    if !allow_any && !STANDARD_DIMS.contains(&dim) {
        return Err(Error::InvalidInput(format!(
            "--dim {dim} is outside the standard set {STANDARD_DIMS:?}; \
             pass --allow-any-dim to use it anyway"
        )));
    }
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let config = BenchConfig {
        classes: args.classes,
        scenes_per_class: scenes_per_class(args.classes, args.scenes)?,
        regions_per_image: args.regions,
        descriptor_dim: args.dim,
        noise: args.noise,
        seed: args.seed,
        ..BenchConfig::default()
    };
    let (records, _labels) = gen_scene_set(&config)?;
    ingest::write_dataset(&args.out, args.dim, &records)?;
    println!(
        "wrote {} scenes ({} classes, {} regions each, dim {}) to {}",
        records.len(),
        args.classes,
        args.regions,
        args.dim,
        args.out.display()
    );
    Ok(())
}

fn train_pca(args: &TrainPcaArgs) -> Result<()> {
    check_dim(args.dim, args.allow_any_dim)?;
    let reader = DatasetReader::open(&args.input)?;
    let input_dim = reader.dim();
    let sample = sample_regions(reader, args.sample, args.seed)?;
    let model = fit_pca(&sample, args.dim)?;
    save_pca_model(&args.out, &model)?;
    println!(
        "trained pca {} -> {} on {} sampled regions; wrote {}",
        input_dim,
        args.dim,
        sample.len(),
        args.out.display()
    );
    Ok(())
}

fn train_codebook_cmd(args: &TrainCodebookArgs) -> Result<()> {
    let pca = load_pca_model(&args.pca)?;
    let reader = DatasetReader::open(&args.input)?;

    // points are sampled BEFORE projection in the plain case and AFTER
    // augmentation in the augmented case; either way one pass, f64 points
    let points: Vec<Vec<f64>> = if args.augment {
        let stream = reader.flat_map(|record| match record {
            Ok(record) => record
                .regions
                .iter()
                .map(|r| {
                    let projected = project(&pca, &r.features)?;
                    Ok(encoder::augment(r, projected, record.width, record.height)?.into_vec())
                })
                .collect::<Vec<Result<Vec<f64>>>>(),
            Err(e) => vec![Err(e)],
        });
        sample_stream(stream, args.sample, args.seed)?
    } else {
        let sample = sample_regions(reader, args.sample, args.seed)?;
        sample
            .iter()
            .map(|features| project(&pca, features))
            .collect::<Result<_>>()?
    };

    let run = train_codebook(
        &points,
        args.k,
        args.seed,
        TrainParams { max_iter: args.max_iter, tol: args.tol },
    )?;
    save_codebook(&args.out, &run.codebook)?;
    println!(
        "trained codebook k={} dim={} on {} points in {} rounds (inertia {:.6}); wrote {}",
        run.codebook.k(),
        run.codebook.dim(),
        points.len(),
        run.inertia_trace.len() - 1,
        run.codebook.inertia().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn encode(args: &EncodeArgs) -> Result<()> {
    let pca = load_pca_model(&args.pca)?;
    let codebook = load_codebook(&args.codebook)?;
    let norm: Normalization = args.norm.into();
    let reader = DatasetReader::open(&args.input)?;
    let count = reader.image_count();

    let spec = if args.augment {
        PyramidSpec::new(1).expect("level 1 is valid")
    } else {
        PyramidSpec::new(args.level).expect("clap bounds the level flag")
    };
    let mut writer = EncodingWriter::create(&args.out, spec, codebook.k(), codebook.dim(), count)?;

    // bounded batches keep memory flat on large datasets while rayon keeps
    // the cores busy; batch collection preserves input order
    const BATCH: usize = 512;
    let mut batch = Vec::with_capacity(BATCH);
    let mut written = Vec::new();
    let mut flush = |records: &mut Vec<spvlad::ImageRecord>,
                     writer: &mut EncodingWriter|
     -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let encodings: Vec<EncodedRepresentation> = if args.augment {
            use rayon::prelude::*;
            records
                .par_iter()
                .map(|rec| encoder::encode_augmented(&pca, &codebook, rec, norm))
                .collect::<Result<_>>()?
        } else {
            encoder::encode_records(&pca, &codebook, records, spec, norm)?
        };
        for enc in &encodings {
            writer.write(enc)?;
        }
        written.push(encodings.len());
        records.clear();
        Ok(())
    };

    for record in reader {
        batch.push(record?);
        if batch.len() == BATCH {
            flush(&mut batch, &mut writer)?;
        }
    }
    flush(&mut batch, &mut writer)?;
    writer.finish()?;
    let total: usize = written.iter().sum();
    println!(
        "encoded {} images (level {}, k={}, dim={}, {} values each) to {}",
        total,
        spec.level(),
        codebook.k(),
        codebook.dim(),
        EncodedRepresentation::expected_len(spec, codebook.k(), codebook.dim()),
        args.out.display()
    );

    if let Some(csv) = &args.csv {
        let encodings = ingest::load_encodings(&args.out)?;
        ingest::export_encodings_csv(csv, &encodings)?;
        println!("exported csv to {}", csv.display());
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let config = BenchConfig {
        classes: args.classes,
        scenes_per_class: scenes_per_class(args.classes, args.scenes)?,
        regions_per_image: args.regions,
        descriptor_dim: args.dim,
        pca_dim: args.pca_dim,
        k: args.k,
        noise: args.noise,
        seed: args.seed,
    };
    let report = run_benchmark(&config)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            let mut out = BufWriter::new(File::create(path)?);
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
            out.flush()?;
            println!("wrote report to {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let mut magic = [0u8; 4];
    File::open(&args.file)?.read_exact(&mut magic).map_err(|_| Error::Truncated)?;
    match &magic {
        b"SPVD" => inspect_dataset(&args.file, args.full, args.limit),
        b"SPVM" => inspect_model(&args.file),
        b"SPVE" => inspect_encodings(&args.file, args.full, args.limit),
        other => Err(Error::InvalidInput(format!(
            "unrecognized magic {:?}; expected a .spvd, .spvm, or .spve file",
            String::from_utf8_lossy(other)
        ))),
    }
}

fn inspect_dataset(path: &Path, full: bool, limit: usize) -> Result<()> {
    let reader = DatasetReader::open(path)?;
    println!("dataset: dim={} images={}", reader.dim(), reader.image_count());
    if full {
        for record in reader.take(limit) {
            let record = record?;
            println!(
                "  {} {}x{} regions={}",
                record.id,
                record.width,
                record.height,
                record.regions.len()
            );
        }
    }
    Ok(())
}

fn inspect_model(path: &Path) -> Result<()> {
    match ingest::load_model(path)? {
        Model::Pca(model) => {
            println!(
                "pca model: input_dim={} output_dim={}",
                model.input_dim(),
                model.output_dim()
            );
        }
        Model::Codebook(cb) => match cb.inertia() {
            Some(inertia) => {
                println!("codebook: k={} dim={} inertia={inertia:.6}", cb.k(), cb.dim())
            }
            None => println!("codebook: k={} dim={}", cb.k(), cb.dim()),
        },
    }
    Ok(())
}

fn inspect_encodings(path: &Path, full: bool, limit: usize) -> Result<()> {
    let encodings = ingest::load_encodings(path)?;
    match encodings.first() {
        Some(first) => println!(
            "encodings: level={} k={} dim={} count={} vector_len={}",
            first.spec.level(),
            first.k,
            first.dim,
            encodings.len(),
            first.vector.len()
        ),
        None => println!("encodings: empty file"),
    }
    if full {
        for enc in encodings.iter().take(limit) {
            print!("{}", encoder::describe(enc));
        }
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenData(args) => gen_data(args),
        Command::TrainPca(args) => train_pca(args),
        Command::TrainCodebook(args) => train_codebook_cmd(args),
        Command::Encode(args) => encode(args),
        Command::Bench(args) => bench(args),
        Command::Inspect(args) => inspect(args),
    }
}
