use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use seraser_core::config::{Backend, RunConfig};
use seraser_core::eraser::SampleInput;
use seraser_core::evaluation::{
    evaluate, load_images, load_samples, read_manifest, write_dataset, write_report, DatasetEntry, GroupReport,
    Method,
};
use seraser_core::gradcheck::{run_gradcheck, GradcheckConfig, DEFAULT_STEP, DEFAULT_TOLERANCE};
use seraser_core::image::Image;
use seraser_core::model::{AdapterRegistry, ModelHandle, ToyWorld, ToyWorldSpec, VisionLanguageModel};
use seraser_core::s2e::{build_dataset, read_pairs, GeneratorRegistry, S2eSettings, StubGenerator, DEFAULT_THRESHOLD};
use seraser_core::zeroshot::ZeroShot;

/// Test-time erasure of spurious-feature shortcuts in zero-shot classifiers.
#[derive(Parser)]
#[command(name = "seraser", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a method on a manifest and write a grouped accuracy report.
    Eval(EvalArgs),
    /// Compare analytic prompt gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a toy world's images, masks and manifest.
    Toyworld(ToyworldArgs),
    /// Shortcut-to-evaluate dataset construction.
    S2e {
        #[command(subcommand)]
        command: S2eCommand,
    },
}

#[derive(Subcommand)]
enum S2eCommand {
    /// Generate context-swapped images, filter them, and write a manifest.
    Build(S2eBuildArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Vanilla,
    Mask,
    Tpt,
    Seraser,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Vanilla => Method::Vanilla,
            MethodArg::Mask => Method::Mask,
            MethodArg::Tpt => Method::Tpt,
            MethodArg::Seraser => Method::Seraser,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Toy world spec (JSON) replacing model.toy, e.g. the toyworld.json
    /// written next to a generated manifest [default: config model.toy]
    #[arg(long)]
    toy_spec: Option<PathBuf>,
    /// Seed for prompts and per-sample randomness [default: config eval.seed, 0]
    #[arg(long, env = "SERASER_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.toy_spec {
            cfg.model.toy = read_toy_spec(p)?;
        }
        if let Some(s) = self.seed {
            cfg.eval.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Method to run [default: config eval.method, vanilla]
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// JSON Lines manifest [default: config eval.manifest]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report path [default: config output]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads [default: config eval.parallelism, 1]
    #[arg(long)]
    parallelism: Option<usize>,
    /// Record failing samples as errored instead of aborting
    #[arg(long)]
    skip_errors: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Number of (prompt, sample) pairs
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    /// Central-difference step
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Samples for adapter backends [default: config eval.manifest]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Test hook: perturb the toy backend's analytic gradients
    #[arg(long)]
    corrupt_gradients: bool,
}

#[derive(Args)]
struct ToyworldArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Toy world spec (JSON) [default: built-in defaults]
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of classes [default: spec, 2]
    #[arg(long)]
    num_classes: Option<usize>,
    /// Number of backgrounds [default: spec, 2]
    #[arg(long)]
    num_backgrounds: Option<usize>,
    /// Texture alignment with class text, in [0, 1] [default: spec, 1]
    #[arg(long)]
    shortcut_strength: Option<f64>,
    /// Fraction of each class on its habitual background [default: spec, 0.95]
    #[arg(long)]
    correlation: Option<f64>,
    /// Number of samples [default: spec, 400]
    #[arg(long)]
    num_samples: Option<usize>,
    /// World seed [default: spec, 0]
    #[arg(long, env = "SERASER_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct S2eBuildArgs {
    /// JSON list of class pairs
    #[arg(long)]
    pairs: PathBuf,
    /// Generator: "stub" or "plugin:<name>"
    #[arg(long, default_value = "stub")]
    client: String,
    /// Images per class and swapped context
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Keep images whose presence probability exceeds this
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Generation seed
    #[arg(long, env = "SERASER_SEED", default_value_t = 0)]
    seed: u64,
    /// Stub only: make every N-th image a glyph-free decoy
    #[arg(long)]
    decoy_every: Option<usize>,
    /// Softmax temperature of the presence filter
    #[arg(long, default_value_t = seraser_core::dist::DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Plugin clients only: run config naming the filter model [default: toy]
    #[arg(long)]
    config: Option<PathBuf>,
}

fn read_toy_spec(path: &Path) -> Result<ToyWorldSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: ToyWorldSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate().with_context(|| format!("validating {}", path.display()))?;
    Ok(spec)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_report(r: &GroupReport) {
    println!("method {}  n {}  seed {}", r.method, r.n, r.seed);
    for (g, s) in &r.per_group {
        println!("  {g:<32} {:>5}/{:<5} {:6.2}", s.correct, s.total, 100.0 * s.accuracy);
    }
    if !r.errored.is_empty() {
        println!("errored {}", r.errored.len());
    }
    println!("AVG  {:.2}", 100.0 * r.avg_accuracy);
    println!("W.G. {:.2}", 100.0 * r.worst_group_accuracy);
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    if let Some(m) = args.method {
        cfg.eval.method = m.into();
    }
    if let Some(m) = args.manifest {
        cfg.eval.manifest = Some(m);
    }
    if let Some(o) = args.out {
        cfg.output = Some(o);
    }
    if let Some(p) = args.parallelism {
        cfg.eval.parallelism = p;
    }
    cfg.eval.skip_errors |= args.skip_errors;
    cfg.validate("command line")?;
    let manifest = cfg
        .eval
        .manifest
        .clone()
        .ok_or_else(|| anyhow!("no manifest: pass --manifest or set eval.manifest"))?;
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| anyhow!("no report path: pass --out or set output"))?;

    let model = cfg.resolve_model(&AdapterRegistry::new())?;
    let records = read_manifest(&manifest)?;
    let samples = load_samples(&manifest, &records, model.labels(), model.input_shape())?;
    let pool = match &cfg.eval.reference_pool {
        Some(p) => load_images(p, &read_manifest(p)?)?,
        None => Vec::new(),
    };
    let report = evaluate(model.as_ref(), &samples, &cfg.eval_settings(), &pool)?;
    write_report(&report, &out)?;
    print_report(&report);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    if let Some(m) = args.manifest {
        cfg.eval.manifest = Some(m);
    }
    cfg.validate("command line")?;
    let check = GradcheckConfig {
        pairs: args.pairs,
        step: args.step,
        tolerance: args.tolerance,
        seed: cfg.eval.seed,
        ..GradcheckConfig::default()
    };

    // Owned samples: the toy world's own test set, or a manifest.
    let (model, images, masks, ids): (ModelHandle, Vec<Image>, Vec<_>, Vec<String>) =
        match Backend::parse(&cfg.model.backend)? {
            Backend::Toy => {
                let world = ToyWorld::new(cfg.model.toy.clone())?;
                let mut toy = (*world.model()).clone();
                if args.corrupt_gradients {
                    toy = toy.with_corrupted_gradients();
                }
                let samples = world.samples();
                let model: ModelHandle = std::sync::Arc::new(toy);
                let (mut images, mut masks, mut ids) = (Vec::new(), Vec::new(), Vec::new());
                for s in samples {
                    images.push(s.image);
                    masks.push(Some(s.mask));
                    ids.push(s.id);
                }
                (model, images, masks, ids)
            }
            Backend::Adapter(_) => {
                if args.corrupt_gradients {
                    bail!("--corrupt-gradients only applies to the toy backend");
                }
                let model = cfg.resolve_model(&AdapterRegistry::new())?;
                if !model.provides_prompt_gradients() {
                    bail!(seraser_core::Error::Unsupported(format!(
                        "{} does not provide prompt gradients",
                        model.identity()
                    )));
                }
                let manifest = cfg
                    .eval
                    .manifest
                    .clone()
                    .ok_or_else(|| anyhow!("adapter backends need --manifest for samples"))?;
                let loaded = load_samples(&manifest, &read_manifest(&manifest)?, model.labels(), model.input_shape())?;
                let (mut images, mut masks, mut ids) = (Vec::new(), Vec::new(), Vec::new());
                for s in loaded {
                    images.push(s.image);
                    masks.push(s.mask);
                    ids.push(s.id);
                }
                (model, images, masks, ids)
            }
        };
    let inputs: Vec<SampleInput<'_>> = (0..images.len())
        .map(|i| SampleInput {
            id: &ids[i],
            image: &images[i],
            mask: masks[i].as_ref(),
        })
        .collect();
    let zs = ZeroShot::new(model.as_ref(), cfg.model.temperature)?;
    let report = run_gradcheck(&zs, &inputs, &cfg.eraser, &[], &check)?;
    println!(
        "max relative error {:.6e} over {} pairs (tolerance {:e})",
        report.max_relative_error,
        report.pairs.len(),
        report.tolerance
    );
    if report.passed {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_toyworld(args: ToyworldArgs) -> Result<ExitCode> {
    let mut spec = match &args.spec {
        Some(p) => read_toy_spec(p)?,
        None => ToyWorldSpec::default(),
    };
    if let Some(v) = args.num_classes {
        spec.num_classes = v;
    }
    if let Some(v) = args.num_backgrounds {
        spec.num_backgrounds = v;
    }
    if let Some(v) = args.shortcut_strength {
        spec.shortcut_strength = v;
    }
    if let Some(v) = args.correlation {
        spec.correlation = v;
    }
    if let Some(v) = args.num_samples {
        spec.num_samples = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let world = ToyWorld::new(spec.clone())?;
    let samples = world.samples();
    let entries: Vec<DatasetEntry<'_>> = samples
        .iter()
        .map(|s| DatasetEntry {
            id: &s.id,
            image: &s.image,
            mask: Some(&s.mask),
            label: &s.label,
            group: &s.group,
        })
        .collect();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = write_dataset(&args.out, &entries)?;
    write_json(&args.out.join("toyworld.json"), &spec)?;
    let groups: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.group.as_str()).collect();
    println!(
        "wrote {} samples in {} groups to {}",
        samples.len(),
        groups.len(),
        manifest.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_s2e_build(args: S2eBuildArgs) -> Result<ExitCode> {
    let pairs = read_pairs(&args.pairs)?;
    let settings = S2eSettings {
        count: args.count,
        threshold: args.threshold,
        seed: args.seed,
        temperature: args.temperature,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let summary = match args.client.split_once(':') {
        None if args.client == "stub" => {
            let stub = StubGenerator::from_pairs(&pairs, args.seed, args.decoy_every)?;
            let model = stub.model();
            let zs = ZeroShot::new(model.as_ref(), settings.temperature)?;
            let prompt = model.initial_prompt(args.seed);
            let summary = build_dataset(&pairs, &stub, &zs, &prompt, &settings, &args.out)?;
            write_json(&args.out.join("toyworld.json"), stub.world().spec())?;
            summary
        }
        Some(("plugin", name)) => {
            if args.decoy_every.is_some() {
                bail!("--decoy-every only applies to the stub client");
            }
            let client = GeneratorRegistry::new().create(name, &pairs, args.seed)?;
            let cfg = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let model = cfg.resolve_model(&AdapterRegistry::new())?;
            let zs = ZeroShot::new(model.as_ref(), settings.temperature)?;
            let prompt = model.initial_prompt(args.seed);
            build_dataset(&pairs, client.as_ref(), &zs, &prompt, &settings, &args.out)?
        }
        _ => bail!("--client must be \"stub\" or \"plugin:<name>\", got {:?}", args.client),
    };
    for (g, n) in &summary.kept_per_group {
        println!("  {g:<32} kept {n}");
    }
    println!("rejected {}", summary.rejected);
    println!("manifest {}", summary.manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Toyworld(a) => cmd_toyworld(a),
        Command::S2e {
            command: S2eCommand::Build(a),
        } => cmd_s2e_build(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
