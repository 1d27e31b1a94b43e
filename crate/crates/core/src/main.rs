use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dfo_attack::harness::{
    emit_outputs, group_cdfs, read_cdf_csv, read_records, run_experiment, write_cdf_csv, write_plots,
    ExperimentConfig, ImageEntry, ImageSet, ModelRef, TargetProtocol,
};
use dfo_attack::problem::{argmax, AttackProblem, DEFAULT_LOWER, DEFAULT_UPPER};
use dfo_attack::sampling::SamplingStrategy;
use dfo_attack::targets::synthetic::{random_image, random_linear_model};
use dfo_attack::targets::remote::serve_pipe;
use dfo_attack::targets::{load_model, save_model, variance_mask, Classifier, CountingOracle, MaskedOracle, Model};
use dfo_attack::{AttackConfig, Error, QueryOracle, Result, Shape};

#[derive(Parser)]
#[command(name = "dfo-attack", version, about = "Targeted black-box attacks and query-budget benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack a single image and print the result as JSON.
    Attack(AttackArgs),
    /// Run a campaign and write records, CDFs and plots.
    Bench(BenchArgs),
    /// Aggregate a records file into CDFs.
    Cdf(CdfArgs),
    /// Render CDF plots from a CSV file.
    Plot(PlotArgs),
    /// Write a random linear model and image set.
    Synth(SynthArgs),
    /// Serve a model over the line protocol on stdin/stdout.
    Serve {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args)]
struct Tuning {
    /// Attack name, or a comma-separated list for `bench`.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    max_queries: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    strategy: Option<SamplingStrategy>,
    #[arg(long)]
    mask_top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Image set JSON.
    #[arg(long)]
    images: PathBuf,
    /// Defaults to the first image of the set.
    #[arg(long)]
    image_id: Option<String>,
    #[arg(long)]
    target: usize,
    #[command(flatten)]
    tuning: Tuning,
    /// Also write the result JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    tuning: Tuning,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CdfArgs {
    #[arg(long)]
    records: PathBuf,
    /// Last point of the query grid; defaults to the largest query count.
    #[arg(long)]
    max_queries: Option<u64>,
    #[arg(long, default_value_t = 100)]
    points: u64,
    /// Directory that receives `cdf.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    cdf: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_epsilons(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad epsilon {t:?}: {e}")))
        })
        .collect()
}

fn parse_protocol(s: &str) -> Result<TargetProtocol> {
    match s {
        "all-other-classes" => Ok(TargetProtocol::AllOtherClasses),
        "random-class" => Ok(TargetProtocol::RandomClass),
        other => Err(Error::Config(format!(
            "unknown protocol {other:?}; expected all-other-classes or random-class"
        ))),
    }
}

/// Applies the attack-level flags, keeping configured settings for attacks
/// that are already present.
fn tune_attacks(attacks: &mut Vec<AttackConfig>, t: &Tuning) -> Result<()> {
    if let Some(names) = &t.attack {
        let mut chosen = Vec::new();
        for name in names.split(',').map(str::trim) {
            let fresh: AttackConfig = name.parse()?;
            let kept = attacks.iter().find(|a| a.name() == fresh.name()).cloned();
            chosen.push(kept.unwrap_or(fresh));
        }
        *attacks = chosen;
    }
    for a in attacks.iter_mut() {
        if let AttackConfig::Bobyqa(b) = a {
            if let Some(v) = t.batch_size {
                b.batch_size = v;
            }
            if let Some(v) = t.kappa {
                b.kappa = v;
            }
            if let Some(v) = t.strategy {
                b.strategy = v;
            }
            b.validate()?;
        }
    }
    Ok(())
}

fn attack(args: AttackArgs) -> Result<()> {
    let t = &args.tuning;
    let model = load_model(&args.model)?;
    let set = ImageSet::load(&args.images)?;
    let images = set.tensors()?;
    let (id, image) = match &args.image_id {
        Some(id) => images
            .iter()
            .find(|(i, _)| i == id)
            .ok_or_else(|| Error::Config(format!("no image with id {id:?}")))?,
        None => images.first().ok_or_else(|| Error::Config("image set is empty".into()))?,
    };
    let eps = match &t.eps {
        Some(s) => match parse_epsilons(s)?.as_slice() {
            [e] => *e,
            _ => return Err(Error::Config("`attack` takes a single epsilon".into())),
        },
        None => return Err(Error::Config("--eps is required".into())),
    };
    let mut attacks = vec![AttackConfig::Bobyqa(Default::default())];
    tune_attacks(&mut attacks, t)?;
    let [config] = attacks.as_slice() else {
        return Err(Error::Config("`attack` runs a single attack".into()));
    };

    let original = argmax(&model.logits(image.data())?);
    let mut problem = AttackProblem::new(image.clone(), args.target, eps, t.max_queries.unwrap_or(3000));
    problem.validate(model.num_classes())?;
    let counting = CountingOracle::new(&model);
    let mut oracle: Box<dyn QueryOracle + '_> = match t.mask_top_k {
        Some(k) => {
            let mask = variance_mask(image, k)?;
            problem = problem.with_support(mask.clone());
            Box::new(MaskedOracle::new(counting, image, &mask)?)
        }
        None => Box::new(counting),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.unwrap_or(0));
    let result = config.run(oracle.as_mut(), &problem, &mut rng).map_err(|e| e.error)?;
    let summary = serde_json::json!({
        "image_id": id,
        "attack": config.name(),
        "original_class": original,
        "target_class": args.target,
        "epsilon": eps,
        "success": result.success,
        "queries": result.queries,
        "final_loss": result.final_loss,
        "final_class": result.final_class,
        "stop": result.stop,
        "level_reached": result.level_reached,
        "perturbation": result.perturbation.values,
    });
    if let Some(path) = &args.out {
        let text = serde_json::to_string_pretty(&summary).expect("json value");
        std::fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    let mut short = summary;
    short.as_object_mut().expect("object").remove("perturbation");
    println!("{short}");
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let t = &args.tuning;
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig {
            attacks: vec![],
            model: ModelRef::File(args.model.clone().ok_or_else(|| Error::Config("--model or --config is required".into()))?),
            images: args.images.clone().ok_or_else(|| Error::Config("--images or --config is required".into()))?,
            epsilons: vec![],
            max_queries: 3000,
            protocol: TargetProtocol::AllOtherClasses,
            seed: 0,
            workers: 1,
            output: PathBuf::from("out"),
            mask_top_k: None,
            cdf_points: 100,
        },
    };
    if let Some(m) = &args.model {
        config.model = ModelRef::File(m.clone());
    }
    if let Some(i) = &args.images {
        config.images = i.clone();
    }
    if let Some(p) = &args.protocol {
        config.protocol = parse_protocol(p)?;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if let Some(o) = &args.out {
        config.output = o.clone();
    }
    if let Some(e) = &t.eps {
        config.epsilons = parse_epsilons(e)?;
    }
    if let Some(q) = t.max_queries {
        config.max_queries = q;
    }
    if let Some(k) = t.mask_top_k {
        config.mask_top_k = Some(k);
    }
    if let Some(s) = t.seed {
        config.seed = s;
    }
    if config.attacks.is_empty() && t.attack.is_none() {
        config.attacks.push(AttackConfig::Bobyqa(Default::default()));
    }
    tune_attacks(&mut config.attacks, t)?;

    let records = run_experiment(&config)?;
    if records.is_empty() {
        eprintln!("no attacks to run");
        return Ok(());
    }
    let cdfs = group_cdfs(&records, &config.query_grid())?;
    emit_outputs(&records, &cdfs, &config.output)?;
    for c in &cdfs {
        let n = records
            .iter()
            .filter(|r| r.attack == c.attack && r.epsilon.to_bits() == c.epsilon.to_bits())
            .count();
        let rate = c.fraction.last().copied().unwrap_or(0.0);
        println!("{:<13} eps={:<8} runs={n:<5} success={:.3}", c.attack, c.epsilon, rate);
    }
    println!("wrote {}", config.output.display());
    Ok(())
}

fn cdf(args: CdfArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let max = args
        .max_queries
        .or_else(|| records.iter().map(|r| r.queries).max())
        .unwrap_or(1)
        .max(1);
    let points = args.points.clamp(1, max);
    let mut grid: Vec<u64> = (1..=points).map(|k| (k * max).div_ceil(points)).collect();
    grid.dedup();
    let cdfs = group_cdfs(&records, &grid)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Config(format!("{}: {e}", args.out.display())))?;
    write_cdf_csv(args.out.join("cdf.csv"), &cdfs)?;
    println!("wrote {}", args.out.join("cdf.csv").display());
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let cdfs = read_cdf_csv(&args.cdf)?;
    for p in write_plots(&args.out, &cdfs)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let shape = Shape::new(args.height, args.width, args.channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = random_linear_model(shape, args.classes, &mut rng);
    let images = (0..args.images)
        .map(|k| ImageEntry {
            id: k.to_string(),
            data: random_image(shape, &mut rng).data().to_vec(),
        })
        .collect();
    let set = ImageSet {
        shape,
        lower: DEFAULT_LOWER,
        upper: DEFAULT_UPPER,
        images,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Config(format!("{}: {e}", args.out.display())))?;
    let model_path = args.out.join("model.txt");
    save_model(&Model::Linear(model), &model_path)?;
    set.save(args.out.join("images.json"))?;
    println!("wrote {} and {}", model_path.display(), args.out.join("images.json").display());
    Ok(())
}

fn serve(model: &Path) -> Result<()> {
    let model = load_model(model)?;
    serve_pipe(&model, io::stdin().lock(), BufWriter::new(io::stdout().lock()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Attack(a) => attack(a),
        Command::Bench(b) => bench(b),
        Command::Cdf(c) => cdf(c),
        Command::Plot(p) => plot(p),
        Command::Synth(s) => synth(s),
        Command::Serve { model } => serve(&model),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
