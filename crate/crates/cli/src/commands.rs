use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use xmrbench_core::bench::{self, BenchConfig, Corpus, OcclusionMode};
use xmrbench_core::data::{self, RasterFormat, Section};
use xmrbench_core::embed::{conformance, protocol, table, EmbedderSpec, Normalized};
use xmrbench_core::occlusion::{apply_occlusion, OcclusionSpec};
use xmrbench_core::report::{self, Provenance, ReportFormat};
use xmrbench_core::scoring::{ClassifierHead, ScoreMatrix, Scorer, ScorerKind};
use xmrbench_core::toymodel::{
    gen_synthetic_pairs, loss_settled, train, Objective, SyntheticPairSpec, ToyArch, ToyEncoderParams, TrainConfig,
};

use crate::args::{
    BaselineArgs, ConformanceArgs, InspectArgs, OccludeArgs, RunArgs, ServeArgs, SyntheticArgs, ToyGenArgs,
    ToyTrainArgs,
};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn occlude(args: &OccludeArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let format = RasterFormat::detect(&bytes)
        .ok_or_else(|| data::DataError::Decode(format!("{}: not a PNG or JPEG", args.input.display())))?;
    let image = data::decode_image(&bytes)?;
    let spec =
        OcclusionSpec::with_fill(args.ratio, args.seed.seed, args.fill).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = apply_occlusion(&image, &spec);
    let encoded = data::encode_image(&out, format)?;
    std::fs::write(&args.out, encoded).map_err(|e| CliError::io(&args.out, e))?;
    log::info!(
        "occluded {}x{} image at p={} seed={} -> {}",
        image.width(),
        image.height(),
        args.ratio,
        args.seed.seed,
        args.out.display()
    );
    Ok(())
}

fn synthetic_spec(data: &SyntheticArgs, seed: u64) -> SyntheticPairSpec {
    SyntheticPairSpec {
        n_studies: data.studies,
        latent_dim: data.latent_dim,
        image_side: data.image_side,
        vocab_size: data.vocab,
        noise_sigma: data.noise,
        seed,
    }
}

pub fn toy_gen(args: &ToyGenArgs) -> Result<()> {
    let ds = gen_synthetic_pairs(&synthetic_spec(&args.data, args.seed.seed))?;
    let manifest = ds.write_to_dir(&args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn toy_train(args: &ToyTrainArgs) -> Result<()> {
    let objective = Objective::from(args.objective);
    let spec = synthetic_spec(&args.data, args.seed.seed);
    // Evaluation sets generated with the same seed never overlap the training draw.
    let ds = gen_synthetic_pairs(&spec.training_split())?;
    let head_hidden = args
        .head_hidden
        .unwrap_or(if objective == Objective::Bce { 32 } else { 0 });
    if objective == Objective::Bce && head_hidden == 0 {
        return Err(CliError::Usage("the bce objective needs --head-hidden > 0".into()));
    }
    let arch = ToyArch {
        image_side: args.data.image_side,
        vocab_size: args.data.vocab,
        token_dim: args.token_dim,
        embed_dim: args.embed_dim,
        temperature: args.temperature,
        head_hidden,
    };
    let defaults = TrainConfig::for_objective(objective);
    let cfg = TrainConfig {
        objective,
        epochs: args.epochs,
        lr: args.lr.unwrap_or(defaults.lr),
        batch_size: args.batch,
        seed: args.seed.seed,
        margin: args.margin,
    };
    let params = ToyEncoderParams::init(&arch, args.seed.seed)?;
    let started = std::time::Instant::now();
    let outcome = train(params, &ds.training_set(), &cfg)?;
    let trace = &outcome.loss_trace;
    for (epoch, loss) in trace.iter().enumerate() {
        log::debug!("epoch {epoch}: loss {loss:.6}");
    }
    if !loss_settled(trace, 10) {
        log::warn!("loss still moving after {} epochs", cfg.epochs);
    }
    outcome.params.save(&args.out)?;
    println!(
        "objective={objective} epochs={} lr={} first_loss={:.6} final_loss={:.6} elapsed={:.2?} out={}",
        cfg.epochs,
        cfg.lr,
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        started.elapsed(),
        args.out.display()
    );
    Ok(())
}

/// The resolved run configuration, echoed into the report. Thread count is
/// left out because it cannot change the numbers.
#[derive(Debug, Serialize)]
struct RunConfig<'a> {
    manifest: &'a Path,
    embedder: String,
    normalize: bool,
    head: Option<&'a Path>,
    filter: bool,
    #[serde(flatten)]
    bench: &'a BenchConfig,
    output: &'a Path,
    format: ReportFormat,
    verbosity: i8,
}

fn embedder_spec(args: &RunArgs) -> Result<EmbedderSpec> {
    match (&args.embedder, &args.toy_params) {
        (Some(s), None) => Ok(s.parse()?),
        (None, Some(p)) => Ok(EmbedderSpec::BuiltinToy { params: p.clone() }),
        _ => Err(CliError::Usage(
            "give exactly one of --embedder and --toy-params".into(),
        )),
    }
}

fn classifier_head(args: &RunArgs, spec: &EmbedderSpec) -> Result<ClassifierHead> {
    let source = match (&args.head, spec) {
        (Some(p), _) => p.clone(),
        (None, EmbedderSpec::BuiltinToy { params }) => params.clone(),
        (None, _) => return Err(CliError::Usage("--scorer classifier needs --head <params>".into())),
    };
    ToyEncoderParams::load(&source)?
        .head
        .ok_or_else(|| CliError::Usage(format!("{} has no classifier head", source.display())))
}

pub fn run(args: &RunArgs, verbosity: i8) -> Result<()> {
    let config = BenchConfig {
        ratios: args.ratios.clone(),
        k_values: args.k.clone(),
        seed: args.seed.seed,
        trials_per_image: args.trials,
        scorer: args.scorer.into(),
        mode: OcclusionMode::from(args.mode),
        fill_value: args.fill,
        text_sections: args.sections.iter().map(|&s| Section::from(s)).collect(),
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let format = match args.format {
        Some(f) => ReportFormat::from(f),
        None => ReportFormat::from_path(&args.out)?,
    };
    let spec = embedder_spec(args)?;
    let scorer = match config.scorer {
        ScorerKind::Cosine => Scorer::Cosine,
        ScorerKind::Classifier => Scorer::Classifier(classifier_head(args, &spec)?),
    };

    let manifest = data::load_manifest(&args.manifest)?;
    let manifest = if args.no_filter {
        manifest
    } else {
        let kept = data::filter_studies(&manifest);
        log::info!("kept {} of {} studies", kept.studies().len(), manifest.studies().len());
        kept
    };
    let base_dir = args.manifest.parent().unwrap_or(Path::new("."));
    let corpus = Corpus::from_manifest(&manifest, base_dir)?;
    log::info!(
        "{} query images, {} candidate reports",
        corpus.n_queries(),
        corpus.n_reports()
    );

    let mut embedder = spec.build(&corpus.study_ids, Duration::from_secs(args.timeout))?;
    if args.normalize {
        embedder = Box::new(Normalized(embedder));
    }
    let grid = match &args.dump_scores {
        None => bench::sweep(&corpus, embedder.as_ref(), &scorer, &config)?,
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            let mut sink = |ratio: f64, trial: usize, m: &ScoreMatrix| -> std::io::Result<()> {
                let path = dir.join(format!("scores_p{ratio:.2}_t{trial}.csv"));
                m.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
            };
            bench::sweep_with_dump(&corpus, embedder.as_ref(), &scorer, &config, Some(&mut sink))?
        }
    };
    drop(embedder);

    let run_config = RunConfig {
        manifest: &args.manifest,
        embedder: spec.to_string(),
        normalize: args.normalize,
        head: args.head.as_deref(),
        filter: !args.no_filter,
        bench: &config,
        output: &args.out,
        format,
        verbosity,
    };
    let provenance = Provenance::new(serde_json::to_value(&run_config).expect("config serialises"));
    report::emit_report(&grid, &provenance, format, &args.out)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

pub fn random_baseline(args: &BaselineArgs) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let mc = if args.mc {
        let queries = args.queries.unwrap_or(args.n);
        Some(bench::random_baseline_monte_carlo_grid(
            args.n,
            &args.k,
            queries,
            args.trials,
            args.seed.seed,
        )?)
    } else {
        None
    };
    let io = |e| CliError::io("<stdout>", e);
    match &mc {
        Some(_) => writeln!(out, "k,analytic,mc_mean,mc_stderr").map_err(io)?,
        None => writeln!(out, "k,analytic").map_err(io)?,
    }
    for (i, &k) in args.k.iter().enumerate() {
        let analytic = bench::random_baseline_analytic(args.n, k);
        match &mc {
            Some(est) => writeln!(out, "{k},{analytic:.4},{:.4},{:.4}", est[i].mean, est[i].stderr).map_err(io)?,
            None => writeln!(out, "{k},{analytic:.4}").map_err(io)?,
        }
    }
    Ok(())
}

pub fn inspect_embeddings(args: &InspectArgs) -> Result<()> {
    let t = table::load_embeddings(&args.path)?;
    let norms: Vec<f64> = t
        .entries()
        .iter()
        .map(|e| e.values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
        .collect();
    println!("path: {}", args.path.display());
    println!("entries: {}", t.len());
    println!("dim: {}", t.dim());
    if !norms.is_empty() {
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        println!("norm: min {min:.4} mean {mean:.4} max {max:.4}");
    }
    for e in t.entries().iter().take(args.head) {
        println!("  {}", e.id);
    }
    Ok(())
}

pub fn serve_embedder(args: &ServeArgs) -> Result<()> {
    let spec: EmbedderSpec = args.embedder.parse()?;
    let study_ids = match (&spec, &args.manifest) {
        (_, Some(m)) => data::load_manifest(m)?
            .studies()
            .iter()
            .map(|s| s.study_id.clone())
            .collect(),
        (EmbedderSpec::BuiltinOracle, None) => {
            return Err(CliError::Usage("the oracle embedder needs --manifest".into()));
        }
        _ => Vec::new(),
    };
    let embedder = spec.build(&study_ids, Duration::from_secs(60))?;
    log::info!("serving {} (dim {})", embedder.name(), embedder.dim());
    let end = protocol::serve(embedder.as_ref(), std::io::stdin().lock(), std::io::stdout().lock())
        .map_err(|e| CliError::io("<stdio>", e))?;
    log::info!("session ended: {end:?}");
    Ok(())
}

pub fn conformance(args: &ConformanceArgs) -> Result<()> {
    let report = conformance::check_command(&args.command, Duration::from_secs(args.timeout))
        .map_err(|e| CliError::io(PathBuf::from(&args.command[0]), e))?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Conformance(failed, report.checks.len()))
    }
}
