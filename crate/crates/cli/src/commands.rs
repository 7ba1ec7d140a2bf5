use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ctxspeech_core::attention::{
    default_positions, kernel_attention_oracle, linearized_attention, linearized_rpe_attention, rpe_attention_oracle,
};
use ctxspeech_core::bench::{run_bench, BenchSpec};
use ctxspeech_core::context::{
    featurize as featurize_doc, tokenize, CorpusStats, EmbeddingProvider, HashEmbeddingProvider,
    StoredEmbeddingProvider, StubLexicon,
};
use ctxspeech_core::pipeline::{Model, ModelConfig};
use ctxspeech_core::{Kernel, NamedTensors, RpeConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{BenchArgs, EquivArgs, FeaturizeArgs, ForwardArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable files, invalid configuration or a failing stage.
    Input(String),
    /// A numerical check did not hold.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Check(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<ctxspeech_core::Error> for CliError {
    fn from(e: ctxspeech_core::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> Result<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| CliError::Input(format!("reading stdin: {e}")))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("reading {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("parsing {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Input(format!("writing {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))
}

pub fn featurize(args: FeaturizeArgs) -> Result<()> {
    let text = read_text(&args.text)?;
    let doc = tokenize(&text, args.language, &StubLexicon::new())?;
    let stats = match &args.stats {
        Some(path) => read_json::<CorpusStats>(path)?,
        None => CorpusStats::from_documents([&doc]),
    };
    let json = to_json(&featurize_doc(&doc, &stats)?)?;
    match &args.out {
        Some(path) => write_file(path, json.as_bytes()),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

pub fn forward(args: ForwardArgs, seed: Option<u64>) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => read_json::<ModelConfig>(path)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(v) = args.variant {
        config.variant = v;
    }
    config.use_memory &= !args.no_memory;
    config.use_context_encoder &= !args.no_context;

    let provider: Box<dyn EmbeddingProvider> = match &args.embeddings {
        Some(path) => Box::new(StoredEmbeddingProvider::load(path)?),
        None => Box::new(HashEmbeddingProvider::with_dim(config.embedding_seed, config.embedding_dim)),
    };
    let text = read_text(&args.text)?;
    let model = Model::build(config)?;
    let result = model.synthesize_text(&text, provider.as_ref())?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::Input(format!("creating {}: {e}", args.out.display())))?;
    let mut mel = NamedTensors::new();
    mel.insert("mel", result.mel.clone());
    mel.save(args.out.join("mel.ctxt"))?;
    let summary = to_json(&result.summary())?;
    write_file(&args.out.join("summary.json"), summary.as_bytes())?;
    println!("{summary}");
    Ok(())
}

pub fn bench(args: BenchArgs, seed: u64) -> Result<()> {
    let spec = BenchSpec {
        lengths: args.lengths,
        variants: args.variants,
        head_dim: args.head_dim,
        heads: args.heads,
        repetitions: args.reps,
        warmup: args.warmup,
        seed,
        memory_cap_bytes: args.memory_cap_mb.map(|mb| mb.saturating_mul(1 << 20)),
        threads: args.threads,
    };
    let report = run_bench(&spec)?;

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let w = |e: io::Error| CliError::Input(e.to_string());
    writeln!(out, "mode: {}", report.mode).map_err(w)?;
    writeln!(out, "{:<15} {:>7} {:>12} {:>14} {:>14}", "variant", "length", "median_ms", "ms/element", "peak_bytes").map_err(w)?;
    for p in &report.points {
        let cell = |v: Option<f64>, prec: usize| v.map_or_else(|| "oom".to_string(), |x| format!("{x:.prec$}"));
        writeln!(
            out,
            "{:<15} {:>7} {:>12} {:>14} {:>14}",
            p.variant.name(),
            p.length,
            cell(p.median_ms, 3),
            cell(p.ms_per_element, 6),
            p.peak_bytes_est
        )
        .map_err(w)?;
    }
    for s in &report.slopes {
        let slope = s.slope.map_or_else(|| format!("n/a ({} points)", s.points), |x| format!("{x:.3}"));
        writeln!(out, "slope {}: {slope}", s.variant.name()).map_err(w)?;
    }
    if let Some(path) = &args.csv {
        let file = fs::File::create(path).map_err(|e| CliError::Input(format!("creating {}: {e}", path.display())))?;
        report.write_csv(file)?;
    }
    if let Some(path) = &args.json {
        write_file(path, to_json(&report)?.as_bytes())?;
    }
    Ok(())
}

pub fn equivcheck(args: EquivArgs, seed: u64) -> Result<()> {
    if args.trials == 0 || args.max_len == 0 || args.max_dim == 0 || !(args.tol > 0.0) {
        return Err(CliError::Input("trials, max-len, max-dim and tol must be positive".into()));
    }
    let mut worst_lin = 0.0f64;
    let mut worst_rpe = 0.0f64;
    for trial in 0..args.trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let lq = rng.random_range(1..=args.max_len);
        let lk = rng.random_range(1..=args.max_len);
        let d = rng.random_range(1..=args.max_dim);
        let dv = rng.random_range(1..=args.max_dim);
        let q = Tensor::randn(&[lq, d], &mut rng);
        let k = Tensor::randn(&[lk, d], &mut rng);
        let v = Tensor::randn(&[lk, dv], &mut rng);

        let lin = linearized_attention(&q, &k, &v, Kernel::EluPlusOne)?;
        let oracle = kernel_attention_oracle(&q, &k, &v, Kernel::EluPlusOne)?;
        let rel = lin.max_rel_diff(&oracle)?;

        let rpe = RpeConfig::random(d, trial_seed, 1.0, args.max_len)?;
        let (qp, kp) = (default_positions(lq), default_positions(lk));
        let fast = linearized_rpe_attention(&q, &k, &v, Kernel::EluPlusOne, &rpe, &qp, &kp)?;
        let slow = rpe_attention_oracle(&q, &k, &v, Kernel::EluPlusOne, &rpe, &qp, &kp)?;
        let rel_rpe = fast.max_rel_diff(&slow)?;

        worst_lin = worst_lin.max(rel);
        worst_rpe = worst_rpe.max(rel_rpe);
        if !(rel < args.tol) || !(rel_rpe < args.tol) {
            return Err(CliError::Check(format!(
                "trial {trial} (seed {trial_seed}, Lq={lq}, Lk={lk}, d={d}, dv={dv}): relative error {rel:e} linearized, {rel_rpe:e} with RPE, tolerance {:e}",
                args.tol
            )));
        }
    }
    println!("trials: {}", args.trials);
    println!("max relative diff (linearized): {worst_lin:e}");
    println!("max relative diff (linearized-rpe): {worst_rpe:e}");
    println!("tolerance: {:e}", args.tol);
    Ok(())
}
