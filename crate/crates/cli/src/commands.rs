use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::skt::{SktError, Tensor};
use s3kit::hardware::{compression_quote, CompressionPattern};
use s3kit::hessian::{damp_and_invert, CalibrationSet};
use s3kit::layout::ElementSet;
use s3kit::oracle::{exact_compensated_loss, mask_loss};
use s3kit::prune::{prune, prune_scope_obs, row_block_saliency, Method, OrderMode, PruneConfig, PruneReport};
use s3kit::spec::{make_pattern, Pattern, PatternDims, PatternName, SpecDocument};

#[derive(Debug, Parser)]
#[command(name = "s3kit", version, about = "Structured sparsity specs and second-order pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a spec document; violations go to stderr, one per line.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Print a catalog pattern as a spec document, e.g. `pattern two_four M=4 K=8`.
    Pattern {
        name: String,
        /// Dimensions as KEY=VALUE.
        dims: Vec<String>,
    },
    /// Prune a weight matrix against calibration inputs.
    Prune(PruneArgs),
    /// Compression ratio of a 2:4 storage format (standard_24 or coupled_24).
    Quote { pattern: String, bits: u32 },
    /// Cross-check pruning internals against brute-force references.
    #[command(hide = true)]
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// M x K weight matrix (SKT).
    #[arg(long)]
    pub weights: PathBuf,
    /// N x K calibration inputs (SKT).
    #[arg(long)]
    pub calib: PathBuf,
    /// s-obd, s-obs, wanda or sparsegpt.
    #[arg(long, default_value = "s-obs")]
    pub method: Method,
    /// static or greedy (s-obs only).
    #[arg(long, default_value = "greedy")]
    pub order: OrderMode,
    #[arg(long, default_value_t = s3kit::hessian::DEFAULT_LAMBDA_REL)]
    pub lambda_rel: f64,
    /// Blocks kept per scope; defaults to the spec's keep.
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long)]
    pub out_weights: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
    #[arg(long)]
    pub out_report: PathBuf,
    /// Recorded in the report; pruning itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 or unset uses all cores.
    #[arg(long, env = "S3KIT_THREADS")]
    pub threads: Option<usize>,
}

/// A failure with its exit code: 1 for domain errors, 2 for I/O and parsing.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: Option<String>,
}

impl CliError {
    fn domain(message: impl fmt::Display) -> Self {
        CliError {
            code: 1,
            message: Some(message.to_string()),
        }
    }

    fn io(message: impl fmt::Display) -> Self {
        CliError {
            code: 2,
            message: Some(message.to_string()),
        }
    }
}

impl From<SktError> for CliError {
    fn from(e: SktError) -> Self {
        CliError::io(e)
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(m) = e.message {
                eprintln!("error: {m}");
            }
            ExitCode::from(e.code)
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { spec } => validate(&spec),
        Command::Pattern { name, dims } => pattern(&name, &dims),
        Command::Prune(args) => prune_cmd(&args),
        Command::Quote { pattern, bits } => quote(&pattern, bits),
        Command::Verify { seed, trials } => verify(seed, trials),
    }
}

fn read_document(path: &Path) -> Result<SpecDocument, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn validate(path: &Path) -> Result<(), CliError> {
    let doc = read_document(path)?;
    let mut problems = Vec::new();
    match doc.into_pattern() {
        Pattern::Single(spec) => problems.extend(spec.validate().into_iter().map(|v| v.message)),
        Pattern::Coupled(coupling) => {
            for m in &coupling.members {
                problems.extend(m.spec.validate().into_iter().map(|v| format!("{}: {}", m.tensor, v.message)));
            }
            if problems.is_empty() {
                if let Err(e) = coupling.compile() {
                    problems.push(e.to_string());
                }
            }
        }
    }
    if problems.is_empty() {
        println!("ok");
        return Ok(());
    }
    for p in &problems {
        eprintln!("{p}");
    }
    Err(CliError {
        code: 1,
        message: None,
    })
}

fn parse_dims(args: &[String]) -> Result<PatternDims, CliError> {
    let mut dims = PatternDims::new();
    for arg in args {
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| CliError::io(format!("expected KEY=VALUE, got '{arg}'")))?;
        let value: usize = value
            .parse()
            .map_err(|_| CliError::io(format!("'{value}' is not a non-negative integer (in '{arg}')")))?;
        dims.insert(key, value);
    }
    Ok(dims)
}

fn pattern(name: &str, dims: &[String]) -> Result<(), CliError> {
    let name: PatternName = name.parse().map_err(CliError::domain)?;
    let dims = parse_dims(dims)?;
    let pattern = make_pattern(name, &dims).map_err(CliError::domain)?;
    println!("{}", pattern.to_json());
    Ok(())
}

fn quote(pattern: &str, bits: u32) -> Result<(), CliError> {
    let pattern: CompressionPattern = pattern.parse().map_err(CliError::domain)?;
    let q = compression_quote(pattern, bits).map_err(CliError::domain)?;
    println!("{}", serde_json::to_string(&q).expect("quote serializes"));
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a PruneReport,
    seed: u64,
}

fn matrix(t: &Tensor, what: &str) -> Result<DMatrix<f64>, CliError> {
    match t.shape() {
        &[r, c] => Ok(DMatrix::from_row_slice(r, c, &t.to_f64())),
        other => Err(CliError::domain(format!("{what} must be 2-D, got shape {other:?}"))),
    }
}

/// Removes outputs written so far when a later step fails.
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        self.0.push(path.to_path_buf());
        fs::write(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }

    fn discard(self) {
        for p in self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn prune_cmd(args: &PruneArgs) -> Result<(), CliError> {
    let spec = match read_document(&args.spec)?.into_pattern() {
        Pattern::Single(s) => s,
        Pattern::Coupled(_) => {
            return Err(CliError::domain("prune takes a single-tensor spec, not a coupling"));
        }
    };
    let weights_file = Tensor::read(&args.weights)?;
    let calib_file = Tensor::read(&args.calib)?;
    let w = matrix(&weights_file, "weights")?;
    let x = matrix(&calib_file, "calibration inputs")?;
    if x.ncols() != w.ncols() {
        return Err(CliError::domain(format!(
            "weights are {}x{} but calibration inputs have {} features",
            w.nrows(),
            w.ncols(),
            x.ncols()
        )));
    }
    let compiled = spec.compile().map_err(CliError::domain)?;
    let calib = CalibrationSet::new(x).map_err(CliError::domain)?;
    let config = PruneConfig {
        method: args.method,
        order_mode: args.order,
        lambda_rel: args.lambda_rel,
        keep: args.keep,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::io(format!("thread pool: {e}")))?;
    let outcome = pool
        .install(|| prune(&compiled, &w, &calib, &config))
        .map_err(CliError::domain)?;

    let (m, k) = w.shape();
    let values: Vec<f64> = (0..m).flat_map(|r| (0..k).map(move |c| (r, c))).map(|(r, c)| outcome.weights[(r, c)]).collect();
    let out_w = Tensor::with_values(vec![m, k], &values, weights_file.dtype())?;
    let retained = compiled.element_retention(&outcome.mask);
    let out_mask = Tensor::from_f32(vec![m, k], retained.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect())?;
    let mut report = serde_json::to_string_pretty(&ReportFile {
        report: &outcome.report,
        seed: args.seed,
    })
    .expect("report serializes");
    report.push('\n');

    let mut outputs = Outputs(Vec::new());
    let written = outputs
        .write(&args.out_weights, &out_w.to_bytes())
        .and_then(|_| outputs.write(&args.out_mask, &out_mask.to_bytes()))
        .and_then(|_| outputs.write(&args.out_report, report.as_bytes()));
    if let Err(e) = written {
        outputs.discard();
        return Err(e);
    }
    Ok(())
}

fn random_spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let n = k + 4;
    let z = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
    let mix = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } + 0.6 * rng.gen_range(-1.0..1.0));
    let x = z * mix;
    let h = x.tr_mul(&x) / n as f64;
    (h.clone() + h.transpose()) * 0.5
}

fn verify(seed: u64, trials: usize) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut schur, mut saliency, mut joint) = (0.0f64, 0.0f64, 0.0f64);
    let spec = make_pattern(PatternName::TwoFour, &PatternDims::mk(1, 16))
        .expect("catalog pattern")
        .single()
        .expect("single spec")
        .compile()
        .expect("valid spec");
    for _ in 0..trials {
        let k = rng.gen_range(4..=32);
        let h = random_spd(&mut rng, k);
        let mut state = damp_and_invert(&h, 0.01).map_err(CliError::domain)?;
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cols = vec![rng.gen_range(0..k)];
        let s = row_block_saliency(&w, &state, &cols).map_err(CliError::domain)?;
        let (loss, _) = exact_compensated_loss(&w, &state.damped(), &ElementSet::from_indices(cols.clone()))
            .map_err(CliError::domain)?;
        saliency = saliency.max((s - loss).abs() / loss.abs().max(1e-300));

        state.schur_prune(&cols).map_err(CliError::domain)?;
        let alive = state.surviving_indices();
        let direct = state
            .damped()
            .select_rows(&alive)
            .select_columns(&alive)
            .try_inverse()
            .ok_or_else(|| CliError::domain("survivor block is singular"))?;
        let kept = state.h_inv().select_rows(&alive).select_columns(&alive);
        schur = schur.max((kept - &direct).amax() / direct.amax());

        let h16 = random_spd(&mut rng, 16);
        let st16 = damp_and_invert(&h16, 0.01).map_err(CliError::domain)?;
        let w16 = DMatrix::from_fn(1, 16, |_, _| rng.gen_range(-1.0..1.0));
        let out = prune_scope_obs(&spec, &w16, &st16, OrderMode::Greedy).map_err(CliError::domain)?;
        let exact = mask_loss(&spec, &w16, &st16.damped(), &out.mask).map_err(CliError::domain)?;
        joint = joint.max((out.report.predicted_loss_increase - exact).abs() / exact.abs().max(1e-300));
    }
    let checks = [
        ("schur_consistency", schur, 1e-8),
        ("saliency_exactness", saliency, 1e-9),
        ("joint_optimality", joint, 1e-8),
    ];
    let mut ok = true;
    for (name, err, tol) in checks {
        let pass = err <= tol;
        ok &= pass;
        println!("{name}: max_rel_err={err:.3e} tol={tol:e} {}", if pass { "PASS" } else { "FAIL" });
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::domain("verification failed"))
    }
}
