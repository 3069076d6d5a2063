use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use cggm::clusterpath::{compute_path, dendrogram, refit, refit_settings, scaled_config, PathSettings};
use cggm::io::{self, save_matrix_csv, save_model, save_triplets, write_json};
use cggm::modelsel::{fitting_input, sample_covariance, select, standardize, CvPlan, CvSettings};
use cggm::optimizer::{default_init, fit, FusionThreshold, SolverSettings};
use cggm::penalty::build_weights;
use cggm::simbench::{self, Design, DesignSpec, StudyConfig};
use cggm::{CggmError, Penalty, Target, Weights};

#[derive(Parser)]
#[command(name = "cggm", version, about = "Clusterpath Gaussian graphical models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit at fixed tuning parameters.
    Fit(FitArgs),
    /// Compute the clusterpath and its dendrogram.
    Path(PathArgs),
    /// Select tuning parameters by cross-validation.
    Cv(CvArgs),
    /// Refit a model under its clustering and sparsity pattern.
    Refit(RefitArgs),
    /// Draw data from a simulation design, or run a replicated study.
    Simulate(SimulateArgs),
    /// Compare a fitted model with a simulated truth.
    Evaluate(EvaluateArgs),
    /// Write the aggregation and sparsity weights.
    Weights(WeightsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Precision,
    Covariance,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Precision => Target::Precision,
            TargetArg::Covariance => Target::Covariance,
        }
    }
}

#[derive(Args)]
struct Input {
    /// Observations as CSV (rows are observations, optional header of names).
    #[arg(long, conflicts_with = "covariance", required_unless_present = "covariance")]
    data: Option<PathBuf>,
    /// Precomputed covariance matrix as CSV.
    #[arg(long, requires = "nobs")]
    covariance: Option<PathBuf>,
    /// Number of observations behind `--covariance`.
    #[arg(long)]
    nobs: Option<usize>,
    /// Z-score the variables (correlation matrix for `--covariance`).
    #[arg(long)]
    standardize: bool,
    #[arg(long, value_enum, default_value = "precision")]
    target: TargetArg,
}

#[derive(Args)]
struct Penalties {
    /// Nearest neighbours per variable in the weight graph.
    #[arg(long, default_value_t = 5)]
    knn: usize,
    /// Decay of the weights with distance.
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    /// Aggregation weights as row,col,value triplets instead of the k-NN rule.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda_s: f64,
    /// Smoothing width of the absolute value.
    #[arg(long, default_value_t = Penalty::DEFAULT_EPS_ABS)]
    eps_abs: f64,
}

#[derive(Args)]
struct Solver {
    #[arg(long, default_value_t = 1e-7)]
    eps_conv: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// Fixed fusion threshold; by default a fraction of the median distance.
    #[arg(long)]
    eps_fusion: Option<f64>,
    /// Fraction of the median distance used as fusion threshold.
    #[arg(long, default_value_t = 1e-3)]
    tau: f64,
}

impl Solver {
    fn settings(&self) -> SolverSettings<f64> {
        let fusion = match self.eps_fusion {
            Some(v) => FusionThreshold::Fixed(v),
            None => FusionThreshold::DataDriven { tau: self.tau },
        };
        SolverSettings { fusion, eps_conv: self.eps_conv, max_iter: self.max_iter, ..SolverSettings::default() }
    }
}

#[derive(Args)]
struct Output {
    /// Directory for the output files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    penalties: Penalties,
    #[command(flatten)]
    solver: Solver,
    #[command(flatten)]
    output: Output,
    /// Aggregation parameter on the rescaled path scale.
    #[arg(long, default_value_t = 0.0)]
    lambda_c: f64,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    penalties: Penalties,
    #[command(flatten)]
    solver: Solver,
    #[command(flatten)]
    output: Output,
    #[arg(long, default_value_t = 0.01)]
    refine_tol: f64,
}

#[derive(Args)]
struct CvArgs {
    /// Observations as CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    standardize: bool,
    #[arg(long, value_enum, default_value = "precision")]
    target: TargetArg,
    #[command(flatten)]
    grid: Grid,
    #[command(flatten)]
    solver: Solver,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct Grid {
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Neighbour counts, comma separated (default 1,3,5).
    #[arg(long, value_delimiter = ',')]
    knn: Option<Vec<usize>>,
    /// Weight decays, comma separated (default 1, or 1,2,3 for the covariance target).
    #[arg(long, value_delimiter = ',')]
    phi: Option<Vec<f64>>,
    /// Sparsity values, comma separated (default: data-driven grid).
    #[arg(long, value_delimiter = ',')]
    lambda_s: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Grid {
    fn plan(&self, target: Target) -> CvPlan {
        let base = CvPlan::for_target(target);
        CvPlan {
            folds: self.folds,
            knn: self.knn.clone().unwrap_or(base.knn),
            phi: self.phi.clone().unwrap_or(base.phi),
            lambda_s: self.lambda_s.clone(),
            target,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct RefitArgs {
    #[command(flatten)]
    input: Input,
    /// Model JSON to refit.
    #[arg(long)]
    model: PathBuf,
    /// Entries of R below this magnitude are held at zero.
    #[arg(long, default_value_t = Penalty::DEFAULT_EPS_ABS)]
    zero_eps: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SimulateArgs {
    /// Design name, a comma-separated list, or `all`.
    #[arg(long, default_value = "chain")]
    design: String,
    #[arg(long, default_value_t = 15)]
    p: usize,
    #[arg(long, default_value_t = 120)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    edge_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Approximate within- and between-cluster values.
    #[arg(long)]
    approx: bool,
    #[arg(long, value_enum, default_value = "precision")]
    target: TargetArg,
    /// Run this many replications of the estimation study instead of writing one sample.
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Truth JSON written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = Penalty::DEFAULT_EPS_ABS)]
    zero_eps: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long, default_value_t = 5)]
    knn: usize,
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    #[command(flatten)]
    output: Output,
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<CggmError> for Failure {
    fn from(e: CggmError) -> Self {
        let (code, kind) = if e.is_numerical() { (3, "numerical") } else { (2, "input") };
        Failure { code, kind, message: e.to_string() }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: 2, kind: "input", message: message.into() }
}

/// Variable names and the matrix the model is fitted to.
struct Prepared {
    names: Option<Vec<String>>,
    input: DMatrix<f64>,
    target: Target,
}

fn prepare(args: &Input) -> Outcome<Prepared> {
    let target = Target::from(args.target);
    let (s, names) = match (&args.data, &args.covariance) {
        (Some(path), _) => {
            let table = io::read_matrix_csv(path)?;
            let x = if args.standardize { standardize(&table.values)? } else { table.values };
            (sample_covariance(&x)?, table.names)
        }
        (None, Some(path)) => {
            let table = io::read_matrix_csv(path)?;
            let s = table.values;
            if s.nrows() != s.ncols() {
                return Err(input_error(format!("covariance matrix is {}x{}", s.nrows(), s.ncols())));
            }
            if (&s - s.transpose()).amax() > 1e-10 * s.amax().max(1.0) {
                return Err(input_error("covariance matrix is not symmetric"));
            }
            if args.nobs.is_some_and(|n| n < 2) {
                return Err(input_error("--nobs must be at least 2"));
            }
            let s = if args.standardize { correlation(&s)? } else { s };
            (s, table.names)
        }
        (None, None) => return Err(input_error("either --data or --covariance is required")),
    };
    let input = fitting_input(&s, target)?;
    Ok(Prepared { names, input, target })
}

fn correlation(s: &DMatrix<f64>) -> Outcome<DMatrix<f64>> {
    let d: Vec<f64> = s.diagonal().iter().map(|v| v.sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(input_error("covariance matrix has a nonpositive variance"));
    }
    Ok(DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] / (d[i] * d[j])))
}

fn base_config(prep: &Prepared, pen: &Penalties) -> Outcome<Penalty> {
    let p = prep.input.nrows();
    let w: Weights = match &pen.weights {
        Some(path) => io::read_triplets(path, p)?,
        None => build_weights(&prep.input, pen.knn, pen.phi)?,
    };
    let mut cfg = Penalty::new(w).with_lambdas(0.0, pen.lambda_s);
    cfg.knn = pen.knn;
    cfg.phi = pen.phi;
    cfg.eps_abs = pen.eps_abs;
    cfg.validate(p)?;
    Ok(cfg)
}

fn out_dir(output: &Output) -> Outcome<&Path> {
    std::fs::create_dir_all(&output.out).map_err(CggmError::from)?;
    Ok(&output.out)
}

#[derive(Serialize)]
struct FitSummary {
    lambda_c: f64,
    gamma_c: f64,
    lambda_s: f64,
    k: usize,
    objective: f64,
    iterations: usize,
    converged: bool,
    merges: Vec<cggm::optimizer::MergeEvent>,
}

fn run_fit(args: &FitArgs) -> Outcome {
    let prep = prepare(&args.input)?;
    let base = base_config(&prep, &args.penalties)?;
    if !(args.lambda_c >= 0.0 && args.lambda_c.is_finite()) {
        return Err(input_error("--lambda-c must be finite and >= 0"));
    }
    let cfg = scaled_config(&base, args.lambda_c);
    let init = default_init(&prep.input, prep.target)?;
    let result = fit(&prep.input, &cfg, &args.solver.settings(), Some(&init))?;
    let dir = out_dir(&args.output)?;
    let names = prep.names.as_deref();
    save_model(&dir.join("model.json"), &result.model, names)?;
    save_matrix_csv(&dir.join("theta.csv"), &result.model.materialize(), names)?;
    save_triplets(&dir.join("weights.csv"), &base.weights)?;
    let summary = FitSummary {
        lambda_c: args.lambda_c,
        gamma_c: cfg.lambda_c,
        lambda_s: cfg.lambda_s,
        k: result.model.k(),
        objective: result.objective(),
        iterations: result.iterations,
        converged: result.converged,
        merges: result.merge_log.clone(),
    };
    write_json(&dir.join("fit.json"), &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct PathEntry<'a> {
    lambda_c: f64,
    gamma_c: f64,
    k: usize,
    objective: f64,
    labels: &'a [usize],
}

#[derive(Serialize)]
struct PathDocument<'a> {
    kappa: f64,
    eps_fusion: f64,
    lambda_s: f64,
    points: Vec<PathEntry<'a>>,
    merges: &'a [cggm::clusterpath::Merge],
}

fn run_path(args: &PathArgs) -> Outcome {
    let prep = prepare(&args.input)?;
    let base = base_config(&prep, &args.penalties)?;
    let settings = PathSettings {
        solver: args.solver.settings(),
        refine_tol: args.refine_tol,
        target: prep.target,
        ..PathSettings::default()
    };
    let path = compute_path(&prep.input, &base, &settings, None)?;
    let dir = out_dir(&args.output)?;
    let doc = PathDocument {
        kappa: path.kappa,
        eps_fusion: path.eps_fusion,
        lambda_s: base.lambda_s,
        points: path
            .points
            .iter()
            .map(|pt| PathEntry {
                lambda_c: pt.lambda_c,
                gamma_c: pt.gamma_c,
                k: pt.k(),
                objective: pt.fit.objective(),
                labels: pt.model().assignment.labels(),
            })
            .collect(),
        merges: &path.merges,
    };
    write_json(&dir.join("path.json"), &doc)?;
    let tree = dendrogram(&path, prep.names.as_deref());
    write_json(&dir.join("dendrogram.json"), &tree)?;
    std::fs::write(dir.join("dendrogram.nwk"), tree.to_newick() + "\n").map_err(CggmError::from)?;
    save_triplets(&dir.join("weights.csv"), &base.weights)?;
    let last = path.points.last().expect("path has a point");
    save_model(&dir.join("model.json"), last.model(), prep.names.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct Selection<'a> {
    best: cggm::modelsel::Choice<f64>,
    best_raw: cggm::modelsel::Choice<f64>,
    k_refit: usize,
    k_raw: usize,
    lambda_s_grid: &'a [f64],
    folds: &'a [usize],
}

fn run_cv(args: &CvArgs) -> Outcome {
    let table = io::read_matrix_csv(&args.data)?;
    let x = if args.standardize { standardize(&table.values)? } else { table.values };
    let target = Target::from(args.target);
    let plan = args.grid.plan(target);
    let path = PathSettings { solver: args.solver.settings(), target, ..PathSettings::default() };
    let settings = CvSettings { refit: refit_settings(&path.solver), path, ..CvSettings::default() };
    let result = select(&x, &plan, &settings)?;
    let dir = out_dir(&args.output)?;
    let names = table.names.as_deref();
    save_model(&dir.join("model.json"), &result.refit, names)?;
    save_model(&dir.join("raw_model.json"), &result.raw, names)?;
    let mut w = csv::Writer::from_path(dir.join("cv.csv")).map_err(CggmError::from)?;
    w.write_record(["knn", "phi", "lambda_s", "lambda_c", "raw_score", "refit_score"]).map_err(CggmError::from)?;
    for row in &result.table {
        let nums = [row.phi, row.lambda_s, row.lambda_c, row.raw_score, row.refit_score].map(io::format_number);
        let mut record = vec![row.knn.to_string()];
        record.extend(nums);
        w.write_record(&record).map_err(CggmError::from)?;
    }
    w.flush().map_err(CggmError::from)?;
    let selection = Selection {
        best: result.best,
        best_raw: result.best_raw,
        k_refit: result.refit.k(),
        k_raw: result.raw.k(),
        lambda_s_grid: &result.lambda_s_grid,
        folds: &result.folds,
    };
    write_json(&dir.join("selection.json"), &selection)?;
    Ok(())
}

fn run_refit(args: &RefitArgs) -> Outcome {
    let (model, names) = io::load_model(&args.model)?;
    let prep = prepare(&args.input)?;
    if prep.target != model.target {
        return Err(input_error("--target differs from the model's target"));
    }
    if model.p() != prep.input.nrows() {
        return Err(input_error(format!("model has {} variables, data has {}", model.p(), prep.input.nrows())));
    }
    let result = refit(&model, &prep.input, &refit_settings(&SolverSettings::default()), args.zero_eps)?;
    let dir = out_dir(&args.output)?;
    let names = names.or(prep.names);
    save_model(&dir.join("model.json"), &result.model, names.as_deref())?;
    save_matrix_csv(&dir.join("theta.csv"), &result.model.materialize(), names.as_deref())?;
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct TruthDocument {
    spec: DesignSpec,
    labels: Vec<usize>,
    matrix: Vec<Vec<f64>>,
}

fn parse_designs(list: &str) -> Outcome<Vec<Design>> {
    if list == "all" {
        return Ok(Design::ALL.to_vec());
    }
    list.split(',').map(|d| d.trim().parse::<Design>().map_err(|e| input_error(format!("{e}")))).collect()
}

fn run_simulate(args: &SimulateArgs) -> Outcome {
    let designs = parse_designs(&args.design)?;
    let target = Target::from(args.target);
    let spec = |design| DesignSpec {
        p: args.p,
        n: args.n,
        k: args.k,
        edge_prob: args.edge_prob,
        approx: args.approx || design == Design::ApproxVariant,
        ..DesignSpec::new(design, args.seed).with_target(target)
    };
    let dir = out_dir(&args.output)?;
    match args.replications {
        None => {
            let [design] = designs[..] else {
                return Err(input_error("a single sample needs exactly one design"));
            };
            let spec = spec(design);
            let sim = simbench::generate(&spec)?;
            let names: Vec<String> = (1..=spec.p).map(|j| format!("V{j}")).collect();
            save_matrix_csv(&dir.join("data.csv"), &sim.data, Some(&names))?;
            let truth = TruthDocument {
                spec,
                labels: sim.labels,
                matrix: sim.truth.row_iter().map(|r| r.iter().copied().collect()).collect(),
            };
            write_json(&dir.join("truth.json"), &truth)?;
        }
        Some(replications) => {
            let plan = CvPlan { folds: args.folds, seed: args.seed, ..CvPlan::for_target(target) };
            let config = StudyConfig {
                designs: designs.into_iter().map(spec).collect(),
                replications,
                plan,
                settings: CvSettings::default(),
            };
            let rows = simbench::run_study(&config);
            let mut w = csv::Writer::from_path(dir.join("results.csv")).map_err(CggmError::from)?;
            let opt = |v: Option<f64>| v.map(io::format_number).unwrap_or_default();
            w.write_record(["design", "replication", "seed", "method", "frobenius", "k_hat", "ari", "fpr", "fnr", "error"])
                .map_err(CggmError::from)?;
            for r in &rows {
                w.write_record([
                    r.design.clone(),
                    r.replication.to_string(),
                    r.seed.to_string(),
                    r.method.clone(),
                    opt(r.frobenius),
                    r.k_hat.map(|k| k.to_string()).unwrap_or_default(),
                    opt(r.ari),
                    opt(r.fpr),
                    opt(r.fnr),
                    r.error.clone().unwrap_or_default(),
                ])
                .map_err(CggmError::from)?;
            }
            w.flush().map_err(CggmError::from)?;
            write_json(&dir.join("summary.json"), &simbench::summarize(&rows))?;
        }
    }
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Outcome {
    let (model, _) = io::load_model(&args.model)?;
    let truth: TruthDocument = io::read_json(&args.truth)?;
    let p = truth.labels.len();
    if truth.matrix.len() != p || truth.matrix.iter().any(|r| r.len() != p) {
        return Err(input_error("truth matrix does not match its labels"));
    }
    if model.p() != p {
        return Err(input_error(format!("model has {} variables, truth has {p}", model.p())));
    }
    let m = DMatrix::from_fn(p, p, |i, j| truth.matrix[i][j]);
    let report = simbench::evaluate(&model, &m, &truth.labels, args.zero_eps)?;
    let dir = out_dir(&args.output)?;
    write_json(&dir.join("evaluation.json"), &report)?;
    print!("{}", io::to_json(&report)?);
    Ok(())
}

fn run_weights(args: &WeightsArgs) -> Outcome {
    let prep = prepare(&args.input)?;
    let w = build_weights(&prep.input, args.knn, args.phi)?;
    let dir = out_dir(&args.output)?;
    save_triplets(&dir.join("weights.csv"), &w)?;
    save_triplets(&dir.join("sparsity.csv"), &Weights::ones(prep.input.nrows()))?;
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Path(a) => run_path(a),
        Command::Cv(a) => run_cv(a),
        Command::Refit(a) => run_refit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Weights(a) => run_weights(a),
    }
}

/// Worker count from `CGGM_WORKERS`, if set.
fn workers() -> Outcome<Option<usize>> {
    match std::env::var("CGGM_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(input_error(format!("CGGM_WORKERS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn report(f: &Failure) -> ExitCode {
    let doc = serde_json::json!({ "error": { "code": f.code, "kind": f.kind, "message": f.message } });
    eprintln!("{doc}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let parallel = matches!(cli.command, Command::Cv(_) | Command::Simulate(SimulateArgs { replications: Some(_), .. }));
    let threads = match workers() {
        Ok(n) => if parallel { n } else { Some(1) },
        Err(f) => return report(&f),
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(&Failure { code: 4, kind: "internal", message: e.to_string() });
        }
    }
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => report(&f),
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unexpected failure".into());
            report(&Failure { code: 4, kind: "internal", message })
        }
    }
}
