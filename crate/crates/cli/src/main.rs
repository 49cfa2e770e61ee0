use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gridtopo::benchmark::{self, ExperimentConfig, GridSpec, RunOptions};
use gridtopo::lcpf::{self, Distribution};
use gridtopo::moments::{self, Pairing};
use gridtopo::{Error, Grid, InjectionSpec, LearnConfig, LearnedGrid, MeasurementSet, MomentSet, NodeInjection, RgConfig};

const GRID_FORMAT: &str = "Grid JSON: {\"nodes\": [{\"id\", \"root\", \"observed\"}], \"edges\": [{\"u\", \"v\", \"r\", \"x\"}]}. \
Exactly one root; observed buses must be leaves; hidden buses need three or more lines besides any line to the root.";

const CSV_FORMAT: &str = "Measurement CSV: optional first line `# seed=N grid=FILE`, then header `t,v:ID...,p:ID...,q:ID...` \
and one row per sample. Voltages and injections are deviations from the operating point.";

#[derive(Parser)]
#[command(name = "gridtopo", version, about = "Learn radial grid topology and line impedances from end-user meter data")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random radial grid.
    #[command(after_help = GRID_FORMAT)]
    GenerateGrid {
        #[arg(long, default_value_t = 100)]
        nodes: usize,
        #[arg(long, default_value_t = 5)]
        max_degree: usize,
        /// Lower bound of the uniform r and x draws (ohms).
        #[arg(long, default_value_t = 0.1)]
        r_lo: f64,
        /// Upper bound of the uniform r and x draws (ohms).
        #[arg(long, default_value_t = 0.2)]
        r_hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output Grid JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a grid file against the model assumptions.
    #[command(after_help = GRID_FORMAT)]
    Validate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Simulate linearised power-flow samples at the observed buses.
    #[command(after_help = CSV_FORMAT)]
    Simulate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        injection: InjectionArgs,
        /// Output measurement CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate second moments from a measurement CSV.
    #[command(
        after_help = "Writes MomentSet JSON: {\"nodes\", \"count\", \"vp\", \"vq\", \"pp\", \"qq\", \"pq\"}, \
where vp[a][b] = E[v_a p_b] and pp[b] = E[p_b^2]."
    )]
    Moments {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn topology and impedances from measurements or moments.
    #[command(after_help = "Input is a measurement CSV (--data) or MomentSet JSON (--moments). Output is \
LearnedGrid JSON: the Grid JSON schema without a root, plus a \"provenance\" object. Hidden buses are named h#1, h#2, ...")]
    Estimate {
        #[arg(long, conflicts_with = "moments", required_unless_present = "moments")]
        data: Option<PathBuf>,
        #[arg(long)]
        moments: Option<PathBuf>,
        #[command(flatten)]
        learn: LearnArgs,
        /// Output LearnedGrid JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a learned grid against the true one.
    #[command(after_help = "Writes EvalReport JSON: {\"exact_recovery\", \"edge_difference\", \
\"avg_impedance_error\", \"runtime\"}. avg_impedance_error is null unless the topology is exact.")]
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        learned: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate, learn and evaluate in one go.
    #[command(after_help = "Writes data.csv, learned.json and report.json into --out-dir.")]
    Pipeline {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 10000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        injection: InjectionArgs,
        #[command(flatten)]
        learn: LearnArgs,
        #[arg(long, default_value = "pipeline-out")]
        out_dir: PathBuf,
    },
    /// Run a Monte-Carlo sweep from a config file.
    #[command(after_help = "Config file: `key = value` lines, `#` comments, comma-separated lists. Keys: \
n, max_degree, r_lo, r_hi, samples, eps0, eps_growth, eps_mode (dynamic|fixed), tau_rule (median:K|fixed:V|inf), \
pairing (symmetric|oriented), trials, seed, mode (sampled|analytic), var_p, var_q, cov_pq.\n\
The result CSV has one row per (trial, samples, eps0): trial,samples,eps0,exact_recovery,edge_difference,impedance_error,error.")]
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output result CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional aggregated JSON summary.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Record wall-clock runtime in the summary (makes it non-reproducible).
        #[arg(long)]
        timing: bool,
    },
}

#[derive(Args)]
struct InjectionArgs {
    /// Variance of active injections.
    #[arg(long, default_value_t = 1.0)]
    var_p: f64,
    /// Variance of reactive injections.
    #[arg(long, default_value_t = 1.0)]
    var_q: f64,
    /// Covariance of active and reactive injections at a bus.
    #[arg(long, default_value_t = 0.0)]
    cov_pq: f64,
    #[arg(long, value_enum, default_value_t = Dist::Gaussian)]
    distribution: Dist,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Gaussian,
    Uniform,
}

impl InjectionArgs {
    fn spec(&self) -> InjectionSpec {
        let d = match self.distribution {
            Dist::Gaussian => Distribution::Gaussian,
            Dist::Uniform => Distribution::Uniform,
        };
        InjectionSpec::uniform_all(NodeInjection::new(self.var_p, self.var_q, self.cov_pq)).with_distribution(d)
    }
}

#[derive(Args)]
struct LearnArgs {
    /// Initial grouping tolerance ε (ohms).
    #[arg(long, default_value_t = RgConfig::default().eps0)]
    eps: f64,
    /// Factor applied to ε when a round finds no group.
    #[arg(long, default_value_t = 1.5)]
    eps_growth: f64,
    /// Keep ε fixed; a stalled round fails instead.
    #[arg(long)]
    fixed_eps: bool,
    /// Witness radius τ: median:K, fixed:V or inf.
    #[arg(long, default_value = "median:2", value_parser = benchmark::experiment::parse_tau)]
    tau: gridtopo::Tau,
    /// Injection-determinant threshold λ (default: a tenth of the median).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t = PairingArg::Oriented)]
    pairing: PairingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    Symmetric,
    Oriented,
}

impl LearnArgs {
    fn config(&self) -> LearnConfig {
        LearnConfig {
            rg: RgConfig {
                eps0: self.eps,
                eps_growth: self.eps_growth,
                tau: self.tau,
                max_rounds: None,
                dynamic: !self.fixed_eps,
            },
            lambda: self.lambda,
            resistance: Default::default(),
            pairing: match self.pairing {
                PairingArg::Symmetric => Pairing::Symmetric,
                PairingArg::Oriented => Pairing::Oriented,
            },
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Invalid(_) | Error::InvalidGrid(_) | Error::Parse { .. } | Error::Json(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn input_error(path: &Path, e: Error) -> Failure {
    let missing = matches!(&e, Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound);
    let mut f = Failure::from(e);
    let name = path.display().to_string();
    if !f.message.contains(&name) {
        f.message = format!("{name}: {}", f.message);
    }
    if missing {
        f.code = 1;
    }
    f
}

fn read_grid(path: &Path) -> Result<Grid, Failure> {
    Grid::read(path).map_err(|e| input_error(path, e))
}

fn read_csv(path: &Path) -> Result<MeasurementSet, Failure> {
    MeasurementSet::read_csv_file(path).map_err(|e| input_error(path, e))
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", dir.display()),
        })?;
    }
    fs::write(path, text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn summary(report: &benchmark::EvalReport) -> String {
    format!(
        "exact_recovery={} edge_difference={} avg_impedance_error={}",
        report.exact_recovery,
        report.edge_difference,
        report.avg_impedance_error.map_or("n/a".into(), |e| format!("{e:.4}"))
    )
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenerateGrid {
            nodes,
            max_degree,
            r_lo,
            r_hi,
            seed,
            out,
        } => {
            let spec = GridSpec {
                nodes,
                max_degree,
                lo: r_lo,
                hi: r_hi,
            };
            let g = benchmark::random_radial_grid(&spec, seed)?;
            write(&out, &(g.to_json() + "\n"))?;
            println!("wrote {} ({} buses, {} observed)", out.display(), g.len(), g.observed_ids().len());
        }
        Command::Validate { grid } => {
            let g = read_grid(&grid)?;
            let report = g.validate();
            if !report.is_valid() {
                return Err(Failure {
                    code: 1,
                    message: format!("{}: {report}", grid.display()),
                });
            }
            println!("{}: valid ({} buses, {} observed)", grid.display(), g.len(), g.observed_ids().len());
        }
        Command::Simulate {
            grid,
            samples,
            seed,
            injection,
            out,
        } => {
            let g = read_grid(&grid)?;
            let mut ms = lcpf::simulate(&g, &injection.spec(), samples, seed)?;
            ms.source = Some(grid.display().to_string());
            write(&out, &ms.to_csv_string())?;
            println!("wrote {} ({} samples at {} buses)", out.display(), ms.samples, ms.width());
        }
        Command::Moments { data, out } => {
            let ms = read_csv(&data)?;
            let m = moments::accumulate(&ms)?;
            write(&out, &(m.to_json() + "\n"))?;
            println!("wrote {} ({} samples)", out.display(), ms.samples);
        }
        Command::Estimate {
            data,
            moments,
            learn,
            out,
        } => {
            let cfg = learn.config();
            let learned = match (data, moments) {
                (Some(path), _) => gridtopo::learner::learn_from_samples(&read_csv(&path)?, &cfg)?,
                (None, Some(path)) => {
                    let m = MomentSet::read(&path).map_err(|e| input_error(&path, e))?;
                    let nodes = m.nodes.clone();
                    gridtopo::learner::learn_from_moments(&m, &nodes, &cfg)?
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            write(&out, &(learned.to_json() + "\n"))?;
            let hidden = learned.grid.nodes().iter().filter(|n| !n.observed).count();
            println!(
                "wrote {} ({} lines, {} hidden buses, {} rounds)",
                out.display(),
                learned.grid.edges().len(),
                hidden,
                learned.provenance.rounds
            );
        }
        Command::Evaluate { truth, learned, out } => {
            let t = read_grid(&truth)?;
            let l = LearnedGrid::read(&learned).map_err(|e| input_error(&learned, e))?;
            let report = benchmark::evaluate(&t, &l)?;
            if let Some(out) = out {
                write(&out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
            }
            println!("{}", summary(&report));
        }
        Command::Pipeline {
            grid,
            samples,
            seed,
            injection,
            learn,
            out_dir,
        } => {
            let g = read_grid(&grid)?;
            let mut ms = lcpf::simulate(&g, &injection.spec(), samples, seed)?;
            ms.source = Some(grid.display().to_string());
            write(&out_dir.join("data.csv"), &ms.to_csv_string())?;
            let learned = gridtopo::learner::learn_from_samples(&ms, &learn.config())?;
            write(&out_dir.join("learned.json"), &(learned.to_json() + "\n"))?;
            let report = benchmark::evaluate(&g, &learned)?;
            write(
                &out_dir.join("report.json"),
                &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
            )?;
            println!("{}", summary(&report));
        }
        Command::Sweep {
            config,
            out,
            summary: summary_path,
            timing,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| Failure {
                code: 1,
                message: format!("{}: {e}", config.display()),
            })?;
            let cfg = ExperimentConfig::parse(&text, &config.display().to_string())?;
            let res = benchmark::run_experiment(&cfg, RunOptions { timing })?;
            write(&out, &res.to_csv_string())?;
            if let Some(path) = summary_path {
                write(&path, &(res.summary_json() + "\n"))?;
            }
            print!("{}", res.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
