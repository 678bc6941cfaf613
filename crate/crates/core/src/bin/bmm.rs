use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bmm_core::clustering::Linkage;
use bmm_core::dataset_io::{self, FeatureFormat};
use bmm_core::error::{BmmError, Result};
use bmm_core::pipeline::{self, MatchReport, PipelineConfig, BENCH_CSV_HEADER};
use bmm_core::pruning::{Budget, Strategy};
use bmm_core::synth::{self, PlantedWorld};

#[derive(Parser)]
#[command(name = "bmm", version, about = "Search a training set in a hierarchical data server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster the server into balanced leaves and persist the merge tree.
    BuildServer {
        #[arg(long)]
        server_features: PathBuf,
        #[arg(long = "leaves", default_value_t = pipeline::DEFAULT_LEAVES)]
        leaves: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "centroid")]
        linkage: Linkage,
        /// Tree file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Match target modes to tree nodes and write the selected manifest.
    Match {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        target_features: PathBuf,
        #[arg(long = "target-clusters", default_value_t = pipeline::DEFAULT_TARGET_CLUSTERS)]
        target_clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = bmm_core::domain_gap::DEFAULT_EPS_COV)]
        eps_cov: f64,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long, default_value = "uniform")]
        strategy: Strategy,
        /// Flag matches whose FID exceeds this level in the report.
        #[arg(long)]
        warn_fid: Option<f64>,
        /// Also write the target x node cost matrix as costs.csv.
        #[arg(long)]
        dump_costs: bool,
        /// Output directory (manifest.txt, report.txt, report.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the domain gap of a manifest and of the whole server.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        server_features: PathBuf,
        #[arg(long)]
        target_features: PathBuf,
        #[arg(long, default_value_t = bmm_core::domain_gap::DEFAULT_EPS_COV)]
        eps_cov: f64,
        /// Optional JSON copy of the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Subsample a manifest to a budget.
    Prune {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long, default_value = "uniform")]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep J and L on a synthetic world, one CSV row per variant and cell.
    Bench {
        #[arg(long)]
        world: PathBuf,
        #[arg(long = "leaves", value_delimiter = ',', default_value = "16,32,64,128")]
        leaves: Vec<usize>,
        #[arg(long = "target-clusters", value_delimiter = ',', default_value = "20")]
        target_clusters: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "centroid")]
        linkage: Linkage,
        #[arg(long, default_value_t = bmm_core::domain_gap::DEFAULT_EPS_COV)]
        eps_cov: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate server/target features and ground truth from a world config.
    Synth {
        #[arg(long)]
        world: PathBuf,
        /// Output directory (server.bmmf, target.bmmf, truth.json).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct BudgetArgs {
    /// Keep this fraction of the selected samples.
    #[arg(long)]
    budget_frac: Option<f64>,
    /// Keep exactly this many selected samples.
    #[arg(long)]
    budget_n: Option<usize>,
}

impl BudgetArgs {
    fn budget(&self) -> Option<Budget> {
        match (self.budget_frac, self.budget_n) {
            (Some(f), _) => Some(Budget::Fraction(f)),
            (_, Some(n)) => Some(Budget::Absolute(n)),
            _ => None,
        }
    }
}

fn read_features(path: &Path) -> Result<bmm_core::FeatureMatrix> {
    dataset_io::read_features(path, FeatureFormat::from_path(path))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|source| BmmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| BmmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report serializes");
    out.push(b'\n');
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildServer {
            server_features,
            leaves,
            seed,
            linkage,
            out,
        } => {
            let server = read_features(&server_features)?;
            let tree = pipeline::build_server(&server, leaves, seed, linkage)?;
            dataset_io::persist_tree(&tree, &out)?;
            println!(
                "built tree: J = {}, H = {}, n = {}, d = {}",
                tree.leaf_count(),
                tree.node_count(),
                server.n(),
                server.d()
            );
            println!("nodes per level (root first): {:?}", tree.level_sizes());
            println!("wrote {}", out.display());
        }
        Command::Match {
            tree,
            target_features,
            target_clusters,
            seed,
            eps_cov,
            budget,
            strategy,
            warn_fid,
            dump_costs,
            out,
        } => {
            let tree = dataset_io::load_tree(&tree)?;
            let target = read_features(&target_features)?;
            let cfg = PipelineConfig {
                leaves: tree.leaf_count(),
                target_clusters,
                seed,
                linkage: tree.linkage(),
                eps_cov,
                budget: budget.budget(),
                strategy,
                warn_fid,
            };
            let outcome = pipeline::run_match(&tree, &target, &cfg)?;
            let report = MatchReport::new(&tree, &outcome, warn_fid);
            let mut metadata = cfg.metadata();
            metadata.insert("command".into(), "match".into());
            if let Some(b) = cfg.budget {
                metadata.insert("budget".into(), format!("{b:?}"));
            }
            let rows = &outcome.pruned.as_ref().unwrap_or(&outcome.selection).sample_rows;
            let manifest = pipeline::selection_manifest(&tree, rows, metadata);
            create_dir(&out)?;
            dataset_io::write_manifest(&manifest, &out.join("manifest.txt"))?;
            write(&out.join("report.txt"), report.to_text())?;
            write(&out.join("report.json"), to_json(&report))?;
            if dump_costs {
                write(
                    &out.join("costs.csv"),
                    outcome.problem.cost.to_csv(&outcome.problem.node_ids),
                )?;
            }
            print!("{}", report.to_text());
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            manifest,
            server_features,
            target_features,
            eps_cov,
            out,
        } => {
            let manifest = dataset_io::read_manifest(&manifest)?;
            let server = read_features(&server_features)?;
            let target = read_features(&target_features)?;
            let report = pipeline::evaluate(&manifest, &server, &target, eps_cov)?;
            print!("{}", report.to_text());
            if let Some(out) = out {
                write(&out, to_json(&report))?;
            }
        }
        Command::Prune {
            manifest,
            budget,
            strategy,
            seed,
            out,
        } => {
            let budget = budget
                .budget()
                .ok_or_else(|| BmmError::Parameter("one of --budget-frac or --budget-n is required".into()))?;
            let input = dataset_io::read_manifest(&manifest)?;
            let pruned = pipeline::prune_manifest(&input, budget, strategy, seed)?;
            dataset_io::write_manifest(&pruned, &out)?;
            println!("kept {} of {} samples", pruned.entries.len(), input.entries.len());
        }
        Command::Bench {
            world,
            leaves,
            target_clusters,
            seed,
            linkage,
            eps_cov,
            out,
        } => {
            let world = PlantedWorld::load(&world)?;
            let cfg = PipelineConfig {
                seed,
                linkage,
                eps_cov,
                ..PipelineConfig::default()
            };
            let rows = pipeline::bench(&world, &leaves, &target_clusters, &cfg)?;
            let mut csv = String::from(BENCH_CSV_HEADER);
            csv.push('\n');
            for r in &rows {
                csv.push_str(&r.csv_line());
                csv.push('\n');
            }
            write(&out, &csv)?;
            print!("{csv}");
        }
        Command::Synth { world, out } => {
            let world = PlantedWorld::load(&world)?;
            let (server, target, truth) = synth::generate(&world)?;
            create_dir(&out)?;
            dataset_io::write_features(&server, &out.join("server.bmmf"), FeatureFormat::Binary)?;
            dataset_io::write_features(&target, &out.join("target.bmmf"), FeatureFormat::Binary)?;
            write(&out.join("truth.json"), to_json(&truth))?;
            println!(
                "server: {} x {}, target: {} x {}; wrote {}",
                server.n(),
                server.d(),
                target.n(),
                target.d(),
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &BmmError) -> u8 {
    match e {
        BmmError::Parameter(_) | BmmError::Infeasible(_) | BmmError::Refused(_) => 2,
        BmmError::Format(_) | BmmError::Validation(_) | BmmError::Incompatible { .. } => 3,
        BmmError::Io { .. } => 4,
        BmmError::InsufficientSamples(_) | BmmError::Numerical(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("BMM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if threads > 0 {
            // results never depend on the pool size
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
