//! `catgen`: generate spatial gene expression from single-cell profiles.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use catgen_core::ablate::{self, AblationBase, Axis};
use catgen_core::arplan::ARStepPlan;
use catgen_core::data::{align_genes, load_matrix, preprocess_pair, Format};
use catgen_core::generate::generate_with_latents;
use catgen_core::granger;
use catgen_core::metrics::{self, correlation_distances, labelled_csv};
use catgen_core::synth;
use catgen_core::train::{history_csv, GeneOrder};
use catgen_core::{
    build_mask, fit, Config, Dataset, Error, Expression64, Matrix64, Modality, Model64,
    SamplingStrategy,
};
use clap::{Args, Parser, Subcommand};
use log::info;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "catgen",
    version,
    about = "Causality-aware generation of spatial gene expression"
)]
struct Cli {
    /// Seed for every random stream not fixed by the config file.
    #[arg(long, global = true, env = "CATGEN_SEED", default_value_t = 42)]
    seed: u64,

    /// Increase log detail on stderr (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` config file with [sections].
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.epochs=50` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, Error> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for o in &self.overrides {
            cfg.set_assignment(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic ST/SC pair with planted causal chains.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory receiving st.csv, sc.csv and edges.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pairwise Granger-causality screen over the genes of a matrix.
    Granger {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = granger::DEFAULT_LAG)]
        lag: usize,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the causal attention mask (1 = blocked) for one AR plan.
    Mask {
        /// Number of sample genes.
        #[arg(long)]
        s: usize,
        /// Number of condition tokens.
        #[arg(long)]
        c: usize,
        /// AR group sizes, summing to s.
        #[arg(long, value_delimiter = ',', required = true)]
        sz: Vec<usize>,
        /// CSV output (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a PBM image.
        #[arg(long)]
        pbm: Option<PathBuf>,
    },
    /// Train a model on an aligned ST/SC pair.
    Train {
        #[arg(long)]
        st: PathBuf,
        #[arg(long)]
        sc: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history (default: history.csv beside the checkpoint).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Token order inside training batches.
        #[arg(long)]
        gene_order: Option<GeneOrder>,
        /// Write the gene split (gene_id,split) here.
        #[arg(long)]
        split_out: Option<PathBuf>,
    },
    /// Generate ST profiles for target genes from their SC profiles.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sc: PathBuf,
        /// Target gene ids, one per line.
        #[arg(long)]
        genes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reverse-diffusion grid: full, frac:<n> or adaptive.
        #[arg(long)]
        sampling: Option<SamplingStrategy>,
        /// Number of equal AR groups denoised in sequence.
        #[arg(long)]
        ar_groups: Option<usize>,
        /// Write generated and condition latents (CSV) here.
        #[arg(long)]
        latents: Option<PathBuf>,
    },
    /// Score predictions against observed ST profiles.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the gene-by-gene 1 − PCC distance matrix of the predictions.
        #[arg(long)]
        distances: Option<PathBuf>,
    },
    /// Sweep one configuration axis and report PCC per setting.
    Ablate {
        /// decay, blocks, sampling, decoder or variational.
        #[arg(long)]
        axis: Axis,
        /// Settings to try (default: the axis's standard grid).
        #[arg(long, value_delimiter = ',')]
        settings: Vec<String>,
        /// Seeds, each with its own gene split (default: --seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// ST matrix (synthetic data from the config when omitted).
        #[arg(long, requires = "sc")]
        st: Option<PathBuf>,
        #[arg(long, requires = "st")]
        sc: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            })
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load(path: &Path, modality: Modality) -> Result<Expression64, Error> {
    load_matrix(path, Format::from_path(path), modality)
}

fn read_gene_list(path: &Path) -> Result<Vec<String>, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

/// Loads an ST/SC pair, preprocessing it when the config asks for it and
/// otherwise only restricting both to their shared genes.
fn load_pair(st: &Path, sc: &Path, cfg: &Config) -> Result<(Expression64, Expression64), Error> {
    let st = load(st, Modality::St)?;
    let sc = load(sc, Modality::Sc)?;
    match cfg.preprocess() {
        Some(opts) => preprocess_pair(&st, &sc, &opts),
        None => align_genes(&st, &sc),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { cfg, out_dir } => {
            let cfg = cfg.load()?;
            let scfg = cfg.synth(seed)?;
            let data = synth::generate::<f64>(&scfg)?;
            fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
                path: out_dir.clone(),
                source,
            })?;
            data.st.write(&out_dir.join("st.csv"), Format::Csv)?;
            data.sc.write(&out_dir.join("sc.csv"), Format::Csv)?;
            write(&out_dir.join("edges.csv"), &synth::edges_csv(&data.edges))?;
            info!(
                "wrote {} genes, {} spots, {} cells, {} edges to {}",
                scfg.n_genes,
                scfg.n_spots,
                scfg.n_cells,
                data.edges.len(),
                out_dir.display()
            );
        }
        Command::Granger {
            matrix,
            lag,
            top_k,
            out,
        } => {
            let m = load(&matrix, Modality::St)?;
            let s = granger::screen(&m, lag, top_k)?;
            write(&out, &granger::results_csv(&s.top))?;
            info!(
                "{} pairs reported, {} degenerate pairs skipped",
                s.top.len(),
                s.skipped
            );
        }
        Command::Mask { s, c, sz, out, pbm } => {
            let plan = ARStepPlan::from_sizes(&sz)?;
            let mask = build_mask(s, c, &plan)?;
            match out {
                Some(p) => write(&p, &mask.to_csv())?,
                None => print!("{}", mask.to_csv()),
            }
            if let Some(p) = pbm {
                write(&p, &mask.to_pbm())?;
            }
        }
        Command::Train {
            st,
            sc,
            cfg,
            out,
            history,
            gene_order,
            split_out,
        } => {
            let cfg = cfg.load()?;
            let (st, sc) = load_pair(&st, &sc, &cfg)?;
            let mut tcfg = cfg.train(seed)?;
            if let Some(o) = gene_order {
                tcfg.gene_order = o;
            }
            let mcfg = cfg.model(st.n_obs(), sc.n_obs())?;
            let data = Dataset::new(st, sc, tcfg.seed)?;
            if let Some(p) = split_out {
                write(&p, &split_csv(&data))?;
            }
            let result = fit(&data, &mcfg, cfg.schedule()?, &tcfg)?;
            result.model.save(&out)?;
            let history = history.unwrap_or_else(|| out.with_file_name("history.csv"));
            write(&history, &history_csv(&result.history))?;
            info!(
                "best epoch {}; checkpoint {}",
                result.best_epoch,
                out.display()
            );
        }
        Command::Generate {
            ckpt,
            sc,
            genes,
            out,
            cfg,
            sampling,
            ar_groups,
            latents,
        } => {
            let cfg = cfg.load()?;
            let model = Model64::load(&ckpt)?;
            let sc = load(&sc, Modality::Sc)?;
            let genes = read_gene_list(&genes)?;
            let mut icfg = cfg.inference(seed)?;
            if let Some(s) = sampling {
                icfg.strategy = s;
            }
            if let Some(k) = ar_groups {
                if k == 0 {
                    return Err(Error::Config("--ar-groups must be positive".into()));
                }
                icfg.ar_groups = k;
            }
            let g = generate_with_latents(&sc, &genes, &model, &icfg)?;
            g.expression.write(&out, Format::from_path(&out))?;
            if let Some(p) = latents {
                write(&p, &latents_csv(&genes, &g.latents, &g.conditions))?;
            }
        }
        Command::Eval {
            pred,
            truth,
            out,
            distances,
        } => {
            let pred = load(&pred, Modality::St)?;
            let truth = load(&truth, Modality::St)?;
            let e = metrics::evaluate(&pred, &truth)?;
            write(&out, &e.to_csv())?;
            if let Some(p) = distances {
                let d = correlation_distances(pred.values());
                write(&p, &labelled_csv(pred.gene_ids(), pred.gene_ids(), &d))?;
            }
            info!(
                "PCC {:.4} SSIM {:.4} RMSE {:.4} JS {:.4}",
                e.summary.pcc.0, e.summary.ssim.0, e.summary.rmse.0, e.summary.js.0
            );
        }
        Command::Ablate {
            axis,
            settings,
            seeds,
            st,
            sc,
            cfg,
            out,
        } => {
            let cfg = cfg.load()?;
            let (st, sc) = match (st, sc) {
                (Some(st), Some(sc)) => load_pair(&st, &sc, &cfg)?,
                _ => {
                    let d = synth::generate::<f64>(&cfg.synth(seed)?)?;
                    (d.st, d.sc)
                }
            };
            let settings = if settings.is_empty() {
                axis.default_settings()
            } else {
                settings
                    .iter()
                    .map(|s| axis.parse_setting(s))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let seeds = if seeds.is_empty() { vec![seed] } else { seeds };
            let base = AblationBase {
                model: cfg.model(st.n_obs(), sc.n_obs())?,
                train: cfg.train(seed)?,
                schedule: cfg.schedule()?,
                inference: cfg.inference(seed)?,
                score_train: true,
            };
            let rows = ablate::run_ablation(&st, &sc, &base, &settings, &seeds)?;
            write(&out, &ablate::report_csv(&rows))?;
        }
    }
    Ok(())
}

fn split_csv(data: &Dataset<f64>) -> String {
    let mut s = String::from("gene_id,split\n");
    for (name, idx) in [
        ("train", &data.split.train),
        ("val", &data.split.val),
        ("test", &data.split.test),
    ] {
        for &g in idx {
            s.push_str(&format!("{},{name}\n", data.st.gene_ids()[g]));
        }
    }
    s
}

/// One row per gene and kind (`generated` or `condition`), latent columns
/// `z0..`.
fn latents_csv(genes: &[String], generated: &Matrix64, conditions: &Matrix64) -> String {
    let mut s = String::from("gene_id,kind");
    for k in 0..generated.cols() {
        s.push_str(&format!(",z{k}"));
    }
    s.push('\n');
    for (kind, m) in [("generated", generated), ("condition", conditions)] {
        for (i, g) in genes.iter().enumerate() {
            s.push_str(g);
            s.push(',');
            s.push_str(kind);
            for v in m.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
    }
    s
}
