use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use super::ablate::{ablate, Cell};
use super::checks;
use super::config::{RunConfig, Toggles};
use super::eval::{evaluate, write_outputs};
use super::model::Model;
use super::train::{train_coarse, train_fine};
use crate::diffcore::GradCheckOptions;
use crate::error::{Error, Result};
use crate::instalign::AlignMode;
use crate::scenegen::{load_corpus, save_corpus, Corpus, GenConfig, Split};

#[derive(Parser, Debug)]
#[command(name = "spatialoc", version, about = "Text-to-point-cloud localization: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test corpora.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        submaps: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
    },
    /// Train the coarse stage.
    TrainCoarse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the fine stage from a coarse checkpoint.
    TrainFine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate checkpoints on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        fine: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write recall.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Train and evaluate an ablation matrix over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated cell names; all cells when omitted.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<Cell>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference checks of all primitives and both losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags layered over the config file and the seed environment variable.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    beose_iters: Option<usize>,
    #[arg(long)]
    align_mode: Option<AlignModeArg>,
    #[arg(long)]
    no_beose: bool,
    #[arg(long)]
    no_fae: bool,
    #[arg(long)]
    ga_maxpool: bool,
    #[arg(long)]
    no_lambda: bool,
    /// Comma-separated subset of global,is,io.
    #[arg(long, value_delimiter = ',')]
    losses: Vec<String>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum AlignModeArg {
    Corrected,
    Literal,
}

impl ConfigArgs {
    /// Defaults, then the file, then the environment, then flags. `fine`
    /// selects which stage the schedule flags apply to.
    fn resolve(&self, fine: bool) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        c.apply_env()?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        let stage = if fine { &mut c.fine } else { &mut c.coarse };
        if let Some(e) = self.epochs {
            stage.epochs = e;
        }
        if let Some(b) = self.batch_size {
            stage.batch_size = b;
        }
        if let Some(lr) = self.lr {
            stage.lr = lr;
        }
        if let Some(g) = self.gamma {
            c.model.gamma = g;
        }
        if let Some(w) = self.width {
            let m = &mut c.model;
            m.feat_width = w;
            m.edge_width = w;
            m.global_hidden = w;
            m.global_width = w;
            m.fine_hidden = w;
            m.geo_width = (w / 2).max(1);
        }
        if let Some(n) = self.beose_iters {
            c.model.beose_iters = n;
        }
        if let Some(m) = self.align_mode {
            c.model.align_mode = match m {
                AlignModeArg::Corrected => AlignMode::Corrected,
                AlignModeArg::Literal => AlignMode::Literal,
            };
        }
        c.toggles.beose &= !self.no_beose;
        c.toggles.fae &= !self.no_fae;
        c.toggles.ga &= !self.ga_maxpool;
        c.toggles.fine_lambda &= !self.no_lambda;
        if !self.losses.is_empty() {
            for l in &self.losses {
                if !["global", "is", "io"].contains(&l.as_str()) {
                    return Err(Error::Config(format!("unknown loss term `{l}`")));
                }
            }
            let has = |n: &str| self.losses.iter().any(|l| l == n);
            c.toggles.loss_global = has("global");
            c.toggles.loss_spatial = has("is");
            c.toggles.loss_instance = has("io");
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct Timing {
    command: &'static str,
    seconds: f64,
}

fn write_timing(dir: &Path, command: &'static str, start: Instant) -> Result<()> {
    let t = Timing { command, seconds: start.elapsed().as_secs_f64() };
    std::fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(&t)?)?;
    Ok(())
}

fn split_dir(data: &Path, split: Split) -> PathBuf {
    data.join(split.to_string())
}

/// `data` is either the root written by gen-data or one split directory.
fn load_split(data: &Path, split: Split) -> Result<Corpus> {
    if data.join("manifest.json").exists() {
        let corpus = load_corpus(data)?;
        if corpus.manifest.split != split {
            return Err(Error::Data(format!(
                "{} holds split `{}`, expected `{split}`",
                data.display(),
                corpus.manifest.split
            )));
        }
        return Ok(corpus);
    }
    let dir = split_dir(data, split);
    if !dir.join("manifest.json").exists() {
        return Err(Error::Data(format!("split `{split}` not found under {}", data.display())));
    }
    load_corpus(&dir)
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::GenData { out, seed, submaps, queries } => {
            let mut gen = GenConfig::default();
            if let Some(n) = submaps {
                gen.submaps = n;
            }
            if let Some(n) = queries {
                gen.queries = n;
            }
            for split in Split::ALL {
                let c = Corpus::generate(seed, split, &gen)?;
                save_corpus(&split_dir(&out, split), &c)?;
                println!("{split}: {} submaps, {} queries, checksum {}", c.submaps.len(), c.queries.len(), c.manifest.checksum);
            }
        }
        Command::TrainCoarse { data, out, cfg } => {
            let config = cfg.resolve(false)?;
            let corpus = load_split(&data, Split::Train)?;
            info!("config {} corpus {}", config.hash(), corpus.manifest.checksum);
            let model = train_coarse(&config, &corpus)?;
            std::fs::create_dir_all(&out)?;
            model.save(&out.join("coarse.json"))?;
            write_timing(&out, "train-coarse", start)?;
            if let Some(last) = model.coarse_log.last() {
                println!("final coarse loss {:.6}", last.total);
            }
            println!("config_hash {}\ncorpus_checksum {}", config.hash(), corpus.manifest.checksum);
        }
        Command::TrainFine { data, coarse, out, cfg } => {
            let coarse = Model::load(&coarse)?;
            // Widths and module switches come from the coarse checkpoint.
            let mut config = cfg.resolve(true)?;
            config.model = coarse.config.model;
            config.toggles = Toggles { fine_lambda: config.toggles.fine_lambda, ..coarse.config.toggles };
            let corpus = load_split(&data, Split::Train)?;
            let model = train_fine(&config, &corpus, &coarse)?;
            std::fs::create_dir_all(&out)?;
            model.save(&out.join("fine.json"))?;
            write_timing(&out, "train-fine", start)?;
            if let Some(last) = model.fine_log.last() {
                println!("final fine loss {:.6}, mean L1 {:.3} m", last.loss, last.l1);
            }
            println!("config_hash {}\ncorpus_checksum {}", config.hash(), corpus.manifest.checksum);
        }
        Command::Eval { data, split, coarse, fine, out, svg } => {
            let corpus = load_split(&data, split)?;
            let coarse = Model::load(&coarse)?;
            let fine = fine.map(|p| Model::load(&p)).transpose()?;
            let eval = evaluate(&coarse, fine.as_ref(), &corpus)?;
            write_outputs(&out, &eval, svg)?;
            write_timing(&out, "eval", start)?;
            for r in &eval.report.retrieval {
                println!("recall@{} {:.4}", r.k, r.recall);
            }
            if let Some(l1) = eval.report.fine_l1 {
                println!("fine mean L1 {l1:.3} m (center baseline {:.3} m)", eval.report.center_l1);
            }
        }
        Command::Ablate { data, out, cells, seeds, cfg } => {
            let config = cfg.resolve(false)?;
            let train = load_split(&data, Split::Train)?;
            let test = load_split(&data, Split::Test)?;
            let cells = if cells.is_empty() { Cell::default_matrix() } else { cells };
            let report = ablate(&config, &train, &test, &cells, &seeds)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&report)?)?;
            std::fs::write(out.join("ablation.csv"), report.csv())?;
            write_timing(&out, "ablate", start)?;
            print!("{}", report.csv());
        }
        Command::Gradcheck { seed } => {
            let mut failed = false;
            for (name, report) in checks::primitive_checks(seed)? {
                let status = if report.passed() { "ok" } else { "FAIL" };
                failed |= !report.passed();
                println!("{name:<20} {:>10.3e}  {status}", report.max_rel_err());
            }
            for (name, report) in [
                ("coarse loss", checks::coarse_loss_check(seed, GradCheckOptions::default())?),
                ("fine loss", checks::fine_loss_check(seed, GradCheckOptions::default())?),
            ] {
                println!("\n{name}\n{}", report.table());
                failed |= !report.passed();
            }
            if failed {
                return Err(Error::Numeric("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\n[coarse]\nepochs = 3\nbatch_size = 8\nlr = 0.001\n").unwrap();
        let args = ConfigArgs { config: Some(path), epochs: Some(5), no_fae: true, ..Default::default() };
        let c = args.resolve(false).unwrap();
        assert_eq!(c.coarse.epochs, 5);
        assert_eq!(c.coarse.batch_size, 8);
        assert!(!c.toggles.fae);
        let bad = ConfigArgs { losses: vec!["l2".into()], ..Default::default() };
        assert!(matches!(bad.resolve(false), Err(Error::Config(_))));
    }

    #[test]
    fn loss_subset_flag() {
        let args = ConfigArgs { losses: vec!["global".into(), "io".into()], ..Default::default() };
        let c = args.resolve(false).unwrap();
        assert!(c.toggles.loss_global && !c.toggles.loss_spatial && c.toggles.loss_instance);
    }
}
