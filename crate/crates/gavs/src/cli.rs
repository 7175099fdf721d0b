//! `gavs` subcommands.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gavs_core::data::{generate, DatasetSpec};
use gavs_core::gradcheck::{model_suite, op_suite, SuiteEntry};
use gavs_core::split::make_fewshot_split;
use gavs_core::{FusionMode, GavsConfig, TuningStrategy};

use crate::ablation;
use crate::config::{fit_to_dataset, parse_seed, resolve, Overrides, SEED_ENV};
use crate::dataset::{self, load_scenes, read_json, read_manifest, Manifest, MANIFEST};
use crate::error::{Error, Result};
use crate::pipeline::{self, run_meta, Evaluation};

#[derive(Debug, Parser)]
#[command(name = "gavs", version, about = "Audio-visual segmentation with audio prompts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sounding-scene dataset.
    GenData(GenDataArgs),
    /// Write zero- or few-shot train/test manifests.
    Split(SplitArgs),
    /// Pretrain, tune and save a model.
    Train(TrainArgs),
    /// Score a trained model or a directory of predicted masks.
    Eval(EvalArgs),
    /// Run the ten-row ablation matrix.
    Ablate(AblateArgs),
    /// Check autodiff against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON dataset spec; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_scenes: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub mask_size: Option<usize>,
    /// Comma-separated anchor classes.
    #[arg(long, value_delimiter = ',')]
    pub anchor_classes: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated held-out classes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub unseen: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<TuningStrategy>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<FusionMode>,
    #[arg(long)]
    pub sap: Option<bool>,
    #[arg(long)]
    pub visual_adapters: Option<bool>,
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Fail on the first NaN or infinity in a forward pass.
    #[arg(long)]
    pub check_finite: bool,
}

fn parse_strategy(s: &str) -> std::result::Result<TuningStrategy, String> {
    TuningStrategy::parse(s).ok_or_else(|| {
        let names: Vec<_> = TuningStrategy::ALL.iter().map(|t| t.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_mode(s: &str) -> std::result::Result<FusionMode, String> {
    FusionMode::parse(s).ok_or_else(|| "expected audio_prompt or av_fusion".to_string())
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            steps: self.steps,
            pretrain_steps: self.pretrain_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            lambda: self.lambda,
            margin: self.margin,
            strategy: self.strategy,
            mode: self.mode,
            sap: self.sap,
            visual_adapters: self.visual_adapters,
            beta2: self.beta2,
            check_finite: self.check_finite,
        }
    }

    fn resolve(&self) -> Result<GavsConfig> {
        let env = std::env::var(SEED_ENV).ok();
        resolve(self.config.as_deref(), env.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest of training scenes; defaults to the dataset's own.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run directory written by `train`.
    #[arg(long, conflicts_with = "pred_dir", required_unless_present = "pred_dir")]
    pub run: Option<PathBuf>,
    /// Score `<id>.pgm` masks from this directory instead of a model.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Pair every scene with another scene's audio, drawn with this seed.
    #[arg(long)]
    pub shuffle_audio: Option<u64>,
    /// Recorded in the report metadata.
    #[arg(long)]
    pub shots: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Row letters to run.
    #[arg(long, default_value = "abcdefghij")]
    pub rows: String,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn manifest_at(data: &Path, manifest: Option<&Path>) -> Result<Manifest> {
    match manifest {
        Some(p) => read_manifest(p),
        None => read_manifest(&data.join(MANIFEST)),
    }
}

fn env_seed() -> Result<Option<u64>> {
    std::env::var(SEED_ENV).ok().map(|raw| parse_seed(&raw)).transpose()
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed.or(env_seed()?) {
        spec.seed = s;
    }
    spec.num_scenes = a.num_scenes.unwrap_or(spec.num_scenes);
    spec.num_classes = a.num_classes.unwrap_or(spec.num_classes);
    spec.image_size = a.image_size.unwrap_or(spec.image_size);
    spec.mask_size = a.mask_size.unwrap_or(spec.mask_size);
    if a.anchor_classes.is_some() {
        spec.anchor_classes = a.anchor_classes.clone();
    }
    let samples = generate(&spec)?;
    dataset::write_dataset(&a.out, &spec, &samples)?;
    log::info!("wrote {} scenes to {}", samples.len(), a.out.display());
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let manifest = read_manifest(&a.data.join(MANIFEST))?;
    let seed = a.seed.or(env_seed()?).unwrap_or(manifest.dataset.seed);
    let unseen: BTreeSet<usize> = a.unseen.iter().copied().collect();
    let s = make_fewshot_split(&manifest.metas(), manifest.dataset.num_classes, &unseen, a.shots, seed)?;
    dataset::write_split(&a.out, &manifest, &s)?;
    log::info!("{} train / {} test scenes", s.train.len(), s.test.len());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let manifest = manifest_at(&a.data, a.manifest.as_deref())?;
    let mut cfg = a.config.resolve()?;
    fit_to_dataset(&mut cfg, &manifest.dataset)?;
    let scenes = load_scenes(&a.data, &manifest)?;
    let outcome = pipeline::train(&cfg, &manifest.dataset, &scenes, None)?;
    pipeline::write_run(&a.out, &outcome)?;
    if let Some(last) = outcome.log.last() {
        log::info!("final loss {:.5}", last.total);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = manifest_at(&a.data, a.manifest.as_deref())?;
    let scenes = load_scenes(&a.data, &manifest)?;
    let evaluation = match (&a.run, &a.pred_dir) {
        (Some(run), _) => {
            let mut model = pipeline::load_run(run)?;
            if let Some(b) = a.beta2 {
                model.cfg.eval.beta2 = b;
            }
            pipeline::evaluate(&model, &scenes, a.shuffle_audio, run_meta(&model.cfg, a.shots))?
        }
        (None, Some(dir)) => {
            let probs = pipeline::read_predictions(dir, &scenes)?;
            let beta2 = a.beta2.unwrap_or(GavsConfig::default().eval.beta2);
            let meta = gavs_core::metrics::RunMeta {
                shots: a.shots,
                ..Default::default()
            };
            let report = pipeline::score(&scenes, &probs, beta2, meta)?;
            Evaluation { report, probs }
        }
        (None, None) => return Err(Error::Config("eval needs --run or --pred-dir".into())),
    };
    pipeline::write_evaluation(&a.out, &scenes, &evaluation)?;
    let r = &evaluation.report;
    println!("miou {:.4}  fscore {:.4}  ciou {:.4}  auc {:.4}", r.miou, r.fscore, r.ciou, r.auc);
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let rows = ablation::select_rows(&a.rows)?;
    let train_manifest = manifest_at(&a.data, a.train_manifest.as_deref())?;
    let test_manifest = read_manifest(&a.test_manifest)?;
    let mut cfg = a.config.resolve()?;
    fit_to_dataset(&mut cfg, &train_manifest.dataset)?;
    let train = load_scenes(&a.data, &train_manifest)?;
    let test = load_scenes(&a.data, &test_manifest)?;
    let cells = ablation::run_ablation(&cfg, &train_manifest.dataset, &train, &test, &rows, |c| {
        log::info!("row {} ({}): miou {:?}", c.row, c.method, c.miou);
    })?;
    ablation::write_csv(&a.out, &cells)?;
    let failed = cells.iter().filter(|c| !c.error.is_empty()).count();
    if failed > 0 {
        return Err(Error::Config(format!("{failed} ablation cell(s) failed; see {}", a.out.display())));
    }
    Ok(())
}

fn print_entry(e: &SuiteEntry, tol: f64) -> bool {
    let ok = e.report.passes(tol);
    let worst = e.report.worst.as_ref().map_or(String::new(), |(n, i)| format!("  worst {n}[{i}]"));
    println!(
        "{:<4} {:<24} max rel err {:.3e} over {} coords{worst}",
        if ok { "ok" } else { "FAIL" },
        e.name,
        e.report.max_rel_error,
        e.report.coordinates
    );
    ok
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut failed = 0;
    for e in op_suite(a.seed)?.iter().chain(&model_suite(a.seed)?) {
        failed += usize::from(!print_entry(e, a.tol));
    }
    if failed > 0 {
        return Err(Error::Config(format!("{failed} gradient check(s) above {:e}", a.tol)));
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Parses `args` and runs the subcommand, returning the process exit code:
/// 2 for usage errors, 1 for failed runs or checks.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
