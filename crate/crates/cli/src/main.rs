use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use npad_core::bundle::{load_bundle, save_bundle};
use npad_core::inference::{preview_pgm, AnomalyMap};
use npad_core::neighbor_sim::{BcForm, Weighting};
use npad_core::pipeline::{
    evaluate, feature_scale, fit_manifest, load_test_images, run_ablation, score_all, test_truth, train_entries,
    EvalCurves, ScoreOptions, ScoredImage,
};
use npad_core::synth::{generate, SynthParams};
use npad_core::tensor_store::{load_manifest, read_tensor, write_tensor, Tensor};
use npad_core::{FeatureMap, RunConfig};

#[derive(Parser)]
#[command(name = "npad", version, about = "Neighboring-pixel anomaly detection over feature-map tensors")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model bundle on the training entries of a manifest.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first N training entries.
        #[arg(long)]
        limit_train: Option<usize>,
        /// Also write the neighbor weight field as JSON.
        #[arg(long)]
        dump_weights: Option<PathBuf>,
        #[command(flatten)]
        overrides: FitOverrides,
        #[command(flatten)]
        score: ScoreOverrides,
    },
    /// Score the test entries of a manifest with a fitted bundle.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: ScoreOverrides,
    },
    /// Compute AUROC and PRO metrics for a scores directory.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write ROC and PRO curves as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
        #[arg(long)]
        fpr_cap: Option<f64>,
        #[arg(long)]
        pro_thresholds: Option<usize>,
    },
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with generator parameters; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test_nominal: Option<usize>,
        #[arg(long)]
        n_test_anomalous: Option<usize>,
        #[arg(long)]
        jitter: Option<usize>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the module, weighting and top-k ablations on a dataset.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory containing manifest.json.
        #[arg(long, required_unless_present = "manifest")]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "data")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit_train: Option<usize>,
        #[command(flatten)]
        overrides: FitOverrides,
        #[command(flatten)]
        score: ScoreOverrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Similarity,
    Uniform,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum BcFormArg {
    Simplified,
    Full,
}

#[derive(Args, Default)]
struct FitOverrides {
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long, value_enum)]
    bc_form: Option<BcFormArg>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    /// Seed for `--weighting random`.
    #[arg(long)]
    weighting_seed: Option<u64>,
    /// Count |x| > 0 instead of x > 0 when reducing channels.
    #[arg(long)]
    nonzero_abs: bool,
    /// Use nearest pool members instead of cluster means as centroids.
    #[arg(long)]
    medoid: bool,
    #[arg(long)]
    memory_budget_mb: Option<f64>,
}

#[derive(Args, Default)]
struct ScoreOverrides {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    k_top: Option<usize>,
    /// Shift feature maps directly when the manifest has no shift variants.
    #[arg(long)]
    feature_shift: bool,
    #[arg(long)]
    smooth_sigma: Option<f64>,
}

impl FitOverrides {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(p, gamma, epsilon, d, ratio, seed, max_points, memory_budget_mb);
        if let Some(f) = self.bc_form {
            c.bc_form = match f {
                BcFormArg::Simplified => BcForm::Simplified,
                BcFormArg::Full => BcForm::Full,
            };
        }
        match (self.weighting, self.weighting_seed) {
            (Some(WeightingArg::Similarity), None) => c.weighting = Weighting::Similarity,
            (Some(WeightingArg::Uniform), None) => c.weighting = Weighting::Uniform,
            (Some(WeightingArg::Random), seed) => c.weighting = Weighting::Random { seed: seed.unwrap_or(c.seed) },
            (None, None) => {}
            _ => bail!("--weighting-seed only applies to --weighting random"),
        }
        c.nonzero_abs |= self.nonzero_abs;
        c.medoid |= self.medoid;
        Ok(())
    }
}

impl ScoreOverrides {
    fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(q, r, k_top, smooth_sigma);
        c.feature_shift |= self.feature_shift;
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}

/// Image ids become file names, so they must be plain.
fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    ensure!(ok, "image id {id:?} must use only letters, digits, '_', '-' and '.'");
    Ok(())
}

fn cmd_fit(
    config: Option<&Path>,
    manifest: &Path,
    out: &Path,
    limit_train: Option<usize>,
    dump_weights: Option<&Path>,
    overrides: &FitOverrides,
    score: &ScoreOverrides,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    overrides.apply(&mut cfg)?;
    score.apply(&mut cfg);
    let manifest = load_manifest(manifest)?;
    let fitted = fit_manifest(&manifest, &cfg, limit_train)?;
    let hash = save_bundle(&fitted.bundle, out)?;
    if let Some(path) = dump_weights {
        write_json(path, &fitted.weights)?;
    }
    println!("bundle {} ({hash})", out.display());
    Ok(())
}

fn cmd_score(bundle_dir: &Path, manifest: &Path, out: &Path, overrides: &ScoreOverrides) -> Result<()> {
    let mut bundle = load_bundle(bundle_dir)?;
    overrides.apply(&mut bundle.config);
    bundle.check()?;
    let manifest = load_manifest(manifest)?;
    let (h, w, _) = bundle.dims();
    ensure!(
        manifest.feature_hw == (h, w) && manifest.channels == bundle.selection.source_channels(),
        "manifest tensors are {}x{}x{}, bundle expects {h}x{w}x{}",
        manifest.feature_hw.0,
        manifest.feature_hw.1,
        manifest.channels,
        bundle.selection.source_channels()
    );
    let images = load_test_images(&manifest)?;
    ensure!(!images.is_empty(), "manifest has no test entries");
    for img in &images {
        check_id(&img.id)?;
    }
    let options = ScoreOptions::from_config(&bundle.config);
    let scored = score_all(&bundle, &images, feature_scale(&manifest), &options)?;

    for sub in ["maps", "previews"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    let mut csv = csv::Writer::from_path(out.join("scores.csv"))?;
    csv.write_record(["image_id", "label", "score"])?;
    for s in &scored {
        csv.write_record([s.id.clone(), s.label.to_string(), s.score.to_string()])?;
        let t = Tensor::from_f64(vec![s.map.height(), s.map.width()], s.map.values().to_vec())?;
        write_tensor(out.join("maps").join(format!("{}.npad", s.id)), &t)?;
        let pgm = out.join("previews").join(format!("{}.pgm", s.id));
        fs::write(&pgm, preview_pgm(&s.map)).with_context(|| format!("writing {}", pgm.display()))?;
    }
    csv.flush()?;
    write_json(&out.join("config.json"), &bundle.config)?;
    println!("scored {} images into {}", scored.len(), out.display());
    Ok(())
}

fn read_scores(dir: &Path) -> Result<Vec<(String, u8, f64)>> {
    let path = dir.join("scores.csv");
    let mut reader = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        ensure!(rec.len() == 3, "{}: expected image_id,label,score", path.display());
        let label: u8 = rec[1].parse().with_context(|| format!("bad label in {}", path.display()))?;
        let score: f64 = rec[2].parse().with_context(|| format!("bad score in {}", path.display()))?;
        rows.push((rec[0].to_string(), label, score));
    }
    Ok(rows)
}

fn cmd_evaluate(
    scores: &Path,
    manifest: &Path,
    out: &Path,
    curves: Option<&Path>,
    fpr_cap: Option<f64>,
    pro_thresholds: Option<usize>,
) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let truth = test_truth(&manifest)?;
    let echo: Option<RunConfig> = {
        let p = scores.join("config.json");
        p.is_file().then(|| read_json(&p)).transpose()?
    };
    let defaults = echo.unwrap_or_default();
    let fpr_cap = fpr_cap.unwrap_or(defaults.fpr_cap);
    let pro_thresholds = pro_thresholds.unwrap_or(defaults.pro_thresholds);

    let rows = read_scores(scores)?;
    let mut by_id: HashMap<String, (u8, f64)> = HashMap::new();
    for (id, label, score) in rows {
        ensure!(by_id.insert(id.clone(), (label, score)).is_none(), "image id {id} appears twice in the scores");
    }
    let mut scored = Vec::with_capacity(truth.len());
    let mut masks = Vec::with_capacity(truth.len());
    for (id, label, mask) in truth {
        let (got, score) = by_id
            .remove(&id)
            .with_context(|| format!("image id {id} from the manifest has no score"))?;
        ensure!(got == label, "image {id}: scores say label {got}, manifest says {label}");
        check_id(&id)?;
        let t = read_tensor(scores.join("maps").join(format!("{id}.npad")))?;
        ensure!(t.shape().len() == 2, "anomaly map of {id} must be 2-d");
        let map = AnomalyMap::new(t.shape()[0], t.shape()[1], t.to_f64_vec())?;
        scored.push(ScoredImage { id, label, score, map });
        masks.push(mask);
    }
    if let Some(id) = by_id.keys().min() {
        bail!("image id {id} in the scores is not a test image of the manifest");
    }
    let (report, curve_data) = evaluate(&scored, &masks, manifest.image_hw, fpr_cap, pro_thresholds)?;
    write_json(out, &report)?;
    if let Some(path) = curves {
        write_curves(path, &curve_data)?;
    }
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "image AUROC {}  pixel AUROC {}  PRO {}",
        show(report.image_auroc),
        show(report.pixel_auroc),
        show(report.pro_score)
    );
    Ok(())
}

fn write_curves(path: &Path, curves: &EvalCurves) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve", "threshold", "x", "y"])?;
    if let Some(roc) = &curves.image_roc {
        for ((t, x), y) in roc.thresholds.iter().zip(&roc.fpr).zip(&roc.tpr) {
            w.write_record(["image_roc".to_string(), t.to_string(), x.to_string(), y.to_string()])?;
        }
    }
    if let Some(pro) = &curves.pro {
        for ((t, x), y) in pro.thresholds.iter().zip(&pro.fpr).zip(&pro.pro) {
            w.write_record(["pro".to_string(), t.to_string(), x.to_string(), y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    config: Option<&Path>,
    n_train: Option<usize>,
    n_test_nominal: Option<usize>,
    n_test_anomalous: Option<usize>,
    jitter: Option<usize>,
    amplitude: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut params: SynthParams = match config {
        Some(p) => read_json(p)?,
        None => SynthParams::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = $f { params.$f = v; })* };
    }
    set!(n_train, n_test_nominal, n_test_anomalous, jitter, amplitude, seed);
    let ds = generate(&params)?;
    ds.write(out)?;
    println!(
        "wrote {} training and {} test maps to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    config: Option<&Path>,
    manifest_path: &Path,
    out: &Path,
    limit_train: Option<usize>,
    overrides: &FitOverrides,
    score: &ScoreOverrides,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    overrides.apply(&mut cfg)?;
    score.apply(&mut cfg);
    let manifest = load_manifest(manifest_path)?;
    let train = train_entries(&manifest, limit_train)?
        .iter()
        .map(|e| FeatureMap::load(&e.tensor))
        .collect::<npad_core::Result<Vec<_>>>()?;
    let test = load_test_images(&manifest)?;
    info!("ablation over {} training and {} test images", train.len(), test.len());
    let rows = run_ablation(&train, &test, manifest.image_hw, feature_scale(&manifest), &cfg)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["table", "name", "image_auroc", "pixel_auroc"])?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &rows {
        w.write_record([r.table.clone(), r.name.clone(), cell(r.image_auroc), cell(r.pixel_auroc)])?;
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        println!("{:<10} {:<14} image {:>6}  pixel {:>6}", r.table, r.name, show(r.image_auroc), show(r.pixel_auroc));
    }
    w.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Fit {
            config,
            manifest,
            out,
            limit_train,
            dump_weights,
            overrides,
            score,
        } => cmd_fit(
            config.as_deref(),
            manifest,
            out,
            *limit_train,
            dump_weights.as_deref(),
            overrides,
            score,
        ),
        Command::Score {
            bundle,
            manifest,
            out,
            overrides,
        } => cmd_score(bundle, manifest, out, overrides),
        Command::Evaluate {
            scores,
            manifest,
            out,
            curves,
            fpr_cap,
            pro_thresholds,
        } => cmd_evaluate(scores, manifest, out, curves.as_deref(), *fpr_cap, *pro_thresholds),
        Command::Synth {
            out,
            config,
            n_train,
            n_test_nominal,
            n_test_anomalous,
            jitter,
            amplitude,
            seed,
        } => cmd_synth(
            out,
            config.as_deref(),
            *n_train,
            *n_test_nominal,
            *n_test_anomalous,
            *jitter,
            *amplitude,
            *seed,
        ),
        Command::Ablate {
            config,
            data,
            manifest,
            out,
            limit_train,
            overrides,
            score,
        } => {
            let manifest = match (data, manifest) {
                (Some(d), _) => d.join("manifest.json"),
                (None, Some(m)) => m.clone(),
                (None, None) => bail!("either --data or --manifest is required"),
            };
            cmd_ablate(config.as_deref(), &manifest, out, *limit_train, overrides, score)
        }
    }
}
