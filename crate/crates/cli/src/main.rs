use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vvit::checkpoint;
use vvit::data::{self, Dataset, GeneratorConfig, Split};
use vvit::metrics::CalibrationReport;
use vvit::model::{attention_map, Eye};
use vvit::train::{self, Ablation, TrainConfig, DEFAULT_ABLATIONS};
use vvit::{Error, KvConfig, Rng, VVit, VVitConfig};

const OUT_DIR_ENV: &str = "VVIT_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "vvit-out";

#[derive(Parser)]
#[command(name = "vvit", version, about = "Binocular vision transformer with dropout voting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic binocular dataset as JSON lines.
    GenData {
        /// Generator config (key = value lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in generator settings used as the base for --config.
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        /// Output file [default: $VVIT_OUT_DIR/dataset.jsonl].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint.json, loss.csv and split.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model config (key = value lines); defaults when omitted.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Training config (key = value lines); defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Overrides the training config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes metrics.json, reliability.csv and roc.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split manifest from `train`; restricts evaluation to --part.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::Test, requires = "split")]
        part: Part,
        /// Number of equal-width calibration bins.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Decision threshold for recall, F1 and accuracy.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Seed of the per-sample voting streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
        out: PathBuf,
    },
    /// Train and evaluate each ablation configuration over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds; each sets the split and initialization.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Run only this B,V,M triple (e.g. 1,1,0); repeatable.
        #[arg(long = "only", value_parser = parse_triple)]
        only: Vec<Ablation>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Output directory for ablation.csv.
        #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
        out: PathBuf,
    },
    /// Print a metrics JSON or ablation CSV as an aligned table.
    Report {
        /// metrics.json from `eval` or ablation.csv from `ablate`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Export a fusion block's [CLS] attention over one eye's patches.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: String,
        /// Fusion block index, from 0.
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, value_enum, default_value_t = EyeArg::Target)]
        eye: EyeArg,
        /// Grid CSV path [default: $VVIT_OUT_DIR/attention_<id>_b<block>.csv];
        /// a JSON sidecar with the disc position is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum EyeArg {
    Target,
    Fellow,
}

fn parse_triple(s: &str) -> Result<Ablation, String> {
    let bits: Vec<&str> = s.split(',').map(str::trim).collect();
    let bit = |b: &str| match b {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("`{other}` is not 0 or 1")),
    };
    match bits.as_slice() {
        [b, v, m] => Ok((bit(b)?, bit(v)?, bit(m)?)),
        _ => Err(format!("expected B,V,M like 1,0,1, got `{s}`")),
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn load_or_default<C: KvConfig>(path: Option<&Path>) -> vvit::Result<C> {
    match path {
        Some(p) => C::read_kv(p),
        None => Ok(C::default()),
    }
}

fn write_file(path: &Path, body: &str) -> vvit::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn gen_data(config: Option<&Path>, preset: Preset, out: Option<PathBuf>, seed: Option<u64>) -> vvit::Result<()> {
    let mut cfg = match preset {
        Preset::Default => GeneratorConfig::default(),
        Preset::External => GeneratorConfig::external(),
    };
    if let Some(p) = config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg = apply_kv(cfg, &text)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = data::generate_dataset(&cfg)?;
    let out = out.unwrap_or_else(|| default_out_dir().join("dataset.jsonl"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    data::write_dataset(&ds, &out)?;
    print!("{}", dataset_summary(&ds, &out));
    Ok(())
}

/// Applies the keys present in a key-value file on top of `base`.
fn apply_kv<C: KvConfig>(mut base: C, text: &str) -> vvit::Result<C> {
    let parsed = C::from_kv_str(text)?;
    let present: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .map(|(k, _)| k.trim())
        .collect();
    for (key, value) in parsed.entries() {
        if present.contains(&key) {
            base.set(key, &value)?;
        }
    }
    base.validate()?;
    Ok(base)
}

fn dataset_summary(ds: &Dataset, path: &Path) -> String {
    let mut s = String::new();
    writeln!(s, "wrote {} samples to {}", ds.len(), path.display()).unwrap();
    if ds.is_empty() {
        return s;
    }
    let split = ds.samples.iter().filter(|x| x.y_vote > 0.0 && x.y_vote < 1.0).count();
    writeln!(s, "positive rate: {:.4}", ds.positive_rate()).unwrap();
    writeln!(s, "rater disagreement: {:.4}", split as f64 / ds.len() as f64).unwrap();
    let hist: Vec<String> = ds.rater_histogram().iter().map(|(k, n)| format!("{k}:{n}")).collect();
    writeln!(s, "raters per sample: {}", hist.join(" ")).unwrap();
    s
}

fn train_cmd(
    data_path: &Path,
    model_config: Option<&Path>,
    train_config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> vvit::Result<()> {
    let model_cfg: VVitConfig = load_or_default(model_config)?;
    let mut cfg: TrainConfig = load_or_default(train_config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = data::read_dataset(data_path)?;
    let parts = data::split(&ds, cfg.train_frac, cfg.val_frac, cfg.seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join("checkpoint.json");
    cfg.checkpoint = ckpt.display().to_string();
    let outcome = train::train::<f64>(&model_cfg, &cfg, &ds.subset(&parts.train)?, &ds.subset(&parts.val)?)?;
    write_file(&out.join("loss.csv"), &outcome.loss_csv())?;
    let manifest = serde_json::to_string_pretty(&parts).expect("plain struct") + "\n";
    write_file(&out.join("split.json"), &manifest)?;
    println!(
        "trained {} epochs on {} samples; best epoch {} (val Brier {})",
        cfg.epochs,
        parts.train.len(),
        outcome.best_epoch,
        outcome.best_val_brier.map_or("n/a".into(), |b| format!("{b:.6}"))
    );
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn read_split(path: &Path) -> vvit::Result<Split> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("split manifest: {e}"),
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ckpt: &Path,
    data_path: &Path,
    split: Option<&Path>,
    part: Part,
    bins: usize,
    threshold: f64,
    seed: u64,
    out: &Path,
) -> vvit::Result<()> {
    let model: VVit = checkpoint::load(ckpt)?;
    let mut ds = data::read_dataset(data_path)?;
    if let Some(p) = split {
        let s = read_split(p)?;
        let ids = match part {
            Part::Train => s.train,
            Part::Val => s.val,
            Part::Test => s.test,
        };
        ds = ds.subset(&ids)?;
    }
    let records = train::evaluate(&model, &ds, seed, 32)?;
    let report = CalibrationReport::evaluate(&records, bins, threshold)?;
    report.write(out)?;
    print!("{}", report.to_json());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    data_path: &Path,
    seeds: &[u64],
    only: &[Ablation],
    model_config: Option<&Path>,
    train_config: Option<&Path>,
    bins: usize,
    threshold: f64,
    out: &Path,
) -> vvit::Result<()> {
    let base: VVitConfig = load_or_default(model_config)?;
    let cfg: TrainConfig = load_or_default(train_config)?;
    let ds = data::read_dataset(data_path)?;
    let spec: Vec<Ablation> = if only.is_empty() { DEFAULT_ABLATIONS.to_vec() } else { only.to_vec() };
    let rows = train::run_ablation::<f64>(&spec, seeds, &base, &cfg, &ds, bins, threshold)?;
    let csv = train::ablation_csv(&rows);
    write_file(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn report_cmd(input: &Path) -> vvit::Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let table: Vec<Vec<String>> = if text.trim_start().starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Input("metrics file is not a JSON object".into()))?;
        let mut rows = vec![vec!["metric".to_string(), "value".to_string()]];
        rows.extend(obj.iter().map(|(k, v)| vec![k.clone(), v.to_string()]));
        rows
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| match c.parse::<f64>() {
                        Ok(x) if c.contains('.') => format!("{x:.4}"),
                        _ => c.to_string(),
                    })
                    .collect()
            })
            .collect()
    };
    print!("{}", format_table(&table));
    Ok(())
}

fn format_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, v)| format!("{v:>w$}", w = width[c])).collect();
        writeln!(s, "{}", cells.join("  ").trim_end()).unwrap();
    }
    s
}

fn attn_cmd(ckpt: &Path, data_path: &Path, id: &str, block: usize, eye: EyeArg, out: Option<PathBuf>) -> vvit::Result<()> {
    let model: VVit = checkpoint::load(ckpt)?;
    let ds = data::read_dataset(data_path)?;
    let sample = ds
        .get(id)
        .ok_or_else(|| Error::Input(format!("no sample with id `{id}`")))?;
    let one = ds.subset(&[id.to_string()])?;
    let batch = data::Batch::new(one.image, &[sample], &model.age_scaler)?;
    let fellow = model.config.use_binocular.then_some(&batch.fellow);
    let output = model.forward(&batch.target, fellow, &mut Rng::new(0), false)?;
    let (eye, disc) = match eye {
        EyeArg::Target => (Eye::Target, sample.target_disc),
        EyeArg::Fellow => (Eye::Fellow, sample.fellow_disc),
    };
    let grid = attention_map(&output, 0, block, eye)?;
    let (gh, gw) = output.grid;
    let mut csv = String::new();
    for r in 0..gh {
        let row: Vec<String> = grid[r * gw..][..gw].iter().map(f64::to_string).collect();
        writeln!(csv, "{}", row.join(",")).unwrap();
    }
    let out = out.unwrap_or_else(|| default_out_dir().join(format!("attention_{id}_b{block}.csv")));
    write_file(&out, &csv)?;
    let argmax = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let patch = model.config.patch_size;
    let sidecar = serde_json::json!({
        "sample_id": id,
        "block": block,
        "eye": match eye { Eye::Target => "target", Eye::Fellow => "fellow" },
        "grid_height": gh,
        "grid_width": gw,
        "patch_size": patch,
        "disc": disc,
        "argmax_row": argmax / gw,
        "argmax_col": argmax % gw,
        "argmax_in_disc": disc.overlaps_patch(argmax / gw, argmax % gw, patch),
    });
    let side = out.with_extension("json");
    write_file(&side, &(serde_json::to_string_pretty(&sidecar).expect("json value") + "\n"))?;
    print!("{csv}");
    println!(
        "disc centre ({:.3}, {:.3}) radius {:.3}; wrote {} and {}",
        disc.cx,
        disc.cy,
        disc.radius,
        out.display(),
        side.display()
    );
    Ok(())
}

fn run(cli: Cli) -> vvit::Result<()> {
    match cli.command {
        Command::GenData { config, preset, out, seed } => gen_data(config.as_deref(), preset, out, seed),
        Command::Train { data, model_config, train_config, seed, out } => {
            train_cmd(&data, model_config.as_deref(), train_config.as_deref(), seed, &out)
        }
        Command::Eval { checkpoint, data, split, part, bins, threshold, seed, out } => {
            eval_cmd(&checkpoint, &data, split.as_deref(), part, bins, threshold, seed, &out)
        }
        Command::Ablate { data, seeds, only, model_config, train_config, bins, threshold, out } => ablate_cmd(
            &data,
            &seeds,
            &only,
            model_config.as_deref(),
            train_config.as_deref(),
            bins,
            threshold,
            &out,
        ),
        Command::Report { input } => report_cmd(&input),
        Command::Attn { checkpoint, data, sample_id, block, eye, out } => {
            attn_cmd(&checkpoint, &data, &sample_id, block, eye, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
