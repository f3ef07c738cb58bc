//! Command-line entry point: config loading, the train / eval / sample /
//! dn-sweep / verify subcommands, the binary checkpoint format, metrics
//! and report emission, and minimal SVG plots.

use crate::decoding::{self};
use crate::error::{Error, Result};
use crate::likelihood;
use crate::model::{ModelConfig, ModelParams, ParamRole};
use crate::oracle::{self, EnumerationBudget, ScheduleFamily};
use crate::rltrain::{self, Estimator, TrainerConfig};
use crate::tasks::Task;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// A complete, reproducible run description. A run is fully determined by
/// this config plus the seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub task: String,
    pub prompt_len: usize,
    pub completion_len: usize,
    pub out_dir: String,
    /// Emit a checkpoint every this many outer steps (0 = only final).
    #[serde(default)]
    pub checkpoint_interval: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {}", path.display(), e)))?;
        // environment overrides are limited to output dir and seed
        if let Ok(out) = std::env::var("MASKRL_OUT") {
            cfg.out_dir = out;
        }
        if let Ok(seed) = std::env::var("MASKRL_SEED") {
            cfg.trainer.seed = seed
                .parse()
                .map_err(|_| Error::Config("MASKRL_SEED must be an integer".into()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        let task = Task::by_name(&self.task, self.prompt_len, self.completion_len)?;
        if self.model.max_positions < self.prompt_len + 2 * self.completion_len {
            return Err(Error::Config(
                "max_positions must cover prompt_len + 2*completion_len".into(),
            ));
        }
        if self.model.vocab_size < task.min_value_vocab + 1 {
            return Err(Error::Config(format!(
                "task '{}' needs vocab_size >= {}",
                self.task,
                task.min_value_vocab + 1
            )));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        Task::by_name(&self.task, self.prompt_len, self.completion_len)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"D2CK";
const CKPT_VERSION: u32 = 1;

/// Serialize parameters with their config into the binary checkpoint
/// format: magic, version, length-prefixed config blob, then per
/// parameter the name, rank, dims, and little-endian f64 data.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let blob = serde_json::to_string(cfg)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {}", e)))?;
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(blob.as_bytes());
    for (name, t) in &params.entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let buf = fs::read(path)?;
    let mut at = 0usize;
    let take = |buf: &[u8], at: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *at + n > buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = buf[*at..*at + n].to_vec();
        *at += n;
        Ok(out)
    };
    if take(&buf, &mut at, 4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", version)));
    }
    let blob_len = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
    let blob = String::from_utf8(take(&buf, &mut at, blob_len)?)
        .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
    let cfg: ModelConfig = serde_json::from_str(&blob)
        .map_err(|e| Error::Checkpoint(format!("config blob: {}", e)))?;
    let mut entries = Vec::new();
    while at < buf.len() {
        let name_len =
            u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&buf, &mut at, name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&buf, &mut at, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&buf, &mut at, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, crate::diffmath::Tensor::new(shape, data)?));
    }
    Ok((cfg, ModelParams { role: ParamRole::Policy, entries }))
}

#[derive(Parser)]
#[command(name = "maskrl", about = "desk-scale RL workbench for masked diffusion policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the run config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load instead of fresh parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sample / draw count where applicable.
    #[arg(long)]
    samples: Option<usize>,
    /// Overrides the config estimator: full, stepmerge:N, or anyorder.
    #[arg(long)]
    estimator: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run RL training and emit metrics + checkpoints.
    Train(CommonArgs),
    /// Mean reward of samples from a checkpoint.
    Eval(CommonArgs),
    /// Emit trajectories as JSON lines.
    Sample(CommonArgs),
    /// Sweep the merge gap over segment counts; CSV + SVG.
    DnSweep(CommonArgs),
    /// Run the brute-force verification suite.
    Verify(CommonArgs),
}

fn parse_estimator(s: &str) -> Result<Estimator> {
    match s {
        "full" => Ok(Estimator::Full),
        "anyorder" => Ok(Estimator::AnyOrder),
        other => {
            if let Some(n) = other.strip_prefix("stepmerge:") {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad estimator '{}'", other)))?;
                Ok(Estimator::StepMerge(n))
            } else {
                Err(Error::Config(format!(
                    "estimator '{}' not recognized; use full, stepmerge:N, or anyorder",
                    other
                )))
            }
        }
    }
}

fn load_run(args: &CommonArgs) -> Result<RunConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(est) = &args.estimator {
        cfg.trainer.estimator = parse_estimator(est)?;
        cfg.trainer.validate()?;
    }
    Ok(cfg)
}

fn params_for(cfg: &RunConfig, args: &CommonArgs) -> Result<ModelParams> {
    match &args.checkpoint {
        Some(path) => {
            let (ck_cfg, params) = load_checkpoint(path)?;
            if ck_cfg != cfg.model {
                return Err(Error::Checkpoint(
                    "checkpoint model config disagrees with the run config".into(),
                ));
            }
            Ok(params)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
            Ok(ModelParams::init(&cfg.model, &mut rng))
        }
    }
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let task = cfg.task()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let out = PathBuf::from(&cfg.out_dir);
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)?;
    let interval = cfg.checkpoint_interval;
    let model_cfg = cfg.model.clone();
    let out_ck = out.clone();
    let init = params_for(&cfg, args)?;
    let result = rltrain::train_with(
        &cfg.model,
        &cfg.trainer,
        &task,
        init,
        |record, params| {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::Config(format!("metrics serialization: {}", e)))?;
            writeln!(metrics_file, "{}", line)?;
            if interval > 0 && record.step % interval == 0 {
                save_checkpoint(
                    &out_ck.join(format!("step{:06}.d2ck", record.step)),
                    &model_cfg,
                    params,
                )?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&out.join("final.d2ck"), &cfg.model, &result.params)?;
    write_reward_plot(&out.join("reward.svg"), &result.metrics)?;
    println!(
        "trained {} steps, {} FLOPs, final mean reward {:.4}",
        result.metrics.len(),
        result.total_flops,
        result.metrics.last().map(|m| m.mean_reward).unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let task = cfg.task()?;
    let params = params_for(&cfg, args)?;
    let n = args.samples.unwrap_or(64);
    let mean =
        rltrain::evaluate(&params, &cfg.model, &task, &cfg.trainer, n, cfg.trainer.seed)?;
    println!(
        "{}",
        serde_json::json!({"task": cfg.task, "samples": n, "seed": cfg.trainer.seed,
                           "mean_reward": mean})
    );
    Ok(())
}

fn cmd_sample(args: &CommonArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let task = cfg.task()?;
    let params = params_for(&cfg, args)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = PathBuf::from(&cfg.out_dir).join("trajectories.jsonl");
    let mut file = fs::File::create(&path)?;
    let n = args.samples.unwrap_or(16);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
    for _ in 0..n {
        let prompt = task.sample_prompt(&mut rng);
        let sched = decoding::make_schedule(
            task.completion_len,
            cfg.trainer.n_steps,
            cfg.trainer.tokens_per_step,
            cfg.trainer.selection,
            &mut rng,
        )?;
        let traj = decoding::sample_any_order(
            &params,
            &cfg.model,
            &prompt,
            &sched,
            cfg.trainer.temperature,
            &mut rng,
        )?;
        writeln!(file, "{}", decoding::trajectory_to_json(&traj))?;
    }
    println!("wrote {} trajectories to {}", n, path.display());
    Ok(())
}

fn cmd_dn_sweep(args: &CommonArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let task = cfg.task()?;
    let params = params_for(&cfg, args)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let out = PathBuf::from(&cfg.out_dir);
    let n_samples = args.samples.unwrap_or(64);
    let t = cfg.trainer.n_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
    let prompt = task.sample_prompt(&mut rng);
    let mut rows = Vec::new();
    for n in 1..=t {
        if t % n != 0 {
            continue;
        }
        let report = likelihood::bound_report(
            &params,
            &cfg.model,
            &prompt,
            task.completion_len,
            t,
            cfg.trainer.tokens_per_step,
            n,
            n_samples,
            &mut rng,
        )?;
        rows.push(report);
    }
    let csv_path = out.join("dn_sweep.csv");
    let mut csv = String::from("N,D_N,stderr,eps_block,bound,holds\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n, r.d_n, r.stderr, r.eps_block, r.bound, r.holds
        ));
    }
    fs::write(&csv_path, csv)?;
    write_dn_plot(&out.join("dn_sweep.svg"), &rows)?;
    println!("wrote {} rows to {}", rows.len(), csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct VerifySection {
    name: String,
    pass: bool,
    detail: String,
}

fn cmd_verify(args: &CommonArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let budget = EnumerationBudget::default();
    let mut sections = Vec::new();

    // enumeration normalization
    {
        let mut worst: f64 = 0.0;
        for (l, t, v) in [(2usize, 2usize, 2usize), (2, 2, 3), (3, 3, 2)] {
            let cfg = ModelConfig::new(v + 1, v, 8, 2, 2, 32)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + l as u64);
            let params = ModelParams::init(&cfg, &mut rng);
            let fam = ScheduleFamily::Random { l, t, k: 1 };
            let trajs = oracle::enumerate_trajectories(&params, &cfg, &[0], &fam, &budget)?;
            let total: f64 = trajs.iter().map(|(_, p)| p).sum();
            worst = worst.max((total - 1.0).abs());
        }
        sections.push(VerifySection {
            name: "enumeration_normalization".into(),
            pass: worst < 1e-10,
            detail: format!("max |sum p - 1| = {:.3e}", worst),
        });
    }

    // gradient identity between the direct and ratio forms
    {
        let mut worst: f64 = 0.0;
        for (i, (l, t, v)) in [(2usize, 2usize, 2usize), (2, 2, 3), (3, 3, 2)]
            .iter()
            .enumerate()
        {
            let cfg = ModelConfig::new(v + 1, *v, 8, 2, 2, 32)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50 + i as u64);
            let params = ModelParams::init(&cfg, &mut rng);
            let fam = ScheduleFamily::Random { l: *l, t: *t, k: 1 };
            let reward = |_: &[usize], c: &[usize]| crate::tasks::reward_sorted(&[], c);
            let a = oracle::exact_policy_gradient(&params, &cfg, &[0], &fam, &reward, &budget)?;
            let b = oracle::estimator_expected_gradient(
                &params, &cfg, &[0], &fam, &reward, &budget,
            )?;
            worst = worst.max(oracle::gradient_relative_error(&a, &b));
        }
        sections.push(VerifySection {
            name: "gradient_identity".into(),
            pass: worst < 1e-6,
            detail: format!("max relative error = {:.3e}", worst),
        });
    }

    // exact merge gap against the analytic bound
    {
        let cfg = ModelConfig::new(3, 2, 8, 2, 2, 32)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        let params = ModelParams::init(&cfg, &mut rng);
        let fam = ScheduleFamily::Random { l: 3, t: 3, k: 1 };
        let mut ok = true;
        let mut detail = String::new();
        for n in [1usize, 3] {
            let (d, e) = oracle::exact_dn_and_eps(&params, &cfg, &[0], &fam, n, &budget)?;
            let bound = likelihood::bound_on_dn(3, 3, n, e);
            ok &= d >= -1e-12 && d <= bound + 1e-12;
            detail.push_str(&format!("N={}: D={:.4} bound={:.4}; ", n, d, bound));
        }
        sections.push(VerifySection { name: "merge_gap_bound".into(), pass: ok, detail });
    }

    // one-pass equivalence
    {
        let cfg = ModelConfig::new(5, 4, 8, 2, 2, 32)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let params = ModelParams::init(&cfg, &mut rng);
        let rep =
            oracle::oneshot_equivalence_suite(&params, &cfg, &[0], 4, 2, 2, 20, &mut rng)?;
        sections.push(VerifySection {
            name: "one_pass_equivalence".into(),
            pass: rep.causal_pass && rep.bidirectional_max_gap > 1e-3,
            detail: format!(
                "causal gap {:.3e}, bidirectional gap {:.3e}",
                rep.causal_max_gap, rep.bidirectional_max_gap
            ),
        });
    }

    let all_pass = sections.iter().all(|s| s.pass);
    let report = serde_json::json!({"pass": all_pass, "seed": seed, "sections": sections});
    let path = out_dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
    println!("{}", report);
    if !all_pass {
        return Err(Error::Training("verification suite failed".into()));
    }
    Ok(())
}

/// Minimal SVG line chart.
fn svg_line_chart(
    points: &[(f64, f64)],
    x_label: &str,
    y_label: &str,
) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (x0, x1) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| {
        if x1 > x0 {
            pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad)
        } else {
            w / 2.0
        }
    };
    let sy = |y: f64| {
        if y1 > y0 {
            h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad)
        } else {
            h / 2.0
        }
    };
    let path: Vec<String> =
        points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>",
            "<line x1=\"{pad}\" y1=\"{hp}\" x2=\"{wp}\" y2=\"{hp}\" stroke=\"black\"/>",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{hp}\" stroke=\"black\"/>",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>",
            "<text x=\"{xc}\" y=\"{xl}\" text-anchor=\"middle\">{x_label}</text>",
            "<text x=\"15\" y=\"{yc}\" text-anchor=\"middle\" ",
            "transform=\"rotate(-90 15 {yc})\">{y_label}</text>",
            "</svg>"
        ),
        w = w,
        h = h,
        pad = pad,
        hp = h - pad,
        wp = w - pad,
        pts = path.join(" "),
        xc = w / 2.0,
        xl = h - 12.0,
        yc = h / 2.0,
        x_label = x_label,
        y_label = y_label,
    )
}

fn write_dn_plot(path: &Path, rows: &[likelihood::BoundReport]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.d_n)).collect();
    fs::write(path, svg_line_chart(&pts, "segments N", "merge gap D_N"))?;
    Ok(())
}

fn write_reward_plot(path: &Path, metrics: &[rltrain::MetricsRecord]) -> Result<()> {
    if metrics.is_empty() {
        return Ok(());
    }
    let pts: Vec<(f64, f64)> =
        metrics.iter().map(|m| (m.flops as f64, m.mean_reward)).collect();
    fs::write(path, svg_line_chart(&pts, "FLOPs", "mean reward"))?;
    Ok(())
}

pub fn run() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::DnSweep(a) => cmd_dn_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
