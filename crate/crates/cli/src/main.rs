use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use svla_core::auxtasks::DepthMode;
use svla_core::eval::EvalConfig;
use svla_core::fusion::{AblationConfig, FusionMode, GeoFeature};
use svla_core::par::Execution;
use svla_core::policy::PolicyConfig;
use svla_core::report::{ablation_csv, depth_csv, eval_csv, svg_bar_chart, svg_line_chart};
use svla_core::scenegen::dataset::{all_frames, generate_episodes, read_dataset, write_dataset, GenConfig};
use svla_core::scenegen::{EpisodeRecord, ShellLevel, TaskFamily};
use svla_core::sweep::{compare_depth, evaluate_trainer, robustness_sweep, run_arm, standard_arms, DepthTrainConfig};
use svla_core::trainer::{TrainConfig, TrainData, Trainer, METRICS_HEADER};

#[derive(Parser)]
#[command(name = "svla", version, about = "Stereo vision-language-action policy on a synthetic pick-and-place desk")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run every data-parallel stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render expert demonstrations into a dataset directory.
    GenData {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a policy and write a checkpoint, metrics CSV and loss chart.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        #[arg(long)]
        depth_mode: Option<DepthMode>,
        #[arg(long, default_value = "small")]
        shell: ShellLevel,
        /// Evaluate under every camera shell instead of `--shell`.
        #[arg(long)]
        sweep_shells: bool,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train and evaluate ablation arms with shared seeds and budgets.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated arm names; all standard arms when omitted.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Train stereo and monocular disparity heads and compare depth AbsRel.
    DepthEval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        /// Fraction of episodes held out for scoring.
        #[arg(long, default_value_t = 0.25)]
        holdout: f64,
        /// Pixels deeper than this many meters are not scored.
        #[arg(long, default_value_t = 1.5)]
        max_depth: f64,
        #[arg(long, default_value = "depth")]
        out: PathBuf,
    },
    /// Draw SVG charts from a metrics or ablation CSV.
    Plot {
        input: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Existing dataset directory; generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Comma-separated task families (general, bar-0, bar-45, bar-90, medium, small); all when omitted.
    #[arg(long, value_delimiter = ',')]
    families: Vec<TaskFamily>,
    /// Camera shell for generated data, and for evaluation in `ablate`.
    #[arg(long)]
    shell: Option<ShellLevel>,
    #[arg(long, default_value_t = 2)]
    difficulty: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn load(&self, exec: Execution) -> Result<Vec<EpisodeRecord>> {
        if let Some(dir) = &self.data {
            return read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()));
        }
        Ok(generate_episodes(&self.gen_config(), exec)?)
    }

    fn gen_config(&self) -> GenConfig {
        GenConfig {
            episodes: self.episodes,
            families: if self.families.is_empty() { TaskFamily::ALL.to_vec() } else { self.families.clone() },
            difficulty: self.difficulty,
            shell: self.shell.unwrap_or(ShellLevel::Small),
            seed: self.seed,
            ..GenConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct AblationArgs {
    /// Geometric feature: vcorr, vc or vcprime.
    #[arg(long)]
    geo_feature: Option<GeoFeature>,
    /// `on` or `off`.
    #[arg(long)]
    semantics: Option<OnOff>,
    /// Token fusion: channel or sequence.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// `on` feeds the left image as both views.
    #[arg(long)]
    single_view: Option<OnOff>,
}

impl AblationArgs {
    fn apply(&self, mut a: AblationConfig) -> AblationConfig {
        if let Some(f) = self.geo_feature {
            a.geo_feature = f;
        }
        if let Some(s) = self.semantics {
            a.semantics = s.0;
        }
        if let Some(f) = self.fusion {
            a.fusion = f;
        }
        if let Some(s) = self.single_view {
            a.single_view = s.0;
        }
        a
    }
}

#[derive(Clone, Copy)]
struct OnOff(bool);

impl std::str::FromStr for OnOff {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "on" | "true" => Ok(OnOff(true)),
            "off" | "false" => Ok(OnOff(false)),
            _ => Err(format!("expected on or off, got `{s}`")),
        }
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// TrainConfig as TOML or JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    ablation: AblationArgs,
    /// Depth query sampling: interaction, uniform or none.
    #[arg(long)]
    depth_mode: Option<DepthMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Use the small model preset.
    #[arg(long)]
    compact: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => TrainConfig::default(),
        };
        if self.compact {
            cfg.policy = PolicyConfig { ablation: cfg.policy.ablation, ..PolicyConfig::compact() };
        }
        cfg.policy.ablation = self.ablation.apply(cfg.policy.ablation);
        cfg.seed = self.data.seed;
        if let Some(m) = self.depth_mode {
            cfg.depth_mode = m;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        Ok(cfg)
    }
}

fn read_config(p: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
    let cfg = if p.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
    };
    Ok(cfg)
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Trials per task family.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Comma-separated task families to evaluate; all when omitted.
    #[arg(long, value_delimiter = ',')]
    eval_families: Vec<TaskFamily>,
    /// Action budget per episode before it times out.
    #[arg(long, default_value_t = 64)]
    max_steps: usize,
    /// Integration steps of the action sampler.
    #[arg(long, default_value_t = 8)]
    euler_steps: usize,
    #[arg(long, default_value_t = 1_000_003)]
    eval_seed: u64,
}

impl EvalArgs {
    fn config(&self, image_size: usize, shell: ShellLevel) -> EvalConfig {
        EvalConfig {
            families: if self.eval_families.is_empty() { TaskFamily::ALL.to_vec() } else { self.eval_families.clone() },
            trials_per_family: self.trials,
            shell,
            image_size,
            max_steps: self.max_steps,
            sample_steps: self.euler_steps,
            seed: self.eval_seed,
            ..EvalConfig::default()
        }
    }
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, content).with_context(|| format!("writing {}", p.display()))?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

type Series = (String, Vec<(f64, f64)>);

/// Columns of a headed numeric CSV; the first column is the x axis.
fn csv_series(text: &str) -> Result<Vec<Series>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut series: Vec<(String, Vec<(f64, f64)>)> = header.iter().skip(1).map(|h| (h.clone(), Vec::new())).collect();
    for rec in r.records() {
        let rec = rec?;
        let x: f64 = rec.get(0).unwrap_or("").parse().context("non-numeric x column")?;
        for (i, s) in series.iter_mut().enumerate() {
            if let Some(Ok(y)) = rec.get(i + 1).map(str::parse::<f64>) {
                s.1.push((x, y));
            }
        }
    }
    Ok(series)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.cmd {
        Cmd::GenData { data, out } => {
            let cfg = data.gen_config();
            let eps = generate_episodes(&cfg, exec)?;
            let m = write_dataset(&eps, Some(cfg.shell), &out)?;
            eprintln!("wrote {} episodes ({} frames) to {}", eps.len(), m.counts.frames, out.display());
        }
        Cmd::Train { train, out } => {
            let cfg = train.config()?;
            let data = TrainData::new(train.data.load(exec)?);
            let mut t = Trainer::new(cfg, data.stats, exec)?;
            let mut log = format!("{METRICS_HEADER}\n").into_bytes();
            let steps = t.cfg.steps;
            t.run(&data, steps, Some(&mut log))?;
            let log = String::from_utf8(log)?;
            t.save(&out)?;
            write(&out, "metrics.csv", &log)?;
            write(&out, "loss.svg", &svg_line_chart("training loss", &csv_series(&log)?))?;
        }
        Cmd::Eval { checkpoint, eval, ablation, depth_mode, shell, sweep_shells, out } => {
            let t = Trainer::load(&checkpoint, None, exec)?;
            let have = t.cfg.ablation();
            let want = ablation.apply(have);
            if want != have || depth_mode.is_some_and(|m| m != t.cfg.depth_mode) {
                bail!(
                    "checkpoint was trained as {} with depth mode {}, but {} with depth mode {} was requested",
                    have.label(),
                    t.cfg.depth_mode.name(),
                    want.label(),
                    depth_mode.unwrap_or(t.cfg.depth_mode).name()
                );
            }
            let cfg = eval.config(t.cfg.policy.image_size, shell);
            let reports = if sweep_shells {
                robustness_sweep(&t, &have.label(), &cfg, exec)?
            } else {
                vec![evaluate_trainer(&t, &have.label(), &cfg, exec)?]
            };
            write(&out, "eval.csv", &eval_csv(&reports)?)?;
            write(&out, "eval.json", &serde_json::to_string_pretty(&reports)?)?;
            let bars: Vec<(String, f64)> = reports.iter().map(|r| (r.label.clone(), r.rate)).collect();
            write(&out, "eval.svg", &svg_bar_chart("success rate", &bars))?;
            for r in &reports {
                println!("{}: {}/{} = {:.3}", r.label, r.successes, r.trials, r.rate);
            }
        }
        Cmd::Ablate { train, eval, arms, out } => {
            let base = train.config()?;
            let data = TrainData::new(train.data.load(exec)?);
            let all = standard_arms();
            let chosen: Vec<_> = if arms.is_empty() {
                all
            } else {
                arms.iter()
                    .map(|n| {
                        all.iter().find(|a| &a.name == n).cloned().with_context(|| {
                            let names: Vec<&str> = all.iter().map(|a| a.name.as_str()).collect();
                            format!("unknown arm `{n}`; known arms: {}", names.join(", "))
                        })
                    })
                    .collect::<Result<_>>()?
            };
            let ecfg = eval.config(base.policy.image_size, train.data.shell.unwrap_or(ShellLevel::Small));
            let mut results = Vec::new();
            let mut shells = Vec::new();
            for arm in &chosen {
                eprintln!("arm {}", arm.name);
                let (r, t) = run_arm(&base, arm, &data, &ecfg, exec)?;
                if arm.name == "vcprime+sem" || arm.name == "single-view" {
                    shells.extend(robustness_sweep(&t, &arm.name, &ecfg, exec)?);
                }
                println!("{}: {}/{} = {:.3}", arm.name, r.report.successes, r.report.trials, r.report.rate);
                results.push(r);
            }
            write(&out, "ablation.csv", &ablation_csv(&results)?)?;
            write(&out, "ablation.json", &serde_json::to_string_pretty(&results)?)?;
            let bars: Vec<(String, f64)> = results.iter().map(|r| (r.arm.name.clone(), r.report.rate)).collect();
            write(&out, "ablation.svg", &svg_bar_chart("success rate by arm", &bars))?;
            if !shells.is_empty() {
                write(&out, "robustness.csv", &eval_csv(&shells)?)?;
                let series: Vec<(String, Vec<(f64, f64)>)> = shells
                    .chunks(ShellLevel::ALL.len())
                    .map(|c| {
                        let name = c[0].label.split('@').next().unwrap_or_default().to_string();
                        (name, c.iter().enumerate().map(|(i, r)| (i as f64, r.rate)).collect())
                    })
                    .collect();
                write(&out, "robustness.svg", &svg_line_chart("success by camera shell (small, medium, large)", &series))?;
            }
        }
        Cmd::DepthEval { data, steps, batch_size, lr, holdout, max_depth, out } => {
            if !(0.0..1.0).contains(&holdout) {
                bail!("holdout fraction {holdout} is outside [0, 1)");
            }
            let eps = data.load(exec)?;
            let split = ((eps.len() as f64) * (1.0 - holdout)).round() as usize;
            let (train, test) = (all_frames(&eps[..split]), all_frames(&eps[split..]));
            if train.is_empty() || test.is_empty() {
                bail!("holdout split left {} training and {} test frames", train.len(), test.len());
            }
            let cfg = DepthTrainConfig { steps, batch_size, lr, seed: data.seed, ..DepthTrainConfig::default() };
            let c = compare_depth(&cfg, &train, &test, max_depth, exec)?;
            write(&out, "depth.csv", &depth_csv(&c)?)?;
            let curve = |v: &[f64]| v.iter().enumerate().map(|(i, &l)| (i as f64 + 1.0, l)).collect::<Vec<_>>();
            let series = vec![("stereo".to_string(), curve(&c.stereo_curve)), ("mono".to_string(), curve(&c.mono_curve))];
            write(&out, "depth_loss.svg", &svg_line_chart("disparity loss", &series))?;
            let bars = vec![("stereo".to_string(), c.stereo_absrel), ("mono".to_string(), c.mono_absrel)];
            write(&out, "depth_absrel.svg", &svg_bar_chart("held-out AbsRel", &bars))?;
            println!("stereo absrel {:.4}, mono absrel {:.4}", c.stereo_absrel, c.mono_absrel);
        }
        Cmd::Plot { input, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
            if let (Some(ai), Some(ri)) = (header.iter().position(|h| h == "arm"), header.iter().position(|h| h == "rate")) {
                let mut bars = Vec::new();
                for rec in r.records() {
                    let rec = rec?;
                    bars.push((rec[ai].to_string(), rec[ri].parse::<f64>().context("non-numeric rate")?));
                }
                write(&out, &format!("{stem}.svg"), &svg_bar_chart(&stem, &bars))?;
            } else {
                write(&out, &format!("{stem}.svg"), &svg_line_chart(&stem, &csv_series(&text)?))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
