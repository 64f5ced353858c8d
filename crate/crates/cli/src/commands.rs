use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hamflow::adjoint::{backward_transport, condition_scan, first_variation_check, residual_sequence, AdjointGrid, SineDirection};
use hamflow::diffnet::{AdamConfig, LrDecay, ParameterSet};
use hamflow::evalharness::{
    benchmark, energy_exchange_profile, export_results, fit_error_growth, poincare_section, BenchSettings, ErrorSeries,
    ExportFormat, Record, Solver,
};
use hamflow::flowmap::{
    eval_batch, rollout_batch, Architecture, FixedConfig, FlowMap, Model, TaylorConfig, TaylorOrders, PARAMS_FILE,
};
use hamflow::integrators::{integrate, reference_flow, SchemeDescriptor, SchemeKind};
use hamflow::losses::{
    data_loss, exact_residual_loss, joint_loss, residual_loss, sample_collocation, split_samples, train, CollocationBatch,
    CollocationSpec, NormSpec, PhaseMode, ProgressiveSchedule, Tau, TimeMode, TrainConfig, TrajectoryDataset,
};
use hamflow::mcsampler::{hmc_h0_chain, narrowband_dataset, McSamplerConfig, SampleSet};
use hamflow::{make_system, HamiltonianSystem, PhaseState64, System64};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::{
    self, ArchKind, CollocationBlock, EvalMode, Format, LossKind, NormKind, PhaseBlock, ReferenceKind, RunConfig,
    SamplerMode, TimeKind,
};
use crate::manifest::{sha256_hex, Manifest, Versions};
use crate::{CliError, Common, Kind};

const TEST_STREAM: u64 = 0x7e57;

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn cfg_err(e: hamflow::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// State shared by every subcommand.
struct Ctx {
    cfg: RunConfig,
    system: System64,
    out: PathBuf,
    outputs: Vec<String>,
    details: Map<String, Value>,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn seed(&self) -> u64 {
        self.cfg.run.seed
    }
}

pub fn run(kind: Kind, common: &Common) -> Result<PathBuf, CliError> {
    let (mut cfg, mut tree) = config::load(&common.config, &common.overrides)?;
    if let Some(c) = &common.checkpoint {
        let model = cfg.model.as_mut().ok_or_else(|| bad("--checkpoint needs a [model] table"))?;
        model.checkpoint = Some(c.clone());
        config::apply_override(&mut tree, &format!("model.checkpoint={:?}", c.display().to_string()))?;
    }
    cfg.check_files()?;
    let system: System64 = make_system(&cfg.system.name, &cfg.system.params).map_err(cfg_err)?;
    let root = std::env::var_os("HAMFLOW_OUT").map(PathBuf::from).unwrap_or_else(|| cfg.run.output.clone());
    let out = root.join(cfg.run.name.clone().unwrap_or_else(|| kind.as_str().to_string()));

    let workers = cfg.run.workers;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(hamflow::Error::InvalidInput(e.to_string())))?;

    let config_text = toml::to_string(&tree).map_err(|e| bad(e.to_string()))?;
    let mut ctx = Ctx { cfg, system, out, outputs: Vec::new(), details: Map::new() };
    if common.dry_run {
        prepare(kind, &ctx)?;
        return Ok(ctx.out);
    }
    pool.install(|| {
        // everything that can be checked before work starts
        let prepared = prepare(kind, &ctx)?;
        fs::create_dir_all(&ctx.out)?;
        execute(kind, prepared, &mut ctx)
    })?;

    let manifest = Manifest {
        command: kind.as_str().to_string(),
        config_path: common.config.clone(),
        config_sha256: sha256_hex(&config_text),
        seed: ctx.seed(),
        workers: pool.current_num_threads(),
        versions: Versions { hamflow: hamflow_version(), cli: env!("CARGO_PKG_VERSION") },
        effective_config: serde_json::to_value(&tree).map_err(|e| CliError::Runtime(e.into()))?,
        outputs: ctx.outputs.clone(),
        details: ctx.details.clone(),
    };
    manifest.write(&ctx.out, &config_text)?;
    Ok(ctx.out)
}

fn hamflow_version() -> &'static str {
    // the library and the CLI are versioned together
    env!("CARGO_PKG_VERSION")
}

/// Parsed pieces a subcommand needs.
#[derive(Default)]
struct Prepared {
    scheme: Option<SchemeDescriptor<f64>>,
    architecture: Option<Architecture>,
    norm: NormSpec,
}

fn scheme_of(block: &config::SchemeBlock) -> Result<SchemeDescriptor<f64>, CliError> {
    let kind: SchemeKind = block.kind.parse().map_err(cfg_err)?;
    SchemeDescriptor::new(kind, block.h).map_err(cfg_err)
}

fn prepare(kind: Kind, ctx: &Ctx) -> Result<Prepared, CliError> {
    let cfg = &ctx.cfg;
    let mut p = Prepared::default();
    let needs_scheme = matches!(kind, Kind::Simulate | Kind::VerifyAdjoint)
        || (kind == Kind::Train && matches!(cfg.loss.as_ref().map(|l| l.kind), Some(LossKind::Residual | LossKind::Joint)))
        || (kind == Kind::Evaluate && cfg.evaluate.as_ref().is_some_and(|e| e.reference == ReferenceKind::Scheme));
    if let Some(s) = &cfg.scheme {
        let scheme = scheme_of(s)?;
        scheme.supports(&ctx.system).map_err(cfg_err)?;
        p.scheme = Some(scheme);
    } else if needs_scheme {
        return Err(bad(format!("`{}` needs a [scheme] table", kind.as_str())));
    }
    if let Some(m) = &cfg.model {
        p.architecture = Some(architecture(m, &ctx.system)?);
    }
    let need = |present: bool, table: &str| {
        if present {
            Ok(())
        } else {
            Err(bad(format!("`{}` needs a [{table}] table", kind.as_str())))
        }
    };
    match kind {
        Kind::Simulate => need(cfg.simulate.is_some(), "simulate")?,
        Kind::Sample => need(cfg.sampler.is_some(), "sampler")?,
        Kind::Train => {
            need(cfg.model.is_some(), "model")?;
            let loss = cfg.loss.as_ref().ok_or_else(|| bad("`train` needs a [loss] table"))?;
            if !(loss.lr > 0.0) {
                return Err(bad("loss.lr must be positive"));
            }
            if !(0.0..1.0).contains(&loss.test_fraction) {
                return Err(bad("loss.test_fraction must lie in [0, 1)"));
            }
            if cfg.run.iterations == 0 {
                return Err(bad("run.iterations must be positive"));
            }
            p.norm = match loss.norm {
                NormKind::Plain => NormSpec::Plain,
                NormKind::EnergyBalanced => {
                    let f = ctx.system.as_fput().ok_or_else(|| bad("the energy-balanced norm needs the fput system"))?;
                    NormSpec::EnergyBalanced { m: f.m, omega: f.omega }
                }
            };
            let arch = p.architecture.as_ref().expect("model checked");
            match loss.kind {
                LossKind::Residual | LossKind::Exact => {
                    need(loss.collocation.is_some(), "loss.collocation")?;
                    if matches!(arch, Architecture::T0Centered { .. }) {
                        return Err(bad("residual losses on a t0_centered model go through loss.kind = \"joint\""));
                    }
                }
                LossKind::Data => need(loss.data.is_some(), "loss.data")?,
                LossKind::Joint => {
                    need(loss.collocation.is_some() && loss.data.is_some(), "loss.collocation] and [loss.data")?;
                    if !matches!(arch, Architecture::T0Centered { .. }) {
                        return Err(bad("the joint loss needs model.architecture = \"t0_centered\""));
                    }
                }
            }
            if matches!(loss.kind, LossKind::Data | LossKind::Joint) && model_t0(arch).is_none() {
                return Err(bad("data losses need a fixed-step model (model.t0)"));
            }
        }
        Kind::Evaluate => {
            need(cfg.evaluate.is_some(), "evaluate")?;
            if !cfg.model.as_ref().is_some_and(|m| m.checkpoint.is_some()) {
                return Err(bad("`evaluate` needs model.checkpoint or --checkpoint"));
            }
        }
        Kind::Bench => need(cfg.bench.is_some(), "bench")?,
        Kind::VerifyAdjoint => {
            need(cfg.adjoint.is_some(), "adjoint")?;
            need(cfg.model.is_some(), "model")?;
        }
    }
    Ok(p)
}

fn model_t0(arch: &Architecture) -> Option<f64> {
    match arch {
        Architecture::Fixed(f) | Architecture::T0Centered { fixed: f, .. } => Some(f.t0),
        Architecture::Taylor(_) => None,
    }
}

fn architecture(m: &config::ModelBlock, system: &System64) -> Result<Architecture, CliError> {
    if m.width == 0 || m.depth == 0 {
        return Err(bad("model.width and model.depth must be positive"));
    }
    let hidden = vec![m.width; m.depth];
    let taylor = |t_train: Option<f64>| -> Result<TaylorConfig, CliError> {
        let t_train = t_train.ok_or_else(|| bad("a variable-step model needs model.t_train"))?;
        if !(t_train > 0.0) {
            return Err(bad("model.t_train must be positive"));
        }
        let orders = match (m.slow_order, m.fast_order) {
            (None, None) => TaylorOrders::Uniform(m.order),
            (Some(slow), Some(fast)) => {
                if system.slow_fast().is_none() {
                    return Err(bad(format!("`{}` has no slow/fast partition", system.name())));
                }
                TaylorOrders::SlowFast { slow, fast }
            }
            _ => return Err(bad("set both model.slow_order and model.fast_order, or neither")),
        };
        Ok(TaylorConfig {
            orders,
            hidden: hidden.clone(),
            gated: m.gated,
            t_train,
            epsilon_conditioned: m.epsilon_conditioned,
            speed_preserving: m.speed_preserving,
        })
    };
    let fixed = || -> Result<FixedConfig, CliError> {
        let t0 = m.t0.ok_or_else(|| bad("a fixed-step model needs model.t0"))?;
        if !(t0 > 0.0) {
            return Err(bad("model.t0 must be positive"));
        }
        Ok(FixedConfig { t0, hidden: hidden.clone(), gated: m.gated })
    };
    Ok(match m.architecture {
        ArchKind::Taylor => Architecture::Taylor(taylor(m.t_train)?),
        ArchKind::Fixed => Architecture::Fixed(fixed()?),
        ArchKind::T0Centered => Architecture::T0Centered { fixed: fixed()?, var: taylor(m.t_train)? },
    })
}

fn execute(kind: Kind, p: Prepared, ctx: &mut Ctx) -> Result<(), CliError> {
    match kind {
        Kind::Simulate => simulate(p, ctx),
        Kind::Sample => sample(ctx),
        Kind::Train => train_cmd(p, ctx),
        Kind::Evaluate => evaluate(p, ctx),
        Kind::Bench => bench(p, ctx),
        Kind::VerifyAdjoint => verify_adjoint(p, ctx),
    }
}

fn to_states(system: &System64, points: &[Vec<f64>]) -> Result<Vec<PhaseState64>, CliError> {
    points
        .iter()
        .map(|p| {
            if p.len() != system.dim() {
                return Err(bad(format!("state {p:?} has length {}, expected {}", p.len(), system.dim())));
            }
            let mut u = PhaseState64::new(p.clone()).map_err(cfg_err)?;
            u.param = system.parameter();
            Ok(u)
        })
        .collect()
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn simulate(p: Prepared, ctx: &mut Ctx) -> Result<(), CliError> {
    let block = ctx.cfg.simulate.clone().expect("checked");
    let scheme = p.scheme.expect("checked");
    if !(block.horizon > 0.0) || block.stride == 0 {
        return Err(bad("simulate.horizon and simulate.stride must be positive"));
    }
    let states = to_states(&ctx.system, &block.states)?;
    let n = (block.horizon / scheme.h).round().max(1.0) as usize;
    let d = ctx.system.dim();
    let mut header = vec!["state".to_string(), "t".into()];
    header.extend((0..d).map(|i| format!("u{i}")));
    let mut rows = Vec::new();
    let mut first = None;
    for (i, u) in states.iter().enumerate() {
        let traj = integrate(&ctx.system, &scheme, u, n)?;
        for k in (0..traj.len()).step_by(block.stride) {
            let mut r = vec![i.to_string(), traj.times[k].to_string()];
            r.extend(traj.states[k].iter().map(|v| v.to_string()));
            rows.push(r);
        }
        if first.is_none() {
            first = Some(traj);
        }
    }
    let path = ctx.path("trajectory.csv");
    write_rows(&path, &header, rows.into_iter())?;
    if let Some(traj) = first {
        extras(ctx, &traj.times, &traj.states, block.stride)?;
    }
    Ok(())
}

/// Energy-exchange profile for FPUT and the Poincaré section for the
/// α-particle, from one trajectory.
fn extras(ctx: &mut Ctx, times: &[f64], states: &[Vec<f64>], stride: usize) -> Result<(), CliError> {
    if ctx.system.as_fput().is_some() {
        let profile = energy_exchange_profile(&ctx.system, times, states, stride)?;
        ctx.details.insert("energy_exchange_amplitudes".into(), json!(profile.exchange_amplitudes()));
        ctx.details.insert("stiff_energy_drift".into(), json!(profile.total_drift()));
        let path = ctx.path("profile.csv");
        profile.write_csv(&path)?;
    }
    if matches!(ctx.system, hamflow::System::Alpha(_)) {
        let section = poincare_section(times, states)?;
        ctx.details.insert("section_points".into(), json!(section.len()));
        let path = ctx.path("section.csv");
        section.write_csv(&path)?;
    }
    Ok(())
}

fn sampler_config(ctx: &Ctx) -> Result<(McSamplerConfig, config::SamplerBlock), CliError> {
    let b = ctx.cfg.sampler.clone().ok_or_else(|| bad("phase source `sampler` needs a [sampler] table"))?;
    let cfg = McSamplerConfig {
        h0: b.h0,
        band_fraction: b.band_fraction,
        lambda: b.lambda,
        scheme: b.scheme.parse().map_err(cfg_err)?,
        h: b.h,
        n_samples: b.n_samples,
        levels: b.levels,
        max_retries: b.max_retries,
        seed: ctx.seed(),
    };
    cfg.validate().map_err(cfg_err)?;
    if b.start.len() != ctx.system.dim() {
        return Err(bad(format!("sampler.start has length {}, expected {}", b.start.len(), ctx.system.dim())));
    }
    Ok((cfg, b))
}

fn draw_samples(ctx: &Ctx) -> Result<SampleSet<f64>, CliError> {
    let (cfg, b) = sampler_config(ctx)?;
    Ok(match b.mode {
        SamplerMode::Chain => hmc_h0_chain(&ctx.system, &b.start, &cfg)?,
        SamplerMode::Narrowband => narrowband_dataset(&ctx.system, &[b.start.clone()], &cfg, cfg.n_samples)?,
    })
}

fn sample(ctx: &mut Ctx) -> Result<(), CliError> {
    let (cfg, b) = sampler_config(ctx)?;
    let set = draw_samples(ctx)?;
    ctx.details.insert("lambda".into(), json!(cfg.lambda));
    ctx.details.insert("h0".into(), json!(cfg.h0));
    ctx.details.insert("mode".into(), json!(b.mode));
    ctx.details.insert("proposal_step".into(), json!(cfg.step_size()));
    ctx.details.insert("samples".into(), json!(set.len()));
    let system = ctx.system.clone();
    ctx.details.insert("max_relative_drift".into(), json!(set.max_relative_drift(|u| system.energy(u))));
    let path = ctx.path("samples.csv");
    set.write_csv(fs::File::create(path)?)?;
    Ok(())
}

/// Explicit point sets behind a phase source; box and shell sources have
/// none and are sampled per batch.
fn phase_points(ctx: &Ctx, block: &PhaseBlock) -> Result<Option<Vec<Vec<f64>>>, CliError> {
    let pts = match block {
        PhaseBlock::Box { .. } | PhaseBlock::Shell { .. } => return Ok(None),
        PhaseBlock::Sampler => draw_samples(ctx)?.points_f64(),
        PhaseBlock::File { path } => SampleSet::<f64>::read_csv(fs::File::open(path)?)?.points_f64(),
        PhaseBlock::Points { points } => points.clone(),
    };
    if let Some(p) = pts.iter().find(|p| p.len() != ctx.system.dim()) {
        return Err(bad(format!("phase point of length {} for a {}-dimensional system", p.len(), ctx.system.dim())));
    }
    Ok(Some(pts))
}

fn phase_mode(block: &PhaseBlock, points: Option<Vec<Vec<f64>>>) -> PhaseMode {
    match (block, points) {
        (PhaseBlock::Box { lo, hi }, _) => PhaseMode::Box { lo: lo.clone(), hi: hi.clone() },
        (PhaseBlock::Shell { indices, r_min, r_max, lo, hi }, _) => PhaseMode::Shell {
            indices: indices.clone(),
            r_min: *r_min,
            r_max: *r_max,
            lo: lo.clone(),
            hi: hi.clone(),
        },
        (_, points) => PhaseMode::Samples { points: Arc::new(points.unwrap_or_default()) },
    }
}

/// `n` states from a phase source (the first `n` of a point set).
fn draw_states(ctx: &Ctx, block: &PhaseBlock, n: usize, stream: u64) -> Result<Vec<PhaseState64>, CliError> {
    if n == 0 {
        return Err(bad("need a positive number of states"));
    }
    let pts: Vec<Vec<f64>> = match phase_points(ctx, block)? {
        Some(p) => p.into_iter().take(n).collect(),
        None => {
            let spec = CollocationSpec {
                time: TimeMode::Fixed { t0: 0.0 },
                phase: phase_mode(block, None),
                batch: n,
                epsilon: None,
                progressive: None,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
            rng.set_stream(stream);
            let b: CollocationBatch<f64> = sample_collocation(&spec, ctx.system.dim(), &mut rng).map_err(cfg_err)?;
            b.points.outer_iter().map(|r| r.to_vec()).collect()
        }
    };
    to_states(&ctx.system, &pts)
}

fn states_or_drawn(ctx: &Ctx, states: &Option<Vec<Vec<f64>>>, n: usize, stream: u64) -> Result<Vec<PhaseState64>, CliError> {
    match states {
        Some(s) => to_states(&ctx.system, s),
        None => {
            let phase = ctx
                .cfg
                .loss
                .as_ref()
                .and_then(|l| l.collocation.as_ref())
                .map(|c| c.phase.clone())
                .ok_or_else(|| bad("give explicit states or a [loss.collocation.phase] table to draw them from"))?;
            draw_states(ctx, &phase, n, stream)
        }
    }
}

fn collocation_spec(block: &CollocationBlock, h: Option<f64>, points: Option<Vec<Vec<f64>>>) -> Result<CollocationSpec, CliError> {
    let time = match block.time {
        TimeKind::Grid => TimeMode::Grid {
            n: block.n,
            t_max: block.t_max,
            tau: if block.random_shift {
                Tau::Uniform { h: h.ok_or_else(|| bad("random_shift needs a [scheme] step"))? }
            } else {
                Tau::Fixed(block.tau)
            },
        },
        TimeKind::Uniform => TimeMode::Uniform { n: block.n, t_max: block.t_max },
        TimeKind::Fixed => TimeMode::Fixed { t0: block.t_max },
    };
    Ok(CollocationSpec {
        time,
        phase: phase_mode(&block.phase, points),
        batch: block.batch,
        epsilon: block.epsilon.map(|[a, b]| (a, b)),
        progressive: block.progressive.map(|p| ProgressiveSchedule { t_start: p.t_start, t_step: p.t_step, every: p.every }),
    })
}

/// Model and parameters, from the checkpoint when one is configured.
fn load_or_init(ctx: &Ctx, arch: Option<Architecture>) -> Result<(Model, ParameterSet<f64>), CliError> {
    match ctx.cfg.model.as_ref().and_then(|m| m.checkpoint.as_deref()) {
        Some(dir) => Ok(Model::load(dir, &ctx.system)?),
        None => {
            let arch = arch.ok_or_else(|| bad("no [model] table"))?;
            let mut params = ParameterSet::new(ctx.seed());
            let model = Model::init(arch, &ctx.system, &mut params, ctx.seed()).map_err(cfg_err)?;
            Ok((model, params))
        }
    }
}

fn train_cmd(p: Prepared, ctx: &mut Ctx) -> Result<(), CliError> {
    let loss = ctx.cfg.loss.clone().expect("checked");
    let (model, mut params) = load_or_init(ctx, p.architecture.clone())?;
    let seed = ctx.seed();
    let dim = ctx.system.dim();
    let system = ctx.system.clone();
    let norm = p.norm;
    let h = p.scheme.as_ref().map(|s| s.h);

    // collocation batches
    let colloc = match &loss.collocation {
        Some(block) if matches!(loss.kind, LossKind::Residual | LossKind::Exact | LossKind::Joint) => {
            let points = phase_points(ctx, &block.phase)?;
            let (train_pts, test_pts) = match points {
                Some(pts) if loss.test_fraction > 0.0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(TEST_STREAM);
                    let (a, b) = split_samples(&pts, loss.test_fraction, &mut rng);
                    (Some(a), Some(b))
                }
                Some(pts) => (Some(pts.clone()), Some(pts)),
                None => (None, None),
            };
            let spec = collocation_spec(block, h, train_pts)?;
            let test_spec = collocation_spec(block, h, test_pts)?;
            spec.validate(dim).map_err(cfg_err)?;
            Some((spec, test_spec))
        }
        _ => None,
    };
    // trajectory data
    let data = match (&loss.data, model_t0(&model.architecture)) {
        (Some(d), Some(t0)) if matches!(loss.kind, LossKind::Data | LossKind::Joint) => {
            if d.steps == 0 {
                return Err(bad("loss.data.steps must be positive"));
            }
            let inputs = draw_states(ctx, &d.inputs, d.count, 1)?;
            let all = TrajectoryDataset::from_reference(&system, &inputs, t0, d.steps, d.tol)?;
            let idx: Vec<usize> = (0..all.len()).collect();
            let (train_idx, test_idx) = if loss.test_fraction > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(TEST_STREAM + 1);
                let as_pts: Vec<Vec<f64>> = idx.iter().map(|&i| vec![i as f64]).collect();
                let (a, b) = split_samples(&as_pts, loss.test_fraction, &mut rng);
                let back = |v: Vec<Vec<f64>>| v.into_iter().map(|p| p[0] as usize).collect::<Vec<_>>();
                (back(a), back(b))
            } else {
                (idx.clone(), idx)
            };
            Some((all.subset(&train_idx), all.subset(&test_idx), d.steps, d.batch))
        }
        _ => None,
    };

    let model_dir = ctx.path("model");
    model.save(&model_dir, &system, &params)?;
    let iterations = ctx.cfg.run.iterations;
    let tc = TrainConfig {
        iterations,
        adam: AdamConfig {
            lr: loss.lr,
            decay: loss
                .decay_rate
                .map(|rate| LrDecay { rate, every: loss.decay_every.unwrap_or(iterations as u64).max(1) }),
            ..Default::default()
        },
        eval_every: loss.eval_every.unwrap_or((iterations / 10).max(1)),
        seed,
        checkpoint: Some(model_dir.join(PARAMS_FILE)),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(TEST_STREAM);
    let (fixed_batch, test_batch) = match &colloc {
        Some((spec, test_spec)) => (
            Some(sample_collocation::<f64, _>(spec, dim, &mut rng).map_err(cfg_err)?),
            Some(sample_collocation::<f64, _>(&test_spec.at_iteration(usize::MAX), dim, &mut test_rng).map_err(cfg_err)?),
        ),
        None => (None, None),
    };
    let scheme = p.scheme.clone();
    let parts = model.t0_parts();
    let evaluate = |params: &ParameterSet<f64>, batch: Option<&CollocationBatch<f64>>, set: Option<&TrajectoryDataset<f64>>, steps: usize, grad: bool| {
        match loss.kind {
            LossKind::Residual => residual_loss(&model, params, scheme.as_ref().expect("checked"), &system, batch.expect("checked"), &norm, grad),
            LossKind::Exact => exact_residual_loss(&model, params, &system, batch.expect("checked"), &norm, grad),
            LossKind::Data => {
                let map: &dyn FlowMap<f64> = match parts {
                    Some((f, _)) => f,
                    None => &model,
                };
                data_loss(map, params, &system, set.expect("checked"), steps, &norm, grad)
            }
            LossKind::Joint => {
                let (f, v) = parts.expect("checked");
                joint_loss(f, v, params, scheme.as_ref().expect("checked"), &system, set.expect("checked"), steps, batch.expect("checked"), &norm, grad)
            }
        }
    };
    let steps = data.as_ref().map_or(0, |d| d.2);
    let record = train(
        &mut params,
        &tc,
        |ps, it| {
            let fresh;
            let batch = match (&colloc, loss.resample || colloc.as_ref().is_some_and(|c| c.0.progressive.is_some())) {
                (Some((spec, _)), true) if it > 0 => {
                    fresh = sample_collocation(&spec.at_iteration(it), dim, &mut rng)?;
                    Some(&fresh)
                }
                _ => fixed_batch.as_ref(),
            };
            let subset;
            let set = match &data {
                Some((all, _, _, b)) if *b > 0 && *b < all.len() => {
                    let idx = rand::seq::index::sample(&mut rng, all.len(), *b).into_vec();
                    subset = all.subset(&idx);
                    Some(&subset)
                }
                Some(d) => Some(&d.0),
                None => None,
            };
            let l = evaluate(ps, batch, set, steps, true)?;
            Ok((l.value, l.grads.expect("gradient requested")))
        },
        |ps| Ok(evaluate(ps, test_batch.as_ref(), data.as_ref().map(|d| &d.1), steps, false)?.value),
    )?;
    model.save(&model_dir, &system, &params)?;
    let path = ctx.path("losses.csv");
    record.write_csv(fs::File::create(path)?)?;
    let path = ctx.path("train_record.json");
    fs::write(path, serde_json::to_string_pretty(&record).map_err(|e| CliError::Runtime(e.into()))?)?;
    ctx.details.insert("parameters".into(), json!(params.count()));
    ctx.details.insert("final_train_loss".into(), json!(record.final_train_loss()));
    ctx.details.insert("final_test_loss".into(), json!(record.checkpoints.last().map(|c| c.test_loss)));
    Ok(())
}

/// Predicted and reference states at `k · dt`, `k = 0..=K`, per state.
#[allow(clippy::type_complexity)]
fn rollouts(
    ctx: &Ctx,
    model: &Model,
    params: &ParameterSet<f64>,
    scheme: Option<&SchemeDescriptor<f64>>,
    states: &[PhaseState64],
) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>), CliError> {
    let e = ctx.cfg.evaluate.as_ref().expect("checked");
    if !(e.dt > 0.0 && e.horizon >= e.dt) {
        return Err(bad("evaluate needs 0 < dt ≤ horizon"));
    }
    let k_max = (e.horizon / e.dt).round() as usize;
    let times: Vec<f64> = (0..=k_max).map(|k| k as f64 * e.dt).collect();
    let dim = ctx.system.dim();
    let u0 = Array2::from_shape_fn((states.len(), dim), |(i, j)| states[i].coords[j]);
    let eps: Option<Vec<f64>> = if FlowMap::<f64>::needs_epsilon(model) {
        Some(states.iter().map(|u| u.param.unwrap_or(0.0)).collect())
    } else {
        None
    };
    let snapshots: Vec<Array2<f64>> = match e.mode {
        EvalMode::Rollout => rollout_batch(model, params, &ctx.system, &u0, e.dt, k_max, eps.as_deref())?,
        EvalMode::OneStep => times
            .iter()
            .map(|&t| eval_batch(model, params, &ctx.system, &u0, &vec![t; states.len()], eps.as_deref()))
            .collect::<hamflow::Result<_>>()?,
    };
    let pred: Vec<Vec<Vec<f64>>> =
        (0..states.len()).map(|i| snapshots.iter().map(|s| s.row(i).to_vec()).collect()).collect();
    let reference = match e.reference {
        ReferenceKind::Scheme => {
            let scheme = scheme.expect("checked");
            let per = (e.dt / scheme.h).round();
            if per < 1.0 || (per * scheme.h - e.dt).abs() > 1e-9 * e.dt {
                return Err(bad(format!("evaluate.dt = {} is not a multiple of the scheme step {}", e.dt, scheme.h)));
            }
            let per = per as usize;
            states
                .iter()
                .map(|u| Ok(integrate(&ctx.system, scheme, u, per * k_max)?.states.into_iter().step_by(per).collect()))
                .collect::<Result<Vec<Vec<Vec<f64>>>, CliError>>()?
        }
        ReferenceKind::Flow => states
            .iter()
            .map(|u| {
                let mut out = vec![u.coords.clone()];
                let mut cur = u.clone();
                for _ in 0..k_max {
                    cur = PhaseState64 { param: cur.param, ..reference_flow(&ctx.system, &cur, e.dt, e.tol)? };
                    out.push(cur.coords.clone());
                }
                Ok(out)
            })
            .collect::<Result<_, CliError>>()?,
    };
    Ok((times, pred, reference))
}

fn evaluate(p: Prepared, ctx: &mut Ctx) -> Result<(), CliError> {
    let e = ctx.cfg.evaluate.clone().expect("checked");
    let states = states_or_drawn(ctx, &e.states, e.n_states, 2)?;
    let (model, params) = load_or_init(ctx, None)?;
    let (times, pred, reference) = rollouts(ctx, &model, &params, p.scheme.as_ref(), &states)?;
    let per_state = pred
        .iter()
        .zip(&reference)
        .map(|(a, b)| ErrorSeries::compare(&ctx.system, &times, a, b))
        .collect::<hamflow::Result<Vec<_>>>()?;
    let mut series = ErrorSeries::mean(&per_state)?;
    if e.fit_growth {
        series.growth = Some(fit_error_growth(&series)?);
    }
    ctx.details.insert("states".into(), json!(states.len()));
    ctx.details.insert("final_traj_err".into(), json!(series.traj_err.last()));
    ctx.details.insert("max_traj_err".into(), json!(series.max_traj_err()));
    ctx.details.insert("max_energy_err".into(), json!(series.max_energy_err()));
    let (name, format) = match e.format {
        Format::Csv => ("errors.csv", ExportFormat::Csv),
        Format::Json => ("errors.json", ExportFormat::Json),
    };
    let path = ctx.path(name);
    export_results(&series, &path, format)?;
    extras(ctx, &times, &pred[0], 1)
}

fn bench(p: Prepared, ctx: &mut Ctx) -> Result<(), CliError> {
    let b = ctx.cfg.bench.clone().expect("checked");
    let states = states_or_drawn(ctx, &b.states, b.batch, 3)?;
    let settings = BenchSettings { t_s: b.t_s, repeats: b.repeats, rounds: b.rounds };
    let mut schemes: Vec<SchemeDescriptor<f64>> = b.schemes.iter().map(scheme_of).collect::<Result<_, _>>()?;
    if schemes.is_empty() && b.model_dt.is_none() {
        schemes.extend(p.scheme.clone());
    }
    let model = match b.model_dt {
        Some(dt) if dt > 0.0 => Some((load_or_init(ctx, p.architecture.clone())?, dt)),
        Some(_) => return Err(bad("bench.model_dt must be positive")),
        None => None,
    };
    let horizon = b.t_s * b.rounds as f64;
    let reference = states
        .iter()
        .map(|u| Ok(reference_flow(&ctx.system, u, horizon, b.tol)?.coords))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut solvers: Vec<Solver<'_, f64>> = schemes.into_iter().map(Solver::Scheme).collect();
    if let Some(((m, ps), dt)) = &model {
        solvers.push(Solver::FlowMap { name: "model".into(), map: m, params: ps, dt: *dt });
    }
    let reports = benchmark(&solvers, &ctx.system, &states, &reference, &settings)?;
    ctx.details.insert("reports".into(), serde_json::to_value(&reports).map_err(|e| CliError::Runtime(e.into()))?);
    let path = ctx.path("bench.csv");
    reports.write_csv(&path)?;
    Ok(())
}

fn verify_adjoint(p: Prepared, ctx: &mut Ctx) -> Result<(), CliError> {
    let a = ctx.cfg.adjoint.clone().expect("checked");
    let scheme = p.scheme.clone().expect("checked");
    let states = states_or_drawn(ctx, &a.states, a.n_states, 4)?;
    let (model, params) = load_or_init(ctx, p.architecture.clone())?;
    let grid = AdjointGrid::new(a.t0, a.last);
    let report = condition_scan(&model, &params, &scheme, &ctx.system, &states, &grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    rng.set_stream(5);
    let mut gaps = Vec::new();
    let mut transports = Vec::new();
    for u in &states {
        for _ in 0..a.directions {
            let psi = SineDirection::random(u.len(), a.t0, &mut rng);
            gaps.push(first_variation_check(&model, &params, &scheme, &ctx.system, u, &grid, &psi)?);
        }
        let chain = residual_sequence(&model, &params, &scheme, &ctx.system, u, &grid)?;
        transports.push(match backward_transport(&chain, &scheme, &ctx.system) {
            Ok(t) => json!({ "max_stationarity": t.max_stationarity(), "max_residual": chain.max_residual_norm() }),
            Err(e) => json!({ "error": e.to_string() }),
        });
    }
    let max_gap = gaps.iter().map(|g| g.gap).fold(0.0, f64::max);
    let path = ctx.path("conditions.csv");
    report.write_csv(&path)?;
    let summary = json!({
        "scheme": scheme.kind,
        "h": scheme.h,
        "min_margin": report.min_margin(),
        "degenerate_steps": report.degenerate_steps(),
        "passed": report.passed(),
        "max_first_variation_gap": max_gap,
        "first_variation": gaps,
        "transport": transports,
        "steps": report.steps,
    });
    ctx.details.insert("max_first_variation_gap".into(), json!(max_gap));
    ctx.details.insert("min_margin".into(), json!(report.min_margin()));
    let path = ctx.path("adjoint.json");
    fs::write(path, serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.into()))?)?;
    Ok(())
}
