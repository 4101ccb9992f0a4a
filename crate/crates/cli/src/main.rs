use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dualarb::checkpoint::load_checkpoint;
use dualarb::curriculum::{CurriculumSchedule, Strategy};
use dualarb::dataset::{generate_dataset, read_slice, write_slice, DatasetManifest, DatasetSpec, Split};
use dualarb::eval::{
    ablation_variants, evaluate, exact_lr_dims, run_variant, Bicubic, ModelMethod, Nearest, SrMethod, Variant,
};
use dualarb::geometry::RefMode;
use dualarb::inference::super_resolve;
use dualarb::kspace::{degrade, lowpass_mask};
use dualarb::model::ModelConfig;
use dualarb::render::{error_map, gray_png, mask_png};
use dualarb::trainer::{fit, PairSet, TrainConfig, TrainState, LAST_CHECKPOINT};
use dualarb_service::{AppState, Catalog, ModelSnapshot, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "dualarb",
    version,
    about = "Dual arbitrary-scale multi-contrast MRI super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-contrast phantom dataset with split manifests.
    PhantomGen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        #[arg(long, default_value_t = 4)]
        slices: usize,
        /// HxW, multiples of 24 keep every table scale integral.
        #[arg(long, default_value = "96x96", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 10)]
        ellipses: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Low-pass k-space degradation of a dataset directory or a single slice.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a training config to edit.
    InitConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the curriculum schedule; resumes from OUT/last.ckpt when present.
    Train {
        /// JSON training config; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_k_loss: bool,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Comma-separated component switches: w/o-ref, w/o-scale, w/o-coord.
        #[arg(long)]
        ablate: Option<String>,
        /// Stop after this many epochs in this run.
        #[arg(long)]
        epochs: Option<usize>,
        /// Ignore an existing OUT/last.ckpt.
        #[arg(long)]
        fresh: bool,
    },
    /// Per-scale PSNR/SSIM of a checkpoint against nearest and bicubic.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.5,2,3,4,6,8")]
        scales: Vec<f64>,
        #[arg(long = "ref", default_value = "hr")]
        ref_mode: RefMode,
        #[arg(long, default_value = "test")]
        split: String,
        /// report.json and/or report.md, comma-separated.
        #[arg(long, value_delimiter = ',')]
        out: Vec<PathBuf>,
        /// Write model error maps here.
        #[arg(long)]
        error_maps: Option<PathBuf>,
    },
    /// Train every ablation variant briefly and write one report per variant and reference mode.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Semicolon-separated variants, e.g. "random;w/o-ref,w/o-coord"; all when omitted.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, value_delimiter = ',', default_value = "1.5,2,3,4,6,8")]
        scales: Vec<f64>,
    },
    /// Super-resolve one slice.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        scale: f64,
        /// sr.mrs and/or sr.png, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        out: Vec<PathBuf>,
    },
    /// Serve the reconstruction API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Acquisition factor simulated for the LR views.
        #[arg(long, default_value_t = 2.0)]
        lr_scale: f64,
        #[arg(long, default_value_t = 4)]
        cache: usize,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn is_slice_path(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("mrs" | "bin"))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(TrainConfig::desk()),
    }
}

fn load_split(root: &Path, split: Split) -> Result<PairSet> {
    let m = DatasetManifest::load(root, split).with_context(|| format!("loading {} split", split.as_str()))?;
    Ok(PairSet::load(&m)?)
}

fn phantom_gen(spec: DatasetSpec, out: &Path) -> Result<()> {
    let splits = generate_dataset(out, &spec)?;
    for m in &splits {
        println!(
            "{}: {} slices from {} subjects",
            m.split.as_str(),
            m.entries.len(),
            m.subjects().len()
        );
    }
    Ok(())
}

fn degrade_cmd(input: &Path, scale: f64, out: &Path) -> Result<()> {
    if is_slice_path(input) {
        let img = read_slice(input)?;
        let lr = degrade(&img, scale)?;
        write_slice(&lr, out)?;
        let mask = lowpass_mask(img.dims(), lr.dims())?;
        let mask_path = out.with_extension("mask.png");
        fs::write(&mask_path, mask_png(&mask)?)?;
        println!("{:?} -> {:?}, mask {}", img.dims(), lr.dims(), mask_path.display());
        return Ok(());
    }
    let mut masks = std::collections::BTreeMap::new();
    let mut found = false;
    for split in Split::ALL {
        if !DatasetManifest::manifest_path(input, split).exists() {
            continue;
        }
        found = true;
        let m = DatasetManifest::load(input, split)?;
        let mut entries = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            let mut dims = e.dims;
            for rel in [&e.target_path, &e.reference_path] {
                let img = read_slice(&input.join(rel))?;
                let lr = degrade(&img, scale)?;
                write_slice(&lr, &out.join(rel))?;
                masks.insert(img.dims(), lowpass_mask(img.dims(), lr.dims())?);
                dims = [lr.pixels.h, lr.pixels.w];
            }
            let mut e = e.clone();
            e.dims = dims;
            entries.push(e);
        }
        let n = entries.len();
        DatasetManifest {
            split,
            root: out.to_path_buf(),
            entries,
        }
        .save()?;
        println!("{}: {n} pairs degraded by {scale}", split.as_str());
    }
    if !found {
        bail!("{} has no split manifests and is not a slice file", input.display());
    }
    let single = masks.len() == 1;
    for ((h, w), mask) in &masks {
        let name = if single {
            "mask.png".to_string()
        } else {
            format!("mask_{h}x{w}.png")
        };
        fs::write(out.join(&name), mask_png(mask)?)?;
        println!("mask {name}: {} of {} coefficients kept", mask.ones(), h * w);
    }
    Ok(())
}

fn init_config(preset: &str, out: &Path) -> Result<()> {
    let mut cfg = TrainConfig::desk();
    match preset {
        "desk" => {}
        "full" => {
            cfg.model = ModelConfig::full();
            cfg.schedule = CurriculumSchedule::full();
            cfg.steps_per_epoch = None;
            cfg.valid_pairs = None;
        }
        "tiny" => cfg.model = ModelConfig::tiny(),
        other => bail!("unknown preset {other:?} (desk, full, tiny)"),
    }
    fs::write(out, serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(())
}

struct TrainArgs<'a> {
    config: Option<&'a Path>,
    data: &'a Path,
    out: &'a Path,
    no_k_loss: bool,
    strategy: Option<Strategy>,
    ablate: Option<&'a str>,
    epochs: Option<usize>,
    fresh: bool,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config)?;
    if a.no_k_loss {
        cfg.k_loss = false;
    }
    if let Some(s) = a.strategy {
        cfg.schedule = cfg.schedule.with_strategy(s);
    }
    if let Some(flags) = a.ablate {
        let mut v = Variant {
            strategy: cfg.schedule.strategy,
            k_loss: cfg.k_loss,
            ..Variant::default()
        };
        for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            v = v.with_flag(f)?;
        }
        cfg = v.apply(&cfg);
    }
    let train = load_split(a.data, Split::Train)?;
    let valid = match load_split(a.data, Split::Valid) {
        Ok(v) if !v.is_empty() => Some(v),
        _ => None,
    };
    let last = a.out.join(LAST_CHECKPOINT);
    let mut state = if last.exists() && !a.fresh {
        let ck = load_checkpoint(&last)?;
        if ck.state.config != cfg {
            bail!(
                "{} was trained with a different config; pass --fresh to start over",
                last.display()
            );
        }
        log::info!("resuming at epoch {} step {}", ck.state.epoch, ck.state.step);
        ck.state
    } else {
        if a.fresh && a.out.join(dualarb::trainer::LOG_FILE).exists() {
            fs::remove_file(a.out.join(dualarb::trainer::LOG_FILE))?;
        }
        TrainState::new(cfg)?
    };
    fs::create_dir_all(a.out)?;
    fs::write(
        a.out.join("config.json"),
        serde_json::to_string_pretty(&state.config)? + "\n",
    )?;
    fit(&mut state, &train, valid.as_ref(), Some(a.out), a.epochs, &mut |s| {
        println!(
            "epoch {:>3} {:<13} lr {:.1e} l_full {:.5} valid {}",
            s.epoch,
            s.stage.as_str(),
            s.lr,
            s.mean_l_full,
            s.valid_psnr.map_or("-".to_string(), |p| format!("{p:.2} dB"))
        );
    })?;
    Ok(())
}

fn write_reports(reports: &[dualarb::eval::EvalReport], outs: &[PathBuf]) -> Result<()> {
    for out in outs {
        let text = match out.extension().and_then(|e| e.to_str()) {
            Some("md") => reports.iter().map(|r| r.to_markdown()).collect::<Vec<_>>().join("\n"),
            _ if reports.len() == 1 => serde_json::to_string_pretty(&reports[0])? + "\n",
            _ => serde_json::to_string_pretty(reports)? + "\n",
        };
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(out, text)?;
    }
    Ok(())
}

struct EvalArgs<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    scales: &'a [f64],
    ref_mode: RefMode,
    split: &'a str,
    out: &'a [PathBuf],
    error_maps: Option<&'a Path>,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = Split::ALL
        .into_iter()
        .find(|s| s.as_str() == a.split)
        .with_context(|| format!("unknown split {:?}", a.split))?;
    let ck = load_checkpoint(a.ckpt)?;
    let net = &ck.state.net;
    let data = load_split(a.data, split)?;
    let model = ModelMethod {
        label: "dual-arbnet".into(),
        net,
    };
    let methods: [&dyn SrMethod; 3] = [&Nearest, &Bicubic, &model];
    let report = evaluate(
        &format!("{} ({})", a.ckpt.display(), a.split),
        &methods,
        &data,
        a.scales,
        a.ref_mode,
    )?;
    print!("{}", report.to_markdown());
    write_reports(std::slice::from_ref(&report), a.out)?;
    if let Some(dir) = a.error_maps {
        fs::create_dir_all(dir)?;
        for (id, (hr, reference)) in data.ids.iter().zip(&data.pairs) {
            for &s in a.scales {
                let lr_dims = exact_lr_dims(hr.dims(), s)?;
                let lr = dualarb::kspace::degrade_to(&hr.cast::<f64>(), lr_dims)?.cast::<f32>();
                let reference = match a.ref_mode {
                    RefMode::Lr => dualarb::kspace::degrade_to(&reference.cast::<f64>(), lr_dims)?.cast::<f32>(),
                    _ => reference.clone(),
                };
                let sr = super_resolve(net, &lr, Some(&reference), s)?.map(|v| v.clamp(0.0, 1.0));
                let em = error_map(&sr, hr)?;
                let name = format!("{}_x{s}.png", id.replace('/', "_"));
                fs::write(dir.join(&name), em.to_png(None)?)?;
                log::info!("{name}: max error {:.4}", em.max);
            }
        }
    }
    Ok(())
}

fn ablate(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    variants: Option<&str>,
    epochs: usize,
    scales: &[f64],
) -> Result<()> {
    let base = load_config(config)?;
    let variants: Vec<Variant> = match variants {
        Some(list) => list
            .split(';')
            .filter(|v| !v.trim().is_empty())
            .map(|v| v.parse::<Variant>())
            .collect::<dualarb::Result<_>>()?,
        None => ablation_variants(),
    };
    let train = load_split(data, Split::Train)?;
    let test = load_split(data, Split::Test)?;
    fs::create_dir_all(out)?;
    let mut all = Vec::new();
    for v in &variants {
        let reports = run_variant(&base, v, epochs, &train, &test, scales)?;
        for r in &reports {
            let name = format!("{}_{}.json", v.label.replace('/', ""), r.ref_mode.as_str());
            fs::write(out.join(name), serde_json::to_string_pretty(r)? + "\n")?;
        }
        all.extend(reports);
    }
    write_reports(&all, &[out.join("ablation.md")])?;
    println!("{} reports written to {}", all.len(), out.display());
    Ok(())
}

fn infer(ckpt: &Path, input: &Path, reference: Option<&Path>, scale: f64, outs: &[PathBuf]) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let net = &ck.state.net;
    let tar = read_slice(input)?;
    let reference = reference.map(read_slice).transpose()?;
    if net.config.use_ref && reference.is_none() {
        bail!("this model needs --ref");
    }
    let sr = super_resolve(net, &tar.pixels, reference.as_ref().map(|r| &r.pixels), scale)?;
    for out in outs {
        match out.extension().and_then(|e| e.to_str()) {
            Some("png") => fs::write(out, gray_png(&sr, 0.0, 1.0)?)?,
            _ => write_slice(&tar.with_pixels(sr.clone()), out)?,
        }
    }
    println!("{:?} -> {:?}", tar.dims(), sr.dims());
    Ok(())
}

fn serve(ckpt: &Path, data: &Path, host: &str, port: u16, lr_scale: f64, cache: usize) -> Result<()> {
    let catalog = Catalog::load(data, lr_scale)?;
    let state = AppState::new(
        catalog,
        ServiceConfig {
            cache_entries: cache,
            ..ServiceConfig::default()
        },
    );
    state.install(ModelSnapshot::load(ckpt)?);
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(dualarb_service::serve(Arc::new(state), addr))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::PhantomGen {
            seed,
            subjects,
            slices,
            size,
            ellipses,
            out,
        } => phantom_gen(
            DatasetSpec {
                seed,
                subjects,
                slices_per_subject: slices,
                dims: size,
                n_ellipses: ellipses,
                ..DatasetSpec::default()
            },
            &out,
        ),
        Cmd::Degrade { input, scale, out } => degrade_cmd(&input, scale, &out),
        Cmd::InitConfig { preset, out } => init_config(&preset, &out),
        Cmd::Train {
            config,
            data,
            out,
            no_k_loss,
            strategy,
            ablate,
            epochs,
            fresh,
        } => train(TrainArgs {
            config: config.as_deref(),
            data: &data,
            out: &out,
            no_k_loss,
            strategy,
            ablate: ablate.as_deref(),
            epochs,
            fresh,
        }),
        Cmd::Eval {
            ckpt,
            data,
            scales,
            ref_mode,
            split,
            out,
            error_maps,
        } => eval_cmd(EvalArgs {
            ckpt: &ckpt,
            data: &data,
            scales: &scales,
            ref_mode,
            split: &split,
            out: &out,
            error_maps: error_maps.as_deref(),
        }),
        Cmd::Ablate {
            config,
            data,
            out,
            variants,
            epochs,
            scales,
        } => ablate(config.as_deref(), &data, &out, variants.as_deref(), epochs, &scales),
        Cmd::Infer {
            ckpt,
            input,
            reference,
            scale,
            out,
        } => infer(&ckpt, &input, reference.as_deref(), scale, &out),
        Cmd::Serve {
            ckpt,
            data,
            port,
            host,
            lr_scale,
            cache,
        } => serve(&ckpt, &data, &host, port, lr_scale, cache),
    }
}
