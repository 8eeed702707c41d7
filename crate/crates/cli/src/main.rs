//! `fasterfc`: data generation, stage-wise training, reconstruction,
//! evaluation and block benchmarks from the command line.
//!
//! Exit status: 0 on success, 2 on usage errors (with usage text), 1 when
//! a command fails. Failures print one line `error: kind=<kind> <message>`.

mod data;
mod pgm;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fasterfc::bench::{bench_blocks, BenchConfig, BenchShape, MIN_RUNS, MIN_WARMUPS};
use fasterfc::blocks::BlockKind;
use fasterfc::container::{checkpoint, restore, Container};
use fasterfc::fasnet::{fasnet_train, raki_fill, FasNetModel, FasNetSpec};
use fasterfc::kspace::{knet_train, GroupExample, KNetModel, KNetSpec, LrSchedule, RakiSpec};
use fasterfc::metrics::evaluate_volume;
use fasterfc::simdata::{simulate, MaskSpec};
use fasterfc::unet::{build_unet, closed_form_ratio, count_params_closed_form, ClosedForm, UNetSpec};
use fasterfc::varnet::{VarNetModel, VarNetSpec};
use fasterfc::volume::zero_filled;
use fasterfc::{Error, Result, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "fasterfc", version, about = "Accelerated MRI reconstruction with FasterFC networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate multi-coil volumes and write one container per volume.
    GenData(GenData),
    /// Fill each volume's k-space with per-coil RAKI models.
    TrainRaki(TrainRaki),
    /// Train the group K-Net on RAKI-filled volumes.
    TrainKnet(TrainKnet),
    /// Train the split-slice image stage on K-Net coil images.
    TrainFasnet(TrainFasnet),
    /// Train an unrolled variational network on measured k-space.
    TrainVarnet(TrainVarnet),
    /// Reconstruct one volume with a trained model or zero filling.
    Reconstruct(Reconstruct),
    /// Per-slice NMSE, PSNR and SSIM of a reconstruction.
    Evaluate(Evaluate),
    /// Time FasterFC, FFC and two-conv blocks.
    Bench(Bench),
    /// Closed-form and enumerated U-Net parameter counts.
    CountParams(CountParams),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 1)]
    volumes: usize,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    /// Spatial extents, frequency axis first: `F,P,S` or `H,W`.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 32, 32])]
    extent: Vec<usize>,
    /// Lattice stride per phase axis (3D) or overall acceleration (2D).
    #[arg(long, default_value_t = 2)]
    af: usize,
    #[arg(long, default_value_t = 0.125)]
    center_frac: f64,
    /// Standard deviation of complex k-space noise.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRaki {
    /// Volume files written by gen-data.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.003)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the filled volumes.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainKnet {
    /// Volume files written by train-raki.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory: `knet.nav` plus one coil-image file per volume.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFasnet {
    /// Coil-image files written by train-knet.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 260)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Slices per block.
    #[arg(long, default_value_t = 16)]
    block: usize,
    #[arg(long, default_value_t = 2)]
    cascades: usize,
    #[arg(long, default_value_t = 18)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    sens_channels: usize,
    #[arg(long, default_value_t = 2)]
    sens_levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVarnet {
    /// Volume files written by gen-data.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "fasterfc")]
    kind: BlockKind,
    #[arg(long, default_value_t = 4)]
    cascades: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Method {
    ZeroFilled,
    Varnet,
    Fasnet,
}

#[derive(Args)]
struct Reconstruct {
    /// A gen-data volume (zero-filled, varnet, fasnet) file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::ZeroFilled)]
    method: Method,
    /// VarNet or FAS-Net checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// K-Net checkpoint, for the FAS-Net pipeline.
    #[arg(long)]
    knet: Option<PathBuf>,
    /// RAKI epochs, for the FAS-Net pipeline.
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output container with `recon` and `target`.
    #[arg(long)]
    out: PathBuf,
    /// Also write 16-bit PGM slices into this directory.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "recon")]
    pred_entry: String,
    #[arg(long, default_value = "target")]
    gt_entry: String,
    /// CSV report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Bench {
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Spatial extents, e.g. `320,320`.
    #[arg(long, value_delimiter = ',', default_values_t = [320, 320])]
    extent: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = BlockKind::ALL)]
    kinds: Vec<BlockKind>,
    #[arg(long, default_value_t = MIN_RUNS)]
    repeats: usize,
    #[arg(long, default_value_t = MIN_WARMUPS)]
    warmups: usize,
    /// Skip the forward-plus-backward timings.
    #[arg(long)]
    no_backward: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CountParams {
    /// unet, ffc-unet or fasterfc-unet.
    #[arg(long)]
    kind: BlockKind,
    #[arg(long = "c", default_value_t = 32)]
    channels: usize,
    #[arg(long = "L", default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 1)]
    in_channels: usize,
    #[arg(long, default_value_t = 1)]
    out_channels: usize,
}

/// Command line, seed and version, embedded in every artifact.
fn provenance(seed: Option<u64>) -> String {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = seed.map_or(String::new(), |s| format!(" seed={s}"));
    format!("fasterfc {}{seed} args=[{}]", env!("CARGO_PKG_VERSION"), args.join(" "))
}

fn need_positive(name: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Invalid {
            op: "cli",
            detail: format!("--{name} must be positive"),
        });
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or("volume".into(), |s| s.to_string_lossy().into_owned())
}

/// The step schedule with the decay at the same fraction of training.
fn scaled(reference: LrSchedule, epochs: usize, lr: f64) -> LrSchedule {
    LrSchedule {
        base: lr,
        decayed: lr * reference.decayed / reference.base,
        switch_epoch: (epochs * reference.switch_epoch).div_ceil(reference.epochs),
        epochs,
    }
}

fn gen_data(a: GenData) -> Result<()> {
    need_positive("volumes", a.volumes)?;
    need_positive("coils", a.coils)?;
    let mask = |seed| match a.extent.len() {
        3 => Ok(MaskSpec::equispaced_2d([a.af, a.af], a.center_frac)),
        2 => Ok(MaskSpec::random_1d(a.af, a.center_frac, seed)),
        n => Err(Error::Invalid {
            op: "gen-data",
            detail: format!("--extent needs 2 or 3 values, got {n}"),
        }),
    };
    for i in 0..a.volumes {
        let seed = a.seed.wrapping_add(1000 * i as u64);
        let acq = simulate(seed, &a.extent, a.coils, a.sigma, &mask(seed)?)?;
        let mut c = Container::new();
        c.set_provenance(&provenance(Some(seed)));
        c.push("target", acq.target)?;
        c.push("full", acq.full)?;
        data::put_kspace(&mut c, &acq.measured)?;
        data::put_meta(&mut c, "af", a.af as f64)?;
        data::save(&c, &a.out.join(format!("volume-{i:03}.nav")))?;
    }
    println!("wrote {} volumes to {}", a.volumes, a.out.display());
    Ok(())
}

fn train_raki(a: TrainRaki) -> Result<()> {
    for path in &a.data {
        let c = data::load(path)?;
        let k = data::kspace(&c)?;
        let mut spec = RakiSpec::standard(data::meta_usize(&c, "af")?);
        spec.epochs = a.epochs;
        spec.lr = a.lr;
        let filled = raki_fill(&k, &spec, a.seed)?;
        let mut out = Container::new();
        out.set_provenance(&provenance(Some(a.seed)));
        data::copy_entries(&c, &mut out)?;
        out.push("filled", filled)?;
        let dest = a.out.join(format!("{}.nav", stem(path)));
        data::save(&out, &dest)?;
        println!("filled {} -> {}", path.display(), dest.display());
    }
    Ok(())
}

fn train_knet(a: TrainKnet) -> Result<()> {
    let mut group = Vec::with_capacity(a.data.len());
    for path in &a.data {
        let c = data::load(path)?;
        group.push(GroupExample {
            filled: data::complex(&c, "filled")?,
            measured: data::kspace(&c)?,
            target: data::tensor(&c, "target")?,
        });
    }
    let coils = group[0].measured.coils();
    let spec = KNetSpec {
        channels: a.channels,
        levels: a.levels,
        ..KNetSpec::standard(coils)
    };
    let schedule = scaled(LrSchedule::knet(), a.epochs, a.lr);
    let (model, history) = knet_train(&group, spec, schedule, a.seed)?;
    let mut ck = checkpoint(&model.store, &provenance(Some(a.seed)))?;
    data::put_meta(&mut ck, "channels", a.channels as f64)?;
    data::put_meta(&mut ck, "levels", a.levels as f64)?;
    data::put_meta(&mut ck, "coils", coils as f64)?;
    data::save(&ck, &a.out.join("knet.nav"))?;
    for (path, ex) in a.data.iter().zip(&group) {
        let mut out = Container::new();
        out.set_provenance(&provenance(Some(a.seed)));
        out.push("coils", model.reconstruct(&ex.filled, &ex.measured)?)?;
        out.push("target", ex.target.clone())?;
        data::save(&out, &a.out.join(format!("{}.coils.nav", stem(path))))?;
    }
    println!("final loss {}", history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn load_knet(path: &Path) -> Result<KNetModel> {
    let c = data::load(path)?;
    let spec = KNetSpec {
        channels: data::meta_usize(&c, "channels")?,
        levels: data::meta_usize(&c, "levels")?,
        ..KNetSpec::standard(data::meta_usize(&c, "coils")?)
    };
    let mut m = KNetModel::new(spec, 0)?;
    restore(&mut m.store, &c)?;
    Ok(m)
}

fn fasnet_meta(c: &mut Container, s: &FasNetSpec) -> Result<()> {
    for (k, v) in [
        ("block", s.block),
        ("cascades", s.cascades),
        ("channels", s.channels),
        ("levels", s.levels),
        ("sens-channels", s.sens_channels),
        ("sens-levels", s.sens_levels),
    ] {
        data::put_meta(c, k, v as f64)?;
    }
    Ok(())
}

fn train_fasnet(a: TrainFasnet) -> Result<()> {
    let volumes = a
        .data
        .iter()
        .map(|p| {
            let c = data::load(p)?;
            Ok((data::complex(&c, "coils")?, data::tensor(&c, "target")?))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = FasNetSpec {
        block: a.block,
        cascades: a.cascades,
        kind: BlockKind::FasterFc,
        sens_channels: a.sens_channels,
        sens_levels: a.sens_levels,
        channels: a.channels,
        levels: a.levels,
        schedule: scaled(LrSchedule::fasnet(), a.epochs, a.lr),
    };
    let (model, history) = fasnet_train(&volumes, spec, a.seed)?;
    let mut ck = checkpoint(&model.store, &provenance(Some(a.seed)))?;
    fasnet_meta(&mut ck, &spec)?;
    data::save(&ck, &a.out)?;
    println!("final loss {}", history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn load_fasnet(path: &Path) -> Result<FasNetModel> {
    let c = data::load(path)?;
    let spec = FasNetSpec {
        block: data::meta_usize(&c, "block")?,
        cascades: data::meta_usize(&c, "cascades")?,
        kind: BlockKind::FasterFc,
        sens_channels: data::meta_usize(&c, "sens-channels")?,
        sens_levels: data::meta_usize(&c, "sens-levels")?,
        channels: data::meta_usize(&c, "channels")?,
        levels: data::meta_usize(&c, "levels")?,
        schedule: LrSchedule::fasnet(),
    };
    let mut m = FasNetModel::new(spec, 0)?;
    restore(&mut m.store, &c)?;
    Ok(m)
}

fn kind_code(k: BlockKind) -> f64 {
    BlockKind::ALL.iter().position(|&x| x == k).unwrap_or(0) as f64
}

fn train_varnet(a: TrainVarnet) -> Result<()> {
    let batch = a
        .data
        .iter()
        .map(|p| {
            let c = data::load(p)?;
            Ok((data::kspace(&c)?, data::tensor(&c, "target")?))
        })
        .collect::<Result<Vec<_>>>()?;
    let rank = batch[0].1.ndim();
    let spec = VarNetSpec::uniform(a.kind, a.cascades, a.channels, a.levels, rank);
    let mut model = VarNetModel::new(spec, a.seed)?;
    let mut last = f64::NAN;
    for _ in 0..a.epochs {
        for item in &batch {
            last = model.train_step(std::slice::from_ref(item), a.lr)?;
        }
    }
    let mut ck = checkpoint(&model.store, &provenance(Some(a.seed)))?;
    data::put_meta(&mut ck, "kind", kind_code(a.kind))?;
    data::put_meta(&mut ck, "cascades", a.cascades as f64)?;
    data::put_meta(&mut ck, "channels", a.channels as f64)?;
    data::put_meta(&mut ck, "levels", a.levels as f64)?;
    data::put_meta(&mut ck, "rank", rank as f64)?;
    data::save(&ck, &a.out)?;
    println!("final loss {last}");
    Ok(())
}

fn load_varnet(path: &Path) -> Result<VarNetModel> {
    let c = data::load(path)?;
    let kind = BlockKind::ALL
        .get(data::meta_usize(&c, "kind")?)
        .copied()
        .ok_or_else(|| Error::Container {
            msg: "meta:kind out of range".into(),
            offset: 0,
        })?;
    let spec = VarNetSpec::uniform(
        kind,
        data::meta_usize(&c, "cascades")?,
        data::meta_usize(&c, "channels")?,
        data::meta_usize(&c, "levels")?,
        data::meta_usize(&c, "rank")?,
    );
    let mut m = VarNetModel::new(spec, 0)?;
    restore(&mut m.store, &c)?;
    Ok(m)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &'static str) -> Result<&'a Path> {
    p.as_deref().ok_or(Error::Invalid {
        op: "reconstruct",
        detail: format!("--{flag} is required for this method"),
    })
}

fn reconstruct(a: Reconstruct) -> Result<()> {
    let c = data::load(&a.data)?;
    let k = data::kspace(&c)?;
    let recon = match a.method {
        Method::ZeroFilled => zero_filled(&k),
        Method::Varnet => load_varnet(required(&a.model, "model")?)?.reconstruct(&k)?,
        Method::Fasnet => {
            let knet = load_knet(required(&a.knet, "knet")?)?;
            let fas = load_fasnet(required(&a.model, "model")?)?;
            let mut spec = RakiSpec::standard(data::meta_usize(&c, "af")?);
            spec.epochs = a.epochs;
            let filled = raki_fill(&k, &spec, a.seed)?;
            fas.reconstruct(&knet.reconstruct(&filled, &k)?)?
        }
    };
    let mut out = Container::new();
    out.set_provenance(&provenance(Some(a.seed)));
    if let Some(dir) = &a.pgm {
        let n = pgm::export_slices(&recon, dir)?;
        println!("wrote {n} slices to {}", dir.display());
    }
    out.push("recon", recon)?;
    out.push("target", data::tensor(&c, "target")?)?;
    data::save(&out, &a.out)?;
    Ok(())
}

fn evaluate(a: Evaluate) -> Result<()> {
    let pred = data::load(&a.pred)?.tensor(&a.pred_entry)?.clone();
    let gt = data::load(&a.gt)?.tensor(&a.gt_entry)?.clone();
    // a 2D image is a volume of one slice
    let as_volume = |t: Tensor| match t.ndim() {
        2 => {
            let s = [1, t.shape()[0], t.shape()[1]];
            t.reshape(&s)
        }
        _ => Ok(t),
    };
    let report = evaluate_volume(&as_volume(pred)?, &as_volume(gt)?)?;
    std::fs::write(&a.out, report.to_csv(&provenance(None)))?;
    println!(
        "slices={} mean-nmse={} mean-psnr={} mean-ssim={}",
        report.slices(),
        report.mean_nmse,
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

fn bench(a: Bench) -> Result<()> {
    let shape = BenchShape {
        channels: a.channels,
        spatial: a.extent,
    };
    let cfg = BenchConfig {
        warmups: a.warmups,
        runs: a.repeats,
        backward: !a.no_backward,
        seed: a.seed,
    };
    let report = bench_blocks(&[shape], &a.kinds, cfg)?;
    let csv = report.to_csv(&provenance(Some(a.seed)));
    match &a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn count_params(a: CountParams) -> Result<()> {
    let spec = UNetSpec::new(a.kind, a.channels, a.levels, a.in_channels, a.out_channels, 2);
    let enumerated = build_unet(spec, 0)?.count_params();
    let (c, l) = (a.channels as u64, a.levels as u32);
    println!("kind={} c={c} L={l}", a.kind);
    match a.kind {
        BlockKind::TwoConv => println!("closed-form={}", count_params_closed_form(ClosedForm::UNet, c, l)),
        BlockKind::FasterFc => println!("closed-form={}", count_params_closed_form(ClosedForm::FasterFcUNet, c, l)),
        BlockKind::Ffc => println!("closed-form=none"),
    }
    println!("enumerated={enumerated}");
    println!("r={}", closed_form_ratio(c, l));
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Invalid { .. } => "invalid",
        Error::Indivisible { .. } => "indivisible",
        Error::BackwardTwice | Error::NonScalarLoss(_) => "autodiff",
        Error::NonFinite(_) => "non-finite",
        Error::Container { .. } => "container",
        Error::Io(_) => "io",
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainRaki(a) => train_raki(a),
        Command::TrainKnet(a) => train_knet(a),
        Command::TrainFasnet(a) => train_fasnet(a),
        Command::TrainVarnet(a) => train_varnet(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
        Command::CountParams(a) => count_params(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 and usage text on malformed command lines
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} {msg}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}
