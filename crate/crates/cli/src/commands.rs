use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use mobileie::archive::{archive_from_net, net_from_archive, parameter_total, Archive, Header};
use mobileie::bench::{compare_inference, time_inference};
use mobileie::data::{is_image_path, list_images, load_input, load_pairs, save_image, synthetic_pairs};
use mobileie::metrics::{export_kernel_delta, kernel_delta, kl_channel_matrix, mae, psnr, ssim};
use mobileie::network::{fused_param_formula, named_kernels, Form, MobileIeNet, TrainNet};
use mobileie::train::{Trainer, LOG_HEADER};
use mobileie::{Error, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::TrainArgs;

const BENCH_WARMUP: usize = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::numeric(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn load_model(path: &Path) -> Result<(MobileIeNet<f32>, Header), Failure> {
    Ok(net_from_archive(&Archive::read(path)?)?)
}

fn require_form(net: &MobileIeNet<f32>, form: Form, path: &Path) -> Outcome {
    if net.form() != form {
        return Err(Failure::usage(format!(
            "{} holds a {:?}-form network, this command needs {:?}",
            path.display(),
            net.form(),
            form
        )));
    }
    Ok(())
}

fn random_input(net: &MobileIeNet<f32>, (h, w): (usize, usize), rng: &mut ChaCha8Rng) -> Tensor4<f32> {
    Tensor4::random_uniform([1, net.config().variant.in_channels(), h, w], 0.0, 1.0, rng)
}

pub fn train(args: &TrainArgs) -> Outcome {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.check()?;
    let seed = cfg.train.seed;

    let (net, start) = match &args.resume {
        Some(path) => {
            let (net, header) = load_model(path)?;
            let MobileIeNet::Train(net) = net else {
                return Err(Failure::usage(format!("{} is fused and cannot be trained", path.display())));
            };
            if cfg.explicit_model && cfg.model != header.config {
                return Err(Failure::usage(format!(
                    "config model {:?} differs from checkpoint {:?}",
                    cfg.model, header.config
                )));
            }
            cfg.model = header.config.clone();
            (net, header.epoch)
        }
        None => (TrainNet::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(seed)), 0),
    };
    let variant = cfg.model.variant;

    let (train_set, val_set) = match (&args.data, args.synthetic) {
        (Some(dir), _) => {
            let val = match &args.val {
                Some(v) => load_pairs(v, variant)?,
                None => Vec::new(),
            };
            (load_pairs(dir, variant)?, val)
        }
        (None, Some(n)) => {
            let s = cfg.data.size;
            (
                synthetic_pairs(variant, n, s, s, seed)?,
                synthetic_pairs(variant, cfg.data.val_pairs, s, s, seed.wrapping_add(1 << 32))?,
            )
        }
        (None, None) => return Err(Failure::usage("one of --data or --synthetic is required")),
    };
    if train_set.is_empty() {
        return Err(Failure::usage("no training pairs"));
    }

    fs::create_dir_all(&args.out).map_err(|e| io_fail(&args.out, e))?;
    let log_path = args.out.join("train_log.csv");
    let append = args.resume.is_some() && log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| io_fail(&log_path, e))?;
    if !append {
        writeln!(log, "{LOG_HEADER}").map_err(|e| io_fail(&log_path, e))?;
    }

    let mut trainer = Trainer::new(net, cfg.train.clone(), cfg.loss.clone())?;
    trainer.epoch = start;
    println!(
        "training {:?} C={} on {} pairs ({} held out), epochs {}..{}, {} fused parameters",
        variant,
        cfg.model.channels,
        train_set.len(),
        val_set.len(),
        start,
        cfg.train.total_epochs,
        fused_param_formula(&cfg.model)
    );

    let every = cfg.train.checkpoint_every;
    let mut last = BTreeMap::new();
    trainer.run(&train_set, &val_set, |rec, t| {
        writeln!(log, "{rec}").map_err(|e| Error::Io {
            path: log_path.display().to_string(),
            source: e,
        })?;
        println!("{rec}");
        last = BTreeMap::from([
            ("lr".to_string(), rec.lr),
            ("train_loss".to_string(), rec.train_loss),
            ("val_psnr".to_string(), rec.val_psnr),
        ]);
        let done = rec.epoch + 1;
        if every > 0 && done % every == 0 {
            let mut net = MobileIeNet::Train(t.net.clone());
            archive_from_net(&mut net, done, last.clone())?.write(&args.out.join(format!("epoch_{done:04}.miew")))?;
        }
        Ok(())
    })?;

    let mut net = MobileIeNet::Train(trainer.net);
    let final_path = args.out.join("final.miew");
    archive_from_net(&mut net, trainer.epoch, last)?.write(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

pub fn fuse(input: &Path, out: &Path) -> Outcome {
    let (net, header) = load_model(input)?;
    if net.form() == Form::Fused {
        return Err(Failure::usage(format!("{} is already fused", input.display())));
    }
    let mut fused = net.fuse()?;
    archive_from_net(&mut fused, header.epoch, header.metrics)?.write(out)?;
    let audit = fused.param_count();
    for (name, n) in &audit.layers {
        println!("{name:<12} {n}");
    }
    println!("parameters {}", parameter_total(&mut fused));
    Ok(())
}

pub fn verify(train: &Path, fused: &Path, trials: usize, tol: f64, size: (usize, usize), seed: u64) -> Outcome {
    let (a, _) = load_model(train)?;
    let (b, _) = load_model(fused)?;
    require_form(&a, Form::Train, train)?;
    require_form(&b, Form::Fused, fused)?;
    if a.config() != b.config() {
        return Err(Failure::usage(format!("configs differ: {:?} vs {:?}", a.config(), b.config())));
    }
    if trials == 0 {
        return Err(Failure::usage("--trials must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..trials {
        let x = random_input(&a, size, &mut rng);
        let d = a.infer_raw(&x)?.max_abs_diff(&b.infer_raw(&x)?);
        // f64::max would drop a NaN.
        worst = if d.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(d) };
    }
    println!("max abs deviation {worst:.3e} over {trials} inputs (tolerance {tol:.1e})");
    if worst <= tol {
        Ok(())
    } else {
        Err(Failure::numeric(format!("deviation {worst:.3e} exceeds {tol:.1e}")))
    }
}

fn output_path(input: &Path, out_dir: &Path, channels: usize) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = match input.extension().map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "png" => "png",
        _ if channels == 3 => "ppm",
        _ => "pgm",
    };
    out_dir.join(format!("{stem}.{ext}"))
}

pub fn infer(model: &Path, input: &Path, out: &Path) -> Outcome {
    let (net, _) = load_model(model)?;
    require_form(&net, Form::Fused, model)?;
    let files = if input.is_dir() {
        list_images(input)?
    } else if is_image_path(input) || input.exists() {
        vec![input.to_path_buf()]
    } else {
        return Err(Failure::usage(format!("{}: no such file or directory", input.display())));
    };
    fs::create_dir_all(out).map_err(|e| io_fail(out, e))?;
    let variant = net.config().variant;
    let mut failed = 0;
    for f in &files {
        let res = load_input(f, variant)
            .and_then(|x| net.infer(&x))
            .and_then(|y| {
                let p = output_path(f, out, y.c());
                save_image(&y, &p).map(|_| p)
            });
        match res {
            Ok(p) => println!("{} -> {}", f.display(), p.display()),
            Err(e) => {
                failed += 1;
                eprintln!("failed {}: {e}", f.display());
            }
        }
    }
    println!("{} of {} images enhanced", files.len() - failed, files.len());
    if failed > 0 {
        return Err(Failure::usage(format!("{failed} of {} inputs failed", files.len())));
    }
    Ok(())
}

pub fn eval(model: &Path, data: &Path) -> Outcome {
    let (net, _) = load_model(model)?;
    require_form(&net, Form::Fused, model)?;
    let pairs = load_pairs(data, net.config().variant)?;
    if pairs.is_empty() {
        return Err(Failure::usage(format!("{}: no pairs", data.display())));
    }
    let (mut p, mut s, mut m) = (0.0, 0.0, 0.0);
    for pair in &pairs {
        let y = net.infer(&pair.degraded)?;
        p += psnr(&y, &pair.ground_truth)?;
        s += ssim(&y, &pair.ground_truth)?;
        m += mae(&y, &pair.ground_truth)?;
    }
    let n = pairs.len() as f64;
    println!("pairs {}", pairs.len());
    println!("psnr {:.4}", p / n);
    println!("ssim {:.6}", s / n);
    println!("mae {:.6}", m / n);
    Ok(())
}

pub fn bench(model: &Path, size: (usize, usize), iters: usize) -> Outcome {
    let (net, _) = load_model(model)?;
    let x = random_input(&net, size, &mut ChaCha8Rng::seed_from_u64(0));
    let (h, w) = size;
    let fused = match net.form() {
        Form::Fused => net,
        Form::Train => {
            let fused = net.fuse()?;
            let (t, f) = compare_inference(&net, &fused, &x, BENCH_WARMUP, iters)?;
            println!("train  {h}x{w}: mean {:.3} ms, min {:.3} ms over {iters} iters", t.mean_ms, t.min_ms);
            println!("fused  {h}x{w}: mean {:.3} ms, min {:.3} ms over {iters} iters", f.mean_ms, f.min_ms);
            println!("speedup {:.2}x (mean), {:.2}x (min)", t.mean_ms / f.mean_ms, t.min_ms / f.min_ms);
            return Ok(());
        }
    };
    let f = time_inference(&fused, &x, BENCH_WARMUP, iters)?;
    println!("fused  {h}x{w}: mean {:.3} ms, min {:.3} ms over {iters} iters", f.mean_ms, f.min_ms);
    Ok(())
}

pub fn inspect(model: &Path, baseline: Option<&Path>, report: &Path) -> Outcome {
    let (mut net, _) = load_model(model)?;
    let kernels = named_kernels(&net);
    let base = match baseline {
        None => None,
        Some(b) => {
            let (other, _) = load_model(b)?;
            let by_name: HashMap<String, _> = named_kernels(&other).into_iter().map(|k| (k.name.clone(), k)).collect();
            if by_name.len() != kernels.len() {
                return Err(Failure::usage(format!("{} and {} hold different layers", model.display(), b.display())));
            }
            for k in &kernels {
                match by_name.get(&k.name) {
                    Some(o) if o.kernel.same_shape(&k.kernel) => {}
                    Some(o) => {
                        return Err(Failure::usage(format!(
                            "{}: shape {:?} vs baseline {:?}",
                            k.name,
                            k.kernel.dims(),
                            o.kernel.dims()
                        )))
                    }
                    None => return Err(Failure::usage(format!("baseline lacks {}", k.name))),
                }
            }
            Some(by_name)
        }
    };
    fs::create_dir_all(report).map_err(|e| io_fail(report, e))?;
    println!("parameters {}", parameter_total(&mut net));
    let mut written = 0;
    for k in kernels.iter().filter(|k| k.integration) {
        let path = report.join(format!("kl_{}.csv", k.name));
        fs::write(&path, kl_channel_matrix(&k.kernel)?.to_csv()).map_err(|e| io_fail(&path, e))?;
        written += 1;
    }
    if let Some(base) = base {
        for k in &kernels {
            let delta = kernel_delta(&k.kernel, &base[&k.name].kernel)?;
            let peak = delta.data().iter().fold(0f32, |m, v| m.max(v.abs()));
            println!("{:<24} max |delta| {peak:.4e}", k.name);
            written += export_kernel_delta(&delta, report, &format!("delta_{}", k.name))?.len();
        }
    }
    println!("wrote {written} files to {}", report.display());
    Ok(())
}
