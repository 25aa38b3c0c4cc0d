//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process fails if any criterion does.
//!
//! Run a subset with `cargo test --test acceptance -- 3 8`.

use std::collections::BTreeMap;
use std::time::Instant;

use mobileie::archive::{archive_from_net, net_from_archive, parameter_total, Archive};
use mobileie::bench::compare_inference;
use mobileie::data::{synthetic_pairs, ImagePair};
use mobileie::loss::{lvw_loss, LvwConfig};
use mobileie::metrics::{kl_channel_matrix, mae, mse, psnr, ssim, PSNR_CAP};
use mobileie::network::{fused_param_formula, MobileIeNet, ModelConfig, TrainNet, Variant};
use mobileie::optim::TrainConfig;
use mobileie::params::{Role, Visit};
use mobileie::reparam::Mode;
use mobileie::train::{mean_psnr, Trainer};
use mobileie::{Error, Kernel, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lle(channels: usize) -> ModelConfig {
    ModelConfig {
        channels,
        variant: Variant::Lle,
    }
}

fn short_schedule(total: usize, freeze: Vec<usize>, seed: u64) -> TrainConfig {
    TrainConfig {
        warmup_epochs: 2,
        restart_period: 10,
        total_epochs: total,
        iwo_freeze_epochs: freeze,
        batch_size: 4,
        seed,
        ..Default::default()
    }
}

/// A C-channel model after a few epochs, including one integration-weight freeze.
fn briefly_trained(channels: usize, seed: u64) -> Result<MobileIeNet<f32>, Error> {
    let data = synthetic_pairs(Variant::Lle, 8, 24, 24, seed)?;
    let net = TrainNet::new(lle(channels), &mut rng(seed));
    let mut t = Trainer::new(net, short_schedule(12, vec![6], seed), LvwConfig::default())?;
    t.run(&data, &[], |_, _| Ok(()))?;
    Ok(MobileIeNet::Train(t.net))
}

fn fusion_equivalence() -> Verdict {
    let net = briefly_trained(12, 1).map_err(|e| e.to_string())?;
    let fused = net.fuse().map_err(|e| e.to_string())?;
    let mut r = rng(100);
    let mut worst = 0f64;
    for _ in 0..100 {
        let x = Tensor4::<f32>::random_uniform([1, 3, 64, 64], 0.0, 1.0, &mut r);
        // Unclamped, so saturated pixels cannot hide a difference.
        let a = net.infer_raw(&x).map_err(|e| e.to_string())?;
        let b = fused.infer_raw(&x).map_err(|e| e.to_string())?;
        let d = a.max_abs_diff(&b);
        if !(d <= 1e-4) {
            return Err(format!("deviation {d:.3e} > 1e-4"));
        }
        worst = worst.max(d);
    }
    Ok(format!("max |train-eval - fused| = {worst:.3e} over 100 inputs"))
}

fn parameter_audit() -> Verdict {
    let mut notes = Vec::new();
    for c in [4, 8, 12] {
        let mut train = MobileIeNet::<f32>::new(lle(c), &mut rng(c as u64));
        train
            .forward(&Tensor4::random_uniform([2, 3, 16, 16], 0.0, 1.0, &mut rng(0)), Mode::Train)
            .map_err(|e| e.to_string())?;
        let mut fused = train.fuse().map_err(|e| e.to_string())?;
        let audit = fused.param_count().total;
        let stored = parameter_total(&mut fused);
        let closed = 20 * c * c + 110 * c + 5;
        let formula = fused_param_formula(&lle(c));
        if audit != stored || audit != formula || audit != closed {
            return Err(format!("C={c}: audit {audit}, stored {stored}, formula {formula}, 20C²+110C+5 = {closed}"));
        }
        notes.push(format!("C={c}: {audit}"));
    }
    let mut twelve = MobileIeNet::<f32>::new(lle(12), &mut rng(0));
    twelve
        .forward(&Tensor4::random_uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng(0)), Mode::Train)
        .map_err(|e| e.to_string())?;
    let total = twelve.fuse().map_err(|e| e.to_string())?.param_count().total;
    if total != 4205 {
        return Err(format!("C=12 fused total {total}, expected 4205"));
    }
    Ok(notes.join(", "))
}

/// Scalar of trainable tensor `idx` at position `j`, read or overwritten.
fn poke(net: &mut TrainNet<f64>, idx: usize, j: usize, set: Option<f64>) -> f64 {
    let mut k = 0;
    let mut out = f64::NAN;
    net.visit("", &mut |_, _, data, role| {
        if role == Role::Trainable {
            if k == idx {
                if let Some(v) = set {
                    data[j] = v;
                }
                out = data[j];
            }
            k += 1;
        }
    });
    out
}

fn class_of(name: &str) -> &str {
    name.rsplit('.').next().unwrap_or(name)
}

fn gradient_suite() -> Verdict {
    let mut net = TrainNet::<f64>::new(lle(4), &mut rng(3));
    let x = Tensor4::<f64>::random_uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng(4));
    // Move the integration weights off their initial values, then freeze.
    net.forward_train(&x).map_err(|e| e.to_string())?;
    net.freeze_all();
    net.visit("", &mut |name, _, data, role| {
        if role == Role::Trainable && name.ends_with("w_learn") {
            for (i, v) in data.iter_mut().enumerate() {
                *v = 0.05 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
            }
        }
    });
    let (out, cache) = net.forward_train(&x).map_err(|e| e.to_string())?;
    let probe = Tensor4::<f64>::random_uniform(out.shape(), -1.0, 1.0, &mut rng(5));
    let objective = |n: &mut TrainNet<f64>| -> f64 {
        let (o, _) = n.forward_train(&x).unwrap();
        o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let grads = net.backward(&cache, &probe).map_err(|e| e.to_string())?;

    let mut names = Vec::new();
    let mut frozen = Vec::new();
    net.visit("", &mut |name, _, data, role| match role {
        Role::Trainable => names.push(name.to_string()),
        Role::Frozen => frozen.push((name.to_string(), data.to_vec())),
        Role::Buffer => {}
    });
    if grads.len() != names.len() {
        return Err(format!("{} gradients for {} trainable tensors", grads.len(), names.len()));
    }

    let h = 1e-4;
    let mut classes = BTreeMap::<String, (usize, f64)>::new();
    for (idx, name) in names.iter().enumerate() {
        for j in 0..grads[idx].len() {
            let v = poke(&mut net, idx, j, None);
            poke(&mut net, idx, j, Some(v + h));
            let up = objective(&mut net);
            poke(&mut net, idx, j, Some(v - h));
            let down = objective(&mut net);
            poke(&mut net, idx, j, Some(v));
            let fd = (up - down) / (2.0 * h);
            let an = grads[idx][j];
            let scale = fd.abs().max(an.abs());
            // The absolute floor only matters for gradients near the FD noise level.
            let rel = (fd - an).abs() / scale.max(1e-5);
            if rel > 1e-3 {
                return Err(format!("{name}[{j}]: finite difference {fd:.6e}, analytic {an:.6e}"));
            }
            let e = classes.entry(class_of(name).to_string()).or_default();
            e.0 += 1;
            e.1 = e.1.max(rel);
        }
    }
    for want in ["weight", "bias", "gamma", "beta", "w_learn", "slope", "scale"] {
        if !classes.contains_key(want) {
            return Err(format!("no parameter of class {want} was checked"));
        }
    }

    // The optimizer sees no gradient for the frozen priors: a step leaves them untouched.
    if frozen.is_empty() || !frozen.iter().all(|(n, _)| n.ends_with("w_pre")) {
        return Err("frozen tensors are not exactly the w_pre priors".into());
    }
    let mut adam = mobileie::optim::Adam::new(0.9, 0.999, 1e-8);
    adam.step(&mut net, &grads, 1e-2).map_err(|e| e.to_string())?;
    let mut moved = 0;
    let mut k = 0;
    net.visit("", &mut |_, _, data, role| {
        if role == Role::Frozen {
            if data != frozen[k].1.as_slice() {
                moved += 1;
            }
            k += 1;
        }
    });
    if moved > 0 {
        return Err(format!("{moved} frozen tensors changed under an optimizer step"));
    }
    let summary: Vec<String> = classes.iter().map(|(c, (n, r))| format!("{c} {n} (max rel {r:.1e})")).collect();
    Ok(format!("{}; w_pre gradient zero", summary.join(", ")))
}

/// Direct transcription of the weighted loss over nested loops.
fn lvw_oracle(o: &Tensor4<f64>, l: &Tensor4<f64>, eps: f64) -> f64 {
    let [n, c, h, w] = o.shape();
    let mut total = 0.0;
    for s in 0..n {
        for ch in 0..c {
            let mut errs = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    errs.push((o.at(s, ch, y, x) - l.at(s, ch, y, x)).abs());
                }
            }
            let mu = errs.iter().sum::<f64>() / errs.len() as f64;
            let sigma = (errs.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / errs.len() as f64).sqrt();
            for e in errs {
                total += ((e - mu).abs() / (sigma + eps)).tanh() * e;
            }
        }
    }
    total / (n * c * h * w) as f64
}

fn lvw_oracle_check() -> Verdict {
    let cfg = LvwConfig::default();
    let mut r = rng(40);
    let mut worst = 0f64;
    for _ in 0..50 {
        let shape = [r.gen_range(1..3), 3, r.gen_range(4..17), r.gen_range(4..17)];
        let o = Tensor4::<f64>::random_uniform(shape, 0.0, 1.0, &mut r);
        let l = Tensor4::<f64>::random_uniform(shape, 0.0, 1.0, &mut r);
        let got = lvw_loss(&o, &l, &cfg).map_err(|e| e.to_string())?.loss;
        let d = (got - lvw_oracle(&o, &l, cfg.eps)).abs();
        if d > 1e-6 {
            return Err(format!("shape {shape:?}: |loss - oracle| = {d:.3e}"));
        }
        worst = worst.max(d);
    }
    let o = Tensor4::<f64>::random_uniform([2, 3, 9, 9], 0.0, 1.0, &mut r);
    let perfect = lvw_loss(&o, &o, &cfg).map_err(|e| e.to_string())?.loss;
    let shifted = o.map(|v| v + 0.25);
    let constant = lvw_loss(&shifted, &o, &cfg).map_err(|e| e.to_string())?.loss;
    let flat = lvw_loss(
        &Tensor4::<f64>::full([1, 3, 7, 7], 0.9),
        &Tensor4::<f64>::full([1, 3, 7, 7], 0.2),
        &cfg,
    )
    .map_err(|e| e.to_string())?
    .loss;
    if perfect != 0.0 || flat != 0.0 {
        return Err(format!("degeneracies: perfect {perfect:e}, constant {flat:e}"));
    }
    // A shifted copy has the same error everywhere only up to rounding of `v + 0.25`.
    if constant > 1e-6 {
        return Err(format!("near-constant error gives {constant:e}"));
    }
    Ok(format!("max |loss - oracle| = {worst:.2e} over 50 pairs; degeneracies exact"))
}

fn mean_metric(pairs: &[ImagePair], f: impl Fn(&ImagePair) -> Result<f64, Error>) -> Result<f64, Error> {
    let mut s = 0.0;
    for p in pairs {
        s += f(p)?;
    }
    Ok(s / pairs.len() as f64)
}

fn desk_training() -> Verdict {
    let start = Instant::now();
    let seed = 2024;
    let train = synthetic_pairs(Variant::Lle, 200, 64, 64, seed).map_err(|e| e.to_string())?;
    let held_out = synthetic_pairs(Variant::Lle, 24, 64, 64, seed + 1).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        total_epochs: 300,
        iwo_freeze_epochs: vec![150],
        seed,
        ..Default::default()
    };
    let net = TrainNet::new(lle(12), &mut rng(seed));
    let mut t = Trainer::new(net, cfg, LvwConfig::default()).map_err(|e| e.to_string())?;
    let recs = t.run(&train, &held_out, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let fused = MobileIeNet::Train(t.net).fuse().map_err(|e| e.to_string())?;
    let baseline = mean_metric(&held_out, |p| psnr(&p.degraded, &p.ground_truth)).map_err(|e| e.to_string())?;
    let enhanced =
        mean_metric(&held_out, |p| psnr(&fused.infer(&p.degraded)?, &p.ground_truth)).map_err(|e| e.to_string())?;
    let gain = enhanced - baseline;
    let msg = format!(
        "held-out PSNR {enhanced:.2} dB vs degraded {baseline:.2} dB (gain {gain:+.2} dB, final loss {:.4}, {:.0} s)",
        recs.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    if gain >= 6.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn iwo_direction() -> Verdict {
    let mut notes = Vec::new();
    for seed in [11u64, 12, 13] {
        let data = synthetic_pairs(Variant::Lle, 16, 32, 32, seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            warmup_epochs: 10,
            restart_period: 50,
            total_epochs: 300,
            iwo_freeze_epochs: vec![],
            batch_size: 8,
            seed,
            ..Default::default()
        };
        let net = TrainNet::new(lle(12), &mut rng(seed));
        let mut base = Trainer::new(net, cfg, LvwConfig::default()).map_err(|e| e.to_string())?;
        for _ in 0..200 {
            base.run_epoch(&data, &[]).map_err(|e| e.to_string())?;
        }
        let mut plain = base.clone();
        let mut frozen = base;
        let before = mean_psnr(&frozen.net, &data).map_err(|e| e.to_string())?;
        frozen.freeze();
        let after = mean_psnr(&frozen.net, &data).map_err(|e| e.to_string())?;
        if (after - before).abs() > 1e-6 {
            return Err(format!("seed {seed}: freezing moved PSNR by {:.3e}", after - before));
        }
        let la = plain.run(&data, &[], |_, _| Ok(())).map_err(|e| e.to_string())?;
        let lb = frozen.run(&data, &[], |_, _| Ok(())).map_err(|e| e.to_string())?;
        let (a, b) = (la.last().unwrap().train_loss, lb.last().unwrap().train_loss);
        if b > a {
            return Err(format!("seed {seed}: loss with freeze {b:.6} > plain {a:.6}"));
        }
        notes.push(format!("seed {seed}: {b:.5} <= {a:.5}"));
    }
    Ok(notes.join("; "))
}

fn fused_speed() -> Verdict {
    let mut net = MobileIeNet::<f32>::new(lle(12), &mut rng(7));
    net.forward(&Tensor4::random_uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng(8)), Mode::Train)
        .map_err(|e| e.to_string())?;
    let fused = net.fuse().map_err(|e| e.to_string())?;
    let x = Tensor4::<f32>::random_uniform([1, 3, 400, 600], 0.0, 1.0, &mut rng(9));
    let (t, f) = compare_inference(&net, &fused, &x, 5, 20).map_err(|e| e.to_string())?;
    let ratio = t.min_ms / f.min_ms;
    let msg = format!(
        "600x400: train {:.1} ms, fused {:.1} ms (min); speedup {ratio:.2}x min, {:.2}x mean",
        t.min_ms,
        f.min_ms,
        t.mean_ms / f.mean_ms
    );
    if ratio >= 3.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn archive_integrity() -> Verdict {
    let mut train = briefly_trained(4, 5).map_err(|e| e.to_string())?;
    let mut fused = train.fuse().map_err(|e| e.to_string())?;
    let metrics = BTreeMap::from([("val_psnr".to_string(), 17.25)]);
    let mut r = rng(80);
    let mut rejected = 0;
    for net in [&mut train, &mut fused] {
        let a = archive_from_net(net, 12, metrics.clone()).map_err(|e| e.to_string())?;
        let bytes = a.to_bytes().map_err(|e| e.to_string())?;
        let back = Archive::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if back.to_bytes().map_err(|e| e.to_string())? != bytes {
            return Err("re-serialized archive differs".into());
        }
        let header_bytes = &bytes[10..10 + back.header_json.len()];
        if header_bytes != back.header_json.as_bytes() {
            return Err("header not reproduced byte for byte".into());
        }
        for (x, y) in a.entries.iter().zip(&back.entries) {
            let same = x.name == y.name
                && x.dims == y.dims
                && x.data.iter().map(|v| v.to_bits()).eq(y.data.iter().map(|v| v.to_bits()));
            if !same {
                return Err(format!("entry {} not bit-exact", x.name));
            }
        }
        let (restored, _) = net_from_archive(&back).map_err(|e| e.to_string())?;
        if &restored != net {
            return Err("restored network differs".into());
        }

        let mut magic = bytes.clone();
        magic[1] ^= 0x20;
        match Archive::from_bytes(&magic) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => return Err(format!("bad magic gave {other:?}")),
        }
        for trial in 0..50 {
            let mut bad = bytes.clone();
            let limit = if trial % 2 == 0 {
                let cut = r.gen_range(0..bytes.len());
                bad.truncate(cut);
                cut
            } else {
                let at = r.gen_range(0..bytes.len());
                bad[at] ^= 1 << r.gen_range(0..8);
                bytes.len()
            };
            match Archive::from_bytes(&bad) {
                Err(Error::Format { offset, .. }) if offset <= limit => rejected += 1,
                Err(e) => return Err(format!("corruption {trial}: unexpected error {e}")),
                Ok(_) => return Err(format!("corruption {trial} was accepted")),
            }
        }
    }
    Ok(format!("both forms round-trip bit-exactly; {rejected}/100 corruptions rejected with offsets"))
}

fn naive_ssim(a: &Tensor4<f64>, b: &Tensor4<f64>, win: usize) -> f64 {
    let [n, c, h, w] = a.shape();
    let r = (win / 2) as f64;
    let mut g = vec![vec![0.0; win]; win];
    let mut gs = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            gs += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for s in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            let mut count = 0.0;
            for y0 in 0..=h - win {
                for x0 in 0..=w - win {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..win {
                        for j in 0..win {
                            mx += g[i][j] / gs * a.at(s, ch, y0 + i, x0 + j);
                            my += g[i][j] / gs * b.at(s, ch, y0 + i, x0 + j);
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..win {
                        for j in 0..win {
                            let p = a.at(s, ch, y0 + i, x0 + j) - mx;
                            let q = b.at(s, ch, y0 + i, x0 + j) - my;
                            vx += g[i][j] / gs * p * p;
                            vy += g[i][j] / gs * q * q;
                            cov += g[i][j] / gs * p * q;
                        }
                    }
                    acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1.0;
                }
            }
            total += acc / count;
        }
    }
    total / (n * c) as f64
}

fn naive_kl(w: &Kernel<f64>, i: usize, j: usize) -> f64 {
    let row = |o: usize| -> Vec<f64> {
        let e: Vec<f64> = (0..w.c_in()).map(|k| w.at(o, k, 0, 0).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let (p, q) = (row(i), row(j));
    p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

fn metric_oracles() -> Verdict {
    let mut r = rng(90);
    let mut worst = 0f64;
    let mut track = |got: f64, want: f64, what: &str| -> Result<(), String> {
        let d = (got - want).abs();
        if d > 1e-6 {
            return Err(format!("{what}: {got} vs oracle {want}"));
        }
        worst = worst.max(d);
        Ok(())
    };
    for k in 0..10 {
        let shape = [1, 3, 12 + k, 14 + 2 * k];
        let a = Tensor4::<f64>::random_uniform(shape, 0.0, 1.0, &mut r);
        let b = a.map(|v| (v + 0.1 * (v * 17.0).sin()).clamp(0.0, 1.0));
        let n = a.len() as f64;
        let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let ab: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        track(mse(&a, &b).map_err(|e| e.to_string())?, sq, "mse")?;
        track(mae(&a, &b).map_err(|e| e.to_string())?, ab, "mae")?;
        track(psnr(&a, &b).map_err(|e| e.to_string())?, -10.0 * sq.log10(), "psnr")?;
        track(ssim(&a, &b).map_err(|e| e.to_string())?, naive_ssim(&a, &b, 11), "ssim")?;
    }
    let small = Tensor4::<f64>::random_uniform([1, 1, 6, 9], 0.0, 1.0, &mut r);
    let other = Tensor4::<f64>::random_uniform([1, 1, 6, 9], 0.0, 1.0, &mut r);
    track(ssim(&small, &other).map_err(|e| e.to_string())?, naive_ssim(&small, &other, 5), "ssim small")?;
    for seed in 0..5 {
        let w = Kernel::<f64>::kaiming_uniform(6, 9, 1, &mut rng(seed));
        let m = kl_channel_matrix(&w).map_err(|e| e.to_string())?;
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 0.0 } else { naive_kl(&w, i, j) };
                track(m.at(i, j), want, "kl")?;
            }
        }
    }
    let zeros = Tensor4::<f64>::zeros([1, 3, 10, 10]);
    let level = Tensor4::<f64>::full([1, 3, 10, 10], 0.1);
    let p20 = psnr(&zeros, &level).map_err(|e| e.to_string())?;
    if (p20 - 20.0).abs() > 1e-9 {
        return Err(format!("uniform 0.1 error gives {p20} dB, expected 20"));
    }
    if psnr(&zeros, &zeros).map_err(|e| e.to_string())? != PSNR_CAP {
        return Err("identical images do not hit the PSNR cap".into());
    }
    Ok(format!("max |metric - oracle| = {worst:.2e}; PSNR 20 dB at RMSE 0.1"))
}

type Criterion = (usize, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 9] = [
    (1, "fusion equivalence", fusion_equivalence),
    (2, "parameter audit", parameter_audit),
    (3, "gradient suite", gradient_suite),
    (4, "LVW oracle", lvw_oracle_check),
    (5, "desk-scale training", desk_training),
    (6, "IWO direction", iwo_direction),
    (7, "fused speed", fused_speed),
    (8, "archive integrity", archive_integrity),
    (9, "metric oracles", metric_oracles),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(msg) => println!("criterion {id} ({name}): PASS [{secs:.1} s] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1} s] {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
