//! The five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mtreg::eval::evaluate_registration;
use mtreg::regnet::{load_model, predict, save_model, DropoutPlan};
use mtreg::synth::{gen_pair, FieldSpec, PhantomSpec};
use mtreg::trainer::train_with;
use mtreg::uncertainty::{adaptive_weights, mc_sample, uncertainty_maps};
use mtreg::volume::{read_labels, read_volume, write_mvol};
use mtreg::{DisplacementField, Error, Volume};

use crate::output::{mid_axial_slice, write_pgm, CsvLog};
use crate::{config, CmdResult, Failure};

fn pair_path(dir: &Path, i: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{i}_{suffix}"))
}

pub fn synth(
    out: &Path,
    seed: u64,
    size: usize,
    pairs: usize,
    amplitude: f64,
    blobs: usize,
) -> CmdResult {
    if pairs == 0 {
        return Err(Failure::usage(anyhow!("--pairs must be at least 1")));
    }
    let base_p = PhantomSpec {
        size: [size; 3],
        num_blobs: blobs,
        seed,
        ..Default::default()
    };
    let base_f = FieldSpec {
        amplitude,
        seed,
        ..Default::default()
    };
    base_p.validate().map_err(Failure::usage)?;
    base_f.validate().map_err(Failure::usage)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..pairs {
        let s = seed.wrapping_add(i as u64);
        let pair = gen_pair(
            &PhantomSpec { seed: s, ..base_p },
            &FieldSpec { seed: s, ..base_f },
        )?;
        write_mvol(pair_path(out, i, "moving.mvol"), pair.moving)?;
        write_mvol(pair_path(out, i, "fixed.mvol"), pair.fixed)?;
        write_mvol(pair_path(out, i, "moving.mseg"), pair.moving_seg)?;
        write_mvol(pair_path(out, i, "fixed.mseg"), pair.fixed_seg)?;
        write_mvol(pair_path(out, i, "gt.mvol"), pair.gt_field.into_volume())?;
    }
    println!("wrote {pairs} pair(s) to {}", out.display());
    Ok(())
}

/// `(fixed, moving)` pairs `0, 1, ...` until the first missing index.
fn load_pairs(dir: &Path) -> Result<Vec<(Volume, Volume)>, Failure> {
    let mut pairs = Vec::new();
    loop {
        let i = pairs.len();
        let (m, f) = (
            pair_path(dir, i, "moving.mvol"),
            pair_path(dir, i, "fixed.mvol"),
        );
        if !m.exists() || !f.exists() {
            break;
        }
        pairs.push((read_volume(f)?, read_volume(m)?));
    }
    if pairs.is_empty() {
        return Err(anyhow!(
            "no pairs (0_fixed.mvol, 0_moving.mvol) found in {}",
            dir.display()
        )
        .into());
    }
    Ok(pairs)
}

pub fn train(
    config_path: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
) -> CmdResult {
    let (cfg, paths) = config::load(config_path).map_err(Failure::usage)?;
    let require = |flag: Option<PathBuf>, from_cfg: Option<PathBuf>, name: &str| {
        flag.or(from_cfg).ok_or_else(|| {
            Failure::usage(anyhow!(
                "--{name} is required (flag or config key `{name}`)"
            ))
        })
    };
    let data = require(data, paths.data, "data")?;
    let out = require(out, paths.out, "out")?;
    let log = require(log, paths.log, "log")?;

    let pairs = load_pairs(&data)?;
    let arch = cfg.effective_arch();
    for (fixed, moving) in &pairs {
        check_inputs(&arch, fixed, moving)?;
    }

    let mut csv = CsvLog::create(&log).with_context(|| format!("creating {}", log.display()))?;
    let mut write_err = None;
    let report_every = (cfg.steps / 10).max(1);
    let result = train_with(&cfg, &pairs, |r| {
        if write_err.is_none() {
            write_err = csv.append(r).err();
        }
        if (r.step + 1) % report_every == 0 {
            eprintln!(
                "step {}/{}: loss {:.5} lambda_phi {:.3} lambda_c {:.3}",
                r.step + 1,
                cfg.steps,
                r.loss_total,
                r.lambda_phi,
                r.lambda_c
            );
        }
    });
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e)
            .context(format!("writing {}", log.display()))
            .into());
    }
    let trained = result.map_err(|e| match e {
        Error::Validation(_) | Error::Contract(_) => Failure::usage(e),
        e => Failure::from(anyhow::Error::from(e).context(format!(
            "training aborted; partial log in {}",
            log.display()
        ))),
    })?;
    save_model(&out, &arch, &trained.model)?;
    let last = trained.log.last().expect("at least one step");
    println!(
        "trained {} steps: final loss {:.5}, lambda_phi {:.3}, lambda_c {:.3}; model {}",
        trained.log.len(),
        last.loss_total,
        last.lambda_phi,
        last.lambda_c,
        out.display()
    );
    Ok(())
}

fn check_inputs(arch: &mtreg::regnet::ArchConfig, fixed: &Volume, moving: &Volume) -> CmdResult {
    if fixed.dims() != moving.dims() {
        return Err(anyhow!(
            "fixed dims {:?} differ from moving dims {:?}",
            fixed.dims(),
            moving.dims()
        )
        .into());
    }
    arch.check_dims(fixed.dims())?;
    Ok(())
}

pub fn register(
    model: &Path,
    moving: &Path,
    fixed: &Path,
    out_field: &Path,
    out_warped: &Path,
) -> CmdResult {
    let (arch, params) = load_model(model)?;
    let moving = read_volume(moving)?;
    let fixed = read_volume(fixed)?;
    check_inputs(&arch, &fixed, &moving)?;
    let field = predict(&arch, &params, &fixed, &moving, DropoutPlan::Off)?;
    let warped = mtreg::warp::warp_trilinear(&moving, &field)?;
    println!("max displacement {:.4} voxels", field.max_norm());
    write_mvol(out_field, field.into_volume())?;
    write_mvol(out_warped, warped)?;
    Ok(())
}

pub fn evaluate(field: &Path, moving_seg: &Path, fixed_seg: &Path, report: &Path) -> CmdResult {
    let field = DisplacementField::new(read_volume(field)?)?;
    let moving_seg = read_labels(moving_seg)?;
    let fixed_seg = read_labels(fixed_seg)?;
    let labels = moving_seg.labels();
    if labels != fixed_seg.labels() {
        return Err(anyhow!(
            "label sets differ: moving {:?}, fixed {:?}",
            labels,
            fixed_seg.labels()
        )
        .into());
    }
    if field.dims() != fixed_seg.dims() {
        return Err(anyhow!(
            "field dims {:?} differ from segmentation dims {:?}",
            field.dims(),
            fixed_seg.dims()
        )
        .into());
    }
    let r = evaluate_registration(&field, &moving_seg, &fixed_seg, &labels)?;
    fs::write(
        report,
        serde_json::to_string_pretty(&r).context("serializing report")?,
    )
    .with_context(|| format!("writing {}", report.display()))?;
    for l in &r.labels {
        println!("label {l}: dice {:.4} asd {:.4} mm", r.dice[l], r.asd_mm[l]);
    }
    println!(
        "folding {:.3}% jacobian std {:.4}",
        r.folding_pct, r.jac_std
    );
    Ok(())
}

pub fn uncertainty(
    model: &Path,
    moving: &Path,
    fixed: &Path,
    passes: usize,
    seed: u64,
    prefix: &str,
    config_path: Option<&Path>,
) -> CmdResult {
    if passes < 2 {
        return Err(Failure::usage(anyhow!(
            "--passes must be at least 2, got {passes}"
        )));
    }
    let (cfg, _) = config::load(config_path).map_err(Failure::usage)?;
    let (arch, params) = load_model(model)?;
    let moving = read_volume(moving)?;
    let fixed = read_volume(fixed)?;
    check_inputs(&arch, &fixed, &moving)?;

    let samples = mc_sample(&arch, &params, &fixed, &moving, passes, seed)?;
    let maps = uncertainty_maps(&samples, cfg.eps_phi, cfg.eps_app)?;
    let w = adaptive_weights(&maps, cfg.k1, cfg.k2, cfg.tau1, cfg.tau2)?;

    let path = |suffix: &str| PathBuf::from(format!("{prefix}_{suffix}"));
    write_mvol(path("uphi.mvol"), maps.u_phi.to_volume()?)?;
    write_mvol(path("uapp.mvol"), maps.u_app.to_volume()?)?;
    let [nx, ny, _] = fixed.dims();
    for (c, axis) in ["x", "y", "z"].iter().enumerate() {
        let p = path(&format!("uphi_{axis}.pgm"));
        write_pgm(&p, nx, ny, &mid_axial_slice(&maps.u_phi, c))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    let p = path("uapp.pgm");
    write_pgm(&p, nx, ny, &mid_axial_slice(&maps.u_app, 0))
        .with_context(|| format!("writing {}", p.display()))?;
    println!("lambda_phi {} lambda_c {}", w.lambda_phi, w.lambda_c);
    println!(
        "frac_over_tau1 {} frac_over_tau2 {}",
        w.frac_phi, w.frac_app
    );
    Ok(())
}
