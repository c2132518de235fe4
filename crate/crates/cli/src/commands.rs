use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use mtsedge::data::{self, augment, load_dataset, synth_generate, write_gray};
use mtsedge::eval::{self, Setting};
use mtsedge::gradcheck::{self, Scale};
use mtsedge::model::checkpoint;
use mtsedge::model::cost::{cost_report, PAPER_TABLE};
use mtsedge::training::{OutputDir, Trainer};
use mtsedge::{Error, Network};

use crate::config::{RunConfig, SyntheticSpec};

/// 2 config, 3 data, 4 geometry, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::EmptyDataset
        | Error::Unpaired(_)
        | Error::DegenerateSample
        | Error::Checkpoint(_)
        | Error::Io { .. }
        | Error::Image { .. } => 3,
        Error::Geometry(_) | Error::ShapeMismatch { .. } => 4,
        _ => 1,
    }
}

fn run_config(config: Option<PathBuf>, preset: Option<String>) -> Result<RunConfig> {
    Ok(match (config, preset) {
        (Some(path), _) => RunConfig::load(&path)?,
        (None, Some(name)) => RunConfig::preset(&name)?,
        (None, None) => return Err(Error::Config("pass --config or --preset".into()).into()),
    })
}

pub fn train(
    config: Option<PathBuf>,
    preset: Option<String>,
    synthetic: Option<Vec<String>>,
    out: &Path,
    resume: Option<PathBuf>,
) -> Result<u8> {
    let mut cfg = run_config(config, preset)?;
    if let Some(parts) = synthetic {
        cfg.data.synthetic = Some(SyntheticSpec::parse(&parts)?);
    }
    let train_cfg = cfg.train.to_train_config();
    let samples = if let Some(s) = cfg.data.synthetic {
        info!("generating {} synthetic {}x{} samples", s.n, s.size, s.size);
        synth_generate(s.n, s.size, s.size, s.seed)
    } else {
        let root = cfg
            .data
            .root
            .clone()
            .ok_or_else(|| Error::Config("data.root or a synthetic spec is required".into()))?;
        let ds = load_dataset(&root)?;
        if !ds.orphans.is_empty() {
            log::warn!("{} files without a partner skipped", ds.orphans.len());
        }
        match &cfg.data.augment {
            Some(a) => augment(&ds.samples, &a.resolve()?, train_cfg.seed)?,
            None => ds.samples,
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::resume(&path, train_cfg)?;
            if t.network.config() != &cfg.network {
                return Err(Error::Config("checkpoint network differs from the configuration".into()).into());
            }
            t
        }
        None => Trainer::new(Network::init(cfg.network.clone(), train_cfg.seed)?, train_cfg)?,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)
        .map_err(|e| Error::Io { path: out.join("config.json"), source: e })?;
    let dir = OutputDir { dir: out.to_path_buf() };
    let report = trainer.run(&samples, Some(&dir))?;
    if let Some((epoch, loss, _)) = report.epochs.last() {
        println!("trained to epoch {epoch} ({} steps), mean loss {loss:.6}", trainer.step);
    }
    println!("checkpoint: {}", dir.latest().display());
    Ok(0)
}

pub fn predict(ckpt: &Path, input: &Path, out: &Path, dump: bool) -> Result<u8> {
    let net = checkpoint::load(ckpt)?.network;
    let files = data::raster_files(input)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset).with_context(|| format!("no images in {}", input.display()));
    }
    let extra = out.join("intermediate");
    for dir in std::iter::once(out).chain(dump.then_some(extra.as_path())) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    for (stem, path) in &files {
        let image = data::read_rgb(path)?;
        let (maps, x_tilde) = net.predict(&image).with_context(|| format!("predicting {stem}"))?;
        write_gray(&out.join(format!("{stem}.png")), &maps.fused)?;
        if dump {
            for (i, side) in maps.sides.iter().enumerate() {
                write_gray(&extra.join(format!("{stem}_side{}.png", i + 1)), side)?;
            }
            write_gray(&extra.join(format!("{stem}_xtilde.png")), &x_tilde)?;
        }
    }
    println!("{} maps written to {}", files.len(), out.display());
    Ok(0)
}

pub fn eval(
    pred: &Path,
    gt: &Path,
    config: Option<PathBuf>,
    setting: Option<String>,
    tolerance: Option<f64>,
    eta: Option<f64>,
    report: Option<PathBuf>,
) -> Result<u8> {
    let base = config.map(|p| RunConfig::load(&p)).transpose()?;
    let setting: Setting = match setting {
        Some(s) => s.parse()?,
        None => base.as_ref().map_or(Setting::Thin, |c| c.eval.setting),
    };
    let tol = tolerance.unwrap_or(base.as_ref().map_or(0.0075, |c| c.eval.tolerance));
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Config(format!("tolerance {tol} outside (0, 1)")).into());
    }
    let eta = eta.unwrap_or(base.as_ref().map_or(0.3, |c| c.network.eta));
    let (ids, preds, gts) = data::load_map_pairs(pred, gt)?;
    info!("evaluating {} pairs ({setting}, tolerance {tol})", ids.len());
    let r = eval::evaluate(&preds, &gts, setting, tol, eta)?;
    if let Some(path) = report {
        fs::write(&path, serde_json::to_string_pretty(&r)?).map_err(|e| Error::Io { path, source: e })?;
    }
    print!("{}", r.summary_tsv());
    Ok(0)
}

pub fn gradcheck(scale: &str) -> Result<u8> {
    let scale = match scale {
        "micro" => Scale::Micro,
        "small" => Scale::Small,
        other => return Err(Error::Config(format!("unknown scale `{other}` (micro|small)")).into()),
    };
    let started = std::time::Instant::now();
    let reports = gradcheck::suite(scale)?;
    let mut ok = true;
    println!("op\tshapes\tworst_rel_err\tstatus");
    for (op, n, worst, passed) in gradcheck::summarize(&reports) {
        ok &= passed;
        println!("{op}\t{n}\t{worst:.3e}\t{}", if passed { "PASS" } else { "FAIL" });
    }
    let control = gradcheck::negative_control()?;
    let caught = !control.passed;
    ok &= caught;
    println!(
        "negative control\t1\t{:.3e}\t{}",
        control.worst,
        if caught { "PASS (corruption detected)" } else { "FAIL (corruption missed)" }
    );
    println!("{:.1}s", started.elapsed().as_secs_f64());
    Ok(if ok { 0 } else { 1 })
}

pub fn params(
    config: Option<PathBuf>,
    preset: Option<String>,
    height: usize,
    width: usize,
    compare: bool,
    json: bool,
) -> Result<u8> {
    let cfg = run_config(config, preset)?.network;
    let r = cost_report(&cfg, height, width)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&r)?);
        return Ok(0);
    }
    println!("module\tparams\tGFLOPs");
    for e in &r.entries {
        println!("{}\t{}\t{:.6}", e.module, e.params, 2.0 * e.macs as f64 / 1e9);
    }
    println!(
        "total\t{}\t{:.3}\t({}x{} after padding)",
        r.params(),
        r.flops() as f64 / 1e9,
        r.height,
        r.width
    );
    if compare {
        let rows: Vec<_> = PAPER_TABLE
            .iter()
            .filter(|row| cfg.name.as_deref().is_none_or(|n| n.eq_ignore_ascii_case(row.0)))
            .collect();
        let rows = if rows.is_empty() { PAPER_TABLE.iter().collect() } else { rows };
        println!("reference (published, not asserted)\tparams\tGFLOPs BSDS500\tGFLOPs BIPEDv2");
        for (name, p, bsds, biped) in rows {
            println!("{name}\t{p}\t{bsds:.3}\t{biped:.3}");
        }
    }
    Ok(0)
}

pub fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<u8> {
    SyntheticSpec { n, size, seed }.validate()?;
    let samples = synth_generate(n, size, size, seed);
    data::write_dataset(out, &samples)?;
    println!("{n} samples written to {}", out.display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e).context("while running"));
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::Unpaired(vec![])), 3);
        assert_eq!(code(Error::EmptyDataset), 3);
        assert_eq!(code(Error::Geometry("x".into())), 4);
        assert_eq!(code(Error::NonFiniteGradient("w".into())), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
