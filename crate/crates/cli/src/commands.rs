use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use candle_core::{DType, Device};
use sdd_core::backbone::{BackboneConfig, BackboneSource, FrozenBackbone, ImageBatch};
use sdd_core::datasets::{
    generate_toy_dataset, load_manifest, load_samples, write_toy_dataset, Label, Sample, SampleRecord, Split, ToyConfig,
};
use sdd_core::evalkit::diag::{histogram_csv, stats_csv};
use sdd_core::evalkit::{
    cosine_histogram, embedding_stats, render, robustness_sweep, sweep_csv, EvalReport, LabelledFeature, ReportFormat,
    TableKind,
};
use sdd_core::model::SddModel;
use sdd_core::sts::TokenBank;
use sdd_core::training::{self, build_bank, restore_model, Checkpoint, TrainConfig, TrainOptions};
use sdd_core::SddError;

use crate::*;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    SddError::Config(msg.into()).into()
}

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Bank(BankCmd::Build(a)) => bank_build(cli, a),
        Command::Data(DataCmd::Toy(a)) => data_toy(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Sweep(SweepCmd::Robustness(a)) => sweep_robustness(cli, a),
        Command::Sweep(SweepCmd::Delta(a)) => sweep_delta(cli, a),
        Command::Diag(DiagCmd::Stats(a)) => diag_stats(cli, a),
        Command::Diag(DiagCmd::Cosine(a)) => diag_cosine(cli, a),
        Command::Report(a) => report(a),
        Command::Plot(a) => plot::plot_file(&a.input, a.kind, &a.out),
    }
}

/// Parses `0.001` or `1/1000`.
pub fn parse_rate(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| invalid(format!("bad number `{s}`")))?;
            let d: f64 = d.trim().parse().map_err(|_| invalid(format!("bad number `{s}`")))?;
            n / d
        }
        None => s.parse().map_err(|_| invalid(format!("bad number `{s}`")))?,
    };
    if !(v.is_finite() && v > 0.0 && v <= 1.0) {
        return Err(invalid(format!("sampling rate `{s}` must lie in (0, 1]")));
    }
    Ok(v)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| invalid(format!("bad {what} `{p}`"))))
        .collect()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} `{}` not found", path.display())))
    }
}

/// Resolves a relative archive path against `$SDD_CACHE_DIR` when it does
/// not exist as given.
fn resolve_backbone(cfg: &mut BackboneConfig) -> Result<()> {
    if let BackboneSource::Archive { path } = &mut cfg.source {
        if !path.exists() && path.is_relative() {
            if let Some(cache) = std::env::var_os("SDD_CACHE_DIR") {
                let cached = PathBuf::from(cache).join(&*path);
                if cached.exists() {
                    *path = cached;
                }
            }
        }
        require_file(path, "backbone archive")?;
    }
    Ok(())
}

fn load_frozen(cfg: &BackboneConfig) -> Result<Arc<FrozenBackbone>> {
    let mut cfg = cfg.clone();
    resolve_backbone(&mut cfg)?;
    Ok(Arc::new(FrozenBackbone::load(&cfg, &Device::Cpu, DType::F32)?))
}

/// Defaults, then the config file, then command-line flags.
fn train_config(cli: &Cli, c: &ConfigArgs, t: Option<&TrainOverrides>) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.backbone {
        cfg.backbone.source = BackboneSource::Archive { path: p.clone() };
    }
    if let Some(d) = &c.delta {
        cfg.delta = parse_rate(d)?;
    }
    if c.no_sts {
        cfg.use_sts = false;
    }
    if let Some(t) = t {
        if let Some(e) = t.epochs {
            cfg.max_epochs = e;
        }
        if let Some(lr) = t.lr {
            cfg.lr = lr;
        }
        if let Some(b) = t.batch_size {
            cfg.batch_size = b;
        }
        if t.no_enhancer {
            cfg.use_enhancer = false;
        }
        if t.no_adapters {
            cfg.use_adapters = false;
        }
    }
    cfg.validate()?;
    resolve_backbone(&mut cfg.backbone)?;
    Ok(cfg)
}

fn manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    require_file(path, "manifest")?;
    Ok(load_manifest(path)?)
}

fn split(records: &[SampleRecord], split: Split, size: usize) -> Result<Vec<Sample>> {
    Ok(load_samples(records, split, size)?)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn has_real_train(records: &[SampleRecord]) -> Result<()> {
    if records.iter().any(|r| r.split == Split::Train && r.label == Label::Real) {
        Ok(())
    } else {
        Err(invalid("manifest has no real training images"))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn bank_build(cli: &Cli, a: &BankBuildArgs) -> Result<()> {
    let cfg = train_config(cli, &a.cfg, None)?;
    let records = manifest(&a.data)?;
    has_real_train(&records)?;
    if cli.dry_run {
        println!("ok: config valid, {} manifest records", records.len());
        return Ok(());
    }
    let frozen = load_frozen(&cfg.backbone)?;
    let train = split(&records, Split::Train, cfg.backbone.image_size)?;
    let bank = build_bank(&frozen, &train, &cfg)?;
    bank.save(&a.out)?;
    println!(
        "bank: {} rows, {}/{} bins filled ({:.2}%), digest {}",
        bank.len(),
        bank.filled_bins(),
        bank.bins,
        100.0 * bank.coverage(),
        bank.digest()?
    );
    Ok(())
}

fn data_toy(cli: &Cli, a: &ToyArgs) -> Result<()> {
    let cfg = ToyConfig {
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        n_per_class: a.n,
        test_per_class: a.test,
        val_per_class: a.val,
        artifact: a.artifact.parse()?,
        amplitude: a.amplitude,
        image_size: a.size,
    };
    cfg.validate()?;
    if cli.dry_run {
        println!("ok: {} images would be written to {}", 2 * a.n, a.out.display());
        return Ok(());
    }
    let ds = generate_toy_dataset(&cfg)?;
    let records = write_toy_dataset(&ds, &a.out)?;
    println!("wrote {} images and manifest.jsonl to {}", records.len(), a.out.display());
    Ok(())
}

fn load_bank(path: &Path) -> Result<TokenBank> {
    require_file(path, "token bank")?;
    Ok(TokenBank::load(path)?)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(cli, &a.cfg, Some(&a.train))?;
    let records = manifest(&a.data)?;
    has_real_train(&records)?;
    let bank = a.bank.as_deref().map(load_bank).transpose()?;
    let resume = match &a.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    if let (Some(ck), Some(b)) = (&resume, &bank) {
        ck.check_compat(&cfg, &b.digest()?, a.force)?;
    }
    if let Some(b) = &bank {
        if b.dim != cfg.backbone.embed_dim {
            return Err(invalid(format!("bank width {} differs from backbone width {}", b.dim, cfg.backbone.embed_dim)));
        }
    }
    if cli.dry_run {
        println!("ok: config valid, {} manifest records", records.len());
        return Ok(());
    }
    let size = cfg.backbone.image_size;
    let frozen = load_frozen(&cfg.backbone)?;
    let train_set = split(&records, Split::Train, size)?;
    let val_set = split(&records, Split::Val, size)?;
    let bank = match bank {
        Some(b) => b,
        None => build_bank(&frozen, &train_set, &cfg)?,
    };
    bank.save(&with_suffix(&a.out, ".bank"))?;
    let opts = TrainOptions {
        log_path: Some(a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"))),
        checkpoint_path: None,
        resume,
        force: a.force,
        max_steps: a.train.max_steps,
    };
    let outcome = training::train(&cfg, frozen, &bank, &train_set, &val_set, opts)?;
    outcome.checkpoint.save(&a.out)?;
    println!(
        "trained {} steps; kept epoch {} (validation metric {:.4}); checkpoint {}",
        outcome.steps.len(),
        outcome.best_epoch,
        outcome.checkpoint.meta.val_metric,
        a.out.display()
    );
    Ok(())
}

/// Loads a checkpoint with its bank and backbone, checking compatibility.
fn load_model(m: &ModelArgs, dry_run: bool) -> Result<Option<(SddModel, TrainConfig)>> {
    require_file(&m.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&m.checkpoint)?;
    let bank_path = m.bank.clone().unwrap_or_else(|| with_suffix(&m.checkpoint, ".bank"));
    let bank = load_bank(&bank_path)?;
    ck.check_compat(&ck.meta.config, &bank.digest()?, m.force)?;
    let mut cfg = ck.meta.config.clone();
    resolve_backbone(&mut cfg.backbone)?;
    if dry_run {
        return Ok(None);
    }
    let frozen = load_frozen(&cfg.backbone)?;
    let model = restore_model(&ck, frozen, &bank, m.force)?;
    Ok(Some((model, cfg)))
}

fn table_kind(t: TableArg) -> TableKind {
    match t {
        TableArg::Ap => TableKind::Ap,
        TableArg::Acc => TableKind::Acc,
        TableArg::Auroc => TableKind::Auroc,
        TableArg::Racc => TableKind::Racc,
        TableArg::Facc => TableKind::Facc,
        TableArg::Full => TableKind::Full,
    }
}

fn report_format(f: FormatArg) -> ReportFormat {
    match f {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Markdown => ReportFormat::Markdown,
        FormatArg::Jsonl => ReportFormat::Jsonl,
    }
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let sp: Split = a.split.parse()?;
    let records = manifest(&a.data)?;
    let Some((model, cfg)) = load_model(&a.model, cli.dry_run)? else {
        println!("ok: checkpoint, bank and manifest are consistent");
        return Ok(());
    };
    let samples = split(&records, sp, cfg.backbone.image_size)?;
    if samples.is_empty() {
        return Err(invalid(format!("manifest has no `{}` samples", a.split)));
    }
    let rep = training::report(&model, &samples)?;
    if let Some(p) = &a.report_json {
        write_out(Some(p), &serde_json::to_string_pretty(&rep)?)?;
    }
    let text = render(&rep, table_kind(a.table), report_format(a.format), &a.method)?;
    write_out(a.out.as_deref(), &text)
}

fn sweep_robustness(cli: &Cli, a: &RobustnessArgs) -> Result<()> {
    let sp: Split = a.split.parse()?;
    let sigmas: Vec<f64> = parse_list(&a.sigmas, "blur sigma")?;
    let qualities: Vec<u8> = parse_list(&a.qualities, "JPEG quality")?;
    if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || qualities.iter().any(|q| !(1..=100).contains(q)) {
        return Err(invalid("blur sigmas must be ≥ 0 and JPEG qualities in 1..=100"));
    }
    let records = manifest(&a.data)?;
    let Some((model, cfg)) = load_model(&a.model, cli.dry_run)? else {
        println!("ok: checkpoint, bank and manifest are consistent");
        return Ok(());
    };
    let samples = split(&records, sp, cfg.backbone.image_size)?;
    let points = robustness_sweep(&model, &samples, &sigmas, &qualities)?;
    write_out(Some(&a.out), &sweep_csv(&points))?;
    println!("wrote {} sweep points to {}", points.len(), a.out.display());
    Ok(())
}

fn sweep_delta(cli: &Cli, a: &DeltaArgs) -> Result<()> {
    let base = train_config(cli, &a.cfg, Some(&a.train))?;
    let values: Vec<f64> = a.values.split(',').map(parse_rate).collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(invalid("no sampling rates given"));
    }
    let records = manifest(&a.data)?;
    has_real_train(&records)?;
    if cli.dry_run {
        println!("ok: {} sampling rates, {} manifest records", values.len(), records.len());
        return Ok(());
    }
    let size = base.backbone.image_size;
    let frozen = load_frozen(&base.backbone)?;
    let train_set = split(&records, Split::Train, size)?;
    let (val_set, test_set) = if a.bank_only {
        (Vec::new(), Vec::new())
    } else {
        (split(&records, Split::Val, size)?, split(&records, Split::Test, size)?)
    };
    if !a.bank_only && test_set.is_empty() {
        return Err(invalid("manifest has no test samples"));
    }
    let mut csv = String::from("delta,bins,rows,filled_bins,coverage,ap,acc,auroc\n");
    let mut md = String::from("| δ | bins | rows | fill | mAP | Avg-acc | AUROC |\n| :-- | --: | --: | --: | --: | --: | --: |\n");
    for (&delta, raw) in values.iter().zip(a.values.split(',')) {
        let cfg = TrainConfig { delta, ..base.clone() };
        let bank = build_bank(&frozen, &train_set, &cfg)?;
        let metrics = if a.bank_only {
            None
        } else {
            let opts = TrainOptions {
                max_steps: a.train.max_steps,
                ..Default::default()
            };
            let out = training::train(&cfg, frozen.clone(), &bank, &train_set, &val_set, opts)?;
            Some(training::report(&out.model, &test_set)?.means)
        };
        let (ap, acc, auroc) = metrics.map(|m| (m.ap, m.acc, m.auroc)).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let cell = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.6}") };
        let pct = |v: f64| if v.is_nan() { "-".to_string() } else { format!("{:.2}", 100.0 * v) };
        writeln!(
            csv,
            "{delta},{},{},{},{:.6},{},{},{}",
            bank.bins,
            bank.len(),
            bank.filled_bins(),
            bank.coverage(),
            cell(ap),
            cell(acc),
            cell(auroc)
        )?;
        writeln!(
            md,
            "| {} | {} | {} | {:.2}% | {} | {} | {} |",
            raw.trim(),
            bank.bins,
            bank.len(),
            100.0 * bank.coverage(),
            pct(ap),
            pct(acc),
            pct(auroc)
        )?;
    }
    if let Some(p) = &a.out {
        write_out(Some(p), &csv)?;
    }
    print!("{md}");
    Ok(())
}

/// CLS embeddings of the chosen split, from a checkpoint's adapted encoder
/// or from the frozen backbone.
fn features(cli: &Cli, f: &FeatureArgs) -> Result<Option<(Vec<Sample>, Vec<Vec<f32>>)>> {
    let sp: Split = f.split.parse()?;
    let records = manifest(&f.data)?;
    let (model, backbone) = match &f.checkpoint {
        Some(ck) => {
            let m = ModelArgs {
                checkpoint: ck.clone(),
                bank: f.bank.clone(),
                force: f.force,
            };
            match load_model(&m, cli.dry_run)? {
                Some((model, cfg)) => (Some(model), cfg.backbone),
                None => return Ok(None),
            }
        }
        None => {
            let c = ConfigArgs {
                config: f.config.clone(),
                backbone: None,
                delta: None,
                no_sts: false,
            };
            let cfg = train_config(cli, &c, None)?;
            if cli.dry_run {
                return Ok(None);
            }
            (None, cfg.backbone)
        }
    };
    let samples = split(&records, sp, backbone.image_size)?;
    if samples.is_empty() {
        return Err(invalid(format!("manifest has no `{}` samples", f.split)));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let feats = match model {
        Some(m) => m.encode(&images, 64)?.into_iter().map(|t| t.cls).collect(),
        None => {
            let frozen = load_frozen(&backbone)?;
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(64) {
                let batch = ImageBatch::from_images(chunk, frozen.device(), frozen.dtype())?;
                out.extend(frozen.encode(&batch)?.into_iter().map(|t| t.cls));
            }
            out
        }
    };
    Ok(Some((samples, feats)))
}

fn diag_stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    let Some((samples, feats)) = features(cli, &a.features)? else {
        println!("ok: inputs are consistent");
        return Ok(());
    };
    let labelled: Vec<LabelledFeature> = samples
        .iter()
        .zip(&feats)
        .map(|(s, v)| LabelledFeature {
            category: s.generator.clone(),
            label: s.label,
            values: v.clone(),
        })
        .collect();
    let stats = embedding_stats(&labelled)?;
    write_out(Some(&a.out), &stats_csv(&stats))?;
    if let Some(p) = &a.embeddings {
        let mut csv = String::from("category,label,values\n");
        for f in &labelled {
            let vals: Vec<String> = f.values.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(csv, "{},{},{}", f.category, f.label, vals.join(" "))?;
        }
        write_out(Some(p), &csv)?;
    }
    for s in &stats {
        println!("{}: real/fake mean gap {:.6} ({} real, {} fake)", s.category, s.gap_norm, s.n_real, s.n_fake);
    }
    Ok(())
}

fn diag_cosine(cli: &Cli, a: &CosineArgs) -> Result<()> {
    let label = match a.label.as_deref() {
        None | Some("all") => None,
        Some("real") => Some(Label::Real),
        Some("fake") => Some(Label::Fake),
        Some(other) => return Err(invalid(format!("unknown label `{other}`"))),
    };
    let Some((samples, feats)) = features(cli, &a.features)? else {
        println!("ok: inputs are consistent");
        return Ok(());
    };
    let feats: Vec<Vec<f32>> = samples
        .iter()
        .zip(feats)
        .filter(|(s, _)| label.is_none_or(|l| s.label == l))
        .map(|(_, f)| f)
        .collect();
    let h = cosine_histogram(&feats, a.pairs, cli.seed.unwrap_or(DEFAULT_SEED), a.bins)?;
    write_out(Some(&a.out), &histogram_csv(&h))?;
    println!("{} pairs: min {:.4}, max {:.4}, mode {:.4}", h.n_pairs, h.min, h.max, h.mode);
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    require_file(&a.input, "report")?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let rep: EvalReport = serde_json::from_str(&text).map_err(|e| SddError::Parse {
        path: a.input.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let text = render(&rep, table_kind(a.table), report_format(a.format), &a.method)?;
    write_out(a.out.as_deref(), &text)
}
