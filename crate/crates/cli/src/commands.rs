use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cryoscore::denoiser::denoise_micrograph;
use cryoscore::evaluation::{
    fsc, match_particles, pick_particles, picking_metrics, psnr, resolution_at, Counts, ParticleSet, PickThreshold,
    PickerConfig, PickingMetrics, PICKING_CSV_HEADER,
};
use cryoscore::mrc_io::{read_mrc, write_micrograph, write_volume, Micrograph, Patch};
use cryoscore::phantom::{make_micrograph, make_volume, PhantomSpec};
use cryoscore::score_model::{load_checkpoint, ScoreModel};
use cryoscore::target_bank::{build_bank, read_bank, write_bank, DownsampleFeatures, TargetBank};
use cryoscore::trainer::{post_refresh_std, train, TrainOutputs, TrainResult};
use log::info;

use crate::plot::{bar_chart, LineChart, Series};
use crate::settings::Settings;
use crate::{
    BuildTargetsArgs, Cli, Command, DenoiseArgs, EvaluateArgs, FscArgs, SimulateArgs, SweepArgs, TrainArgs,
    UsageError,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::BuildTargets(a) => build_targets(&mut settings, a),
        Command::Train(a) => train_cmd(&mut settings, a),
        Command::Denoise(a) => denoise(&mut settings, a),
        Command::Evaluate(a) => evaluate(&mut settings, a),
        Command::Fsc(a) => fsc_cmd(&mut settings, a),
        Command::Sweep(a) => sweep(&mut settings, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => PhantomSpec::read(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.rotation_seed = seed;
    }
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    spec.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("spec.txt"), &spec.to_config_string())?;
    write_volume(&make_volume(&spec)?, a.out.join("volume.mrc"))?;
    for i in 0..a.count {
        let (dir, s) = if a.count == 1 {
            (a.out.clone(), spec.clone())
        } else {
            (a.out.join(format!("mic_{i:03}")), spec.for_micrograph(i))
        };
        let gt = make_micrograph(&s)?;
        gt.write(&dir)?;
        info!("{}: {} particles", dir.display(), gt.coordinates.len());
    }
    Ok(())
}

fn build_targets(s: &mut Settings, a: BuildTargetsArgs) -> Result<()> {
    let flags = [
        ("views", a.views.map(|v| v.to_string())),
        ("cutoff", a.cutoff.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("patch_size", a.size.map(|v| v.to_string())),
        ("inplane_rotations", a.inplane_rotations.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, &v)?;
        }
    }
    let volume = read_mrc(&a.volume)?.into_volume();
    let features = DownsampleFeatures {
        factor: s.bank_feature_factor,
    };
    let bank = build_bank(&volume, &s.bank, &features)?;
    write_bank(&bank, &a.out)?;
    info!(
        "{} views of {}x{} (rank {}, surrogate variance {:.4e}) -> {}",
        bank.len(),
        s.bank.out_size,
        s.bank.out_size,
        bank.rank(),
        bank.sigma2_surrogate,
        a.out.display()
    );
    Ok(())
}

/// `noisy.mrc` files under `root`, or every `*.mrc` when there are none.
pub fn discover_micrographs(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mrc")) {
                out.push(path);
            }
        }
        Ok(())
    }
    if !root.is_dir() {
        return Err(usage(format!("{} is not a directory", root.display())));
    }
    let mut all = Vec::new();
    walk(root, &mut all)?;
    all.sort();
    let noisy: Vec<PathBuf> = all
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n == "noisy.mrc"))
        .cloned()
        .collect();
    let found = if noisy.is_empty() { all } else { noisy };
    if found.is_empty() {
        bail!(cryoscore::Error::Parse(format!("no .mrc files under {}", root.display())));
    }
    Ok(found)
}

fn load_micrographs(paths: &[PathBuf]) -> Result<Vec<Micrograph>> {
    paths
        .iter()
        .map(|p| Ok(read_mrc(p)?.into_micrograph()?))
        .collect()
}

fn apply_train_flags(s: &mut Settings, a: &TrainArgs) -> Result<()> {
    if a.dsm_only {
        s.set("dsm_only", "true")?;
    }
    if let Some(w) = a.fixed_wt {
        s.set("fixed_wt", &w.to_string())?;
    }
    if let Some(e) = a.epochs {
        s.set("epochs", &e.to_string())?;
    }
    if let Some(seed) = a.seed {
        s.set("seed", &seed.to_string())?;
    }
    if a.no_anneal {
        s.schedule = s.schedule.clone().without_annealing();
    }
    clamp_ramp(s);
    Ok(())
}

/// Shortening `epochs` below the ramp end squeezes the ramp to fit.
fn clamp_ramp(s: &mut Settings) {
    let e = s.schedule.epochs;
    if s.schedule.ramp_end_epochs > e {
        s.schedule.warmup_epochs = s.schedule.warmup_epochs.min(e);
        s.schedule.ramp_end_epochs = e;
    }
}

fn loss_plot(r: &TrainResult, path: &Path) -> Result<()> {
    let col = |f: fn(&cryoscore::trainer::MetricsRow) -> f64| r.metrics.iter().map(|m| (m.epoch as f64, f(m))).collect();
    let chart = LineChart {
        title: "Training losses".into(),
        x_label: "epoch".into(),
        y_label: "loss".into(),
        series: vec![
            Series {
                label: "total".into(),
                points: col(|m| m.loss_total),
            },
            Series {
                label: "DSM".into(),
                points: col(|m| m.loss_dsm),
            },
            Series {
                label: "TSM".into(),
                points: col(|m| m.loss_tsm),
            },
        ],
        ..Default::default()
    };
    write(path, &chart.render())
}

fn run_training(s: &Settings, data: &[Micrograph], bank: Option<&TargetBank>, out: &Path) -> Result<TrainResult> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.txt"), &s.to_config_string())?;
    let res = train(data, bank, &s.schedule, &s.model, &TrainOutputs::in_dir(out))?;
    loss_plot(&res, &out.join("loss.svg"))?;
    if !res.probe_confidence.is_empty() {
        let text: String = res
            .probe_confidence
            .iter()
            .enumerate()
            .map(|(e, c)| format!("{e},{c}\n"))
            .collect();
        write(&out.join("confidence.csv"), &format!("epoch,probe_confidence\n{text}"))?;
    }
    Ok(res)
}

fn train_cmd(s: &mut Settings, a: TrainArgs) -> Result<()> {
    apply_train_flags(s, &a)?;
    let bank = match &a.bank {
        Some(p) => Some(read_bank(p)?),
        None if s.schedule.dsm_only => None,
        None => return Err(usage("--bank is required unless --dsm-only is given")),
    };
    let paths = discover_micrographs(&a.data)?;
    info!("training on {} micrographs from {}", paths.len(), a.data.display());
    let data = load_micrographs(&paths)?;
    let res = run_training(s, &data, bank.as_ref(), &a.out)?;
    info!(
        "{} steps, final loss {:.4e}; checkpoint {}",
        res.model.step,
        res.metrics.last().map_or(f64::NAN, |m| m.loss_total),
        a.out.join("model.ckpt").display()
    );
    Ok(())
}

fn denoise(s: &mut Settings, a: DenoiseArgs) -> Result<()> {
    let flags = [
        ("iters", a.iters.map(|v| v.to_string())),
        ("noise_a", a.noise_a.map(|v| v.to_string())),
        ("noise_b", a.noise_b.map(|v| v.to_string())),
        ("tile_size", a.tile_size.clone()),
        ("overlap", a.overlap.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, &v)?;
        }
    }
    s.denoise.validate()?;
    let model: ScoreModel<f32> = load_checkpoint(&a.checkpoint)?.model;
    let input = read_mrc(&a.input)?.into_micrograph()?;
    let (out, stats) = denoise_micrograph(&model, &input, &s.denoise)?;
    let d = &s.denoise;
    let label = format!(
        "cryoscore denoise iters={} a={} b={}",
        d.n_iterations, d.noise_map.a, d.noise_map.b
    );
    let provenance = if input.provenance.is_empty() {
        label
    } else {
        format!("{}\n{label}", input.provenance)
    };
    write_micrograph(&out.with_provenance(provenance), &a.output)?;
    info!(
        "{} tiles, {} clamped updates -> {}",
        stats.tiles,
        stats.clamped_updates,
        a.output.display()
    );
    Ok(())
}

/// Pairs of (id, pred, gt). Directories are paired by path relative to `gt`;
/// a missing prediction counts as an empty set.
fn coordinate_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, ParticleSet, ParticleSet)>> {
    if gt.is_file() {
        if pred.is_dir() {
            return Err(usage("pred is a directory but gt is a file"));
        }
        let id = gt.display().to_string();
        return Ok(vec![(id, ParticleSet::read(pred)?, ParticleSet::read(gt)?)]);
    }
    if !gt.is_dir() {
        return Err(usage(format!("{} does not exist", gt.display())));
    }
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.extension().is_some_and(|e| e == "txt") && path.file_name() != Some("spec.txt".as_ref()) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(gt, &mut files)?;
    files.sort();
    if files.is_empty() {
        bail!(cryoscore::Error::Parse(format!("no coordinate files under {}", gt.display())));
    }
    files
        .into_iter()
        .map(|g| {
            let rel = g.strip_prefix(gt).expect("walked from gt");
            let id = rel.display().to_string();
            let p = pred.join(rel);
            let pred_set = if p.is_file() {
                ParticleSet::read(&p)?
            } else {
                ParticleSet::new(Vec::new(), id.clone())?
            };
            Ok((id, pred_set, ParticleSet::read(&g)?))
        })
        .collect()
}

fn metrics_table(rows: &[(String, PickingMetrics)]) -> String {
    let mut s = format!("{PICKING_CSV_HEADER}\n");
    for (name, m) in rows {
        s.push_str(&m.csv_row(name));
        s.push('\n');
    }
    s
}

fn evaluate(s: &mut Settings, a: EvaluateArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        s.set("threshold", &t.to_string())?;
    }
    let pairs = coordinate_pairs(&a.pred, &a.gt)?;
    let mut counts = Vec::with_capacity(pairs.len());
    let mut per = String::from("micrograph,tp,fp,fn\n");
    for (id, pred, gt) in &pairs {
        let c = match_particles(pred, gt, s.match_threshold)?.counts();
        per.push_str(&format!("{id},{},{},{}\n", c.tp, c.fp, c.fn_));
        counts.push(c);
    }
    let m = picking_metrics(&counts)?;
    write(&a.out, &metrics_table(&[(a.method.clone(), m.clone())]))?;
    write(&a.out.with_extension("per_micrograph.csv"), &per)?;
    if let Some(p) = &a.plot {
        write(p, &picking_plot(&[(a.method.clone(), m.clone())]))?;
    }
    println!(
        "micro P {:.4} R {:.4} F1 {:.4} over {} micrographs",
        m.micro.precision, m.micro.recall, m.micro.f1, m.n_micrographs
    );
    Ok(())
}

fn picking_plot(rows: &[(String, PickingMetrics)]) -> String {
    let data: Vec<(String, Vec<f64>)> = rows
        .iter()
        .map(|(n, m)| (n.clone(), vec![m.micro.precision, m.micro.recall, m.micro.f1]))
        .collect();
    bar_chart("Micro-averaged picking", &["precision", "recall", "F1"], &data)
}

fn fsc_cmd(s: &mut Settings, a: FscArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        s.set("fsc_threshold", &t.to_string())?;
    }
    let v1 = read_mrc(&a.v1)?.into_volume();
    let v2 = read_mrc(&a.v2)?.into_volume();
    let curve = fsc(&v1, &v2)?;
    let res = resolution_at(&curve, s.fsc_threshold)?;
    write(&a.out, &curve.to_csv())?;
    let note = if res.nyquist_limited { " (Nyquist limited)" } else { "" };
    if let Some(p) = &a.plot {
        let chart = LineChart {
            title: "Fourier shell correlation".into(),
            x_label: "spatial frequency (1/Å)".into(),
            y_label: "FSC".into(),
            series: vec![Series {
                label: "FSC".into(),
                points: curve.shell_centers.iter().copied().zip(curve.correlations.iter().copied()).collect(),
            }],
            hlines: vec![(s.fsc_threshold, format!("{}", s.fsc_threshold))],
            marks: vec![(res.frequency, s.fsc_threshold, format!("{:.2} Å{note}", res.angstrom))],
            y_range: Some((-1.05, 1.05)),
        };
        write(p, &chart.render())?;
    }
    println!("resolution {:.3} Å at FSC {}{note}", res.angstrom, s.fsc_threshold);
    Ok(())
}

struct SweepItem {
    data: Micrograph,
    clean: Option<Micrograph>,
    coords: Option<ParticleSet>,
}

fn load_sweep_items(root: &Path) -> Result<Vec<SweepItem>> {
    discover_micrographs(root)?
        .into_iter()
        .map(|p| {
            let dir = p.parent().unwrap_or(Path::new("."));
            let clean_path = dir.join("clean.mrc");
            let coords_path = dir.join("coords.txt");
            Ok(SweepItem {
                data: read_mrc(&p)?.into_micrograph()?,
                clean: if clean_path.is_file() && clean_path != p {
                    Some(read_mrc(&clean_path)?.into_micrograph()?)
                } else {
                    None
                },
                coords: if coords_path.is_file() {
                    Some(ParticleSet::read(&coords_path)?)
                } else {
                    None
                },
            })
        })
        .collect()
}

/// Rescales `clean` to the value range of `noisy` by least squares, so PSNR
/// compares on the noisy image's scale.
fn aligned_clean(clean: &Micrograph, noisy: &Micrograph) -> Patch {
    let n = clean.data.len() as f64;
    let (mc, mn) = (clean.data.sum() / n, noisy.data.sum() / n);
    let mut cov = 0.0;
    let mut var = 0.0;
    for (c, y) in clean.data.iter().zip(noisy.data.iter()) {
        cov += (c - mc) * (y - mn);
        var += (c - mc) * (c - mc);
    }
    let k = if var > 0.0 { cov / var } else { 0.0 };
    clean.data.mapv(|c| mn + k * (c - mc))
}

struct SweepScore {
    metrics: Option<PickingMetrics>,
    psnr: Option<f64>,
}

fn score_images(s: &Settings, items: &[SweepItem], images: &[Patch], templates: &[Patch]) -> Result<SweepScore> {
    let picker = PickerConfig {
        threshold: PickThreshold::RobustSigma(s.pick_sigma),
        min_distance: s.bank.out_size.min(templates.first().map_or(0, |t| t.nrows())) as f64,
    };
    let mut counts: Vec<Counts> = Vec::new();
    let mut psnrs = Vec::new();
    for (item, im) in items.iter().zip(images) {
        if let Some(gt) = &item.coords {
            let (picks, _) = pick_particles(im, templates, &picker)?;
            counts.push(match_particles(&picks, gt, s.match_threshold)?.counts());
        }
        if let Some(clean) = &item.clean {
            psnrs.push(psnr(&aligned_clean(clean, &item.data), im)?);
        }
    }
    Ok(SweepScore {
        metrics: if counts.is_empty() { None } else { Some(picking_metrics(&counts)?) },
        psnr: if psnrs.is_empty() {
            None
        } else {
            Some(psnrs.iter().sum::<f64>() / psnrs.len() as f64)
        },
    })
}

const SWEEP: [(&str, Option<f64>, bool, bool); 6] = [
    ("dsm-only", None, true, false),
    ("fixed-wt-0.05", Some(0.05), false, false),
    ("fixed-wt-0.1", Some(0.1), false, false),
    ("fixed-wt-0.15", Some(0.15), false, false),
    ("adaptive", None, false, false),
    ("no-anneal", None, false, true),
];

fn sweep(base: &mut Settings, a: SweepArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        base.set("epochs", &e.to_string())?;
        clamp_ramp(base);
    }
    let bank = read_bank(&a.bank)?;
    let items = load_sweep_items(&a.data)?;
    let data: Vec<Micrograph> = items.iter().map(|i| i.data.clone()).collect();
    let templates: Vec<_> = (0..bank.len()).map(|j| bank.raw_projection(j)).collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut rows: Vec<(String, SweepScore, Option<f64>)> = Vec::new();
    let noisy: Vec<_> = data.iter().map(|m| m.data.clone()).collect();
    rows.push(("noisy".into(), score_images(base, &items, &noisy, &templates)?, None));
    for (name, fixed_wt, dsm_only, no_anneal) in SWEEP {
        let mut s = base.clone();
        s.schedule.dsm_only = dsm_only;
        s.schedule.fixed_wt = fixed_wt;
        if no_anneal {
            s.schedule = s.schedule.clone().without_annealing();
        }
        info!("sweep: {name}");
        let res = run_training(&s, &data, Some(&bank), &a.out.join(name))?;
        let denoised = data
            .iter()
            .map(|m| Ok(denoise_micrograph(&res.model, m, &s.denoise)?.0.data))
            .collect::<Result<Vec<_>>>()?;
        let stability = (!res.probe_confidence.is_empty())
            .then(|| post_refresh_std(&res.probe_confidence, s.schedule.encoder_refresh_epochs));
        rows.push((name.into(), score_images(&s, &items, &denoised, &templates)?, stability));
    }

    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut csv = String::from("method,micro_P,micro_R,micro_F1,macro_F1_mean,macro_F1_std,psnr_db,post_refresh_std\n");
    for (name, sc, stab) in &rows {
        let m = sc.metrics.as_ref();
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            opt(m.map(|m| m.micro.precision)),
            opt(m.map(|m| m.micro.recall)),
            opt(m.map(|m| m.micro.f1)),
            opt(m.map(|m| m.macro_mean.f1)),
            opt(m.map(|m| m.macro_std.f1)),
            opt(sc.psnr),
            opt(*stab)
        ));
    }
    write(&a.out.join("comparison.csv"), &csv)?;
    let picked: Vec<(String, PickingMetrics)> = rows
        .iter()
        .filter_map(|(n, sc, _)| sc.metrics.clone().map(|m| (n.clone(), m)))
        .collect();
    if !picked.is_empty() {
        write(&a.out.join("comparison.svg"), &picking_plot(&picked))?;
    }
    print!("{csv}");
    Ok(())
}
