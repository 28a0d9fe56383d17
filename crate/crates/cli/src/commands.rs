use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use rhzn_core::corpus::{self, CorpusSpec, TextKind};
use rhzn_core::mdlm::{
    init_model, train_with, ModelCheckpoint, ModelConfig, ModelMode, Remasking, SamplerConfig,
    TrainHyper, Vocab, DEFAULT_SEED, SCHEMA_VERSION,
};
use rhzn_core::niah::{self, NiahSpec};
use rhzn_core::probe::{self, ProbeSummary};
use rhzn_core::rope::{coverage_report, scale_base, AttentionMode, RopeConfig};
use rhzn_core::scaling::plan;
use rhzn_core::seeding::{derive_seed, env_seed};
use rhzn_core::{par, Error};

use crate::manifest::{with_suffix, RunManifest};
use crate::{
    CliError, CorpusArgs, CoverageArgs, NiahArgs, PplArgs, ProbeArgs, RopeArgs, ScaleArgs,
    TrainArgs,
};

type Res<T = ()> = Result<T, CliError>;

fn read_text(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| CliError::file(format!("{}: {e}", path.display())))
}

/// Reads a versioned JSON config. Unknown schema versions and malformed
/// content are configuration errors.
fn load_json<T: DeserializeOwned>(path: &Path) -> Res<T> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if let Some(v) = value.get("schema_version") {
        if v.as_u64() != Some(SCHEMA_VERSION as u64) {
            return Err(CliError::config(format!(
                "{}: unsupported schema_version {v} (expected {SCHEMA_VERSION})",
                path.display()
            )));
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::file(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::file(e.to_string()))?;
    write_file(path, &bytes)
}

fn load_ckpt(path: &Path) -> Res<ModelCheckpoint> {
    ModelCheckpoint::load(path).map_err(|e| CliError::file(format!("{}: {e}", path.display())))
}

/// Explicit flag, then the environment override, then the default.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(env_seed).unwrap_or(DEFAULT_SEED)
}

#[derive(serde::Deserialize)]
struct RopeFile {
    #[serde(flatten)]
    rope: RopeConfig,
}

fn rope_from(args: &RopeArgs) -> Res<RopeConfig> {
    let file = match &args.config {
        Some(p) => Some(load_json::<RopeFile>(p)?.rope),
        None => None,
    };
    fn pick<T>(flag: Option<T>, from_file: Option<T>, name: &str) -> Res<T> {
        flag.or(from_file)
            .ok_or_else(|| CliError::usage(format!("missing --{name} (or --config)")))
    }
    let cfg = RopeConfig {
        head_dim: pick(args.d, file.map(|f| f.head_dim), "d")?,
        rotary_base: pick(args.base, file.map(|f| f.rotary_base), "base")?,
        train_len: pick(args.train_len, file.map(|f| f.train_len), "train-len")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn lambda_rope(rope: &RopeConfig, lambda: Option<f64>) -> Res<RopeConfig> {
    match lambda {
        None => Ok(*rope),
        Some(l) => Ok(scale_base(rope, l)?),
    }
}

pub fn scale(a: ScaleArgs) -> Res {
    let mut man = RunManifest::start("scale");
    man.config(a.rope.config.as_deref());
    let rope = rope_from(&a.rope)?;
    if a.targets.is_empty() {
        return Err(CliError::usage("--targets must list at least one length"));
    }
    let report = plan(&rope, &a.targets)?;
    println!(
        "d={} base={} train_len={} critical_dim={}",
        rope.head_dim, rope.rotary_base, rope.train_len, report.critical_dim
    );
    println!("{:>10} {:>14} {:>8} {:>14}", "target", "lambda_raw", "lambda", "bound");
    for e in &report.entries {
        println!(
            "{:>10} {:>14.6} {:>8} {:>14.1}",
            e.target_len, e.lambda_raw, e.lambda_int, e.bound_at_lambda_int
        );
    }
    let json = a.out_dir.join("scaling.json");
    let csv = a.out_dir.join("scaling.csv");
    let mut buf = Vec::new();
    report.write_json(&mut buf)?;
    write_file(&json, &buf)?;
    buf.clear();
    report.write_csv(&mut buf)?;
    write_file(&csv, &buf)?;
    man.output(&json);
    man.output(&csv);
    man.finish(&json)?;
    Ok(())
}

pub fn coverage(a: CoverageArgs) -> Res {
    let mut man = RunManifest::start("coverage");
    man.config(a.rope.config.as_deref());
    let mode: AttentionMode = a
        .mode
        .parse()
        .map_err(|e: Error| CliError::usage(e.to_string()))?;
    let rope = rope_from(&a.rope)?;
    let report = coverage_report(&rope, mode)?;
    let mut csv = String::from("dim,period,covered_phase_width,full_period\n");
    for p in &report.per_dim {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            p.dim, p.period, p.covered_phase_width, p.full_period_covered
        ));
    }
    write_file(&a.out, csv.as_bytes())?;
    let meta = with_suffix(&a.out, ".json");
    write_json(
        &meta,
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "rope": rope,
            "mode": report.mode,
            "rel_range": [report.rel_range.lo, report.rel_range.hi],
            "critical_dim": report.critical_dim,
        }),
    )?;
    let full = report.per_dim.iter().filter(|p| p.full_period_covered).count();
    println!(
        "mode={} rel_range=[{}, {}] planes_fully_covered={}/{} critical_dim={}",
        report.mode,
        report.rel_range.lo,
        report.rel_range.hi,
        full,
        report.per_dim.len(),
        report.critical_dim
    );
    man.output(&a.out);
    man.output(&meta);
    man.finish(&a.out)?;
    Ok(())
}

pub fn corpus(a: CorpusArgs) -> Res {
    let mut man = RunManifest::start("corpus");
    man.config(a.spec.as_deref());
    let mut spec = match &a.spec {
        Some(p) => load_json::<CorpusSpec>(p)?,
        None => CorpusSpec {
            seed: resolve_seed(None),
            ..CorpusSpec::default()
        },
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let seqs = corpus::generate(&spec)?;
    corpus::write_corpus(&a.out, &seqs).map_err(CliError::from)?;
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    man.seed("corpus", spec.seed);
    man.output(&a.out);
    man.finish(&a.out)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Res {
    let mut man = RunManifest::start("train");
    let init = match &a.init {
        Some(p) => {
            man.config(Some(p));
            Some(load_ckpt(p)?)
        }
        None => None,
    };
    let cfg = match (&init, &a.config, &a.mode) {
        (Some(ck), _, _) => ck.config.clone(),
        (None, Some(p), _) => {
            man.config(Some(p));
            load_json::<ModelConfig>(p)?
        }
        (None, None, Some(m)) => {
            let mode: ModelMode = m.parse().map_err(|e: Error| CliError::usage(e.to_string()))?;
            ModelConfig::toy(mode)
        }
        (None, None, None) => return Err(CliError::usage("pass --config, --mode or --init")),
    };
    let mut cfg = cfg;
    if let Some(b) = a.base {
        cfg.rope.rotary_base = b;
    }
    cfg.validate()?;

    let mut hyper = match &a.hyper {
        Some(p) => {
            man.config(Some(p));
            load_json::<TrainHyper>(p)?
        }
        None => TrainHyper {
            seed: resolve_seed(None),
            ..TrainHyper::default()
        },
    };
    if let Some(s) = a.steps {
        hyper.steps = s;
    }
    if let Some(b) = a.batch {
        hyper.batch = b;
    }
    if let Some(lr) = a.lr {
        hyper.lr = lr;
    }
    if let Some(s) = a.seed {
        hyper.seed = s;
    }

    let seqs = match (&a.corpus, &a.corpus_spec) {
        (Some(p), _) => {
            man.config(Some(p));
            corpus::parse_corpus(&read_text(p)?)?
        }
        (None, spec) => {
            let spec = match spec {
                Some(p) => {
                    man.config(Some(p));
                    load_json::<CorpusSpec>(p)?
                }
                None => CorpusSpec {
                    vocab_size: cfg.vocab_size,
                    max_len: cfg.train_len,
                    seed: hyper.seed,
                    ..CorpusSpec::default()
                },
            };
            man.seed("corpus", spec.seed);
            corpus::generate(&spec)?
        }
    };
    man.seed("train", hyper.seed);

    let init = match init {
        Some(ck) => ck,
        None => init_model(cfg, hyper.seed)?,
    };
    let outcome = par::with_jobs(Some(a.jobs), || {
        train_with(&init, &seqs, &hyper, |step, loss| {
            if step % 100 == 0 || step + 1 == hyper.steps {
                eprintln!("step {step:>6} loss {loss:.4}");
            }
        })
    })??;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(e.to_string()))?;
    }
    outcome.checkpoint.save(&a.out)?;
    let loss_path = with_suffix(&a.out, ".loss.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.6}\n"));
    }
    write_file(&loss_path, csv.as_bytes())?;
    println!(
        "trained {} for {} steps, final loss {:.4}, params {}",
        outcome.checkpoint.config.mode,
        hyper.steps,
        outcome.checkpoint.train_meta.final_loss,
        &outcome.checkpoint.param_hash()[..16]
    );
    man.output(&a.out);
    man.output(&loss_path);
    man.finish(&a.out)?;
    Ok(())
}

pub fn niah(a: NiahArgs) -> Res {
    let mut man = RunManifest::start("niah");
    let ckpt = load_ckpt(&a.ckpt)?;
    man.config(Some(&a.ckpt));
    let mut spec = match &a.spec {
        Some(p) => {
            man.config(Some(p));
            load_json::<NiahSpec>(p)?
        }
        None => NiahSpec {
            vocab_size: ckpt.config.vocab_size,
            seed: resolve_seed(None),
            ..NiahSpec::default()
        },
    };
    if let Some(l) = a.lengths {
        spec.context_lengths = l;
    }
    if let Some(d) = a.depths {
        spec.depths = d;
    }
    if let Some(t) = a.trials {
        spec.trials_per_cell = t;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let remasking: Remasking = a
        .remasking
        .parse()
        .map_err(|e: Error| CliError::usage(e.to_string()))?;
    let sampler = SamplerConfig {
        gen_len: spec.gen_len,
        block_len: a.block_len,
        steps: a.steps,
        remasking,
        seed: spec.seed,
        ..SamplerConfig::default()
    };
    sampler.validate()?;
    let rope = lambda_rope(&ckpt.config.rope, a.lambda)?;
    man.seed("niah", spec.seed);

    let grid = par::with_jobs(a.jobs, || niah::run_grid(&ckpt, &spec, &sampler, Some(&rope)))??;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(e.to_string()))?;
    }
    let side = niah::emit_heatmap(&grid, &a.out)?;
    let window = niah::effective_window(&grid, 0.5)?;
    let window_path = with_suffix(&a.out, ".window.json");
    write_json(&window_path, &window)?;

    print!("{:>8}", "L\\depth");
    for d in &spec.depths {
        print!(" {d:>5.2}");
    }
    println!();
    for (l, row) in spec.context_lengths.iter().zip(&grid.accuracy) {
        print!("{l:>8}");
        for acc in row {
            print!(" {acc:>5.2}");
        }
        println!();
    }
    println!(
        "effective window W = {:.1} tokens (residual {:.3}{})",
        window.window_tokens,
        window.fit_residual,
        if window.no_success { ", no successful cell" } else { "" }
    );
    man.output(&a.out);
    man.output(side);
    man.output(&window_path);
    man.finish(&a.out)?;
    Ok(())
}

/// Held-out evaluation sequence of exactly `len` tokens.
pub fn heldout_text(kind: &str, vocab: Vocab, len: usize, seed: u64, index: usize) -> Res<Vec<u32>> {
    let kind: TextKind = kind.parse().map_err(|e: Error| CliError::usage(e.to_string()))?;
    Ok(corpus::heldout_sequence(kind, vocab, len, seed, index)?)
}

pub fn ppl(a: PplArgs) -> Res {
    let mut man = RunManifest::start("ppl");
    let ckpt = load_ckpt(&a.ckpt)?;
    man.config(Some(&a.ckpt));
    let t = ckpt.config.train_len;
    let lengths = a
        .lengths
        .unwrap_or_else(|| vec![t / 4, t / 2, t, 3 * t / 2, 2 * t, 3 * t, 4 * t]);
    if a.samples == 0 {
        return Err(CliError::usage("--samples must be >= 1"));
    }
    let seed = resolve_seed(a.seed);
    man.seed("ppl", seed);
    let rope = lambda_rope(&ckpt.config.rope, a.lambda)?;
    let estimator = match ckpt.config.mode {
        ModelMode::Causal => "exact",
        ModelMode::BidirectionalMdlm => "mc_bound",
    };
    let vocab = ckpt.config.vocab();
    let mut csv = String::from("length,nll,perplexity,estimator\n");
    for &len in &lengths {
        let texts: Vec<Vec<u32>> = (0..a.samples)
            .map(|i| heldout_text(&a.text, vocab, len, seed, i))
            .collect::<Res<_>>()?;
        let nlls = par::with_jobs(Some(a.jobs), || {
            par::map_indexed(texts.len(), |i| {
                rhzn_core::mdlm::eval_nll_with(
                    &ckpt,
                    &texts[i],
                    a.mc_samples,
                    derive_seed(seed, &[len as u64, i as u64]),
                    &rope,
                )
            })
        })?;
        let mut total = 0.0;
        for n in nlls {
            total += n?;
        }
        let nll = total / a.samples as f64;
        println!("L={len:>6} nll={nll:.4} ppl={:.3} ({estimator})", nll.exp());
        csv.push_str(&format!("{len},{nll:.6},{:.6},{estimator}\n", nll.exp()));
    }
    write_file(&a.out, csv.as_bytes())?;
    man.output(&a.out);
    man.finish(&a.out)?;
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Res {
    let mut man = RunManifest::start("probe");
    let ckpt = load_ckpt(&a.ckpt)?;
    man.config(Some(&a.ckpt));
    let t = ckpt.config.train_len;
    let len = a.len.unwrap_or(2 * t);
    let boundary = a.boundary.unwrap_or(t);
    let layer = a.layer.unwrap_or(ckpt.config.n_layers - 1);
    let seed = resolve_seed(a.seed);
    man.seed("probe", seed);
    let tokens = heldout_text("kv", ckpt.config.vocab(), len, seed, 0)?;
    let cap = probe::capture(&ckpt, &tokens, layer, a.head)?;
    let proj = probe::project2d(&cap.post_rope_k)?;
    let stat = probe::shift_statistic(&cap, boundary)?;
    let summary = ProbeSummary {
        layer,
        head: a.head,
        len,
        boundary,
        shift_statistic: stat,
        explained_variance: proj.explained_variance,
        method: proj.method.clone(),
        degenerate: proj.degenerate,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(e.to_string()))?;
    }
    let json: PathBuf = with_suffix(&a.out, ".json");
    probe::write_probe(&cap.positions, &proj, &summary, &a.out, &json)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "layer {layer} head {} len {len} boundary {boundary}: shift statistic {stat:.6}",
        a.head
    );
    man.output(&a.out);
    man.output(&json);
    man.finish(&a.out)?;
    Ok(())
}
