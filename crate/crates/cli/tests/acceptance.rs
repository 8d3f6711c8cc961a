// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one `ACnn <name> PASS|FAIL` line per criterion
//! and exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Result};
use scalewise_core::analysis::{
    emit_report, qkv_swap_study_with, read_report, stepwise_influence_with, InfluenceCurve, SwapReport,
};
use scalewise_core::codec::{decode, encode_style, resize_image, write_ppm, Image};
use scalewise_core::interventions::{aqs, generate_with_plan, inject_prompt, ksas, InterventionPlan, PlanOverrides};
use scalewise_core::model::{scaled_dot_product, AttentionPacket, HeadQkv, HookEvent};
use scalewise_core::numerics::{area_pool, bilinear_upsample, FeatureMap, RngStream, TokenMatrix};
use scalewise_core::pipeline::{
    baseline_generate_with, personalize, personalize_with_image, personalize_with_plan, PathId, PersonalizationRequest,
};
use scalewise_core::quantizer::{quantize, BitGrid, QuantizerConfig, QuantizerMode};
use scalewise_core::textenc::{build_gen_prompt, encode_prompt};
use scalewise_core::{GenerationTrace, Model, ModelConfig};

const CONTENT: &str = "A photo of a red truck";
const STYLE: &str = "watercolor painting";
const ALT: &str = "A watercolor painting of a quiet mountain lake";

struct Fixture {
    _dir: tempfile::TempDir,
    style_path: PathBuf,
    style: Image,
    cfg: ModelConfig,
    model: Model,
}

impl Fixture {
    fn new() -> Result<Self> {
        let dir = tempfile::tempdir()?;
        let mut style = Image::filled(32, 32, [0, 0, 0]);
        for y in 0..32 {
            for x in 0..32 {
                let (xf, yf) = (x as u8, y as u8);
                style.set_pixel(y, x, [90 + 3 * xf, 110 + 2 * yf, 170 - xf - yf]);
            }
        }
        let style_path = dir.path().join("style.ppm");
        write_ppm(&style, &style_path)?;
        let cfg = ModelConfig::default();
        let model = Model::new(cfg.clone())?;
        Ok(Self { _dir: dir, style_path, style, cfg, model })
    }
}

fn same_bits(a: &FeatureMap, b: &FeatureMap) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------------------
// 1. Determinism of every CLI command
// ---------------------------------------------------------------------------

fn run_cli(cwd: &Path, args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_scalewise")).current_dir(cwd).args(args).output()?;
    ensure!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn dir_contents(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        files.push((entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?));
    }
    files.sort();
    Ok(files)
}

fn ac01_determinism(fx: &Fixture) -> Result<String> {
    let style = fx.style_path.to_str().ok_or_else(|| anyhow!("non-UTF-8 temp path"))?;
    let commands: Vec<Vec<&str>> = vec![
        vec!["generate", "--prompt", "A photo of a donut"],
        vec!["personalize", "--content", CONTENT, "--style-text", STYLE, "--style-image", style],
        vec!["style-aligned", "--content", CONTENT, "--style-text", STYLE],
        vec!["analyze", "inject", "--prompt", CONTENT, "--alt-prompt", "A photo of a green truck"],
        vec!["analyze", "swap", "--prompt", CONTENT, "--alt-prompt", "A photo of a green truck"],
    ];
    let start = Instant::now();
    let mut artifacts = 0;
    for cmd in &commands {
        let runs = [tempfile::tempdir()?, tempfile::tempdir()?];
        for dir in &runs {
            let mut args = cmd.clone();
            args.extend(["--seed", "7", "-o", "out"]);
            run_cli(dir.path(), &args)?;
        }
        let (a, b) = (dir_contents(&runs[0].path().join("out"))?, dir_contents(&runs[1].path().join("out"))?);
        ensure!(!a.is_empty(), "{cmd:?} wrote nothing");
        ensure!(a == b, "{cmd:?}: artifacts differ between runs");
        artifacts += a.len();
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{} commands x2, {artifacts} artifacts identical, {:.1}s", commands.len(), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 2. Neutral plan equals baseline
// ---------------------------------------------------------------------------

fn ac02_neutral(fx: &Fixture) -> Result<String> {
    let seed = 3;
    let (img, bundle) =
        personalize_with_image(&fx.model, CONTENT, STYLE, &fx.style, seed, Some(&PlanOverrides::neutral()))?;
    let composed = build_gen_prompt(CONTENT, STYLE)?;
    let (base_img, base) = baseline_generate_with(&fx.model, &composed, seed, false)?;
    ensure!(img == base_img, "final images differ");
    for (a, b) in bundle.generation.steps.iter().zip(&base.steps) {
        ensure!(a.residual.checksum() == b.residual.checksum(), "residual checksum differs at step {}", a.step);
        ensure!(a.bits == b.bits, "bits differ at step {}", a.step);
        ensure!(same_bits(&a.accumulated, &b.accumulated), "F_{} differs", a.step);
    }
    ensure!(bundle.generation.len() == base.len(), "trace lengths differ");
    Ok(format!("{} steps bit-identical", base.len()))
}

// ---------------------------------------------------------------------------
// 3. Accumulation identity
// ---------------------------------------------------------------------------

fn ac03_accumulation(fx: &Fixture) -> Result<String> {
    let cfg = ModelConfig {
        quantizer: QuantizerConfig { mode: QuantizerMode::Sample, ..fx.cfg.quantizer },
        ..fx.cfg.clone()
    };
    let model = Model::new(cfg.clone())?;
    let (fh, fw) = cfg.schedule.final_resolution();
    let mut finals = BTreeSet::new();
    let mut checked = 0;
    let mut seeds = RngStream::new(2024);
    for _ in 0..20 {
        let seed = seeds.next_u64();
        let (_, trace) = baseline_generate_with(&model, CONTENT, seed, false)?;
        let mut f = FeatureMap::zeros(cfg.channels, fh, fw);
        for rec in &trace.steps {
            f.add_assign(&bilinear_upsample(&rec.residual, fh, fw)?)?;
            ensure!(same_bits(&f, &rec.accumulated), "seed {seed}: F_{} not reproduced", rec.step);
            checked += 1;
        }
        finals.insert(trace.final_features().map(FeatureMap::checksum));
    }
    ensure!(finals.len() > 1, "sampling produced identical traces for every seed");
    Ok(format!("20 seeds, {checked} feature maps exact, {} distinct finals", finals.len()))
}

// ---------------------------------------------------------------------------
// 4. Causality of prompt injection
// ---------------------------------------------------------------------------

fn generation_trace(model: &Model, prompt: &str, plan: &InterventionPlan, seed: u64) -> Result<GenerationTrace> {
    let text = encode_prompt(prompt, model.config().d_text)?;
    Ok(generate_with_plan(model, &text, plan, &mut PathId::Generation.rng(seed), None, false)?)
}

fn ac04_causality(fx: &Fixture) -> Result<String> {
    let steps = fx.cfg.schedule.len();
    let mut injections = 0;
    for seed in 0..5 {
        let base = generation_trace(&fx.model, CONTENT, &InterventionPlan::empty(&fx.cfg.schedule), seed)?;
        for s in 1..=steps {
            let plan = inject_prompt(InterventionPlan::empty(&fx.cfg.schedule), s, ALT)?;
            let inj = generation_trace(&fx.model, CONTENT, &plan, seed)?;
            for (a, b) in base.steps.iter().zip(&inj.steps).take(s - 1) {
                ensure!(
                    a.residual.checksum() == b.residual.checksum() && a.bits == b.bits,
                    "seed {seed}: injection at {s} changed R_{}",
                    a.step
                );
            }
            ensure!(
                base.steps.iter().zip(&inj.steps).skip(s - 1).any(|(a, b)| a.bits != b.bits),
                "seed {seed}: injection at {s} changed nothing"
            );
            injections += 1;
        }
    }
    Ok(format!("{injections} injections over 5 seeds"))
}

// ---------------------------------------------------------------------------
// 5. Key-stage attention sharing
// ---------------------------------------------------------------------------

fn sentinel_packet(step: usize, n: usize, q: f32, k: f32, v: f32) -> AttentionPacket {
    let m = |x: f32| TokenMatrix::new(n, 4, vec![x; n * 4]).unwrap();
    AttentionPacket { step, layer: 0, heads: (0..2).map(|_| HeadQkv { q: m(q), k: m(k), v: m(v) }).collect() }
}

fn ac05_ksas(fx: &Fixture) -> Result<String> {
    // Sentinel wiring: Q from content, K = [content; style], V = [generation; style].
    let n = 3;
    let gen = sentinel_packet(2, n, 1.0, 2.0, 3.0);
    let con = sentinel_packet(2, n, 4.0, 5.0, 6.0);
    let sty = sentinel_packet(2, n, 7.0, 8.0, 9.0);
    let shared = ksas(&gen, &con, &sty, 2)?;
    for h in &shared.heads {
        ensure!(h.q.data().iter().all(|&x| x == 4.0), "query not from content path");
        ensure!((0..n).all(|i| h.k.row(i).iter().all(|&x| x == 5.0)), "K block 1 not from content path");
        ensure!((n..2 * n).all(|i| h.k.row(i).iter().all(|&x| x == 8.0)), "K block 2 not from style path");
        ensure!((0..n).all(|i| h.v.row(i).iter().all(|&x| x == 3.0)), "V block 1 not from generation path");
        ensure!((n..2 * n).all(|i| h.v.row(i).iter().all(|&x| x == 9.0)), "V block 2 not from style path");
    }

    // Full run: logged token counts, stage sets and row sums.
    let plan = InterventionPlan::personalization(&fx.cfg.schedule);
    let (_, bundle) = personalize_with_plan(&fx.model, CONTENT, STYLE, &fx.style, 0, &plan, true)?;
    let gen = &bundle.generation;
    let mut ksas_events = 0;
    let (mut init, mut ksas_steps, mut aqs_steps) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for ev in gen.events() {
        match *ev {
            HookEvent::Ksas { step, query_tokens, kv_tokens, .. } => {
                let ns = fx.cfg.schedule.tokens(step)?;
                ensure!(query_tokens == ns && kv_tokens == 2 * ns, "step {step}: {query_tokens} q / {kv_tokens} kv");
                ksas_steps.insert(step);
                ksas_events += 1;
            }
            HookEvent::FeatureInit { step } => {
                init.insert(step);
            }
            HookEvent::Aqs { step, .. } => {
                aqs_steps.insert(step);
            }
            _ => {}
        }
    }
    ensure!(init == BTreeSet::from([1, 2]), "feature init at {init:?}");
    ensure!(ksas_steps == BTreeSet::from([2, 3]), "KSAS at {ksas_steps:?}");
    ensure!(ksas_events == 2 * fx.cfg.n_layers, "{ksas_events} KSAS events");
    ensure!(aqs_steps == BTreeSet::from([4, 5, 6, 7]), "AQS at {aqs_steps:?}");
    let mut worst = 0.0f64;
    for step in [2, 3] {
        let ns = fx.cfg.schedule.tokens(step)?;
        for layer in 0..fx.cfg.n_layers {
            let packet = gen.packet(step, layer).ok_or_else(|| anyhow!("no packet at {step}/{layer}"))?;
            ensure!(packet.kv_tokens() == 2 * ns, "stored packet at step {step} not widened");
            for h in &packet.heads {
                worst = worst.max(scaled_dot_product(&h.q, &h.k, &h.v)?.max_row_sum_error());
            }
        }
    }
    for path in PathId::ALL {
        worst = worst.max(bundle.trace(path).max_row_sum_error());
    }
    ensure!(worst <= 1e-6, "row sum error {worst:e}");
    Ok(format!("sentinels wired, {ksas_events} KSAS events, max row-sum error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 6. Adaptive query sharing
// ---------------------------------------------------------------------------

fn random_matrix(rng: &mut RngStream, n: usize, d: usize) -> TokenMatrix {
    TokenMatrix::new(n, d, (0..n * d).map(|_| rng.next_symmetric()).collect()).unwrap()
}

fn ac06_aqs(_: &Fixture) -> Result<String> {
    let mut rng = RngStream::new(6);
    for i in 0..1000 {
        let g = random_matrix(&mut rng, 4, 16);
        let c = random_matrix(&mut rng, 4, 16);
        let (blend, alpha) = aqs(&g, &c, None)?;
        ensure!((0.0..=1.0).contains(&alpha), "pair {i}: alpha {alpha}");
        for ((&b, &x), &y) in blend.data().iter().zip(g.data()).zip(c.data()) {
            ensure!(x.min(y) <= b && b <= x.max(y), "pair {i}: {b} outside [{x}, {y}]");
        }
        let (same, alpha) = aqs(&g, &g.clone(), None)?;
        ensure!(alpha == 1.0 && same == g, "pair {i}: identical queries gave alpha {alpha}");
    }
    let g = random_matrix(&mut rng, 4, 16);
    let anti = TokenMatrix::new(4, 16, g.data().iter().map(|x| -x).collect())?;
    let (blend, alpha) = aqs(&g, &anti, None)?;
    ensure!(alpha == 0.0 && blend == anti, "anti-parallel pair gave alpha {alpha}");
    Ok("1000 convex pairs, identity and clamp exact".into())
}

// ---------------------------------------------------------------------------
// 7. Feature initialization
// ---------------------------------------------------------------------------

fn ac07_feature_init(fx: &Fixture) -> Result<String> {
    let (_, bundle) = personalize_with_image(&fx.model, CONTENT, STYLE, &fx.style, 0, None)?;
    let plan = &bundle.plan;
    let (fh, fw) = fx.cfg.schedule.final_resolution();
    let feats = encode_style(&resize_image(&fx.style, fh, fw)?, &fx.model)?;
    let last = *plan.key_steps.iter().next().ok_or_else(|| anyhow!("empty S_key"))?;
    for s in 1..=last {
        let rec = bundle.generation.step(s).ok_or_else(|| anyhow!("missing step {s}"))?;
        ensure!(rec.synthetic, "step {s} not marked as initialized");
        ensure!(same_bits(&rec.residual, &feats[s - 1]), "step {s}: stored features differ from encoding");
        ensure!(
            same_bits(&rec.accumulated, &bilinear_upsample(&feats[s - 1], fh, fw)?),
            "F_{s} differs from the upsampled encoding"
        );
    }
    let decoded = decode(&bundle.generation.step(last).unwrap().accumulated, &fx.model)?;
    let (h, w) = fx.cfg.schedule.resolution(last)?;
    let pooled = area_pool(&fx.style.to_unit_map(), h, w)?;
    let mut worst = 0.0f64;
    for (ch, got) in decoded.channel_means().into_iter().enumerate() {
        let want = (0..h * w).map(|i| f64::from(pooled.get(ch, i / w, i % w))).sum::<f64>() / (h * w) as f64 * 255.0;
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 2.0, "mean channel error {worst:.3}/255");
    Ok(format!("steps 1..={last} exact, mean channel error {worst:.3}/255"))
}

// ---------------------------------------------------------------------------
// 8. Quantizer
// ---------------------------------------------------------------------------

fn ac08_quantizer(_: &Fixture) -> Result<String> {
    let mut rng = RngStream::new(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let raw = FeatureMap::new(16, 6, 6, (0..16 * 36).map(|_| rng.next_symmetric() * 3.0).collect())?;
        let (bits, map) = quantize(&raw, 16)?;
        for y in 0..6 {
            for x in 0..6 {
                let norm = map.site(y, x).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                worst = worst.max((norm - 1.0).abs());
            }
        }
        let (bits2, map2) = quantize(&map, 16)?;
        ensure!(bits2 == bits && same_bits(&map2, &map), "quantize is not idempotent");
    }
    ensure!(worst <= 1e-6, "site norm error {worst:e}");
    let codes: BTreeSet<Vec<u32>> = (0u64..8)
        .map(|code| {
            let v = BitGrid::new(3, 1, 1, vec![code]).unwrap().to_feature_map();
            v.data().iter().map(|x| x.to_bits()).collect()
        })
        .collect();
    ensure!(codes.len() == 8, "only {} distinct codes at c = 3", codes.len());
    Ok(format!("norm error {worst:.1e}, idempotent, 8/8 codes distinct"))
}

// ---------------------------------------------------------------------------
// 9. Attention against a dense f64 oracle
// ---------------------------------------------------------------------------

type Dense = Vec<Vec<f64>>;

fn dense(m: &TokenMatrix) -> Dense {
    (0..m.tokens()).map(|i| m.row(i).iter().map(|&v| f64::from(v)).collect()).collect()
}

fn weight(model: &Model, index: usize, fan_in: usize) -> Dense {
    let w = model.projection_weights().nth(index).expect("weight index in range");
    w.chunks(w.len() / fan_in).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn mul(a: &Dense, b: &Dense) -> Dense {
    a.iter().map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect()).collect()
}

fn attend(q: &Dense, k: &Dense, v: &Dense, heads: usize) -> Dense {
    let dh = q[0].len() / heads;
    let mut out = vec![Vec::new(); q.len()];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for (qi, o) in q.iter().zip(out.iter_mut()) {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| {
                    qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            o.extend(r.clone().map(|c| e.iter().zip(v).map(|(p, vj)| p / z * vj[c]).sum::<f64>()));
        }
    }
    out
}

fn max_diff(got: &TokenMatrix, want: &Dense) -> f64 {
    want.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, &w)| (f64::from(got.get(i, j)) - w).abs()))
        .fold(0.0, f64::max)
}

fn random_packet(rng: &mut RngStream, cfg: &ModelConfig, n: usize, layer: usize) -> AttentionPacket {
    let dh = cfg.head_dim();
    let heads = (0..cfg.n_heads)
        .map(|_| HeadQkv { q: random_matrix(rng, n, dh), k: random_matrix(rng, n, dh), v: random_matrix(rng, n, dh) })
        .collect();
    AttentionPacket { step: 2, layer, heads }
}

fn ac09_attention_oracle(fx: &Fixture) -> Result<String> {
    let cfg = &fx.cfg;
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let mut rng = RngStream::new(9);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=8 {
        for layer in 0..cfg.n_layers {
            let base = 1 + layer * 10;
            let gen = random_packet(&mut rng, cfg, n, layer);
            let con = random_packet(&mut rng, cfg, n, layer);
            let sty = random_packet(&mut rng, cfg, n, layer);
            for packet in [gen.clone(), ksas(&gen, &con, &sty, 2)?] {
                let merge = |pick: fn(&HeadQkv) -> &TokenMatrix| -> Dense {
                    let rows = pick(&packet.heads[0]).tokens();
                    (0..rows).map(|i| packet.heads.iter().flat_map(|h| dense(pick(h))[i].clone()).collect()).collect()
                };
                let want = mul(
                    &attend(&merge(|h| &h.q), &merge(|h| &h.k), &merge(|h| &h.v), heads),
                    &weight(&fx.model, base + 3, d),
                );
                let (got, stats) = fx.model.self_attention(&packet)?;
                ensure!(stats.max_row_sum_error <= 1e-6, "row sum error {}", stats.max_row_sum_error);
                worst = worst.max(max_diff(&got, &want));
                cases += 1;
            }
            let tokens = random_matrix(&mut rng, n, d);
            let text = encode_prompt(&format!("prompt number {n} for layer {layer}"), cfg.d_text)?;
            let x = dense(&tokens);
            let t = dense(text.matrix());
            let q = mul(&x, &weight(&fx.model, base + 4, d));
            let k = mul(&t, &weight(&fx.model, base + 5, cfg.d_text));
            let v = mul(&t, &weight(&fx.model, base + 6, cfg.d_text));
            let want = mul(&attend(&q, &k, &v, heads), &weight(&fx.model, base + 7, d));
            worst = worst.max(max_diff(&fx.model.cross_attention(layer, &tokens, &text)?, &want));
            cases += 1;
        }
    }
    ensure!(worst <= 1e-5, "max deviation {worst:e}");
    Ok(format!("{cases} cases, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 10. Analysis harness
// ---------------------------------------------------------------------------

fn ac10_analysis(fx: &Fixture) -> Result<String> {
    let neutral = stepwise_influence_with(&fx.model, CONTENT, CONTENT, 1)?;
    ensure!(neutral.steps.len() == fx.cfg.schedule.len(), "curve has {} rows", neutral.steps.len());
    ensure!(
        neutral.image_dist.iter().chain(&neutral.feature_dist).all(|&x| x == 0.0),
        "neutral injection moved the output"
    );
    let swap = qkv_swap_study_with(&fx.model, CONTENT, CONTENT, 1)?;
    ensure!(swap.variants.len() == 3, "{} swap variants", swap.variants.len());
    for v in &swap.variants {
        let d = [v.image_dist_to_a, v.image_dist_to_b, v.feature_dist_to_a, v.feature_dist_to_b];
        ensure!(d == [0.0; 4], "self-swap of {} gave {d:?}", v.component);
    }

    let dir = tempfile::tempdir()?;
    let curve = stepwise_influence_with(&fx.model, CONTENT, "A photo of a green truck", 1)?;
    let swap = qkv_swap_study_with(&fx.model, CONTENT, "A photo of a green truck", 1)?;
    let p = emit_report(&curve, dir.path().join("curve.json"))?;
    ensure!(read_report::<InfluenceCurve>(&p[0])? == curve, "influence curve did not round-trip");
    let p = emit_report(&swap, dir.path().join("swap_report.json"))?;
    ensure!(read_report::<SwapReport>(&p[0])? == swap, "swap report did not round-trip");
    let p = emit_report(&neutral, dir.path().join("neutral.json"))?;
    ensure!(read_report::<InfluenceCurve>(&p[0])? == neutral, "neutral curve did not round-trip");
    Ok("zero curves, zero self-swap, reports round-trip".into())
}

// ---------------------------------------------------------------------------
// 11. Single-threaded performance
// ---------------------------------------------------------------------------

fn ac11_performance(fx: &Fixture) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let req = PersonalizationRequest {
        content_prompt: CONTENT.into(),
        style_prompt: STYLE.into(),
        style_image_path: fx.style_path.clone(),
        seed: 0,
        cfg: fx.cfg.clone(),
        plan_overrides: None,
    };
    let elapsed = pool.install(|| -> Result<Duration> {
        let start = Instant::now();
        personalize(&req)?;
        Ok(start.elapsed())
    })?;
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{:.2}s on one thread", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn(&Fixture) -> Result<String>);

const CRITERIA: [Criterion; 11] = [
    ("determinism", ac01_determinism),
    ("neutral-equivalence", ac02_neutral),
    ("accumulation-identity", ac03_accumulation),
    ("causality", ac04_causality),
    ("ksas-contract", ac05_ksas),
    ("aqs-contract", ac06_aqs),
    ("feature-init", ac07_feature_init),
    ("quantizer", ac08_quantizer),
    ("attention-oracle", ac09_attention_oracle),
    ("analysis-harness", ac10_analysis),
    ("performance", ac11_performance),
];

fn main() -> ExitCode {
    let fx = match Fixture::new() {
        Ok(fx) => fx,
        Err(e) => {
            eprintln!("fixture setup failed: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(|| check(&fx))) {
            Ok(Ok(detail)) => Ok(detail),
            Ok(Err(e)) => Err(format!("{e:#}")),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("AC{:02} {name:<22} PASS  {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("AC{:02} {name:<22} FAIL  {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", CRITERIA.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
