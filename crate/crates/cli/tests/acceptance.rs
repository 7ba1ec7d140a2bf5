//! Acceptance suite. Every criterion runs in sequence inside one test so that the timing
//! measurements are not disturbed by other tests; each prints one PASS/FAIL line.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ctxspeech_core::attention::{apply_rpe, kernel_attention_oracle, linearized_attention, Role};
use ctxspeech_core::bench::{run_bench, BenchSpec, TrackingAllocator};
use ctxspeech_core::conformer::{ConformerStack, StackConfig};
use ctxspeech_core::context::{
    token_stats, ContextEncoder, ContextEncoderConfig, CorpusStats, HashEmbeddingProvider, ParagraphDocument,
};
use ctxspeech_core::{
    AttentionConfig, AttentionVariant, GradTape, Kernel, MemoryConfig, NamedTensors, Permutation, RpeConfig,
    SegmentMemory, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

type Outcome = Result<String, String>;

fn report(name: &str, elapsed: Duration, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Written straight to the stream so the line shows up even when output is captured.
    let line = format!("{tag} {name} ({:.2}s): {detail}\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let trials = 250;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let (lq, lk) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (d, dv) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let q = Tensor::randn(&[lq, d], &mut rng);
        let k = Tensor::randn(&[lk, d], &mut rng);
        let v = Tensor::randn(&[lk, dv], &mut rng);
        let fast = linearized_attention(&q, &k, &v, Kernel::EluPlusOne).map_err(|e| e.to_string())?;
        let slow = kernel_attention_oracle(&q, &k, &v, Kernel::EluPlusOne).map_err(|e| e.to_string())?;
        let rel = fast.max_rel_diff(&slow).map_err(|e| e.to_string())?;
        check(rel < 1e-10, || format!("trial {t}: relative error {rel:e}"))?;
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{trials} instances, max relative error {worst:.2e}, {secs:.2}s"))
}

/// `P^n` by repeated products of the permutation matrix; negative powers use the transpose.
fn matrix_power(perm: &Permutation, n: i64) -> Tensor {
    let p = perm.to_matrix();
    let mut out = Tensor::eye(perm.len());
    for _ in 0..n.unsigned_abs() {
        out = out.matmul(&p).unwrap();
    }
    if n < 0 {
        out.transpose().unwrap()
    } else {
        out
    }
}

fn rpe_relative_property() -> Outcome {
    let mut worst_shift = 0.0f64;
    let mut worst_matrix = 0.0f64;
    for t in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + t);
        let d = rng.random_range(2..=12);
        let l = rng.random_range(2..=10);
        let rpe = RpeConfig::random(d, t, 1.0, 256).map_err(|e| e.to_string())?;
        let fq = Tensor::randn(&[l, d], &mut rng).elu_plus_one();
        let fk = Tensor::randn(&[l, d], &mut rng).elu_plus_one();
        let sims = |shift: i64| -> Tensor {
            let pos: Vec<i64> = (0..l as i64).map(|p| p + shift).collect();
            let tq = apply_rpe(&fq, &pos, &rpe, Role::Query).unwrap();
            let tk = apply_rpe(&fk, &pos, &rpe, Role::Key).unwrap();
            tq.matmul(&tk.transpose().unwrap()).unwrap()
        };
        let base = sims(0);
        for shift in [-7, 13, 100] {
            let diff = sims(shift).max_abs_diff(&base).unwrap();
            worst_shift = worst_shift.max(diff);
        }
        for i in 0..l {
            for j in 0..l {
                let pk = matrix_power(rpe.permutation(), j as i64 - i as i64)
                    .matmul(&Tensor::new(vec![d, 1], fk.row(j).to_vec()).unwrap())
                    .unwrap();
                let expected: f64 = fq.row(i).iter().zip(pk.data()).map(|(a, b)| a * b).sum();
                worst_matrix = worst_matrix.max((base.get(i, j) - expected).abs());
            }
        }
    }
    check(worst_shift < 1e-10, || format!("shift invariance error {worst_shift:e}"))?;
    check(worst_matrix < 1e-10, || format!("relative-form error {worst_matrix:e}"))?;
    Ok(format!(
        "40 instances, shifts -7/13/100 max diff {worst_shift:.1e}, permutation-matrix form max diff {worst_matrix:.1e}"
    ))
}

fn small_stack(variant: AttentionVariant, blocks: usize, seed: u64) -> ConformerStack {
    let attention = AttentionConfig::new(variant, 2, 4).unwrap();
    ConformerStack::random(StackConfig::new(blocks, attention), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn filled_memory(blocks: usize, capacity: usize, hidden: usize, rng: &mut ChaCha8Rng) -> SegmentMemory {
    let states: Vec<Tensor> = (0..blocks).map(|_| Tensor::randn(&[capacity, hidden], rng)).collect();
    SegmentMemory::new(MemoryConfig {
        num_layers: blocks,
        capacity,
        hidden,
    })
    .update(&states)
    .unwrap()
}

fn stop_gradient_contract() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (n, variant) in AttentionVariant::ALL.into_iter().enumerate() {
        let stack = small_stack(variant, 2, 30 + n as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(40 + n as u64);
        let memory = filled_memory(2, 5, 8, &mut rng);
        let x0 = Tensor::randn(&[6, 8], &mut rng);
        let weights = Tensor::randn(&[6, 8], &mut rng);

        let mut tape = GradTape::new();
        let x = tape.param(x0.clone());
        let out = stack.forward_on_tape(&mut tape, &x, Some(&memory)).map_err(|e| e.to_string())?;
        let w = tape.constant(weights.clone());
        let weighted = tape.mul(&out.output, &w).unwrap();
        let loss = tape.sum(&weighted);
        let grads = tape.backward(&loss).map_err(|e| e.to_string())?;

        check(out.memory_vars.len() == 2, || format!("{variant}: expected 2 memory tensors"))?;
        for m in &out.memory_vars {
            let g = grads.get(m).ok_or("no gradient entry for a memory tensor")?;
            check(g.data().iter().all(|&v| v == 0.0), || format!("{variant}: memory gradient not exactly zero"))?;
        }
        let gx = grads.get(&x).ok_or("no gradient for the input")?;
        let f = |t: &Tensor| {
            let (y, _) = stack.forward(t, Some(&memory)).unwrap();
            y.mul(&weights).unwrap().sum()
        };
        let h = 1e-5;
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = gx.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            check(rel < 1e-4, || format!("{variant}: element {i} analytic {an} vs numeric {fd}"))?;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "memory gradients exactly zero for all variants; {checked} input gradients match finite differences (max rel {worst:.1e}), {secs:.2}s"
    ))
}

fn memory_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..200 {
        let cap = rng.random_range(0..200);
        let l = rng.random_range(1..300);
        let m = SegmentMemory::new(MemoryConfig {
            num_layers: 2,
            capacity: cap,
            hidden: 3,
        });
        let states = vec![Tensor::zeros(&[l, 3]); 2];
        let after = m.update(&states).unwrap().update(&states).unwrap();
        check(after.layers().iter().all(|t| t.rows() == cap.min(l)), || {
            format!("capacity {cap}, segment {l}: cached {}", after.cached_len())
        })?;
    }

    let stack = small_stack(AttentionVariant::LinearizedRpe, 2, 51);
    let fresh = SegmentMemory::new(MemoryConfig {
        num_layers: 2,
        capacity: 6,
        hidden: 8,
    });
    let a = Tensor::randn(&[7, 8], &mut rng);
    let b = Tensor::randn(&[4, 8], &mut rng);
    let (_, used) = stack.forward(&a, Some(&fresh)).unwrap();
    let (after_reset, _) = stack.forward(&b, Some(&used.unwrap().reset())).unwrap();
    let (from_fresh, _) = stack.forward(&b, Some(&fresh)).unwrap();
    check(after_reset == from_fresh, || "reset memory differs from a fresh one".into())?;

    let mut changed = 0;
    for t in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + t);
        let x = Tensor::randn(&[5, 8], &mut rng);
        let m1 = filled_memory(2, 6, 8, &mut rng);
        let m2 = filled_memory(2, 6, 8, &mut rng);
        let (y1, _) = stack.forward(&x, Some(&m1)).unwrap();
        let (y2, _) = stack.forward(&x, Some(&m2)).unwrap();
        if y1.max_abs_diff(&y2).unwrap() > 0.0 {
            changed += 1;
        }
    }
    check(changed >= 19, || format!("memory changed the output in only {changed}/20 trials"))?;
    Ok(format!(
        "cache length = min(M, L) over 200 random pairs; reset is bit-exact with fresh; {changed}/20 memory swaps change the output"
    ))
}

fn random_doc(rng: &mut ChaCha8Rng) -> ParagraphDocument {
    let sentences = rng.random_range(1..=12);
    let owned: Vec<Vec<(String, usize)>> = (0..sentences)
        .map(|_| {
            (0..rng.random_range(1..=20))
                .map(|k| (format!("t{k}"), rng.random_range(1..=5)))
                .collect()
        })
        .collect();
    let borrowed: Vec<Vec<(&str, usize)>> = owned
        .iter()
        .map(|s| s.iter().map(|(t, n)| (t.as_str(), *n)).collect())
        .collect();
    let refs: Vec<&[(&str, usize)]> = borrowed.iter().map(Vec::as_slice).collect();
    ParagraphDocument::from_tokens("random", &refs).unwrap()
}

fn table_features() -> Outcome {
    let start = Instant::now();
    let doc = ParagraphDocument::from_tokens("ex", &[&[("a", 1), ("b", 1), ("c", 1)], &[("d", 1), ("e", 1)]]).unwrap();
    let f = token_stats(&doc, &CorpusStats::new(10, 20, 5).unwrap()).map_err(|e| e.to_string())?;
    let expected = [2.0 / 3.0, 2.0 / 5.0, 1.0 / 2.0, 3.0 / 10.0, 5.0 / 20.0, 2.0 / 5.0];
    check(f[0][1].0 == expected, || format!("hand example: got {:?}", f[0][1].0))?;

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for n in 0..500 {
        let doc = random_doc(&mut rng);
        let stats = if n % 2 == 0 {
            CorpusStats::from_documents([&doc])
        } else {
            CorpusStats::new(rng.random_range(1..=25), rng.random_range(1..=200), rng.random_range(1..=15)).unwrap()
        };
        let f = token_stats(&doc, &stats).map_err(|e| e.to_string())?;
        let mut prev_f1 = 0.0;
        for sentence in &f {
            for (k, tok) in sentence.iter().enumerate() {
                check(tok.0.iter().all(|&v| v > 0.0 && v <= 1.0), || format!("doc {n}: out of range {:?}", tok.0))?;
                check(tok.0[1] > prev_f1, || format!("doc {n}: F1 not increasing"))?;
                prev_f1 = tok.0[1];
                if k > 0 {
                    let before = &sentence[k - 1].0;
                    check(tok.0[0] > before[0], || format!("doc {n}: F0 not increasing"))?;
                    for c in [2, 3, 5] {
                        check(tok.0[c] == before[c], || format!("doc {n}: F{c} varies within a sentence"))?;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 5.0, || format!("took {secs:.1}s"))?;
    Ok(format!("hand example exact; properties hold on 500 random documents, {secs:.2}s"))
}

fn dimensional_consistency() -> Outcome {
    let config = ContextEncoderConfig::default();
    check(config.token_input_dim() == 768 + 6, || format!("token row width {}", config.token_input_dim()))?;
    let encoder = ContextEncoder::random(config, &mut ChaCha8Rng::seed_from_u64(80)).map_err(|e| e.to_string())?;
    let conv = encoder.weights.token_conv.shape().to_vec();
    check(conv == [5, 774, 384], || format!("conv weight shape {conv:?}"))?;
    let doc = ParagraphDocument::from_tokens("d", &[&[("你", 3), ("好", 3)]]).unwrap();
    let f = token_stats(&doc, &CorpusStats::default()).unwrap();
    let x = encoder
        .token_path_input(&doc, 0, &f[0], &HashEmbeddingProvider::new(1))
        .map_err(|e| e.to_string())?;
    check(x.shape() == [6, 774], || format!("token path input {:?}", x.shape()))?;
    let y = ctxspeech_core::context::token_context_embedding(&encoder, &doc, 0, &f[0], &HashEmbeddingProvider::new(1))
        .map_err(|e| e.to_string())?;
    check(y.shape() == [6, 384], || format!("token path output {:?}", y.shape()))?;
    Ok("768 + 6 = 774 rows feed a [5 × 774 × 384] convolution; output [P × 384]".into())
}

fn scaling_trend() -> Outcome {
    let start = Instant::now();
    let spec = BenchSpec::default();
    let report = run_bench(&spec).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let lin = report.slope(AttentionVariant::Linearized).ok_or("no linearized slope")?;
    let soft = report.slope(AttentionVariant::Softmax).ok_or("no softmax slope")?;
    let per = |l| {
        report
            .point(AttentionVariant::Linearized, l)
            .and_then(|p| p.ms_per_element)
            .ok_or(format!("no linearized point at {l}"))
    };
    let ratio = per(8192)? / per(256)?;
    let summary = format!(
        "slopes linearized {lin:.3}, softmax {soft:.3}; per-element ratio 8192/256 = {ratio:.2}; bench {secs:.0}s"
    );
    check((0.8..=1.3).contains(&lin), || format!("linearized slope out of range: {summary}"))?;
    check(soft >= 1.7, || format!("softmax slope too small: {summary}"))?;
    check(ratio <= 1.5, || format!("per-element time not flat: {summary}"))?;
    check(secs < 300.0, || format!("benchmark too slow: {summary}"))?;

    let capped = BenchSpec {
        lengths: vec![256, 512, 8192],
        variants: vec![AttentionVariant::Softmax, AttentionVariant::Linearized],
        repetitions: 3,
        warmup: 1,
        memory_cap_bytes: Some(64 << 20),
        ..BenchSpec::default()
    };
    let capped = run_bench(&capped).map_err(|e| e.to_string())?;
    let oom = capped.point(AttentionVariant::Softmax, 8192).is_some_and(|p| p.is_oom());
    let ran = capped.point(AttentionVariant::Linearized, 8192).is_some_and(|p| !p.is_oom());
    check(oom && ran, || "64 MiB cap did not yield an OOM point for softmax only".into())?;
    Ok(format!("{summary}; softmax at 8192 recorded as oom under a 64 MiB cap"))
}

fn run_forward(text: &Path, out: &Path, extra: &[&str]) -> Result<NamedTensors, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ctxspeech"))
        .arg("forward")
        .arg(text)
        .arg("--out")
        .arg(out)
        .args(["--seed", "42"])
        .args(extra)
        .env_remove("CTXSPEECH_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || {
        format!("forward {extra:?} failed: {}", String::from_utf8_lossy(&status.stderr))
    })?;
    NamedTensors::load(out.join("mel.ctxt")).map_err(|e| e.to_string())
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = dir.path().join("paragraph.txt");
    std::fs::write(&text, "你好。今天很好。我们走吧。天黑了。再见。").map_err(|e| e.to_string())?;
    let first = run_forward(&text, &dir.path().join("a"), &[])?;
    let second = run_forward(&text, &dir.path().join("b"), &[])?;
    check(first.to_bytes() == second.to_bytes(), || "two runs differ".into())?;
    let mel = first.get("mel").ok_or("no mel tensor")?;
    check(mel.shape() == [15 * 3 * 4, 80], || format!("mel shape {:?}", mel.shape()))?;
    let mut diffs = Vec::new();
    for (name, flags) in [
        ("memory off", &["--no-memory"][..]),
        ("context encoder off", &["--no-context"][..]),
        ("softmax attention", &["--variant", "softmax"][..]),
    ] {
        let ablated = run_forward(&text, &dir.path().join(name.replace(' ', "_")), flags)?;
        let m = ablated.get("mel").ok_or("no mel tensor")?;
        check(m.shape() == mel.shape() && m.is_finite(), || format!("{name}: invalid output"))?;
        let d = m.max_abs_diff(mel).unwrap();
        check(d > 0.0, || format!("{name}: output identical to the full model"))?;
        diffs.push(format!("{name} {d:.2e}"));
    }
    Ok(format!("two runs bit-identical, mel {:?}; ablation max diffs: {}", mel.shape(), diffs.join(", ")))
}

#[test]
fn primary_acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle-equivalence", oracle_equivalence),
        ("rpe-relative-position", rpe_relative_property),
        ("stop-gradient", stop_gradient_contract),
        ("memory-semantics", memory_semantics),
        ("token-statistical-features", table_features),
        ("dimensional-consistency", dimensional_consistency),
        ("scaling-trend", scaling_trend),
        ("end-to-end-determinism", end_to_end_determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        report(name, start.elapsed(), &outcome);
        if outcome.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
