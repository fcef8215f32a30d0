//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero when any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use common::*;
use knowrec_cli::{Logger, Pipeline, PipelineConfig};
use knowrec_core::builder::{BuildConfig, BuildStats, Builder};
use knowrec_core::context::extend;
use knowrec_core::ctr::{auc, batch_loss_and_grad, Backbone, CtrExample, ModelConfig, ModelParams};
use knowrec_core::encoder::{encode, EmbeddingVector, HashEncoder, HashEncoderConfig};
use knowrec_core::gateway::{
    format_reason, format_reflect, ChatRequest, EntityKind, FnBackend, ModelHandle,
    ScriptedBackend, Slots, TemplateId, TemplateSet, Verdict,
};
use knowrec_core::hashing::stable_hash;
use knowrec_core::inference::{filter_knowledge, iterative_refine, Models};
use knowrec_core::ingest::{chronological_split, Interaction, SplitConfig};
use knowrec_core::sft::{eval_losses, uniform_scorer, Capability, SftPair, WhitespaceScorer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
/// Name, check and time budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn slots(pairs: &[(&str, &str)]) -> Slots {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Reply {
    Good,
    Garbled,
}

/// One scripted routing configuration.
struct Case {
    label: bool,
    reason: Reply,
    pred_correct: bool,
    reflect: Reply,
    verdict: Verdict,
    refine: Reply,
    refine_correct: bool,
}

#[derive(Debug, Default, PartialEq)]
struct Buckets {
    accepted: usize,
    refined: usize,
    mixed: usize,
    failed_refine: usize,
    parse: usize,
}

/// Expected bucket, written straight from the routing rules.
fn expected_bucket(c: &Case, b: &mut Buckets) {
    if matches!(c.reason, Reply::Garbled) || matches!(c.reflect, Reply::Garbled) {
        b.parse += 1;
    } else if c.pred_correct && c.verdict == Verdict::Reasonable {
        b.accepted += 1;
    } else if !c.pred_correct && c.verdict == Verdict::Unreasonable {
        if matches!(c.refine, Reply::Garbled) {
            b.parse += 1;
        } else if c.refine_correct {
            b.refined += 1;
        } else {
            b.failed_refine += 1;
        }
    } else {
        b.mixed += 1;
    }
}

fn observed(s: &BuildStats) -> Buckets {
    Buckets {
        accepted: s.n_reason,
        refined: s.n_refine,
        mixed: s.n_discarded_mixed,
        failed_refine: s.n_discarded_failed_refine,
        parse: s.n_parse_errors,
    }
}

fn truth_table() -> Outcome {
    let mut cases = Vec::new();
    for label in [true, false] {
        for pred_correct in [true, false] {
            for verdict in [Verdict::Reasonable, Verdict::Unreasonable] {
                for refine_correct in [true, false] {
                    cases.push(Case {
                        label,
                        reason: Reply::Good,
                        pred_correct,
                        reflect: Reply::Good,
                        verdict,
                        refine: Reply::Good,
                        refine_correct,
                    });
                }
            }
        }
    }
    for (reason, reflect, refine) in [
        (Reply::Garbled, Reply::Good, Reply::Good),
        (Reply::Good, Reply::Garbled, Reply::Good),
        (Reply::Good, Reply::Good, Reply::Garbled),
    ] {
        cases.push(Case {
            label: true,
            reason,
            pred_correct: false,
            reflect,
            verdict: Verdict::Unreasonable,
            refine,
            refine_correct: true,
        });
    }

    let templates = TemplateSet::default();
    let mut actor = ScriptedBackend::new([]);
    let mut reflector = ScriptedBackend::new([]);
    let mut inputs = Vec::new();
    let mut expected = Buckets::default();
    for (n, c) in cases.iter().enumerate() {
        let base = slots(&[
            ("hist", "Item 1 (rated 5/5)"),
            ("item", &format!("Item {n}")),
        ]);
        let knowledge = format!("draft {n}");
        let reason_reply = match c.reason {
            Reply::Good => format_reason(&knowledge, c.label == c.pred_correct),
            Reply::Garbled => "no structure here".to_string(),
        };
        actor.insert(TemplateId::UserReason, &base, reason_reply);
        let reflect_reply = match c.reflect {
            Reply::Good => format_reflect(c.verdict, "needs work"),
            Reply::Garbled => "VERDICT: perhaps".to_string(),
        };
        reflector.insert(
            TemplateId::UserReflect,
            &extend(&base, &knowledge, None),
            reflect_reply,
        );
        let refine_reply = match c.refine {
            Reply::Good => format_reason(&format!("better {n}"), c.label == c.refine_correct),
            Reply::Garbled => "PREDICTION: maybe".to_string(),
        };
        actor.insert(
            TemplateId::UserRefine,
            &extend(&base, &knowledge, Some("needs work")),
            refine_reply,
        );
        expected_bucket(c, &mut expected);
        inputs.push((format!("case:{n}"), base, c.label));
    }

    let builder = Builder {
        templates: &templates,
        actor: ModelHandle::new(&actor, "actor"),
        reflector: ModelHandle::new(&reflector, "reflector"),
        config: BuildConfig::default(),
    };
    let out = builder.build(EntityKind::User, &inputs);
    ensure(out.aborted.is_none(), || {
        format!("aborted: {:?}", out.aborted)
    })?;
    let got = observed(&out.stats);
    ensure(got == expected, || {
        format!("expected {expected:?}, got {got:?}")
    })?;
    ensure(
        out.stats.n_input == cases.len() && out.stats.is_partition(),
        || format!("not a partition: {:?}", out.stats),
    )?;
    ensure(
        out.reason.len() == expected.accepted
            && out.reflect.len() == expected.accepted + expected.refined
            && out.refine.len() == expected.refined,
        || "dataset sizes disagree with buckets".into(),
    )?;
    Ok(format!("{} cases, buckets {:?}", cases.len(), got))
}

fn loop_contract() -> Outcome {
    let templates = TemplateSet::default();
    let base = slots(&[("hist", "Item 1 (rated 4/5)"), ("item", "Item 2")]);
    let run = |approve_at: Option<usize>, max_retries: usize| -> Result<(usize, usize), String> {
        let actor_calls = AtomicUsize::new(0);
        let reflect_calls = AtomicUsize::new(0);
        let actor = FnBackend(|_: &_| {
            let n = actor_calls.fetch_add(1, Ordering::SeqCst);
            Ok(format_reason(&format!("draft {n}"), true))
        });
        let reflector = FnBackend(|_: &_| {
            let n = reflect_calls.fetch_add(1, Ordering::SeqCst) + 1;
            Ok(if approve_at == Some(n) {
                format_reflect(Verdict::Reasonable, "")
            } else {
                format_reflect(Verdict::Unreasonable, "try again")
            })
        });
        let models = Models {
            templates: &templates,
            kind: EntityKind::User,
            actor: ModelHandle::new(&actor, "a"),
            reflector: ModelHandle::new(&reflector, "r"),
        };
        let (_, trace) =
            iterative_refine(&models, &base, max_retries).map_err(|e| e.to_string())?;
        if !trace.is_valid(max_retries) {
            return Err(format!("invalid trace {trace:?}"));
        }
        Ok((actor_calls.load(Ordering::SeqCst), trace.iterations.len()))
    };

    for (r, calls) in [(0, 1), (1, 2), (3, 4)] {
        let (got, _) = run(None, r)?;
        ensure(got == calls, || {
            format!("max_retries {r}: {got} actor calls, want {calls}")
        })?;
    }
    let mut checked = 0;
    for n in 1..=6 {
        for r in 0..=4 {
            let (_, len) = run(Some(n), r)?;
            ensure(len == n.min(r + 1), || {
                format!("approve at {n}, retries {r}: trace {len}")
            })?;
            checked += 1;
        }
    }
    Ok(format!("calls 1/2/4 exact; {checked} approve-at-n traces"))
}

fn filter_contract() -> Outcome {
    let templates = TemplateSet::default();
    let base = slots(&[("hist", "Item 3 (rated 2/5)"), ("item", "Item 9")]);
    let cfg = HashEncoderConfig::default();
    let encoder = HashEncoder::new(cfg).map_err(|e| e.to_string())?;
    let text = |j: u64| {
        format!(
            "candidate {j} likes {} things",
            ["quiet", "loud", "odd"][j as usize]
        )
    };

    for pattern in 0u32..8 {
        let actor =
            FnBackend(|req: &ChatRequest| Ok(format_reason(&text(req.seed.unwrap_or(99)), true)));
        let reflector = FnBackend(|req: &ChatRequest| {
            let j = (0..3).find(|&j| req.slots["knowledge"] == text(j)).unwrap();
            Ok(if pattern >> j & 1 == 1 {
                format_reflect(Verdict::Reasonable, "")
            } else {
                format_reflect(Verdict::Unreasonable, "no")
            })
        });
        let models = Models {
            templates: &templates,
            kind: EntityKind::User,
            actor: ModelHandle::new(&actor, "a").with_temperature(0.7),
            reflector: ModelHandle::new(&reflector, "r"),
        };
        let (v, res) = filter_knowledge(&models, &base, 3, &encoder).map_err(|e| e.to_string())?;

        let kept: Vec<u64> = (0..3).filter(|j| pattern >> j & 1 == 1).collect();
        let used: Vec<u64> = if kept.is_empty() {
            vec![0, 1, 2]
        } else {
            kept.clone()
        };
        let mut want = vec![0.0; cfg.dims];
        for &j in &used {
            for (w, x) in want.iter_mut().zip(encode(&text(j), &cfg).values) {
                *w += x;
            }
        }
        want.iter_mut().for_each(|w| *w /= used.len() as f64);
        let err = want
            .iter()
            .zip(&v.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(err <= 1e-12, || {
            format!("pattern {pattern:03b}: max error {err}")
        })?;
        ensure(res.fallback_used == kept.is_empty(), || {
            format!("pattern {pattern:03b}: fallback flag")
        })?;
        let kept_idx: Vec<usize> = kept.iter().map(|&j| j as usize).collect();
        ensure(res.kept_indices == kept_idx, || {
            format!("pattern {pattern:03b}: kept {:?}", res.kept_indices)
        })?;
    }
    Ok("8 verdict patterns".into())
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=100);
        let levels = rng.gen_range(2..=12);
        let mut scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        scores[1] = scores[0];
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        let got = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - num / pairs).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 instances, max deviation {worst:e}"))
}

fn gradient_check() -> Outcome {
    let config = ModelConfig {
        field_sizes: vec![5, 7, 4],
        emb_dim: 4,
        hidden: vec![6, 5],
        connector_hidden: 4,
        knowledge_dims: Some(6),
        backbone: Backbone::DeepFm,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = ModelParams::init(config, &mut rng).map_err(|e| e.to_string())?;
    let vec6 = |rng: &mut ChaCha8Rng| EmbeddingVector {
        values: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let batch: Vec<CtrExample> = (0..8)
        .map(|k| CtrExample {
            cat_features: vec![(0, k % 5), (1, (3 * k) % 7), (2, k % 4)],
            e_u: Some(vec6(&mut rng)),
            e_i: Some(vec6(&mut rng)),
            label: k % 3 == 0,
        })
        .collect();
    let refs: Vec<&CtrExample> = batch.iter().collect();
    let (_, grad) = batch_loss_and_grad(&params, &refs).map_err(|e| e.to_string())?;
    let analytic = grad.flatten();
    let flat = params.flatten();
    let h = 1e-5;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] += h;
        probe.load_flat(&f).map_err(|e| e.to_string())?;
        let up = batch_loss_and_grad(&probe, &refs)
            .map_err(|e| e.to_string())?
            .0;
        f[i] -= 2.0 * h;
        probe.load_flat(&f).map_err(|e| e.to_string())?;
        let down = batch_loss_and_grad(&probe, &refs)
            .map_err(|e| e.to_string())?
            .0;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "{} parameters, max relative error {worst:.2e}",
        flat.len()
    ))
}

/// Synthetic topic world big enough for the CTR comparisons.
fn lift_world() -> World {
    world(3500, 400, 6, 2024)
}

fn fused_vs_base(dir: &Path, w: &World, max_retries: usize) -> Result<(f64, f64, usize), String> {
    let config = write_config(dir, "");
    let mut cfg = PipelineConfig::load(&config).map_err(|e| e.to_string())?;
    cfg.strategy.max_retries = max_retries;
    cfg.out_dir = dir.join(format!("out_r{max_retries}"));
    let pipeline = Pipeline::new(cfg, Logger::discard())
        .with_backends(oracle_backends(Oracle::new(w.item_topic.clone())));
    pipeline.infer().map_err(|e| e.to_string())?;
    pipeline.train().map_err(|e| e.to_string())?;
    pipeline.eval().map_err(|e| e.to_string())?;
    let text = std::fs::read(pipeline.cfg.out_dir.join("metrics/comparison.json"))
        .map_err(|e| e.to_string())?;
    let cmp: Value = serde_json::from_slice(&text).map_err(|e| e.to_string())?;
    let base = cmp["base"]["auc"].as_f64().unwrap();
    let fused = cmp["fused"]["auc"].as_f64().unwrap();
    Ok((base, fused, cmp["fused"]["n"].as_u64().unwrap() as usize))
}

fn fusion_lift() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = lift_world();
    w.write(dir.path());
    ensure(w.n_interactions >= 20_000, || {
        format!("only {} examples", w.n_interactions)
    })?;
    let (base, fused, n_test) = fused_vs_base(dir.path(), &w, 1)?;
    ensure(fused - base >= 0.02, || {
        format!("base {base:.4}, fused {fused:.4}")
    })?;
    Ok(format!(
        "{} examples ({n_test} test): base AUC {base:.4}, fused {fused:.4}, lift {:+.4}",
        w.n_interactions,
        fused - base
    ))
}

fn iteration_trend() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = lift_world();
    w.write(dir.path());
    let mut aucs = Vec::new();
    for r in 0..=2 {
        aucs.push(fused_vs_base(dir.path(), &w, r)?.1);
    }
    let shown = aucs
        .iter()
        .map(|a| format!("{a:.4}"))
        .collect::<Vec<_>>()
        .join(" -> ");
    ensure(aucs.windows(2).all(|p| p[1] >= p[0]), || {
        format!("fused AUC {shown}")
    })?;
    Ok(format!("fused AUC over max_retries 0,1,2: {shown}"))
}

fn loss_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let scorer = WhitespaceScorer(|input: &str, prev: &[&str], tok: &str| {
        let key = format!("{input}|{}|{tok}", prev.len());
        -((stable_hash(&key, 5) >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 0.01
    });
    for d in 0..100 {
        let n = rng.gen_range(1..40);
        let pairs: Vec<SftPair> = (0..n)
            .map(|k| {
                let words = rng.gen_range(1..12);
                SftPair {
                    input_text: format!("prompt {d} {k}"),
                    target_text: (0..words)
                        .map(|w| format!("w{}", (w * 7 + k) % 13))
                        .collect::<Vec<_>>()
                        .join(" "),
                    capability: Capability::ALL[rng.gen_range(0..3)],
                    provenance_id: format!("p{d}/{k}"),
                }
            })
            .collect();
        let report = eval_losses(&pairs, &scorer).map_err(|e| e.to_string())?;
        let mean_of = |cap: Capability| {
            let losses: Vec<f64> = pairs
                .iter()
                .filter(|p| p.capability == cap)
                .map(|p| {
                    let toks: Vec<&str> = p.target_text.split_whitespace().collect();
                    -(0..toks.len())
                        .map(|i| (scorer.0)(&p.input_text, &toks[..i], toks[i]))
                        .sum::<f64>()
                })
                .collect();
            if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            }
        };
        let want = mean_of(Capability::Reason) + mean_of(Capability::Refine);
        ensure((report.l_actor - want).abs() <= 1e-12, || {
            format!("dataset {d}: {} vs {want}", report.l_actor)
        })?;
        ensure(
            (report.l_actor - (report.l_reason + report.l_refine)).abs() <= 1e-12,
            || format!("dataset {d}: identity broken"),
        )?;
    }
    let five = [SftPair {
        input_text: "x".into(),
        target_text: "a b c d e".into(),
        capability: Capability::Reason,
        provenance_id: "five".into(),
    }];
    let r = eval_losses(&five, &uniform_scorer(-1.0)).map_err(|e| e.to_string())?;
    ensure(r.l_reason == 5.0 && r.l_actor == 5.0, || {
        format!("5-token case gave {}", r.l_actor)
    })?;
    Ok("100 datasets; 5-token case = 5.0".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = world(300, 80, 8, 99);
    w.write(dir.path());
    let config = write_config(dir.path(), "[ctr]\nepochs = 5\n");
    record_scripts(&config, Oracle::new(w.item_topic.clone()));
    let out = dir.path().join("out");
    let mut snaps = Vec::new();
    for workers in ["1", "4"] {
        if out.exists() {
            std::fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
        }
        for cmd in ["build", "export", "infer", "train", "eval"] {
            let o = knowrec()
                .args([
                    cmd,
                    "--config",
                    config.to_str().unwrap(),
                    "--workers",
                    workers,
                ])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(o.status.success(), || {
                format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr))
            })?;
        }
        snaps.push(snapshot(&out));
    }
    ensure(snaps[0].len() >= 20, || {
        format!("only {} artifacts", snaps[0].len())
    })?;
    for (a, b) in snaps[0].iter().zip(&snaps[1]) {
        ensure(a == b, || format!("{} differs", a.0.display()))?;
    }
    ensure(snaps[0].len() == snaps[1].len(), || {
        "artifact sets differ".into()
    })?;
    Ok(format!(
        "{} artifacts byte-identical across runs (1 and 4 workers)",
        snaps[0].len()
    ))
}

fn split_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = SplitConfig::default();
    for _ in 0..60 {
        let n = rng.gen_range(1..=10_000);
        let ts_max = rng.gen_range(1..1000u64);
        let log: Vec<Interaction> = (0..n)
            .map(|_| {
                Interaction::new(
                    format!("u{}", rng.gen_range(0..50)),
                    format!("i{}", rng.gen_range(0..200)),
                    rng.gen_range(1..=5),
                    rng.gen_range(0..ts_max),
                )
                .unwrap()
            })
            .collect();
        let (train, test) = chronological_split(&log, &cfg).map_err(|e| e.to_string())?;
        ensure(train.len() == n * 4 / 5, || {
            format!("n {n}: |train| {}", train.len())
        })?;
        ensure(train.len() + test.len() == n, || "rows lost".into())?;
        let key = |i: &Interaction| (i.timestamp, i.user_id.clone(), i.item_id.clone());
        if let (Some(hi), Some(lo)) = (train.iter().map(key).max(), test.iter().map(key).min()) {
            ensure(hi <= lo, || {
                format!("n {n}: train key {hi:?} after test key {lo:?}")
            })?;
        }
    }
    Ok("60 random logs".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("routing truth table", truth_table, 5),
        ("refinement loop contract", loop_contract, 1),
        ("filter contract", filter_contract, 1),
        ("AUC oracle equivalence", auc_oracle, 10),
        ("gradient check", gradient_check, 30),
        ("fusion lift", fusion_lift, 300),
        ("iteration-count trend", iteration_trend, 300),
        ("loss identity", loss_identity, 1),
        ("determinism sweep", determinism, 300),
        ("split property", split_property, 5),
    ];
    let mut failed = 0;
    for (n, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= Duration::from_secs(*budget) => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget} s budget")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<26} {} ({:.2} s) {detail}",
            n + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
