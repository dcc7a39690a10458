//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=2,9` to run a subset.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use adner::compute::{finite_diff_grad, max_relative_error, Extended, Graph, Real, Tensor, EXTENDED_FD_EPS};
use adner::corpus::{
    iob1_to_iob2, parse_labeled, spans_to_tags, tags_to_spans, validate_iob2, EncodedBatch, EntitySpan,
    LabeledDataset, Sentence, TagIndex,
};
use adner::eval::score;
use adner::model::{init_model, predict_batch, ModelConfig, ModelParams, ParamGroup};
use adner::objective::{joint_objective, ner_loss, total_loss, total_loss_value};
use adner::synth::{generate, SynthConfig, SynthCorpora};
use adner::train::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainData};
use adner_cli::config::RunConfig;
use adner_cli::pipeline::{fit, prepare};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 10] = [
        (1, "gradient reversal contract", Duration::from_secs(1), grl_contract),
        (2, "gradient correctness", Duration::from_secs(120), gradient_correctness),
        (3, "loss composition", Duration::from_secs(600), loss_composition),
        (4, "adaptation beats baseline on shifted test", Duration::from_secs(900), central_claim),
        (5, "in-domain non-degradation", Duration::from_secs(900), in_domain),
        (6, "scoring oracle", Duration::from_secs(10), scoring_oracle),
        (7, "corpus round trips", Duration::from_secs(600), corpus_round_trips),
        (8, "overfit smoke test", Duration::from_secs(120), overfit),
        (9, "checkpoint integrity", Duration::from_secs(600), checkpoint_integrity),
        (10, "determinism of full train runs", Duration::from_secs(600), determinism),
    ];
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let over = elapsed > budget;
        let (status, detail) = match &outcome {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; exceeded {budget:?}")),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {n:>2} {status} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

fn grl_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let n = rng.gen_range(1..64);
        let lambda: f64 = if case % 2 == 0 { 1.0 } else { rng.gen_range(0.01..10.0) };
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect();

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, n], xs.clone()).unwrap());
        let y = g.gradient_reversal(x, lambda).map_err(|e| e.to_string())?;
        if g.value(y).data().iter().zip(&xs).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("case {case}: forward is not bitwise identity"));
        }
        // A linear readout makes the upstream gradient exactly `upstream`.
        let w = g.leaf(Tensor::new(vec![n, 1], upstream.clone()).unwrap());
        let s = g.matmul(y, w).unwrap();
        let grads = g.backward(s).map_err(|e| e.to_string())?;
        if grads.get(y).data() != upstream.as_slice() {
            return Err(format!("case {case}: upstream gradient not delivered exactly"));
        }
        let expected: Vec<f64> = upstream.iter().map(|u| -lambda * u).collect();
        if grads.get(x).data() != expected.as_slice() {
            return Err(format!("case {case}: backward differs from -lambda * upstream"));
        }
    }
    Ok("100 random tensors, forward bitwise identity, backward exactly -lambda*g".into())
}

// 2 ------------------------------------------------------------------------

fn tiny_batch(rng: &mut ChaCha8Rng, lens: &[usize], vocab: usize, n_tags: usize) -> EncodedBatch {
    let seq_len = *lens.iter().max().unwrap();
    let mut b = EncodedBatch {
        batch: lens.len(),
        seq_len,
        ids: vec![0; lens.len() * seq_len],
        mask: vec![false; lens.len() * seq_len],
        tags: vec![-1; lens.len() * seq_len],
        truncated: 0,
    };
    for (r, &len) in lens.iter().enumerate() {
        for t in 0..len {
            b.ids[r * seq_len + t] = rng.gen_range(2..vocab);
            b.mask[r * seq_len + t] = true;
            b.tags[r * seq_len + t] = rng.gen_range(0..n_tags) as i64;
        }
    }
    b
}

/// Tagging loss; with `grad` also the per-parameter gradients.
fn ner_value<T: Real>(p: &ModelParams<T>, src: &EncodedBatch, grad: bool) -> (T, Vec<Tensor<T>>) {
    let mut g = Graph::new();
    let m = p.bind(&mut g);
    let (last, _) = m.features(&mut g, src, None).unwrap();
    let lp = m.ner_log_probs(&mut g, last).unwrap();
    let l = ner_loss(&mut g, lp, &src.tags, &src.mask).unwrap();
    let grads = if grad { gradients(&g, &m, l) } else { Vec::new() };
    (g.value(l).item(), grads)
}

/// Adversarial loss; `lambda = None` couples the domain head without reversal.
fn adv_value<T: Real>(
    p: &ModelParams<T>,
    src: &EncodedBatch,
    tgt: &EncodedBatch,
    lambda: Option<T>,
    grad: bool,
) -> (T, Vec<Tensor<T>>) {
    let mut g = Graph::new();
    let m = p.bind(&mut g);
    let j = joint_objective(&m, &mut g, src, Some(tgt), T::one(), lambda, None).unwrap();
    let l = j.adversarial.unwrap().l_adv;
    let grads = if grad { gradients(&g, &m, l) } else { Vec::new() };
    (g.value(l).item(), grads)
}

fn gradients<T: Real>(g: &Graph<T>, m: &adner::model::BoundModel<'_, T>, loss: adner::compute::Var) -> Vec<Tensor<T>> {
    let grads = g.backward(loss).unwrap();
    m.vars().iter().map(|&v| grads.get(v)).collect()
}

/// Central differences evaluated in double-double arithmetic.
fn reference_fd(params: &ModelParams<f64>, loss: impl Fn(&ModelParams<Extended>) -> Extended) -> Vec<Vec<f64>> {
    let config = params.config().clone();
    let hi = params.cast::<Extended>();
    let names: Vec<String> = hi.params().iter().map(|p| p.name.clone()).collect();
    let tensors: Vec<Tensor<Extended>> = hi.params().iter().map(|p| p.tensor.clone()).collect();
    finite_diff_grad(
        |ts| {
            let named = names.iter().cloned().zip(ts.iter().cloned()).collect();
            Ok(loss(&ModelParams::from_named(&config, named).unwrap()))
        },
        &tensors,
        Extended::lit(EXTENDED_FD_EPS),
    )
    .unwrap()
    .iter()
    .map(|t| t.cast::<f64>().into_data())
    .collect()
}

fn gradient_correctness() -> Outcome {
    let config = ModelConfig {
        vocab_size: 50,
        d_model: 16,
        n_encoder_layers: 2,
        n_heads: 2,
        d_ffn: 32,
        max_len: 16,
        n_tags: 9,
        dropout: 0.0,
        head_hidden: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = init_model::<f64>(&config, 2).unwrap();
    // Move away from the near-symmetric initialization so no group is degenerate.
    for p in params.params_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let src = tiny_batch(&mut rng, &[5, 3], 50, 9);
    let tgt = tiny_batch(&mut rng, &[4, 6], 50, 9);

    let (_, ner) = ner_value(&params, &src, true);
    let ner_fd = reference_fd(&params, |p| ner_value(p, &src, false).0);
    let (_, adv) = adv_value(&params, &src, &tgt, Some(1.0), true);
    let adv_fd = reference_fd(&params, |p| adv_value(p, &src, &tgt, None, false).0);

    let (mut worst_ner, mut worst_adv_d, mut worst_adv_f) = (0.0f64, 0.0f64, 0.0f64);
    for (i, p) in params.params().iter().enumerate() {
        match p.group {
            ParamGroup::FeatureExtractor | ParamGroup::NerHead => {
                worst_ner = worst_ner.max(max_relative_error(ner[i].data(), &ner_fd[i]));
            }
            ParamGroup::DomainHead => {
                if ner[i].data().iter().any(|&v| v != 0.0) {
                    return Err(format!("{}: tagging loss leaks into the domain head", p.name));
                }
            }
        }
        match p.group {
            ParamGroup::DomainHead => worst_adv_d = worst_adv_d.max(max_relative_error(adv[i].data(), &adv_fd[i])),
            ParamGroup::FeatureExtractor => {
                let negated: Vec<f64> = adv_fd[i].iter().map(|v| -v).collect();
                worst_adv_f = worst_adv_f.max(max_relative_error(adv[i].data(), &negated));
            }
            ParamGroup::NerHead => {}
        }
    }
    check(
        worst_ner < 1e-6 && worst_adv_d < 1e-6 && worst_adv_f < 1e-6,
        format!(
            "{} parameters; max rel err L_ner {worst_ner:.2e}, L_adv/theta_d {worst_adv_d:.2e}, L_adv/theta_f vs negated FD {worst_adv_f:.2e}",
            params.param_count()
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn small_corpora(seed: u64, n_source: usize) -> SynthCorpora {
    generate(&SynthConfig {
        n_source_labeled: n_source,
        n_target_unlabeled: n_source,
        n_test_shifted: 50,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn loss_composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (l_ner, l_adv): (f64, f64) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        for alpha in [0.0, 1.0, 2.0] {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(Tensor::scalar(l_ner));
            let b = g.leaf(Tensor::scalar(l_adv));
            let t = total_loss(&mut g, a, Some(b), alpha).unwrap();
            let expected = l_ner + alpha * l_adv;
            if g.value(t).item() != expected || total_loss_value(l_ner, l_adv, alpha) != expected {
                return Err(format!("l_total mismatch at ({l_ner}, {l_adv}, {alpha})"));
            }
        }
    }

    let corpora = small_corpora(3, 120);
    let mut base_cfg = RunConfig::default();
    base_cfg.train.lr = 1e-3;
    base_cfg.train.max_epochs = 3;
    let mut zero_cfg = base_cfg.clone();
    zero_cfg.train.adapt = true;
    zero_cfg.train.alpha = 0.0;
    let run = |cfg: &RunConfig| {
        let p = prepare(cfg, &corpora.source, Some(corpora.target.clone())).unwrap();
        fit(cfg, &p).unwrap()
    };
    let base = run(&base_cfg);
    let zero = run(&zero_cfg);
    let same_params = base.params == zero.params;
    let bits = |t: &adner::train::Trained| -> Vec<u32> {
        t.params.params().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect()
    };
    let adv_ran = zero.history.records.iter().all(|r| r.l_adv > 0.0);
    check(
        same_params && bits(&base) == bits(&zero) && adv_ran,
        format!(
            "3000 random compositions exact; alpha=0 adapted run bitwise equal to baseline: {} (domain branch active: {adv_ran})",
            same_params
        ),
    )
}

// 4, 5 ---------------------------------------------------------------------

/// Training settings shared by both arms of the desk-scale comparison.
const COMPARISON_OVERRIDES: &[&str] = &["train.lr=0.0005", "train.grl_lambda=0.1"];
const COMPARISON_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Calibrated means on test_shifted (baseline, adapted) from the reference run.
const CALIBRATED_SHIFTED: (f64, f64) = (0.2043, 0.3788);
/// Required lead of the adapted mean, about two thirds of the calibrated gap.
const PINNED_MARGIN: f64 = 0.11;

struct Comparison {
    /// Per seed: (baseline shifted, adapted shifted, baseline in-domain, adapted in-domain).
    rows: Vec<(f64, f64, f64, f64)>,
}

fn comparison() -> &'static Comparison {
    static CELL: std::sync::OnceLock<Comparison> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let mut rows = Vec::new();
        for seed in COMPARISON_SEEDS {
            let corpora = generate(&SynthConfig {
                seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let mut f1 = Vec::new();
            for adapt in [false, true] {
                let mut cfg = RunConfig::default();
                cfg.train.seed = seed;
                cfg.train.adapt = adapt;
                let overrides: Vec<String> = COMPARISON_OVERRIDES.iter().map(|s| s.to_string()).collect();
                cfg.merge_overrides(&overrides).unwrap();
                let p = prepare(&cfg, &corpora.source, Some(corpora.target.clone())).unwrap();
                let trained = fit(&cfg, &p).unwrap();
                let eval = |d: &LabeledDataset| {
                    let pred = predict_batch(&trained.params, d.sentences(), &p.vocab, &p.tags, 64).unwrap();
                    score(d, &pred).unwrap().f1
                };
                f1.push((eval(&corpora.test_shifted), eval(&corpora.test_in_domain)));
            }
            rows.push((f1[0].0, f1[1].0, f1[0].1, f1[1].1));
        }
        Comparison { rows }
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn central_claim() -> Outcome {
    let c = comparison();
    let base = mean(c.rows.iter().map(|r| r.0));
    let adapted = mean(c.rows.iter().map(|r| r.1));
    let wins = c.rows.iter().filter(|r| r.1 > r.0).count();
    let per_seed: Vec<String> = c.rows.iter().map(|r| format!("{:.3}/{:.3}", r.0, r.1)).collect();
    check(
        adapted > base && adapted - base >= PINNED_MARGIN && wins >= 4,
        format!(
            "mean F1 baseline {base:.4} vs adapted {adapted:.4} (calibrated {:.4} vs {:.4}, margin >= {PINNED_MARGIN}); adapted wins {wins}/5; per seed {}",
            CALIBRATED_SHIFTED.0,
            CALIBRATED_SHIFTED.1,
            per_seed.join(" ")
        ),
    )
}

fn in_domain() -> Outcome {
    let c = comparison();
    let base = mean(c.rows.iter().map(|r| r.2));
    let adapted = mean(c.rows.iter().map(|r| r.3));
    check(
        adapted >= base - 0.02,
        format!("mean in-domain F1 baseline {base:.4} vs adapted {adapted:.4} (tolerance 0.02)"),
    )
}

// 6 ------------------------------------------------------------------------

fn random_tags(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    // Random label soup, then canonicalized so every sequence is valid IOB2.
    let raw: Vec<String> = (0..len)
        .map(|_| match rng.gen_range(0..5) {
            0 | 1 => "O".to_string(),
            2 => format!("B-{}", ["PER", "LOC", "ORG"][rng.gen_range(0..3)]),
            _ => format!("I-{}", ["PER", "LOC", "ORG"][rng.gen_range(0..3)]),
        })
        .collect();
    iob1_to_iob2(&raw).unwrap()
}

/// Entities found by scanning every (start, end) window: a window is an entity
/// iff it opens with B-X, continues with I-X, and is not followed by I-X.
fn brute_force_spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    for start in 0..tags.len() {
        for end in start + 1..=tags.len() {
            let Some(class) = tags[start].strip_prefix("B-") else { continue };
            let inside = format!("I-{class}");
            let body_ok = tags[start + 1..end].iter().all(|t| *t == inside);
            let closed = end == tags.len() || tags[end] != inside;
            if body_ok && closed {
                out.push((start, end, class.to_string()));
            }
        }
    }
    out
}

fn scoring_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let n_sent = rng.gen_range(1..6);
        let mut gold_sentences = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n_sent {
            let len = rng.gen_range(1..15);
            let gold = random_tags(&mut rng, len);
            let p = if rng.gen_bool(0.3) { gold.clone() } else { random_tags(&mut rng, len) };
            gold_sentences.push(Sentence::labeled((0..len).map(|i| format!("w{i}")).collect(), gold).unwrap());
            pred.push(p);
        }
        let (mut g_n, mut p_n, mut c_n) = (0, 0, 0);
        for (s, p) in gold_sentences.iter().zip(&pred) {
            let gs = brute_force_spans(s.tags().unwrap());
            let ps = brute_force_spans(p);
            g_n += gs.len();
            p_n += ps.len();
            c_n += ps.iter().filter(|x| gs.contains(x)).count();
        }
        let classes: BTreeSet<String> = ["PER", "LOC", "ORG"].iter().map(|s| s.to_string()).collect();
        let gold = LabeledDataset::with_classes(gold_sentences, classes).unwrap();
        let r = score(&gold, &pred).map_err(|e| e.to_string())?;
        if (r.counts.n_gold, r.counts.n_pred, r.counts.n_correct) != (g_n, p_n, c_n) {
            return Err(format!(
                "case {case}: scorer counts {:?} vs brute force ({g_n}, {p_n}, {c_n})",
                r.counts
            ));
        }
    }
    Ok("1000 random (gold, pred) pairs, exact count equality".into())
}

// 7 ------------------------------------------------------------------------

fn random_token(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', 'b', 'é', 'Z', '0', '-', '.', ',', '\'', 'ç'];
    (0..rng.gen_range(1..7)).map(|_| CHARS[rng.gen_range(0..CHARS.len())]).collect()
}

fn random_spans(rng: &mut ChaCha8Rng, len: usize) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < len {
        if rng.gen_bool(0.3) {
            let end = (i + rng.gen_range(1..4)).min(len);
            spans.push(EntitySpan::new(i, end, ["PER", "LOC", "MISC"][rng.gen_range(0..3)]));
            i = end + rng.gen_range(0..2);
        } else {
            i += 1;
        }
    }
    spans
}

fn corpus_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    const CASES: usize = 1000;
    for case in 0..CASES {
        // parse(serialize(d)) == d on canonical data
        let sentences: Vec<Sentence> = (0..rng.gen_range(1..6))
            .map(|_| {
                let len = rng.gen_range(1..12);
                let tokens: Vec<String> = (0..len).map(|_| random_token(&mut rng)).collect();
                let tags = spans_to_tags(&random_spans(&mut rng, len), len).unwrap();
                Sentence::labeled(tokens, tags).unwrap()
            })
            .collect();
        let d = LabeledDataset::new(sentences).unwrap();
        let text = d.to_conll();
        match parse_labeled(&text) {
            Ok(back) if back == d && back.to_conll() == text => {}
            _ => return Err(format!("case {case}: parse/serialize round trip failed")),
        }

        // IOB1 -> IOB2 is idempotent and yields valid IOB2
        let raw_len = rng.gen_range(0..20);
        let raw = random_tags(&mut rng, raw_len);
        let once = iob1_to_iob2(&raw).unwrap();
        if !validate_iob2(&once).is_empty() || iob1_to_iob2(&once).unwrap() != once {
            return Err(format!("case {case}: IOB1 conversion not idempotent"));
        }

        // spans <-> tags are inverse
        let len = rng.gen_range(0..20);
        let spans = random_spans(&mut rng, len);
        let tags = spans_to_tags(&spans, len).unwrap();
        if tags_to_spans(&tags).unwrap() != spans || spans_to_tags(&tags_to_spans(&once).unwrap(), once.len()).unwrap() != once {
            return Err(format!("case {case}: spans/tags not inverse"));
        }
    }
    Ok(format!("{CASES} randomized cases for each of three properties"))
}

// 8 ------------------------------------------------------------------------

fn overfit() -> Outcome {
    let corpora = small_corpora(8, 50);
    let source = &corpora.source;
    let tags = TagIndex::from_classes(source.classes());
    let vocab = adner::corpus::Vocab::build(source.sentences(), 1);
    let model = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk(vocab.len(), tags.len())
    };
    let config = TrainConfig {
        lr: 1e-3,
        batch_size: 1,
        patience: 16,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: source,
        val: source,
        target: None,
        vocab: &vocab,
        tag_index: &tags,
    };
    let trained = train(&model, &config, &data).map_err(|e| e.to_string())?;
    let pred = predict_batch(&trained.params, source.sentences(), &vocab, &tags, 64).unwrap();
    let r = score(source, &pred).unwrap();
    check(
        r.token_accuracy >= 0.99 && trained.history.records.len() <= 16,
        format!(
            "token accuracy {:.4}, span F1 {:.4} after {} epochs",
            r.token_accuracy,
            r.f1,
            trained.history.records.len()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn checkpoint_integrity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpora = small_corpora(9, 40);
    let tags = TagIndex::from_classes(corpora.source.classes());
    let vocab = adner::corpus::Vocab::build(corpora.source.sentences(), 2);
    let mut params = init_model::<f32>(&ModelConfig::desk(vocab.len(), tags.len()), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in params.params_mut() {
        for v in p.tensor.data_mut() {
            *v = f32::from_bits(rng.gen::<u32>() & 0xbfff_ffff);
        }
    }
    let ckpt = Checkpoint {
        params,
        vocab,
        tag_index: tags,
        settings: vec![("train.seed".into(), "9".into())],
    };
    let path = dir.path().join("c.bin");
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let bitwise = back.params.params().iter().zip(ckpt.params.params()).all(|(a, b)| {
        a.name == b.name && a.tensor.shape() == b.tensor.shape() && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    if !bitwise || back.vocab != ckpt.vocab || back.tag_index != ckpt.tag_index || back.settings != ckpt.settings {
        return Err("round trip is not exact".into());
    }

    let bytes = fs::read(&path).unwrap();
    let bad = dir.path().join("bad.bin");
    for trial in 0..20 {
        let mut corrupt = bytes.clone();
        let at = rng.gen_range(0..corrupt.len());
        corrupt[at] ^= rng.gen_range(1..=255u8);
        fs::write(&bad, &corrupt).unwrap();
        let loaded = std::panic::catch_unwind(|| load_checkpoint(&bad));
        match loaded {
            Ok(Err(_)) => {}
            Ok(Ok(_)) => return Err(format!("trial {trial}: flipped byte {at} loaded silently")),
            Err(_) => return Err(format!("trial {trial}: flipped byte {at} crashed the loader")),
        }
    }
    Ok(format!("{} parameters bitwise round trip; 20/20 single-byte corruptions rejected", ckpt.params.param_count()))
}

// 10 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpora = small_corpora(10, 200);
    let source = dir.path().join("source.conll");
    let target = dir.path().join("target.txt");
    fs::write(&source, corpora.source.to_conll()).unwrap();
    fs::write(&target, corpora.target.to_conll()).unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "data.source = {}\ndata.target = {}\ntrain.adapt = true\ntrain.lr = 0.001\ntrain.max_epochs = 3\ntrain.seed = 10\n",
            source.display(),
            target.display()
        ),
    )
    .unwrap();
    let run = |out: &Path| -> Result<(), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_adner"))
            .args(["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if o.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&o.stderr).into_owned())
        }
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a)?;
    run(&b)?;
    let same = |f: &str| fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok() && a.join(f).exists();
    check(
        same("history.json") && same("checkpoint.bin"),
        format!(
            "two `adner train` runs: history.json identical {}, checkpoint.bin identical {}",
            same("history.json"),
            same("checkpoint.bin")
        ),
    )
}
