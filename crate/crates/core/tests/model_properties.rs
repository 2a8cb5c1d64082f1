use std::collections::BTreeSet;

use duallm::data::{BatchStream, Vocab};
use duallm::layers::{dual_head, mogrify, Dropout};
use duallm::model::InitScheme;
use duallm::tensor::Graph;
use duallm::train::{evaluate, train_run, EvalSettings, TrainSettings};
use duallm::{build, Architecture, Mode, ModelConfig, Recurrence, RngStream, TokenBatch};
use proptest::prelude::*;

/// Each token determines the next: ten words in a fixed cycle, one line.
fn oracle_corpus(lines: usize) -> Vec<String> {
    let mut out = Vec::new();
    for _ in 0..lines {
        out.extend((0..10).map(|i| format!("w{i}")));
        out.push("<eos>".into());
    }
    out
}

/// Reference run: best validation perplexity 1.00093 within 30 epochs.
const ORACLE_PPL: f64 = 1.01;

#[test]
fn deterministic_corpus_is_learned_to_near_one() {
    let tokens = oracle_corpus(40);
    let vocab = Vocab::build(&tokens).unwrap();
    let ids = vocab.encode(&tokens).unwrap();
    let mut cfg = ModelConfig::tiny(Architecture::Dual, Recurrence::Lstm, vocab.len(), 16);
    cfg.seed = 3;
    let settings = TrainSettings {
        epochs: 30,
        batch_size: 4,
        seq_len: 20,
        lr: 1e-2,
        eval_batch_size: 2,
        ..TrainSettings::default()
    };
    let run = train_run::<f32>(&cfg, &settings, &ids, &ids[..200]).unwrap();
    let best = run.metrics.best().unwrap().valid_ppl;
    assert!(best < ORACLE_PPL, "validation perplexity {best}");
}

#[test]
fn dual_adds_exactly_the_head_parameters() {
    let names = |arch| -> BTreeSet<String> {
        let cfg = ModelConfig::tiny(arch, Recurrence::MdLstm, 12, 6);
        let (store, _) = build::<f32>(&cfg, &mut RngStream::new(1)).unwrap();
        store.names().map(String::from).collect()
    };
    let dual = names(Architecture::Dual);
    let ers = names(Architecture::Ers);
    let stripped: BTreeSet<String> = dual
        .iter()
        .filter(|n| !n.starts_with("dual."))
        .cloned()
        .collect();
    assert_eq!(stripped, ers);
    assert_eq!(dual.len() - ers.len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_weight_mogrifier_is_identity(seed in any::<u64>(), rounds in 1usize..6, rank in 0usize..3) {
        let mut cfg = ModelConfig::tiny(Architecture::Ers, Recurrence::MdLstm, 5, 4);
        cfg.mogrifier_rounds = rounds;
        cfg.mogrifier_rank = rank;
        cfg.init = InitScheme::Zero;
        let (store, model) = build::<f64>(&cfg, &mut RngStream::new(1)).unwrap();
        let mut rng = RngStream::new(seed);
        let mut g = Graph::new();
        let e = g.input(rng.uniform_tensor(&[3, 4], 5.0));
        let h = g.input(rng.uniform_tensor(&[3, 4], 5.0));
        let m = model.stack().layers[0].mogrifier.as_ref().unwrap();
        let (e2, h2) = mogrify(&mut g, &store, m, e, h, &mut Dropout::eval()).unwrap();
        prop_assert_eq!(g.value(e2), g.value(e));
        prop_assert_eq!(g.value(h2), g.value(h));
    }

    #[test]
    fn dual_head_output_is_non_negative(seed in any::<u64>()) {
        let cfg = ModelConfig::tiny(Architecture::Dual, Recurrence::Lstm, 5, 6);
        let (store, model) = build::<f32>(&cfg, &mut RngStream::new(seed)).unwrap();
        let mut rng = RngStream::new(seed ^ 1);
        let mut g = Graph::new();
        let e = g.input(rng.uniform_tensor(&[4, 6], 3.0));
        let h = g.input(rng.uniform_tensor(&[4, 6], 3.0));
        let d = dual_head(&mut g, &store, model.dual().unwrap(), e, h).unwrap();
        prop_assert!(g.value(d).values().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn split_windows_match_one_window(seed in any::<u64>(), split in 1usize..12, rec in 0usize..3) {
        let rec = [Recurrence::Lstm, Recurrence::DLstm, Recurrence::MdLstm][rec];
        let cfg = ModelConfig::tiny(Architecture::Dual, rec, 9, 5);
        let (store, model) = build::<f32>(&cfg, &mut RngStream::new(seed)).unwrap();
        let rows: Vec<Vec<usize>> = (0..2).map(|b| (0..12).map(|t| (t * 5 + b * 3 + seed as usize) % 9).collect()).collect();
        let whole = TokenBatch::from_rows(&rows).unwrap();
        let left = TokenBatch::from_rows(&rows.iter().map(|r| r[..split].to_vec()).collect::<Vec<_>>()).unwrap();
        let right = TokenBatch::from_rows(&rows.iter().map(|r| r[split..].to_vec()).collect::<Vec<_>>());
        let rng = &mut RngStream::new(0);
        let s0 = model.zero_state(2);
        let full = model.forward_window(&store, &whole, &s0, Mode::Eval, rng).unwrap();
        let a = model.forward_window(&store, &left, &s0, Mode::Eval, rng).unwrap();
        let mut pieces: Vec<f32> = Vec::new();
        let b = right.ok().map(|r| model.forward_window(&store, &r, &a.state, Mode::Eval, rng).unwrap());
        for row in 0..2 {
            let v = cfg.vocab_size;
            pieces.extend_from_slice(&a.logits.values()[row * split * v..(row + 1) * split * v]);
            if let Some(b) = &b {
                let n = 12 - split;
                pieces.extend_from_slice(&b.logits.values()[row * n * v..(row + 1) * n * v]);
            }
        }
        let worst = full.logits.values().iter().zip(&pieces).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 1e-5, "max difference {worst}");
    }

    #[test]
    fn batch_permutation_permutes_outputs(seed in any::<u64>()) {
        let cfg = ModelConfig::tiny(Architecture::Dual, Recurrence::MdLstm, 8, 4);
        let (store, model) = build::<f64>(&cfg, &mut RngStream::new(seed)).unwrap();
        let rows: Vec<Vec<usize>> = (0..3).map(|b| (0..6).map(|t| (t * 3 + b * 5 + seed as usize) % 8).collect()).collect();
        let perm = [2, 0, 1];
        let permuted: Vec<Vec<usize>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let s0 = model.zero_state(3);
        let rng = &mut RngStream::new(0);
        let a = model.forward_window(&store, &TokenBatch::from_rows(&rows).unwrap(), &s0, Mode::Eval, rng).unwrap();
        let b = model.forward_window(&store, &TokenBatch::from_rows(&permuted).unwrap(), &s0, Mode::Eval, rng).unwrap();
        let width = 6 * 8;
        for (i, &p) in perm.iter().enumerate() {
            let x = &a.logits.values()[p * width..(p + 1) * width];
            let y = &b.logits.values()[i * width..(i + 1) * width];
            for (u, v) in x.iter().zip(y) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn perplexity_is_exp_of_mean_nll(seed in any::<u64>(), temperature in 0.9f64..1.3, len in 40usize..200) {
        let cfg = ModelConfig::tiny(Architecture::Ers, Recurrence::DLstm, 11, 5);
        let (store, model) = build::<f32>(&cfg, &mut RngStream::new(seed)).unwrap();
        let ids: Vec<usize> = (0..len).map(|i| (i * i + seed as usize) % 11).collect();
        let s = EvalSettings { batch_size: 2, seq_len: 7, temperature, ..EvalSettings::default() };
        let r = evaluate(&model, &store, &ids, &s).unwrap();
        let ppl = r.perplexity();
        prop_assert!(ppl > 0.0);
        prop_assert!(((r.nll_sum / r.tokens as f64).exp() - ppl).abs() <= 1e-6 * ppl);
    }

    #[test]
    fn targets_are_inputs_shifted_by_one(len in 4usize..300, batch in 1usize..6, steps in 1usize..40) {
        let ids: Vec<usize> = (0..len).map(|i| i * 31 % 97).collect();
        let Ok(stream) = BatchStream::new(&ids, batch) else {
            return Ok(());
        };
        for (x, y) in stream.windows(steps) {
            for b in 0..x.batch() {
                for t in 0..x.steps() - 1 {
                    prop_assert_eq!(y.get(b, t), x.get(b, t + 1));
                }
            }
        }
    }

    #[test]
    fn vocabulary_build_is_deterministic(words in prop::collection::vec("[a-e]{1,3}", 1..60)) {
        prop_assert_eq!(Vocab::build(&words).unwrap(), Vocab::build(&words).unwrap());
    }
}
