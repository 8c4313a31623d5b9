//! Structural invariants of the encoder/decoder: single-memory degeneracy of
//! cross-attention, non-causality of the decoder, padding and batch
//! composition invariance, and parameter finiteness through a full step.

use sembed::graph::Graph;
use sembed::model::{
    cross_attention, decode_denoise, encode, init_params, templatize_width, AttentionParams,
    EncoderInputMode, ModelConfig,
};
use sembed::rng::RngStream;
use sembed::tensor::{ParamStore, Tensor};
use sembed::text::{build_vocab, make_batch, tokenize, Vocabulary};
use sembed::train::{train_step, NoiseAssets, OptimizerState, TrainConfig};
use std::io::Write;

fn vocab_from(words: &str) -> Vocabulary {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "{words}").unwrap();
    f.flush().unwrap();
    build_vocab(f.path(), 1, 1000).unwrap()
}

fn toy_cfg(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        d: 16,
        enc_layers: 2,
        dec_layers: 2,
        enc_heads: 2,
        dec_heads: 1,
        ffn_mult: 2,
        vocab_size: vocab.len(),
        max_len: 10,
        internal_dropout: 0.1,
        encoder_input_mode: EncoderInputMode::Original,
    }
}

fn attn_store(d: usize, seed: u64) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed, 0);
    for name in ["a.wq", "a.wk", "a.wv", "a.wo"] {
        let values: Vec<f32> = (0..d * d).map(|_| rng.next_normal() as f32 * 0.2).collect();
        store.insert(name, Tensor::from_values(vec![d, d], values).unwrap());
    }
    for name in ["a.bq", "a.bv", "a.bo"] {
        let values: Vec<f32> = (0..d).map(|_| rng.next_normal() as f32 * 0.1).collect();
        store.insert(name, Tensor::from_values(vec![d], values).unwrap());
    }
    store
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed, 1);
    let values: Vec<f32> = (0..rows * cols).map(|_| rng.next_normal() as f32).collect();
    Tensor::from_values(vec![rows, cols], values).unwrap()
}

/// With memory length 1 the attention weight over the single key is exactly
/// one: sublayer outputs are position-constant and unchanged under any
/// perturbation of the queries.
#[test]
fn cross_attention_single_memory_degeneracy() {
    let d = 16;
    let store = attn_store(d, 3);
    let n = 7;

    let run = |query_seed: u64| {
        let mut g = Graph::<f32>::new();
        let bound = g.bind(&store).unwrap();
        let p = AttentionParams::from_bound(&bound, "a").unwrap();
        let z_x = g.input(&random_matrix(1, d, 10)).unwrap();
        let z_y = g.input(&random_matrix(n, d, query_seed)).unwrap();
        let out = cross_attention(&mut g, &p, z_x, z_y, 1).unwrap();
        g.values(out).to_vec()
    };

    let out = run(20);
    // Position-constant: every row equals the first.
    let mut spread = 0.0f32;
    for row in out.chunks(d) {
        for (a, b) in row.iter().zip(&out[..d]) {
            spread = spread.max((a - b).abs());
        }
    }
    assert!(spread < 1e-6, "positional spread {spread}");

    // Invariant to randomized query perturbations.
    for seed in [21, 22, 23, 24] {
        let other = run(seed);
        let diff = out
            .iter()
            .zip(&other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "query perturbation changed output by {diff}");
    }
}

/// Two equal memory rows get weights [0.5, 0.5]; the output then equals the
/// single-key case over that same row.
#[test]
fn cross_attention_equal_keys_split_weight_evenly() {
    let d = 16;
    let store = attn_store(d, 4);
    let row = random_matrix(1, d, 30);
    let mut doubled_values = row.values().to_vec();
    doubled_values.extend_from_slice(row.values());
    let doubled = Tensor::from_values(vec![2, d], doubled_values).unwrap();

    let run = |memory: &Tensor<f32>| {
        let mut g = Graph::<f32>::new();
        let bound = g.bind(&store).unwrap();
        let p = AttentionParams::from_bound(&bound, "a").unwrap();
        let z_x = g.input(memory).unwrap();
        let z_y = g.input(&random_matrix(3, d, 31)).unwrap();
        let out = cross_attention(&mut g, &p, z_x, z_y, 1).unwrap();
        g.values(out).to_vec()
    };
    let single = run(&row);
    let double = run(&doubled);
    for (a, b) in single.iter().zip(&double) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

/// Random m = 2 case against direct f64 evaluation of the attention formula
/// with the layer's projections.
#[test]
fn cross_attention_matches_direct_evaluation() {
    let d = 8;
    let store = attn_store(d, 5);
    let z_x = random_matrix(2, d, 40);
    let z_y = random_matrix(3, d, 41);

    let mut g = Graph::<f32>::new();
    let bound = g.bind(&store).unwrap();
    let p = AttentionParams::from_bound(&bound, "a").unwrap();
    let xm = g.input(&z_x).unwrap();
    let ym = g.input(&z_y).unwrap();
    let out = cross_attention(&mut g, &p, xm, ym, 1).unwrap();
    let got = g.values(out).to_vec();

    // Oracle at f64: q = z_y Wq + bq, k = z_x Wk, v = z_x Wv + bv,
    // softmax(q k^T / sqrt(d)) v, then Wo + bo.
    let at = |t: &Tensor<f32>, r: usize, c: usize, cols: usize| t.values()[r * cols + c] as f64;
    let get = |name: &str| store.get(name).unwrap().clone();
    let (wq, wk, wv, wo) = (get("a.wq"), get("a.wk"), get("a.wv"), get("a.wo"));
    let (bq, bv, bo) = (get("a.bq"), get("a.bv"), get("a.bo"));
    let proj = |m: &Tensor<f32>, w: &Tensor<f32>, b: Option<&Tensor<f32>>, rows: usize| {
        let mut out = vec![0.0f64; rows * d];
        for r in 0..rows {
            for c in 0..d {
                let mut acc = b.map(|bb| bb.values()[c] as f64).unwrap_or(0.0);
                for k in 0..d {
                    acc += at(m, r, k, d) * w.values()[k * d + c] as f64;
                }
                out[r * d + c] = acc;
            }
        }
        out
    };
    let q = proj(&z_y, &wq, Some(&bq), 3);
    let k = proj(&z_x, &wk, None, 2);
    let v = proj(&z_x, &wv, Some(&bv), 2);
    let mut expect = vec![0.0f64; 3 * d];
    for i in 0..3 {
        let mut scores = [0.0f64; 2];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..d {
                acc += q[i * d + c] * k[j * d + c];
            }
            *s = acc / (d as f64).sqrt();
        }
        let mx = scores[0].max(scores[1]);
        let e = [(scores[0] - mx).exp(), (scores[1] - mx).exp()];
        let z = e[0] + e[1];
        let w = [e[0] / z, e[1] / z];
        let mut ctx = vec![0.0f64; d];
        for (j, &wj) in w.iter().enumerate() {
            for c in 0..d {
                ctx[c] += wj * v[j * d + c];
            }
        }
        for c in 0..d {
            let mut acc = bo.values()[c] as f64;
            for kk in 0..d {
                acc += ctx[kk] * wo.values()[kk * d + c] as f64;
            }
            expect[i * d + c] = acc;
        }
    }
    for (a, b) in got.iter().zip(&expect) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

/// Perturbing a LATER token of the noisy decoder input changes the logits at
/// EARLIER positions: no causal mask screens the future.
#[test]
fn decoder_is_non_causal() {
    let vocab = vocab_from("the cat sat on a mat dogs run fast trees grow tall");
    let cfg = toy_cfg(&vocab);
    let params = init_params::<f32>(&cfg, &mut RngStream::new(8, 0)).unwrap();
    let rep_values: Vec<f32> = (0..cfg.d).map(|i| ((i as f32) * 0.3).sin() * 0.5).collect();

    let logits_for = |ids: Vec<usize>| {
        let noisy = make_batch(&[ids], cfg.max_len).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = g.bind(&params).unwrap();
        let rep = g
            .input(&Tensor::from_values(vec![1, cfg.d], rep_values.clone()).unwrap())
            .unwrap();
        let logits =
            decode_denoise(&mut g, &bound, &cfg, rep, &noisy, 0.0, false, &RngStream::new(0, 0))
                .unwrap();
        g.values(logits).to_vec()
    };

    let base_ids = tokenize("the cat sat on a mat", &vocab).unwrap();
    let mut perturbed = base_ids.clone();
    let last = perturbed.len() - 1;
    perturbed[last] = vocab.id_of("dogs").unwrap();

    let a = logits_for(base_ids);
    let b = logits_for(perturbed);
    let v = cfg.vocab_size;
    // Logits at position 0 (well before the perturbed last position) differ.
    let early_diff = a[..v]
        .iter()
        .zip(&b[..v])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(early_diff > 0.0, "future token never reached earlier positions");
}

/// A sentence padded to different widths yields the same representation:
/// masked attention never lets real tokens see padding.
#[test]
fn encoder_is_padding_extension_invariant() {
    let vocab = vocab_from("the cat sat on a mat dogs run fast");
    let cfg = toy_cfg(&vocab);
    let params = init_params::<f32>(&cfg, &mut RngStream::new(9, 0)).unwrap();
    let seq = tokenize("the cat sat", &vocab).unwrap();

    let rep_at_width = |width: usize| {
        let tb = templatize_width(&[seq.clone()], &vocab, cfg.max_len, width).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = g.bind(&params).unwrap();
        let rep = encode(&mut g, &bound, &cfg, &tb, false, &RngStream::new(0, 0)).unwrap();
        g.values(rep).to_vec()
    };

    let short = rep_at_width(8);
    let long = rep_at_width(cfg.enc_len());
    let diff = short
        .iter()
        .zip(&long)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-5, "padding extension changed representation by {diff}");
}

/// Embedding a sentence alone vs inside a batch of 8 gives the same vector.
#[test]
fn encoder_is_batch_composition_invariant() {
    let vocab = vocab_from("the cat sat on a mat dogs run fast trees grow tall birds sing");
    let cfg = toy_cfg(&vocab);
    let params = init_params::<f32>(&cfg, &mut RngStream::new(10, 0)).unwrap();

    let target = "the cat sat on a mat".to_string();
    let solo = sembed::model::embed_sentences(&[target.clone()], &params, &cfg, &vocab).unwrap();

    let mut batch = vec![target];
    for filler in
        ["dogs run fast", "trees grow tall", "birds sing", "a mat", "the cat", "run fast dogs", "tall trees"]
    {
        batch.push(filler.to_string());
    }
    let batched = sembed::model::embed_sentences(&batch, &params, &cfg, &vocab).unwrap();

    let diff = solo
        .values()
        .iter()
        .zip(&batched.values()[..cfg.d])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-5, "batch composition changed embedding by {diff}");
}

/// All parameters and optimizer moments stay finite through forward/backward
/// steps on valid inputs, and second moments stay non-negative.
#[test]
fn parameters_stay_finite_through_training_steps() {
    let vocab = vocab_from("the cat sat on a mat dogs run fast trees grow tall");
    let cfg = toy_cfg(&vocab);
    let noise = NoiseAssets::rule_based_default();
    let train_cfg = TrainConfig { batch_size: 2, steps: 3, ..TrainConfig::default() };
    let mut params = init_params::<f32>(&cfg, &mut RngStream::new(11, 0)).unwrap();
    let mut opt = OptimizerState::new(train_cfg.lr, train_cfg.weight_decay);
    let sentences = vec!["the cat sat on a mat".to_string(), "dogs run fast".to_string()];
    for step in 0..3 {
        let b = train_step(
            &sentences, &mut params, &mut opt, &cfg, &noise, &train_cfg, &vocab, step,
        )
        .unwrap();
        assert!(b.combined.is_finite());
        assert!(params.all_finite());
        for (_, m, v) in opt.moments() {
            assert!(m.iter().all(|x| x.is_finite()));
            assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }
}
