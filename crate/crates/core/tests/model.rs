use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revise_core::model::generate::{beam_search, greedy};
use revise_core::model::{checkpoint, set_freezing, DecodeSettings, FreezePolicy, LanguageMode, Model, TokenScorer};
use revise_core::nn::{Graph, Partition};
use revise_core::text::TokenId;

mod support;
use support::tiny::{random_config, random_image, random_words};

/// Next-token log-probabilities that depend only on the previous token.
#[derive(Debug, Clone)]
struct Bigram {
    first: Vec<f64>,
    table: Vec<Vec<f64>>,
}

fn log_normalize(row: &[f64]) -> Vec<f64> {
    let z = row.iter().map(|x| x.exp()).sum::<f64>().ln();
    row.iter().map(|x| x - z).collect()
}

impl TokenScorer for Bigram {
    type State = ();
    fn start(&self) -> revise_core::Result<((), Vec<f64>)> {
        Ok(((), self.first.clone()))
    }
    fn extend(&self, _: &(), t: TokenId) -> revise_core::Result<((), Vec<f64>)> {
        Ok(((), self.table[t].clone()))
    }
}

fn bigram(vocab: usize) -> impl Strategy<Value = Bigram> {
    let row = move || prop::collection::vec(-3.0f64..3.0, vocab);
    (row(), prop::collection::vec(row(), vocab)).prop_map(|(first, table)| Bigram {
        first: log_normalize(&first),
        table: table.iter().map(|r| log_normalize(r)).collect(),
    })
}

fn plain(beams: usize, max_len: usize, eos: Option<TokenId>) -> DecodeSettings {
    DecodeSettings {
        beams,
        max_len,
        eos,
        forced_prefix: Vec::new(),
    }
}

/// Best length-2 sequence by mean log-probability, ties to the smaller
/// sequence.
fn exhaustive_pair(m: &Bigram) -> Vec<TokenId> {
    let mut best: Option<(f64, Vec<TokenId>)> = None;
    for a in 0..m.first.len() {
        for b in 0..m.first.len() {
            let score = (m.first[a] + m.table[a][b]) / 2.0;
            let better = match &best {
                None => true,
                Some((s, _)) => score > *s,
            };
            if better {
                best = Some((score, vec![a, b]));
            }
        }
    }
    best.unwrap().1
}

proptest! {
    #[test]
    fn beam_of_five_matches_exhaustive_search(m in bigram(3)) {
        let got = beam_search(&m, &plain(5, 2, None)).unwrap();
        prop_assert_eq!(got.tokens, exhaustive_pair(&m));
    }

    #[test]
    fn beam_of_one_is_greedy(m in bigram(4), max_len in 1usize..6, eos in prop::option::of(0usize..4)) {
        let b = beam_search(&m, &plain(1, max_len, eos)).unwrap();
        let g = greedy(&m, &plain(1, max_len, eos)).unwrap();
        prop_assert_eq!(b.tokens, g.tokens);
        prop_assert_eq!(b.truncated, g.truncated);
    }

    #[test]
    fn output_never_exceeds_max_len(m in bigram(4), beams in 1usize..4, max_len in 0usize..5) {
        let out = revise_core::model::decode(&m, &plain(beams, max_len, Some(0))).unwrap();
        prop_assert!(out.tokens.len() <= max_len);
    }
}

#[test]
fn max_len_one_emits_one_token_on_a_real_model() {
    let cfg = random_config(1);
    let model = Model::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = random_image(&mut rng, cfg.image_size);
    let features = model.image_features(&image).unwrap();
    let q = model.image_queries(&features, None, LanguageMode::Explicit).unwrap();
    let prompt = random_words(&mut rng, cfg.vocab_size, 3);
    let settings = DecodeSettings {
        eos: None,
        ..DecodeSettings::new(1, 1)
    };
    let g = model.generate(&q.rows, &prompt, &settings).unwrap();
    assert_eq!(g.tokens.len(), 1);
    assert!(g.truncated);
}

#[test]
fn beam_of_one_is_greedy_on_a_real_model() {
    for seed in 0..4 {
        let cfg = random_config(seed);
        let model = Model::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_image(&mut rng, cfg.image_size);
        let features = model.image_features(&image).unwrap();
        let q = model.image_queries(&features, None, LanguageMode::Explicit).unwrap();
        let prompt = random_words(&mut rng, cfg.vocab_size, 2);
        let g = model.generate(&q.rows, &prompt, &DecodeSettings::new(1, 6)).unwrap();
        let scorer = revise_core::model::ModelScorer {
            model: &model,
            prefix: &q.rows,
            prompt: &prompt,
        };
        let b = beam_search(&scorer, &DecodeSettings::new(1, 6)).unwrap();
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
    }
}

#[test]
fn freezing_flags_follow_the_policy_and_leave_values() {
    let mut model = Model::new(random_config(2), 2).unwrap();
    let before = checkpoint::to_bytes(&model).unwrap();
    for policy in [FreezePolicy::Pretrain, FreezePolicy::Finetune, FreezePolicy::Selftrain] {
        set_freezing(&mut model.params, policy);
        for p in model.params.iter() {
            assert_eq!(p.trainable, policy.trainable(p.partition), "{policy} {}", p.name);
        }
        assert_eq!(checkpoint::to_bytes(&model).unwrap(), before);
    }
    assert!(FreezePolicy::Selftrain.trainable(Partition::Qformer));
    assert!(!FreezePolicy::Selftrain.trainable(Partition::VisionEncoder));
    assert!(!FreezePolicy::Finetune.trainable(Partition::Lm));
    assert!("thaw".parse::<FreezePolicy>().is_err());
}

#[test]
fn checkpoint_round_trip_and_bad_magic() {
    let model = Model::new(random_config(3), 3).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(checkpoint::to_bytes(&checkpoint::load(&path).unwrap()).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(checkpoint::from_bytes(&bad), Err(revise_core::Error::Checkpoint(_))));
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

/// Swapping two patches of the image swaps the matching rows of the patch
/// embeddings, before positions are added.
#[test]
fn patch_permutation_permutes_embeddings() {
    let cfg = random_config(4);
    let model = Model::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = random_image(&mut rng, cfg.image_size);
    let ps = cfg.patch_size;
    let side = cfg.image_size / ps;
    let (a, b) = (0, side * side - 1);
    let mut swapped = image.clone();
    for y in 0..ps {
        for x in 0..ps {
            let at = |p: usize| ((p / side * ps + y) * cfg.image_size + p % side * ps + x) * 3;
            for ch in 0..3 {
                swapped.swap(at(a) + ch, at(b) + ch);
            }
        }
    }
    let embed = |img: &[u8]| {
        let mut g = Graph::no_grad(&model.params);
        let v = model.patch_embeddings(&mut g, img).unwrap();
        g.value(v).clone()
    };
    let (e, s) = (embed(&image), embed(&swapped));
    assert_eq!(e.row(a), s.row(b));
    assert_eq!(e.row(b), s.row(a));
    for p in 1..side * side - 1 {
        assert_eq!(e.row(p), s.row(p));
    }
}

#[test]
fn mode_sets_the_number_of_prefix_rows() {
    let cfg = random_config(5);
    let model = Model::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let features = model.image_features(&random_image(&mut rng, cfg.image_size)).unwrap();
    let expl = random_words(&mut rng, cfg.vocab_size, 3);
    let k = cfg.num_queries;
    let explicit = model.image_queries(&features, Some(&expl), LanguageMode::Explicit).unwrap();
    let implicit = model.image_queries(&features, Some(&expl), LanguageMode::Implicit).unwrap();
    let none = model.image_queries(&features, None, LanguageMode::Implicit).unwrap();
    assert_eq!(explicit.rows.rows(), k + 3);
    assert_eq!(implicit.rows.rows(), k);
    assert_eq!(explicit.rows.slice_rows(0, k), implicit.rows);
    assert_ne!(implicit.rows, none.rows, "the explanation should reach the query rows");
}

#[test]
fn step_zero_is_the_same_in_both_modes() {
    let cfg = random_config(6);
    let model = Model::new(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let features = model.image_features(&random_image(&mut rng, cfg.image_size)).unwrap();
    let a = model.image_queries(&features, None, LanguageMode::Explicit).unwrap();
    let b = model.image_queries(&features, None, LanguageMode::Implicit).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.rows.rows(), cfg.num_queries);
    let empty: &[TokenId] = &[];
    let c = model.image_queries(&features, Some(empty), LanguageMode::Explicit).unwrap();
    assert_eq!(a.rows, c.rows);
}

#[test]
fn cross_attention_rows_are_distributions_over_patches() {
    let cfg = random_config(7);
    let model = Model::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let features = model.image_features(&random_image(&mut rng, cfg.image_size)).unwrap();
    let expl = random_words(&mut rng, cfg.vocab_size, 2);
    let q = model.image_queries(&features, Some(&expl), LanguageMode::Explicit).unwrap();
    let shape = q.cross_weights.shape().to_vec();
    assert_eq!(shape, vec![cfg.heads, cfg.num_queries + 2, cfg.num_patches()]);
    for row in q.cross_weights.data().chunks(shape[2]) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5, "{sum}");
        assert!(row.iter().all(|&w| w >= 0.0));
    }
    let pooled: f64 = q.patch_attention().iter().sum();
    assert!((pooled - 1.0).abs() < 1e-5);
}

#[test]
fn generation_is_deterministic() {
    let cfg = random_config(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = random_image(&mut rng, cfg.image_size);
    let prompt = random_words(&mut rng, cfg.vocab_size, 3);
    let run = || {
        let model = Model::new(cfg.clone(), 8).unwrap();
        let features = model.image_features(&image).unwrap();
        let q = model.image_queries(&features, None, LanguageMode::Explicit).unwrap();
        model.generate(&q.rows, &prompt, &DecodeSettings::new(3, 6)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn out_of_vocabulary_tokens_are_rejected() {
    let cfg = random_config(9);
    let model = Model::new(cfg.clone(), 9).unwrap();
    let features = model.image_features(&vec![0; cfg.image_size * cfg.image_size * 3]).unwrap();
    let bad = [cfg.vocab_size];
    assert!(model.image_queries(&features, Some(&bad), LanguageMode::Explicit).is_err());
    assert!(model.image_features(&[0; 5]).is_err());
}
