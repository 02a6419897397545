use super::*;
use crate::encoders::EncoderKind;
use crate::text::Vocabulary;

fn fixture(vocab_size: usize, dim: usize) -> (Vocabulary, Arc<EmbeddingTable>) {
    let tokens: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(tokens).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = (0..vocab_size * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let table = EmbeddingTable::with_reserved_rows(&vocab, rows, dim, 9).unwrap();
    (vocab, Arc::new(table))
}

fn words(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

fn query(v: &Vocabulary, ids: &[usize]) -> ProcessedText {
    ProcessedText::query(&words(ids), v)
}

fn doc(v: &Vocabulary, ids: &[usize]) -> ProcessedText {
    ProcessedText::document([words(ids).as_str()], v)
}

fn tiny(arch: Architecture, encoder: EncoderKind) -> ModelConfig {
    ModelConfig {
        projection_dim: 4,
        doc_hidden: 3,
        query_hidden: 3,
        match_channels: 3,
        filters_first: 2,
        filters_second: 2,
        hidden: 4,
        ..ModelConfig::small(arch, encoder)
    }
}

fn set(model: &mut RankingModel, name: &str, f: impl Fn(&mut [f64])) {
    let id = model.store().id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    f(model.store_mut().get_mut(id).tensor.values_mut());
}

#[test]
fn match_tensor_product_channels() {
    let (v, _) = fixture(4, 3);
    let store = ParamStore::new();
    let mut s = Session::new(&store, Mode::Infer, 0);
    let qs = s.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    let ds = s.constant(Tensor::new([1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
    let alpha = s.constant(Tensor::scalar(0.7)).unwrap();
    let q = query(&v, &[0]);
    let d = query(&v, &[1]);
    let mt = build_match_tensor(&mut s, Some((qs, ds)), &q, &d, alpha).unwrap();
    let t = s.tape.value(mt).unwrap();
    assert_eq!(t.shape(), &[1, 1, 3]);
    assert_eq!(t.values(), &[3.0, 8.0, 0.0]);
}

#[test]
fn match_tensor_exact_channel_and_padding() {
    let (v, _) = fixture(4, 3);
    let store = ParamStore::new();
    let mut s = Session::new(&store, Mode::Infer, 0);
    let q = query(&v, &[2]);
    let d = query(&v, &[2]).padded(2);
    let qs = s.constant(Tensor::zeros([1, 3]).unwrap()).unwrap();
    let ds = s.constant(Tensor::filled([2, 3], 5.0).unwrap()).unwrap();
    let alpha = s.constant(Tensor::scalar(1.5)).unwrap();
    let mt = build_match_tensor(&mut s, Some((qs, ds)), &q, &d, alpha).unwrap();
    let t = s.tape.value(mt).unwrap();
    assert_eq!(t.shape(), &[1, 2, 4]);
    assert_eq!(&t.values()[..4], &[0.0, 0.0, 0.0, 1.5]);
    assert!(t.values()[4..].iter().all(|&x| x == 0.0));
}

#[test]
fn match_tensor_rejects_k_mismatch() {
    let (v, _) = fixture(4, 3);
    let store = ParamStore::new();
    let mut s = Session::new(&store, Mode::Infer, 0);
    let qs = s.constant(Tensor::zeros([1, 3]).unwrap()).unwrap();
    let ds = s.constant(Tensor::zeros([1, 2]).unwrap()).unwrap();
    let alpha = s.constant(Tensor::scalar(1.0)).unwrap();
    let q = query(&v, &[0]);
    assert!(build_match_tensor(&mut s, Some((qs, ds)), &q, &q, alpha).is_err());
}

#[test]
fn exact_match_ignores_specials_and_compares_oov_strings() {
    let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
    let q = ProcessedText::query("a zz yy", &v);
    let d = ProcessedText::document(["a", "zz qq"], &v);
    let ind = exact_match_indicator(&q, &d, q.len(), d.len()).unwrap();
    // d = <start> a <field> zz qq <end>
    let row = |i: usize| ind.values()[i * d.len()..(i + 1) * d.len()].to_vec();
    assert_eq!(row(0), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(row(1), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(row(2), vec![0.0; 6]);
}

#[test]
fn zero_match_tensor_scores_one_half() {
    let (v, table) = fixture(6, 5);
    let mut m = RankingModel::new(tiny(Architecture::MatchTensor, EncoderKind::BiLstm), table, 1).unwrap();
    set(&mut m, "query_state_projection.weight", |x| x.fill(0.0));
    set(&mut m, "exact_match.alpha", |x| x.fill(0.0));
    let p = m.score(&query(&v, &[1, 2]), &doc(&v, &[1, 2, 3])).unwrap();
    assert_eq!(p, 0.5);
}

#[test]
fn zero_weight_ssm_scores_one_half() {
    let (v, table) = fixture(6, 5);
    let mut m = RankingModel::new(tiny(Architecture::Ssm, EncoderKind::BiLstm), table, 1).unwrap();
    let ids: Vec<ParamId> = m.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        m.store_mut().get_mut(id).tensor.values_mut().fill(0.0);
    }
    assert_eq!(m.score(&query(&v, &[1]), &doc(&v, &[2, 3])).unwrap(), 0.5);
}

#[test]
fn scores_are_probabilities_for_every_architecture() {
    let (v, table) = fixture(10, 5);
    for arch in Architecture::ALL {
        for enc in [EncoderKind::BiLstm, EncoderKind::Cnn] {
            let m = RankingModel::new(tiny(arch, enc), table.clone(), 3).unwrap();
            for (q, d) in [(vec![1], vec![1]), (vec![2, 3, 4], vec![5, 6, 2, 3, 9, 9, 9]), (vec![0, 1], vec![7])] {
                let p = m.score(&query(&v, &q), &doc(&v, &d)).unwrap();
                assert!(p > 0.0 && p < 1.0, "{arch} {enc}: {p}");
            }
        }
    }
}

#[test]
fn empty_inputs_are_rejected() {
    let (v, table) = fixture(4, 5);
    let m = RankingModel::new(tiny(Architecture::Ssm, EncoderKind::BiLstm), table, 3).unwrap();
    let empty = ProcessedText::query("", &v);
    assert!(matches!(m.score(&empty, &doc(&v, &[1])), Err(Error::Empty(_))));
}

#[test]
fn scores_are_padding_invariant() {
    let (v, table) = fixture(10, 5);
    for arch in Architecture::ALL {
        for enc in [EncoderKind::BiLstm, EncoderKind::Cnn] {
            let m = RankingModel::new(tiny(arch, enc), table.clone(), 8).unwrap();
            let (q, d) = (query(&v, &[1, 4]), doc(&v, &[4, 5, 1, 4, 8]));
            let base = m.score(&q, &d).unwrap();
            let padded = m.score(&q.clone().padded(8), &d.clone().padded(40)).unwrap();
            assert!((base - padded).abs() <= 1e-12, "{arch} {enc}");
        }
    }
}

#[test]
fn translation_of_a_phrase_keeps_the_score() {
    let (v, table) = fixture(10, 5);
    let m = RankingModel::new(tiny(Architecture::MatchTensor, EncoderKind::Cnn), table, 4).unwrap();
    let q = query(&v, &[1, 2, 3]);
    let at = |offset: usize| {
        let mut ids = vec![9; 30];
        ids[offset..offset + 3].copy_from_slice(&[1, 2, 3]);
        m.score(&q, &doc(&v, &ids)).unwrap()
    };
    let base = at(8);
    for offset in [9, 12, 15, 19] {
        assert!((at(offset) - base).abs() < 1e-9);
    }
}

fn width_one_cnn_ssm(table: Arc<EmbeddingTable>) -> RankingModel {
    let mut m = RankingModel::new(tiny(Architecture::Ssm, EncoderKind::Cnn), table, 6).unwrap();
    for side in ["query_encoder", "doc_encoder"] {
        let id = m.store().id(&format!("{side}.width3.filters")).unwrap();
        let t = &mut m.store_mut().get_mut(id).tensor;
        let per_filter = t.len() / t.shape()[0];
        let tap = per_filter / 3;
        for f in t.values_mut().chunks_mut(per_filter) {
            f[..tap].fill(0.0);
            f[2 * tap..].fill(0.0);
        }
    }
    m
}

#[test]
fn width_one_cnn_ssm_is_bag_of_words() {
    let (v, table) = fixture(10, 5);
    let m = width_one_cnn_ssm(table);
    let q = query(&v, &[1, 2]);
    let a = m.score(&q, &doc(&v, &[3, 4, 5, 6, 7])).unwrap();
    let b = m.score(&q, &doc(&v, &[7, 5, 3, 6, 4])).unwrap();
    let c = m.score(&q, &doc(&v, &[3, 3, 4, 4, 5, 5, 6, 6, 7, 7])).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn exact_only_hybrid_without_overlap_depends_on_ssm_branch_only() {
    let (v, table) = fixture(12, 5);
    let cfg = tiny(Architecture::MtExactSsm, EncoderKind::BiLstm);
    let mut m = RankingModel::new(cfg.clone(), table, 2).unwrap();
    let q = query(&v, &[1, 2]);
    let (d1, d2) = (doc(&v, &[3, 4, 5]), doc(&v, &[6, 7, 8, 9]));
    assert_ne!(m.score(&q, &d1).unwrap(), m.score(&q, &d2).unwrap());
    let f2 = cfg.filters_second;
    let h = cfg.hidden;
    set(&mut m, "comparison.hidden.weight", |w| w[f2 * h..].fill(0.0));
    assert_eq!(m.score(&q, &d1).unwrap(), m.score(&q, &d2).unwrap());
}

#[test]
fn hybrid_with_silenced_ssm_half_equals_match_tensor() {
    let (v, table) = fixture(12, 5);
    let cfg = tiny(Architecture::MtSsm, EncoderKind::BiLstm);
    let mut hybrid = RankingModel::new(cfg.clone(), table.clone(), 2).unwrap();
    let (f2, h) = (cfg.filters_second, cfg.hidden);
    set(&mut hybrid, "comparison.hidden.weight", |w| w[f2 * h..].fill(0.0));
    let mt_cfg = ModelConfig { architecture: Architecture::MatchTensor, ..cfg };
    let mut mt = RankingModel::new(mt_cfg, table, 99).unwrap();
    let names: Vec<String> = mt.store().iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let src = hybrid.store().get(hybrid.store().id(&name).unwrap()).tensor.clone();
        let n = mt.store().get(mt.store().id(&name).unwrap()).tensor.len();
        set(&mut mt, &name, |dst| dst.copy_from_slice(&src.values()[..n]));
    }
    let q = query(&v, &[1, 2]);
    for d in [doc(&v, &[1, 2, 3]), doc(&v, &[5, 6, 2, 7, 7, 1])] {
        assert_eq!(hybrid.score(&q, &d).unwrap(), mt.score(&q, &d).unwrap());
    }
}

#[test]
fn attention_single_and_duplicate_positions() {
    let (_, table) = fixture(4, 5);
    let cfg = ModelConfig { attention_pooling: true, ..tiny(Architecture::Ssm, EncoderKind::BiLstm) };
    let m = RankingModel::new(cfg, table, 1).unwrap();
    let att = m.ssm_branch.as_ref().unwrap().attention.clone().unwrap();
    let mut s = Session::new(m.store(), Mode::Infer, 0);
    let q = s.constant(Tensor::vector(vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4])).unwrap();
    let one = s.constant(Tensor::new([1, 6], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
    let pooled = att.pool(&mut s, one, q, &[true]).unwrap();
    assert_eq!(s.tape.value(pooled).unwrap().values(), s.tape.value(one).unwrap().values());
    let two = s.constant(Tensor::new([3, 6], [[0.5; 6], [0.5; 6], [9.0; 6]].concat()).unwrap()).unwrap();
    let w = att.weights(&mut s, two, q, &[true, true, false]).unwrap();
    assert_eq!(s.tape.value(w).unwrap().values(), &[0.5, 0.5, 0.0]);
}

#[test]
fn attention_ssm_trains_end_to_end() {
    let (v, table) = fixture(8, 5);
    let cfg = ModelConfig { attention_pooling: true, ..tiny(Architecture::Ssm, EncoderKind::BiLstm) };
    let m = RankingModel::new(cfg, table, 1).unwrap();
    let (_, g) = m.loss_and_gradient(&query(&v, &[1]), &doc(&v, &[1, 2, 3]), 1.0, Mode::Infer, 0).unwrap();
    assert!(m.count_parameters().components.contains_key("attention"));
    assert!(g.iter().all(|x| x.is_finite()));
}

#[test]
fn gradient_reaches_every_parameter() {
    let (v, table) = fixture(10, 5);
    for arch in Architecture::ALL {
        let m = RankingModel::new(tiny(arch, EncoderKind::BiLstm), table.clone(), 12).unwrap();
        let q = query(&v, &[1, 2, 3]);
        let d = doc(&v, &[4, 1, 2, 3, 5, 6, 7]);
        let (_, g) = m.loss_and_gradient(&q, &d, 1.0, Mode::Infer, 0).unwrap();
        let mut offset = 0;
        for (_, p) in m.store().iter().filter(|(_, p)| p.trainable) {
            let n = p.tensor.len();
            assert!(g[offset..offset + n].iter().any(|&x| x != 0.0), "{arch}: no gradient for {}", p.name);
            offset += n;
        }
    }
}

#[test]
fn single_filter_count() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = ParamBuilder { store: &mut store, rng: &mut rng };
    ScoringHead::build(&mut b, 41, 1, 1).unwrap();
    let conv34: usize =
        store.iter().filter(|(_, p)| p.name.starts_with("match_head.conv3x4.")).map(|(_, p)| p.tensor.len()).sum();
    assert_eq!(conv34, 3 * 4 * 41 + 1);
}

#[test]
fn tuned_counts_are_close_and_ordered() {
    let (_, table) = fixture(3, 256);
    let count = |arch| RankingModel::new(ModelConfig::tuned(arch), table.clone(), 0).unwrap().count_parameters();
    let mt = count(Architecture::MatchTensor);
    let hybrid = count(Architecture::MtSsm);
    let ssm = count(Architecture::Ssm);
    assert_eq!(ssm.total, 213_508);
    assert_eq!(mt.components["doc_encoder"], 2 * 4 * (40 * 70 + 70 * 70 + 70));
    assert!(mt.total < hybrid.total && hybrid.total < ssm.total);
    for (c, expected) in [(&mt, 104_000.0), (&hybrid, 160_000.0), (&ssm, 216_000.0)] {
        assert!((c.total as f64 - expected).abs() / expected <= 0.25, "{} vs {expected}", c.total);
    }
}

#[test]
fn from_parameters_round_trip_and_validation() {
    let (v, table) = fixture(8, 5);
    let cfg = tiny(Architecture::MtSsm, EncoderKind::Cnn);
    let m = RankingModel::new(cfg.clone(), table.clone(), 21).unwrap();
    let params: Vec<(String, Tensor)> = m.store().iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
    let back = RankingModel::from_parameters(cfg.clone(), table.clone(), params.clone()).unwrap();
    let (q, d) = (query(&v, &[1, 2]), doc(&v, &[2, 3, 1]));
    assert_eq!(m.score(&q, &d).unwrap(), back.score(&q, &d).unwrap());
    assert!(RankingModel::from_parameters(cfg.clone(), table.clone(), params[1..].to_vec()).is_err());
    let mut bad = params;
    bad[0].1 = Tensor::zeros([1]).unwrap();
    assert!(RankingModel::from_parameters(cfg, table, bad).is_err());
}

#[test]
fn architecture_names_round_trip() {
    for a in Architecture::ALL {
        assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
    }
    assert!("dssm".parse::<Architecture>().is_err());
}
