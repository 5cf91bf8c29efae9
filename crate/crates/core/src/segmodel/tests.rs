use proptest::prelude::*;

use super::*;
use crate::lattice::{semimarkov_expected_segments, semimarkov_forward};
use crate::ndgrad::{gradcheck, Tensor, Value};
use crate::Error;

fn small_cfg() -> SegModelConfig {
    SegModelConfig { embed: 8, hidden: 8, ..Default::default() }
}

fn corpus(n: usize, seed: u64) -> Vec<Pair> {
    prepare(&Vocab::synthetic(), &synth_data(&SynthSpec::default(), seed, n).unwrap()).unwrap()
}

fn model(cfg: SegModelConfig, seed: u64) -> SegModel {
    SegModel::new(cfg, Vocab::synthetic(), seed).unwrap()
}

fn micro(vocab: &Vocab) -> (RecordSet, Vec<usize>) {
    let rs = vocab.record_set(&[("name".into(), "aromi".into()), ("food".into(), "thai".into())]).unwrap();
    let y = vocab.encode(&["aromi", "thai", "food", "."].map(String::from));
    (rs, y)
}

#[test]
fn tables_satisfy_potential_invariants() {
    let m = model(small_cfg(), 1);
    for p in corpus(10, 2) {
        let pots = score_tables(&m, &p.rs, &p.y).unwrap();
        assert_eq!(pots.len(), p.y.len());
        assert_eq!(pots.labels(), p.k() + 1);
        pots.validate().unwrap();
    }
    let (rs, _) = micro(&m.vocab);
    assert!(matches!(score_tables(&m, &rs, &[]), Err(Error::InvalidArgument(_))));
}

#[test]
fn forward_is_finite_for_fresh_models() {
    for (seed, hidden) in [(1, 32), (2, 128)] {
        let m = model(SegModelConfig { hidden, ..Default::default() }, seed);
        for p in corpus(5, seed) {
            let z = semimarkov_forward(&score_tables(&m, &p.rs, &p.y).unwrap()).unwrap();
            assert!(z.is_finite() && z < 0.0);
        }
    }
}

#[test]
fn cached_segment_scores_match_isolated_recomputation() {
    let m = model(small_cfg(), 3);
    let p = &corpus(1, 4)[0];
    let pots = score_tables(&m, &p.rs, &p.y).unwrap();
    let b = m.params.bind_const();
    let enc = m.encode(&b, &p.rs);
    let n = p.y.len();
    for start in [0, 2, n / 2] {
        for len in 1..=m.cfg.max_seg_len.min(n - start) {
            for j in 0..=p.k() {
                let mut d = enc.d0.clone();
                for &w in &p.y[..start] {
                    d = m.advance(&b, &d, w);
                }
                let mut s = 0.0;
                for &w in &p.y[start..start + len] {
                    s += m.record_dist(&b, &enc, &d, j).probs.data().data()[w].ln();
                    d = m.advance(&b, &d, w);
                }
                s += m.record_dist(&b, &enc, &d, j).probs.data().data()[SEG_END].ln();
                let cached = pots.g(start, len - 1, j);
                assert!((s - cached).abs() < 1e-9, "p={start} l={len} j={j}: {s} vs {cached}");
            }
        }
    }
}

#[test]
fn encoder_states_follow_the_pooling_rules() {
    let m = model(small_cfg(), 5);
    let p = &corpus(1, 6)[0];
    let b = m.params.bind_const();
    let enc = m.encode(&b, &p.rs);
    let e = m.cfg.embed;
    let emb = m.embed_tokens(&b, &enc.src);
    for (j, sp) in enc.spans.iter().enumerate() {
        for c in 0..e {
            let max = sp.clone().map(|r| emb.data().data()[r * e + c]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(enc.f.data().data()[(j + 1) * e + c], max);
        }
    }
    assert!(enc.a.data().data()[..m.cfg.hidden].iter().all(|&x| x == 0.0));
}

#[test]
fn regularizer_is_flat_inside_the_margin() {
    let m = model(small_cfg(), 7);
    let plain = SegModel { cfg: SegModelConfig { regularize: false, ..m.cfg.clone() }, ..m.clone() };
    let p = &corpus(1, 8)[0];
    let et = semimarkov_expected_segments(&score_tables(&m, &p.rs, &p.y).unwrap()).unwrap();
    let eta = et.max(1.0) + 0.25;
    let b1 = m.params.bind();
    let reg = train_loss(&m, &b1, &p.rs, &p.y, eta, 1.0).unwrap();
    reg.loss.backward();
    let b2 = plain.params.bind();
    let base = train_loss(&plain, &b2, &p.rs, &p.y, eta, 1.0).unwrap();
    base.loss.backward();
    assert!((reg.loss.item() - base.loss.item() - 1.0).abs() < 1e-12);
    for (g1, g2) in b1.grads().iter().zip(&b2.grads()) {
        for (x, y) in g1.data().iter().zip(g2.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
    assert!(train_loss(&m, &m.params.bind(), &p.rs, &p.y, 0.5, 1.0).is_err());
}

#[test]
fn default_regularizer_settings() {
    let c = SegModelConfig::default();
    assert_eq!((c.eta_offset, c.gamma, c.regularize), (0.0, 1.0, true));
    assert_eq!(c.max_seg_len, 6);
    assert!(SegModelConfig { hidden: 0, ..c.clone() }.validate().is_err());
    assert!(SegModelConfig { gamma: -1.0, ..c }.validate().is_err());
}

#[test]
fn train_loss_passes_gradcheck_on_a_micro_instance() {
    let cfg = SegModelConfig { embed: 3, hidden: 3, max_seg_len: 3, init_scale: 0.5, ..Default::default() };
    let m = model(cfg, 9);
    let (rs, y) = micro(&m.vocab);
    assert!(y.len() <= 6);
    for id in m.params.ids() {
        let t = m.params.get(id).clone();
        let err = gradcheck(
            |x| {
                let b = m.params.bind_with(id, x.clone());
                train_loss(&m, &b, &rs, &y, 2.0, 0.5).unwrap().loss
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{}: {err}", m.params.name(id));
    }
}

fn mean_loss(m: &SegModel, pairs: &[Pair]) -> f64 {
    let b = m.params.bind_const();
    pairs.iter().map(|p| train_loss(m, &b, &p.rs, &p.y, p.k() as f64, 1.0).unwrap().loss.item()).sum::<f64>()
        / pairs.len() as f64
}

#[test]
fn training_lowers_the_loss_on_a_small_slice() {
    let pairs = corpus(50, 10);
    let mut m = model(small_cfg(), 11);
    let before = mean_loss(&m, &pairs);
    // 10 batches per epoch, 200 steps
    let cfg = TrainConfig { epochs: 20, batch_size: 5, ..Default::default() };
    let logs = fit(&mut m, &pairs, &cfg, |_, _| {}).unwrap();
    assert_eq!(logs.len(), 20);
    let after = mean_loss(&m, &pairs);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn training_is_deterministic() {
    let pairs = corpus(6, 12);
    let run = || {
        let mut m = model(small_cfg(), 13);
        let logs = fit(&mut m, &pairs, &TrainConfig { epochs: 2, batch_size: 3, ..Default::default() }, |_, _| {}).unwrap();
        (logs, m.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn fit_select_keeps_the_best_dev_epoch() {
    let pairs = corpus(12, 14);
    let mut m = model(small_cfg(), 15);
    let opts = DecodeOptions::default();
    let mut seen = 0;
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..Default::default() };
    let sel = fit_select(&mut m, &pairs[..8], &pairs[8..], &cfg, &opts, |_, _| seen += 1).unwrap();
    assert_eq!((seen, sel.dev.len(), sel.logs.len()), (3, 3, 3));
    let best = &sel.dev[sel.best_epoch];
    for r in &sel.dev {
        assert!(r.faithfulness <= best.faithfulness);
    }
    assert_eq!(&evaluate(&m, &pairs[8..], &opts).unwrap(), best);
    assert!(fit_select(&mut m, &pairs, &[], &cfg, &opts, |_, _| {}).is_err());
}

fn check_constraints(m: &SegModel, p: &Pair, d: &Decoded, opts: &DecodeOptions) {
    let segs = d.segments();
    let mut count = vec![0; p.k() + 1];
    let mut next = 0;
    for (i, (j, r)) in segs.iter().enumerate() {
        assert_eq!(r.start, next, "segments tile the output");
        assert!(!r.is_empty(), "no empty segment");
        next = r.end;
        count[*j] += 1;
        if i > 0 && *j == 0 {
            assert_ne!(segs[i - 1].0, 0, "no two null segments in a row");
        }
        if opts.no_punct_segments && r.len() < m.cfg.max_seg_len {
            assert!(!d.tokens[r.clone()].iter().all(|&t| m.vocab.is_punct_id(t)));
        }
    }
    assert_eq!(next, d.tokens.len());
    assert!(count[1..].iter().all(|&c| c == 1), "every record exactly once: {count:?}");
    if opts.trigram_block {
        let t = &d.tokens;
        for a in 0..t.len().saturating_sub(2) {
            for b in a + 1..t.len() - 2 {
                assert_ne!(t[a..a + 3], t[b..b + 3]);
            }
        }
    }
}

#[test]
fn decoding_covers_every_record_once() {
    let m = model(small_cfg(), 16);
    let pairs = corpus(8, 17);
    let variants = [
        DecodeOptions::default(),
        DecodeOptions { beam: 3, ..Default::default() },
        DecodeOptions { trigram_block: true, ..Default::default() },
        DecodeOptions { beam: 3, no_punct_segments: true, length_norm: false, ..Default::default() },
    ];
    for p in &pairs {
        for o in &variants {
            let d = constrained_decode(&m, &p.rs, o).unwrap();
            check_constraints(&m, p, &d, o);
        }
    }
    assert!(constrained_decode(&m, &pairs[0].rs, &DecodeOptions { beam: 0, ..Default::default() }).is_err());
}

#[test]
fn null_record_may_label_several_segments() {
    let mut m = model(small_cfg(), 18);
    // flat transition scores: ties go to the lowest record id, so null
    // segments interleave with the real ones
    for name in ["trans.m", "trans.n"] {
        let id = m.params.find(name).unwrap();
        let shape = m.params.get(id).shape().to_vec();
        *m.params.get_mut(id) = Tensor::zeros(&shape);
    }
    let p = corpus(1, 19).remove(0);
    let d = constrained_decode(&m, &p.rs, &DecodeOptions::default()).unwrap();
    let nulls = d.path.labels.iter().filter(|&&j| j == 0).count();
    assert!(nulls >= 2, "labels {:?}", d.path.labels);
    check_constraints(&m, &p, &d, &DecodeOptions::default());
}

#[test]
fn full_selection_mask_matches_unmasked_attention() {
    let m = model(small_cfg(), 20);
    let p = &corpus(1, 21)[0];
    let b = m.params.bind_const();
    let enc = m.encode(&b, &p.rs);
    let n = enc.src.len();
    let ones = vec![1.0; n];
    let masked = select_attention(&m, &p.rs, &ones, &p.y);
    let mv = Value::constant(Tensor::vector(ones.clone()));
    assert!(select_loglik(&m, &b, &enc, &mv, &p.y).item().is_finite());
    let d =m.decoder_states(&b, &super::decode::select_init(&m, &b, &enc, &mv), &p.y);
    let plain = m.output_dist(&b, &d, Some((&enc.h, &enc.src)), None, None).attention.unwrap();
    for (a, c) in masked.data().iter().zip(plain.data().data()) {
        assert!((a - c).abs() < 1e-12);
    }
    let toks = vrs_select_decode(&m, &p.rs, &ones, 20).unwrap();
    let mut d = super::decode::select_init(&m, &b, &enc, &mv);
    let mut greedy = Vec::new();
    for _ in 0..20 {
        let pr = m.output_dist(&b, &d, Some((&enc.h, &enc.src)), None, None).probs;
        let pv = pr.data().data();
        let w = (0..pv.len())
            .filter(|&w| w != UNK && w != SEG_END)
            .max_by(|&a, &c| pv[a].total_cmp(&pv[c]).then(c.cmp(&a)))
            .unwrap();
        if w == EOS {
            break;
        }
        greedy.push(w);
        d = m.advance(&b, &d, w);
    }
    assert_eq!(toks, greedy);
}

#[test]
fn unselected_positions_get_no_attention() {
    let m = model(small_cfg(), 22);
    let p = &corpus(1, 23)[0];
    let n = p.rs.flatten().0.len();
    let mask: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let att = select_attention(&m, &p.rs, &mask, &p.y);
    for row in att.data().chunks(n) {
        for (i, &a) in row.iter().enumerate() {
            if mask[i] == 0.0 {
                assert_eq!(a, 0.0);
            }
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let a = vrs_select_decode(&m, &p.rs, &mask, 15).unwrap();
    assert_eq!(a, vrs_select_decode(&m, &p.rs, &mask, 15).unwrap());
    assert!(matches!(vrs_select_decode(&m, &p.rs, &vec![0.0; n], 5), Err(Error::InvalidArgument(_))));
    assert!(matches!(vrs_select_decode(&m, &p.rs, &[1.0], 5), Err(Error::Shape(_))));
}

#[test]
fn selector_and_prior_have_one_logit_per_input_token() {
    let m = model(small_cfg(), 24);
    let p = &corpus(1, 25)[0];
    let b = m.params.bind_const();
    let enc = m.encode(&b, &p.rs);
    let n = enc.src.len();
    assert_eq!(selector_logits(&m, &b, &enc, &p.y).shape(), &[n]);
    assert_eq!(prior_logits(&m, &b, &enc).shape(), &[n]);
    assert_ne!(selector_logits(&m, &b, &enc, &p.y).data(), selector_logits(&m, &b, &enc, &[]).data());
}

#[test]
fn checkpoints_round_trip() {
    let m = model(small_cfg(), 26);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for ((n1, t1), (n2, t2)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.vocab, m.vocab);
    let p = &corpus(1, 27)[0];
    let o = DecodeOptions::default();
    assert_eq!(constrained_decode(&m, &p.rs, &o).unwrap(), constrained_decode(&back, &p.rs, &o).unwrap());
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(manifest.version, crate::VERSION);
    assert!(manifest.tensors.windows(2).all(|w| w[0].offset + w[0].bytes == w[1].offset));
}

#[test]
fn checkpoint_mismatches_are_rejected() {
    let m = model(small_cfg(), 28);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&m, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut manifest: Manifest = serde_json::from_str(&text).unwrap();

    let mut wrong_shape = manifest.clone();
    wrong_shape.config.hidden = 9;
    std::fs::write(&path, serde_json::to_string(&wrong_shape).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let mut renamed = manifest.clone();
    renamed.tensors[0].name = "bogus".into();
    std::fs::write(&path, serde_json::to_string(&renamed).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    manifest.format = "other".into();
    std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    save_checkpoint(&m, &path).unwrap();
    let bin = path.with_extension("bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn synthetic_corpus_is_seeded_and_well_formed() {
    let spec = SynthSpec::default();
    let a = synth_data(&spec, 30, 50).unwrap();
    assert_eq!(a, synth_data(&spec, 30, 50).unwrap());
    assert_ne!(a, synth_data(&spec, 31, 50).unwrap());
    let vocab = Vocab::synthetic();
    assert!(vocab.len() <= 200);
    for ex in &a {
        let k = ex.num_records();
        assert!((spec.k_min..=spec.k_max).contains(&k));
        assert_eq!(ex.records[0].0, "name");
        let mut next = 0;
        let mut seen = vec![false; k + 1];
        for &[s, e, j] in &ex.gold_segments {
            assert_eq!(s, next);
            assert!(e > s && e - s <= spec.max_seg_len);
            assert!(!seen[j]);
            seen[j] = true;
            let (slot, value) = &ex.records[j - 1];
            assert!(segment_faithful(slot, value, &ex.text[s..e]), "{slot}={value}: {:?}", &ex.text[s..e]);
            next = e;
        }
        assert_eq!(next, ex.text.len());
        assert!(seen[1..].iter().all(|&x| x));
        assert!(ex.text.iter().all(|t| vocab.id(t) != UNK));
    }
    assert!(synth_data(&spec, 0, 0).is_err());
    assert!(synth_data(&SynthSpec { k_min: 0, ..spec.clone() }, 0, 1).is_err());
    assert!(synth_data(&SynthSpec { max_seg_len: 3, ..spec }, 0, 1).is_err());
}

#[test]
fn corpus_and_vocab_serialize() {
    let ex = synth_data(&SynthSpec::default(), 32, 5).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&ex, &mut buf).unwrap();
    assert_eq!(read_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap(), ex);
    let vocab = Vocab::synthetic();
    let back: Vocab = serde_json::from_str(&serde_json::to_string(&vocab).unwrap()).unwrap();
    assert_eq!(back, vocab);
    assert_eq!(back.id("aromi"), vocab.id("aromi"));
    assert_ne!(back.id("aromi"), UNK);
    assert!(serde_json::from_str::<Vocab>(r#"["a","b"]"#).is_err());
}

#[test]
fn record_sets_enforce_their_invariants() {
    let rec = |s: &str| Record { slot: s.into(), slot_id: 3, value: vec![5] };
    assert!(RecordSet::new(vec![]).is_err());
    assert!(RecordSet::new(vec![rec("a"), rec("a")]).is_err());
    assert!(RecordSet::new((0..9).map(|i| rec(&format!("s{i}"))).collect()).is_err());
    assert!(RecordSet::new(vec![Record { slot: "a".into(), slot_id: 3, value: vec![] }]).is_err());
    let rs = RecordSet::new(vec![rec("a"), Record { slot: "b".into(), slot_id: 4, value: vec![6, 7] }]).unwrap();
    let (toks, spans) = rs.flatten();
    assert_eq!(toks, vec![3, 5, 4, 6, 7]);
    assert_eq!(spans, vec![0..2, 2..5]);
}

#[test]
fn faithfulness_rules() {
    let s = |x: &str| x.split_whitespace().map(String::from).collect::<Vec<_>>();
    assert!(segment_faithful("near", "burger king", &s("close to burger king ,")));
    assert!(!segment_faithful("near", "burger king", &s("close to burger")));
    assert!(segment_faithful("family", "no", &s("no kids allowed")));
    assert!(!segment_faithful("family", "yes", &s("it is not family friendly")));
    assert!(segment_faithful("family", "yes", &s("kids are welcome")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gold_segments_tile_every_text(seed in 0u64..10_000) {
        let ex = &synth_data(&SynthSpec::default(), seed, 1).unwrap()[0];
        let lens: usize = ex.gold_segments.iter().map(|g| g[1] - g[0]).sum();
        prop_assert_eq!(lens, ex.text.len());
        prop_assert_eq!(ex.gold_segments.len(), ex.num_records());
        prop_assert_eq!(ex.text.last().map(String::as_str), Some("."));
    }
}

#[test]
fn alignment_rows_are_posteriors() {
    let vocab = Vocab::synthetic();
    let ex = synth_data(&SynthSpec::default(), 21, 3).unwrap();
    let model = SegModel::new(SegModelConfig { hidden: 8, embed: 8, ..SegModelConfig::default() }, vocab, 1).unwrap();
    let mut counts = [0usize; 3];
    for e in &ex {
        let rs = model.vocab.record_set(&e.records).unwrap();
        let dec = constrained_decode(&model, &rs, &DecodeOptions::default()).unwrap();
        let trace = trace_alignment(&model, &rs, &dec).unwrap();
        assert_eq!(trace.iter().map(|s| s.tokens.len()).sum::<usize>(), dec.tokens.len());
        let mut seen = vec![0; rs.len() + 1];
        for seg in &trace {
            seen[seg.record] += 1;
            for t in &seg.tokens {
                assert_eq!(t.positions.len(), seg.source.len());
                assert!((t.gen + t.positions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if seg.record == 0 {
                    assert_eq!(t.gen, 1.0);
                }
            }
        }
        assert!(seen[1..].iter().all(|&c| c == 1));
        let (path, c) = reference_boundaries(&model, &rs, e).unwrap();
        assert!(path.is_valid(e.text.len(), model.cfg.max_seg_len));
        assert_eq!(c[2], e.gold_segments.len() - 1);
        for i in 0..3 {
            counts[i] += c[i];
        }
    }
    let f1 = boundary_f1(counts);
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(boundary_f1([0, 0, 0]), 1.0);
    assert_eq!(boundary_f1([0, 3, 2]), 0.0);
    assert_eq!(boundary_f1([2, 2, 2]), 1.0);
}
