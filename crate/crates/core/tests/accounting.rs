use std::collections::BTreeMap;

use frozenformer::accounting::{budget_of, count_budget, presets, ratio_table, RatioQuery};
use frozenformer::freezing::{FreezeEntry, FreezeSpec, Path, Selector};
use frozenformer::model::{param_specs, DecoderSelfKind, Group, Mode, ModelConfig, Transformer};
use proptest::prelude::*;

fn preset(name: &str) -> ModelConfig {
    presets::get(name)
        .unwrap_or_else(|| panic!("no preset {name}"))
        .config
}

fn ratio(name: &str, spec: &str) -> f64 {
    count_budget(&preset(name), &spec.parse().unwrap())
        .unwrap()
        .ratio
}

/// Group sizes straight from the architecture formulas.
fn closed_form(c: &ModelConfig) -> BTreeMap<Group, usize> {
    let (d, ff, h) = (c.d_model, c.d_ff, c.n_heads);
    let (kq, v) = (h * c.head_dim_kq(), h * c.head_dim_v());
    let att_w = 2 * kq * d + 2 * v * d;
    let att_b = 2 * kq + v + d;
    let ffn_w = 2 * d * ff;
    let ffn_b = ff + d;
    let norm = 2 * d;
    let ctx = usize::from(c.mode == Mode::Translation);
    let (self_w, self_b) = match c.decoder_self {
        DecoderSelfKind::Attention => (att_w, att_b),
        DecoderSelfKind::Ssru => (2 * d * d, d),
    };
    let (e, n) = (c.n_enc_layers, c.n_dec_layers);
    let att = e * att_w + n * (self_w + ctx * att_w);
    let ffn = (e + n) * ffn_w;
    let other = e * (att_b + ffn_b + 2 * norm)
        + n * (self_b + ctx * (att_b + norm) + ffn_b + 2 * norm)
        + usize::from(e > 0) * norm
        + norm;
    BTreeMap::from([
        (Group::Emb, c.vocab_size * d),
        (Group::Att, att),
        (Group::Ffn, ffn),
        (Group::Other, other),
    ])
}

#[test]
fn registry_counts_equal_closed_form_for_every_preset() {
    for p in presets::all() {
        let b = count_budget(&p.config, &FreezeSpec::none()).unwrap();
        assert_eq!(b.per_group, closed_form(&p.config), "preset {}", p.name);
        assert_eq!(b.per_group.values().sum::<usize>(), b.total);
        assert_eq!(b.ratio, 1.0);
    }
}

#[test]
fn counting_matches_a_built_model() {
    let cfg = ModelConfig {
        vocab_size: 50,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        d_kq: Some(3),
        d_v: Some(5),
        n_enc_layers: 2,
        n_dec_layers: 1,
        mode: Mode::Translation,
        max_len: 8,
        decoder_self: DecoderSelfKind::Attention,
    };
    let m = Transformer::build(cfg.clone(), 0).unwrap();
    let spec: FreezeSpec = "att.self,ffn.dec".parse().unwrap();
    assert_eq!(
        budget_of(m.params().as_slice(), &spec).unwrap(),
        count_budget(&cfg, &spec).unwrap()
    );
    assert_eq!(m.params().count_by_group(), closed_form(&cfg));
}

#[test]
fn frozen_ffn_on_big() {
    assert!((ratio("big", "ffn") - 0.52).abs() <= 0.02);
}

#[test]
fn narrow_attention_alone_is_about_six_percent() {
    assert!((ratio("big-att8", "emb,ffn") - 0.06).abs() <= 0.01);
}

#[test]
fn student_frozen_embeddings_and_size() {
    let b = count_budget(&preset("student"), &"emb".parse().unwrap()).unwrap();
    assert!((b.ratio - 0.51).abs() <= 0.02, "ratio {}", b.ratio);
    assert!(
        (b.total as f64 / 16.9e6 - 1.0).abs() <= 0.02,
        "total {}",
        b.total
    );
}

#[test]
fn frozen_embeddings_on_big_is_point_82() {
    assert!((ratio("big", "emb") - 0.82).abs() <= 0.02);
}

#[test]
fn freezing_everything_but_other_leaves_under_one_percent() {
    for p in presets::all() {
        let b = count_budget(&p.config, &"emb,att,ffn".parse().unwrap()).unwrap();
        assert!(b.ratio < 0.01, "{}: {}", p.name, b.ratio);
        assert_eq!(b.trainable, b.per_group[&Group::Other]);
    }
}

#[test]
fn table1_grid_renders_all_rows() {
    let expected = [
        ("none", 1.0),
        ("emb", 0.82),
        ("att", 0.64),
        ("ffn", 0.52),
        ("emb,ffn", 0.35),
        ("emb,att", 0.47),
        ("att,ffn", 0.17),
    ];
    let grid: Vec<RatioQuery> = expected
        .iter()
        .map(|(s, e)| RatioQuery {
            preset: "big".into(),
            config: preset("big"),
            spec: s.parse().unwrap(),
            expected: Some(*e),
        })
        .collect();
    let table = ratio_table(&grid).unwrap();
    assert_eq!(table.rows.len(), 7);
    assert!(
        table.rows.iter().all(|r| r.within(0.02)),
        "{}",
        table.to_text()
    );
    let csv = table.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.starts_with("preset,spec,total,trainable,ratio,expected,abs_delta\n"));
    assert!(table.to_text().lines().nth(1).unwrap().starts_with("big"));
}

#[test]
fn empty_grid_gives_empty_table() {
    let t = ratio_table(&[]).unwrap();
    assert!(t.rows.is_empty());
    assert_eq!(t.to_csv().unwrap().lines().count(), 1);
}

#[test]
fn per_selector_counts_add_up() {
    let b = count_budget(&preset("base"), &"emb,att.enc".parse().unwrap()).unwrap();
    assert_eq!(b.per_selector["emb"], b.per_group[&Group::Emb]);
    assert_eq!(
        b.total - b.trainable,
        b.per_selector.values().sum::<usize>()
    );
}

fn any_path() -> impl Strategy<Value = Path> {
    prop::sample::select(Path::ALL.to_vec())
}

proptest! {
    #[test]
    fn adding_a_disjoint_selector_never_raises_the_ratio(
        a in any_path(), b in any_path(), which in 0usize..9, neg in any::<bool>()
    ) {
        let cfg = &presets::all()[which].config;
        let specs = param_specs(cfg).unwrap();
        let sa = FreezeSpec::new(vec![FreezeEntry::new(Selector::new(a))]);
        let sel_b = if neg { Selector::new(b).negate() } else { Selector::new(b) };
        let sb = FreezeSpec::new(vec![FreezeEntry::new(sel_b)]);
        let both = sa.clone().with(FreezeEntry::new(sel_b));
        let (ra, rb) = (budget_of(&specs, &sa), budget_of(&specs, &sb));
        match (ra, rb, budget_of(&specs, &both)) {
            (Ok(ra), Ok(rb), Ok(rab)) => {
                prop_assert!(rab.ratio <= ra.ratio.min(rb.ratio));
                prop_assert_eq!(rab.trainable + (ra.total - ra.trainable) + (rb.total - rb.trainable), ra.total);
            }
            // Overlapping or empty selections are rejected, not counted.
            (_, _, Err(_)) => {}
            (ra, rb, Ok(_)) => prop_assert!(false, "union resolved but a part failed: {:?} {:?}", ra.err(), rb.err()),
        }
    }
}
