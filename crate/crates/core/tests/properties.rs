use std::sync::Arc;

use proptest::prelude::*;

use seraser_core::auxiliary::{corner_patches, extract_background, extract_foreground, shuffle_patches};
use seraser_core::baselines::{mask_predict, retained_view_count, tpt_predict, vanilla_predict, TptConfig};
use seraser_core::dist::{argmax_predict, softmax_from_similarities, SimilarityVector};
use seraser_core::evaluation::{GroupReport, Method, SampleRecord};
use seraser_core::image::{ForegroundMask, Image, MaskProvenance};
use seraser_core::model::{PromptContext, ToyWorld, ToyWorldSpec, VisionLanguageModel};
use seraser_core::zeroshot::ZeroShot;

fn image_strategy() -> impl Strategy<Value = Image> {
    proptest::collection::vec(0u8..=255, 64 * 64 * 3).prop_map(|b| Image::from_u8(64, 64, 3, &b).unwrap())
}

fn world() -> &'static ToyWorld {
    use std::sync::OnceLock;
    static W: OnceLock<ToyWorld> = OnceLock::new();
    W.get_or_init(|| ToyWorld::new(ToyWorldSpec::default()).unwrap())
}

fn random_prompt(seed: u64, scale: f64) -> PromptContext {
    let base = world().model().initial_prompt(seed);
    let ctx = base
        .context()
        .iter()
        .map(|v| v.iter().map(|x| x * scale).collect())
        .collect();
    PromptContext::new(ctx, Arc::new(base.class_tokens().to_vec())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embeddings_are_unit_norm(x in image_strategy(), seed in any::<u64>(), scale in 0.0f64..50.0) {
        let m = world().model();
        prop_assert!((m.encode_image(&x).unwrap().norm() - 1.0).abs() <= 1e-9);
        let p = random_prompt(seed, scale);
        for k in 0..m.num_classes() {
            prop_assert!((m.encode_text(&p, k).unwrap().norm() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn background_and_foreground_are_complementary(
        x in image_strategy(),
        y0 in 0usize..60, x0 in 0usize..60, h in 1usize..30, w in 1usize..30,
    ) {
        let mask = ForegroundMask::from_box(64, 64, (y0, x0, y0 + h, x0 + w), MaskProvenance::File);
        let bg = extract_background(&x, &mask).unwrap().images.remove(0);
        let fg = extract_foreground(&x, &mask).unwrap();
        for yy in 0..64 {
            for xx in 0..64 {
                let inside = mask.get(yy, xx);
                for c in 0..3 {
                    let o = x.get(yy, xx, c);
                    prop_assert_eq!(bg.get(yy, xx, c), if inside { 0.0 } else { o });
                    prop_assert_eq!(fg.get(yy, xx, c), if inside { o } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn shuffle_preserves_multiset_and_is_seeded(x in image_strategy(), seed in any::<u64>()) {
        let a = shuffle_patches(&x, seed).unwrap();
        let b = shuffle_patches(&x, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.images[0].sorted_values(), x.sorted_values());
    }

    #[test]
    fn corner_tiles_are_exact(x in image_strategy()) {
        let c = corner_patches(&x, (8, 8)).unwrap();
        for (img, (y, xo)) in c.images.iter().zip([(0, 0), (0, 56), (56, 0), (56, 56)]) {
            prop_assert_eq!(img, &x.crop(y, xo, 8, 8).unwrap());
        }
    }

    #[test]
    fn retained_views_are_ceiling(rho in 0.001f64..=1.0, n in 1usize..200) {
        let k = retained_view_count(rho, n);
        let exact = rho * n as f64;
        prop_assert!(k >= 1 && k <= n);
        prop_assert!(k as f64 + 1e-9 >= exact && (k as f64) < exact + 1.0);
    }

    #[test]
    fn full_mask_equals_vanilla(x in image_strategy(), seed in any::<u64>()) {
        let m = world().model();
        let zs = ZeroShot::new(m.as_ref(), 0.01).unwrap();
        let p = m.initial_prompt(seed);
        let full = ForegroundMask::from_box(64, 64, (0, 0, 64, 64), MaskProvenance::File);
        prop_assert_eq!(mask_predict(&zs, &p, &x, &full).unwrap(), vanilla_predict(&zs, &p, &x).unwrap());
    }

    #[test]
    fn argmax_ties_take_lowest_index(k in 2usize..10, hi in 0usize..10, dup in 0usize..10, tau in 1e-3f64..1.0) {
        let (hi, dup) = (hi % k, dup % k);
        let mut sims = vec![0.0; k];
        sims[hi] = 0.5;
        sims[dup] = 0.5;
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let d = softmax_from_similarities(&SimilarityVector::new(sims, tau).unwrap(), &labels).unwrap();
        prop_assert_eq!(argmax_predict(&d), labels[hi.min(dup)].as_str());
    }

    #[test]
    fn report_invariants(outcomes in proptest::collection::vec((0usize..5, any::<bool>()), 1..200)) {
        let records: Vec<SampleRecord> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &(g, ok))| SampleRecord {
                id: format!("s{i:04}"),
                group: format!("g{g}"),
                label: "a".into(),
                predicted: Some(if ok { "a" } else { "b" }.into()),
                probs: None,
                error: None,
                eraser: None,
                tpt: None,
            })
            .collect();
        let r = GroupReport::from_records(Method::Vanilla, "toy".into(), 0, "f".into(), records).unwrap();
        prop_assert!(r.worst_group_accuracy <= r.avg_accuracy);
        prop_assert_eq!(r.per_group.values().map(|g| g.total).sum::<usize>(), r.n);
        for g in r.per_group.values() {
            prop_assert!((0.0..=1.0).contains(&g.accuracy));
        }
        prop_assert!(r.validate("prop").is_ok());
    }
}

#[test]
fn tpt_leaves_model_and_prompt_untouched() {
    let w = world();
    let m = w.model();
    let fp = m.fingerprint();
    let zs = ZeroShot::new(m.as_ref(), 0.01).unwrap();
    let p = m.initial_prompt(3);
    let before = p.clone();
    for s in w.samples().iter().take(5) {
        tpt_predict(&zs, &p, &s.image, &TptConfig::default(), &s.id).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(m.fingerprint(), fp);
}

#[test]
fn toy_world_is_deterministic() {
    let a = ToyWorld::new(ToyWorldSpec::default()).unwrap();
    let b = ToyWorld::new(ToyWorldSpec::default()).unwrap();
    assert_eq!(a.model().fingerprint(), b.model().fingerprint());
    let (sa, sb) = (a.samples(), b.samples());
    assert_eq!(sa.len(), sb.len());
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image.to_u8(), y.image.to_u8());
        assert_eq!(x.mask, y.mask);
    }
    let c = ToyWorld::new(ToyWorldSpec {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    assert_ne!(a.model().fingerprint(), c.model().fingerprint());
}
