mod common;

use aaw_core::kernels::{conv2d_forward, ConvSpec};
use aaw_core::nn::{Init, Layer};
use aaw_core::wavelet::WtConv;
use aaw_core::zoo::model::{build_variant, ModelConfig, RawOutputs, ScaleOutput, SegModel, Variant};
use aaw_core::zoo::{decode, nms, wtc2f, C2f, Detection, WaveletConfig};
use aaw_core::{Error, Graph, ParamStore, Shape4, Tensor4};
use common::{rand_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

fn image(hw: usize, seed: u64) -> Tensor4 {
    let t = rand_tensor(Shape4::new(1, 3, hw, hw), &mut rng(seed));
    Tensor4::from_fn(t.shape(), |n, c, y, x| 0.5 + 0.5 * t.at(n, c, y, x))
}

#[test]
fn output_shapes_at_64_pixels() {
    for v in Variant::ALL {
        let m = SegModel::new(v, ModelConfig::default(), 0).unwrap();
        let out = m.forward(&image(64, 1)).unwrap();
        let grids: Vec<_> = out.scales.iter().map(|s| (s.stride, s.map.shape())).collect();
        assert_eq!(
            grids,
            vec![(8, Shape4::new(1, 21, 8, 8)), (16, Shape4::new(1, 21, 4, 4))],
            "{v}"
        );
        assert_eq!(out.protos.shape(), Shape4::new(1, 8, 16, 16));
    }
}

#[test]
fn doubling_input_doubles_grids() {
    let m = build_variant("aaw", 0).unwrap();
    let a = m.forward(&image(32, 2)).unwrap();
    let b = m.forward(&image(64, 2)).unwrap();
    for (sa, sb) in a.scales.iter().zip(&b.scales) {
        assert_eq!(2 * sa.map.shape().h, sb.map.shape().h);
        assert_eq!(2 * sa.map.shape().w, sb.map.shape().w);
    }
    assert_eq!(2 * a.protos.shape().h, b.protos.shape().h);
}

#[test]
fn indivisible_input_rejected() {
    let m = build_variant("baseline", 0).unwrap();
    let err = m.forward(&image(40, 3)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn forward_is_deterministic() {
    let a = build_variant("aa_wt", 5).unwrap();
    let b = build_variant("aa_wt", 5).unwrap();
    assert_eq!(a.store, b.store);
    let x = image(32, 4);
    let (ya, yb) = (a.forward(&x).unwrap(), a.forward(&x).unwrap());
    assert_eq!(ya, yb);
    assert_eq!(ya, b.forward(&x).unwrap());
}

#[test]
fn baseline_and_aaw_differ_in_size() {
    let a = build_variant("baseline", 0).unwrap().param_count();
    let b = build_variant("aaw", 0).unwrap().param_count();
    assert_ne!(a, b);
}

#[test]
fn stage_kinds_match_golden_table() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/variant_blocks.txt")).unwrap();
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let m = SegModel::new(v, ModelConfig::default(), 0).unwrap();
        for (i, st) in m.stages.iter().enumerate() {
            rows.push(format!("{} {} {} {}", v.name(), i + 1, st.down.kind().as_str(), st.block.kind().as_str()));
        }
    }
    let golden: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).collect();
    assert_eq!(rows, golden);
}

#[test]
fn variant_names_round_trip_and_unknown_lists_valid() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    let msg = build_variant("yolo", 0).unwrap_err().to_string();
    for v in Variant::ALL {
        assert!(msg.contains(v.name()), "{msg}");
    }
}

#[test]
fn head_weights_are_interchangeable() {
    let donor = build_variant("aaw", 9).unwrap();
    let x = image(32, 6);
    for v in Variant::ALL {
        let mut m = SegModel::new(v, ModelConfig::default(), 1).unwrap();
        let mut copied = 0;
        for (_, p) in donor.store.iter().filter(|(_, p)| p.id.starts_with("head.") || p.id.starts_with("neck.")) {
            let id = m.store.lookup(&p.id).unwrap();
            assert_eq!(m.store.get(id).value.shape(), p.value.shape());
            m.store.get_mut(id).value = p.value.clone();
            copied += 1;
        }
        assert!(copied > 0);
        assert!(m.forward(&x).is_ok(), "{v}");
    }
}

fn perturbed(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
}

fn run(store: &ParamStore, layer: &impl Layer, x: &Tensor4) -> Tensor4 {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = layer.forward(&mut g, store, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn wtc2f_preserves_shape() {
    let mut store = ParamStore::new();
    let block = wtc2f(&mut Init::new(&mut store, &mut rng(7)), "b", 8, 8, 1, WaveletConfig::default()).unwrap();
    let x = rand_tensor(Shape4::new(2, 8, 12, 12), &mut rng(8));
    assert_eq!(run(&store, &block, &x).shape(), x.shape());
}

#[test]
fn wtc2f_with_silent_subbands_equals_plain_c2f() {
    let wl = WaveletConfig::default();
    let mut ws = ParamStore::new();
    let wt_block = wtc2f(&mut Init::new(&mut ws, &mut rng(10)), "b", 4, 4, 1, wl).unwrap();
    perturbed(&mut ws, 11);
    let mut ps = ParamStore::new();
    let plain = C2f::new(&mut Init::new(&mut ps, &mut rng(12)), "b", 4, 4, 1, None).unwrap();
    for p in ps.iter_mut() {
        let src = ws.lookup(&p.id).unwrap();
        p.value = ws.get(src).value.clone();
    }
    let wt: &WtConv = wt_block.spatial.as_ref().unwrap();
    for &s in &wt.subbands {
        let shape = ws.get(s).value.shape();
        ws.get_mut(s).value = Tensor4::zeros(shape);
    }
    let x = rand_tensor(Shape4::new(1, 4, 8, 8), &mut rng(13));

    // Random base: the head reduces to its depthwise conv.
    let base = ws.get(wt.base).value.clone();
    let pre = conv2d_forward(&x, &base, None, ConvSpec::new(1, 1, 4)).unwrap();
    assert!(run(&ws, &wt_block, &x).max_abs_diff(&run(&ps, &plain, &pre)) < 1e-12);

    // Identity base: the whole block is the plain C2F.
    ws.get_mut(wt.base).value = Tensor4::from_fn(base.shape(), |_, _, y, xx| f64::from(u8::from(y == 1 && xx == 1)));
    assert!(run(&ws, &wt_block, &x).max_abs_diff(&run(&ps, &plain, &x)) < 1e-12);
}

fn blank_raw(hw: usize) -> RawOutputs {
    let cfg = ModelConfig::default();
    let scales = [8usize, 16]
        .map(|s| ScaleOutput {
            stride: s,
            map: Tensor4::full(Shape4::new(1, cfg.cell_channels(), hw / s, hw / s), -40.0),
        })
        .to_vec();
    RawOutputs {
        scales,
        protos: Tensor4::full(Shape4::new(1, cfg.num_protos, hw / 4, hw / 4), 1.0),
        config: cfg,
    }
}

#[test]
fn saturated_negative_logits_decode_to_nothing() {
    let raw = blank_raw(64);
    assert_eq!(decode(&raw, 0.25, 0.5).unwrap(), vec![vec![]]);
    assert_eq!(decode(&raw, 0.0, 0.5).unwrap()[0].len(), 0, "boxes collapse to nothing");
}

#[test]
fn one_hot_cell_decodes_by_hand() {
    let mut raw = blank_raw(64);
    let (gy, gx, class) = (3, 5, 6);
    let map = &mut raw.scales[0].map;
    map.set(0, class, gy, gx, 2.0);
    for i in 0..4 {
        map.set(0, 9 + i, gy, gx, 0.0);
    }
    map.set(0, 13, gy, gx, 1.0);
    for p in 1..8 {
        map.set(0, 13 + p, gy, gx, 0.0);
    }
    let out = decode(&raw, 0.25, 0.5).unwrap();
    assert_eq!(out[0].len(), 1);
    let inst = &out[0][0];
    assert_eq!(inst.class_id, class);
    assert!((inst.score - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    let half = 8.0 * 2f64.ln();
    let (cx, cy) = (44.0, 28.0);
    let want = [cx - half, cy - half, cx + half, cy + half];
    for (a, b) in inst.bbox.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    // Positive logits everywhere: the mask is every pixel whose center lies in the box.
    let mut expected = 0;
    for y in 0..64 {
        for x in 0..64 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = px >= want[0] && px < want[2] && py >= want[1] && py < want[3];
            assert_eq!(inst.mask.get(y, x), inside);
            expected += usize::from(inside);
        }
    }
    assert_eq!(inst.mask.count(), expected);
}

#[test]
fn thresholds_outside_unit_interval_rejected() {
    let raw = blank_raw(32);
    assert!(decode(&raw, 1.5, 0.5).is_err());
    assert!(decode(&raw, 0.5, -0.1).is_err());
}

fn det(class_id: usize, score: f64, bbox: [f64; 4]) -> Detection {
    Detection {
        class_id,
        score,
        bbox,
        coeffs: vec![],
    }
}

#[test]
fn identical_candidates_collapse_to_one() {
    let d = det(2, 0.7, [3.0, 4.0, 20.0, 18.0]);
    assert_eq!(nms(vec![d.clone(), d.clone()], 0.5), vec![d]);
}

fn arb_det() -> impl Strategy<Value = Detection> {
    (0usize..3, 0u8..5, 0u8..12, 0u8..12, 1u8..8, 1u8..8).prop_map(|(c, s, x, y, w, h)| {
        det(c, f64::from(s) / 4.0, [f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h)])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn nms_ignores_candidate_order(dets in prop::collection::vec(arb_det(), 0..12), seed in any::<u64>()) {
        let mut shuffled = dets.clone();
        let mut r = rng(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        prop_assert_eq!(nms(dets, 0.5), nms(shuffled, 0.5));
    }

    #[test]
    fn raising_threshold_never_adds_instances(seed in any::<u64>(), lo in 0.0f64..0.9, step in 0.0f64..0.5) {
        let mut raw = blank_raw(32);
        let mut r = rng(seed);
        for s in &mut raw.scales {
            for v in s.map.data_mut() {
                *v = r.random_range(-3.0..3.0);
            }
        }
        let hi = (lo + step).min(1.0);
        let a = decode(&raw, lo, 0.5).unwrap().remove(0);
        let b = decode(&raw, hi, 0.5).unwrap().remove(0);
        prop_assert!(b.len() <= a.len());
        for inst in &b {
            prop_assert!(a.contains(inst));
        }
    }
}
