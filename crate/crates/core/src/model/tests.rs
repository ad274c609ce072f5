use super::*;
use crate::numerics::Graph;

fn micro() -> ModelConfig {
    ModelConfig {
        codebook_size: 8,
        grid_height: 3,
        grid_width: 3,
        num_classes: 3,
        mlp_ratio: 2,
        ..ModelConfig::disentangled(2, 1, 8, 2)
    }
}

fn tokens(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 5 + 1) % k).collect()
}

fn mat(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let mut y = mm(x, &mat(w));
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    y
}

/// Loop-level multi-head attention written from scratch.
fn attention_oracle(
    m: &NatModel<f64>,
    ids: &AttnIds,
    q_in: &[Vec<f64>],
    kv_in: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let p = m.params();
    let q = affine(q_in, &p[ids.wq], &p[ids.bq]);
    let k = affine(kv_in, &p[ids.wk], &p[ids.bk]);
    let v = affine(kv_in, &p[ids.wv], &p[ids.bv]);
    let h = m.config().n_heads;
    let dh = m.config().head_dim();
    let mut out = vec![vec![0.0; h * dh]; q.len()];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    affine(&out, &p[ids.wo], &p[ids.bo])
}

fn rand_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..d)
                .map(|j| (((i * 31 + j * 7) as u64 + seed) as f64 * 0.37).sin())
                .collect()
        })
        .collect()
}

fn to_var(g: &mut Graph<'_, f64>, rows: &[Vec<f64>]) -> crate::numerics::Var {
    let d = rows.first().map_or(0, Vec::len);
    g.constant(rows.len(), d, rows.concat()).unwrap()
}

#[test]
fn attention_matches_loop_oracle() {
    let m = NatModel::<f64>::new(micro(), 3).unwrap();
    let ids = m.ids().encoder[0].attn;
    let x = rand_rows(4, 8, 1);
    let c = rand_rows(3, 8, 2);
    let mut g = m.graph();
    let xv = to_var(&mut g, &x);
    let cv = to_var(&mut g, &c);
    let out = m.sc_attention(&mut g, &ids, xv, cv).unwrap();
    let kv: Vec<Vec<f64>> = x.iter().chain(&c).cloned().collect();
    let expect = attention_oracle(&m, &ids, &x, &kv);
    for (a, e) in g.value(out).iter().zip(expect.concat()) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn sc_attention_with_empty_context_is_self_attention() {
    let m = NatModel::<f32>::new(micro(), 4).unwrap();
    let ids = m.ids().decoder[0].attn;
    let mut g = m.graph();
    let x = g
        .constant(3, 8, (0..24).map(|i| (i as f32 * 0.3).cos()).collect())
        .unwrap();
    let empty = g.constant(0, 8, vec![]).unwrap();
    let a = m.sc_attention(&mut g, &ids, x, empty).unwrap();
    let b = m.self_attention(&mut g, &ids, x).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn single_key_attention_returns_projected_value() {
    let m = NatModel::<f64>::new(micro(), 5).unwrap();
    let ids = m.ids().encoder[0].attn;
    let x = rand_rows(2, 8, 3);
    let kv = rand_rows(1, 8, 9);
    let mut g = m.graph();
    let xv = to_var(&mut g, &x);
    let kvv = to_var(&mut g, &kv);
    let out = m.attention(&mut g, &ids, xv, kvv, None).unwrap();
    let p = m.params();
    let v = affine(&kv, &p[ids.wv], &p[ids.bv]);
    let expect = affine(&v, &p[ids.wo], &p[ids.bo]);
    for r in 0..2 {
        for c in 0..8 {
            assert!((g.value(out)[r * 8 + c] - expect[0][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_shapes() {
    let cfg = micro();
    let m = NatModel::<f32>::new(cfg.clone(), 1).unwrap();
    let n = cfg.num_tokens();
    let mask = MaskState::from_masked((0..n).map(|i| i % 3 == 0).collect());
    let mut g = m.graph();
    let out = m.forward_default(&mut g, &tokens(n, 8), &mask, 1).unwrap();
    assert_eq!(g.shape(out.logits), (3, 8));
    assert_eq!(out.predicted_positions, vec![0, 3, 6]);
    assert_eq!(g.shape(out.visible_features), (6, 8));
    let full = m.full_features(&mut g, &out).unwrap();
    assert_eq!(g.shape(full), (n, 8));
}

#[test]
fn forward_rejects_bad_inputs() {
    let cfg = micro();
    let m = NatModel::<f32>::new(cfg.clone(), 1).unwrap();
    let n = cfg.num_tokens();
    let mask = MaskState::all_masked(n);
    let mut g = m.graph();
    assert!(m.forward_default(&mut g, &tokens(n, 8), &mask, 3).is_err());
    let mut t = tokens(n, 8);
    t[0] = 8;
    let mask = MaskState::from_masked(vec![false; n]);
    assert!(m.forward_default(&mut g, &t, &mask, 0).is_err());
}

#[test]
fn all_masked_decodes_from_start_token() {
    let cfg = micro();
    let m = NatModel::<f32>::new(cfg.clone(), 1).unwrap();
    let n = cfg.num_tokens();
    let mut g = m.graph();
    let out = m
        .forward_default(&mut g, &tokens(n, 8), &MaskState::all_masked(n), 0)
        .unwrap();
    assert_eq!(g.shape(out.logits), (n, 8));
    assert!(g.value(out.logits).iter().all(|v| v.is_finite()));
}

#[test]
fn reuse_with_empty_cache_matches_default_bitwise() {
    for layer in [ReuseLayer::LastLayer, ReuseLayer::LayerToLayer] {
        let cfg = ModelConfig {
            reuse_layer: layer,
            ..micro()
        };
        let m = NatModel::<f32>::new(cfg.clone(), 8).unwrap();
        let n = cfg.num_tokens();
        let mask = MaskState::from_masked((0..n).map(|i| i % 2 == 0).collect());
        let t = tokens(n, 8);
        let mut g = m.graph();
        let a = m.forward_default(&mut g, &t, &mask, 2).unwrap();
        let layers = if layer == ReuseLayer::LastLayer {
            1
        } else {
            cfg.n_enc + 1
        };
        let empty = g.constant(0, 8, vec![]).unwrap();
        let prev = PrevFeatures {
            positions: vec![],
            layers: vec![empty; layers],
        };
        let b = m
            .forward_reuse(&mut g, &t, &mask, 2, &prev, &mask.visible_positions())
            .unwrap();
        assert_eq!(g.value(a.logits), g.value(b.logits));
        assert_eq!(g.value(a.visible_features), g.value(b.visible_features));
    }
}

#[test]
fn reuse_step_uses_cache() {
    let cfg = micro();
    let m = NatModel::<f32>::new(cfg.clone(), 8).unwrap();
    let n = cfg.num_tokens();
    let t = tokens(n, 8);
    let s0 = MaskState::all_masked(n).reveal(&[1, 4]).unwrap();
    let mut g = m.graph();
    let first = m.forward_default(&mut g, &t, &s0, 0).unwrap();
    let s1 = s0.reveal(&[2, 7]).unwrap();
    let out = m
        .forward_reuse(
            &mut g,
            &t,
            &s1,
            0,
            &first.reuse_cache,
            &s1.newly_decoded_positions(),
        )
        .unwrap();
    assert_eq!(g.shape(out.logits), (n - 4, 8));
    assert_eq!(out.reuse_cache.positions, vec![1, 2, 4, 7]);
    // positions missing from both the cache and the delta are rejected
    assert!(m
        .forward_reuse(&mut g, &t, &s1, 0, &first.reuse_cache, &[2])
        .is_err());
}

#[test]
fn baseline_all_interactions_equals_plain() {
    let cfg = ModelConfig {
        codebook_size: 8,
        grid_height: 3,
        grid_width: 3,
        num_classes: 3,
        ..ModelConfig::baseline(2, 8, 2)
    };
    let m = NatModel::<f32>::new(cfg.clone(), 2).unwrap();
    let n = cfg.num_tokens();
    let mask = MaskState::from_masked((0..n).map(|i| i < 4).collect());
    let t = tokens(n, 8);
    let mut g = m.graph();
    let a = m.forward_baseline(&mut g, &t, &mask, 1).unwrap();
    let b = m.forward_baseline_with(&mut g, &t, &mask, 1, None).unwrap();
    assert_eq!(g.value(a.logits), g.value(b.logits));
    assert_eq!(g.shape(a.logits), (n, 8));
}

#[test]
fn baseline_empty_row_is_reported() {
    let cfg = ModelConfig {
        codebook_size: 8,
        grid_height: 3,
        grid_width: 3,
        num_classes: 3,
        interactions: InteractionMask {
            m_to_m: false,
            m_to_v: false,
            ..InteractionMask::ALL
        },
        ..ModelConfig::baseline(1, 8, 2)
    };
    let m = NatModel::<f32>::new(cfg.clone(), 2).unwrap();
    let n = cfg.num_tokens();
    let mask = MaskState::from_masked((0..n).map(|i| i >= 2).collect());
    let mut g = m.graph();
    let err = m
        .forward_baseline(&mut g, &tokens(n, 8), &mask, 0)
        .unwrap_err();
    assert!(
        matches!(err, crate::error::Error::EmptyAttentionRow { row: 2 }),
        "{err}"
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = NatModel::<f32>::new(micro(), 11).unwrap();
    let ck = Checkpoint::new(m, None, 42);
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    let back = Checkpoint::<f32>::read(&buf[..]).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.model.config(), ck.model.config());
    for (a, b) in back.model.params().iter().zip(ck.model.params()) {
        assert_eq!(a.data(), b.data());
    }
    let mut bad = buf.clone();
    bad[4] = 9;
    assert!(matches!(
        Checkpoint::<f32>::read(&bad[..]),
        Err(crate::error::Error::Version { found: 9, .. })
    ));
    assert!(Checkpoint::<f64>::read(&buf[..]).is_err());
}

#[test]
fn param_count_matches_layout() {
    let cfg = micro();
    let m = NatModel::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(m.num_params(), layout_param_count(&cfg).unwrap());
}
