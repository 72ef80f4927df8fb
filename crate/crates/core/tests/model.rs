mod common;

use common::{tiny_config, toy_library, toy_query};
use proptest::prelude::*;
use taco_core::model::{causal_mask, load_checkpoint, save_checkpoint, Checkpoint, ForwardOptions, ModelConfig};
use taco_core::numerics::{Graph, Rng, Tensor};
use taco_core::{Error, TacoModel};

const D: usize = 8;

/// The same network without task-aware layers, sharing every common parameter.
fn plain_twin(model: &TacoModel) -> TacoModel {
    let cfg = ModelConfig { ta_layers: vec![], ..model.cfg.clone() };
    let mut twin = TacoModel::new(cfg.clone(), &mut Rng::new(0)).unwrap();
    let mut params = twin.params.clone();
    for id in twin.params.ids() {
        let name = twin.params.name(id).to_string();
        *params.get_mut(id) = model.params.by_name(&name).expect("shared parameter").clone();
    }
    twin = TacoModel::from_params(cfg, params).unwrap();
    twin
}

fn hidden(model: &TacoModel, seed: u64, n_icd: usize, opts: ForwardOptions) -> (Tensor, Vec<Tensor>) {
    let lib = toy_library(6, D, seed);
    let q = toy_query(D, seed + 100);
    let inst = model.inst_emb_for(&lib);
    let mut g = Graph::new();
    let lf = model.encode_library(&mut g, &lib).unwrap();
    let icds: Vec<usize> = (0..n_icd).collect();
    let fwd = model.forward(&mut g, lf, &q, &inst, &icds, true, opts).unwrap();
    (g.value(fwd.hidden).clone(), fwd.masks.iter().map(|&m| g.value(m).clone()).collect())
}

#[test]
fn unit_relevance_reduces_task_layers_to_causal_layers() {
    for seed in 0..20 {
        let model = TacoModel::new(tiny_config(D), &mut Rng::new(seed)).unwrap();
        let twin = plain_twin(&model);
        let n_icd = 1 + seed as usize % 4;
        let (h_ta, masks) = hidden(&model, seed, n_icd, ForwardOptions { force_relevance_one: true });
        let (h_plain, _) = hidden(&twin, seed, n_icd, ForwardOptions::default());
        assert!(h_ta.max_abs_diff(&h_plain) < 1e-9, "seed {seed}: {}", h_ta.max_abs_diff(&h_plain));
        let causal = causal_mask(h_ta.rows());
        for m in masks {
            assert!(m.max_abs_diff(&causal) < 1e-9);
        }
    }
}

#[test]
fn learned_relevance_changes_the_output() {
    let model = TacoModel::new(tiny_config(D), &mut Rng::new(1)).unwrap();
    let (a, _) = hidden(&model, 1, 3, ForwardOptions::default());
    let (b, _) = hidden(&model, 1, 3, ForwardOptions { force_relevance_one: true });
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn masks_keep_the_causal_pattern_and_touch_only_icd_rows() {
    let model = TacoModel::new(tiny_config(D), &mut Rng::new(2)).unwrap();
    let (_, masks) = hidden(&model, 2, 3, ForwardOptions::default());
    for m in masks {
        let n = m.rows();
        for i in 0..n {
            for j in 0..n {
                let v = m.get(i, j);
                if j > i {
                    assert_eq!(v, f64::NEG_INFINITY);
                } else if i < 2 || i == n - 1 {
                    // BOS, query and EOS rows carry no task term.
                    assert_eq!(v, 0.0, "row {i} col {j}");
                } else {
                    assert!(v.is_finite());
                }
            }
        }
    }
}

#[test]
fn logits_cover_the_library_plus_eos() {
    let model = TacoModel::new(tiny_config(D), &mut Rng::new(3)).unwrap();
    let lib = toy_library(5, D, 3);
    let lf = model.library_embeddings(&lib).unwrap();
    let lp = model.next_log_probs(&lf, &toy_query(D, 9), &model.inst_emb_for(&lib), &[1, 3], true).unwrap();
    assert_eq!(lp.len(), 6);
    assert_eq!(lp[1], f64::NEG_INFINITY);
    assert_eq!(lp[3], f64::NEG_INFINITY);
    let s: f64 = lp.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn wrong_embedding_width_is_rejected() {
    let model = TacoModel::new(tiny_config(D), &mut Rng::new(4)).unwrap();
    let lib = toy_library(4, D + 1, 4);
    assert!(matches!(model.library_embeddings(&lib), Err(Error::Dimension(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { ta_layers: vec![5], ..tiny_config(D) },
        ModelConfig { heads: 3, ..tiny_config(D) },
        ModelConfig { d_img: D + 2, ..tiny_config(D) },
    ];
    for cfg in bad {
        assert!(TacoModel::new(cfg, &mut Rng::new(0)).is_err());
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let model = TacoModel::new(tiny_config(D), &mut Rng::new(5)).unwrap();
    let ck = Checkpoint::from_model(&model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path, Some(&model.config_hash())).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.params.entries().iter().zip(model.params.entries()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert!(matches!(load_checkpoint(&path, Some("other")), Err(Error::Checkpoint(_))));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let model = TacoModel::new(tiny_config(D), &mut Rng::new(6)).unwrap();
    let mut ck = Checkpoint::from_model(&model);
    ck.config.depth = 3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &ck).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Perturbing token k never changes hidden states at positions < k.
    #[test]
    fn decoder_is_causal(seed in 0u64..10_000, n_icd in 1usize..5, k_off in 0usize..6, scale in 0.1f64..3.0) {
        let model = TacoModel::new(tiny_config(D), &mut Rng::new(seed)).unwrap();
        let lib = toy_library(6, D, seed);
        let q = toy_query(D, seed + 1);
        let inst = model.inst_emb_for(&lib);
        let icds: Vec<usize> = (0..n_icd).collect();
        let run = |perturb: Option<usize>| {
            let mut g = Graph::new();
            let lf = model.encode_library(&mut g, &lib).unwrap();
            let t = model.token_embeddings(&mut g, lf, &q, &icds, true).unwrap();
            let mut tv = g.value(t).clone();
            if let Some(k) = perturb {
                let mut r = Rng::new(seed ^ 77);
                for j in 0..tv.cols() {
                    let v = tv.get(k, j) + scale * r.normal();
                    tv.set(k, j, v);
                }
            }
            let t2 = g.constant(tv);
            let fwd = model.forward_tokens(&mut g, t2, &q, &inst, n_icd, ForwardOptions::default()).unwrap();
            g.value(fwd.hidden).clone()
        };
        let len = n_icd + 3;
        let k = 1 + k_off % (len - 1);
        let base = run(None);
        let moved = run(Some(k));
        for i in 0..k {
            for j in 0..D {
                prop_assert_eq!(base.get(i, j).to_bits(), moved.get(i, j).to_bits(), "row {} changed after perturbing {}", i, k);
            }
        }
    }
}
