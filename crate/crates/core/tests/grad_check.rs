//! Central finite-difference verification of every analytic gradient,
//! on models small enough that the O(params) probing stays fast.

use crashtext::model::{
    ClsHead, MicroTransformer, ModelDims, ProjectionKind, Tolerances, TrainConfig,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;

fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab_size: 12,
        d_model: 8,
        head_dim: 4,
        n_heads: 2,
        n_layers: 2,
        max_seq: 6,
        d_ff: 8,
        cls_token_id: 2,
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn probe_indices(rows: usize, cols: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.gen_range(0..rows), rng.gen_range(0..cols)))
        .collect()
}

/// Central difference of the loss with respect to one entry of a
/// tensor reachable through `access`.
fn fd_probe(
    model: &MicroTransformer,
    tokens: &[u32],
    target: usize,
    mode: crashtext::model::AttnMode,
    access: impl Fn(&mut MicroTransformer) -> &mut f64,
) -> f64 {
    let loss_at = |delta: f64| {
        let mut m = model.clone();
        *access(&mut m) += delta;
        match mode {
            crashtext::model::AttnMode::Causal => {
                let logits = m.lm_logits(tokens).unwrap();
                crashtext::model::cross_entropy_loss(&logits, target).unwrap()
            }
            crashtext::model::AttnMode::Bidirectional => {
                let head = m.cls_head.clone().unwrap();
                let cache_probs = m.cls_forward(tokens, &head).unwrap();
                -cache_probs[target].ln()
            }
        }
    };
    (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP)
}

fn check2(
    model: &MicroTransformer,
    tokens: &[u32],
    target: usize,
    mode: crashtext::model::AttnMode,
    analytic: &Array2<f64>,
    name: &str,
    rng: &mut ChaCha8Rng,
    access: impl Fn(&mut MicroTransformer, (usize, usize)) -> *mut f64,
) {
    let tol = Tolerances::default().gradient_check;
    for idx in probe_indices(analytic.nrows(), analytic.ncols(), 8, rng) {
        let numeric = fd_probe(model, tokens, target, mode, |m| unsafe { &mut *access(m, idx) });
        let err = rel_err(analytic[idx], numeric);
        assert!(
            err < tol,
            "{name}[{idx:?}]: analytic {} vs numeric {numeric}, rel err {err}",
            analytic[idx]
        );
    }
}

fn check1(
    model: &MicroTransformer,
    tokens: &[u32],
    target: usize,
    mode: crashtext::model::AttnMode,
    analytic: &Array1<f64>,
    name: &str,
    rng: &mut ChaCha8Rng,
    access: impl Fn(&mut MicroTransformer, usize) -> *mut f64,
) {
    let tol = Tolerances::default().gradient_check;
    for _ in 0..8 {
        let i = rng.gen_range(0..analytic.len());
        let numeric = fd_probe(model, tokens, target, mode, |m| unsafe { &mut *access(m, i) });
        let err = rel_err(analytic[i], numeric);
        assert!(
            err < tol,
            "{name}[{i}]: analytic {} vs numeric {numeric}, rel err {err}",
            analytic[i]
        );
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut model = MicroTransformer::new(tiny_dims(), 31).unwrap();
    model
        .install_adapters(
            &[ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V],
            2,
            16.0,
            7,
        )
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for a in &mut model.adapters {
        a.b.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
    }
    let tokens = [1u32, 4, 7, 9, 3];
    let target = 10usize;
    let mode = crashtext::model::AttnMode::Causal;
    let (_, grads) = model.loss_and_grads(&tokens, target, mode).unwrap();

    for ai in 0..model.adapters.len() {
        let (da, db) = &grads.adapters[ai];
        check2(&model, &tokens, target, mode, da, "lora.A", &mut rng, |m, idx| {
            &mut m.adapters[ai].a[idx] as *mut f64
        });
        check2(&model, &tokens, target, mode, db, "lora.B", &mut rng, |m, idx| {
            &mut m.adapters[ai].b[idx] as *mut f64
        });
    }
}

#[test]
fn base_and_head_gradients_match_finite_differences() {
    let mut model = MicroTransformer::new(tiny_dims(), 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut head = ClsHead::zeros(5, tiny_dims().d_model);
    head.w.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    head.b.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    model.cls_head = Some(head);

    let tokens = [2u32, 4, 7, 9];
    let target = 3usize;
    let mode = crashtext::model::AttnMode::Bidirectional;
    let (_, grads) = model.loss_and_grads(&tokens, target, mode).unwrap();

    check2(
        &model, &tokens, target, mode, &grads.token_embed, "token_embed", &mut rng,
        |m, idx| &mut m.token_embed[idx] as *mut f64,
    );
    check2(
        &model, &tokens, target, mode, &grads.pos_embed, "pos_embed", &mut rng,
        |m, idx| &mut m.pos_embed[idx] as *mut f64,
    );
    for li in 0..tiny_dims().n_layers {
        for hi in 0..tiny_dims().n_heads {
            let hg = &grads.layers[li].heads[hi];
            check2(&model, &tokens, target, mode, &hg.w_q, "w_q", &mut rng, |m, idx| {
                &mut m.layers[li].heads[hi].w_q[idx] as *mut f64
            });
            check2(&model, &tokens, target, mode, &hg.w_k, "w_k", &mut rng, |m, idx| {
                &mut m.layers[li].heads[hi].w_k[idx] as *mut f64
            });
            check2(&model, &tokens, target, mode, &hg.w_v, "w_v", &mut rng, |m, idx| {
                &mut m.layers[li].heads[hi].w_v[idx] as *mut f64
            });
        }
        let lg = &grads.layers[li];
        check2(&model, &tokens, target, mode, &lg.w_o, "w_o", &mut rng, |m, idx| {
            &mut m.layers[li].w_o[idx] as *mut f64
        });
        check2(&model, &tokens, target, mode, &lg.w_ff1, "w_ff1", &mut rng, |m, idx| {
            &mut m.layers[li].w_ff1[idx] as *mut f64
        });
        check1(&model, &tokens, target, mode, &lg.b_ff1, "b_ff1", &mut rng, |m, i| {
            &mut m.layers[li].b_ff1[i] as *mut f64
        });
        check2(&model, &tokens, target, mode, &lg.w_ff2, "w_ff2", &mut rng, |m, idx| {
            &mut m.layers[li].w_ff2[idx] as *mut f64
        });
        check1(&model, &tokens, target, mode, &lg.b_ff2, "b_ff2", &mut rng, |m, i| {
            &mut m.layers[li].b_ff2[i] as *mut f64
        });
    }
    let cls = grads.cls.as_ref().unwrap();
    check2(&model, &tokens, target, mode, &cls.w, "cls.w", &mut rng, |m, idx| {
        &mut m.cls_head.as_mut().unwrap().w[idx] as *mut f64
    });
    check1(&model, &tokens, target, mode, &cls.b, "cls.b", &mut rng, |m, i| {
        &mut m.cls_head.as_mut().unwrap().b[i] as *mut f64
    });
}

#[test]
fn lm_head_gradients_match_finite_differences() {
    let mut model = MicroTransformer::new(tiny_dims(), 55).unwrap();
    model
        .install_adapters(&[ProjectionKind::V], 2, 16.0, 9)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let tokens = [5u32, 1, 8];
    let target = 6usize;
    let mode = crashtext::model::AttnMode::Causal;
    let (_, grads) = model.loss_and_grads(&tokens, target, mode).unwrap();
    check2(&model, &tokens, target, mode, &grads.w_lm, "w_lm", &mut rng, |m, idx| {
        &mut m.w_lm[idx] as *mut f64
    });
    check1(&model, &tokens, target, mode, &grads.b_lm, "b_lm", &mut rng, |m, i| {
        &mut m.b_lm[i] as *mut f64
    });
    check2(
        &model, &tokens, target, mode, &grads.token_embed, "token_embed(lm)", &mut rng,
        |m, idx| &mut m.token_embed[idx] as *mut f64,
    );
}

#[test]
fn default_config_defaults_match_contract() {
    let config = TrainConfig::default();
    assert_eq!(config.rank, 8);
    assert_eq!(config.alpha, 16.0);
    assert_eq!(
        config.projection_set,
        vec![ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V]
    );
}
