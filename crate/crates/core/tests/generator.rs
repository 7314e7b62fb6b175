use genadapter::generator::{
    emit_adapter, init_state, merge_adapter, update_state, AdapterFactors, GeneratorConfig, GeneratorParams, NormKind,
};
use genadapter::model::{forward, BaseModel, InjectionConfig, InjectionTarget, ModelConfig};
use genadapter::numerics::{projected_gram, Matrix, SvdConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        num_layers: 2,
        hidden_dim: 12,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 32,
    }
}

fn params(norm: NormKind, dr: usize, rank: usize, targets: Vec<InjectionTarget>, seed: u64) -> GeneratorParams<f64> {
    GeneratorParams::new(
        model_config(),
        InjectionConfig::new(targets).unwrap(),
        GeneratorConfig {
            intermediate_dim: dr,
            rank,
            norm,
            scale: 0.5,
            svd: SvdConfig::default(),
        },
        seed,
    )
    .unwrap()
}

fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn rel(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::random_normal(rows, cols, 1.0, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn streaming_matches_single_shot(seed in 0u64..10_000, cuts in prop::collection::vec(0usize..=20, 0..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(NormKind::Svd, 6, 3, vec![InjectionTarget::AttentionOutput, InjectionTarget::FfnUp], seed);
        let full: Vec<Matrix<f64>> = (0..2).map(|_| random(20, 12, &mut rng)).collect();
        let mut bounds = cuts.clone();
        bounds.push(0);
        bounds.push(20);
        bounds.sort();
        let mut state = init_state(&p);
        for w in bounds.windows(2) {
            let chunk: Vec<_> = full.iter().map(|h| h.slice_rows(w[0]..w[1])).collect();
            update_state(&mut state, &p, &chunk).unwrap();
        }
        let mut single = init_state(&p);
        update_state(&mut single, &p, &full).unwrap();
        for (a, b) in state.states().iter().zip(single.states()) {
            prop_assert!(rel(a, b) <= 1e-10);
        }
        prop_assert_eq!(state.tokens_consumed(), 20);
        prop_assert_eq!(state.chunks_consumed() as usize, bounds.len() - 1);
    }
}

#[test]
fn two_chunks_equal_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(NormKind::Svd, 6, 2, vec![InjectionTarget::AttentionOutput], 1);
    let h1: Vec<_> = (0..2).map(|_| random(5, 12, &mut rng)).collect();
    let h2: Vec<_> = (0..2).map(|_| random(7, 12, &mut rng)).collect();
    let mut s = init_state(&p);
    update_state(&mut s, &p, &h1).unwrap();
    update_state(&mut s, &p, &h2).unwrap();
    for (layer, st) in p.layers().iter().zip(s.states()) {
        let cat = Matrix::vstack(&[&h1[layer.block], &h2[layer.block]]).unwrap();
        let oracle = projected_gram(&cat, &layer.a2, &layer.b1).unwrap();
        assert!(rel(st, &oracle) <= 1e-10);
        assert_eq!(st.len(), 36);
    }
}

#[test]
fn emission_matches_full_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dr = 6;
    let mut p = params(NormKind::Svd, dr, 3, vec![InjectionTarget::AttentionOutput], 2);
    // Planted distinct spectrum through random orthogonal factors.
    let q1 = to_na(&random(dr, dr, &mut rng)).qr().q();
    let q2 = to_na(&random(dr, dr, &mut rng)).qr().q();
    let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]));
    let s = &q1 * sigma * q2.transpose();
    for layer in p.layers_mut() {
        layer.a1 = random(12, dr, &mut rng);
        layer.b2 = random(dr, 12, &mut rng);
    }
    let planted = from_na(&s);
    let adapter = emit_from(&p, &planted);
    let svd = s.clone().svd(true, true);
    let mut idx: Vec<usize> = (0..dr).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut uvt = DMatrix::zeros(dr, dr);
    for &k in &idx[..3] {
        uvt += u.column(k) * vt.row(k);
    }
    for (layer, d) in p.layers().iter().zip(adapter.dense().unwrap()) {
        let oracle = to_na(&layer.a1) * &uvt * to_na(&layer.b2);
        assert!(rel(&d, &from_na(&oracle)) <= 1e-5);
    }
}

/// Emission from an explicit state matrix. With `A2 = [I 0]` and
/// `B1 = [0; I]`, a row `e_i + c·e_{d_r+j}` adds `c` to entry `(i, j)`.
fn emit_from(p: &GeneratorParams<f64>, s: &Matrix<f64>) -> AdapterFactors<f64> {
    let dr = s.rows();
    let h_dim = p.model_config().hidden_dim;
    let mut flat = Vec::new();
    for i in 0..dr {
        for j in 0..dr {
            let mut r = vec![0.0; h_dim];
            r[i] = 1.0;
            r[dr + j] = s.get(i, j);
            flat.extend(r);
        }
    }
    let h = Matrix::from_vec(dr * dr, h_dim, flat).unwrap();
    let mut q = p.clone();
    for layer in q.layers_mut() {
        layer.a2 = Matrix::from_fn(dr, h_dim, |i, k| if i == k { 1.0 } else { 0.0 });
        layer.b1 = Matrix::from_fn(h_dim, dr, |k, j| if k == dr + j { 1.0 } else { 0.0 });
    }
    let mut st = init_state(&q);
    update_state(&mut st, &q, &[h.clone(), h]).unwrap();
    for got in st.states() {
        assert!(got.max_abs_diff(s).unwrap() < 1e-12);
    }
    emit_adapter(&st, &q).unwrap()
}

#[test]
fn diagonal_state_emits_identity() {
    let mut p = params(NormKind::Svd, 2, 2, vec![InjectionTarget::AttentionOutput], 0);
    for layer in p.layers_mut() {
        layer.a1 = Matrix::from_fn(12, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        layer.b2 = Matrix::from_fn(2, 12, |i, j| if i == j { 1.0 } else { 0.0 });
    }
    let a = emit_from(&p, &Matrix::from_diag(&[3.0, 0.5]));
    for d in a.dense().unwrap() {
        let expected = Matrix::from_fn(12, 12, |i, j| if i == j && i < 2 { 1.0 } else { 0.0 });
        assert!(d.max_abs_diff(&expected).unwrap() < 1e-12);
    }
}

#[test]
fn frobenius_and_none_modes_emit_scaled_truncations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = random(4, 4, &mut rng);
    for norm in [NormKind::Frobenius, NormKind::None] {
        let p = params(norm, 4, 4, vec![InjectionTarget::AttentionOutput], 3);
        let a = emit_from(&p, &s);
        let target = if norm == NormKind::Frobenius {
            s.scale(1.0 / s.frobenius_norm())
        } else {
            s.clone()
        };
        for (layer, d) in p.layers().iter().zip(a.dense().unwrap()) {
            let oracle = layer.a1.matmul(&target).unwrap().matmul(&layer.b2).unwrap();
            assert!(rel(&d, &oracle) <= 1e-8, "{norm}");
        }
    }
}

fn lively_model(seed: u64) -> BaseModel<f64> {
    let mut m = BaseModel::<f64>::new(model_config(), seed).unwrap();
    for t in m.tensors_mut().unwrap() {
        *t = t.scale(if t.rows() == 1 { 1.0 } else { 10.0 });
    }
    m
}

fn trained_like_adapter(p: &GeneratorParams<f64>, seed: u64) -> AdapterFactors<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = init_state(p);
    let h: Vec<_> = (0..2).map(|_| random(9, 12, &mut rng)).collect();
    update_state(&mut st, p, &h).unwrap();
    emit_adapter(&st, p).unwrap()
}

#[test]
fn merged_forward_equals_injected_forward() {
    let model = lively_model(5);
    let all = InjectionTarget::ALL.to_vec();
    let p = params(NormKind::Svd, 6, 3, all, 4);
    let adapter = trained_like_adapter(&p, 6);
    assert!(!adapter.is_zero());
    let tokens: Vec<usize> = (0..16).map(|i| (i * 7) % 40).collect();
    let injected = forward(&model, &tokens, Some(&adapter), false).unwrap().logits;
    let merged = forward(&merge_adapter(&model, &adapter).unwrap(), &tokens, None, false).unwrap().logits;
    let plain = forward(&model, &tokens, None, false).unwrap().logits;
    assert!(injected.max_abs_diff(&merged).unwrap() <= 1e-10);
    assert!(injected.max_abs_diff(&plain).unwrap() > 1e-6);

    let back = merge_adapter(&merge_adapter(&model, &adapter).unwrap(), &adapter.negated()).unwrap();
    let restored = forward(&back, &tokens, None, false).unwrap().logits;
    assert!(restored.max_abs_diff(&plain).unwrap() <= 1e-9);
}

#[test]
fn single_precision_merge_agrees() {
    let model = lively_model(5).cast::<f32>();
    let p = params(NormKind::Svd, 6, 3, vec![InjectionTarget::AttentionOutput], 4).cast::<f32>();
    let adapter = trained_like_adapter(&p.cast::<f64>(), 6).cast::<f32>();
    let tokens: Vec<usize> = (0..16).collect();
    let a = forward(&model, &tokens, Some(&adapter), false).unwrap().logits;
    let b = forward(&merge_adapter(&model, &adapter).unwrap(), &tokens, None, false).unwrap().logits;
    let scale = a.max_abs();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-5 * scale.max(1.0));
    let _ = p;
}

#[test]
fn emitted_factors_have_declared_shapes() {
    let p = params(NormKind::Svd, 6, 3, vec![InjectionTarget::FfnUp, InjectionTarget::FfnDown], 1);
    let a = trained_like_adapter(&p, 2);
    for e in a.entries() {
        let (d_in, d_out) = e.target.dims(12, 16);
        assert_eq!(e.p.shape(), (d_out, 3));
        assert_eq!(e.q.shape(), (3, d_in));
    }
    assert_eq!(a.num_floats(), 2 * (3 * (16 + 12) + 3 * (12 + 16)));
    assert_eq!(a.scale(), 0.5);
}
