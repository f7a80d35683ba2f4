use arcslot::autodiff::{central_differences, compare, Tape, Tensor, Var};
use arcslot::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Prim = fn(&mut Tape, Var, &Aux) -> Result<Var>;

struct Aux {
    other: Vec<f32>,
    row: Vec<f32>,
    col: Vec<f32>,
    weights: Vec<f32>,
}

fn aux(rng: &mut ChaCha8Rng) -> Aux {
    let mut col = Tensor::randn(&[4], 1.0, rng).into_data();
    // keep some exact zeros so the blend shortcut is exercised
    col[1] = 0.0;
    Aux {
        other: Tensor::randn(&[16], 1.0, rng).into_data(),
        row: Tensor::randn(&[4], 1.0, rng).into_data(),
        col,
        weights: Tensor::randn(&[16], 1.0, rng).into_data(),
    }
}

fn primitives() -> Vec<(&'static str, Prim)> {
    vec![
        ("matmul_left", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            t.matmul(x, b)
        }),
        ("matmul_right", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            t.matmul(b, x)
        }),
        ("matmul_self", |t, x, _| t.matmul(x, x)),
        ("add", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            t.add(x, b)
        }),
        ("sub", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            t.sub(b, x)
        }),
        ("mul", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            t.mul(x, b)
        }),
        ("add_row_bias", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            let r = t.slice_rows(x, 2, 1)?;
            t.add_row(b, r)
        }),
        ("mul_col", |t, x, a| {
            let c = t.constant(4, 1, a.col.clone())?;
            t.mul_col(x, c)
        }),
        ("mul_col_weight", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            let r = t.slice_rows(x, 0, 1)?;
            let rt = t_transpose_row(t, r)?;
            let col = t.matmul(b, rt)?;
            t.mul_col(b, col)
        }),
        ("scale", |t, x, _| Ok(t.scale(x, -1.7))),
        ("sigmoid", |t, x, _| Ok(t.sigmoid(x))),
        ("silu", |t, x, _| Ok(t.silu(x))),
        ("gelu", |t, x, _| Ok(t.gelu(x))),
        ("softmax_rows", |t, x, _| Ok(t.softmax_rows(x))),
        ("layer_norm_x", |t, x, a| {
            let g = t.constant(1, 4, a.row.clone())?;
            let b = t.constant(1, 4, a.col.clone())?;
            t.layer_norm(x, g, b)
        }),
        ("layer_norm_affine", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            let g = t.slice_rows(x, 1, 1)?;
            let beta = t.slice_rows(x, 3, 1)?;
            t.layer_norm(b, g, beta)
        }),
        ("slice_rows", |t, x, _| t.slice_rows(x, 1, 2)),
        ("concat_rows", |t, x, a| {
            let b = t.constant(2, 4, a.other[..8].to_vec())?;
            let s = t.slice_rows(x, 0, 3)?;
            t.concat_rows(&[s, b, x])
        }),
        ("gather_rows", |t, x, _| t.gather_rows(x, &[3, 0, 3, 2])),
        ("scatter_rows", |t, x, a| {
            let b = t.constant(4, 4, a.other.clone())?;
            let r = t.slice_rows(x, 0, 2)?;
            let s = t.scatter_rows(b, &[3, 1], r)?;
            let first = t_first_row(t, s)?;
            t.scatter_rows(x, &[0], first)
        }),
        ("blend", |t, x, a| {
            let c = t.constant(4, 4, a.other.clone())?;
            let w = t.constant(4, 1, a.col.clone())?;
            let y = t.blend(x, c, w)?;
            let w2 = t.constant(4, 1, a.col.clone())?;
            t.blend(c, x, w2).and_then(|z| t.add(y, z))
        }),
        ("blend_weight", |t, x, a| {
            let base = t.constant(4, 4, a.other.clone())?;
            let w = t.slice_rows(x, 0, 1)?;
            let w = t_transpose_row(t, w)?;
            let cand = t.sigmoid(x);
            t.blend(base, cand, w)
        }),
        ("causal_attention_q", |t, x, a| {
            let k = t.constant(4, 4, a.other.clone())?;
            let v = t.constant(4, 4, a.weights.clone())?;
            t.causal_attention(x, k, v, 2)
        }),
        ("causal_attention_kv", |t, x, a| {
            let q = t.constant(4, 4, a.other.clone())?;
            t.causal_attention(q, x, x, 2)
        }),
    ]
}

fn t_transpose_row(t: &mut Tape, r: Var) -> Result<Var> {
    let (_, c) = t.dims(r);
    // a 1 x c row viewed as c x 1 via one-hot selection
    let eye = t.constant(
        c,
        c,
        (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect(),
    )?;
    let tiled = t.gather_rows(r, &vec![0; c])?;
    let diag = t.mul(tiled, eye)?;
    let ones = t.constant(c, 1, vec![1.0; c])?;
    t.matmul(diag, ones)
}

fn t_first_row(t: &mut Tape, x: Var) -> Result<Var> {
    t.slice_rows(x, 0, 1)
}

/// Weighted sum of `prim(x)` centred on its value at `x0`, so the scalar stays
/// near zero and f32 rounding of the loss does not swamp the differences.
fn centred_loss(prim: Prim, aux: &Aux, x: &[f32], centre: Option<&[f32]>) -> Result<(Tape, Var, Var)> {
    let mut t = Tape::new();
    let xv = t.variable(4, 4, x.to_vec())?;
    let y = prim(&mut t, xv, aux)?;
    let (r, c) = t.dims(y);
    let c0 = match centre {
        Some(c0) => c0.to_vec(),
        None => t.value(y).to_vec(),
    };
    let c0 = t.constant(r, c, c0)?;
    let d = t.sub(y, c0)?;
    let w: Vec<f32> = (0..r * c)
        .map(|i| aux.weights[i % 16] + 0.1 * (i / 16) as f32)
        .collect();
    let w = t.constant(r, c, w)?;
    let p = t.mul(d, w)?;
    let l = t.sum_all(p);
    Ok((t, xv, l))
}

fn check(prim: Prim, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[16], 1.0, &mut rng).into_data();
    let aux = aux(&mut rng);
    let (t, xv, l) = centred_loss(prim, &aux, &x, None).unwrap();
    let centre = {
        let mut tt = Tape::new();
        let xv = tt.variable(4, 4, x.clone()).unwrap();
        let y = prim(&mut tt, xv, &aux).unwrap();
        tt.value(y).to_vec()
    };
    let g = t.backward(l).unwrap();
    let analytic: Vec<f64> = g
        .get(xv)
        .map(|g| g.iter().map(|&v| v as f64).collect())
        .unwrap_or_else(|| vec![0.0; 16]);
    let coords: Vec<usize> = (0..16).collect();
    let numeric = central_differences(&x, &coords, 1e-3, |vals| {
        let (t, _, l) = centred_loss(prim, &aux, vals, Some(&centre))?;
        Ok(t.scalar(l)? as f64)
    })
    .unwrap();
    compare(&analytic, &numeric, 1e-3).max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_central_differences(seed in any::<u64>()) {
        for (name, prim) in primitives() {
            let err = check(prim, seed);
            prop_assert!(err < 1e-3, "{name}: rel error {err:.3e} at seed {seed}");
        }
    }

    #[test]
    fn stop_gradient_is_a_forward_identity(vals in prop::collection::vec(-1e6f32..1e6, 1..40)) {
        let mut t = Tape::new();
        let n = vals.len();
        let x = t.variable(1, n, vals.clone()).unwrap();
        let s = t.stop_gradient(x);
        prop_assert!(t.value(s).iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
