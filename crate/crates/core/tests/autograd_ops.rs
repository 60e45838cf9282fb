//! Finite-difference verification for every tape primitive.
//!
//! Each op is embedded in `loss = Σ (op(params…) ⊙ C)` for a fixed random
//! coefficient tensor `C`, and the tape gradient is compared against central
//! differences over 20 seeds. Inputs that sit near a kink (ReLU) or a clamp
//! (BCE) are sampled away from it — the finite difference is meaningless
//! exactly on the non-smooth point, and that case has its own test in the
//! checker itself.

use flowsentry::autograd::{grad_check, ParameterSet, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-6;

fn rand_data(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_data(rng, n, lo, hi)).unwrap()
}

/// Runs `grad_check` on `build` with a per-seed parameter set, asserting the
/// worst relative error across all seeds stays under `TOL`.
fn check_over_seeds<F, G>(name: &str, make_params: F, build: G)
where
    F: Fn(&mut ChaCha8Rng) -> ParameterSet,
    G: for<'t> Fn(
        &'t Tape,
        &std::collections::BTreeMap<String, Var<'t>>,
        &mut ChaCha8Rng,
    ) -> Result<Var<'t>, flowsentry::autograd::AutogradError>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA5A5_0000 + seed);
        let params = make_params(&mut rng);
        let report = grad_check(
            |tape, vars| {
                // Fresh stream per evaluation so constants repeat exactly.
                let mut inner = ChaCha8Rng::seed_from_u64(0xC3C3_0000 + seed);
                build(tape, vars, &mut inner)
            },
            &params,
            TOL,
        )
        .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        assert!(
            report.passed(),
            "{name} seed {seed}: max rel err {} in {:?}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

/// Contracts the op output against a fixed coefficient tensor so the loss is
/// scalar but every output element still influences it.
fn contract<'t>(
    out: Var<'t>,
    tape: &'t Tape,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t>, flowsentry::autograd::AutogradError> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let coeffs = tape.leaf(Tensor::new(shape, rand_data(rng, n, -1.0, 1.0))?)?;
    out.mul_elem(coeffs)?.sum_all()
}

#[test]
fn matmul_gradients_match_finite_differences() {
    check_over_seeds(
        "matmul",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("a", param(rng, &[3, 4], -1.0, 1.0));
            p.insert("b", param(rng, &[4, 2], -1.0, 1.0));
            p
        },
        |tape, vars, rng| contract(vars["a"].matmul(vars["b"])?, tape, rng),
    );
}

#[test]
fn add_and_add_row_vec_gradients_match() {
    check_over_seeds(
        "add/add_row_vec",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("x", param(rng, &[3, 4], -1.0, 1.0));
            p.insert("y", param(rng, &[3, 4], -1.0, 1.0));
            p.insert("bias", param(rng, &[4], -1.0, 1.0));
            p
        },
        |tape, vars, rng| {
            let summed = vars["x"].add(vars["y"])?.add_row_vec(vars["bias"])?;
            contract(summed, tape, rng)
        },
    );
}

#[test]
fn scale_relu_sigmoid_tanh_gradients_match() {
    check_over_seeds(
        "activations",
        |rng| {
            let mut p = ParameterSet::new();
            // Magnitudes ≥ 0.1 keep every ReLU input h-far from the kink.
            let data: Vec<f64> = (0..12)
                .map(|_| {
                    let mag = rng.random_range(0.1..1.5);
                    if rng.random_range(0.0..1.0) < 0.5 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect();
            p.insert("x", Tensor::matrix(3, 4, data).unwrap());
            p
        },
        |tape, vars, rng| {
            let x = vars["x"];
            let path = x.scale(1.7)?.relu()?;
            let smooth = x.sigmoid()?.add(x.tanh()?)?;
            contract(path.add(smooth)?, tape, rng)
        },
    );
}

#[test]
fn mul_elem_and_softmax_gradients_match() {
    check_over_seeds(
        "mul_elem/softmax",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("x", param(rng, &[4, 5], -2.0, 2.0));
            p.insert("y", param(rng, &[4, 5], -2.0, 2.0));
            p
        },
        |tape, vars, rng| {
            let prod = vars["x"].mul_elem(vars["y"])?;
            contract(prod.softmax_rows()?, tape, rng)
        },
    );
}

#[test]
fn layer_norm_gradients_match_for_all_three_inputs() {
    check_over_seeds(
        "layer_norm",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("x", param(rng, &[4, 6], -3.0, 3.0));
            p.insert("gamma", param(rng, &[6], 0.5, 1.5));
            p.insert("beta", param(rng, &[6], -0.5, 0.5));
            p
        },
        |tape, vars, rng| {
            let y = vars["x"].layer_norm(vars["gamma"], vars["beta"], 1e-5)?;
            contract(y, tape, rng)
        },
    );
}

#[test]
fn embedding_lookup_gradient_scatter_adds_duplicates() {
    check_over_seeds(
        "embedding_lookup",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("table", param(rng, &[5, 3], -1.0, 1.0));
            p
        },
        |tape, vars, rng| {
            // Duplicated ids make the scatter-add path load-bearing.
            let ids: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
            contract(vars["table"].embedding_lookup(&ids)?, tape, rng)
        },
    );
}

#[test]
fn attention_gradients_match_across_heads_windows_and_masking() {
    for causal in [false, true] {
        check_over_seeds(
            if causal { "attention/causal" } else { "attention/full" },
            |rng| {
                let mut p = ParameterSet::new();
                p.insert("q", param(rng, &[6, 4], -1.0, 1.0));
                p.insert("k", param(rng, &[6, 4], -1.0, 1.0));
                p.insert("v", param(rng, &[6, 4], -1.0, 1.0));
                p
            },
            move |tape, vars, rng| {
                // 2 windows × 3 rows, 2 heads of width 2.
                let out = vars["q"].attention_windows(vars["k"], vars["v"], 2, 2, causal)?;
                contract(out, tape, rng)
            },
        );
    }
}

#[test]
fn slice_concat_select_and_pad_gradients_match() {
    check_over_seeds(
        "slice/concat/select/pad",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("x", param(rng, &[4, 6], -1.0, 1.0));
            p.insert("y", param(rng, &[4, 2], -1.0, 1.0));
            p
        },
        |tape, vars, rng| {
            let left = vars["x"].slice_cols(1, 3)?;
            let joined = tape.concat_cols(&[left, vars["y"]])?;
            let picked = joined.select_rows(&[3, 1, 1, 0])?;
            contract(picked.pad_cols(2)?, tape, rng)
        },
    );
}

#[test]
fn window_pooling_gradients_match() {
    check_over_seeds(
        "window_mean/window_weighted",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("x", param(rng, &[8, 3], -1.0, 1.0));
            p.insert("w1", param(rng, &[4], -1.0, 1.0));
            p.insert("w2", param(rng, &[4, 3], -1.0, 1.0));
            p
        },
        |tape, vars, rng| {
            let mean = vars["x"].window_mean_rows(2)?;
            let shared = vars["x"].window_weighted_rows(vars["w1"], 2)?;
            let per_feature = vars["x"].window_weighted_rows(vars["w2"], 2)?;
            contract(mean.add(shared)?.add(per_feature)?, tape, rng)
        },
    );
}

#[test]
fn tile_add_append_row_and_reshape_gradients_match() {
    check_over_seeds(
        "tile_add/append_row/reshape",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("x", param(rng, &[6, 3], -1.0, 1.0));
            p.insert("pos", param(rng, &[3, 3], -1.0, 1.0));
            p.insert("cls", param(rng, &[3], -1.0, 1.0));
            p
        },
        |tape, vars, rng| {
            let with_pos = vars["x"].tile_add_rows(vars["pos"], 2)?;
            let with_cls = with_pos.append_row_per_window(vars["cls"], 2)?;
            contract(with_cls.reshape(&[2, 12])?, tape, rng)
        },
    );
}

#[test]
fn bce_through_sigmoid_gradient_matches() {
    check_over_seeds(
        "bce_mean",
        |rng| {
            let mut p = ParameterSet::new();
            // Logits in ±2.5 keep probabilities far from the clamp bounds.
            p.insert("logits", param(rng, &[5], -2.5, 2.5));
            p
        },
        |_tape, vars, rng| {
            let labels: Vec<f64> = (0..5).map(|_| f64::from(rng.random_range(0..2))).collect();
            vars["logits"].sigmoid()?.bce_mean(&labels)
        },
    );
}

#[test]
fn composite_mlp_gradient_matches() {
    // A miniature end-to-end network: projection, ReLU, projection, sigmoid,
    // BCE — the composition exercises gradient accumulation across reuse.
    check_over_seeds(
        "composite_mlp",
        |rng| {
            let mut p = ParameterSet::new();
            p.insert("w1", param(rng, &[4, 6], -0.7, 0.7));
            p.insert("b1", param(rng, &[6], -0.2, 0.2));
            p.insert("w2", param(rng, &[6, 1], -0.7, 0.7));
            p.insert("b2", param(rng, &[1], -0.2, 0.2));
            p
        },
        |tape, vars, rng| {
            let x = tape.leaf(Tensor::matrix(3, 4, rand_data(rng, 12, -1.0, 1.0)).unwrap())?;
            let labels: Vec<f64> = (0..3).map(|_| f64::from(rng.random_range(0..2))).collect();
            let hidden = x.matmul(vars["w1"])?.add_row_vec(vars["b1"])?.relu()?;
            let logits = hidden.matmul(vars["w2"])?.add_row_vec(vars["b2"])?;
            logits.sigmoid()?.bce_mean(&labels)
        },
    );
}
