//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Every differentiable primitive used by the models lives here, together
//! with the seeded random stream and the finite-difference gradient checker
//! that verifies each primitive's backward rule.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_to_numeric, grad_check, rel_err, GradCheckReport,
};
pub use rng::RngStream;
pub use tape::{Gradients, Mode, Tape, VarId};
pub use tensor::Tensor;

/// Gradient-check every primitive on small random inputs.
///
/// Each check drives the primitive through a random linear functional so
/// every output entry influences the scalar under test. Returns
/// `(primitive name, max relative error)` pairs.
pub fn check_all_primitives(seed: u64, h: f64) -> crate::Result<Vec<(&'static str, f64)>> {
    let mut results = Vec::new();
    let mut rng = RngStream::new(seed);

    // Random linear functional: loss = sum(out ⊙ R).
    macro_rules! check {
        ($name:literal, $params:expr, $f:expr) => {{
            let params: Vec<(String, Tensor)> = $params;
            let report = grad_check(&params, h, $f)?;
            results.push(($name, report.max_rel_err));
        }};
    }

    let proj = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
    let named = |names: &[(&str, Tensor)]| -> Vec<(String, Tensor)> {
        names
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    };

    let a34 = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
    let b42 = Tensor::uniform(4, 2, -1.0, 1.0, &mut rng);
    let r32 = Tensor::uniform(3, 2, -1.0, 1.0, &mut rng);
    check!(
        "matmul",
        named(&[("a", a34.clone()), ("b", b42.clone())]),
        |tape, vars| {
            let y = tape.matmul(vars[0], vars[1])?;
            let r = tape.constant(r32.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    let b24 = Tensor::uniform(2, 4, -1.0, 1.0, &mut rng);
    let r32b = Tensor::uniform(3, 2, -1.0, 1.0, &mut rng);
    check!(
        "matmul_nt",
        named(&[("a", a34.clone()), ("b", b24.clone())]),
        |tape, vars| {
            let y = tape.matmul_nt(vars[0], vars[1])?;
            let r = tape.constant(r32b.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    let r43 = Tensor::uniform(4, 3, -1.0, 1.0, &mut rng);
    check!("transpose", named(&[("a", a34.clone())]), |tape, vars| {
        let y = tape.transpose(vars[0]);
        let r = tape.constant(r43.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    let a2 = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
    check!(
        "add",
        named(&[("a", a34.clone()), ("b", a2.clone())]),
        |tape, vars| {
            let y = tape.add(vars[0], vars[1])?;
            let r = tape.constant(proj.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    let row = Tensor::uniform(1, 4, -1.0, 1.0, &mut rng);
    check!(
        "add_row",
        named(&[("a", a34.clone()), ("row", row.clone())]),
        |tape, vars| {
            let y = tape.add_row(vars[0], vars[1])?;
            let r = tape.constant(proj.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    let s = Tensor::scalar(0.37);
    check!(
        "add_scalar",
        named(&[("a", a34.clone()), ("s", s.clone())]),
        |tape, vars| {
            let y = tape.add_scalar(vars[0], vars[1])?;
            let r = tape.constant(proj.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    check!(
        "mul",
        named(&[("a", a34.clone()), ("b", a2.clone())]),
        |tape, vars| {
            let y = tape.mul(vars[0], vars[1])?;
            let r = tape.constant(proj.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    check!(
        "mul_row",
        named(&[("a", a34.clone()), ("row", row.clone())]),
        |tape, vars| {
            let y = tape.mul_row(vars[0], vars[1])?;
            let r = tape.constant(proj.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    check!(
        "mul_scalar",
        named(&[("a", a34.clone()), ("s", s.clone())]),
        |tape, vars| {
            let y = tape.mul_scalar_var(vars[0], vars[1])?;
            let r = tape.constant(proj.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    check!("scale", named(&[("a", a34.clone())]), |tape, vars| {
        let y = tape.scale(vars[0], -1.7);
        let r = tape.constant(proj.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    let r132 = Tensor::uniform(3, 2, -1.0, 1.0, &mut rng);
    check!("slice_cols", named(&[("a", a34.clone())]), |tape, vars| {
        let y = tape.slice_cols(vars[0], 1, 2);
        let r = tape.constant(r132.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    let r24 = Tensor::uniform(2, 4, -1.0, 1.0, &mut rng);
    check!("slice_rows", named(&[("a", a34.clone())]), |tape, vars| {
        let y = tape.slice_rows(vars[0], 1, 2);
        let r = tape.constant(r24.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    let b31 = Tensor::uniform(3, 1, -1.0, 1.0, &mut rng);
    let r35 = Tensor::uniform(3, 5, -1.0, 1.0, &mut rng);
    check!(
        "concat_cols",
        named(&[("a", a34.clone()), ("b", b31.clone())]),
        |tape, vars| {
            let y = tape.concat_cols(&[vars[0], vars[1]])?;
            let r = tape.constant(r35.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    let r31 = Tensor::uniform(3, 1, -1.0, 1.0, &mut rng);
    check!("row_sums", named(&[("a", a34.clone())]), |tape, vars| {
        let y = tape.row_sums(vars[0]);
        let r = tape.constant(r31.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    check!("sum", named(&[("a", a34.clone())]), |tape, vars| {
        Ok(tape.sum_all(vars[0]))
    });

    check!("mean", named(&[("a", a34.clone())]), |tape, vars| {
        Ok(tape.mean_all(vars[0]))
    });

    // Keep activation inputs away from the kink at zero so the central
    // difference never straddles it.
    let off = a34.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check!("leaky_relu", named(&[("a", off.clone())]), |tape, vars| {
        let y = tape.leaky_relu(vars[0], 0.2);
        let r = tape.constant(proj.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    check!("elu", named(&[("a", off.clone())]), |tape, vars| {
        let y = tape.elu(vars[0]);
        let r = tape.constant(proj.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    check!("relu", named(&[("a", off.clone())]), |tape, vars| {
        let y = tape.relu(vars[0]);
        let r = tape.constant(proj.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    let scores = Tensor::uniform(2, 5, -2.0, 2.0, &mut rng);
    let mask = vec![
        true, false, true, true, false, //
        false, true, true, false, true,
    ];
    let r25 = Tensor::uniform(2, 5, -1.0, 1.0, &mut rng);
    check!(
        "masked_softmax",
        named(&[("scores", scores.clone())]),
        |tape, vars| {
            let y = tape.masked_softmax(vars[0], &mask)?;
            let r = tape.constant(r25.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    let x = Tensor::uniform(2, 6, -2.0, 2.0, &mut rng);
    let gamma = Tensor::uniform(1, 6, 0.5, 1.5, &mut rng);
    let beta = Tensor::uniform(1, 6, -0.5, 0.5, &mut rng);
    let r26 = Tensor::uniform(2, 6, -1.0, 1.0, &mut rng);
    check!(
        "layer_norm",
        named(&[("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())]),
        |tape, vars| {
            let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5);
            let r = tape.constant(r26.clone());
            let w = tape.mul(y, r)?;
            Ok(tape.sum_all(w))
        }
    );

    let xd = Tensor::uniform(2, 8, -2.0, 2.0, &mut rng);
    let r28 = Tensor::uniform(2, 8, -1.0, 1.0, &mut rng);
    check!("dropout", named(&[("x", xd.clone())]), |tape, vars| {
        let mut drop_rng = RngStream::new(1234);
        let y = tape.dropout(vars[0], 0.3, Mode::Train, &mut drop_rng)?;
        let r = tape.constant(r28.clone());
        let w = tape.mul(y, r)?;
        Ok(tape.sum_all(w))
    });

    let logits = Tensor::uniform(1, 4, -1.5, 1.5, &mut rng);
    check!(
        "cross_entropy",
        named(&[("logits", logits.clone())]),
        |tape, vars| tape.cross_entropy(vars[0], 2)
    );

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_gradient_check() {
        for (name, err) in check_all_primitives(17, 1e-5).unwrap() {
            assert!(err < 1e-6, "{name}: max relative error {err}");
        }
    }
}
