use stconsist::gradcheck::{check, run, Case, CASES, TOLERANCE};
use stconsist::graph::Op;
use stconsist::tensor::Tensor;

fn all_seeds(name: &str) {
    for seed in 0..20 {
        let w = run(name, seed).unwrap();
        assert!(
            w.relative <= TOLERANCE,
            "{name} seed {seed}: input {} element {}: analytic {}, numeric {}, relative error {}",
            w.input,
            w.element,
            w.analytic,
            w.numeric,
            w.relative
        );
    }
}

#[test]
fn conv2d() {
    all_seeds("conv2d");
}

#[test]
fn relu() {
    all_seeds("relu");
}

#[test]
fn softmax() {
    all_seeds("softmax");
}

#[test]
fn elementwise_and_reductions() {
    all_seeds("elementwise");
}

#[test]
fn warp_forward_splat() {
    all_seeds("warp_forward_splat");
}

#[test]
fn warp_inverse_sample() {
    all_seeds("warp_inverse_sample");
}

#[test]
fn consistency_variants() {
    for v in ["uniform", "label_prior", "pixel_prior", "combined", "ce", "combined_ce"] {
        all_seeds(v);
    }
}

#[test]
fn cross_entropy() {
    all_seeds("cross_entropy");
}

#[test]
fn segmenter_objective() {
    all_seeds("segmenter");
}

#[test]
fn unknown_case_is_rejected() {
    assert_eq!(CASES.len(), 14);
    assert!(run("no_such_op", 0).is_err());
}

/// Squares its input but reports a slope of `x` instead of `2x`.
struct HalfSquare;

impl Op<f64> for HalfSquare {
    fn name(&self) -> &'static str {
        "half_square"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad: &Tensor<f64>,
        _needs: &[bool],
    ) -> stconsist::Result<Vec<Option<Tensor<f64>>>> {
        Ok(vec![Some(inputs[0].scale(grad.item()))])
    }
}

#[test]
fn flags_a_wrong_backward() {
    let case = Case {
        inputs: vec![Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()],
        build: Box::new(|g, v| {
            let x = g.value(v[0]);
            let value = Tensor::scalar(x.data().iter().map(|a| a * a).sum());
            Ok(g.record(Box::new(HalfSquare), &[v[0]], value))
        }),
    };
    let w = check(&case).unwrap();
    assert!((w.relative - 0.5).abs() < 1e-6, "{w:?}");
}
