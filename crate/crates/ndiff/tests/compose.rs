//! Property test: gradients of random compositions of primitives match
//! central finite differences.

use ndiff::{central_diff, max_rel_err, NodeId, Tape, Tensor};
use proptest::prelude::*;

/// Domain-safe unary steps: each maps any real input to a bounded output, so
/// arbitrary chains stay away from kinks and singularities.
#[derive(Debug, Clone, Copy)]
enum Step {
    Sigmoid,
    Tanh,
    Softmax,
    Scale(i8),
    Shift(i8),
    SafeLog,
}

impl Step {
    fn apply(self, t: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Step::Sigmoid => t.sigmoid(x),
            Step::Tanh => t.tanh(x),
            Step::Softmax => t.softmax(x).unwrap(),
            Step::Scale(k) => t.scale(x, f64::from(k) / 4.0),
            Step::Shift(k) => t.add_scalar(x, f64::from(k) / 4.0),
            Step::SafeLog => {
                // log of sigmoid + 0.5 keeps the argument in (0.5, 1.5).
                let s = t.sigmoid(x);
                let s = t.add_scalar(s, 0.5);
                t.log(s)
            }
        }
    }
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Sigmoid),
        Just(Step::Tanh),
        Just(Step::Softmax),
        (1i8..=6).prop_map(Step::Scale),
        (-6i8..=6).prop_map(Step::Shift),
        Just(Step::SafeLog),
    ]
}

fn build(t: &mut Tape, data: &[f64], steps: &[Step]) -> NodeId {
    let mut x = t.leaf(Tensor::from_vec(&[2, 3], data.to_vec()).unwrap());
    for s in steps {
        x = s.apply(t, x);
    }
    t.mean(x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn random_composition_gradcheck(
        data in prop::collection::vec(-2.0f64..2.0, 6),
        steps in prop::collection::vec(step_strategy(), 1..=5),
    ) {
        let mut tape = Tape::new();
        let id = {
            let mut x = tape.leaf(Tensor::from_vec(&[2, 3], data.clone()).unwrap());
            let first = x;
            for s in &steps {
                x = s.apply(&mut tape, x);
            }
            let root = tape.mean(x);
            tape.backward(root).unwrap();
            first
        };
        let analytic = tape.grad_or_zeros(id).into_data();
        let numeric = central_diff(
            |xs: &[f64]| {
                let mut t = Tape::new();
                let root = build(&mut t, xs, &steps);
                t.value(root).item()
            },
            &data,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        prop_assert!(err < 1e-6, "max rel err {} for steps {:?}", err, steps);
    }
}
