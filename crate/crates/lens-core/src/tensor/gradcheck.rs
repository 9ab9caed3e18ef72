//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, ValueId};
use crate::rng::{derive, SplitMix64};

/// Worst-case relative error between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(TensorError::NotScalar {
            op: "grad_check",
            shape: tape.shape(loss).to_vec(),
        });
    }
    Ok(tape.value(loss)[0])
}

/// Compares the tape gradient of `f` against central differences with step
/// `h`, perturbing every coordinate of every input. The relative error of a
/// coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(TensorError::NotScalar {
            op: "grad_check",
            shape: tape.shape(loss).to_vec(),
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_input: 0, worst_coord: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_err {
                report = GradCheckReport { max_rel_err: rel, worst_input: i, worst_coord: j };
            }
        }
    }
    Ok(report)
}

/// Named gradient probe for one tape operation.
pub struct OpProbe {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport, TensorError>,
}

fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Uniform samples kept away from zero, for kinked activations.
fn rand_tensor_off_zero(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let x = rng.uniform(-1.0, 1.0);
        x + x.signum() * 0.05
    })
}

fn weighted_sum(
    tape: &mut Tape<f64>,
    x: ValueId,
    seed: u64,
) -> Result<ValueId, TensorError> {
    let mut rng = SplitMix64::new(derive(seed, 0xC0FFEE));
    let shape = tape.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let w = tape.constant(shape, (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum_all(prod))
}

const PROBE_H: f64 = 1e-5;

macro_rules! probe {
    ($name:literal, $body:expr) => {
        OpProbe { name: $name, run: $body }
    };
}

/// One gradient probe per differentiable tape operation. Each probe builds
/// small random inputs from the seed and returns the grad-check report.
pub fn op_probes() -> Vec<OpProbe> {
    vec![
        probe!("matmul", |seed| {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, vec![3, 4]);
            let b = rand_tensor(&mut rng, vec![4, 2]);
            grad_check(
                move |t, ids| {
                    let y = t.matmul(ids[0], ids[1])?;
                    weighted_sum(t, y, seed)
                },
                &[a, b],
                PROBE_H,
            )
        }),
        probe!("linear", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![3, 4]);
            let w = rand_tensor(&mut rng, vec![5, 4]);
            let b = rand_tensor(&mut rng, vec![5]);
            grad_check(
                move |t, ids| {
                    let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
                    weighted_sum(t, y, seed)
                },
                &[x, w, b],
                PROBE_H,
            )
        }),
        probe!("add", |seed| {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, vec![2, 3]);
            let b = rand_tensor(&mut rng, vec![2, 3]);
            grad_check(
                move |t, ids| {
                    let y = t.add(ids[0], ids[1])?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[a, b],
                PROBE_H,
            )
        }),
        probe!("add_bias", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![3, 4]);
            let b = rand_tensor(&mut rng, vec![4]);
            grad_check(
                move |t, ids| {
                    let y = t.add_bias(ids[0], ids[1])?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[x, b],
                PROBE_H,
            )
        }),
        probe!("add_tiled", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![4, 3]);
            let tile = rand_tensor(&mut rng, vec![2, 3]);
            grad_check(
                move |t, ids| {
                    let y = t.add_tiled(ids[0], ids[1])?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[x, tile],
                PROBE_H,
            )
        }),
        probe!("mul", |seed| {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, vec![2, 3]);
            let b = rand_tensor(&mut rng, vec![2, 3]);
            grad_check(
                move |t, ids| {
                    let y = t.mul(ids[0], ids[1])?;
                    weighted_sum(t, y, seed)
                },
                &[a, b],
                PROBE_H,
            )
        }),
        probe!("scale", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![2, 3]);
            grad_check(
                move |t, ids| {
                    let y = t.scale(ids[0], -1.75);
                    weighted_sum(t, y, seed)
                },
                &[x],
                PROBE_H,
            )
        }),
        probe!("outer", |seed| {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, vec![3]);
            let b = rand_tensor(&mut rng, vec![4]);
            grad_check(
                move |t, ids| {
                    let y = t.outer(ids[0], ids[1])?;
                    weighted_sum(t, y, seed)
                },
                &[a, b],
                PROBE_H,
            )
        }),
        probe!("scaled_cross", |seed| {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, vec![3, 4]);
            let b = rand_tensor(&mut rng, vec![2, 4]);
            grad_check(
                move |t, ids| {
                    let y = t.scaled_cross(ids[0], ids[1], 0.25)?;
                    weighted_sum(t, y, seed)
                },
                &[a, b],
                PROBE_H,
            )
        }),
        probe!("concat_rows", |seed| {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, vec![2, 3]);
            let b = rand_tensor(&mut rng, vec![1, 3]);
            grad_check(
                move |t, ids| {
                    let y = t.concat_rows(&[ids[0], ids[1]])?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[a, b],
                PROBE_H,
            )
        }),
        probe!("concat_cols", |seed| {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, vec![2, 2]);
            let b = rand_tensor(&mut rng, vec![2, 3]);
            grad_check(
                move |t, ids| {
                    let y = t.concat_cols(&[ids[0], ids[1]])?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[a, b],
                PROBE_H,
            )
        }),
        probe!("slice_block", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![4, 5]);
            grad_check(
                move |t, ids| {
                    let y = t.slice_block(ids[0], 1, 2, 1, 3)?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[x],
                PROBE_H,
            )
        }),
        probe!("gather_rows", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![4, 3]);
            grad_check(
                move |t, ids| {
                    let y = t.gather_rows(ids[0], &[2, 0, 2])?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[x],
                PROBE_H,
            )
        }),
        probe!("softmax_rows", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![3, 4]);
            grad_check(
                move |t, ids| {
                    let y = t.softmax_rows(ids[0])?;
                    weighted_sum(t, y, seed)
                },
                &[x],
                PROBE_H,
            )
        }),
        probe!("layer_norm", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![3, 5]);
            let gamma = rand_tensor(&mut rng, vec![5]);
            let beta = rand_tensor(&mut rng, vec![5]);
            grad_check(
                move |t, ids| {
                    let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                    weighted_sum(t, y, seed)
                },
                &[x, gamma, beta],
                PROBE_H,
            )
        }),
        probe!("gelu", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![2, 4]);
            grad_check(
                move |t, ids| {
                    let y = t.gelu(ids[0]);
                    weighted_sum(t, y, seed)
                },
                &[x],
                PROBE_H,
            )
        }),
        probe!("relu", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor_off_zero(&mut rng, vec![2, 4]);
            grad_check(
                move |t, ids| {
                    let y = t.relu(ids[0]);
                    weighted_sum(t, y, seed)
                },
                &[x],
                PROBE_H,
            )
        }),
        probe!("dropout", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![2, 5]);
            grad_check(
                move |t, ids| {
                    let mut mask_rng = SplitMix64::new(derive(seed, 7));
                    let y = t.dropout(ids[0], 0.3, &mut mask_rng)?;
                    weighted_sum(t, y, seed)
                },
                &[x],
                PROBE_H,
            )
        }),
        probe!("sum_all", |seed| {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![3, 3]);
            grad_check(move |t, ids| Ok(t.sum_all(ids[0])), &[x], PROBE_H)
        }),
        probe!("weighted_ce", |seed| {
            let mut rng = SplitMix64::new(seed);
            let logits = rand_tensor(&mut rng, vec![4, 3]);
            let labels: Vec<usize> = (0..4).map(|_| rng.next_below(3)).collect();
            grad_check(
                move |t, ids| t.weighted_ce(ids[0], &labels, &[1.0, 0.5, 2.0]),
                &[logits],
                PROBE_H,
            )
        }),
        probe!("epi_contract", |seed| {
            let mut rng = SplitMix64::new(seed);
            let m = rand_tensor(&mut rng, vec![2, 6]);
            let z = rand_tensor(&mut rng, vec![2, 2]);
            grad_check(
                move |t, ids| {
                    let y = t.epi_contract(ids[0], ids[1], 2, 3)?;
                    let sq = t.mul(y, y)?;
                    weighted_sum(t, sq, seed)
                },
                &[m, z],
                PROBE_H,
            )
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_tight() {
        let x = Tensor::new(vec![2, 3], vec![0.4, -1.2, 0.9, 2.0, -0.3, 0.1]).unwrap();
        let report = grad_check(
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                Ok(t.sum_all(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn linear_map_gradient_is_machine_precision() {
        let x = Tensor::new(vec![1, 4], vec![0.5, -0.25, 1.5, 2.0]).unwrap();
        let report = grad_check(
            |t, ids| {
                let y = t.scale(ids[0], 3.0);
                Ok(t.sum_all(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn every_probe_passes_on_a_few_seeds() {
        for probe in op_probes() {
            for seed in [1u64, 2, 3] {
                let report = (probe.run)(seed).unwrap();
                assert!(
                    report.max_rel_err < 1e-4,
                    "{} seed {} err {}",
                    probe.name,
                    seed,
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let x = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let err = grad_check(|_t, ids| Ok(ids[0]), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }
}
