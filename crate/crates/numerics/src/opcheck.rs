//! Central-difference audit of every differentiable [`Graph`] op.
//!
//! Each op output is reduced to a scalar through a fixed random projection
//! whose weights are bounded away from zero, so no output coordinate is
//! silently ignored. Inputs are drawn per seed; the reported error is the
//! worst coordinate-wise relative error over all seeds and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{finite_diff_check, ConvSpec, Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub worst: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rand_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.5..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv);
    g.sum(p)
}

struct Audit {
    seeds: u64,
    eps: f64,
    out: Vec<OpCheck>,
}

impl Audit {
    /// Checks `op` with respect to each of its inputs in turn.
    fn op(&mut self, name: &str, shapes: &[&[usize]], out_shape: &[usize], op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> Result<(), NumericsError> {
        let mut worst: f64 = 0.0;
        for seed in 0..self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ name.len() as u64);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let w = rand_weights(&mut rng, out_shape);
            for k in 0..inputs.len() {
                let err = finite_diff_check(
                    |g, x| {
                        let vars: Vec<Var> = (0..inputs.len()).map(|i| if i == k { x } else { g.constant(inputs[i].clone()) }).collect();
                        let y = op(g, &vars);
                        project(g, y, &w)
                    },
                    &inputs[k],
                    self.eps,
                )?;
                worst = worst.max(err);
            }
        }
        self.out.push(OpCheck { name: name.to_string(), worst });
        Ok(())
    }
}

/// Audits every op over `seeds` random draws with step `eps`.
pub fn check_all_ops(seeds: u64, eps: f64) -> Result<Vec<OpCheck>, NumericsError> {
    let mut a = Audit { seeds, eps, out: Vec::new() };
    a.op("add", &[&[3, 4], &[3, 4]], &[3, 4], |g, v| g.add(v[0], v[1]))?;
    a.op("add-broadcast", &[&[2, 3, 4], &[4]], &[2, 3, 4], |g, v| g.add(v[0], v[1]))?;
    a.op("sub", &[&[3, 4], &[3, 4]], &[3, 4], |g, v| g.sub(v[0], v[1]))?;
    a.op("sub-broadcast", &[&[5, 2], &[2]], &[5, 2], |g, v| g.sub(v[0], v[1]))?;
    a.op("mul", &[&[3, 4], &[3, 4]], &[3, 4], |g, v| g.mul(v[0], v[1]))?;
    a.op("mul-broadcast", &[&[2, 3, 4], &[3, 4]], &[2, 3, 4], |g, v| g.mul(v[0], v[1]))?;
    a.op("scale", &[&[6]], &[6], |g, v| g.scale(v[0], -2.5))?;
    a.op("matmul", &[&[3, 4], &[4, 5]], &[3, 5], |g, v| g.matmul(v[0], v[1]))?;
    a.op("matmul-batched", &[&[2, 3, 4], &[2, 4, 5]], &[2, 3, 5], |g, v| g.matmul(v[0], v[1]))?;
    a.op("matmul-shared-rhs", &[&[2, 3, 4], &[4, 5]], &[2, 3, 5], |g, v| g.matmul(v[0], v[1]))?;
    a.op("matmul_t", &[&[2, 3, 4], &[2, 5, 4]], &[2, 3, 5], |g, v| g.matmul_t(v[0], v[1]))?;
    a.op("matmul_t-shared", &[&[3, 4], &[5, 4]], &[3, 5], |g, v| g.matmul_t(v[0], v[1]))?;
    a.op("softmax", &[&[3, 5]], &[3, 5], |g, v| g.softmax(v[0]))?;
    a.op("gelu", &[&[4, 3]], &[4, 3], |g, v| g.gelu(v[0]))?;
    a.op("layer_norm", &[&[3, 6], &[6], &[6]], &[3, 6], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?;
    for (tag, spec) in [("s1p1", ConvSpec { stride: 1, pad: 1 }), ("s2p1", ConvSpec { stride: 2, pad: 1 }), ("s2p0", ConvSpec { stride: 2, pad: 0 })] {
        let ho = (6 + 2 * spec.pad - 3) / spec.stride + 1;
        a.op(&format!("conv2d-{tag}"), &[&[2, 2, 6, 6], &[3, 2, 3, 3]], &[2, 3, ho, ho], |g, v| g.conv2d(v[0], v[1], None, spec))?;
    }
    a.op("conv2d-bias", &[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3]], &[1, 3, 4, 4], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 1, pad: 1 })
    })?;
    a.op("mean_pool2d", &[&[2, 3, 4, 4]], &[2, 3, 2, 2], |g, v| g.mean_pool2d(v[0], 2))?;
    a.op("max_pool2d", &[&[3, 4, 4]], &[3, 2, 2], |g, v| g.max_pool2d(v[0], 2))?;
    a.op("mean_axis", &[&[2, 3, 4]], &[2, 4], |g, v| g.mean_axis(v[0], 1))?;
    a.op("mean", &[&[5]], &[], |g, v| g.mean(v[0]))?;
    a.op("sum", &[&[2, 3]], &[], |g, v| g.sum(v[0]))?;
    a.op("concat", &[&[2, 3, 2], &[2, 1, 2]], &[2, 4, 2], |g, v| g.concat(&[v[0], v[1]], 1))?;
    a.op("slice", &[&[3, 5]], &[3, 2], |g, v| g.slice(v[0], 1, 2, 2))?;
    a.op("reshape", &[&[2, 6]], &[3, 4], |g, v| g.reshape(v[0], &[3, 4]))?;
    a.op("permute", &[&[2, 3, 4]], &[4, 2, 3], |g, v| g.permute(v[0], &[2, 0, 1]))?;
    a.op("transpose", &[&[2, 3, 4]], &[2, 4, 3], |g, v| g.transpose(v[0]))?;
    a.op("embedding", &[&[5, 3]], &[4, 3], |g, v| g.embedding(v[0], &[4, 0, 4, 2]))?;
    a.op("cross_entropy", &[&[4, 6]], &[], |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2]))?;
    Ok(a.out)
}
