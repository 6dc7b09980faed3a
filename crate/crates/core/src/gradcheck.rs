//! Central finite-difference checks of reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; tensors at or below this size are checked exhaustively.
    pub coords_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 16,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.max_rel_err))
    }

    pub fn coords(&self) -> usize {
        self.checks.iter().map(|c| c.coords).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// tensor in `inputs`.
///
/// `f` receives a graph and one leaf per input (same order) and must return
/// a scalar. It is evaluated twice at the base point first; differing
/// results abort with [`Error::InvalidArgument`].
pub fn gradcheck<F>(f: F, inputs: &[(String, Tensor)], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        // A recording graph, so functions may differentiate internally.
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let f0 = eval(&base)?;
    let f1 = eval(&base)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::InvalidArgument(format!(
            "function is not deterministic: {f0} then {f1}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = base.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = RngStream::new(opts.seed, "gradcheck");
    let mut checks = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let n = t.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.coords_per_tensor)
                .map(|_| rng.below(n as u64) as usize)
                .collect()
        };
        let mut worst: f64 = 0.0;
        let mut vals = base.clone();
        for &c in &coords {
            let orig = t.data()[c];
            vals[k].data_mut()[c] = orig + opts.step;
            let fp = eval(&vals)?;
            vals[k].data_mut()[c] = orig - opts.step;
            let fm = eval(&vals)?;
            vals[k].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic.data()[c], numeric, opts.floor));
        }
        checks.push(TensorCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport {
        checks,
        tolerance: opts.tolerance,
    })
}

/// Projects `out` onto a fixed random direction so every output coordinate
/// contributes to the checked scalar.
pub fn random_projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed, "projection");
    let r = rng.normal_tensor(g.shape(out));
    let rv = g.constant(r);
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

/// A named scalar function of some tensors, checked by [`run_case`].
pub struct Case {
    pub name: String,
    pub inputs: Vec<(String, Tensor)>,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

impl Case {
    fn new(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
        Case {
            name: name.to_string(),
            inputs: inputs
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("{name}[{i}]"), t))
                .collect(),
            f: Box::new(f),
        }
    }

    /// Operations recorded when the case's graph is built once.
    pub fn ops(&self) -> Result<std::collections::BTreeSet<&'static str>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        (self.f)(&mut g, &vars)?;
        Ok(g.ops_used())
    }
}

pub fn run_case(case: &Case, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    gradcheck(&case.f, &case.inputs, opts)
}

/// Normal samples pushed at least `margin` away from zero, so kinks at the
/// origin stay out of reach of finite differences.
fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// One case per recorded operation, each projected to a scalar through a
/// fixed random direction. Together they record every name in
/// [`crate::autograd::OP_NAMES`].
pub fn op_cases(seed: u64) -> Vec<Case> {
    use crate::kernels::ConvGeom;
    let mut rng = RngStream::new(seed, "op-cases");
    let mut n = |shape: &[usize]| rng.normal_tensor(shape);
    let proj = |g: &mut Graph, v: Var| random_projection(g, v, 7);
    let mut cases = vec![
        Case::new("conv2d", vec![n(&[2, 3, 5, 5]), n(&[4, 3, 3, 3])], move |g, v| {
            let y = g.conv2d(v[0], v[1], ConvGeom::new(1, 1))?;
            proj(g, y)
        }),
        Case::new(
            "conv2d_strided",
            vec![n(&[1, 2, 6, 6]), n(&[3, 2, 3, 3])],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], ConvGeom::new(2, 1))?;
                proj(g, y)
            },
        ),
        Case::new(
            "conv2d_double_backprop",
            vec![n(&[1, 2, 4, 4]), n(&[3, 2, 3, 3])],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], ConvGeom::new(1, 1))?;
                let y = g.leaky_relu(y, 0.2);
                let s = proj(g, y)?;
                let gr = g.grad_graph(s, &[v[0], v[1]])?;
                let a = g.mul(gr[0], gr[0])?;
                let b = g.mul(gr[1], gr[1])?;
                let (a, b) = (g.sum(a), g.sum(b));
                g.add(a, b)
            },
        ),
        Case::new(
            "spatial_sum_double_backprop",
            vec![n(&[2, 3, 2, 2]), n(&[3])],
            move |g, v| {
                let x = g.add_bc(v[0], v[1])?;
                let x = g.mul(x, x)?;
                let y = g.spatial_sum(x)?;
                // Square again so the adjoint reaching the reduction is not constant.
                let y2 = g.mul(y, y)?;
                let s = proj(g, y2)?;
                let gr = g.grad_graph(s, &[v[0], v[1]])?;
                let a = g.mul(gr[0], gr[0])?;
                let b = g.mul(gr[1], gr[1])?;
                let (a, b) = (g.sum(a), g.sum(b));
                g.add(a, b)
            },
        ),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { n(&[4, 3]) } else { n(&[3, 4]) };
        let b = if tb { n(&[5, 4]) } else { n(&[4, 5]) };
        cases.push(Case::new(
            &format!("matmul_{}{}", ta as u8, tb as u8),
            vec![a, b],
            move |g, v| {
                let y = g.matmul(v[0], v[1], ta, tb)?;
                proj(g, y)
            },
        ));
    }
    let c = n(&[2, 3, 2, 2]);
    cases.extend([
        Case::new("add", vec![n(&[2, 3]), n(&[2, 3])], move |g, v| {
            let y = g.add(v[0], v[1])?;
            proj(g, y)
        }),
        Case::new("sub", vec![n(&[2, 3]), n(&[2, 3])], move |g, v| {
            let y = g.sub(v[0], v[1])?;
            proj(g, y)
        }),
        Case::new("mul", vec![n(&[2, 3]), n(&[2, 3])], move |g, v| {
            let y = g.mul(v[0], v[1])?;
            proj(g, y)
        }),
        Case::new("scale", vec![n(&[2, 3])], move |g, v| {
            let y = g.scale(v[0], -1.7);
            proj(g, y)
        }),
        Case::new("mul_const", vec![n(&[2, 3, 2, 2])], move |g, v| {
            let y = g.mul_const(v[0], c.clone())?;
            proj(g, y)
        }),
        Case::new("scale_rows", vec![n(&[2, 3, 2])], move |g, v| {
            let y = g.scale_rows(v[0], &[0.5, -2.0])?;
            proj(g, y)
        }),
        Case::new("add_bc", vec![n(&[2, 3, 2, 2]), n(&[3]), n(&[2, 3])], move |g, v| {
            let y = g.add_bc(v[0], v[1])?;
            let y = g.add_bc(y, v[2])?;
            proj(g, y)
        }),
        Case::new("mul_bc", vec![n(&[2, 3, 2, 2]), n(&[3]), n(&[2, 3])], move |g, v| {
            let y = g.mul_bc(v[0], v[1])?;
            let y = g.mul_bc(y, v[2])?;
            proj(g, y)
        }),
        Case::new("silu", vec![n(&[2, 3, 2])], move |g, v| {
            let y = g.silu(v[0]);
            proj(g, y)
        }),
        Case::new("leaky_relu", vec![away_from_zero(n(&[2, 3, 2]), 0.05)], move |g, v| {
            let y = g.leaky_relu(v[0], 0.2);
            proj(g, y)
        }),
        Case::new("tanh", vec![n(&[2, 3, 2])], move |g, v| {
            let y = g.tanh(v[0]);
            proj(g, y)
        }),
        Case::new("softplus", vec![n(&[2, 3, 2]).scale(4.0)], move |g, v| {
            let y = g.softplus(v[0]);
            proj(g, y)
        }),
        Case::new("abs", vec![away_from_zero(n(&[2, 3, 2]), 0.05)], move |g, v| {
            let y = g.abs(v[0]);
            proj(g, y)
        }),
        Case::new("group_norm", vec![n(&[2, 4, 3, 3])], move |g, v| {
            let y = g.group_norm(v[0], 2, 1e-6)?;
            proj(g, y)
        }),
        Case::new(
            "attention",
            vec![n(&[2, 4, 5]), n(&[2, 4, 5]), n(&[2, 4, 5])],
            move |g, v| {
                let y = g.attention(v[0], v[1], v[2])?;
                proj(g, y)
            },
        ),
        Case::new("avg_pool2", vec![n(&[2, 2, 4, 4])], move |g, v| {
            let y = g.avg_pool2(v[0])?;
            proj(g, y)
        }),
        Case::new("upsample2", vec![n(&[2, 2, 2, 3])], move |g, v| {
            let y = g.upsample2(v[0])?;
            proj(g, y)
        }),
        Case::new("dwt", vec![n(&[2, 2, 4, 4])], move |g, v| {
            let y = g.dwt(v[0])?;
            proj(g, y)
        }),
        Case::new("idwt", vec![n(&[2, 8, 2, 2])], move |g, v| {
            let y = g.idwt(v[0])?;
            proj(g, y)
        }),
        Case::new(
            "cat_narrow_embed",
            vec![n(&[2, 2, 2, 2]), n(&[2, 3, 2, 2])],
            move |g, v| {
                let y = g.cat_channels(&[v[0], v[1]])?;
                let y = g.narrow_channels(y, 1, 3)?;
                let y = g.embed_channels(y, 2, 6)?;
                proj(g, y)
            },
        ),
        Case::new("reshape_sum_mean_expand", vec![n(&[2, 3, 2])], move |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let p = proj(g, y)?;
            let m = g.mean(v[0]);
            let e = g.expand(m, &[2, 2])?;
            let q = proj(g, e)?;
            let s = g.sum(v[0]);
            let t = g.add(p, q)?;
            g.add(t, s)
        }),
    ]);
    cases
}

/// Smallest configuration exercising every generator block: two levels,
/// eight base channels, attention, `8×8` wavelet input.
pub fn tiny_generator_spec() -> crate::networks::GeneratorSpec {
    crate::networks::GeneratorSpec {
        image_channels: 1,
        image_resolution: 16,
        base_channels: 8,
        channel_mult: vec![1, 1],
        resblocks: 1,
        attention_resolutions: vec![4],
        latent_dim: 4,
        mapping_layers: 2,
        latent_embed_dim: 8,
    }
}

/// Full-network cases: gradients of a projected generator output and of the
/// summed discriminator logits with respect to every parameter and input.
pub fn model_cases(seed: u64) -> Result<Vec<Case>> {
    use crate::networks::{Discriminator, DiscriminatorSpec, Generator};
    use crate::nn::{ParamStore, Params};
    let spec = tiny_generator_spec();
    let mut rng = RngStream::new(seed, "model-cases");
    let (b, r, c) = (2, spec.resolution(), spec.in_channels());
    let t = vec![1, 3];

    let mut gs = ParamStore::new();
    let gen = Generator::new(&spec, &mut gs, &mut rng)?;
    let y = rng.normal_tensor(&[b, c, r, r]);
    let z = rng.normal_tensor(&[b, spec.latent_dim]);
    let mut inputs: Vec<(String, Tensor)> = gs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    inputs.push(("y_t".into(), y));
    let np = gs.len();
    let tg = t.clone();
    let generator = Case {
        name: "generator".into(),
        inputs,
        f: Box::new(move |g, v| {
            let p = Params::from_vars(v[..np].to_vec());
            let out = gen.forward(g, &p, v[np], &z, &tg)?;
            random_projection(g, out, 11)
        }),
    };

    let mut ds = ParamStore::new();
    let disc = Discriminator::new(&DiscriminatorSpec::matching(&spec), &mut ds, &mut rng)?;
    let mut inputs: Vec<(String, Tensor)> = ds.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    inputs.push(("y_prev".into(), rng.normal_tensor(&[b, c, r, r])));
    inputs.push(("y_t".into(), rng.normal_tensor(&[b, c, r, r])));
    let np = ds.len();
    let discriminator = Case {
        name: "discriminator".into(),
        inputs,
        f: Box::new(move |g, v| {
            let p = Params::from_vars(v[..np].to_vec());
            let logits = disc.forward(g, &p, v[np], v[np + 1], &t)?;
            Ok(g.sum(logits))
        }),
    };
    Ok(vec![generator, discriminator])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ConvGeom;

    fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
        ts.into_iter().enumerate().map(|(i, t)| (format!("in{i}"), t)).collect()
    }

    #[test]
    fn dense_layer_passes() {
        let mut rng = RngStream::new(1, "t");
        let inputs = named(vec![
            rng.normal_tensor(&[3, 4]),
            rng.normal_tensor(&[5, 4]),
            rng.normal_tensor(&[5]),
        ]);
        let rep = gradcheck(
            |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                random_projection(g, y, 9)
            },
            &inputs,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn conv_passes() {
        let mut rng = RngStream::new(2, "t");
        let inputs = named(vec![rng.normal_tensor(&[2, 2, 5, 5]), rng.normal_tensor(&[3, 2, 3, 3])]);
        let rep = gradcheck(
            |g, v| {
                let y = g.conv2d(v[0], v[1], ConvGeom::new(2, 1))?;
                random_projection(g, y, 3)
            },
            &inputs,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn dwt_passes_tightly() {
        let mut rng = RngStream::new(3, "t");
        let inputs = named(vec![rng.normal_tensor(&[1, 2, 4, 4])]);
        let opts = GradcheckOptions {
            tolerance: 1e-6,
            ..Default::default()
        };
        let rep = gradcheck(
            |g, v| {
                let y = g.dwt(v[0])?;
                random_projection(g, y, 4)
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let inputs = named(vec![Tensor::ones(&[2])]);
        let res = gradcheck(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let y = g.scale(v[0], calls.get());
                Ok(g.sum(y))
            },
            &inputs,
            &GradcheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::InvalidArgument(_))));
    }
}
