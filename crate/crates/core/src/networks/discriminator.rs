use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Init, ParamStore, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::{timestep_embedding, DiscriminatorSpec};

pub const LEAKY_SLOPE: f64 = 0.2;

/// `lrelu → conv3×3 → +dense(temb) → lrelu → avgpool → conv3×3`, with skip
/// `conv1×1(avgpool(x))`, summed and scaled by `1/√2`.
struct DownBlock {
    conv1: Conv2d,
    temb: Dense,
    conv2: Conv2d,
    skip: Conv2d,
}

impl DownBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut RngStream) -> Self {
        DownBlock {
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, Init::FanIn, rng),
            temb: Dense::new(store, &format!("{name}.temb"), tdim, cout, Init::FanIn, rng),
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, Init::FanIn, rng),
            skip: Conv2d::pointwise(store, &format!("{name}.skip"), cin, cout, Init::FanIn, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Params, x: Var, temb: Var) -> Result<Var> {
        let h = g.leaky_relu(x, LEAKY_SLOPE);
        let h = self.conv1.forward(g, p, h)?;
        let t = self.temb.forward(g, p, temb)?;
        let h = g.add_bc(h, t)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = g.avg_pool2(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let xs = g.avg_pool2(x)?;
        let s = self.skip.forward(g, p, xs)?;
        let sum = g.add(h, s)?;
        Ok(g.scale(sum, std::f64::consts::FRAC_1_SQRT_2))
    }
}

/// Conditional discriminator `D(y_{t-1}, y_t, t)` returning one logit per sample.
///
/// Built only from ops that support double backpropagation, so the R1
/// penalty can be differentiated with respect to the parameters.
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    temb1: Dense,
    temb2: Dense,
    conv_in: Conv2d,
    blocks: Vec<DownBlock>,
    head: Dense,
}

impl Discriminator {
    pub fn new(spec: &DiscriminatorSpec, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let tdim = spec.time_embed_dim;
        let temb1 = Dense::new(store, "d.temb1", spec.base_channels, tdim, Init::FanIn, rng);
        let temb2 = Dense::new(store, "d.temb2", tdim, tdim, Init::FanIn, rng);
        let conv_in = Conv2d::same3(
            store,
            "d.conv_in",
            2 * spec.in_channels,
            spec.base_channels,
            Init::FanIn,
            rng,
        );
        let mut cur = spec.base_channels;
        let mut blocks = Vec::new();
        for i in 0..spec.levels() {
            let ch = spec.channels(i);
            blocks.push(DownBlock::new(store, &format!("d.down{i}"), cur, ch, tdim, rng));
            cur = ch;
        }
        let head = Dense::new(store, "d.head", cur, 1, Init::FanIn, rng);
        Ok(Discriminator {
            spec: spec.clone(),
            temb1,
            temb2,
            conv_in,
            blocks,
            head,
        })
    }

    /// Logits `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Params, y_prev: Var, y_t: Var, t: &[usize]) -> Result<Var> {
        let (a, b) = (g.shape(y_prev).to_vec(), g.shape(y_t).to_vec());
        let r = self.spec.resolution;
        if a != b || a.len() != 4 || a[1] != self.spec.in_channels || a[2] != r || a[3] != r || a[0] != t.len() {
            return Err(Error::Shape(format!(
                "discriminator pair {:?} / {:?} with {} step indices",
                a,
                b,
                t.len()
            )));
        }
        let e = g.constant(timestep_embedding(t, self.spec.base_channels));
        let h = self.temb1.forward(g, p, e)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let temb = self.temb2.forward(g, p, h)?;

        let x = g.cat_channels(&[y_prev, y_t])?;
        let mut h = self.conv_in.forward(g, p, x)?;
        for blk in &self.blocks {
            h = blk.forward(g, p, h, temb)?;
        }
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = g.spatial_sum(h)?;
        self.head.forward(g, p, h)
    }

    pub fn logits(&self, store: &ParamStore, y_prev: &Tensor, y_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g, false);
        let a = g.constant(y_prev.clone());
        let b = g.constant(y_t.clone());
        let out = self.forward(&mut g, &p, a, b, t)?;
        Ok(g.value(out).clone())
    }
}
