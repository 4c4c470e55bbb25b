use rand::Rng;

use super::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::layers::{ChannelFilter, ConvStack};
use crate::nn::{BatchNorm, Mapper, Mlp, Visitor, VisitorMut};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelLayer<T> {
    pub conv: ConvStack<T>,
    /// Projects `X` to width `d` for the multiset when `d_in ≠ d` (layer 0 only).
    pub input_proj: Option<T>,
    /// One per generated graph, `C_l·T_l` in total.
    pub embed: Vec<ChannelFilter<T>>,
    /// Same count as `embed` below the top layer, empty at the top.
    pub pool: Vec<ChannelFilter<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffPoolLayer<T> {
    pub conv: ConvStack<T>,
    /// Maps `H_K` to assignment logits; absent at the top layer.
    pub pool_head: Option<Mlp<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body<T> {
    MultiChannel(Vec<MultiChannelLayer<T>>),
    Flat(ConvStack<T>),
    DiffPool(Vec<DiffPoolLayer<T>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub body: Body<T>,
    pub classifier: Mlp<T>,
}

fn rect_eye(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] = 1.0;
    }
    t
}

impl ModelParams<Tensor> {
    /// Fresh parameters for the body `config.variant` calls for.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        match config.variant {
            Variant::FlatGcn => Self::init_flat(config, rng),
            Variant::DiffpoolGcn => Self::init_diffpool(config, rng),
            _ => Self::init_multi_channel(config, rng),
        }
    }

    /// Multi-channel body for any structurally valid schedule, including
    /// ones the variant rules forbid (e.g. `L = 1, T = 1`).
    pub fn init_multi_channel(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let plans = config.plan_shapes()?;
        let d = config.hidden;
        let mut slot = 0;
        let mut layers = Vec::with_capacity(plans.len());
        for (l, plan) in plans.iter().enumerate() {
            let in_width = if l == 0 { config.d_in } else { d };
            let conv = ConvStack::init(in_width, d, config.steps, plan.channels, &mut slot, rng);
            let input_proj = (in_width != d).then(|| rect_eye(in_width, d));
            let embed = (0..plan.embed_filters)
                .map(|_| ChannelFilter::init(plan.multiset_len, &[d, d, d], rng))
                .collect();
            let pool = match plans.get(l + 1) {
                Some(next) => (0..plan.pool_filters)
                    .map(|_| ChannelFilter::init(plan.multiset_len, &[d, d, next.nodes], rng))
                    .collect(),
                None => Vec::new(),
            };
            layers.push(MultiChannelLayer {
                conv,
                input_proj,
                embed,
                pool,
            });
        }
        Ok(ModelParams {
            body: Body::MultiChannel(layers),
            classifier: Self::classifier(config, rng),
        })
    }

    fn init_flat(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut slot = 0;
        let conv = ConvStack::init(config.d_in, config.hidden, config.steps, 1, &mut slot, rng);
        Ok(ModelParams {
            body: Body::Flat(conv),
            classifier: Self::classifier(config, rng),
        })
    }

    fn init_diffpool(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let plans = config.plan_shapes()?;
        let d = config.hidden;
        let mut slot = 0;
        let layers = (0..plans.len())
            .map(|l| {
                let in_width = if l == 0 { config.d_in } else { d };
                let conv = ConvStack::init(in_width, d, config.steps, 1, &mut slot, rng);
                let pool_head = plans.get(l + 1).map(|next| Mlp::init(&[d, d, next.nodes], rng));
                DiffPoolLayer { conv, pool_head }
            })
            .collect();
        Ok(ModelParams {
            body: Body::DiffPool(layers),
            classifier: Self::classifier(config, rng),
        })
    }

    fn classifier(config: &ModelConfig, rng: &mut impl Rng) -> Mlp<Tensor> {
        Mlp::init(&[config.readout_width(), config.hidden, config.num_classes], rng)
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut Mapper<'_, T, U>) -> ModelParams<U> {
        let body = match &self.body {
            Body::MultiChannel(layers) => Body::MultiChannel(
                layers
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| {
                        let p = format!("layer{l}");
                        MultiChannelLayer {
                            conv: layer.conv.map(&p, f),
                            input_proj: layer.input_proj.as_ref().map(|t| f(&format!("{p}/input_proj"), t)),
                            embed: map_filters(&layer.embed, &p, "embed", f),
                            pool: map_filters(&layer.pool, &p, "pool", f),
                        }
                    })
                    .collect(),
            ),
            Body::Flat(conv) => Body::Flat(conv.map("layer0", f)),
            Body::DiffPool(layers) => Body::DiffPool(
                layers
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| {
                        let p = format!("layer{l}");
                        DiffPoolLayer {
                            conv: layer.conv.map(&p, f),
                            pool_head: layer.pool_head.as_ref().map(|m| m.map(&format!("{p}/pool_head"), f)),
                        }
                    })
                    .collect(),
            ),
        };
        ModelParams {
            body,
            classifier: self.classifier.map("classifier", f),
        }
    }

    /// Every trainable tensor with its checkpoint name, in a fixed order.
    pub fn visit(&self, f: &mut Visitor<'_, T>) {
        match &self.body {
            Body::MultiChannel(layers) => {
                for (l, layer) in layers.iter().enumerate() {
                    let p = format!("layer{l}");
                    layer.conv.visit(&p, f);
                    if let Some(t) = &layer.input_proj {
                        f(&format!("{p}/input_proj"), t);
                    }
                    for (j, filt) in layer.embed.iter().enumerate() {
                        filt.visit(&format!("{p}/graph{}/embed", j + 1), f);
                    }
                    for (j, filt) in layer.pool.iter().enumerate() {
                        filt.visit(&format!("{p}/graph{}/pool", j + 1), f);
                    }
                }
            }
            Body::Flat(conv) => conv.visit("layer0", f),
            Body::DiffPool(layers) => {
                for (l, layer) in layers.iter().enumerate() {
                    let p = format!("layer{l}");
                    layer.conv.visit(&p, f);
                    if let Some(m) = &layer.pool_head {
                        m.visit(&format!("{p}/pool_head"), f);
                    }
                }
            }
        }
        self.classifier.visit("classifier", f);
    }

    /// Same order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        match &mut self.body {
            Body::MultiChannel(layers) => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    let p = format!("layer{l}");
                    layer.conv.visit_mut(&p, f);
                    if let Some(t) = &mut layer.input_proj {
                        f(&format!("{p}/input_proj"), t);
                    }
                    for (j, filt) in layer.embed.iter_mut().enumerate() {
                        filt.visit_mut(&format!("{p}/graph{}/embed", j + 1), f);
                    }
                    for (j, filt) in layer.pool.iter_mut().enumerate() {
                        filt.visit_mut(&format!("{p}/graph{}/pool", j + 1), f);
                    }
                }
            }
            Body::Flat(conv) => conv.visit_mut("layer0", f),
            Body::DiffPool(layers) => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    let p = format!("layer{l}");
                    layer.conv.visit_mut(&p, f);
                    if let Some(m) = &mut layer.pool_head {
                        m.visit_mut(&format!("{p}/pool_head"), f);
                    }
                }
            }
        }
        self.classifier.visit_mut("classifier", f);
    }

    pub fn visit_norms(&self, f: &mut dyn FnMut(&str, &BatchNorm<T>)) {
        for (p, conv) in self.convs() {
            conv.visit_norms(&p, f);
        }
    }

    pub fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNorm<T>)) {
        match &mut self.body {
            Body::MultiChannel(layers) => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    layer.conv.visit_norms_mut(&format!("layer{l}"), f);
                }
            }
            Body::Flat(conv) => conv.visit_norms_mut("layer0", f),
            Body::DiffPool(layers) => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    layer.conv.visit_norms_mut(&format!("layer{l}"), f);
                }
            }
        }
    }

    fn convs(&self) -> Vec<(String, &ConvStack<T>)> {
        match &self.body {
            Body::MultiChannel(layers) => layers
                .iter()
                .enumerate()
                .map(|(l, layer)| (format!("layer{l}"), &layer.conv))
                .collect(),
            Body::Flat(conv) => vec![("layer0".to_string(), conv)],
            Body::DiffPool(layers) => layers
                .iter()
                .enumerate()
                .map(|(l, layer)| (format!("layer{l}"), &layer.conv))
                .collect(),
        }
    }
}

fn map_filters<T, U>(
    filters: &[ChannelFilter<T>],
    prefix: &str,
    path: &str,
    f: &mut Mapper<'_, T, U>,
) -> Vec<ChannelFilter<U>> {
    filters
        .iter()
        .enumerate()
        .map(|(j, filt)| filt.map(&format!("{prefix}/graph{}/{path}", j + 1), f))
        .collect()
}
