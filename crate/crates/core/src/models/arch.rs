use super::config::{HeadConfig, SegNetConfig, STAGES};
use super::{Init, Mode, ParamSpec};
use crate::error::Result;
use crate::nn::{Graph, NodeId, ParamStore};

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

fn conv_spec(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
    spec(
        out,
        format!("{prefix}.weight"),
        vec![cout, cin, k, k],
        Init::Kaiming { fan_in: cin * k * k },
    );
    if bias {
        spec(out, format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }
}

type Buffers = Vec<(String, usize, f32)>;

fn conv_bn_spec(
    out: &mut Vec<ParamSpec>,
    buffers: &mut Buffers,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    conv_spec(out, &format!("{prefix}.conv"), cin, cout, k, false);
    spec(out, format!("{prefix}.bn.weight"), vec![cout], Init::Ones);
    spec(out, format!("{prefix}.bn.bias"), vec![cout], Init::Zeros);
    buffers.push((format!("{prefix}.bn.running_mean"), cout, 0.0));
    buffers.push((format!("{prefix}.bn.running_var"), cout, 1.0));
}

fn decoder_channels(cfg: &SegNetConfig, step: usize) -> (usize, usize) {
    let out = cfg.stage_channels((STAGES - step).max(1));
    let inp = if step == 1 {
        cfg.stage_channels(STAGES)
    } else {
        decoder_channels(cfg, step - 1).1 + cfg.stage_channels(STAGES + 1 - step)
    };
    (inp, out)
}

pub(super) fn seg_specs(cfg: &SegNetConfig, root: &str, out: &mut Vec<ParamSpec>, buffers: &mut Buffers) {
    let groups = cfg.multi_scale_groups;
    conv_bn_spec(out, buffers, &format!("{root}.encoder.stem"), 3, cfg.stage_channels(0), 3);
    for s in 1..=STAGES {
        let (cin, cout) = (cfg.stage_channels(s - 1), cfg.stage_channels(s));
        let width = cout / groups;
        let p = format!("{root}.encoder.stage{s}");
        conv_bn_spec(out, buffers, &format!("{p}.reduce"), cin, cout, 1);
        for k in 1..groups {
            conv_bn_spec(out, buffers, &format!("{p}.split{k}"), width, width, 3);
        }
        conv_bn_spec(out, buffers, &format!("{p}.expand"), cout, cout, 1);
        conv_bn_spec(out, buffers, &format!("{p}.shortcut"), cin, cout, 1);
    }
    for step in 1..=STAGES {
        let (cin, cout) = decoder_channels(cfg, step);
        conv_bn_spec(out, buffers, &format!("{root}.decoder.up{step}"), cin, cout, 3);
    }
    let b = cfg.stage_channels(0);
    conv_bn_spec(out, buffers, &format!("{root}.decoder.fuse"), 2 * b, b, 3);
    conv_spec(out, &format!("{root}.head"), b, 1, 1, true);
}

pub(super) fn classifier_specs(cfg: &HeadConfig, root: &str, out: &mut Vec<ParamSpec>) {
    let mut cin = 1;
    for i in 1..=cfg.pool_count {
        conv_spec(out, &format!("{root}.conv{i}"), cin, cfg.conv_channels, 3, true);
        cin = cfg.conv_channels;
    }
    spec(
        out,
        format!("{root}.fc.weight"),
        vec![cfg.out_dim, cfg.conv_channels],
        Init::Lecun { fan_in: cfg.conv_channels },
    );
    spec(out, format!("{root}.fc.bias"), vec![cfg.out_dim], Init::Zeros);
}

pub(super) fn projector_specs(cfg: &HeadConfig, root: &str, out: &mut Vec<ParamSpec>) {
    let mut cin = 1;
    for i in 1..=cfg.pool_count {
        let cout = if i == cfg.pool_count { cfg.out_dim } else { cfg.conv_channels };
        conv_spec(out, &format!("{root}.conv{i}"), cin, cout, 3, true);
        cin = cout;
    }
}

struct Builder<'a> {
    g: &'a mut Graph,
    store: &'a ParamStore,
    mode: Mode,
}

impl Builder<'_> {
    fn conv(&mut self, prefix: &str, x: NodeId, bias: bool) -> Result<NodeId> {
        let w = self.g.param(self.store, &format!("{prefix}.weight"))?;
        let pad = self.g.value(w).shape()[2] / 2;
        let b = if bias {
            Some(self.g.param(self.store, &format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.g.conv2d(x, w, b, pad)
    }

    fn conv_bn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let y = self.conv(&format!("{prefix}.conv"), x, false)?;
        let bn = format!("{prefix}.bn");
        let gamma = self.g.param(self.store, &format!("{bn}.weight"))?;
        let beta = self.g.param(self.store, &format!("{bn}.bias"))?;
        match self.mode {
            Mode::Train => self.g.batch_norm(y, gamma, beta, None, &bn),
            Mode::Eval => {
                let mean = self.store.buffer(&format!("{bn}.running_mean"))?;
                let var = self.store.buffer(&format!("{bn}.running_var"))?;
                self.g.batch_norm(y, gamma, beta, Some((mean, var)), &bn)
            }
        }
    }

    fn conv_bn_relu(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let y = self.conv_bn(prefix, x)?;
        Ok(self.g.relu(y))
    }

    /// Multi-scale residual block: split channels into groups, each group after the first is
    /// convolved together with the previous group's output, so receptive fields grow across
    /// groups.
    fn multi_scale_block(&mut self, prefix: &str, x: NodeId, cout: usize, groups: usize) -> Result<NodeId> {
        let width = cout / groups;
        let reduced = self.conv_bn_relu(&format!("{prefix}.reduce"), x)?;
        let mut outs = Vec::with_capacity(groups);
        outs.push(self.g.slice_channels(reduced, 0, width)?);
        let mut prev: Option<NodeId> = None;
        for k in 1..groups {
            let part = self.g.slice_channels(reduced, k * width, width)?;
            let input = match prev {
                Some(p) => self.g.add(part, p)?,
                None => part,
            };
            let y = self.conv_bn_relu(&format!("{prefix}.split{k}"), input)?;
            outs.push(y);
            prev = Some(y);
        }
        let merged = self.g.concat(&outs)?;
        let main = self.conv_bn(&format!("{prefix}.expand"), merged)?;
        let short = self.conv_bn(&format!("{prefix}.shortcut"), x)?;
        let sum = self.g.add(main, short)?;
        Ok(self.g.relu(sum))
    }
}

pub(super) fn seg_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &SegNetConfig,
    root: &str,
    images: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    let mut b = Builder { g, store, mode };
    let stem = b.conv_bn_relu(&format!("{root}.encoder.stem"), images)?;
    let mut skips = vec![stem];
    let mut x = stem;
    for s in 1..=STAGES {
        let pooled = b.g.max_pool2(x)?;
        x = b.multi_scale_block(
            &format!("{root}.encoder.stage{s}"),
            pooled,
            cfg.stage_channels(s),
            cfg.multi_scale_groups,
        )?;
        skips.push(x);
    }
    for step in 1..=STAGES {
        if step > 1 {
            x = b.g.concat(&[x, skips[STAGES + 1 - step]])?;
        }
        let y = b.conv_bn_relu(&format!("{root}.decoder.up{step}"), x)?;
        x = b.g.upsample2(y)?;
    }
    let fused = b.g.concat(&[x, skips[0]])?;
    let x = b.conv_bn_relu(&format!("{root}.decoder.fuse"), fused)?;
    let logits = b.conv(&format!("{root}.head"), x, true)?;
    Ok(b.g.sigmoid(logits))
}

pub(super) fn classifier_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    root: &str,
    pred: NodeId,
) -> Result<NodeId> {
    let mut b = Builder { g, store, mode: Mode::Eval };
    let mut x = pred;
    for i in 1..=cfg.pool_count {
        let y = b.conv(&format!("{root}.conv{i}"), x, true)?;
        let y = b.g.relu(y);
        x = b.g.max_pool2(y)?;
    }
    let pooled = b.g.global_avg_pool(x)?;
    let w = b.g.param(store, &format!("{root}.fc.weight"))?;
    let bias = b.g.param(store, &format!("{root}.fc.bias"))?;
    let z = b.g.linear(pooled, w, bias)?;
    b.g.l2_normalize(z)
}

pub(super) fn projector_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    root: &str,
    pred: NodeId,
) -> Result<NodeId> {
    let mut b = Builder { g, store, mode: Mode::Eval };
    let mut x = pred;
    for i in 1..=cfg.pool_count {
        let mut y = b.conv(&format!("{root}.conv{i}"), x, true)?;
        if i < cfg.pool_count {
            y = b.g.relu(y);
        }
        x = b.g.max_pool2(y)?;
    }
    b.g.l2_normalize(x)
}
