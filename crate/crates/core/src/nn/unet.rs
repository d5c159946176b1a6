//! Encoder-decoder backbone with skip connections and optional time
//! embedding.
//!
//! Parameter layout, in order: time MLP (two dense layers, only when time
//! conditioned), input convolution, encoder residual blocks from the top
//! resolution down, the bottleneck block, decoder blocks from the bottom
//! resolution up, the output normalisation and the output convolution. Each
//! residual block stores `gn1, conv1, [time projection], gn2, conv2, [1x1 skip]`;
//! each layer stores weights before biases (normalisation: scale before shift).

use super::layers::{
    avg_pool2, avg_pool2_backward, concat, silu, silu_backward, silu_batch, silu_batch_backward, split,
    upsample2, upsample2_backward, Batch, Conv2d, Dense, GroupNorm, GroupNormCache, ParamAllocator,
};

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Dense>,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache {
    x: Batch,
    gn1: GroupNormCache,
    a1: Batch,
    h1: Batch,
    gn2: GroupNormCache,
    a2: Batch,
    h3: Batch,
}

impl ResBlock {
    fn new(alloc: &mut ParamAllocator, cin: usize, cout: usize, temb_dim: Option<usize>) -> Self {
        let gn1 = GroupNorm::new(alloc, cin);
        let conv1 = Conv2d::new(alloc, cin, cout, 3, 1.0);
        let time_proj = temb_dim.map(|d| Dense::new(alloc, d, cout, 1.0));
        let gn2 = GroupNorm::new(alloc, cout);
        let conv2 = Conv2d::new(alloc, cout, cout, 3, 0.5);
        let skip = (cin != cout).then(|| Conv2d::new(alloc, cin, cout, 1, 1.0));
        Self {
            gn1,
            conv1,
            time_proj,
            gn2,
            conv2,
            skip,
        }
    }

    fn forward(&self, p: &[f64], x: Batch, temb_act: Option<&[f64]>) -> (Batch, ResCache) {
        let (a1, gn1) = self.gn1.forward(p, &x);
        let h1 = silu_batch(&a1);
        let mut h2 = self.conv1.forward(p, &h1);
        if let (Some(proj), Some(act)) = (&self.time_proj, temb_act) {
            let e = proj.forward(p, act, x.n);
            let hw = h2.plane();
            for i in 0..h2.n {
                let s = h2.sample_mut(i);
                for c in 0..proj.dout {
                    let v = e[i * proj.dout + c];
                    s[c * hw..(c + 1) * hw].iter_mut().for_each(|h| *h += v);
                }
            }
        }
        let (a2, gn2) = self.gn2.forward(p, &h2);
        let h3 = silu_batch(&a2);
        let mut out = self.conv2.forward(p, &h3);
        match &self.skip {
            Some(conv) => {
                let s = conv.forward(p, &x);
                out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
            }
            None => out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v),
        }
        (
            out,
            ResCache {
                x,
                gn1,
                a1,
                h1,
                gn2,
                a2,
                h3,
            },
        )
    }

    fn backward(
        &self,
        p: &[f64],
        cache: &ResCache,
        dy: &Batch,
        g: &mut [f64],
        temb: Option<(&[f64], &mut [f64])>,
    ) -> Batch {
        let dh3 = self.conv2.backward(p, &cache.h3, dy, g);
        let da2 = silu_batch_backward(&cache.a2, &dh3);
        let dh2 = self.gn2.backward(p, &cache.gn2, &da2, g);
        if let (Some(proj), Some((act, dact))) = (&self.time_proj, temb) {
            let hw = dh2.plane();
            let mut de = vec![0.0; dh2.n * proj.dout];
            for i in 0..dh2.n {
                let s = dh2.sample(i);
                for c in 0..proj.dout {
                    de[i * proj.dout + c] = s[c * hw..(c + 1) * hw].iter().sum();
                }
            }
            let d = proj.backward(p, act, &de, dh2.n, g);
            dact.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        let dh1 = self.conv1.backward(p, &cache.h1, &dh2, g);
        let da1 = silu_batch_backward(&cache.a1, &dh1);
        let mut dx = self.gn1.backward(p, &cache.gn1, &da1, g);
        match &self.skip {
            Some(conv) => {
                let ds = conv.backward(p, &cache.x, dy, g);
                dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += b);
            }
            None => dx.data.iter_mut().zip(&dy.data).for_each(|(a, b)| *a += b),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct TimeMlp {
    first: Dense,
    second: Dense,
}

/// Geometry of the backbone.
#[derive(Debug, Clone)]
pub(crate) struct UNetSpec {
    pub in_channels: usize,
    pub levels: Vec<usize>,
    pub channels: Vec<usize>,
    /// Width of the Fourier feature vector fed to the time MLP (`2 * fourier_dim`).
    pub time_features: Option<usize>,
    pub temb_dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    spec: UNetSpec,
    time: Option<TimeMlp>,
    conv_in: Conv2d,
    enc: Vec<ResBlock>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    gn_out: GroupNorm,
    conv_out: Conv2d,
    alloc: ParamAllocator,
}

pub(crate) struct UNetTape {
    n: usize,
    input: Batch,
    features: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    temb: Vec<f64>,
    temb_act: Vec<f64>,
    enc: Vec<ResCache>,
    mid: Option<ResCache>,
    dec: Vec<ResCache>,
    dec_split: Vec<usize>,
    gn_out: Option<GroupNormCache>,
    a_out: Batch,
    h_out: Batch,
}

impl UNet {
    pub fn new(spec: UNetSpec) -> Self {
        let mut alloc = ParamAllocator::default();
        let time = spec.time_features.map(|f| TimeMlp {
            first: Dense::new(&mut alloc, f, spec.temb_dim, 1.0),
            second: Dense::new(&mut alloc, spec.temb_dim, spec.temb_dim, 1.0),
        });
        let temb = time.as_ref().map(|_| spec.temb_dim);
        let ch = &spec.channels;
        let depth = ch.len();
        let conv_in = Conv2d::new(&mut alloc, spec.in_channels, ch[0], 3, 1.0);
        let enc = (0..depth)
            .map(|i| ResBlock::new(&mut alloc, if i == 0 { ch[0] } else { ch[i - 1] }, ch[i], temb))
            .collect();
        let mid = ResBlock::new(&mut alloc, ch[depth - 1], ch[depth - 1], temb);
        let mut dec_rev = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let cur = if i == depth - 1 { ch[depth - 1] } else { ch[i + 1] };
            dec_rev.push(ResBlock::new(&mut alloc, cur + ch[i], ch[i], temb));
        }
        dec_rev.reverse();
        let gn_out = GroupNorm::new(&mut alloc, ch[0]);
        let conv_out = Conv2d::new(&mut alloc, ch[0], 1, 3, 0.0);
        Self {
            spec,
            time,
            conv_in,
            enc,
            mid,
            dec: dec_rev,
            gn_out,
            conv_out,
            alloc,
        }
    }

    pub fn param_count(&self) -> usize {
        self.alloc.total()
    }

    pub fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.alloc.initialise(rng)
    }

    fn pooled_after(&self, i: usize) -> bool {
        i + 1 < self.spec.levels.len() && self.spec.levels[i + 1] < self.spec.levels[i]
    }

    /// Runs the backbone. `features` is `n x time_features` when time
    /// conditioned. Returns a single-channel batch and the tape for
    /// [`UNet::backward`].
    pub fn forward(&self, p: &[f64], input: Batch, features: Vec<f64>) -> (Batch, UNetTape) {
        let n = input.n;
        let (pre1, act1, temb, temb_act) = match &self.time {
            Some(mlp) => {
                let pre1 = mlp.first.forward(p, &features, n);
                let act1 = silu(&pre1);
                let temb = mlp.second.forward(p, &act1, n);
                let temb_act = silu(&temb);
                (pre1, act1, temb, temb_act)
            }
            None => Default::default(),
        };
        let t_act = self.time.as_ref().map(|_| temb_act.as_slice());

        let mut h = self.conv_in.forward(p, &input);
        let depth = self.enc.len();
        let mut skips = Vec::with_capacity(depth);
        let mut enc_caches = Vec::with_capacity(depth);
        for (i, block) in self.enc.iter().enumerate() {
            let (out, cache) = block.forward(p, h, t_act);
            enc_caches.push(cache);
            h = if self.pooled_after(i) { avg_pool2(&out) } else { out.clone() };
            skips.push(out);
        }
        let (mut h, mid_cache) = self.mid.forward(p, h, t_act);
        let mut dec_caches: Vec<Option<ResCache>> = (0..depth).map(|_| None).collect();
        let mut dec_split = vec![0; depth];
        for i in (0..depth).rev() {
            dec_split[i] = h.c;
            let joined = concat(&h, &skips[i]);
            let (out, cache) = self.dec[i].forward(p, joined, t_act);
            dec_caches[i] = Some(cache);
            h = if i > 0 && self.pooled_after(i - 1) { upsample2(&out) } else { out };
        }
        let (a_out, gn_cache) = self.gn_out.forward(p, &h);
        let h_out = silu_batch(&a_out);
        let out = self.conv_out.forward(p, &h_out);
        let tape = UNetTape {
            n,
            input,
            features,
            pre1,
            act1,
            temb,
            temb_act,
            enc: enc_caches,
            mid: Some(mid_cache),
            dec: dec_caches.into_iter().map(|c| c.expect("decoder cache")).collect(),
            dec_split,
            gn_out: Some(gn_cache),
            a_out,
            h_out,
        };
        (out, tape)
    }

    /// Gradient of `<dout, forward(p)>` with respect to every parameter.
    pub fn backward(&self, p: &[f64], tape: &UNetTape, dout: &Batch) -> Vec<f64> {
        let mut g = vec![0.0; self.param_count()];
        let mut dtemb_act = vec![0.0; tape.temb_act.len()];
        let timed = self.time.is_some();

        let dh_out = self.conv_out.backward(p, &tape.h_out, dout, &mut g);
        let da_out = silu_batch_backward(&tape.a_out, &dh_out);
        let mut dh = self.gn_out.backward(p, tape.gn_out.as_ref().expect("tape"), &da_out, &mut g);

        let depth = self.dec.len();
        let mut dskips: Vec<Option<Batch>> = (0..depth).map(|_| None).collect();
        for i in 0..depth {
            if i > 0 && self.pooled_after(i - 1) {
                dh = upsample2_backward(&dh);
            }
            let temb = timed.then(|| (tape.temb_act.as_slice(), dtemb_act.as_mut_slice()));
            let djoined = self.dec[i].backward(p, &tape.dec[i], &dh, &mut g, temb);
            let (dcur, dskip) = split(&djoined, tape.dec_split[i]);
            dskips[i] = Some(dskip);
            dh = dcur;
        }
        let temb = timed.then(|| (tape.temb_act.as_slice(), dtemb_act.as_mut_slice()));
        dh = self.mid.backward(p, tape.mid.as_ref().expect("tape"), &dh, &mut g, temb);
        for i in (0..depth).rev() {
            if self.pooled_after(i) {
                dh = avg_pool2_backward(&dh);
            }
            let dskip = dskips[i].take().expect("skip gradient");
            dh.data.iter_mut().zip(&dskip.data).for_each(|(a, b)| *a += b);
            let temb = timed.then(|| (tape.temb_act.as_slice(), dtemb_act.as_mut_slice()));
            dh = self.enc[i].backward(p, &tape.enc[i], &dh, &mut g, temb);
        }
        self.conv_in.backward(p, &tape.input, &dh, &mut g);

        if let Some(mlp) = &self.time {
            let dtemb = silu_backward(&tape.temb, &dtemb_act);
            let dact1 = mlp.second.backward(p, &tape.act1, &dtemb, tape.n, &mut g);
            let dpre1 = silu_backward(&tape.pre1, &dact1);
            mlp.first.backward(p, &tape.features, &dpre1, tape.n, &mut g);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn full_backbone_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = UNet::new(UNetSpec {
            in_channels: 2,
            levels: vec![8, 4, 2],
            channels: vec![4, 8, 8],
            time_features: Some(6),
            temb_dim: 8,
        });
        let mut p = net.init_params(&mut rng);
        // move away from the zero-initialised output layer
        p.iter_mut().for_each(|v| *v += 0.05 * rng.sample::<f64, _>(StandardNormal));
        let n = 2;
        let mut input = Batch::zeros(n, 2, 8, 8);
        input.data = randn(&mut rng, input.data.len());
        let feats = randn(&mut rng, n * 6);
        let (out, tape) = net.forward(&p, input.clone(), feats.clone());
        let mut dout = out.clone();
        dout.data = randn(&mut rng, out.data.len());
        let g = net.backward(&p, &tape, &dout);
        let loss = |p: &[f64]| -> f64 {
            let (o, _) = net.forward(p, input.clone(), feats.clone());
            o.data.iter().zip(&dout.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // biases feeding single-channel groups have an exactly zero gradient
        let live: Vec<usize> = (0..p.len()).filter(|&i| g[i].abs() > 1e-6 * gmax).collect();
        for _ in 0..40 {
            let idx = live[rng.random_range(0..live.len())];
            let orig = p[idx];
            p[idx] = orig + h;
            let lp = loss(&p);
            p[idx] = orig - h;
            let lm = loss(&p);
            p[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
            assert!(err < 1e-4, "param {idx}: fd {fd} analytic {}", g[idx]);
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = UNet::new(UNetSpec {
            in_channels: 1,
            levels: vec![4, 2],
            channels: vec![4, 4],
            time_features: None,
            temb_dim: 0,
        });
        let p = net.init_params(&mut rng);
        let mut input = Batch::zeros(1, 1, 4, 4);
        input.data = randn(&mut rng, 16);
        let (out, _) = net.forward(&p, input, Vec::new());
        assert!(out.data.iter().all(|&v| v == 0.0));
    }
}
