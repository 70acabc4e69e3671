use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;
use crate::ndgrad::{Array4, Graph, Mode, NodeId, ParamStore, Tape};
use crate::rng::SeededRng;
use crate::synthdata::NUM_OUTPUTS;

/// Encoder stage widths, shallow to deep.
pub const WIDTHS: [usize; 3] = [16, 32, 64];
pub const DROPOUT_RATE: f32 = 0.5;
pub const NUM_TAPS: usize = 6;

/// SegNet-style encoder-decoder with pooling-index unpooling.
///
/// ```text
/// enc1: conv(3->16) relu conv(16->16) relu      -> tap0, pool1
/// enc2: conv(16->32) relu conv(32->32) relu     -> tap1, pool2
/// enc3: conv(32->64) relu conv(64->64) relu     -> tap2, pool3, dropout
/// dec3: unpool3 dropout conv(64->64) relu conv(64->32) relu -> tap3
/// dec2: unpool2 conv(32->32) relu conv(32->16) relu         -> tap4
/// dec1: unpool1 conv(16->16) relu conv(16->16) relu         -> tap5
/// head: conv(16->6) softmax
/// ```
///
/// Both dropout nodes are flagged for MC sampling.
#[derive(Debug)]
pub struct SegNet {
    graph: Graph,
    taps: [NodeId; NUM_TAPS],
    pools: [NodeId; 3],
    logits: NodeId,
    softmax: NodeId,
    forward_passes: AtomicU64,
    backward_passes: AtomicU64,
}

impl Default for SegNet {
    fn default() -> Self {
        Self::new()
    }
}

fn stage(g: &mut Graph, name: &str, x: NodeId, cin: usize, mid: usize, cout: usize) -> NodeId {
    let c1 = g.conv(&format!("{name}.conv1"), x, cin, mid);
    let r1 = g.relu(&format!("{name}.relu1"), c1);
    let c2 = g.conv(&format!("{name}.conv2"), r1, mid, cout);
    g.relu(&format!("{name}.relu2"), c2)
}

impl SegNet {
    pub fn new() -> Self {
        let [w1, w2, w3] = WIDTHS;
        let mut g = Graph::new();
        let x = g.input("image", 3);
        let e1 = stage(&mut g, "enc1", x, 3, w1, w1);
        let p1 = g.maxpool("pool1", e1);
        let e2 = stage(&mut g, "enc2", p1, w1, w2, w2);
        let p2 = g.maxpool("pool2", e2);
        let e3 = stage(&mut g, "enc3", p2, w2, w3, w3);
        let p3 = g.maxpool("pool3", e3);
        let d_enc = g.dropout("enc3.dropout", p3, DROPOUT_RATE, true);
        let u3 = g.unpool("unpool3", d_enc, p3);
        let d_dec = g.dropout("dec3.dropout", u3, DROPOUT_RATE, true);
        let d3 = stage(&mut g, "dec3", d_dec, w3, w3, w2);
        let u2 = g.unpool("unpool2", d3, p2);
        let d2 = stage(&mut g, "dec2", u2, w2, w2, w1);
        let u1 = g.unpool("unpool1", d2, p1);
        let d1 = stage(&mut g, "dec1", u1, w1, w1, w1);
        let logits = g.conv("head", d1, w1, NUM_OUTPUTS);
        let softmax = g.softmax("softmax", logits);
        Self {
            graph: g,
            taps: [e1, e2, e3, d3, d2, d1],
            pools: [p1, p2, p3],
            logits,
            softmax,
            forward_passes: AtomicU64::new(0),
            backward_passes: AtomicU64::new(0),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn logits_node(&self) -> NodeId {
        self.logits
    }

    pub fn softmax_node(&self) -> NodeId {
        self.softmax
    }

    pub fn tap_nodes(&self) -> [NodeId; NUM_TAPS] {
        self.taps
    }

    /// `(channels, downsampling factor)` of each tap, shallow to deep.
    pub fn tap_geometry() -> [(usize, usize); NUM_TAPS] {
        let [w1, w2, w3] = WIDTHS;
        [(w1, 1), (w2, 2), (w3, 4), (w2, 4), (w1, 2), (w1, 1)]
    }

    pub fn init_params(&self, rng: &mut SeededRng) -> ParamStore {
        self.graph.init_params(rng)
    }

    /// Raw forward returning the tape; counts one network pass per image.
    pub fn forward_tape<'a>(
        &'a self,
        params: &'a ParamStore,
        images: &Array4,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<Tape<'a, f32>> {
        self.forward_passes.fetch_add(images.batch() as u64, Ordering::Relaxed);
        self.graph.forward(params, &[images], mode, rng)
    }

    /// Forward pass returning softmax, logits, the six taps and pooling
    /// indices.
    pub fn forward(&self, params: &ParamStore, images: &Array4, mode: Mode, rng: &mut SeededRng) -> Result<SegOutput> {
        let tape = self.forward_tape(params, images, mode, rng)?;
        Ok(SegOutput {
            softmax: tape.value(self.softmax).clone(),
            logits: tape.value(self.logits).clone(),
            taps: self.taps.iter().map(|&t| tape.value(t).clone()).collect(),
            pool_indices: self
                .pools
                .iter()
                .map(|&p| tape.pool_indices(p).expect("pool node").to_vec())
                .collect(),
        })
    }

    /// Records a backward pass over `images` images.
    pub fn note_backward(&self, images: usize) {
        self.backward_passes.fetch_add(images as u64, Ordering::Relaxed);
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
        self.backward_passes.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
pub struct SegOutput {
    pub softmax: Array4,
    pub logits: Array4,
    pub taps: Vec<Array4>,
    pub pool_indices: Vec<Vec<u32>>,
}

impl SegOutput {
    /// Per-pixel argmax class for every batch item, `batch * h * w` entries.
    pub fn predictions(&self) -> Vec<u8> {
        argmax_channels(&self.softmax)
    }
}

/// Channel argmax per pixel; ties go to the lowest channel.
pub fn argmax_channels(probs: &Array4) -> Vec<u8> {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        let img = probs.image(b);
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if img[ch * hw + p] > img[best * hw + p] {
                    best = ch;
                }
            }
            out[b * hw + p] = best as u8;
        }
    }
    out
}
