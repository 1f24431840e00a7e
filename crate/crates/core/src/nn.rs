//! Parameterised building blocks shared by the network modules.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;

/// Square-kernel convolution with bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
        }
    }

    /// 1x1 convolution, i.e. a per-pixel linear map.
    pub fn linear(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, 1)
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        self.init_scaled(store, rng, (2.0 / fan_in).sqrt());
    }

    pub fn init_scaled<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, std: f64) {
        store.init_normal(rng, self.weight(), &[self.cout, self.cin, self.k, self.k], std);
        store.init_const(self.bias(), &[self.cout], 0.0);
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        store.init_const(self.weight(), &[self.cout, self.cin, self.k, self.k], 0.0);
        store.init_const(self.bias(), &[self.cout], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.weight());
        let b = g.param(&self.bias());
        g.conv2d(x, w, Some(b), self.stride, self.k / 2)
    }

    /// Apply a 1x1 conv to every voxel of a `[C, D, H, W]` volume.
    pub fn forward_volume(&self, g: &mut Graph, vol: Var) -> Var {
        assert_eq!(self.k, 1, "volume convs are pointwise");
        let s = g.shape(vol).to_vec();
        let flat = g.reshape(vol, &[s[0], s[1] * s[2], s[3]]);
        let out = self.forward(g, flat);
        g.reshape(out, &[self.cout, s[1], s[2], s[3]])
    }
}

/// Conv -> InstanceNorm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvInRelu {
    pub conv: Conv,
}

impl ConvInRelu {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            conv: Conv::new(name, cin, cout, k, stride),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.conv.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = g.instance_norm(y);
        g.relu(y)
    }
}

/// LayerNorm over channels with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_const(format!("{}.gamma", self.name), &[self.channels], 1.0);
        store.init_const(format!("{}.beta", self.name), &[self.channels], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(&format!("{}.gamma", self.name));
        let beta = g.param(&format!("{}.beta", self.name));
        g.layer_norm(x, gamma, beta)
    }
}
