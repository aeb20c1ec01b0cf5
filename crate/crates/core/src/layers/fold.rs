use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Assignment of `C0` weight-layer output channels to `C0 / B` neurons with
/// `B` branches each: branch `i` of neuron `c` reads channel `c * B + i`.
///
/// In row-major storage that is exactly splitting the channel axis into
/// `[C0 / B, B]`, so folding never moves data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    c0_in: usize,
    branches: usize,
}

impl FoldSpec {
    pub fn new(c0_in: usize, branches: usize) -> Result<Self> {
        if branches == 0 {
            return Err(Error::config("branches", "must be at least 1"));
        }
        if !c0_in.is_multiple_of(branches) {
            return Err(Error::config(
                "branches",
                format!("{c0_in} channels cannot be split into groups of {branches}"),
            ));
        }
        Ok(Self { c0_in, branches })
    }

    pub fn c0_in(&self) -> usize {
        self.c0_in
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn c0_out(&self) -> usize {
        self.c0_in / self.branches
    }

    /// Pre-fold channel feeding branch `branch` of neuron `neuron`.
    pub fn source_channel(&self, neuron: usize, branch: usize) -> usize {
        neuron * self.branches + branch
    }

    fn split_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        match shape.split_last() {
            Some((&c, lead)) if c == self.c0_in => {
                let mut s = lead.to_vec();
                s.extend([self.c0_out(), self.branches]);
                Ok(s)
            }
            _ => Err(Error::dim(
                "fold_channels",
                format!("{shape:?} does not end in {} channels", self.c0_in),
            )),
        }
    }

    /// `[..., C0] -> [..., C0 / B, B]`.
    pub fn fold(&self, x: Tensor) -> Result<Tensor> {
        let s = self.split_shape(x.shape())?;
        x.reshape(&s)
    }

    /// `[..., C0 / B, B] -> [..., C0]`.
    pub fn unfold(&self, x: Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2..] != [self.c0_out(), self.branches] {
            return Err(Error::dim("unfold_channels", format!("{s:?}")));
        }
        let mut out = s[..s.len() - 2].to_vec();
        out.push(self.c0_in);
        x.reshape(&out)
    }

    pub(crate) fn folded_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        self.split_shape(shape)
    }
}
