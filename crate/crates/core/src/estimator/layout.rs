use std::ops::Range;

use nalgebra::DVector;

/// Named pieces of the filter state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StateBlock {
    SDot,
    TauM,
    TauF,
    FFt,
    FExt,
}

impl StateBlock {
    pub const ALL: [StateBlock; 5] = [Self::SDot, Self::TauM, Self::TauF, Self::FFt, Self::FExt];
}

/// Layout `[ṡ (n), τ_m (n), τ_F (n), f_FT (6m), f_ext (6l)]` of one
/// submodel's state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub joints: usize,
    pub ft_sensors: usize,
    pub contacts: usize,
}

impl StateLayout {
    pub fn new(joints: usize, ft_sensors: usize, contacts: usize) -> Self {
        Self {
            joints,
            ft_sensors,
            contacts,
        }
    }

    pub fn dim(&self) -> usize {
        3 * self.joints + 6 * self.ft_sensors + 6 * self.contacts
    }

    pub fn range(&self, block: StateBlock) -> Range<usize> {
        let n = self.joints;
        let ft = 3 * n;
        let ext = ft + 6 * self.ft_sensors;
        match block {
            StateBlock::SDot => 0..n,
            StateBlock::TauM => n..2 * n,
            StateBlock::TauF => 2 * n..3 * n,
            StateBlock::FFt => ft..ext,
            StateBlock::FExt => ext..self.dim(),
        }
    }

    /// Range of the `k`-th FT wrench.
    pub fn ft(&self, k: usize) -> Range<usize> {
        let start = self.range(StateBlock::FFt).start + 6 * k;
        start..start + 6
    }

    /// Range of the `k`-th contact wrench.
    pub fn contact(&self, k: usize) -> Range<usize> {
        let start = self.range(StateBlock::FExt).start + 6 * k;
        start..start + 6
    }
}

/// A state vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub layout: StateLayout,
    pub x: DVector<f64>,
}

impl EstimatorState {
    pub fn zeros(layout: StateLayout) -> Self {
        Self {
            layout,
            x: DVector::zeros(layout.dim()),
        }
    }

    pub fn block(&self, block: StateBlock) -> DVector<f64> {
        let r = self.layout.range(block);
        self.x.rows(r.start, r.len()).into_owned()
    }

    pub fn set_block(&mut self, block: StateBlock, values: &DVector<f64>) {
        let r = self.layout.range(block);
        self.x.rows_mut(r.start, r.len()).copy_from(values);
    }
}
