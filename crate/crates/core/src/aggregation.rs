//! Non-overlapping mask aggregation `Y = M·vec(X)`.
//!
//! Coordinate `j` of the composite state is copied from coordinate `j` of
//! exactly one agent, so `M` is stored as an owner per coordinate rather than
//! as a dense `d × N·d` matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffgraph::{Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::sde::MultiAgentState;

/// Row-major image geometry of the composite state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Named mask layouts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskPreset {
    /// Horizontal stripes of whole image rows, top to bottom.
    HStripes,
    /// Vertical stripes of whole image columns, left to right.
    VStripes,
    /// Contiguous chunks of the flattened vector (two agents: two halves).
    Halves,
    /// One coordinate list per agent.
    Explicit(Vec<Vec<usize>>),
}

/// Sizes of `n` contiguous parts of `total`, larger parts first
/// (16 rows over 3 agents gives 6, 5, 5).
pub fn split_sizes(total: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let (q, r) = (total / n, total % n);
    (0..n).map(|i| q + usize::from(i < r)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskAggregator {
    num_agents: usize,
    dim: usize,
    owner: Vec<usize>,
    gather_idx: Vec<usize>,
    image: Option<ImageShape>,
    seams: Vec<(usize, usize)>,
    theta: Vec<Tensor>,
}

impl MaskAggregator {
    /// Build from per-agent coordinate sets, which must partition `0..dim`.
    pub fn from_index_sets(dim: usize, sets: &[Vec<usize>]) -> Result<Self> {
        let n = sets.len();
        if n == 0 || dim == 0 {
            bail!(Config, "aggregator needs at least one agent and a positive dimension");
        }
        let mut owner = vec![usize::MAX; dim];
        for (i, set) in sets.iter().enumerate() {
            for &j in set {
                if j >= dim {
                    bail!(Config, "agent {i} lists coordinate {j} outside 0..{dim}");
                }
                if owner[j] != usize::MAX {
                    bail!(Config, "coordinate {j} is selected by agents {} and {i}", owner[j]);
                }
                owner[j] = i;
            }
        }
        if let Some(j) = owner.iter().position(|&o| o == usize::MAX) {
            bail!(Config, "coordinate {j} is not supplied by any agent");
        }
        let gather_idx = owner.iter().enumerate().map(|(j, &i)| i * dim + j).collect();
        Ok(Self { num_agents: n, dim, owner, gather_idx, image: None, seams: Vec::new(), theta: Vec::new() })
    }

    /// Single agent supplying every coordinate.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_index_sets(dim, &[(0..dim).collect()])
    }

    /// Contiguous chunks of the flattened state.
    pub fn halves(num_agents: usize, dim: usize) -> Result<Self> {
        if num_agents > dim {
            bail!(Config, "cannot split {dim} coordinates over {num_agents} agents");
        }
        let mut start = 0;
        let sets: Vec<Vec<usize>> = split_sizes(dim, num_agents)
            .into_iter()
            .map(|s| {
                let set = (start..start + s).collect();
                start += s;
                set
            })
            .collect();
        Self::from_index_sets(dim, &sets)
    }

    /// Horizontal stripes of image rows; seams join adjacent stripes.
    pub fn h_stripes(num_agents: usize, image: ImageShape) -> Result<Self> {
        if num_agents == 0 || num_agents > image.height {
            bail!(Config, "cannot split {} rows over {num_agents} agents", image.height);
        }
        let mut sets = Vec::with_capacity(num_agents);
        let mut seams = Vec::new();
        let mut row = 0;
        for (i, h) in split_sizes(image.height, num_agents).into_iter().enumerate() {
            if i > 0 {
                seams.push((row - 1, row));
            }
            sets.push((row * image.width..(row + h) * image.width).collect());
            row += h;
        }
        let mut agg = Self::from_index_sets(image.pixels(), &sets)?;
        agg.image = Some(image);
        agg.seams = seams;
        Ok(agg)
    }

    /// Vertical stripes of image columns. These have no horizontal seams.
    pub fn v_stripes(num_agents: usize, image: ImageShape) -> Result<Self> {
        if num_agents == 0 || num_agents > image.width {
            bail!(Config, "cannot split {} columns over {num_agents} agents", image.width);
        }
        let mut sets = Vec::with_capacity(num_agents);
        let mut col = 0;
        for w in split_sizes(image.width, num_agents) {
            let set = (0..image.height).flat_map(|r| (col..col + w).map(move |c| r * image.width + c)).collect();
            sets.push(set);
            col += w;
        }
        let mut agg = Self::from_index_sets(image.pixels(), &sets)?;
        agg.image = Some(image);
        Ok(agg)
    }

    /// Build a preset. Image presets require `image`; `dim` must agree with it.
    pub fn from_preset(preset: &MaskPreset, num_agents: usize, dim: usize, image: Option<ImageShape>) -> Result<Self> {
        if let Some(img) = image {
            if img.pixels() != dim {
                bail!(Config, "image {}x{} does not have {dim} pixels", img.height, img.width);
            }
        }
        let need_image = || match image {
            Some(i) => Ok(i),
            None => Err(crate::Error::Config("stripe presets need an image shape".into())),
        };
        let mut agg = match preset {
            MaskPreset::HStripes => Self::h_stripes(num_agents, need_image()?)?,
            MaskPreset::VStripes => Self::v_stripes(num_agents, need_image()?)?,
            MaskPreset::Halves => Self::halves(num_agents, dim)?,
            MaskPreset::Explicit(sets) => {
                if sets.len() != num_agents {
                    bail!(Config, "explicit mask lists {} agents, expected {num_agents}", sets.len());
                }
                Self::from_index_sets(dim, sets)?
            }
        };
        if agg.image.is_none() {
            agg.image = image;
        }
        Ok(agg)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image(&self) -> Option<ImageShape> {
        self.image
    }

    /// Agent supplying each composite coordinate.
    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    /// Coordinates supplied by agent `i`, ascending.
    pub fn agent_coords(&self, i: usize) -> Vec<usize> {
        self.owner.iter().enumerate().filter(|(_, &o)| o == i).map(|(j, _)| j).collect()
    }

    /// Seam row pairs `(last row of upper stripe, first row of lower stripe)`.
    pub fn seams(&self) -> &[(usize, usize)] {
        &self.seams
    }

    /// Replace the seam pairs (rows must lie inside the image).
    pub fn with_seams(mut self, seams: Vec<(usize, usize)>) -> Result<Self> {
        let Some(img) = self.image else {
            bail!(Config, "seams need an image shape");
        };
        if seams.iter().any(|&(p, q)| p >= img.height || q >= img.height) {
            bail!(Config, "seam row outside the image");
        }
        self.seams = seams;
        Ok(self)
    }

    /// Learnable aggregation parameters. Fixed masks register none.
    pub fn parameters(&self) -> &[Tensor] {
        &self.theta
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.theta
    }

    /// `M Mᵀ = I`, checked on the index sets with integer counts: every
    /// output coordinate selects one source and no source is selected twice.
    pub fn is_orthogonal(&self) -> bool {
        let mut hits = vec![0u32; self.num_agents * self.dim];
        for &c in &self.gather_idx {
            hits[c] += 1;
        }
        self.gather_idx.len() == self.dim && hits.iter().all(|&h| h <= 1)
    }

    /// Dense `d × N·d` selection matrix, for inspection and tests.
    pub fn dense(&self) -> Vec<Vec<u8>> {
        let mut m = vec![vec![0u8; self.num_agents * self.dim]; self.dim];
        for (j, &c) in self.gather_idx.iter().enumerate() {
            m[j][c] = 1;
        }
        m
    }

    /// Column index into the concatenated agent states for each coordinate.
    pub fn gather_indices(&self) -> &[usize] {
        &self.gather_idx
    }

    fn check_agents(&self, n: usize, dims: impl Iterator<Item = usize>) -> Result<()> {
        if n != self.num_agents {
            bail!(Shape, "{n} agent states for an aggregator over {} agents", self.num_agents);
        }
        for d in dims {
            if d != self.dim {
                bail!(Shape, "agent state has dim {d}, aggregator expects {}", self.dim);
            }
        }
        Ok(())
    }

    pub fn aggregate(&self, state: &MultiAgentState) -> Result<Vec<f64>> {
        self.check_agents(state.num_agents(), state.agents().iter().map(|a| a.len()))?;
        Ok(self.owner.iter().enumerate().map(|(j, &i)| state.agent(i)[j]).collect())
    }

    /// Row-wise aggregation of batched agent states (`B × d` each).
    pub fn aggregate_batch(&self, agents: &[&Tensor]) -> Result<Tensor> {
        self.check_agents(agents.len(), agents.iter().map(|a| a.cols()))?;
        let rows = agents[0].rows();
        if agents.iter().any(|a| a.rows() != rows) {
            bail!(Shape, "agent batches differ in size");
        }
        let mut out = Tensor::zeros(rows, self.dim);
        for r in 0..rows {
            for (j, (&i, o)) in self.owner.iter().zip(out.row_mut(r)).enumerate() {
                *o = agents[i].get(r, j);
            }
        }
        Ok(out)
    }

    /// Taped aggregation; its adjoint is [`MaskAggregator::scatter_adjoint`].
    pub fn aggregate_on_tape(&self, tape: &mut Tape, agents: &[Var]) -> Result<Var> {
        self.check_agents(agents.len(), agents.iter().map(|&a| tape.value(a).cols()))?;
        let cat = if agents.len() == 1 { agents[0] } else { tape.concat_cols(agents)? };
        tape.gather_cols(cat, self.gather_idx.clone())
    }

    /// `Mᵀ g` split per agent.
    pub fn scatter_adjoint(&self, grad_y: &[f64]) -> Result<Vec<Vec<f64>>> {
        if grad_y.len() != self.dim {
            bail!(Shape, "gradient has dim {}, aggregator dim is {}", grad_y.len(), self.dim);
        }
        let mut out = vec![vec![0.0; self.dim]; self.num_agents];
        for (j, (&i, &g)) in self.owner.iter().zip(grad_y).enumerate() {
            out[i][j] = g;
        }
        Ok(out)
    }

    /// Batched `Mᵀ g`: the rows of `grad_y` scattered into per-agent batches.
    pub fn scatter_adjoint_batch(&self, grad_y: &Tensor) -> Result<Vec<Tensor>> {
        if grad_y.cols() != self.dim {
            bail!(Shape, "gradient has dim {}, aggregator dim is {}", grad_y.cols(), self.dim);
        }
        let mut out = vec![Tensor::zeros(grad_y.rows(), self.dim); self.num_agents];
        for r in 0..grad_y.rows() {
            for (j, (&i, &g)) in self.owner.iter().zip(grad_y.row(r)).enumerate() {
                out[i].row_mut(r)[j] = g;
            }
        }
        Ok(out)
    }

    /// Total control energy `Σᵢ ‖uⁱ‖²`.
    pub fn control_energy(&self, controls: &[Vec<f64>]) -> Result<f64> {
        self.check_agents(controls.len(), controls.iter().map(|u| u.len()))?;
        Ok(controls.iter().map(|u| crate::math::norm_sq(u)).sum())
    }

    /// Split of the control energy into the part `‖M·vec(u)‖²` that reaches
    /// the composite state and the part on coordinates each agent does not
    /// supply.
    pub fn energy_split(&self, controls: &[Vec<f64>]) -> Result<EnergySplit> {
        self.check_agents(controls.len(), controls.iter().map(|u| u.len()))?;
        let mut selected = 0.0;
        let mut unselected = 0.0;
        for (i, u) in controls.iter().enumerate() {
            for (j, &v) in u.iter().enumerate() {
                if self.owner[j] == i {
                    selected += v * v;
                } else {
                    unselected += v * v;
                }
            }
        }
        Ok(EnergySplit { selected, unselected })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySplit {
    pub selected: f64,
    pub unselected: f64,
}

impl EnergySplit {
    pub fn total(&self) -> f64 {
        self.selected + self.unselected
    }
}
