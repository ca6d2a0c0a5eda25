use super::Placement;
use crate::error::{Error, Result};
use crate::objective::Pairing;

/// Row layout of a batch of views: `row = view * n_images + image`, with the
/// `n_global` global views first and the `n_local` local views after them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewLayout {
    pub n_images: usize,
    pub n_global: usize,
    pub n_local: usize,
    pub placement: Placement,
}

impl ViewLayout {
    pub fn new(n_images: usize, n_global: usize, n_local: usize, placement: Placement) -> Result<Self> {
        if n_images < 2 {
            return Err(Error::Contract(format!("batch needs at least 2 images, got {n_images}")));
        }
        if n_global == 0 || n_global + n_local < 2 {
            return Err(Error::Parameter(format!(
                "need at least one global view and two views in total, got {n_global}+{n_local}"
            )));
        }
        Ok(ViewLayout { n_images, n_global, n_local, placement })
    }

    pub fn views(&self) -> usize {
        self.n_global + self.n_local
    }

    pub fn rows(&self) -> usize {
        self.views() * self.n_images
    }

    pub fn is_global(&self, view: usize) -> bool {
        view < self.n_global
    }

    /// Views that carry the latent variable.
    ///
    /// With local views present, `Top` selects every global view and `Bottom`
    /// every local view. Without local views the layout is the two-branch
    /// picture: `Top` selects the first view, `Bottom` the last global view.
    pub fn stochastic_views(&self) -> Vec<usize> {
        match (self.placement, self.n_local) {
            (Placement::Top, 0) => vec![0],
            (Placement::Bottom, 0) => vec![self.n_global - 1],
            (Placement::Top, _) => (0..self.n_global).collect(),
            (Placement::Bottom, _) => (self.n_global..self.views()).collect(),
        }
    }

    fn rows_of(&self, views: &[usize]) -> Vec<usize> {
        views
            .iter()
            .flat_map(|&v| (0..self.n_images).map(move |n| v * self.n_images + n))
            .collect()
    }

    pub fn stochastic_rows(&self) -> Vec<usize> {
        self.rows_of(&self.stochastic_views())
    }

    pub fn deterministic_rows(&self) -> Vec<usize> {
        let s = self.stochastic_views();
        let rest: Vec<usize> = (0..self.views()).filter(|v| !s.contains(v)).collect();
        self.rows_of(&rest)
    }

    /// Row of the same image on the deterministic branch (its first such view).
    pub fn opposing_row(&self, row: usize) -> usize {
        let s = self.stochastic_views();
        let view = (0..self.views()).find(|v| !s.contains(v)).expect("a deterministic view exists");
        view * self.n_images + row % self.n_images
    }

    pub fn pairing(&self) -> Result<Pairing> {
        Pairing::multi_crop(self.n_images, self.n_global, self.n_local)
    }
}
