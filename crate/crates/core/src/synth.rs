//! Paired synthetic ST/SC matrices with planted lagged causal gene chains.
//!
//! A latent series per gene is generated along the spot index (which plays
//! the role of pseudo-time). Root genes are white noise; every other gene is
//! a weighted sum of lagged drivers plus Gaussian noise. The ST matrix is the
//! latent series itself. Each cell is assigned to one spot (contiguous
//! blocks) and observes that spot's latent value plus independent noise, so a
//! gene's SC profile determines its ST profile up to noise.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ExpressionMatrix, Modality};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ChainEdge {
    pub driver: usize,
    pub target: usize,
    pub coefficient: f64,
    pub lag: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_genes: usize,
    pub n_spots: usize,
    pub n_cells: usize,
    pub chain_edges: Vec<ChainEdge>,
    pub noise_sd: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Disjoint chains of `chain_len` genes (`g → g+1`, coefficient 0.9,
    /// lag 1) over the first genes; remaining genes are independent roots.
    pub fn planted_chains(
        n_genes: usize,
        n_spots: usize,
        n_cells: usize,
        n_chains: usize,
        chain_len: usize,
        seed: u64,
    ) -> Self {
        let mut chain_edges = Vec::new();
        for c in 0..n_chains {
            let start = c * chain_len;
            for g in start..start + chain_len.saturating_sub(1) {
                if g + 1 < n_genes {
                    chain_edges.push(ChainEdge {
                        driver: g,
                        target: g + 1,
                        coefficient: 0.9,
                        lag: 1,
                    });
                }
            }
        }
        SynthConfig {
            n_genes,
            n_spots,
            n_cells,
            chain_edges,
            noise_sd: 0.1,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_genes == 0 || self.n_spots == 0 || self.n_cells == 0 {
            return Err(Error::invalid("synthetic dimensions must be positive"));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid("noise_sd must be a positive real"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        for e in &self.chain_edges {
            if e.driver >= self.n_genes || e.target >= self.n_genes {
                return Err(Error::invalid(format!(
                    "edge {} -> {} references a gene outside 0..{}",
                    e.driver, e.target, self.n_genes
                )));
            }
            if e.lag == 0 {
                return Err(Error::invalid("edge lag must be at least 1"));
            }
            if !e.coefficient.is_finite() {
                return Err(Error::invalid("edge coefficient must be finite"));
            }
        }
        topological_order(self.n_genes, &self.chain_edges).map(|_| ())
    }
}

/// Kahn's algorithm; the error names an edge lying on a cycle.
fn topological_order(n: usize, edges: &[ChainEdge]) -> Result<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in edges {
        indegree[e.target] += 1;
        out[e.driver].push(e.target);
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&g| indegree[g] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(g) = queue.pop_front() {
        order.push(g);
        for &t in &out[g] {
            indegree[t] -= 1;
            if indegree[t] == 0 {
                queue.push_back(t);
            }
        }
    }
    if order.len() < n {
        let e = edges
            .iter()
            .find(|e| indegree[e.driver] > 0 && indegree[e.target] > 0)
            .expect("a cycle leaves an edge between unresolved genes");
        return Err(Error::Cyclic {
            from: e.driver,
            to: e.target,
        });
    }
    Ok(order)
}

#[derive(Clone, Debug)]
pub struct SynthData<T> {
    pub st: ExpressionMatrix<T>,
    pub sc: ExpressionMatrix<T>,
    pub edges: Vec<ChainEdge>,
}

pub fn gene_id(i: usize) -> String {
    format!("G{i:04}")
}

/// Generates the ST/SC pair. Identical configs give bit-identical output.
pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<SynthData<T>> {
    cfg.validate()?;
    let order = topological_order(cfg.n_genes, &cfg.chain_edges)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };

    let burn_in = cfg.chain_edges.iter().map(|e| e.lag).sum::<usize>() + 16;
    let len = cfg.n_spots + burn_in;
    let mut incoming: Vec<Vec<&ChainEdge>> = vec![Vec::new(); cfg.n_genes];
    for e in &cfg.chain_edges {
        incoming[e.target].push(e);
    }

    let mut latent = vec![vec![0.0f64; len]; cfg.n_genes];
    for &g in &order {
        let mut series = vec![0.0; len];
        for t in 0..len {
            if incoming[g].is_empty() {
                series[t] = normal();
            } else {
                let mut v = cfg.noise_sd * normal();
                for e in &incoming[g] {
                    if t >= e.lag {
                        v += e.coefficient * latent[e.driver][t - e.lag];
                    }
                }
                series[t] = v;
            }
        }
        latent[g] = series;
    }

    let st_raw = Matrix::from_fn(cfg.n_genes, cfg.n_spots, |g, j| latent[g][burn_in + j]);
    let mut sc_raw = Matrix::zeros(cfg.n_genes, cfg.n_cells);
    for g in 0..cfg.n_genes {
        for c in 0..cfg.n_cells {
            let spot = c * cfg.n_spots / cfg.n_cells;
            sc_raw[(g, c)] = st_raw[(g, spot)] + cfg.noise_sd * normal();
        }
    }

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d40f);
    let mut finish = |m: Matrix<f64>| -> Matrix<T> {
        let min = m.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            let shifted = (m[(r, c)] - min).max(0.0);
            if cfg.dropout_rate > 0.0 && dropout_rng.random::<f64>() < cfg.dropout_rate {
                T::zero()
            } else {
                T::of(shifted)
            }
        })
    };
    let st_vals = finish(st_raw);
    let sc_vals = finish(sc_raw);

    let genes: Vec<String> = (0..cfg.n_genes).map(gene_id).collect();
    let spots = (0..cfg.n_spots).map(|j| format!("spot_{j:04}")).collect();
    let cells = (0..cfg.n_cells).map(|j| format!("cell_{j:04}")).collect();
    Ok(SynthData {
        st: ExpressionMatrix::new(genes.clone(), spots, st_vals, Modality::St)?,
        sc: ExpressionMatrix::new(genes, cells, sc_vals, Modality::Sc)?,
        edges: cfg.chain_edges.clone(),
    })
}

/// `driver,target,coefficient,lag` rows with gene ids.
pub fn edges_csv(edges: &[ChainEdge]) -> String {
    let mut s = String::from("driver,target,coefficient,lag\n");
    for e in edges {
        s.push_str(&format!(
            "{},{},{},{}\n",
            gene_id(e.driver),
            gene_id(e.target),
            e.coefficient,
            e.lag
        ));
    }
    s
}
