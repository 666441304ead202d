//! Multilevel family of residual networks obtained by refining the time grid,
//! and the transfer operators between adjacent levels.
//!
//! Input lift and classifier head are shared by every level and transfer as
//! the identity. Block controls are piecewise constant in time, so refining
//! duplicates each coarse control onto its two fine children.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resnet::{NetworkConfig, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefinementRule {
    /// `K_{l+1} = 2 K_l`.
    #[default]
    IntervalDoubling,
    /// `K_{l+1} = 2 K_l − 1`.
    NodeDoubling,
}

impl RefinementRule {
    pub fn refine(self, blocks: usize) -> usize {
        match self {
            RefinementRule::IntervalDoubling => 2 * blocks,
            RefinementRule::NodeDoubling => 2 * blocks - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    /// 1 is the coarsest level.
    pub level: usize,
    pub cfg: NetworkConfig,
}

impl LevelSpec {
    pub fn blocks(&self) -> usize {
        self.cfg.blocks
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    levels: Vec<LevelSpec>,
    rule: RefinementRule,
}

/// Builds `num_levels` networks from the coarsest configuration.
pub fn build_hierarchy(base: &NetworkConfig, num_levels: usize, rule: RefinementRule) -> Result<Hierarchy> {
    if num_levels == 0 {
        return Err(Error::InvalidConfig("a hierarchy needs at least one level".into()));
    }
    let mut cfg = base.clone();
    cfg.grid = match rule {
        RefinementRule::IntervalDoubling => TimeGrid::Intervals,
        RefinementRule::NodeDoubling => TimeGrid::Nodes,
    };
    cfg.validate()?;
    let mut levels = Vec::with_capacity(num_levels);
    for level in 1..=num_levels {
        if level > 1 {
            cfg = cfg.with_blocks(rule.refine(cfg.blocks));
        }
        levels.push(LevelSpec {
            level,
            cfg: cfg.clone(),
        });
    }
    Ok(Hierarchy { levels, rule })
}

impl Hierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn rule(&self) -> RefinementRule {
        self.rule
    }

    /// Level `l` (1-based).
    pub fn level(&self, l: usize) -> &LevelSpec {
        &self.levels[l - 1]
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn finest(&self) -> &LevelSpec {
        self.levels.last().expect("non-empty hierarchy")
    }

    /// The sub-hierarchy made of levels `1..=l`.
    pub fn truncated(&self, l: usize) -> Hierarchy {
        Hierarchy {
            levels: self.levels[..l].to_vec(),
            rule: self.rule,
        }
    }

    /// Cost of one gradient on level `l` relative to the finest level.
    pub fn cost_factor(&self, l: usize) -> f64 {
        let top = self.num_levels();
        match self.rule {
            RefinementRule::IntervalDoubling => 2f64.powi(l as i32 - top as i32),
            RefinementRule::NodeDoubling => self.level(l).blocks() as f64 / self.finest().blocks() as f64,
        }
    }

    pub fn prolong(&self, coarse: &DVector<f64>, from: usize, to: usize) -> Result<DVector<f64>> {
        prolong(coarse, self.level(from), self.level(to))
    }

    pub fn restrict_gradient(&self, fine: &DVector<f64>, from: usize, to: usize) -> Result<DVector<f64>> {
        restrict_gradient(fine, self.level(from), self.level(to))
    }

    pub fn restrict_params(&self, fine: &DVector<f64>, from: usize, to: usize) -> Result<DVector<f64>> {
        restrict_params(fine, self.level(from), self.level(to))
    }
}

fn check_pair(from: &LevelSpec, to: &LevelSpec, step_up: bool) -> Result<()> {
    let ok = if step_up {
        to.level == from.level + 1
    } else {
        to.level + 1 == from.level
    };
    if !ok {
        return Err(Error::LevelMismatch {
            from: from.level,
            to: to.level,
        });
    }
    Ok(())
}

fn check_vec(v: &DVector<f64>, spec: &LevelSpec) -> Result<()> {
    let expected = spec.cfg.num_params();
    if v.len() != expected {
        return Err(Error::Shape {
            what: "level vector",
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Fine children of coarse block `k`; the second one may not exist under node doubling.
fn children(k: usize, fine_blocks: usize) -> impl Iterator<Item = usize> {
    [2 * k, 2 * k + 1].into_iter().filter(move |&c| c < fine_blocks)
}

fn copy_shared(src: &[f64], src_cfg: &NetworkConfig, dst: &mut [f64], dst_cfg: &NetworkConfig) {
    let (s, d) = (src_cfg.layout(), dst_cfg.layout());
    dst[d.input()].copy_from_slice(&src[s.input()]);
    dst[d.head()].copy_from_slice(&src[s.head()]);
}

/// Duplicates each coarse block onto its fine children.
pub fn prolong(coarse: &DVector<f64>, from: &LevelSpec, to: &LevelSpec) -> Result<DVector<f64>> {
    check_pair(from, to, true)?;
    check_vec(coarse, from)?;
    let (cl, fl) = (from.cfg.layout(), to.cfg.layout());
    let mut fine = DVector::zeros(fl.len());
    let f = fine.as_mut_slice();
    copy_shared(coarse.as_slice(), &from.cfg, f, &to.cfg);
    for k in 0..from.blocks() {
        for c in children(k, to.blocks()) {
            f[fl.block(c)].copy_from_slice(&coarse.as_slice()[cl.block(k)]);
        }
    }
    Ok(fine)
}

/// Transpose of [`prolong`]: sums fine block gradients onto their parent.
pub fn restrict_gradient(fine: &DVector<f64>, from: &LevelSpec, to: &LevelSpec) -> Result<DVector<f64>> {
    check_pair(from, to, false)?;
    check_vec(fine, from)?;
    let (fl, cl) = (from.cfg.layout(), to.cfg.layout());
    let mut coarse = DVector::zeros(cl.len());
    let c = coarse.as_mut_slice();
    copy_shared(fine.as_slice(), &from.cfg, c, &to.cfg);
    for k in 0..to.blocks() {
        let dst = &mut c[cl.block(k)];
        for child in children(k, from.blocks()) {
            for (d, s) in dst.iter_mut().zip(&fine.as_slice()[fl.block(child)]) {
                *d += s;
            }
        }
    }
    Ok(coarse)
}

/// Row-normalized transpose of [`prolong`]: averages the children of each coarse block.
pub fn restrict_params(fine: &DVector<f64>, from: &LevelSpec, to: &LevelSpec) -> Result<DVector<f64>> {
    check_pair(from, to, false)?;
    check_vec(fine, from)?;
    let (fl, cl) = (from.cfg.layout(), to.cfg.layout());
    let mut coarse = DVector::zeros(cl.len());
    let c = coarse.as_mut_slice();
    copy_shared(fine.as_slice(), &from.cfg, c, &to.cfg);
    for k in 0..to.blocks() {
        let kids: Vec<usize> = children(k, from.blocks()).collect();
        let dst = &mut c[cl.block(k)];
        match kids.as_slice() {
            [a, b] => {
                for ((d, x), y) in dst
                    .iter_mut()
                    .zip(&fine.as_slice()[fl.block(*a)])
                    .zip(&fine.as_slice()[fl.block(*b)])
                {
                    *d = 0.5 * (x + y);
                }
            }
            [a] => dst.copy_from_slice(&fine.as_slice()[fl.block(*a)]),
            _ => unreachable!("every coarse block has at least one child"),
        }
    }
    Ok(coarse)
}
