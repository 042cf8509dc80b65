//! Generalized causal attention mask over `[condition | clean | noisy]`
//! token sequences. Entry 1 blocks attention, 0 allows it.

use std::fmt::Write as _;

use crate::arplan::ARStepPlan;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    seq: usize,
    c: usize,
    v: usize,
    s: usize,
    blocked: Vec<u8>,
}

impl AttentionMask {
    fn ones(c: usize, v: usize, s: usize) -> Self {
        let seq = c + v + s;
        AttentionMask {
            seq,
            c,
            v,
            s,
            blocked: vec![1; seq * seq],
        }
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    /// Condition length.
    pub fn condition_len(&self) -> usize {
        self.c
    }

    /// Number of clean (visible) tokens.
    pub fn visible_len(&self) -> usize {
        self.v
    }

    /// Number of noisy sample tokens.
    pub fn sample_len(&self) -> usize {
        self.s
    }

    /// Offset of the first noisy token (`c + v`).
    pub fn context_len(&self) -> usize {
        self.c + self.v
    }

    #[inline]
    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.seq + col] == 1
    }

    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        !self.is_blocked(row, col)
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.blocked[row * self.seq + col]
    }

    fn fill(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, value: u8) {
        for r in rows {
            for q in cols.clone() {
                self.blocked[r * self.seq + q] = value;
            }
        }
    }

    /// Allowed columns for each row, in ascending order.
    pub fn allowed_columns(&self) -> Vec<Vec<usize>> {
        (0..self.seq)
            .map(|r| (0..self.seq).filter(|&q| self.allows(r, q)).collect())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.seq * self.seq * 2);
        for r in 0..self.seq {
            for q in 0..self.seq {
                if q > 0 {
                    out.push(',');
                }
                out.push(if self.is_blocked(r, q) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Plain (ASCII) PBM; black pixels are blocked entries.
    pub fn to_pbm(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "P1\n{} {}", self.seq, self.seq);
        for r in 0..self.seq {
            let row: Vec<&str> = (0..self.seq)
                .map(|q| if self.is_blocked(r, q) { "1" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }
}

fn check(s: usize, plan: &ARStepPlan) -> Result<()> {
    if plan.len() != s {
        return Err(Error::invalid(format!(
            "plan covers {} tokens but sample length is {s}",
            plan.len()
        )));
    }
    Ok(())
}

/// Block construction: start from all-blocked, open the condition columns,
/// then write the visible→visible, sample→visible and sample→sample
/// partitions.
pub fn build_mask(s: usize, c: usize, plan: &ARStepPlan) -> Result<AttentionMask> {
    check(s, plan)?;
    let sz = plan.sizes();
    let cs = plan.boundaries();
    let v = s - sz[sz.len() - 1];
    let ctx = c + v;
    let mut m = AttentionMask::ones(c, v, s);
    m.fill(0..m.seq, 0..c, 0);

    let mut vtv = vec![vec![1u8; v]; v];
    let mut stv = vec![vec![1u8; v]; s];
    let mut sts = vec![vec![1u8; s]; s];
    for i in 0..sz.len().saturating_sub(1) {
        for row in vtv.iter_mut().take(cs[i + 1]).skip(cs[i]) {
            row[..cs[i + 1]].fill(0);
        }
        for row in stv.iter_mut().take(cs[i + 2]).skip(cs[i + 1]) {
            row[..cs[i + 1]].fill(0);
        }
    }
    for i in 0..sz.len() {
        for row in sts.iter_mut().take(cs[i + 1]).skip(cs[i]) {
            row[cs[i]..cs[i + 1]].fill(0);
        }
    }

    let seq = m.seq;
    for (r, row) in vtv.iter().enumerate() {
        m.blocked[(c + r) * seq + c..(c + r) * seq + ctx].copy_from_slice(row);
    }
    for (r, row) in stv.iter().enumerate() {
        m.blocked[(ctx + r) * seq + c..(ctx + r) * seq + ctx].copy_from_slice(row);
    }
    for (r, row) in sts.iter().enumerate() {
        m.blocked[(ctx + r) * seq + ctx..(ctx + r) * seq + seq].copy_from_slice(row);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Condition,
    Clean(usize),
    Noisy(usize),
}

/// Rule-based construction, entry by entry, from the attention semantics.
pub fn mask_oracle(s: usize, c: usize, plan: &ARStepPlan) -> Result<AttentionMask> {
    check(s, plan)?;
    let v = plan.visible_len();
    let mut m = AttentionMask::ones(c, v, s);
    let slot = |pos: usize| -> Slot {
        if pos < c {
            Slot::Condition
        } else if pos < c + v {
            Slot::Clean(plan.step_of(pos - c))
        } else {
            Slot::Noisy(plan.step_of(pos - c - v))
        }
    };
    for r in 0..m.seq {
        for q in 0..m.seq {
            let allowed = match (slot(r), slot(q)) {
                (_, Slot::Condition) => true,
                (Slot::Clean(i), Slot::Clean(j)) => j <= i,
                (Slot::Noisy(i), Slot::Clean(j)) => j < i,
                (Slot::Noisy(i), Slot::Noisy(j)) => i == j,
                _ => false,
            };
            if allowed {
                m.blocked[r * m.seq + q] = 0;
            }
        }
    }
    Ok(m)
}
