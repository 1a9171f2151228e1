//! Part selection: fuse attention across the pre-layers by matrix product,
//! pick the most attended patch per head, and run the last layer on the
//! selected tokens only.

use std::path::Path;

use crate::encoder::{encoder_layer, AttentionStack, LayerParams, Linear};
use crate::error::{Error, Result};
use crate::kernels::gemm_nn;
use crate::params::Bound;
use crate::patch::{PatchConfig, TokenSequence};
use crate::tape::{Tape, Var};
use crate::tensor::{load_tfgt, save_tfgt, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RolloutConfig {
    /// Replace every matrix `a` by `0.5·a + 0.5·I` before multiplying, to
    /// account for residual connections. Off by default.
    pub identity_mix: bool,
}

fn mixed<T: Scalar>(m: &Tensor<T>, cfg: RolloutConfig) -> Tensor<T> {
    if !cfg.identity_mix {
        return m.clone();
    }
    let n = m.shape()[0];
    let half = T::from_f64(0.5);
    let mut out = m.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * half + if i / n == i % n { half } else { T::zero() };
    }
    out
}

fn matmul_sq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = a.shape()[0];
    let mut out = vec![T::zero(); n * n];
    gemm_nn(a.data(), b.data(), &mut out, n, n, n);
    Tensor::new([n, n], out).expect("square product")
}

/// Per head, `a_final = a_{L-1} · a_{L-2} · … · a_1`, so that row 0 reads as
/// the attribution of the CLS output to each input token. Evaluated starting
/// from the latest layer.
pub fn rollout<T: Scalar>(stack: &AttentionStack<T>, cfg: RolloutConfig) -> Vec<Tensor<T>> {
    let last = stack.num_layers() - 1;
    (0..stack.num_heads())
        .map(|h| {
            let mut acc = mixed(stack.matrix(last, h), cfg);
            for l in (0..last).rev() {
                acc = matmul_sq(&acc, &mixed(stack.matrix(l, h), cfg));
            }
            acc
        })
        .collect()
}

/// The same product as [`rollout`], accumulated from the earliest layer.
pub fn rollout_from_input<T: Scalar>(stack: &AttentionStack<T>, cfg: RolloutConfig) -> Vec<Tensor<T>> {
    (0..stack.num_heads())
        .map(|h| {
            let mut acc = mixed(stack.matrix(0, h), cfg);
            for l in 1..stack.num_layers() {
                acc = matmul_sq(&mixed(stack.matrix(l, h), cfg), &acc);
            }
            acc
        })
        .collect()
}

/// Row 0 of each head's rollout, computed as a chain of vector–matrix
/// products without forming the full matrices.
pub fn cls_rollout<T: Scalar>(stack: &AttentionStack<T>, cfg: RolloutConfig) -> Vec<Vec<T>> {
    let n = stack.size();
    let last = stack.num_layers() - 1;
    let half = T::from_f64(0.5);
    (0..stack.num_heads())
        .map(|h| {
            let mut row = stack.matrix(last, h).row(0).to_vec();
            if cfg.identity_mix {
                row.iter_mut().for_each(|v| *v = *v * half);
                row[0] = row[0] + half;
            }
            for l in (0..last).rev() {
                let mut next = vec![T::zero(); n];
                gemm_nn(&row, stack.matrix(l, h).data(), &mut next, 1, n, n);
                if cfg.identity_mix {
                    for (nv, &rv) in next.iter_mut().zip(&row) {
                        *nv = *nv * half + rv * half;
                    }
                }
                row = next;
            }
            row
        })
        .collect()
}

/// For each CLS row, the argmax over patch columns `1..n` (lowest index wins
/// ties) and the winning value.
pub fn select_rows<T: Scalar>(cls_rows: &[Vec<T>]) -> Result<(Vec<usize>, Vec<T>)> {
    let mut indices = Vec::with_capacity(cls_rows.len());
    let mut scores = Vec::with_capacity(cls_rows.len());
    for row in cls_rows {
        if row.len() < 2 {
            return Err(Error::Degenerate("attention has no patch tokens to select from".into()));
        }
        let mut best = 1;
        for j in 2..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        indices.push(best);
        scores.push(row[best]);
    }
    Ok((indices, scores))
}

/// Select one patch index per head from full rollout matrices (CLS row).
pub fn select<T: Scalar>(rollout: &[Tensor<T>]) -> Result<(Vec<usize>, Vec<T>)> {
    let rows: Vec<Vec<T>> = rollout.iter().map(|m| m.row(0).to_vec()).collect();
    select_rows(&rows)
}

/// Rollout matrices per head together with the chosen patch indices
/// (`1..=N`, CLS excluded) and their rollout scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult<T: Scalar = f32> {
    pub rollout: Vec<Tensor<T>>,
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
}

impl<T: Scalar> SelectionResult<T> {
    pub fn from_stack(stack: &AttentionStack<T>, cfg: RolloutConfig) -> Result<Self> {
        let rollout = rollout(stack, cfg);
        let (indices, scores) = select(&rollout)?;
        Ok(Self {
            rollout,
            indices,
            scores,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.indices.len()
    }

    /// Row 0 of every head's rollout.
    pub fn cls_rows(&self) -> Vec<&[T]> {
        self.rollout.iter().map(|m| m.row(0)).collect()
    }
}

/// `[z^0; z^{A_1}; …; z^{A_K}]` for every sequence. `indices[b]` lists the
/// selected token positions of sequence `b` in head order; each must lie in
/// `1..len`.
pub fn assemble_local<T: Scalar>(
    tape: &mut Tape<T>,
    z: TokenSequence,
    indices: &[Vec<usize>],
) -> Result<TokenSequence> {
    if indices.len() != z.batch {
        return Err(Error::shape("assemble_local", &[z.batch], &[indices.len()]));
    }
    let k = indices.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::Contract("no selected tokens".into()));
    }
    let mut rows = Vec::with_capacity(z.batch * (k + 1));
    for (b, sel) in indices.iter().enumerate() {
        if sel.len() != k {
            return Err(Error::shape("assemble_local", &[k], &[sel.len()]));
        }
        rows.push(z.row(b, 0));
        for &t in sel {
            if t == 0 || t >= z.len {
                return Err(Error::Contract(format!(
                    "selected index {t} outside patch range 1..={}",
                    z.len - 1
                )));
            }
            rows.push(z.row(b, t));
        }
    }
    let tokens = tape.gather_rows(z.tokens, &rows)?;
    Ok(TokenSequence {
        tokens,
        batch: z.batch,
        len: k + 1,
    })
}

/// Run the reserved last layer over the local sequence and classify its CLS
/// token. Returns `(logits [B, classes], cls [B, D])`.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    z_local: TokenSequence,
    last: &LayerParams,
    head: &Linear,
    heads: usize,
) -> Result<(Var, Var)> {
    let (z, _) = encoder_layer(tape, bound, z_local, last, heads)?;
    classify_cls(tape, bound, z, head)
}

/// Gather each sequence's CLS token and apply the linear head.
pub fn classify_cls<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    z: TokenSequence,
    head: &Linear,
) -> Result<(Var, Var)> {
    let cls_rows: Vec<usize> = (0..z.batch).map(|b| z.row(b, 0)).collect();
    let cls = tape.gather_rows(z.tokens, &cls_rows)?;
    let logits = head.apply(tape, bound, cls)?;
    Ok((logits, cls))
}

/// Write a selection and the patch geometry it refers to. Records, in order:
/// rollout `[K, n, n]`, indices `[K]`, scores `[K]`, geometry
/// `[H, W, C, P, S]`.
pub fn save_selection(path: &Path, sel: &SelectionResult<f32>, geometry: &PatchConfig) -> Result<()> {
    let k = sel.num_heads();
    let n = sel.rollout[0].shape()[0];
    let flat: Vec<f32> = sel.rollout.iter().flat_map(|m| m.data().iter().copied()).collect();
    let rollout = Tensor::new([k, n, n], flat)?;
    let indices = Tensor::new([k], sel.indices.iter().map(|&i| i as f32).collect())?;
    let scores = Tensor::new([k], sel.scores.clone())?;
    let g = geometry;
    let geo = Tensor::new(
        [5],
        [g.height, g.width, g.channels, g.patch, g.stride]
            .iter()
            .map(|&v| v as f32)
            .collect(),
    )?;
    save_tfgt(path, &[&rollout, &indices, &scores, &geo])
}

pub fn load_selection(path: &Path) -> Result<(SelectionResult<f32>, PatchConfig)> {
    let records = load_tfgt::<f32>(path)?;
    let bad = |detail: &str| Error::Format {
        what: "selection dump",
        detail: detail.to_string(),
    };
    let [rollout, indices, scores, geo] =
        <[Tensor<f32>; 4]>::try_from(records).map_err(|r| bad(&format!("expected 4 records, found {}", r.len())))?;
    let &[k, n, n2] = rollout.shape() else {
        return Err(bad("rollout must be [K, n, n]"));
    };
    if n != n2 || indices.shape() != [k] || scores.shape() != [k] || geo.shape() != [5] {
        return Err(bad("inconsistent record shapes"));
    }
    let as_usize = |v: f32| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(bad(&format!("{v} is not an index")))
        }
    };
    let g = geo.data().iter().map(|&v| as_usize(v)).collect::<Result<Vec<_>>>()?;
    let geometry = PatchConfig::new(g[0], g[1], g[2], g[3], g[4])?;
    let rollout = (0..k).map(|h| rollout.index_outer(h)).collect::<Result<Vec<_>>>()?;
    let indices = indices
        .data()
        .iter()
        .map(|&v| as_usize(v))
        .collect::<Result<Vec<_>>>()?;
    if geometry.grid().count + 1 != n {
        return Err(bad("rollout size does not match the patch grid"));
    }
    Ok((
        SelectionResult {
            rollout,
            indices,
            scores: scores.into_data(),
        },
        geometry,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn one_layer_rollout_is_unchanged() {
        let a = m(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        let stack = AttentionStack::new(vec![vec![a.clone()]]).unwrap();
        assert_eq!(rollout(&stack, RolloutConfig::default()), vec![a]);
    }

    #[test]
    fn identity_layers_roll_out_to_identity() {
        let eye = Tensor::<f64>::eye(4);
        let stack = AttentionStack::new(vec![vec![eye.clone(), eye.clone()]; 3]).unwrap();
        for r in rollout(&stack, RolloutConfig::default()) {
            assert_eq!(r, eye);
        }
    }

    #[test]
    fn later_layer_multiplies_on_the_left() {
        let later = m(&[vec![0.5, 0.5], vec![0.25, 0.75]]);
        let earlier = m(&[vec![1.0, 0.0], vec![0.5, 0.5]]);
        let stack = AttentionStack::new(vec![vec![earlier], vec![later]]).unwrap();
        let r = rollout(&stack, RolloutConfig::default());
        assert_eq!(r[0].data(), &[0.75, 0.25, 0.625, 0.375]);
        let rows = cls_rollout(&stack, RolloutConfig::default());
        assert_eq!(rows[0], vec![0.75, 0.25]);
    }

    #[test]
    fn identity_mix_switch() {
        let a = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let stack = AttentionStack::new(vec![vec![a.clone()], vec![a]]).unwrap();
        let cfg = RolloutConfig { identity_mix: true };
        let r = rollout(&stack, cfg);
        // (0.5·A + 0.5·I)² with A a swap
        assert_eq!(r[0].data(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(cls_rollout(&stack, cfg)[0], vec![0.5, 0.5]);
    }

    #[test]
    fn selection_examples() {
        let (idx, scores) = select_rows(&[vec![0.1, 0.5, 0.4], vec![0.2, 0.3, 0.5]]).unwrap();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(scores, vec![0.5, 0.5]);
        let (idx, _) = select_rows(&[vec![0.25; 4]]).unwrap();
        assert_eq!(idx, vec![1]);
        // CLS column is never picked even when it dominates
        let (idx, _) = select_rows(&[vec![0.9, 0.04, 0.06]]).unwrap();
        assert_eq!(idx, vec![2]);
        assert!(matches!(select_rows(&[vec![1.0]]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn assemble_keeps_duplicates_and_rejects_cls() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let z = TokenSequence {
            tokens: tape.constant(Tensor::new([4, 2], data).unwrap()),
            batch: 1,
            len: 4,
        };
        let local = assemble_local(&mut tape, z, &[vec![2]]).unwrap();
        assert_eq!(local.len, 2);
        assert_eq!(tape.value(local.tokens), &[0.0, 1.0, 4.0, 5.0]);
        let dup = assemble_local(&mut tape, z, &[vec![3, 3, 3]]).unwrap();
        assert_eq!(tape.value(dup.tokens), &[0.0, 1.0, 6.0, 7.0, 6.0, 7.0, 6.0, 7.0]);
        assert!(assemble_local(&mut tape, z, &[vec![0]]).is_err());
        assert!(assemble_local(&mut tape, z, &[vec![4]]).is_err());
    }

    #[test]
    fn selection_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.tfgt");
        let geo = PatchConfig::new(4, 4, 1, 2, 2).unwrap();
        let r = Tensor::<f32>::full([5, 5], 0.2);
        let sel = SelectionResult {
            rollout: vec![r.clone(), r],
            indices: vec![3, 1],
            scores: vec![0.2, 0.2],
        };
        save_selection(&path, &sel, &geo).unwrap();
        let (back, g) = load_selection(&path).unwrap();
        assert_eq!(back, sel);
        assert_eq!(g, geo);
    }
}
