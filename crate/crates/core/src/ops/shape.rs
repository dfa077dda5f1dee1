use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{strides, Tensor};

/// Copies `src` into a permuted layout: `out.shape[i] = src.shape[axes[i]]`.
pub fn permute_tensor(src: &Tensor, axes: &[usize]) -> Tensor {
    let shape = src.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; axes.len()];
    let mut offset = 0usize;
    let data = src.data();
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Concatenates along `axis`.
pub fn concat_tensors(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::arg("concat", format!("axis {axis} for rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Extracts `len` entries starting at `start` along `axis`.
pub fn slice_tensor(src: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= src.rank() || len == 0 || start + len > src.shape()[axis] {
        return Err(Error::arg(
            "slice",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, src.shape()),
        ));
    }
    let (outer, inner) = outer_inner(src.shape(), axis);
    let n = src.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&src.data()[base..base + len * inner]);
    }
    let mut shape = src.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits along `axis` into consecutive pieces of the given sizes.
pub fn split_tensor(src: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if axis >= src.rank() || sizes.iter().sum::<usize>() != src.shape()[axis] {
        return Err(Error::shape(
            "split",
            format!("sizes {sizes:?} on axis {axis} of {:?}", src.shape()),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = slice_tensor(src, axis, start, len);
            start += len;
            t
        })
        .collect()
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.record(
            "reshape",
            &[x],
            out,
            Box::new(move |_, _, g| vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]),
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::arg("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let out = permute_tensor(self.value(x), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.record(
            "permute",
            &[x],
            out,
            Box::new(move |_, _, g| vec![Some(permute_tensor(g, &inverse))]),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = concat_tensors(&parts, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(self.record(
            "concat",
            xs,
            out,
            Box::new(move |_, _, g| {
                split_tensor(g, axis, &sizes)
                    .expect("concat vjp")
                    .into_iter()
                    .map(Some)
                    .collect()
            }),
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = slice_tensor(self.value(x), axis, start, len)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.record(
            "slice",
            &[x],
            out,
            Box::new(move |_, _, g| {
                let (outer, inner) = outer_inner(&in_shape, axis);
                let n = in_shape[axis];
                let mut gx = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        ))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        if axis >= self.value(x).rank() || sizes.iter().sum::<usize>() != self.shape(x)[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} on axis {axis} of {:?}", self.shape(x)),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape.to_vec(), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn permute_transposes() {
        let t = iota(&[2, 3]);
        let p = permute_tensor(&t, &[1, 0]);
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn split_concat_roundtrip_bit_exact() {
        let a = iota(&[2, 3, 4]).map(|v| v.sin());
        let b = iota(&[2, 5, 4]).map(|v| v.cos() * 1e-300);
        let c = concat_tensors(&[&a, &b], 1).unwrap();
        let parts = split_tensor(&c, 1, &[3, 5]).unwrap();
        assert!(parts[0].bit_eq(&a));
        assert!(parts[1].bit_eq(&b));
    }

    #[test]
    fn concat_rejects_mismatch() {
        assert!(concat_tensors(&[&iota(&[2, 3]), &iota(&[3, 3])], 1).is_err());
        assert!(split_tensor(&iota(&[2, 3]), 1, &[1, 1]).is_err());
    }
}
