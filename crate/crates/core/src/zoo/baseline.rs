//! Direct parameter sharing baseline: overwrite the overlapping region of
//! the target slot with the source slot, no adapter involved.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Copy the top-left overlap `source[0..min(rows), 0..min(cols)]` into the
/// target, truncating larger dims and leaving the remainder untouched.
pub fn copy_share(source: &Tensor, target: &mut Tensor) -> Result<()> {
    let (sr, sc) = source.dims2()?;
    let (tr, tc) = target.dims2()?;
    let (r, c) = (sr.min(tr), sc.min(tc));
    if r == 0 || c == 0 {
        return Err(Error::contract(format!(
            "empty overlap between {:?} and {:?}",
            source.shape(),
            target.shape()
        )));
    }
    for i in 0..r {
        for j in 0..c {
            target.data_mut()[i * tc + j] = source.data()[i * sc + j];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn identical_shapes_copy_everything() {
        let mut rng = SplitMix64::new(1);
        let src = Tensor::normal(&[3, 4], 1.0, &mut rng);
        let mut dst = Tensor::zeros(&[3, 4]);
        copy_share(&src, &mut dst).unwrap();
        assert_eq!(dst, src);
    }

    #[test]
    fn larger_source_truncates() {
        let src = Tensor::new(vec![4, 4], (0..16).map(|i| i as _).collect()).unwrap();
        let mut dst = Tensor::zeros(&[2, 3]);
        copy_share(&src, &mut dst).unwrap();
        assert_eq!(dst.data(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn larger_target_keeps_remainder() {
        let src = Tensor::new(vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let mut dst = Tensor::ones(&[3, 3]);
        copy_share(&src, &mut dst).unwrap();
        assert_eq!(
            dst.data(),
            &[9.0, 9.0, 1.0, 9.0, 9.0, 1.0, 1.0, 1.0, 1.0]
        );
    }
}
