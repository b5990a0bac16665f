//! Checkpoint container shared by codec and encoder models.
//!
//! Layout, little-endian: magic "NNCK", u32 parameter count, then per
//! parameter: u32 name length + name bytes, u32 ndim, ndim x u32 dims,
//! numel x f32 values.

use std::io::{Read, Write};

use super::{NnError, Tensor};
use crate::scalar::Scalar;
use crate::util::{read_f32, read_magic, read_u32, write_f32, write_u32};

const MAGIC: &[u8; 4] = b"NNCK";

pub fn write_params<T: Scalar, W: Write>(
    w: &mut W,
    params: &[(String, &Tensor<T>)],
) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    write_u32(w, params.len() as u32)?;
    for (name, tensor) in params {
        let bytes = name.as_bytes();
        write_u32(w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        write_u32(w, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u32(w, d as u32)?;
        }
        for &v in tensor.data() {
            write_f32(w, v.as_f64() as f32)?;
        }
    }
    Ok(())
}

pub fn read_params<T: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>, NnError> {
    if !read_magic(r, MAGIC)? {
        return Err(NnError::Format("bad NNCK magic".into()));
    }
    let count = read_u32(r)? as usize;
    if count > 100_000 {
        return Err(NnError::Format(format!("unreasonable param count {count}")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(NnError::Format("unreasonable name length".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NnError::Format("parameter name not utf-8".into()))?;
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(NnError::Format("unreasonable rank".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 256 << 20 {
            return Err(NnError::Format("unreasonable tensor size".into()));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(T::of(read_f32(r)? as f64));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let a = Tensor::<f32>::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.125]).unwrap();
        let b = Tensor::<f32>::new(&[4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &[("enc.0.w".to_string(), &a), ("enc.0.b".to_string(), &b)])
            .unwrap();
        let back: Vec<(String, Tensor<f32>)> = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "enc.0.w");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);

        // identical bytes when re-written
        let mut buf2 = Vec::new();
        write_params(
            &mut buf2,
            &back.iter().map(|(n, t)| (n.clone(), t)).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_garbage() {
        let r: Result<Vec<(String, Tensor<f32>)>, _> = read_params(&mut &b"JUNKxxxx"[..]);
        assert!(r.is_err());
    }
}
