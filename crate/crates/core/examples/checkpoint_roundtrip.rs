//! Write a small checkpoint to disk, read it back and compare bit for bit.

use esm::tensorstore::{self, DenseTensor, TensorMap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut map = TensorMap::new();
    map.insert("encoder.attn.qkv.weight", DenseTensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, -0.0, 3.25, 1e-40])?);
    map.insert("encoder.ln.bias", DenseTensor::new(vec![2], vec![f32::NAN, f32::INFINITY])?);
    map.insert("step", DenseTensor::new(vec![], vec![1234.0])?);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("tiny.safetensors");
    tensorstore::save_tensor_map(&map, &path)?;
    let bytes = std::fs::read(&path)?;
    let header_len = u64::from_le_bytes(bytes[..8].try_into()?);
    println!("{} bytes on disk, header {header_len} bytes:", bytes.len());
    println!("{}", String::from_utf8_lossy(&bytes[8..8 + header_len as usize]).trim_end());

    let back = tensorstore::load_tensor_map(&path)?;
    for (name, t) in back.iter() {
        println!("{name:<26} shape {:?} values {:?}", t.shape(), t.data());
    }
    println!("bit-identical: {}", back.bit_eq(&map));
    Ok(())
}
