use crate::Tensor;

/// Sinusoidal position table [max_len x width]: even channels carry
/// sin(pos / 10000^(2i/width)), odd channels the matching cos.
pub fn sinusoidal_table(max_len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0f64; max_len * width];
    for pos in 0..max_len {
        for i in 0..width / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            let angle = pos as f64 * rate;
            data[pos * width + 2 * i] = angle.sin();
            if 2 * i + 1 < width {
                data[pos * width + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![max_len, width], data).expect("positional shape")
}

/// First `len` rows of a position table.
pub fn position_rows(table: &Tensor, len: usize) -> Tensor {
    let (max_len, width) = table.dims2().expect("2-D position table");
    assert!(len <= max_len, "sequence longer than position table");
    let data = table.data()[..len * width].to_vec();
    Tensor::new(vec![len, width], data).expect("positional slice")
}
