use crate::tensor::Tensor;

pub fn relu6(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    relu6_inplace(y.data_mut());
    y
}

#[inline]
pub fn relu6_inplace(data: &mut [f32]) {
    for v in data {
        *v = v.clamp(0.0, 6.0);
    }
}

/// Mean over the spatial axes; output is `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let inv = 1.0 / plane as f32;
    let data = x
        .data()
        .chunks(plane.max(1))
        .take(n * c)
        .map(|p| p.iter().sum::<f32>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("pool shape")
}
