use protoguide_core::ImageTensor;

/// Eight 3x8x8 images in two classes: a bright upper half or a bright left
/// half, with per-image brightness offsets.
pub fn toy_images() -> (Vec<ImageTensor>, Vec<usize>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..8 {
        let class = i % 2;
        let offset = (i / 2) as f64 * 0.1;
        let mut data = Vec::with_capacity(3 * 64);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let on = if class == 0 { y < 4 } else { x < 4 };
                    let base = if on { 0.8 } else { -0.8 };
                    data.push(base - offset + 0.05 * c as f64);
                }
            }
        }
        images.push(ImageTensor::new([3, 8, 8], data).unwrap());
        labels.push(class);
    }
    (images, labels)
}
