use rand::Rng;

use crate::tensor::Tensor;

/// Random horizontal flip followed by a random crop from the image zero-padded
/// by `size / 8` (at least one pixel) on every side. Output shape equals input.
pub fn flip_and_crop(img: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        ref s => panic!("augmentation expects c×h×w, got {:?}", s),
    };
    let flip = rng.gen_bool(0.5);
    let pad = (h.max(w) / 8).max(1);
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let src = img.data();
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = y as isize + dy;
        let sx = x as isize + dx;
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            return 0.0;
        }
        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
        src[ch * h * w + sy as usize * w + sx]
    })
}
