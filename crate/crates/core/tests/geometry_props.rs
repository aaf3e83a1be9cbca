use abr::{crop, iou, BoundingBox, Image};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0f32..50.0, 0.0f32..50.0, 0.5f32..40.0, 0.5f32..40.0).prop_map(|(u, v, w, h)| BoundingBox::new(u, v, w, h).unwrap())
}

fn image(h: usize, w: usize, seed: u32) -> Image {
    Image::from_fn(h, w, |y, x| {
        let k = (y * 31 + x * 17 + seed as usize) as f32;
        [(k % 251.0) / 255.0, (k * 3.0 % 253.0) / 255.0, 0.25]
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric(a in bbox(), b in bbox()) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn iou_with_self_is_one(a in bbox()) {
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_in_unit_interval(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn crop_then_paste_is_identity(
        x in 0usize..30, y in 0usize..30, w in 1usize..20, h in 1usize..20, seed in 0u32..1000,
    ) {
        let img = image(50, 50, seed);
        let b = BoundingBox::new(x as f32, y as f32, w as f32, h as f32).unwrap();
        let patch = crop(&img, &b).unwrap();
        prop_assert_eq!((patch.width(), patch.height()), (w, h));
        let mut canvas = Image::filled(50, 50, 0.0);
        canvas.paste(&patch, x, y).unwrap();
        for yy in y..y + h {
            for xx in x..x + w {
                prop_assert_eq!(canvas.pixel(yy, xx), img.pixel(yy, xx));
            }
        }
        let mut copy = img.clone();
        copy.paste(&patch, x, y).unwrap();
        prop_assert_eq!(copy, img);
    }
}
