// SPDX-License-Identifier: MIT OR Apache-2.0

//! Property tests over the public API.

use proptest::prelude::*;
use scalewise_core::analysis::image_distance;
use scalewise_core::codec::{decode_ppm, encode_ppm, resize_image, Image};
use scalewise_core::interventions::aqs;
use scalewise_core::numerics::{area_pool, bilinear_upsample, FeatureMap, TokenMatrix};
use scalewise_core::quantizer::quantize;

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(any::<u8>(), h * w * 3).prop_map(move |px| Image::new(h, w, px).unwrap())
}

fn sized_image() -> impl Strategy<Value = Image> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| image(h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_round_trips(img in sized_image()) {
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn image_distance_is_a_metric(a in image(5, 4), b in image(5, 4), c in image(5, 4)) {
        let (ab, ba) = (image_distance(&a, &b).unwrap(), image_distance(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(image_distance(&a, &a).unwrap(), 0.0);
        prop_assert!((0.0..=3f64.sqrt()).contains(&ab));
        let via = image_distance(&a, &c).unwrap() + image_distance(&c, &b).unwrap();
        prop_assert!(ab <= via + 1e-12);
    }

    #[test]
    fn resize_to_same_size_is_identity(img in sized_image()) {
        prop_assert_eq!(resize_image(&img, img.height(), img.width()).unwrap(), img);
    }

    #[test]
    fn upsample_then_pool_keeps_constants(v in -4.0f32..4.0, h in 1usize..6, k in 1usize..5) {
        let src = FeatureMap::filled(2, h, h, v);
        let up = bilinear_upsample(&src, h * k, h * k).unwrap();
        prop_assert!(up.data().iter().all(|&x| x == v));
        let back = area_pool(&up, h, h).unwrap();
        prop_assert!(back.data().iter().all(|&x| x == v));
    }

    #[test]
    fn quantized_sites_are_unit_sign_vectors(data in prop::collection::vec(-5.0f32..5.0, 8 * 9)) {
        let raw = FeatureMap::new(8, 3, 3, data).unwrap();
        let (bits, map) = quantize(&raw, 8).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let site = map.site(y, x);
                let norm: f64 = site.iter().map(|&v| f64::from(v).powi(2)).sum();
                prop_assert!((norm - 1.0).abs() <= 1e-6);
                for (c, &v) in site.iter().enumerate() {
                    prop_assert_eq!(v > 0.0, bits.bit(c, y, x));
                    prop_assert_eq!(v > 0.0, raw.get(c, y, x) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn aqs_blend_stays_between_inputs(
        g in prop::collection::vec(-3.0f32..3.0, 12),
        c in prop::collection::vec(-3.0f32..3.0, 12),
        alpha in prop::option::of(0.0f32..=1.0),
    ) {
        let (gm, cm) = (TokenMatrix::new(3, 4, g).unwrap(), TokenMatrix::new(3, 4, c).unwrap());
        let (out, a) = aqs(&gm, &cm, alpha).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        if let Some(forced) = alpha {
            prop_assert_eq!(a, forced);
        }
        for ((&o, &x), &y) in out.data().iter().zip(gm.data()).zip(cm.data()) {
            prop_assert!(x.min(y) <= o && o <= x.max(y));
        }
    }
}
